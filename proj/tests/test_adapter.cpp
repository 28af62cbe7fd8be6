// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "slot/adapter.hpp"
#include "slot/synthetic.hpp"

using slot::Delta;
using slot::LossReduction;
using slot::Matrix;
using slot::SlotConfig;
using slot::TokenSequence;
using Vec = std::vector<double>;

namespace {

Matrix<double> hidden_of(const slot::Checkpoint<double>& ck, const TokenSequence& t) {
    return slot::forward_hidden(ck, t);
}

TEST(ApplyDelta, BroadcastsOverRows) {
    const Matrix<double> h(2, 3, {1, 2, 3, 4, 5, 6});
    const auto out = slot::apply_delta(h, Delta{{0.5, 0, -1}});
    EXPECT_EQ(out, Matrix<double>(2, 3, {1.5, 2, 2, 4.5, 5, 5}));
    EXPECT_EQ(slot::apply_delta(h, Delta::zeros(3)), h);
    EXPECT_THROW(slot::apply_delta(h, Delta::zeros(2)), slot::ShapeError);
}

TEST(ApplyDelta, ShiftsTheRowMeanByDeltaMean) {
    std::mt19937_64 rng(1);
    const auto h = oracle::random_matrix(rng, 5, 8);
    Delta d{Vec(8)};
    for (std::size_t j = 0; j < 8; ++j) d.values[j] = 0.1 * static_cast<double>(j) - 0.2;
    const auto out = slot::apply_delta(h, d);
    for (std::size_t r = 0; r < 5; ++r) {
        double before = 0, after = 0, dm = 0;
        for (std::size_t j = 0; j < 8; ++j) before += h(r, j), after += out(r, j), dm += d.values[j];
        EXPECT_NEAR(after / 8, before / 8 + dm / 8, 1e-14);
    }
}

TEST(PromptLoss, UniformLogitsGiveLogVocab) {
    const Matrix<double> head(4, 3, 0.0);
    const Matrix<double> h(5, 3, 0.7);
    const TokenSequence t{0, 1, 2, 3, 0};
    EXPECT_NEAR(slot::prompt_loss(head, h, Delta::zeros(3), t), std::log(4.0), 1e-15);
    EXPECT_NEAR(slot::prompt_loss(head, h, Delta::zeros(3), t, LossReduction::sum), 4 * std::log(4.0), 1e-14);
}

TEST(PromptLoss, MatchesNaiveOracle) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(2);
    std::mt19937_64 rng(2);
    const auto t = oracle::random_tokens(rng, 12, ck.config.vocab_size);
    const auto H = hidden_of(ck, t);
    Delta d{Vec(ck.config.hidden_dim)};
    std::normal_distribution<double> nd(0, 0.3);
    for (auto& v : d.values) v = nd(rng);
    EXPECT_NEAR(slot::prompt_loss(ck, H, d, t), oracle::naive_loss(ck.lm_head(), H, d.values, t), 1e-10);
    EXPECT_NEAR(slot::prompt_loss(ck, H, d, t, LossReduction::sum),
                oracle::naive_loss(ck.lm_head(), H, d.values, t, false), 1e-9);
}

TEST(PromptLoss, TwoTokenPromptHasOneTerm) {
    Matrix<double> head(3, 2, {1, 0, 0, 1, 1, 1});
    const Matrix<double> h(2, 2, {0.5, -0.5, 9, 9});
    const TokenSequence t{2, 1};
    const double z0 = 0.5, z1 = -0.5, z2 = 0.0;
    const double want = std::log(std::exp(z0) + std::exp(z1) + std::exp(z2)) - z1;
    EXPECT_NEAR(slot::prompt_loss(head, h, Delta::zeros(2), t), want, 1e-15);
}

TEST(PromptLoss, SingleTokenRejected) {
    const Matrix<double> head(3, 2, 0.0);
    EXPECT_THROW(slot::prompt_loss(head, Matrix<double>(1, 2), Delta::zeros(2), TokenSequence{1}), slot::PromptTooShort);
    EXPECT_THROW(slot::prompt_loss(head, Matrix<double>(3, 2), Delta::zeros(2), TokenSequence{1, 2}), slot::ShapeError);
}

TEST(Gradient, MatchesFiniteDifferences) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(3);
    std::mt19937_64 rng(3);
    const auto t = oracle::random_tokens(rng, 9, ck.config.vocab_size);
    const auto H = hidden_of(ck, t);
    Delta d{Vec(ck.config.hidden_dim)};
    std::normal_distribution<double> nd(0, 0.2);
    for (auto& v : d.values) v = nd(rng);
    const auto g = slot::delta_gradient(ck, H, d, t);
    const double h = 1e-5;
    for (std::size_t j = 0; j < d.size(); ++j) {
        Delta up = d, dn = d;
        up.values[j] += h;
        dn.values[j] -= h;
        const double fd = (slot::prompt_loss(ck, H, up, t) - slot::prompt_loss(ck, H, dn, t)) / (2 * h);
        EXPECT_NEAR(g[j], fd, 1e-7 * std::max(1.0, std::abs(fd))) << "coordinate " << j;
    }
    EXPECT_LE(oracle::max_abs_diff(g, oracle::naive_gradient(ck.lm_head(), H, d.values, t)), 1e-12);
}

TEST(Gradient, HandComputedIdentityHead) {
    const auto head = Matrix<double>::identity(2);
    const Matrix<double> h(2, 2, {0, 0, 5, 5});
    // one term, logits (0,0), target 1: softmax - onehot = (0.5, -0.5)
    const auto g = slot::delta_gradient(head, h, Delta::zeros(2), TokenSequence{0, 1});
    EXPECT_NEAR(g[0], 0.5, 1e-15);
    EXPECT_NEAR(g[1], -0.5, 1e-15);
}

TEST(Gradient, VanishesAtPerfectFit) {
    const Matrix<double> head(2, 1, {1, -1});
    const Matrix<double> h(3, 1, {800, 800, 0});
    const TokenSequence t{0, 0, 0};
    const auto g = slot::delta_gradient(head, h, Delta::zeros(1), t);
    EXPECT_EQ(g[0], 0.0);
    EXPECT_EQ(slot::prompt_loss(head, h, Delta::zeros(1), t), 0.0);
}

TEST(Objective, CachedLogitsMatchDirectEvaluation) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(4);
    std::mt19937_64 rng(4);
    const auto t = oracle::random_tokens(rng, 15, ck.config.vocab_size);
    const auto H = hidden_of(ck, t);
    const slot::PromptObjective<double> obj(ck.lm_head(), H, t, LossReduction::mean);
    for (double scale : {0.0, 0.1, 1.0}) {
        Delta d{Vec(ck.config.hidden_dim, scale)};
        const auto e = obj.evaluate(d, true);
        EXPECT_NEAR(e.loss, slot::prompt_loss(ck, H, d, t), 1e-12);
        EXPECT_LE(oracle::max_abs_diff(e.gradient, slot::delta_gradient(ck, H, d, t)), 1e-12);
        EXPECT_TRUE(obj.evaluate(d, false).gradient.empty());
    }
}

SlotConfig cfg_of(const nlohmann::json& c) {
    SlotConfig s;
    s.learning_rate = c["lr"];
    s.weight_decay = c["weight_decay"];
    s.adam_eps = c["eps"];
    s.beta1 = c["betas"][0];
    s.beta2 = c["betas"][1];
    return s;
}

TEST(AdamW, MatchesTorchTraces) {
    std::ifstream in(oracle::fixture_dir() / "adamw_traces.json");
    const auto cases = nlohmann::json::parse(in);
    ASSERT_EQ(cases.size(), 3u);
    for (const auto& c : cases) {
        const auto cfg = cfg_of(c);
        Delta d{c["x0"].get<Vec>()};
        auto state = slot::OptimizerState::zeros(d.size());
        oracle::RefAdamW ref{cfg.learning_rate, cfg.weight_decay, cfg.adam_eps, cfg.beta1, cfg.beta2, {}, {}, 0};
        Vec r = d.values;
        const auto grads = c["grads"].get<std::vector<Vec>>();
        const auto params = c["params"].get<std::vector<Vec>>();
        for (std::size_t k = 0; k < grads.size(); ++k) {
            slot::adamw_step(state, d, grads[k], cfg);
            ref.step(r, grads[k]);
            EXPECT_LE(oracle::max_abs_diff(d.values, params[k]), 1e-12) << c["name"] << " step " << k;
            EXPECT_LE(oracle::max_abs_diff(r, params[k]), 1e-12) << c["name"] << " step " << k;
        }
        EXPECT_EQ(state.t, grads.size());
    }
}

TEST(AdamW, ZeroGradientOnlyDecays) {
    SlotConfig cfg;
    cfg.weight_decay = 0.5;
    Delta d{{2.0, -4.0}};
    auto st = slot::OptimizerState::zeros(2);
    slot::adamw_step(st, d, Vec{0, 0}, cfg);
    EXPECT_DOUBLE_EQ(d.values[0], 2.0 * (1 - 0.01 * 0.5));
    EXPECT_DOUBLE_EQ(d.values[1], -4.0 * (1 - 0.01 * 0.5));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    SlotConfig cfg;
    cfg.weight_decay = 0.0;
    Delta d = Delta::zeros(3);
    auto st = slot::OptimizerState::zeros(3);
    slot::adamw_step(st, d, Vec{3.0, -0.02, 250.0}, cfg);
    // |m_hat / (sqrt(v_hat) + eps)| = |g| / (|g| + eps)
    EXPECT_NEAR(d.values[0], -0.01 * 3.0 / (3.0 + 1e-5), 1e-16);
    EXPECT_NEAR(d.values[1], 0.01 * 0.02 / (0.02 + 1e-5), 1e-16);
    EXPECT_NEAR(d.values[2], -0.01, 1e-8);
}

TEST(AdamW, ClippingScalesTheGradient) {
    SlotConfig cfg;
    cfg.clip_norm = 1.0;
    cfg.weight_decay = 0.0;
    Delta a = Delta::zeros(2), b = Delta::zeros(2);
    auto sa = slot::OptimizerState::zeros(2), sb = slot::OptimizerState::zeros(2);
    slot::adamw_step(sa, a, Vec{30, 40}, cfg);
    cfg.clip_norm.reset();
    slot::adamw_step(sb, b, Vec{0.6, 0.8}, cfg);
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(sa.m, sb.m);
    SlotConfig bad;
    bad.clip_norm = 0.0;
    EXPECT_THROW(bad.validate(), slot::ConfigError);
}

TEST(AdamW, RejectsLengthMismatch) {
    Delta d = Delta::zeros(2);
    auto st = slot::OptimizerState::zeros(2);
    EXPECT_THROW(slot::adamw_step(st, d, Vec{1}, SlotConfig{}), slot::ShapeError);
}

TEST(OptimizeDelta, MatchesRecomputingOracle) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(5);
    std::mt19937_64 rng(5);
    const auto t = oracle::random_tokens(rng, 10, ck.config.vocab_size);
    SlotConfig cfg;
    cfg.steps = 5;
    cfg.learning_rate = 0.1;
    const auto s = slot::optimize_delta(ck, t, cfg);
    const auto ref = oracle::recompute_loss_trace(ck, t, cfg);
    ASSERT_EQ(s.loss_trace.size(), 6u);
    EXPECT_LE(oracle::max_abs_diff(s.loss_trace, ref), 1e-9);
    EXPECT_EQ(s.optimizer.t, 5u);
    EXPECT_LT(s.loss_trace.back(), s.loss_trace.front());
}

TEST(OptimizeDelta, DefaultsLowerTheLoss) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(6);
    const auto s = slot::optimize_delta(ck, TokenSequence{1, 2, 3, 4, 5, 6, 7}, SlotConfig{});
    ASSERT_EQ(s.loss_trace.size(), 4u);
    for (std::size_t k = 1; k < 4; ++k) EXPECT_LT(s.loss_trace[k], s.loss_trace[k - 1]);
}

TEST(OptimizeDelta, ZeroStepsKeepsZeroDelta) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(7);
    SlotConfig cfg;
    cfg.steps = 0;
    const auto s = slot::optimize_delta(ck, TokenSequence{1, 2, 3}, cfg);
    EXPECT_TRUE(s.delta.is_zero());
    EXPECT_EQ(s.loss_trace.size(), 1u);
    EXPECT_FALSE(s.degenerate);
}

TEST(OptimizeDelta, SingleTokenPromptIsDegenerate) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(8);
    const auto s = slot::optimize_delta(ck, TokenSequence{4}, SlotConfig{});
    EXPECT_TRUE(s.degenerate);
    EXPECT_FALSE(s.warning.empty());
    EXPECT_TRUE(s.delta.is_zero());
    EXPECT_TRUE(s.loss_trace.empty());
    const auto g = slot::generate(ck, s, slot::GenerationConfig{});
    EXPECT_EQ(g.tokens, slot::generate_baseline(ck, TokenSequence{4}, slot::GenerationConfig{}).tokens);
    EXPECT_THROW(slot::optimize_delta(ck, TokenSequence{}, SlotConfig{}), slot::ShapeError);
}

TEST(OptimizeDelta, SumReductionScalesGradient) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(9);
    const TokenSequence t{3, 1, 4, 1, 5};
    SlotConfig mean_cfg, sum_cfg;
    mean_cfg.steps = sum_cfg.steps = 1;
    mean_cfg.optimizer = sum_cfg.optimizer = slot::OptimizerKind::gradient_descent;
    sum_cfg.reduction = LossReduction::sum;
    sum_cfg.learning_rate = mean_cfg.learning_rate / 4.0;
    const auto a = slot::optimize_delta(ck, t, mean_cfg);
    const auto b = slot::optimize_delta(ck, t, sum_cfg);
    EXPECT_NEAR(b.loss_trace[0], 4 * a.loss_trace[0], 1e-12);
    EXPECT_LE(oracle::max_abs_diff(a.delta.values, b.delta.values), 1e-15);
}

TEST(OptimizeDelta, PlainGradientDescentDescends) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(10);
    SlotConfig cfg;
    cfg.optimizer = slot::OptimizerKind::gradient_descent;
    cfg.learning_rate = 1e-4;
    cfg.steps = 3;
    const auto s = slot::optimize_delta(ck, TokenSequence{2, 7, 1, 8, 2, 8}, cfg);
    for (std::size_t k = 1; k < s.loss_trace.size(); ++k) EXPECT_LT(s.loss_trace[k], s.loss_trace[k - 1]);
}

TEST(Generate, ZeroDeltaEqualsBaseline) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(11);
    const TokenSequence t{1, 2, 3, 4};
    SlotConfig cfg;
    cfg.steps = 0;
    slot::GenerationConfig g;
    g.max_new_tokens = 20;
    g.record_logits = true;
    g.stop_at_eos = false;
    const auto a = slot::generate(ck, slot::optimize_delta(ck, t, cfg), g);
    const auto b = slot::generate_baseline(ck, t, g);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.step_logits, b.step_logits);
}

TEST(Generate, ZeroNewTokens) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(12);
    slot::GenerationConfig g;
    g.max_new_tokens = 0;
    const auto s = slot::optimize_delta(ck, TokenSequence{1, 2}, SlotConfig{});
    EXPECT_TRUE(slot::generate(ck, s, g).tokens.empty());
    EXPECT_TRUE(slot::generate_baseline(ck, TokenSequence{1, 2}, g).tokens.empty());
}

TEST(Generate, CachedDecodingMatchesRecompute) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(13);
    const TokenSequence t{5, 3, 9, 2, 6};
    SlotConfig cfg;
    cfg.learning_rate = 0.2;
    const auto s = slot::optimize_delta(ck, t, cfg);
    ASSERT_FALSE(s.delta.is_zero());
    slot::GenerationConfig g;
    g.max_new_tokens = 16;
    g.stop_at_eos = false;
    g.record_logits = true;
    const auto out = slot::generate(ck, s, g);
    TokenSequence ref_tokens;
    const auto ref = oracle::recompute_decode(ck, t, s.delta.values, 16, &ref_tokens);
    EXPECT_EQ(out.tokens, ref_tokens);
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_LE(oracle::max_abs_diff(out.step_logits[k], ref[k]), 1e-9);
}

TEST(Generate, SamplingFollowsTemperatureSoftmax) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(14);
    const TokenSequence t{1, 1, 2, 3};
    const auto s = slot::optimize_delta(ck, t, SlotConfig{});
    slot::GenerationConfig g;
    g.greedy = false;
    g.temperature = 0.7;
    g.seed = 99;
    g.max_new_tokens = 12;
    g.stop_at_eos = false;
    const auto out = slot::generate(ck, s, g);

    std::mt19937_64 rng(99);
    TokenSequence seq = t, want;
    for (std::size_t k = 0; k < 12; ++k) {
        const auto H = oracle::naive_hidden(ck, seq);
        Vec h(H.row(H.rows() - 1).begin(), H.row(H.rows() - 1).end());
        for (std::size_t j = 0; j < h.size(); ++j) h[j] += s.delta.values[j];
        auto z = oracle::naive_logits(ck.lm_head(), h);
        const double peak = *std::max_element(z.begin(), z.end());
        double total = 0;
        for (auto& v : z) total += (v = std::exp((v - peak) / 0.7));
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double acc = 0;
        std::size_t pick = z.size() - 1;
        for (std::size_t v = 0; v < z.size(); ++v) {
            acc += z[v] / total;
            if (u < acc) {
                pick = v;
                break;
            }
        }
        want.push_back(static_cast<slot::TokenId>(pick));
        seq.push_back(want.back());
    }
    EXPECT_EQ(out.tokens, want);
    EXPECT_EQ(slot::generate(ck, s, g).tokens, out.tokens);
}

TEST(Generate, StopsAtEosAndContextEnd) {
    auto cfg = slot::synthetic::tiny_config(11, 8, 1, 2, 8);
    auto ck = slot::synthetic::tiny_checkpoint<double>(15, cfg);
    slot::GenerationConfig g;
    g.max_new_tokens = 50;
    g.stop_at_eos = false;
    const auto out = slot::generate_baseline(ck, TokenSequence{1, 2, 3}, g);
    EXPECT_TRUE(out.truncated);
    EXPECT_EQ(out.tokens.size(), 6u);

    g.stop_at_eos = true;
    ck.config.eos_token_id = out.tokens[0];
    const auto stopped = slot::generate_baseline(ck, TokenSequence{1, 2, 3}, g);
    EXPECT_TRUE(stopped.hit_eos);
    EXPECT_EQ(stopped.tokens.size(), 1u);
}

TEST(Generate, SampleIsNotModified) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(16);
    const auto s = slot::optimize_delta(ck, TokenSequence{1, 2, 3}, SlotConfig{});
    const auto len = s.cache.length();
    const auto delta = s.delta.values;
    slot::generate(ck, s, slot::GenerationConfig{});
    EXPECT_EQ(s.cache.length(), len);
    EXPECT_EQ(s.delta.values, delta);
}

TEST(Batch, IdenticalPromptsGiveIdenticalDeltas) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(17);
    const TokenSequence t{4, 4, 2, 9};
    const auto out = slot::run_batch(ck, {t, t, t}, SlotConfig{}, 2);
    ASSERT_TRUE(out[0].ok() && out[1].ok() && out[2].ok());
    EXPECT_EQ(out[0].sample->delta.values, out[1].sample->delta.values);
    EXPECT_EQ(out[1].sample->delta.values, out[2].sample->delta.values);
}

TEST(Batch, IndependentOfOrderBatchSizeAndWorkers) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(18);
    std::mt19937_64 rng(18);
    std::vector<TokenSequence> prompts;
    for (int i = 0; i < 6; ++i) prompts.push_back(oracle::random_tokens(rng, 3 + i, ck.config.vocab_size));
    const auto all = slot::run_batch(ck, prompts, SlotConfig{}, 1);
    auto reversed = prompts;
    std::reverse(reversed.begin(), reversed.end());
    const auto rev = slot::run_batch(ck, reversed, SlotConfig{}, 3);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto single = slot::run_batch(ck, {prompts[i]}, SlotConfig{});
        EXPECT_EQ(single[0].sample->delta.values, all[i].sample->delta.values);
        EXPECT_EQ(rev[prompts.size() - 1 - i].sample->delta.values, all[i].sample->delta.values);
        EXPECT_EQ(single[0].sample->loss_trace, all[i].sample->loss_trace);
    }
}

TEST(Batch, FailuresAreIsolated) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(19);
    const auto out = slot::run_batch(ck, {TokenSequence{1, 2}, TokenSequence{1, 99}, TokenSequence{}, TokenSequence{3, 4}},
                                     SlotConfig{});
    EXPECT_TRUE(out[0].ok());
    EXPECT_FALSE(out[1].ok());
    EXPECT_FALSE(out[1].error.empty());
    EXPECT_FALSE(out[2].ok());
    EXPECT_TRUE(out[3].ok());
}

TEST(Export, JsonRoundTrip) {
    const auto ck = slot::synthetic::tiny_checkpoint<double>(20);
    SlotConfig cfg;
    cfg.clip_norm = 2.5;
    cfg.reduction = LossReduction::sum;
    const auto s = slot::optimize_delta(ck, TokenSequence{1, 5, 2}, cfg);
    const nlohmann::json j = slot::export_sample(s);
    const auto back = nlohmann::json::parse(j.dump()).get<slot::ExportedSample>();
    EXPECT_EQ(back.prompt_ids, s.prompt);
    EXPECT_EQ(back.delta.values, s.delta.values);
    EXPECT_EQ(back.loss_trace, s.loss_trace);
    EXPECT_EQ(back.config.clip_norm, 2.5);
    EXPECT_EQ(back.config.reduction, LossReduction::sum);
    EXPECT_EQ(back.config.steps, 3u);
}

TEST(Config, Validation) {
    SlotConfig c;
    EXPECT_NO_THROW(c.validate());
    c.learning_rate = 0;
    EXPECT_THROW(c.validate(), slot::ConfigError);
    c = SlotConfig{};
    c.beta2 = 1.0;
    EXPECT_THROW(c.validate(), slot::ConfigError);
    c = SlotConfig{};
    c.weight_decay = -1;
    EXPECT_THROW(c.validate(), slot::ConfigError);
}

TEST(Config, DefaultsAreTheDocumentedOnes) {
    const SlotConfig c;
    EXPECT_EQ(c.steps, 3u);
    EXPECT_EQ(c.learning_rate, 0.01);
    EXPECT_EQ(c.weight_decay, 1e-8);
    EXPECT_EQ(c.adam_eps, 1e-5);
    EXPECT_EQ(c.beta1, 0.9);
    EXPECT_EQ(c.beta2, 0.999);
    EXPECT_FALSE(c.clip_norm.has_value());
    EXPECT_EQ(c.reduction, LossReduction::mean);
}

} // namespace
