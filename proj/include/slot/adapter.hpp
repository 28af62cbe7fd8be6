// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// Sample-specific test-time optimization of a single vector delta that is
// added to every row of the final hidden features before the LM head.
//
// Prompt stage: run the decoder once, cache H, then take T optimizer steps on
// the mean next-token cross-entropy of the prompt under logits W(H + delta).
// Because delta only enters after the last layer,
//
//     logits_i(delta) = W H_i + W delta,
//     grad L(delta)   = c * W^T sum_i (softmax(logits_i) - onehot(x_{i+1})),
//
// with c = 1/(n-1) for mean reduction, so each step costs two products with
// W and never touches the decoder again.
//
// Generation stage: decode with the KV cache and add the frozen delta to the
// newest hidden row before the head, which is an O(d) extra per token.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "slot/error.hpp"
#include "slot/model.hpp"
#include "slot/tensor.hpp"

namespace slot {

struct Delta {
    std::vector<double> values;

    static Delta zeros(std::size_t dim) { return Delta{std::vector<double>(dim, 0.0)}; }
    std::size_t size() const noexcept { return values.size(); }
    bool is_zero() const {
        return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; });
    }
};

enum class LossReduction { mean, sum };

// gradient_descent is plain delta -= lr * grad, kept for diagnostics and tests.
enum class OptimizerKind { adamw, gradient_descent };

struct SlotConfig {
    std::size_t steps = 3;
    double learning_rate = 0.01;
    double weight_decay = 1e-8;
    double adam_eps = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::optional<double> clip_norm;  // global L2 norm threshold, off by default
    LossReduction reduction = LossReduction::mean;
    OptimizerKind optimizer = OptimizerKind::adamw;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
        if (!(adam_eps > 0.0)) throw ConfigError("adam eps must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("beta1 and beta2 must lie in [0, 1)");
        }
        if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
    }
};

inline std::string to_string(LossReduction r) { return r == LossReduction::mean ? "mean" : "sum"; }
inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "gradient_descent"; }

inline void to_json(nlohmann::json& j, const SlotConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"learning_rate", c.learning_rate},
                       {"weight_decay", c.weight_decay},
                       {"adam_eps", c.adam_eps},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"clip_norm", c.clip_norm ? nlohmann::json(*c.clip_norm) : nlohmann::json(nullptr)},
                       {"reduction", to_string(c.reduction)},
                       {"optimizer", to_string(c.optimizer)}};
}

inline void from_json(const nlohmann::json& j, SlotConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    if (j.contains("clip_norm") && !j.at("clip_norm").is_null()) c.clip_norm = j.at("clip_norm").get<double>();
    c.reduction = j.value("reduction", std::string("mean")) == "sum" ? LossReduction::sum : LossReduction::mean;
    c.optimizer = j.value("optimizer", std::string("adamw")) == "gradient_descent" ? OptimizerKind::gradient_descent
                                                                                    : OptimizerKind::adamw;
}

struct OptimizerState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t t = 0;

    static OptimizerState zeros(std::size_t dim) {
        return OptimizerState{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0), 0};
    }
};

// H' = H + delta, broadcast over rows.
template <typename H>
Matrix<double> apply_delta(const Matrix<H>& hidden, const Delta& delta) {
    if (hidden.cols() != delta.size()) {
        throw ShapeError("apply_delta: hidden width " + std::to_string(hidden.cols()) + " vs delta length " +
                         std::to_string(delta.size()));
    }
    Matrix<double> out(hidden.rows(), hidden.cols());
    for (std::size_t r = 0; r < hidden.rows(); ++r) {
        auto src = hidden.row(r);
        auto dst = out.row(r);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<double>(src[j]) + delta.values[j];
    }
    return out;
}

namespace detail {

inline void check_prompt(std::size_t hidden_rows, const TokenSequence& prompt) {
    if (prompt.size() != hidden_rows) {
        throw ShapeError("prompt length " + std::to_string(prompt.size()) + " does not match " +
                         std::to_string(hidden_rows) + " hidden rows");
    }
    if (prompt.size() < 2) {
        throw PromptTooShort("prompt has " + std::to_string(prompt.size()) +
                             " token(s); at least two are needed for a next-token loss");
    }
}

inline double reduction_scale(LossReduction r, std::size_t terms) {
    return r == LossReduction::mean ? 1.0 / static_cast<double>(terms) : 1.0;
}

// Cross-entropy of one logits row against `target`. When `residual` is
// non-empty, softmax(row) - onehot(target) is added into it. `row` is
// overwritten with exp(row - max).
inline double accumulate_row(std::span<double> row, TokenId target, std::span<double> residual) {
    const auto t = static_cast<std::size_t>(target);
    const double picked = row[t];
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (auto& v : row) {
        v = std::exp(v - peak);
        total += v;
    }
    if (!residual.empty()) {
        for (std::size_t v = 0; v < row.size(); ++v) residual[v] += row[v] / total;
        residual[t] -= 1.0;
    }
    return peak + std::log(total) - picked;
}

} // namespace detail

// Direct evaluation of the prompt loss under W(H + delta) for an explicit head.
template <typename W, typename H>
double prompt_loss(const Matrix<W>& head, const Matrix<H>& hidden, const Delta& delta, const TokenSequence& prompt,
                   LossReduction reduction = LossReduction::mean) {
    detail::check_prompt(hidden.rows(), prompt);
    const Matrix<double> shifted = apply_delta(hidden, delta);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
        Matrix<double> row(1, shifted.cols(), std::vector<double>(shifted.row(i).begin(), shifted.row(i).end()));
        Matrix<double> logits = matmul_transposed(row, head);
        total += detail::accumulate_row(logits.row(0), prompt[i + 1], {});
    }
    return total * detail::reduction_scale(reduction, prompt.size() - 1);
}

// Analytic gradient of prompt_loss with respect to delta.
template <typename W, typename H>
std::vector<double> delta_gradient(const Matrix<W>& head, const Matrix<H>& hidden, const Delta& delta,
                                   const TokenSequence& prompt, LossReduction reduction = LossReduction::mean) {
    detail::check_prompt(hidden.rows(), prompt);
    const Matrix<double> shifted = apply_delta(hidden, delta);
    std::vector<double> residual(head.rows(), 0.0);
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
        Matrix<double> row(1, shifted.cols(), std::vector<double>(shifted.row(i).begin(), shifted.row(i).end()));
        Matrix<double> logits = matmul_transposed(row, head);
        detail::accumulate_row(logits.row(0), prompt[i + 1], residual);
    }
    std::vector<double> grad = transposed_matvec(head, std::span<const double>(residual));
    const double scale = detail::reduction_scale(reduction, prompt.size() - 1);
    for (auto& g : grad) g *= scale;
    return grad;
}

template <typename T, typename H>
double prompt_loss(const Checkpoint<T>& ckpt, const Matrix<H>& hidden, const Delta& delta, const TokenSequence& prompt,
                   LossReduction reduction = LossReduction::mean) {
    return prompt_loss(ckpt.lm_head(), hidden, delta, prompt, reduction);
}

template <typename T, typename H>
std::vector<double> delta_gradient(const Checkpoint<T>& ckpt, const Matrix<H>& hidden, const Delta& delta,
                                   const TokenSequence& prompt, LossReduction reduction = LossReduction::mean) {
    return delta_gradient(ckpt.lm_head(), hidden, delta, prompt, reduction);
}

// Prompt objective over cached features. The base logits W H_i are computed
// once; each evaluation adds the shift W delta to every row.
template <typename W>
class PromptObjective {
public:
    struct Evaluation {
        double loss = 0.0;
        std::vector<double> gradient;  // empty unless requested
    };

    PromptObjective(const Matrix<W>& head, const Matrix<double>& hidden, const TokenSequence& prompt,
                    LossReduction reduction)
        : head_(head), targets_(prompt.begin() + 1, prompt.end()), reduction_(reduction) {
        detail::check_prompt(hidden.rows(), prompt);
        Matrix<double> scored(hidden.rows() - 1, hidden.cols(),
                              std::vector<double>(hidden.data().begin(),
                                                  hidden.data().end() - static_cast<std::ptrdiff_t>(hidden.cols())));
        base_logits_ = matmul_transposed(scored, head_);
    }

    Evaluation evaluate(const Delta& delta, bool with_gradient) const {
        std::vector<double> shift(head_.rows(), 0.0);
        if (!delta.is_zero()) {
            for (std::size_t v = 0; v < head_.rows(); ++v) shift[v] = dot(head_.row(v), std::span<const double>(delta.values));
        }
        std::vector<double> residual(with_gradient ? head_.rows() : 0, 0.0);
        std::vector<double> row(head_.rows());
        Evaluation out;
        for (std::size_t i = 0; i < targets_.size(); ++i) {
            auto base = base_logits_.row(i);
            for (std::size_t v = 0; v < row.size(); ++v) row[v] = base[v] + shift[v];
            out.loss += detail::accumulate_row(row, targets_[i], residual);
        }
        const double scale = detail::reduction_scale(reduction_, targets_.size());
        out.loss *= scale;
        if (with_gradient) {
            out.gradient = transposed_matvec(head_, std::span<const double>(residual));
            for (auto& g : out.gradient) g *= scale;
        }
        return out;
    }

private:
    const Matrix<W>& head_;
    TokenSequence targets_;
    LossReduction reduction_;
    Matrix<double> base_logits_;
};

// One decoupled-weight-decay Adam update of delta in place.
inline void adamw_step(OptimizerState& state, Delta& delta, std::span<const double> grad, const SlotConfig& cfg) {
    const std::size_t d = delta.size();
    if (grad.size() != d || state.m.size() != d || state.v.size() != d) {
        throw ShapeError("adamw_step: delta, gradient and moment lengths disagree");
    }
    std::vector<double> g(grad.begin(), grad.end());
    if (cfg.clip_norm) {
        double sq = 0.0;
        for (double x : g) sq += x * x;
        const double norm = std::sqrt(sq);
        if (norm > *cfg.clip_norm) {
            const double s = *cfg.clip_norm / norm;
            for (auto& x : g) x *= s;
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t j = 0; j < d; ++j) {
        state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g[j];
        state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        const double m_hat = state.m[j] / bc1;
        const double v_hat = state.v[j] / bc2;
        const double old = delta.values[j];
        delta.values[j] = old - cfg.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * old);
    }
}

inline void gradient_descent_step(OptimizerState& state, Delta& delta, std::span<const double> grad,
                                  const SlotConfig& cfg) {
    if (grad.size() != delta.size()) throw ShapeError("gradient_descent_step: length mismatch");
    state.t += 1;
    for (std::size_t j = 0; j < delta.size(); ++j) delta.values[j] -= cfg.learning_rate * grad[j];
}

inline void optimizer_step(OptimizerState& state, Delta& delta, std::span<const double> grad, const SlotConfig& cfg) {
    if (cfg.optimizer == OptimizerKind::adamw) {
        adamw_step(state, delta, grad, cfg);
    } else {
        gradient_descent_step(state, delta, grad, cfg);
    }
}

// Everything the generation stage needs from the prompt stage.
template <typename T>
struct AdaptedSample {
    TokenSequence prompt;
    Delta delta;
    Matrix<double> cached_hidden;     // [n x d], computed once
    std::vector<double> loss_trace;   // loss at delta^(0), then after each step
    OptimizerState optimizer;
    KvCache<T> cache;                 // positions 0..n-1 already consumed
    SlotConfig config;
    bool degenerate = false;          // prompt too short to optimize; delta left at zero
    std::string warning;
};

template <typename T>
AdaptedSample<T> optimize_delta(const Checkpoint<T>& ckpt, const TokenSequence& prompt, const SlotConfig& cfg) {
    cfg.validate();
    if (prompt.empty()) throw ShapeError("optimize_delta: empty prompt");
    AdaptedSample<T> s;
    s.prompt = prompt;
    s.config = cfg;
    s.cache = KvCache<T>(ckpt.config);
    s.cached_hidden = forward_hidden(ckpt, prompt, &s.cache).template cast<double>();
    const std::size_t d = ckpt.config.hidden_dim;
    s.delta = Delta::zeros(d);
    s.optimizer = OptimizerState::zeros(d);

    if (prompt.size() < 2) {
        if (cfg.steps > 0) {
            s.degenerate = true;
            s.warning = "prompt has fewer than two tokens; delta left at zero";
        }
        return s;
    }

    const PromptObjective<T> objective(ckpt.lm_head(), s.cached_hidden, prompt, cfg.reduction);
    for (std::size_t step = 0; step <= cfg.steps; ++step) {
        const bool more = step < cfg.steps;
        auto eval = objective.evaluate(s.delta, more);
        s.loss_trace.push_back(eval.loss);
        if (more) optimizer_step(s.optimizer, s.delta, eval.gradient, cfg);
    }
    return s;
}

struct GenerationConfig {
    std::size_t max_new_tokens = 32;
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    bool stop_at_eos = true;
    bool record_logits = false;  // keep each step's logits (tests, analysis)
};

struct GenerationResult {
    TokenSequence tokens;
    bool hit_eos = false;
    bool truncated = false;  // ran out of positions before max_new_tokens
    std::vector<std::vector<double>> step_logits;
};

// Greedy argmax, or a draw from softmax(logits / temperature).
inline TokenId select_token(std::span<const double> logits, const GenerationConfig& cfg, std::mt19937_64& rng) {
    if (cfg.greedy) return static_cast<TokenId>(argmax_row(logits));
    if (!(cfg.temperature > 0.0)) throw ConfigError("temperature must be positive");
    std::vector<double> p(logits.begin(), logits.end());
    for (auto& v : p) v /= cfg.temperature;
    softmax_inplace(std::span<double>(p));
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(p.size() - 1);
}

namespace detail {

// Shared decode loop. `delta` is null on the SLOT-free path.
template <typename T>
GenerationResult decode(const Checkpoint<T>& ckpt, KvCache<T>& cache, std::vector<double> last_hidden,
                        const Delta* delta, const GenerationConfig& cfg) {
    GenerationResult out;
    std::mt19937_64 rng(cfg.seed);
    const auto eos = ckpt.config.eos_token_id;
    for (std::size_t k = 0; k < cfg.max_new_tokens; ++k) {
        if (delta) {
            for (std::size_t j = 0; j < last_hidden.size(); ++j) last_hidden[j] += delta->values[j];
        }
        const std::size_t width = last_hidden.size();
        const Matrix<double> h(1, width, std::move(last_hidden));
        const Matrix<double> logits = lm_logits(ckpt, h);
        const TokenId next = select_token(logits.row(0), cfg, rng);
        if (cfg.record_logits) out.step_logits.emplace_back(logits.row(0).begin(), logits.row(0).end());
        out.tokens.push_back(next);
        if (cfg.stop_at_eos && eos && next == *eos) {
            out.hit_eos = true;
            break;
        }
        if (k + 1 == cfg.max_new_tokens) break;
        if (cache.length() + 1 > ckpt.config.max_positions) {
            out.truncated = true;
            break;
        }
        const TokenId feed[1] = {next};
        const Matrix<T> fresh = forward_hidden(ckpt, std::span<const TokenId>(feed), &cache);
        last_hidden.assign(fresh.row(0).begin(), fresh.row(0).end());
    }
    return out;
}

} // namespace detail

// Decodes after the prompt stage with delta frozen. The sample is not modified.
template <typename T>
GenerationResult generate(const Checkpoint<T>& ckpt, const AdaptedSample<T>& sample, const GenerationConfig& cfg) {
    if (sample.prompt.empty()) throw ShapeError("generate: empty prompt");
    KvCache<T> cache = sample.cache;
    auto last = sample.cached_hidden.row(sample.cached_hidden.rows() - 1);
    return detail::decode(ckpt, cache, std::vector<double>(last.begin(), last.end()), &sample.delta, cfg);
}

// Prompt consumed by the model with no adaptation: the cache plus the final
// hidden row that predicts the first new token.
template <typename T>
struct Prefill {
    KvCache<T> cache;
    std::vector<double> last_hidden;
};

template <typename T>
Prefill<T> prefill(const Checkpoint<T>& ckpt, const TokenSequence& prompt) {
    if (prompt.empty()) throw ShapeError("generate: empty prompt");
    Prefill<T> p{KvCache<T>(ckpt.config), {}};
    const Matrix<T> hidden = forward_hidden(ckpt, prompt, &p.cache);
    auto last = hidden.row(hidden.rows() - 1);
    p.last_hidden.assign(last.begin(), last.end());
    return p;
}

// Plain decoding from a prefilled prompt. Consumes the prefill.
template <typename T>
GenerationResult generate_from(const Checkpoint<T>& ckpt, Prefill<T>&& p, const GenerationConfig& cfg) {
    return detail::decode(ckpt, p.cache, std::move(p.last_hidden), nullptr, cfg);
}

// Plain decoding with no delta anywhere on the path.
template <typename T>
GenerationResult generate_baseline(const Checkpoint<T>& ckpt, const TokenSequence& prompt, const GenerationConfig& cfg) {
    return generate_from(ckpt, prefill(ckpt, prompt), cfg);
}

template <typename T>
struct BatchItem {
    std::optional<AdaptedSample<T>> sample;
    std::string error;  // set when the prompt could not be adapted

    bool ok() const noexcept { return sample.has_value(); }
};

// One independent delta per prompt; results come back in input order and do
// not depend on `workers`.
template <typename T>
std::vector<BatchItem<T>> run_batch(const Checkpoint<T>& ckpt, const std::vector<TokenSequence>& prompts,
                                    const SlotConfig& cfg, std::size_t workers = 1) {
    cfg.validate();
    std::vector<BatchItem<T>> out(prompts.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < prompts.size(); i = next++) {
            try {
                out[i].sample = optimize_delta(ckpt, prompts[i], cfg);
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    workers = std::max<std::size_t>(1, std::min(workers, prompts.size()));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    }
    return out;
}

// Reproducibility record for offline analysis.
struct ExportedSample {
    TokenSequence prompt_ids;
    Delta delta;
    std::vector<double> loss_trace;
    SlotConfig config;
    bool degenerate = false;
};

template <typename T>
ExportedSample export_sample(const AdaptedSample<T>& s) {
    return ExportedSample{s.prompt, s.delta, s.loss_trace, s.config, s.degenerate};
}

inline void to_json(nlohmann::json& j, const ExportedSample& s) {
    j = nlohmann::json{{"prompt_ids", s.prompt_ids},
                       {"delta", s.delta.values},
                       {"loss_trace", s.loss_trace},
                       {"config", s.config},
                       {"degenerate", s.degenerate}};
}

inline void from_json(const nlohmann::json& j, ExportedSample& s) {
    s.prompt_ids = j.at("prompt_ids").get<TokenSequence>();
    s.delta.values = j.at("delta").get<std::vector<double>>();
    s.loss_trace = j.value("loss_trace", std::vector<double>{});
    if (j.contains("config")) s.config = j.at("config").get<SlotConfig>();
    s.degenerate = j.value("degenerate", false);
}

} // namespace slot
