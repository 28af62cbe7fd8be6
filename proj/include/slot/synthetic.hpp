// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// Deterministically generated checkpoints for tests, demos and timing runs.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "slot/model.hpp"

namespace slot::synthetic {

// GPT-2 small (124M) dimensions with the stock 50257-token vocabulary.
inline ModelConfig gpt2_small_config() {
    ModelConfig c;
    c.vocab_size = 50257;
    c.hidden_dim = 768;
    c.n_layers = 12;
    c.n_heads = 12;
    c.max_positions = 1024;
    c.ln_eps = 1e-5;
    c.eos_token_id = 50256;
    return c;
}

inline ModelConfig tiny_config(std::size_t vocab = 11, std::size_t hidden = 8, std::size_t layers = 2,
                               std::size_t heads = 2, std::size_t positions = 64) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.hidden_dim = hidden;
    c.n_layers = layers;
    c.n_heads = heads;
    c.max_positions = positions;
    c.ln_eps = 1e-5;
    return c;
}

struct InitOptions {
    std::uint64_t seed = 0;
    double weight_std = 0.02;  // GPT-2 initializer range
    double norm_jitter = 0.0;  // spread of LayerNorm gains/biases around 1/0
    bool tie_lm_head = true;
};

// Normal(0, std) weights, residual projections scaled by 1/sqrt(2 * n_layers).
template <typename T>
Checkpoint<T> random_checkpoint(const ModelConfig& config, const InitOptions& opt = {}) {
    config.validate();
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t d = config.hidden_dim;
    auto fill = [&](std::span<T> out, double std_dev, double mean = 0.0) {
        for (auto& v : out) v = static_cast<T>(mean + std_dev * normal(rng));
    };
    auto matrix = [&](std::size_t r, std::size_t c, double std_dev) {
        Matrix<T> m(r, c);
        fill(m.data(), std_dev);
        return m;
    };
    auto vec = [&](std::size_t n, double mean, double std_dev) {
        std::vector<T> v(n);
        if (std_dev > 0.0) {
            fill(std::span<T>(v), std_dev, mean);
        } else {
            std::fill(v.begin(), v.end(), static_cast<T>(mean));
        }
        return v;
    };
    const double resid_std = opt.weight_std / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(config.n_layers, 1)));

    Checkpoint<T> ck;
    ck.config = config;
    ck.config.tie_word_embeddings = opt.tie_lm_head;
    ck.token_embedding = matrix(config.vocab_size, d, opt.weight_std);
    ck.position_embedding = matrix(config.max_positions, d, opt.weight_std / 2.0);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        DecoderLayer<T> L;
        L.ln1_gain = vec(d, 1.0, opt.norm_jitter);
        L.ln1_bias = vec(d, 0.0, opt.norm_jitter);
        L.attn_qkv = {matrix(d, 3 * d, opt.weight_std), vec(3 * d, 0.0, opt.norm_jitter)};
        L.attn_out = {matrix(d, d, resid_std), vec(d, 0.0, opt.norm_jitter)};
        L.ln2_gain = vec(d, 1.0, opt.norm_jitter);
        L.ln2_bias = vec(d, 0.0, opt.norm_jitter);
        L.mlp_up = {matrix(d, 4 * d, opt.weight_std), vec(4 * d, 0.0, opt.norm_jitter)};
        L.mlp_down = {matrix(4 * d, d, resid_std), vec(d, 0.0, opt.norm_jitter)};
        ck.layers.push_back(std::move(L));
    }
    ck.final_gain = vec(d, 1.0, opt.norm_jitter);
    ck.final_bias = vec(d, 0.0, opt.norm_jitter);
    if (!opt.tie_lm_head) ck.untied_lm_head = matrix(config.vocab_size, d, opt.weight_std);
    return ck;
}

// Tiny checkpoints with O(1) weights, so logits are far from uniform and
// gradients are not vanishingly small.
template <typename T>
Checkpoint<T> tiny_checkpoint(std::uint64_t seed, const ModelConfig& config = tiny_config()) {
    InitOptions opt;
    opt.seed = seed;
    opt.weight_std = 0.5;
    opt.norm_jitter = 0.3;
    opt.tie_lm_head = false;
    return random_checkpoint<T>(config, opt);
}

// Every weight and bias zero; LayerNorm gains one. Hidden features reduce to
// the final LayerNorm of the embedding sum, which is zero here.
template <typename T>
Checkpoint<T> zero_checkpoint(const ModelConfig& config) {
    Checkpoint<T> ck = random_checkpoint<T>(config, InitOptions{0, 0.0, 0.0, true});
    return ck;
}

} // namespace slot::synthetic
