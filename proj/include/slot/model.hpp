// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// GPT-2-class decoder: learned absolute positions, pre-LN blocks, tanh-GELU
// MLP. forward_hidden() stops after the final LayerNorm so callers can insert
// a shift between the hidden features and the LM head.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "slot/error.hpp"
#include "slot/safetensors.hpp"
#include "slot/tensor.hpp"

namespace slot {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t hidden_dim = 0;
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t max_positions = 0;
    double ln_eps = 1e-5;
    bool tie_word_embeddings = true;
    std::optional<TokenId> eos_token_id;

    std::size_t head_dim() const { return hidden_dim / n_heads; }
    std::size_t mlp_dim() const { return 4 * hidden_dim; }

    void validate() const {
        if (vocab_size == 0) throw ConfigError("model config: vocab_size must be positive");
        if (max_positions == 0) throw ConfigError("model config: max_positions must be positive");
        if (hidden_dim == 0 || n_heads == 0 || hidden_dim % n_heads != 0) {
            throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (eos_token_id && (*eos_token_id < 0 || static_cast<std::size_t>(*eos_token_id) >= vocab_size)) {
            throw ConfigError("model config: eos_token_id out of vocabulary");
        }
    }
};

// Field names follow the Hugging Face GPT-2 config.json so stock configs load as-is.
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"model_type", "gpt2"},
                       {"vocab_size", c.vocab_size},
                       {"n_embd", c.hidden_dim},
                       {"n_layer", c.n_layers},
                       {"n_head", c.n_heads},
                       {"n_positions", c.max_positions},
                       {"layer_norm_epsilon", c.ln_eps},
                       {"tie_word_embeddings", c.tie_word_embeddings}};
    if (c.eos_token_id) j["eos_token_id"] = *c.eos_token_id;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.hidden_dim = j.at("n_embd").get<std::size_t>();
    c.n_layers = j.at("n_layer").get<std::size_t>();
    c.n_heads = j.at("n_head").get<std::size_t>();
    c.max_positions = j.contains("n_positions") ? j.at("n_positions").get<std::size_t>()
                                                : j.at("n_ctx").get<std::size_t>();
    c.ln_eps = j.value("layer_norm_epsilon", 1e-5);
    c.tie_word_embeddings = j.value("tie_word_embeddings", true);
    if (j.contains("eos_token_id") && j.at("eos_token_id").is_number_integer()) {
        c.eos_token_id = j.at("eos_token_id").get<TokenId>();
    }
}

// Dense layer stored [in x out], the GPT-2 Conv1D layout.
template <typename T>
struct Linear {
    Matrix<T> weight;
    std::vector<T> bias;

    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }

    // y = x W + b, one output row per input row. Each output accumulates over
    // the input features in order, so batched and single-row calls agree exactly.
    Matrix<T> apply(const Matrix<T>& x) const {
        if (x.cols() != weight.rows()) {
            throw ShapeError("linear: input " + x.shape() + " vs weight " + weight.shape());
        }
        Matrix<T> y(x.rows(), weight.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            std::copy(bias.begin(), bias.end(), y.row(r).begin());
        }
        for (std::size_t k = 0; k < weight.rows(); ++k) {
            const auto wk = weight.row(k);
            for (std::size_t r = 0; r < x.rows(); ++r) axpy<T, T>(x(r, k), wk, y.row(r));
        }
        return y;
    }
};

template <typename T>
struct DecoderLayer {
    std::vector<T> ln1_gain, ln1_bias;
    Linear<T> attn_qkv;   // d -> 3d
    Linear<T> attn_out;   // d -> d
    std::vector<T> ln2_gain, ln2_bias;
    Linear<T> mlp_up;     // d -> 4d
    Linear<T> mlp_down;   // 4d -> d
};

// Immutable model parameters. When the LM head is tied, lm_head() returns the
// token embedding itself, so the two views can never diverge.
template <typename T>
struct Checkpoint {
    ModelConfig config;
    Matrix<T> token_embedding;     // [V x d]
    Matrix<T> position_embedding;  // [P x d]
    std::vector<DecoderLayer<T>> layers;
    std::vector<T> final_gain, final_bias;
    std::optional<Matrix<T>> untied_lm_head;  // [V x d] when not tied

    bool tied() const noexcept { return !untied_lm_head.has_value(); }
    const Matrix<T>& lm_head() const noexcept { return untied_lm_head ? *untied_lm_head : token_embedding; }

    void validate() const {
        const auto& c = config;
        c.validate();
        const std::size_t d = c.hidden_dim;
        auto expect = [](bool ok, const std::string& what) {
            if (!ok) throw LoadError("shape mismatch: " + what);
        };
        expect(token_embedding.rows() == c.vocab_size && token_embedding.cols() == d, "wte.weight");
        expect(position_embedding.rows() == c.max_positions && position_embedding.cols() == d, "wpe.weight");
        expect(layers.size() == c.n_layers, "layer count");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& L = layers[l];
            const std::string p = "h." + std::to_string(l) + ".";
            expect(L.ln1_gain.size() == d && L.ln1_bias.size() == d, p + "ln_1");
            expect(L.attn_qkv.weight.rows() == d && L.attn_qkv.weight.cols() == 3 * d && L.attn_qkv.bias.size() == 3 * d,
                   p + "attn.c_attn");
            expect(L.attn_out.weight.rows() == d && L.attn_out.weight.cols() == d && L.attn_out.bias.size() == d,
                   p + "attn.c_proj");
            expect(L.ln2_gain.size() == d && L.ln2_bias.size() == d, p + "ln_2");
            expect(L.mlp_up.weight.rows() == d && L.mlp_up.weight.cols() == 4 * d && L.mlp_up.bias.size() == 4 * d,
                   p + "mlp.c_fc");
            expect(L.mlp_down.weight.rows() == 4 * d && L.mlp_down.weight.cols() == d && L.mlp_down.bias.size() == d,
                   p + "mlp.c_proj");
        }
        expect(final_gain.size() == d && final_bias.size() == d, "ln_f");
        if (untied_lm_head) {
            expect(untied_lm_head->rows() == c.vocab_size && untied_lm_head->cols() == d, "lm_head.weight");
        }
    }
};

// Keys and values for every position consumed so far, one pair per layer.
template <typename T>
class KvCache {
public:
    KvCache() = default;
    explicit KvCache(const ModelConfig& config)
        : width_(config.hidden_dim), capacity_(config.max_positions), layers_(config.n_layers) {}

    std::size_t length() const noexcept { return length_; }
    std::size_t capacity() const noexcept { return capacity_; }
    bool initialized() const noexcept { return width_ != 0; }

    std::span<const T> keys(std::size_t layer) const { return layers_[layer].keys; }
    std::span<const T> values(std::size_t layer) const { return layers_[layer].values; }

    void reset() {
        length_ = 0;
        for (auto& l : layers_) {
            l.keys.clear();
            l.values.clear();
        }
    }

    // Internal to forward_hidden(): stage rows for one layer, then commit the length.
    void append(std::size_t layer, std::span<const T> key_row, std::span<const T> value_row) {
        auto& l = layers_[layer];
        l.keys.insert(l.keys.end(), key_row.begin(), key_row.end());
        l.values.insert(l.values.end(), value_row.begin(), value_row.end());
    }
    void commit(std::size_t new_rows) { length_ += new_rows; }

private:
    struct Layer {
        std::vector<T> keys;    // [length x d]
        std::vector<T> values;  // [length x d]
    };
    std::size_t width_ = 0;
    std::size_t capacity_ = 0;
    std::size_t length_ = 0;
    std::vector<Layer> layers_;
};

// Hidden features after the final LayerNorm, one row per new token.
// With a cache, positions continue from cache.length() and the cache advances;
// without one, the tokens are processed from position 0.
template <typename T>
Matrix<T> forward_hidden(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, KvCache<T>* cache = nullptr) {
    const ModelConfig& cfg = ckpt.config;
    if (tokens.empty()) throw ShapeError("forward_hidden: empty token sequence");
    KvCache<T> scratch;
    KvCache<T>& kv = cache ? *cache : scratch;
    if (!kv.initialized()) kv = KvCache<T>(cfg);
    const std::size_t past = kv.length();
    const std::size_t n = tokens.size();
    if (past + n > cfg.max_positions) {
        throw ContextOverflow("context overflow: " + std::to_string(past) + " cached + " + std::to_string(n) +
                              " new tokens exceeds limit of " + std::to_string(cfg.max_positions) + " positions");
    }
    const std::size_t d = cfg.hidden_dim;
    const std::size_t hd = cfg.head_dim();
    const T eps = static_cast<T>(cfg.ln_eps);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    Matrix<T> x(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        const TokenId id = tokens[r];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw ShapeError("forward_hidden: token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(cfg.vocab_size));
        }
        auto te = ckpt.token_embedding.row(static_cast<std::size_t>(id));
        auto pe = ckpt.position_embedding.row(past + r);
        auto out = x.row(r);
        for (std::size_t j = 0; j < d; ++j) out[j] = te[j] + pe[j];
    }

    std::vector<T> scores;
    for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
        const auto& layer = ckpt.layers[l];
        const Matrix<T> a = layer_norm(x, std::span<const T>(layer.ln1_gain), std::span<const T>(layer.ln1_bias), eps);
        const Matrix<T> qkv = layer.attn_qkv.apply(a);
        for (std::size_t r = 0; r < n; ++r) {
            auto row = qkv.row(r);
            kv.append(l, row.subspan(d, d), row.subspan(2 * d, d));
        }
        const auto keys = kv.keys(l);
        const auto values = kv.values(l);

        Matrix<T> attn(n, d);
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t visible = past + r + 1;  // causal: positions 0..past+r
            scores.resize(visible);
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                const auto q = qkv.row(r).subspan(h * hd, hd);
                for (std::size_t j = 0; j < visible; ++j) {
                    scores[j] = dot(q, keys.subspan(j * d + h * hd, hd)) * scale;
                }
                softmax_inplace(std::span<T>(scores));
                auto out = attn.row(r).subspan(h * hd, hd);
                for (std::size_t j = 0; j < visible; ++j) {
                    axpy<T, T>(scores[j], values.subspan(j * d + h * hd, hd), out);
                }
            }
        }
        const Matrix<T> proj = layer.attn_out.apply(attn);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += proj.data()[i];

        const Matrix<T> m = layer_norm(x, std::span<const T>(layer.ln2_gain), std::span<const T>(layer.ln2_bias), eps);
        Matrix<T> up = layer.mlp_up.apply(m);
        for (auto& v : up.data()) v = gelu(v);
        const Matrix<T> down = layer.mlp_down.apply(up);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += down.data()[i];
    }
    kv.commit(n);
    return layer_norm(x, std::span<const T>(ckpt.final_gain), std::span<const T>(ckpt.final_bias), eps);
}

template <typename T>
Matrix<T> forward_hidden(const Checkpoint<T>& ckpt, const TokenSequence& tokens, KvCache<T>* cache = nullptr) {
    return forward_hidden(ckpt, std::span<const TokenId>(tokens), cache);
}

// logits = H' W_LM^T, evaluated in double regardless of the checkpoint precision.
template <typename T, typename H>
Matrix<double> lm_logits(const Checkpoint<T>& ckpt, const Matrix<H>& hidden) {
    if (hidden.cols() != ckpt.config.hidden_dim) {
        throw ShapeError("lm_logits: hidden width " + std::to_string(hidden.cols()) + " but model width is " +
                         std::to_string(ckpt.config.hidden_dim));
    }
    return matmul_transposed(hidden.template cast<double>(), ckpt.lm_head());
}

namespace detail {

template <typename T>
Matrix<T> read_matrix(const safetensors::Reader& r, const std::string& name, std::size_t rows, std::size_t cols) {
    const auto& info = r.info(name);
    if (info.shape != std::vector<std::size_t>{rows, cols}) {
        std::string got;
        for (auto s : info.shape) got += std::to_string(s) + ",";
        throw LoadError("shape mismatch for tensor '" + name + "': expected [" + std::to_string(rows) + "," +
                        std::to_string(cols) + "] got [" + got + "]");
    }
    return Matrix<T>(rows, cols, r.read<T>(name));
}

template <typename T>
std::vector<T> read_vector(const safetensors::Reader& r, const std::string& name, std::size_t len) {
    const auto& info = r.info(name);
    if (info.shape != std::vector<std::size_t>{len}) {
        throw LoadError("shape mismatch for tensor '" + name + "': expected [" + std::to_string(len) + "]");
    }
    return r.read<T>(name);
}

// Checkpoints exported from a full LM model carry a "transformer." prefix.
inline std::string tensor_prefix(const safetensors::Reader& r) {
    return r.contains("transformer.wte.weight") ? "transformer." : "";
}

inline ModelConfig infer_config(const safetensors::Reader& r, const std::string& prefix) {
    ModelConfig c;
    const auto& wte = r.info(prefix + "wte.weight").shape;
    const auto& wpe = r.info(prefix + "wpe.weight").shape;
    if (wte.size() != 2 || wpe.size() != 2) throw LoadError("shape mismatch: embeddings must be rank 2");
    c.vocab_size = wte[0];
    c.hidden_dim = wte[1];
    c.max_positions = wpe[0];
    while (r.contains(prefix + "h." + std::to_string(c.n_layers) + ".ln_1.weight")) ++c.n_layers;
    if (c.hidden_dim % 64 != 0) throw LoadError("no config.json and head count cannot be inferred");
    c.n_heads = c.hidden_dim / 64;
    c.tie_word_embeddings = !r.contains("lm_head.weight");
    return c;
}

} // namespace detail

inline ModelConfig load_model_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open model config " + path.string());
    try {
        return nlohmann::json::parse(in).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("malformed model config " + path.string() + ": " + e.what());
    }
}

// Loads `model.safetensors` (+ `config.json`) from a directory, or a single
// .safetensors file with an optional sibling config.json.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    fs::path file = path;
    if (fs::is_directory(path)) file = path / "model.safetensors";
    if (!fs::exists(file)) throw LoadError("checkpoint not found: " + file.string());
    const fs::path config_path = file.parent_path() / "config.json";

    safetensors::Reader reader(file);
    const std::string p = detail::tensor_prefix(reader);

    Checkpoint<T> ck;
    ck.config = fs::exists(config_path) ? load_model_config(config_path) : detail::infer_config(reader, p);
    try {
        ck.config.validate();
    } catch (const ConfigError& e) {
        throw LoadError(e.what());
    }
    const auto& c = ck.config;
    const std::size_t d = c.hidden_dim;

    ck.token_embedding = detail::read_matrix<T>(reader, p + "wte.weight", c.vocab_size, d);
    ck.position_embedding = detail::read_matrix<T>(reader, p + "wpe.weight", c.max_positions, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string h = p + "h." + std::to_string(l) + ".";
        DecoderLayer<T> L;
        L.ln1_gain = detail::read_vector<T>(reader, h + "ln_1.weight", d);
        L.ln1_bias = detail::read_vector<T>(reader, h + "ln_1.bias", d);
        L.attn_qkv.weight = detail::read_matrix<T>(reader, h + "attn.c_attn.weight", d, 3 * d);
        L.attn_qkv.bias = detail::read_vector<T>(reader, h + "attn.c_attn.bias", 3 * d);
        L.attn_out.weight = detail::read_matrix<T>(reader, h + "attn.c_proj.weight", d, d);
        L.attn_out.bias = detail::read_vector<T>(reader, h + "attn.c_proj.bias", d);
        L.ln2_gain = detail::read_vector<T>(reader, h + "ln_2.weight", d);
        L.ln2_bias = detail::read_vector<T>(reader, h + "ln_2.bias", d);
        L.mlp_up.weight = detail::read_matrix<T>(reader, h + "mlp.c_fc.weight", d, 4 * d);
        L.mlp_up.bias = detail::read_vector<T>(reader, h + "mlp.c_fc.bias", 4 * d);
        L.mlp_down.weight = detail::read_matrix<T>(reader, h + "mlp.c_proj.weight", 4 * d, d);
        L.mlp_down.bias = detail::read_vector<T>(reader, h + "mlp.c_proj.bias", d);
        ck.layers.push_back(std::move(L));
    }
    ck.final_gain = detail::read_vector<T>(reader, p + "ln_f.weight", d);
    ck.final_bias = detail::read_vector<T>(reader, p + "ln_f.bias", d);
    if (reader.contains("lm_head.weight")) {
        ck.untied_lm_head = detail::read_matrix<T>(reader, "lm_head.weight", c.vocab_size, d);
    } else if (!c.tie_word_embeddings) {
        throw LoadError("missing tensor 'lm_head.weight' and tie_word_embeddings is false");
    }
    ck.validate();
    return ck;
}

// Writes model.safetensors and config.json into `dir`. A tied head is not stored.
template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    ck.validate();
    fs::create_directories(dir);
    const std::size_t d = ck.config.hidden_dim;
    using safetensors::make_tensor;
    std::vector<safetensors::OutputTensor> out;
    out.push_back(make_tensor("wte.weight", {ck.config.vocab_size, d}, ck.token_embedding.storage()));
    out.push_back(make_tensor("wpe.weight", {ck.config.max_positions, d}, ck.position_embedding.storage()));
    for (std::size_t l = 0; l < ck.layers.size(); ++l) {
        const auto& L = ck.layers[l];
        const std::string h = "h." + std::to_string(l) + ".";
        out.push_back(make_tensor(h + "ln_1.weight", {d}, L.ln1_gain));
        out.push_back(make_tensor(h + "ln_1.bias", {d}, L.ln1_bias));
        out.push_back(make_tensor(h + "attn.c_attn.weight", {d, 3 * d}, L.attn_qkv.weight.storage()));
        out.push_back(make_tensor(h + "attn.c_attn.bias", {3 * d}, L.attn_qkv.bias));
        out.push_back(make_tensor(h + "attn.c_proj.weight", {d, d}, L.attn_out.weight.storage()));
        out.push_back(make_tensor(h + "attn.c_proj.bias", {d}, L.attn_out.bias));
        out.push_back(make_tensor(h + "ln_2.weight", {d}, L.ln2_gain));
        out.push_back(make_tensor(h + "ln_2.bias", {d}, L.ln2_bias));
        out.push_back(make_tensor(h + "mlp.c_fc.weight", {d, 4 * d}, L.mlp_up.weight.storage()));
        out.push_back(make_tensor(h + "mlp.c_fc.bias", {4 * d}, L.mlp_up.bias));
        out.push_back(make_tensor(h + "mlp.c_proj.weight", {4 * d, d}, L.mlp_down.weight.storage()));
        out.push_back(make_tensor(h + "mlp.c_proj.bias", {d}, L.mlp_down.bias));
    }
    out.push_back(make_tensor("ln_f.weight", {d}, ck.final_gain));
    out.push_back(make_tensor("ln_f.bias", {d}, ck.final_bias));
    if (!ck.tied()) out.push_back(make_tensor("lm_head.weight", {ck.config.vocab_size, d}, ck.untied_lm_head->storage()));
    safetensors::write(dir / "model.safetensors", out, {{"format", "pt"}});

    ModelConfig cfg = ck.config;
    cfg.tie_word_embeddings = ck.tied();
    std::ofstream cf(dir / "config.json");
    cf << nlohmann::json(cfg).dump(2) << "\n";
}

// SHA-256 over every parameter tensor in a fixed order (hex string).
template <typename T>
std::string parameter_digest(const Checkpoint<T>& ck) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    auto feed = [&](std::span<const T> v) { EVP_DigestUpdate(ctx, v.data(), v.size_bytes()); };
    feed(ck.token_embedding.data());
    feed(ck.position_embedding.data());
    for (const auto& L : ck.layers) {
        feed(L.ln1_gain);
        feed(L.ln1_bias);
        feed(L.attn_qkv.weight.data());
        feed(L.attn_qkv.bias);
        feed(L.attn_out.weight.data());
        feed(L.attn_out.bias);
        feed(L.ln2_gain);
        feed(L.ln2_bias);
        feed(L.mlp_up.weight.data());
        feed(L.mlp_up.bias);
        feed(L.mlp_down.weight.data());
        feed(L.mlp_down.bias);
    }
    feed(ck.final_gain);
    feed(ck.final_bias);
    if (ck.untied_lm_head) feed(ck.untied_lm_head->data());
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    static constexpr char hex[] = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < len; ++i) {
        s.push_back(hex[md[i] >> 4]);
        s.push_back(hex[md[i] & 0xf]);
    }
    return s;
}

} // namespace slot
