// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// Logit modulation vector: the shift W_LM * delta that an optimized delta adds
// to the logits at every position, and rankings of the tokens it strengthens
// and weakens most.

#pragma once

#include <cstdio>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slot/adapter.hpp"
#include "slot/tokenizer.hpp"

namespace slot {

template <typename W>
std::vector<double> compute_lmv(const Matrix<W>& head, const Delta& delta) {
    if (head.cols() != delta.size()) {
        throw ShapeError("compute_lmv: head " + head.shape() + " vs delta length " + std::to_string(delta.size()));
    }
    std::vector<double> lmv(head.rows());
    for (std::size_t v = 0; v < head.rows(); ++v) lmv[v] = dot(head.row(v), std::span<const double>(delta.values));
    return lmv;
}

template <typename T>
std::vector<double> compute_lmv(const Checkpoint<T>& ckpt, const Delta& delta) {
    return compute_lmv(ckpt.lm_head(), delta);
}

struct TokenShift {
    std::string token;  // display form
    TokenId id = 0;
    double shift = 0.0;
};

struct LmvReport {
    std::string label;  // e.g. a record id, or "mean"
    std::vector<double> lmv;
    std::vector<TokenShift> top_increased;  // shift descending
    std::vector<TokenShift> top_decreased;  // shift ascending
    std::optional<std::size_t> eos_rank_in_decreased;  // 1 = most suppressed
};

// Printable form of a token's bytes: control bytes, invalid UTF-8 and
// whitespace are escaped so columns stay aligned.
inline std::string render_token(std::string_view bytes) {
    std::string out;
    std::size_t i = 0;
    while (i < bytes.size()) {
        const auto c = static_cast<unsigned char>(bytes[i]);
        if (c == ' ') {
            out += "\xE2\x90\xA3";  // U+2423 OPEN BOX
            ++i;
        } else if (c == '\n') {
            out += "\\n", ++i;
        } else if (c == '\t') {
            out += "\\t", ++i;
        } else if (c == '\r') {
            out += "\\r", ++i;
        } else if (c == '\\') {
            out += "\\\\", ++i;
        } else if (c < 0x20 || c == 0x7f) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "\\x%02x", c);
            out += buf;
            ++i;
        } else if (c < 0x80) {
            out.push_back(static_cast<char>(c));
            ++i;
        } else {
            const auto d = bpe_detail::decode_utf8(bytes, i);
            if (d.cp == bpe_detail::kInvalid || bpe_detail::classify(d.cp) == bpe_detail::CharClass::space) {
                for (std::size_t k = 0; k < d.len; ++k) {
                    char buf[8];
                    std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned char>(bytes[i + k]));
                    out += buf;
                }
            } else {
                out.append(bytes.substr(i, d.len));
            }
            i += d.len;
        }
    }
    return out;
}

// Top-k tokens by signed shift in both directions. Ties rank the lower id first.
inline LmvReport rank_tokens(std::vector<double> lmv, const ByteLevelBpe* tokenizer, std::size_t k,
                             std::optional<TokenId> eos = std::nullopt, std::string label = {}) {
    if (k < 1 || k > lmv.size()) {
        throw ConfigError("rank_tokens: k=" + std::to_string(k) + " outside [1, " + std::to_string(lmv.size()) + "]");
    }
    LmvReport r;
    r.label = std::move(label);
    auto name = [&](std::size_t id) {
        if (tokenizer && id < tokenizer->vocab_size()) return render_token(tokenizer->token_bytes(static_cast<TokenId>(id)));
        return "<" + std::to_string(id) + ">";
    };
    for (std::size_t id : top_k(std::span<const double>(lmv), k)) {
        r.top_increased.push_back({name(id), static_cast<TokenId>(id), lmv[id]});
    }
    std::vector<double> negated(lmv.size());
    for (std::size_t i = 0; i < lmv.size(); ++i) negated[i] = -lmv[i];
    for (std::size_t id : top_k(std::span<const double>(negated), k)) {
        r.top_decreased.push_back({name(id), static_cast<TokenId>(id), lmv[id]});
    }
    if (eos && *eos >= 0 && static_cast<std::size_t>(*eos) < lmv.size()) {
        // rank among all tokens by ascending shift, same tie rule
        const auto e = static_cast<std::size_t>(*eos);
        std::size_t rank = 1;
        for (std::size_t i = 0; i < lmv.size(); ++i) {
            if (lmv[i] < lmv[e] || (lmv[i] == lmv[e] && i < e)) ++rank;
        }
        r.eos_rank_in_decreased = rank;
    }
    r.lmv = std::move(lmv);
    return r;
}

// Element-wise mean of several LMVs.
inline std::vector<double> mean_lmv(const std::vector<std::vector<double>>& lmvs) {
    if (lmvs.empty()) return {};
    std::vector<double> mean(lmvs.front().size(), 0.0);
    for (const auto& l : lmvs) {
        if (l.size() != mean.size()) throw ShapeError("mean_lmv: LMV lengths differ");
        for (std::size_t i = 0; i < l.size(); ++i) mean[i] += l[i];
    }
    for (auto& v : mean) v /= static_cast<double>(lmvs.size());
    return mean;
}

inline nlohmann::json to_json(const TokenShift& t) {
    return {{"token", t.token}, {"id", t.id}, {"shift", t.shift}};
}

inline nlohmann::json lmv_report_json(const LmvReport& r, bool include_full_vector = false) {
    nlohmann::json j;
    j["label"] = r.label;
    j["top_increased"] = nlohmann::json::array();
    for (const auto& t : r.top_increased) j["top_increased"].push_back(to_json(t));
    j["top_decreased"] = nlohmann::json::array();
    for (const auto& t : r.top_decreased) j["top_decreased"].push_back(to_json(t));
    j["eos_rank_in_decreased"] = r.eos_rank_in_decreased ? nlohmann::json(*r.eos_rank_in_decreased) : nlohmann::json(nullptr);
    if (include_full_vector) j["lmv"] = r.lmv;
    return j;
}

inline std::string lmv_report_text(const LmvReport& r) {
    std::ostringstream os;
    os << "LMV report" << (r.label.empty() ? "" : " [" + r.label + "]") << "\n";
    os << std::left << std::setw(6) << "rank" << std::setw(24) << "increased" << std::right << std::setw(12) << "shift"
       << "   " << std::left << std::setw(24) << "decreased" << std::right << std::setw(12) << "shift" << "\n";
    os << std::fixed << std::setprecision(6);
    for (std::size_t i = 0; i < r.top_increased.size(); ++i) {
        const auto& a = r.top_increased[i];
        const auto& b = r.top_decreased[i];
        os << std::left << std::setw(6) << (i + 1) << std::setw(24) << ("'" + a.token + "'") << std::right
           << std::setw(12) << a.shift << "   " << std::left << std::setw(24) << ("'" + b.token + "'") << std::right
           << std::setw(12) << b.shift << "\n";
    }
    if (r.eos_rank_in_decreased) os << "end-of-text rank among decreased tokens: " << *r.eos_rank_in_decreased << "\n";
    return os.str();
}

// token_id,token,shift for every vocabulary entry.
inline std::string lmv_csv(const LmvReport& r, const ByteLevelBpe* tokenizer) {
    std::ostringstream os;
    os << "token_id,token,shift\n" << std::setprecision(17);
    for (std::size_t i = 0; i < r.lmv.size(); ++i) {
        std::string tok = tokenizer && i < tokenizer->vocab_size() ? render_token(tokenizer->token_bytes(static_cast<TokenId>(i)))
                                                                   : std::string{};
        std::string quoted = "\"";
        for (char c : tok) {
            if (c == '"') quoted += '"';
            quoted += c;
        }
        quoted += '"';
        os << i << "," << quoted << "," << r.lmv[i] << "\n";
    }
    return os.str();
}

} // namespace slot
