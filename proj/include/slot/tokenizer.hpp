// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// Byte-level BPE compatible with GPT-2 vocab.json / merges.txt files.
//
// Text is split with the GPT-2 pre-tokenization pattern
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// (hand-matched; Unicode classes come from ICU), every byte of a piece is
// mapped to its printable stand-in character, and merges are applied lowest
// rank first, leftmost first. Bytes that are not valid UTF-8 form one-byte
// pieces of the "other" class, so any byte string round-trips.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <unicode/uchar.h>

#include "slot/error.hpp"
#include "slot/model.hpp"

namespace slot {

namespace bpe_detail {

inline void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

inline constexpr std::uint32_t kInvalid = 0xFFFFFFFFu;

struct Decoded {
    std::uint32_t cp;
    std::size_t len;
};

// Strict UTF-8 decode of one code point; malformed input yields kInvalid of length 1.
inline Decoded decode_utf8(std::string_view s, std::size_t i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) return {b0, 1};
    std::size_t len;
    std::uint32_t cp;
    std::uint32_t min;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2, cp = b0 & 0x1F, min = 0x80;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3, cp = b0 & 0x0F, min = 0x800;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4, cp = b0 & 0x07, min = 0x10000;
    } else {
        return {kInvalid, 1};
    }
    if (i + len > s.size()) return {kInvalid, 1};
    for (std::size_t k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) return {kInvalid, 1};
        cp = (cp << 6) | (b & 0x3F);
    }
    if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return {kInvalid, 1};
    return {cp, len};
}

enum class CharClass { letter, number, space, other };

inline CharClass classify(std::uint32_t cp) {
    if (cp == kInvalid) return CharClass::other;
    const auto c = static_cast<UChar32>(cp);
    if (u_isUWhiteSpace(c)) return CharClass::space;
    const auto mask = U_GET_GC_MASK(c);
    if (mask & U_GC_L_MASK) return CharClass::letter;
    if (mask & U_GC_N_MASK) return CharClass::number;
    return CharClass::other;
}

// GPT-2's reversible byte -> printable code point table.
inline const std::vector<std::uint32_t>& byte_to_codepoint() {
    static const std::vector<std::uint32_t> table = [] {
        std::vector<std::uint32_t> t(256, 0);
        std::vector<bool> direct(256, false);
        for (int b = '!'; b <= '~'; ++b) direct[b] = true;
        for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
        for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
        std::uint32_t next = 256;
        for (int b = 0; b < 256; ++b) t[b] = direct[b] ? static_cast<std::uint32_t>(b) : next++;
        return t;
    }();
    return table;
}

} // namespace bpe_detail

// Splits text into pre-tokens following the GPT-2 pattern. Pieces are views
// into `text` and concatenate back to it.
inline std::vector<std::string_view> pretokenize(std::string_view text) {
    using namespace bpe_detail;
    std::vector<std::string_view> pieces;
    const std::size_t n = text.size();
    std::size_t i = 0;

    auto class_at = [&](std::size_t pos) -> std::pair<CharClass, std::size_t> {
        const Decoded d = decode_utf8(text, pos);
        return {classify(d.cp), d.len};
    };
    auto run_end = [&](std::size_t pos, CharClass cls) {
        while (pos < n) {
            auto [c, len] = class_at(pos);
            if (c != cls) break;
            pos += len;
        }
        return pos;
    };

    while (i < n) {
        const std::size_t start = i;
        if (text[i] == '\'' && i + 1 < n) {
            static constexpr std::string_view kSuffixes[] = {"s", "t", "re", "ve", "m", "ll", "d"};
            std::size_t matched = 0;
            for (auto suf : kSuffixes) {
                if (text.substr(i + 1, suf.size()) == suf) {
                    matched = suf.size();
                    break;
                }
            }
            if (matched) {
                pieces.push_back(text.substr(start, 1 + matched));
                i += 1 + matched;
                continue;
            }
        }

        auto [c0, l0] = class_at(i);
        std::size_t body = i;  // where the class run starts
        CharClass cls = c0;
        if (text[i] == ' ' && i + 1 < n) {
            auto [c1, l1] = class_at(i + 1);
            (void)l1;
            if (c1 != CharClass::space) {
                body = i + 1;
                cls = c1;
            }
        }
        if (cls != CharClass::space) {
            // ' ?\p{L}+', ' ?\p{N}+' and ' ?[^\s\p{L}\p{N}]+' share the same shape.
            i = run_end(body, cls);
            pieces.push_back(text.substr(start, i - start));
            continue;
        }

        // Whitespace: '\s+(?!\S)' then '\s+'.
        std::size_t end = i;
        std::size_t last = i;  // start of the final whitespace code point
        std::size_t count = 0;
        while (end < n) {
            auto [c, len] = class_at(end);
            if (c != CharClass::space) break;
            last = end;
            end += len;
            ++count;
        }
        if (end < n && count >= 2) end = last;  // leave one space to prefix the next word
        i = end;
        pieces.push_back(text.substr(start, i - start));
        (void)l0;
    }
    return pieces;
}

class ByteLevelBpe {
public:
    ByteLevelBpe() = default;

    static ByteLevelBpe from_files(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path) {
        std::ifstream vin(vocab_path);
        if (!vin) throw LoadError("cannot open vocab file " + vocab_path.string());
        std::map<std::string, TokenId> vocab;
        try {
            vocab = nlohmann::json::parse(vin).get<std::map<std::string, TokenId>>();
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("malformed vocab file " + vocab_path.string() + ": " + e.what());
        }
        std::ifstream min(merges_path);
        if (!min) throw LoadError("cannot open merges file " + merges_path.string());
        std::vector<std::pair<std::string, std::string>> merges;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(min, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line_no == 1 && line.rfind("#version", 0) == 0) continue;
            if (line.empty()) continue;
            const auto sp = line.find(' ');
            if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() ||
                line.find(' ', sp + 1) != std::string::npos) {
                throw LoadError("malformed merges file " + merges_path.string() + " at line " +
                                std::to_string(line_no) + ": expected two space-separated symbols");
            }
            merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
        }
        return ByteLevelBpe(std::move(vocab), merges);
    }

    // Builds a vocabulary from raw-byte merges: 256 byte symbols, one token
    // per merge in rank order, then the special tokens.
    static ByteLevelBpe from_byte_merges(const std::vector<std::pair<std::string, std::string>>& raw_merges,
                                         const std::vector<std::string>& specials = {"<|endoftext|>"}) {
        std::map<std::string, TokenId> vocab;
        TokenId next = 0;
        for (int b = 0; b < 256; ++b) vocab.emplace(encode_bytes(std::string(1, static_cast<char>(b))), next++);
        std::vector<std::pair<std::string, std::string>> merges;
        for (const auto& [a, b] : raw_merges) {
            merges.emplace_back(encode_bytes(a), encode_bytes(b));
            vocab.emplace(encode_bytes(a + b), next++);
        }
        for (const auto& s : specials) vocab.emplace(s, next++);
        return ByteLevelBpe(std::move(vocab), merges);
    }

    ByteLevelBpe(std::map<std::string, TokenId> vocab, const std::vector<std::pair<std::string, std::string>>& merges) {
        TokenId max_id = -1;
        for (const auto& [tok, id] : vocab) {
            if (id < 0) throw LoadError("vocab: negative id for token '" + tok + "'");
            max_id = std::max(max_id, id);
        }
        token_bytes_.assign(static_cast<std::size_t>(max_id + 1), std::string{});
        for (const auto& [tok, id] : vocab) token_bytes_[static_cast<std::size_t>(id)] = decode_symbol(tok);
        byte_token_.fill(-1);
        const auto& table = bpe_detail::byte_to_codepoint();
        for (int b = 0; b < 256; ++b) {
            std::string sym;
            bpe_detail::append_utf8(sym, table[b]);
            auto it = vocab.find(sym);
            if (it == vocab.end()) throw LoadError("vocab is missing the symbol for byte " + std::to_string(b));
            byte_token_[b] = it->second;
        }
        std::uint32_t rank = 0;
        for (const auto& [a, b] : merges) {
            auto ia = vocab.find(a);
            auto ib = vocab.find(b);
            auto im = vocab.find(a + b);
            if (ia == vocab.end() || ib == vocab.end() || im == vocab.end()) {
                throw LoadError("malformed merges: rule '" + a + " " + b + "' (rank " + std::to_string(rank) +
                                ") references symbols not in the vocabulary");
            }
            merges_.emplace(pair_key(ia->second, ib->second), Merge{rank, im->second});
            merge_list_.emplace_back(a, b);
            ++rank;
        }
        if (auto it = vocab.find("<|endoftext|>"); it != vocab.end()) eos_ = it->second;
        for (const auto& [tok, id] : vocab) symbols_.emplace(tok, id);
    }

    std::size_t vocab_size() const noexcept { return token_bytes_.size(); }
    std::size_t merge_count() const noexcept { return merges_.size(); }
    std::optional<TokenId> eos_token() const noexcept { return eos_; }

    // Raw bytes a single id decodes to.
    const std::string& token_bytes(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= token_bytes_.size()) {
            throw ShapeError("token id " + std::to_string(id) + " outside tokenizer vocabulary");
        }
        return token_bytes_[static_cast<std::size_t>(id)];
    }

    // vocab.json and merges.txt in the layout from_files() reads.
    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::ordered_json vocab = nlohmann::ordered_json::object();
        std::vector<std::pair<TokenId, std::string>> by_id;
        for (const auto& [sym, id] : symbols_) by_id.emplace_back(id, sym);
        std::sort(by_id.begin(), by_id.end());
        for (const auto& [id, sym] : by_id) vocab[sym] = id;
        std::ofstream v(dir / "vocab.json");
        v << vocab.dump();
        std::ofstream m(dir / "merges.txt");
        m << "#version: 0.2\n";
        for (const auto& [a, b] : merge_list_) m << a << ' ' << b << '\n';
        if (!v || !m) throw LoadError("cannot write tokenizer files to " + dir.string());
    }

    std::optional<TokenId> symbol_id(const std::string& symbol) const {
        auto it = symbols_.find(symbol);
        if (it == symbols_.end()) return std::nullopt;
        return it->second;
    }

    TokenSequence encode(std::string_view text) const {
        TokenSequence out;
        for (auto piece : pretokenize(text)) encode_piece(piece, out);
        return out;
    }

    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (TokenId id : ids) out += token_bytes(id);
        return out;
    }
    std::string decode(const TokenSequence& ids) const { return decode(std::span<const TokenId>(ids)); }

    // Byte-level form of raw bytes (the strings stored in vocab.json / merges.txt).
    static std::string encode_bytes(std::string_view raw) {
        const auto& table = bpe_detail::byte_to_codepoint();
        std::string out;
        for (unsigned char c : raw) bpe_detail::append_utf8(out, table[c]);
        return out;
    }

private:
    struct Merge {
        std::uint32_t rank;
        TokenId result;
    };

    static std::uint64_t pair_key(TokenId a, TokenId b) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
    }

    // Maps a vocab string back to raw bytes. Characters outside the byte table
    // (special tokens) keep their UTF-8 encoding.
    static std::string decode_symbol(std::string_view sym) {
        static const std::unordered_map<std::uint32_t, unsigned char> inverse = [] {
            std::unordered_map<std::uint32_t, unsigned char> m;
            const auto& t = bpe_detail::byte_to_codepoint();
            for (int b = 0; b < 256; ++b) m.emplace(t[b], static_cast<unsigned char>(b));
            return m;
        }();
        std::string out;
        std::size_t i = 0;
        while (i < sym.size()) {
            const auto d = bpe_detail::decode_utf8(sym, i);
            auto it = d.cp == bpe_detail::kInvalid ? inverse.end() : inverse.find(d.cp);
            if (it != inverse.end()) {
                out.push_back(static_cast<char>(it->second));
            } else {
                out.append(sym.substr(i, d.len));
            }
            i += d.len;
        }
        return out;
    }

    void encode_piece(std::string_view piece, TokenSequence& out) const {
        struct Symbol {
            TokenId id;
            std::ptrdiff_t prev;
            std::ptrdiff_t next;
            bool alive;
        };
        struct Candidate {
            std::uint32_t rank;
            std::ptrdiff_t left;
            std::ptrdiff_t right;
            TokenId left_id;
            TokenId right_id;
            bool operator>(const Candidate& o) const {
                return rank != o.rank ? rank > o.rank : left > o.left;
            }
        };
        const auto n = static_cast<std::ptrdiff_t>(piece.size());
        std::vector<Symbol> syms(piece.size());
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            syms[i] = {byte_token_[static_cast<unsigned char>(piece[i])], i - 1, i + 1 < n ? i + 1 : -1, true};
        }
        std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> heap;
        auto consider = [&](std::ptrdiff_t left, std::ptrdiff_t right) {
            if (left < 0 || right < 0) return;
            auto it = merges_.find(pair_key(syms[left].id, syms[right].id));
            if (it != merges_.end()) heap.push({it->second.rank, left, right, syms[left].id, syms[right].id});
        };
        for (std::ptrdiff_t i = 0; i + 1 < n; ++i) consider(i, i + 1);

        while (!heap.empty()) {
            const Candidate c = heap.top();
            heap.pop();
            Symbol& l = syms[c.left];
            Symbol& r = syms[c.right];
            if (!l.alive || !r.alive || l.next != c.right || l.id != c.left_id || r.id != c.right_id) continue;
            l.id = merges_.at(pair_key(c.left_id, c.right_id)).result;
            r.alive = false;
            l.next = r.next;
            if (r.next >= 0) syms[r.next].prev = c.left;
            consider(l.prev, c.left);
            consider(c.left, l.next);
        }
        for (std::ptrdiff_t i = 0; i >= 0 && i < n; i = syms[i].next) out.push_back(syms[i].id);
    }

    std::vector<std::string> token_bytes_;
    std::array<TokenId, 256> byte_token_{};
    std::unordered_map<std::uint64_t, Merge> merges_;
    std::vector<std::pair<std::string, std::string>> merge_list_;
    std::unordered_map<std::string, TokenId> symbols_;
    std::optional<TokenId> eos_;
};

} // namespace slot
