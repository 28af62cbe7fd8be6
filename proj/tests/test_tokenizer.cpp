// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "slot/tokenizer.hpp"

namespace fs = std::filesystem;
using slot::ByteLevelBpe;
using slot::TokenSequence;

namespace {

const fs::path kAssets = SLOT_ASSET_DIR;

class Gpt2Tokenizer : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        tok_ = new ByteLevelBpe(ByteLevelBpe::from_files(kAssets / "vocab.json", kAssets / "merges.txt"));
        ranks_ = new std::map<std::pair<std::string, std::string>, int>();
        std::ifstream in(kAssets / "merges.txt");
        std::string line;
        int rank = 0;
        while (std::getline(in, line)) {
            if (line.empty() || line.rfind("#version", 0) == 0) continue;
            const auto sp = line.find(' ');
            ranks_->emplace(std::make_pair(line.substr(0, sp), line.substr(sp + 1)), rank++);
        }
    }
    static void TearDownTestSuite() {
        delete tok_;
        delete ranks_;
    }

    static TokenSequence reference_encode(std::string_view text) {
        TokenSequence out;
        for (auto piece : slot::pretokenize(text)) {
            std::vector<std::string> word;
            for (char c : piece) word.push_back(ByteLevelBpe::encode_bytes(std::string(1, c)));
            for (const auto& sym : oracle::reference_bpe(word, *ranks_)) out.push_back(tok_->symbol_id(sym).value());
        }
        return out;
    }

    static inline ByteLevelBpe* tok_ = nullptr;
    static inline std::map<std::pair<std::string, std::string>, int>* ranks_ = nullptr;
};

TEST_F(Gpt2Tokenizer, VocabularyShape) {
    EXPECT_EQ(tok_->vocab_size(), 50257u);
    EXPECT_EQ(tok_->merge_count(), 50000u);
    EXPECT_EQ(tok_->eos_token(), 50256);
}

TEST_F(Gpt2Tokenizer, MatchesFrozenReferenceIds) {
    std::ifstream in(oracle::fixture_dir() / "tokenizer_cases.json");
    const auto cases = nlohmann::json::parse(in);
    ASSERT_GE(cases.size(), 20u);
    for (const auto& c : cases) {
        const auto text = c["text"].get<std::string>();
        const auto ids = c["ids"].get<TokenSequence>();
        EXPECT_EQ(tok_->encode(text), ids) << text;
        EXPECT_EQ(tok_->decode(ids), text);
    }
}

TEST_F(Gpt2Tokenizer, EmptyString) {
    EXPECT_TRUE(tok_->encode("").empty());
    EXPECT_EQ(tok_->decode(TokenSequence{}), "");
}

TEST_F(Gpt2Tokenizer, RandomBytesRoundTrip) {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> len(0, 40), byte(0, 255);
    for (int i = 0; i < 1000; ++i) {
        std::string s(static_cast<std::size_t>(len(rng)), '\0');
        for (auto& c : s) c = static_cast<char>(byte(rng));
        ASSERT_EQ(tok_->decode(tok_->encode(s)), s) << "case " << i;
    }
}

TEST_F(Gpt2Tokenizer, AgreesWithReferenceMerger) {
    static const std::vector<std::string> parts = {
        "the", " the", "tion", " un", "believ", "able", " 1234", "567", "'s", "'ll", " ", "  ", "\n",
        "!?", " caf\xC3\xA9", " na\xC3\xAFve", "\xE6\x97\xA5\xE6\x9C\xAC", " \xF0\x9F\x98\x80", "ing", "X",
        "Question", ":", " Answer", "####", " 3,000", "\t", "zzqx", "ent", "ly", " re"};
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> pick(0, parts.size() - 1), count(1, 12);
    for (int i = 0; i < 100; ++i) {
        std::string s;
        for (std::size_t k = count(rng); k > 0; --k) s += parts[pick(rng)];
        ASSERT_EQ(tok_->encode(s), reference_encode(s)) << s;
    }
}

TEST_F(Gpt2Tokenizer, SaveLoadRoundTrip) {
    const auto dir = fs::temp_directory_path() / ("slot_tok_" + std::to_string(::getpid()));
    tok_->save(dir);
    const auto back = ByteLevelBpe::from_files(dir / "vocab.json", dir / "merges.txt");
    EXPECT_EQ(back.vocab_size(), tok_->vocab_size());
    EXPECT_EQ(back.merge_count(), tok_->merge_count());
    const std::string text = "Round trips keep every merge: 12,345 caf\xC3\xA9s.";
    EXPECT_EQ(back.encode(text), tok_->encode(text));
    fs::remove_all(dir);
}

TEST_F(Gpt2Tokenizer, IdOutsideVocabularyRejected) {
    EXPECT_THROW(tok_->decode(TokenSequence{50257}), slot::ShapeError);
    EXPECT_THROW(tok_->decode(TokenSequence{-1}), slot::ShapeError);
}

TEST(Pretokenize, SplitsContractionsNumbersAndSpaces) {
    const auto pieces = slot::pretokenize("I'm 42  years\n");
    const std::vector<std::string_view> want = {"I", "'m", " 42", " ", " years", "\n"};
    EXPECT_EQ(pieces, want);
}

TEST(ByteMerges, SmallVocabularyEncodes) {
    const auto tok = ByteLevelBpe::from_byte_merges({{"a", "b"}, {"ab", "c"}}, {"<|endoftext|>"});
    EXPECT_EQ(tok.vocab_size(), 259u);
    EXPECT_EQ(tok.eos_token(), 258);
    EXPECT_EQ(tok.encode("abcab"), (TokenSequence{257, 256}));
    EXPECT_EQ(tok.decode(TokenSequence{257, 256, 'x'}), "abcabx");
}

TEST(MergesFile, MalformedLineReportsNumber) {
    const auto dir = fs::temp_directory_path() / ("slot_badmerge_" + std::to_string(::getpid()));
    const auto tok = ByteLevelBpe::from_byte_merges({});
    tok.save(dir);
    std::ofstream(dir / "merges.txt") << "#version: 0.2\na b\nc d\nbroken\n";
    try {
        ByteLevelBpe::from_files(dir / "vocab.json", dir / "merges.txt");
        FAIL() << "malformed merges accepted";
    } catch (const slot::LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(MergesFile, UnknownSymbolRejected) {
    const auto dir = fs::temp_directory_path() / ("slot_unkmerge_" + std::to_string(::getpid()));
    const auto tok = ByteLevelBpe::from_byte_merges({});
    tok.save(dir);
    std::ofstream(dir / "merges.txt") << "#version: 0.2\na b\n";
    EXPECT_THROW(ByteLevelBpe::from_files(dir / "vocab.json", dir / "merges.txt"), slot::LoadError);
    fs::remove_all(dir);
}

} // namespace
