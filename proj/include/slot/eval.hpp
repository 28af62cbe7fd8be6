// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// Benchmark harness: JSON-Lines datasets, answer extraction, paired
// baseline/adapted runs with per-phase timing, (T, lr) sweeps and the
// inference-time overhead protocol.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "slot/adapter.hpp"
#include "slot/error.hpp"
#include "slot/tokenizer.hpp"

namespace slot::eval {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Records and extraction

struct ExtractionRule {
    enum class Kind { last_number, exact, regex };
    Kind kind = Kind::last_number;
    std::string pattern;  // regex only

    // "last-number", "exact", "regex:<pattern>" or {"type": ..., "pattern": ...}
    static ExtractionRule parse(const json& j) {
        ExtractionRule r;
        std::string type;
        if (j.is_string()) {
            const auto s = j.get<std::string>();
            if (s.rfind("regex:", 0) == 0) {
                type = "regex";
                r.pattern = s.substr(6);
            } else {
                type = s;
            }
        } else if (j.is_object() && j.contains("type") && j["type"].is_string()) {
            type = j["type"].get<std::string>();
            if (j.contains("pattern")) r.pattern = j["pattern"].get<std::string>();
        } else {
            throw ConfigError("extraction rule must be a string or an object with a \"type\"");
        }
        if (type == "last-number") {
            r.kind = Kind::last_number;
        } else if (type == "exact") {
            r.kind = Kind::exact;
        } else if (type == "regex") {
            r.kind = Kind::regex;
            if (r.pattern.empty()) throw ConfigError("regex extraction rule needs a pattern");
            try {
                std::regex probe(r.pattern);
            } catch (const std::regex_error& e) {
                throw ConfigError("invalid extraction regex '" + r.pattern + "': " + e.what());
            }
        } else {
            throw ConfigError("unknown extraction rule '" + type + "'");
        }
        return r;
    }

    std::string to_string() const {
        switch (kind) {
        case Kind::last_number: return "last-number";
        case Kind::exact: return "exact";
        case Kind::regex: return "regex:" + pattern;
        }
        return {};
    }

    bool operator==(const ExtractionRule&) const = default;
};

struct EvalRecord {
    std::string id;
    std::string prompt;
    std::string reference;
    ExtractionRule extraction;
};

inline EvalRecord parse_record(const json& j) {
    if (!j.is_object()) throw ConfigError("record is not a JSON object");
    for (const char* key : {"id", "prompt", "reference", "extraction"}) {
        if (!j.contains(key)) throw ConfigError(std::string("missing field \"") + key + "\"");
    }
    EvalRecord r;
    if (j["id"].is_string()) {
        r.id = j["id"].get<std::string>();
    } else if (j["id"].is_number_integer()) {
        r.id = std::to_string(j["id"].get<long long>());
    } else {
        throw ConfigError("field \"id\" must be a string or integer");
    }
    if (!j["prompt"].is_string() || !j["reference"].is_string()) {
        throw ConfigError("fields \"prompt\" and \"reference\" must be strings");
    }
    r.prompt = j["prompt"].get<std::string>();
    r.reference = j["reference"].get<std::string>();
    if (r.prompt.empty()) throw ConfigError("empty prompt");
    r.extraction = ExtractionRule::parse(j["extraction"]);
    return r;
}

inline std::vector<EvalRecord> parse_dataset(std::istream& in, const std::string& source = "<stream>") {
    std::vector<EvalRecord> out;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        EvalRecord r;
        try {
            r = parse_record(json::parse(line));
        } catch (const std::exception& e) {
            throw LoadError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!seen.insert(r.id).second) {
            throw LoadError(source + ":" + std::to_string(lineno) + ": duplicate id '" + r.id + "'");
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<EvalRecord> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open dataset " + path.string());
    return parse_dataset(in, path.string());
}

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n\f\v");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n\f\v");
    return std::string(s.substr(b, e - b + 1));
}

// Lowercase, trim; numeric strings lose thousands separators, a leading '+'
// and trailing fractional zeros.
inline std::string normalize_answer(std::string_view raw) {
    std::string s = trim(raw);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::string digits;
    for (char c : s) {
        if (c != ',') digits.push_back(c);
    }
    static const std::regex numeric(R"(^[-+]?\d+(\.\d+)?$)");
    if (!std::regex_match(digits, numeric)) return s;
    if (digits.front() == '+') digits.erase(0, 1);
    if (digits.find('.') != std::string::npos) {
        while (digits.back() == '0') digits.pop_back();
        if (digits.back() == '.') digits.pop_back();
    }
    if (digits == "-0") digits = "0";
    return digits;
}

// Normalized answer, or nullopt when the rule finds nothing.
inline std::optional<std::string> extract_answer(std::string_view text, const ExtractionRule& rule) {
    const std::string s(text);
    switch (rule.kind) {
    case ExtractionRule::Kind::exact: return normalize_answer(s);
    case ExtractionRule::Kind::last_number: {
        static const std::regex number(R"(-?\d[\d,]*(\.\d+)?)");
        std::optional<std::string> last;
        for (auto it = std::sregex_iterator(s.begin(), s.end(), number); it != std::sregex_iterator(); ++it) {
            last = it->str();
        }
        if (!last) return std::nullopt;
        while (!last->empty() && last->back() == ',') last->pop_back();
        return normalize_answer(*last);
    }
    case ExtractionRule::Kind::regex: {
        std::smatch m;
        if (!std::regex_search(s, m, std::regex(rule.pattern))) return std::nullopt;
        return normalize_answer(m.size() > 1 && m[1].matched ? m[1].str() : m[0].str());
    }
    }
    return std::nullopt;
}

// The reference goes through the same rule; a reference the rule cannot parse
// is compared as a whole.
inline std::string reference_answer(const EvalRecord& r) {
    return extract_answer(r.reference, r.extraction).value_or(normalize_answer(r.reference));
}

// ---------------------------------------------------------------------------
// Runs

struct RunMetrics {
    bool correct = false;
    std::optional<std::string> extracted;
    std::string output;
    TokenSequence output_ids;
    bool hit_eos = false;
    std::size_t prompt_tokens = 0;
    std::size_t new_tokens = 0;
    std::vector<double> loss_trace;
    bool degenerate = false;
    // timing
    double tokenize_seconds = 0.0;
    double prompt_seconds = 0.0;    // forward pass plus any delta optimization
    double generate_seconds = 0.0;
    double wall_seconds = 0.0;
    double si = 0.0;  // prompt tokens per prompt-stage second
    double so = 0.0;  // new tokens per generation second
};

struct RecordResult {
    std::string id;
    std::string reference;  // normalized
    std::optional<RunMetrics> baseline;
    std::optional<RunMetrics> slot;
    std::string error;
};

struct Aggregate {
    std::size_t runs = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
    std::size_t prompt_tokens = 0;
    std::size_t new_tokens = 0;
    // timing
    double mean_si = 0.0;
    double mean_so = 0.0;
    double total_wall_seconds = 0.0;
    double total_prompt_seconds = 0.0;
    double total_generate_seconds = 0.0;
};

struct BenchmarkOptions {
    SlotConfig slot;
    GenerationConfig generation;
    bool run_baseline = true;
    bool run_slot = true;
    std::size_t workers = 1;
};

struct BenchmarkReport {
    BenchmarkOptions options;
    std::string model;
    std::vector<RecordResult> records;
    Aggregate baseline;
    Aggregate slot;
    std::size_t failures = 0;
};

// Published headline numbers kept next to local results, never mixed into them.
inline json reference_benchmark_results() {
    return {{"provenance", "published result, not locally reproduced"},
            {"model", "Qwen2.5-7B"},
            {"benchmark", "GSM8K"},
            {"metric", "answer accuracy (%)"},
            {"baseline", 57.54},
            {"slot", 66.19},
            {"improvement", 8.65}};
}

inline json reference_overhead_results() {
    return {{"provenance", "published result, not locally reproduced"},
            {"model", "Qwen2.5-7B"},
            {"benchmark", "GSM8K"},
            {"prompts", 30},
            {"steps", {0, 1, 2, 3, 4, 5}},
            {"overall_seconds", {161.49, 158.72, 173.93, 167.07, 176.03, 174.32}},
            {"relative_increase_at_5_steps", 0.079}};
}

inline json reference_sweep_baseline() {
    return {{"provenance", "published result, not locally reproduced"},
            {"model", "DeepSeek-R1-Distill-Qwen-1.5B"},
            {"benchmark", "AIME-24"},
            {"accuracy_percent", 26.67},
            {"si", 12.2},
            {"so", 967.84}};
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

inline double rate(std::size_t count, double seconds) { return seconds > 0.0 ? static_cast<double>(count) / seconds : 0.0; }

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& body) {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) body(i);
    };
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        work();
        return;
    }
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
}

inline std::string strip_eos(const ByteLevelBpe& tok, const TokenSequence& ids, std::optional<TokenId> eos) {
    TokenSequence body = ids;
    if (eos && !body.empty() && body.back() == *eos) body.pop_back();
    TokenSequence known;
    for (TokenId id : body) {
        if (id >= 0 && static_cast<std::size_t>(id) < tok.vocab_size()) known.push_back(id);
    }
    return tok.decode(known);
}

} // namespace detail

// One timed pass over a tokenized prompt. `slot_cfg` null means the plain
// model with no delta on the path.
template <typename T>
RunMetrics timed_run(const Checkpoint<T>& ckpt, const TokenSequence& prompt, const SlotConfig* slot_cfg,
                     const GenerationConfig& gen) {
    RunMetrics m;
    m.prompt_tokens = prompt.size();
    auto t0 = detail::Clock::now();
    GenerationResult result;
    if (slot_cfg) {
        AdaptedSample<T> sample = optimize_delta(ckpt, prompt, *slot_cfg);
        m.prompt_seconds = detail::seconds_since(t0);
        m.loss_trace = sample.loss_trace;
        m.degenerate = sample.degenerate;
        auto t1 = detail::Clock::now();
        result = generate(ckpt, sample, gen);
        m.generate_seconds = detail::seconds_since(t1);
    } else {
        Prefill<T> p = prefill(ckpt, prompt);
        m.prompt_seconds = detail::seconds_since(t0);
        auto t1 = detail::Clock::now();
        result = generate_from(ckpt, std::move(p), gen);
        m.generate_seconds = detail::seconds_since(t1);
    }
    m.output_ids = result.tokens;
    m.hit_eos = result.hit_eos;
    m.new_tokens = result.tokens.size();
    m.si = detail::rate(m.prompt_tokens, m.prompt_seconds);
    m.so = detail::rate(m.new_tokens, m.generate_seconds);
    return m;
}

inline Aggregate aggregate(const std::vector<const RunMetrics*>& runs) {
    Aggregate a;
    for (const RunMetrics* r : runs) {
        ++a.runs;
        a.correct += r->correct ? 1 : 0;
        a.prompt_tokens += r->prompt_tokens;
        a.new_tokens += r->new_tokens;
        a.mean_si += r->si;
        a.mean_so += r->so;
        a.total_wall_seconds += r->wall_seconds;
        a.total_prompt_seconds += r->prompt_seconds;
        a.total_generate_seconds += r->generate_seconds;
    }
    if (a.runs > 0) {
        a.accuracy = static_cast<double>(a.correct) / static_cast<double>(a.runs);
        a.mean_si /= static_cast<double>(a.runs);
        a.mean_so /= static_cast<double>(a.runs);
    }
    return a;
}

// Baseline then adapted run per record, both on the same tokenization.
// Records that fail are reported and counted; the rest still run.
template <typename T>
BenchmarkReport run_benchmark(const Checkpoint<T>& ckpt, const ByteLevelBpe& tokenizer,
                              const std::vector<EvalRecord>& dataset, const BenchmarkOptions& options,
                              std::string model_label = {}) {
    options.slot.validate();
    if (!options.run_baseline && !options.run_slot) throw ConfigError("benchmark needs a baseline or an adapted run");
    if (!options.generation.greedy && !(options.generation.temperature > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    BenchmarkReport report;
    report.options = options;
    report.model = std::move(model_label);
    report.records.resize(dataset.size());
    const auto eos = ckpt.config.eos_token_id;

    detail::parallel_for(dataset.size(), options.workers, [&](std::size_t i) {
        const EvalRecord& rec = dataset[i];
        RecordResult& out = report.records[i];
        out.id = rec.id;
        out.reference = reference_answer(rec);
        try {
            auto t0 = detail::Clock::now();
            const TokenSequence prompt = tokenizer.encode(rec.prompt);
            const double tokenize_seconds = detail::seconds_since(t0);
            GenerationConfig gen = options.generation;
            gen.seed = options.generation.seed + i;
            auto finish = [&](RunMetrics m) {
                m.tokenize_seconds = tokenize_seconds;
                m.wall_seconds = tokenize_seconds + m.prompt_seconds + m.generate_seconds;
                m.output = detail::strip_eos(tokenizer, m.output_ids, eos);
                m.extracted = extract_answer(m.output, rec.extraction);
                m.correct = m.extracted && *m.extracted == out.reference;
                return m;
            };
            if (options.run_baseline) out.baseline = finish(timed_run(ckpt, prompt, nullptr, gen));
            if (options.run_slot) out.slot = finish(timed_run(ckpt, prompt, &options.slot, gen));
        } catch (const std::exception& e) {
            out.error = e.what();
            out.baseline.reset();
            out.slot.reset();
        }
    });

    std::vector<const RunMetrics*> base, adapted;
    for (const auto& r : report.records) {
        if (!r.error.empty()) {
            ++report.failures;
            continue;
        }
        if (r.baseline) base.push_back(&*r.baseline);
        if (r.slot) adapted.push_back(&*r.slot);
    }
    report.baseline = aggregate(base);
    report.slot = aggregate(adapted);
    return report;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepConfig {
    std::vector<std::size_t> steps_grid{1, 2, 3, 4, 5};
    std::vector<double> lr_grid{0.01, 0.05, 0.1, 0.2};
    std::vector<std::uint64_t> seeds{0};

    void validate() const {
        if (steps_grid.empty() || lr_grid.empty() || seeds.empty()) throw ConfigError("sweep grids must be nonempty");
        for (double lr : lr_grid) {
            if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("sweep learning rates must be positive");
        }
    }
};

struct SweepCell {
    std::size_t steps = 0;
    double learning_rate = 0.0;
    std::uint64_t seed = 0;
    Aggregate result;
    std::size_t failures = 0;
    std::string error;
};

struct SweepReport {
    SweepConfig sweep;
    BenchmarkOptions base;
    std::string model;
    std::vector<Aggregate> baseline;  // one per seed
    std::vector<SweepCell> cells;     // steps-major, then lr, then seed
    // (max - min) / min of the seed-averaged SO across steps >= 1, per lr
    std::map<double, double> so_spread;
};

inline double relative_spread(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
    return *lo > 0.0 ? (*hi - *lo) / *lo : 0.0;
}

template <typename T>
SweepReport run_sweep(const Checkpoint<T>& ckpt, const ByteLevelBpe& tokenizer, const std::vector<EvalRecord>& dataset,
                      const SweepConfig& sweep, const BenchmarkOptions& base, std::string model_label = {}) {
    sweep.validate();
    SweepReport report;
    report.sweep = sweep;
    report.base = base;
    report.model = model_label;
    for (std::uint64_t seed : sweep.seeds) {
        BenchmarkOptions o = base;
        o.generation.seed = seed;
        o.run_baseline = true;
        o.run_slot = false;
        report.baseline.push_back(run_benchmark(ckpt, tokenizer, dataset, o, model_label).baseline);
    }
    for (std::size_t steps : sweep.steps_grid) {
        for (double lr : sweep.lr_grid) {
            for (std::uint64_t seed : sweep.seeds) {
                SweepCell cell;
                cell.steps = steps;
                cell.learning_rate = lr;
                cell.seed = seed;
                try {
                    BenchmarkOptions o = base;
                    o.slot.steps = steps;
                    o.slot.learning_rate = lr;
                    o.generation.seed = seed;
                    o.run_baseline = false;
                    o.run_slot = true;
                    const auto r = run_benchmark(ckpt, tokenizer, dataset, o, model_label);
                    cell.result = r.slot;
                    cell.failures = r.failures;
                } catch (const std::exception& e) {
                    cell.error = e.what();
                }
                report.cells.push_back(std::move(cell));
            }
        }
    }
    for (double lr : sweep.lr_grid) {
        std::vector<double> so;
        for (std::size_t steps : sweep.steps_grid) {
            if (steps == 0) continue;
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto& c : report.cells) {
                if (c.steps == steps && c.learning_rate == lr && c.error.empty()) {
                    sum += c.result.mean_so;
                    ++n;
                }
            }
            if (n > 0) so.push_back(sum / static_cast<double>(n));
        }
        report.so_spread[lr] = relative_spread(so);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Overhead

struct OverheadOptions {
    std::vector<std::size_t> steps_list{0, 1, 3, 5};
    std::size_t repetitions = 1;
    bool warmup = true;
    SlotConfig slot;
    GenerationConfig generation;
};

struct OverheadRow {
    std::size_t steps = 0;
    std::size_t prompt_tokens = 0;  // per repetition
    std::size_t new_tokens = 0;     // per repetition
    std::vector<double> total_seconds;  // one per repetition
    double mean_total_seconds = 0.0;
    double mean_prompt_seconds = 0.0;
    double mean_generate_seconds = 0.0;
    double si = 0.0;  // aggregate prompt tokens / prompt seconds
    double so = 0.0;  // aggregate new tokens / generate seconds
    double relative_overhead = 0.0;  // vs the steps = 0 row
};

struct OverheadReport {
    OverheadOptions options;
    std::string model;
    std::size_t prompts = 0;
    std::vector<OverheadRow> rows;  // ascending steps, steps = 0 first
};

// Wall clock for the whole prompt set under each step count, single worker.
// Steps = 0 is the plain model without delta. One warm-up pass over every
// configuration is discarded; configurations are interleaved per prompt in a
// rotating order so slow drift is shared.
template <typename T>
OverheadReport measure_overhead(const Checkpoint<T>& ckpt, const std::vector<TokenSequence>& prompts,
                                const OverheadOptions& options, std::string model_label = {}) {
    if (prompts.empty()) throw ConfigError("measure_overhead: no prompts");
    if (options.repetitions == 0) throw ConfigError("measure_overhead: repetitions must be positive");
    options.slot.validate();
    std::vector<std::size_t> steps = options.steps_list;
    steps.push_back(0);
    std::sort(steps.begin(), steps.end());
    steps.erase(std::unique(steps.begin(), steps.end()), steps.end());

    OverheadReport report;
    report.options = options;
    report.options.steps_list = steps;
    report.model = std::move(model_label);
    report.prompts = prompts.size();

    auto run = [&](std::size_t s, const TokenSequence& p) {
        if (s == 0) return timed_run(ckpt, p, nullptr, options.generation);
        SlotConfig cfg = options.slot;
        cfg.steps = s;
        return timed_run(ckpt, p, &cfg, options.generation);
    };
    if (options.warmup) {
        for (std::size_t s : steps) run(s, prompts.front());
    }

    const std::size_t C = steps.size();
    std::vector<std::vector<double>> prompt_s(C, std::vector<double>(options.repetitions, 0.0));
    std::vector<std::vector<double>> gen_s = prompt_s;
    std::vector<std::size_t> in_tokens(C, 0), out_tokens(C, 0);
    for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
        for (std::size_t p = 0; p < prompts.size(); ++p) {
            for (std::size_t k = 0; k < C; ++k) {
                const std::size_t c = (k + p + rep) % C;
                const RunMetrics m = run(steps[c], prompts[p]);
                prompt_s[c][rep] += m.prompt_seconds;
                gen_s[c][rep] += m.generate_seconds;
                if (rep == 0) {
                    in_tokens[c] += m.prompt_tokens;
                    out_tokens[c] += m.new_tokens;
                }
            }
        }
    }
    const double reps = static_cast<double>(options.repetitions);
    for (std::size_t c = 0; c < C; ++c) {
        OverheadRow row;
        row.steps = steps[c];
        row.prompt_tokens = in_tokens[c];
        row.new_tokens = out_tokens[c];
        double ps = 0.0, gs = 0.0;
        for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
            row.total_seconds.push_back(prompt_s[c][rep] + gen_s[c][rep]);
            ps += prompt_s[c][rep];
            gs += gen_s[c][rep];
        }
        row.mean_prompt_seconds = ps / reps;
        row.mean_generate_seconds = gs / reps;
        row.mean_total_seconds = (ps + gs) / reps;
        row.si = detail::rate(row.prompt_tokens, row.mean_prompt_seconds);
        row.so = detail::rate(row.new_tokens, row.mean_generate_seconds);
        report.rows.push_back(std::move(row));
    }
    const double base = report.rows.front().mean_total_seconds;
    for (auto& row : report.rows) row.relative_overhead = base > 0.0 ? row.mean_total_seconds / base - 1.0 : 0.0;
    return report;
}

// ---------------------------------------------------------------------------
// Serialization. Every clock-derived value lives under a "timing" key so
// reports can be compared with timing removed.

inline json generation_json(const GenerationConfig& g) {
    return {{"max_new_tokens", g.max_new_tokens},
            {"greedy", g.greedy},
            {"temperature", g.temperature},
            {"seed", g.seed},
            {"stop_at_eos", g.stop_at_eos}};
}

namespace detail {

// Invalid UTF-8 sequences become U+FFFD so text fields always serialize.
inline std::string utf8_safe(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto d = bpe_detail::decode_utf8(s, i);
        if (d.cp == bpe_detail::kInvalid) {
            out += "\xEF\xBF\xBD";
        } else {
            out.append(s.substr(i, d.len));
        }
        i += d.len;
    }
    return out;
}

} // namespace detail

inline json to_json(const RunMetrics& m) {
    return {{"correct", m.correct},
            {"extracted", m.extracted ? json(detail::utf8_safe(*m.extracted)) : json(nullptr)},
            {"output", detail::utf8_safe(m.output)},
            {"output_ids", m.output_ids},
            {"hit_eos", m.hit_eos},
            {"prompt_tokens", m.prompt_tokens},
            {"new_tokens", m.new_tokens},
            {"loss_trace", m.loss_trace},
            {"degenerate", m.degenerate},
            {"timing",
             {{"tokenize_seconds", m.tokenize_seconds},
              {"prompt_seconds", m.prompt_seconds},
              {"generate_seconds", m.generate_seconds},
              {"wall_seconds", m.wall_seconds},
              {"si", m.si},
              {"so", m.so}}}};
}

inline json to_json(const Aggregate& a) {
    return {{"runs", a.runs},
            {"correct", a.correct},
            {"accuracy", a.accuracy},
            {"prompt_tokens", a.prompt_tokens},
            {"new_tokens", a.new_tokens},
            {"timing",
             {{"mean_si", a.mean_si},
              {"mean_so", a.mean_so},
              {"total_wall_seconds", a.total_wall_seconds},
              {"total_prompt_seconds", a.total_prompt_seconds},
              {"total_generate_seconds", a.total_generate_seconds}}}};
}

inline json to_json(const BenchmarkReport& r) {
    json records = json::array();
    for (const auto& rec : r.records) {
        json j{{"id", detail::utf8_safe(rec.id)}, {"reference", detail::utf8_safe(rec.reference)}};
        j["baseline"] = rec.baseline ? to_json(*rec.baseline) : json(nullptr);
        j["slot"] = rec.slot ? to_json(*rec.slot) : json(nullptr);
        j["error"] = rec.error.empty() ? json(nullptr) : json(detail::utf8_safe(rec.error));
        records.push_back(std::move(j));
    }
    json slot_cfg = r.options.slot;
    return {{"kind", "benchmark"},
            {"model", r.model},
            {"config",
             {{"slot", slot_cfg}, {"generation", generation_json(r.options.generation)}, {"workers", r.options.workers}}},
            {"summary",
             {{"records", r.records.size()},
              {"failures", r.failures},
              {"baseline", r.options.run_baseline ? to_json(r.baseline) : json(nullptr)},
              {"slot", r.options.run_slot ? to_json(r.slot) : json(nullptr)}}},
            {"records", std::move(records)},
            {"reference_results", reference_benchmark_results()}};
}

inline json to_json(const SweepReport& r) {
    json cells = json::array();
    for (const auto& c : r.cells) {
        cells.push_back({{"steps", c.steps},
                         {"learning_rate", c.learning_rate},
                         {"seed", c.seed},
                         {"result", to_json(c.result)},
                         {"failures", c.failures},
                         {"error", c.error.empty() ? json(nullptr) : json(c.error)}});
    }
    json baseline = json::array();
    for (const auto& b : r.baseline) baseline.push_back(to_json(b));
    json spread = json::array();
    for (const auto& [lr, v] : r.so_spread) spread.push_back({{"learning_rate", lr}, {"so_relative_spread", v}});
    json slot_cfg = r.base.slot;
    return {{"kind", "sweep"},
            {"model", r.model},
            {"config",
             {{"steps_grid", r.sweep.steps_grid},
              {"lr_grid", r.sweep.lr_grid},
              {"seeds", r.sweep.seeds},
              {"slot", slot_cfg},
              {"generation", generation_json(r.base.generation)}}},
            {"baseline", std::move(baseline)},
            {"cells", std::move(cells)},
            {"timing", {{"so_spread_across_steps", std::move(spread)}}},
            {"reference_results", reference_sweep_baseline()}};
}

inline json to_json(const OverheadReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"steps", row.steps},
                        {"prompt_tokens", row.prompt_tokens},
                        {"new_tokens", row.new_tokens},
                        {"timing",
                         {{"total_seconds", row.total_seconds},
                          {"mean_total_seconds", row.mean_total_seconds},
                          {"mean_prompt_seconds", row.mean_prompt_seconds},
                          {"mean_generate_seconds", row.mean_generate_seconds},
                          {"si", row.si},
                          {"so", row.so},
                          {"relative_overhead", row.relative_overhead}}}});
    }
    json slot_cfg = r.options.slot;
    return {{"kind", "overhead"},
            {"model", r.model},
            {"prompts", r.prompts},
            {"config",
             {{"steps", r.options.steps_list},
              {"repetitions", r.options.repetitions},
              {"warmup", r.options.warmup},
              {"slot", slot_cfg},
              {"generation", generation_json(r.options.generation)}}},
            {"rows", std::move(rows)},
            {"reference_results", reference_overhead_results()}};
}

// Removes every "timing" member, recursively.
inline json strip_timing(json j) {
    if (j.is_object()) {
        j.erase("timing");
        for (auto& [k, v] : j.items()) v = strip_timing(v);
    } else if (j.is_array()) {
        for (auto& v : j) v = strip_timing(v);
    }
    return j;
}

// ---------------------------------------------------------------------------
// Text and CSV

// Two decimals with trailing zeros dropped: 12.20 -> "12.2".
inline std::string format_number(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", x);
    std::string s = buf;
    if (s.find('.') != std::string::npos) {
        while (s.back() == '0') s.pop_back();
        if (s.back() == '.') s.pop_back();
    }
    return s;
}

inline std::string format_number_exact(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", x);
    return buf;
}

// "accuracy of 26.67%, SI of 12.2, SO of 967.84"
inline std::string format_baseline_row(double accuracy, double si, double so) {
    return "accuracy of " + format_number(accuracy * 100.0) + "%, SI of " + format_number(si) + ", SO of " +
           format_number(so);
}

inline std::string csv_field(std::string_view s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string to_csv(const BenchmarkReport& r) {
    std::ostringstream os;
    os << "id,mode,correct,extracted,reference,prompt_tokens,new_tokens,final_loss,tokenize_seconds,prompt_seconds,"
          "generate_seconds,wall_seconds,si,so,error\n";
    os << std::setprecision(10);
    for (const auto& rec : r.records) {
        auto row = [&](const char* mode, const RunMetrics& m) {
            os << csv_field(rec.id) << ',' << mode << ',' << (m.correct ? 1 : 0) << ','
               << csv_field(m.extracted.value_or("")) << ',' << csv_field(rec.reference) << ',' << m.prompt_tokens
               << ',' << m.new_tokens << ',';
            if (!m.loss_trace.empty()) os << m.loss_trace.back();
            os << ',' << m.tokenize_seconds << ',' << m.prompt_seconds << ',' << m.generate_seconds << ','
               << m.wall_seconds << ',' << m.si << ',' << m.so << ",\n";
        };
        if (!rec.error.empty()) {
            os << csv_field(rec.id) << ",error,0,,\"\",0,0,,,,,,,," << csv_field(rec.error) << "\n";
            continue;
        }
        if (rec.baseline) row("baseline", *rec.baseline);
        if (rec.slot) row("slot", *rec.slot);
    }
    return os.str();
}

inline std::string to_csv(const SweepReport& r) {
    std::ostringstream os;
    os << "steps,learning_rate,seed,runs,correct,accuracy,mean_si,mean_so,total_wall_seconds,failures,error\n";
    os << std::setprecision(10);
    for (std::size_t s = 0; s < r.baseline.size(); ++s) {
        const auto& b = r.baseline[s];
        os << "0,," << r.sweep.seeds[s] << ',' << b.runs << ',' << b.correct << ',' << b.accuracy << ',' << b.mean_si
           << ',' << b.mean_so << ',' << b.total_wall_seconds << ",0,\n";
    }
    for (const auto& c : r.cells) {
        os << c.steps << ',' << c.learning_rate << ',' << c.seed << ',' << c.result.runs << ',' << c.result.correct
           << ',' << c.result.accuracy << ',' << c.result.mean_si << ',' << c.result.mean_so << ','
           << c.result.total_wall_seconds << ',' << c.failures << ',' << csv_field(c.error) << "\n";
    }
    return os.str();
}

inline std::string to_csv(const OverheadReport& r) {
    std::ostringstream os;
    os << "steps,prompt_tokens,new_tokens,mean_total_seconds,mean_prompt_seconds,mean_generate_seconds,si,so,"
          "relative_overhead\n";
    os << std::setprecision(10);
    for (const auto& row : r.rows) {
        os << row.steps << ',' << row.prompt_tokens << ',' << row.new_tokens << ',' << row.mean_total_seconds << ','
           << row.mean_prompt_seconds << ',' << row.mean_generate_seconds << ',' << row.si << ',' << row.so << ','
           << row.relative_overhead << "\n";
    }
    return os.str();
}

inline std::string to_text(const BenchmarkReport& r) {
    std::ostringstream os;
    os << "Benchmark" << (r.model.empty() ? "" : " on " + r.model) << ": " << r.records.size() << " records, "
       << r.failures << " failed\n";
    os << std::left << std::setw(10) << "run" << std::right << std::setw(8) << "Acc%" << std::setw(10) << "SI"
       << std::setw(10) << "SO" << std::setw(12) << "wall (s)" << "\n";
    auto line = [&](const char* name, const Aggregate& a) {
        os << std::left << std::setw(10) << name << std::right << std::fixed << std::setprecision(2) << std::setw(8)
           << a.accuracy * 100.0 << std::setw(10) << a.mean_si << std::setw(10) << a.mean_so << std::setw(12)
           << a.total_wall_seconds << "\n";
    };
    if (r.options.run_baseline) line("baseline", r.baseline);
    if (r.options.run_slot) line(("T=" + std::to_string(r.options.slot.steps)).c_str(), r.slot);
    if (r.options.run_baseline && r.options.run_slot) {
        os << "accuracy change: " << std::showpos << std::setprecision(2) << (r.slot.accuracy - r.baseline.accuracy) * 100.0
           << std::noshowpos << " points\n";
    }
    for (const auto& rec : r.records) {
        if (!rec.error.empty()) os << "failed " << rec.id << ": " << rec.error << "\n";
    }
    return os.str();
}

inline std::string to_text(const SweepReport& r) {
    std::ostringstream os;
    const auto& lrs = r.sweep.lr_grid;
    Aggregate base;
    for (const auto& b : r.baseline) {
        base.accuracy += b.accuracy;
        base.mean_si += b.mean_si;
        base.mean_so += b.mean_so;
    }
    const double ns = static_cast<double>(std::max<std::size_t>(r.baseline.size(), 1));
    os << "Baseline (T=0): " << format_baseline_row(base.accuracy / ns, base.mean_si / ns, base.mean_so / ns) << "\n";
    os << std::left << std::setw(6) << "T";
    for (double lr : lrs) os << " | " << std::setw(26) << ("lr=" + format_number_exact(lr));
    os << "\n" << std::setw(6) << "";
    for (std::size_t k = 0; k < lrs.size(); ++k) {
        os << " | " << std::right << std::setw(8) << "Acc%" << std::setw(9) << "SI" << std::setw(9) << "SO" << std::left;
    }
    os << "\n";
    for (std::size_t steps : r.sweep.steps_grid) {
        os << std::left << std::setw(6) << steps;
        for (double lr : lrs) {
            double acc = 0.0, si = 0.0, so = 0.0;
            std::size_t n = 0;
            bool failed = false;
            for (const auto& c : r.cells) {
                if (c.steps != steps || c.learning_rate != lr) continue;
                if (!c.error.empty()) {
                    failed = true;
                    continue;
                }
                acc += c.result.accuracy;
                si += c.result.mean_si;
                so += c.result.mean_so;
                ++n;
            }
            os << " | " << std::right;
            if (n == 0 || failed) {
                os << std::setw(26) << "failed";
            } else {
                const double k = static_cast<double>(n);
                os << std::setw(8) << format_number(100.0 * acc / k) << std::setw(9) << format_number(si / k)
                   << std::setw(9) << format_number(so / k);
            }
            os << std::left;
        }
        os << "\n";
    }
    for (const auto& [lr, v] : r.so_spread) {
        os << "SO spread across T>=1 at lr=" << format_number_exact(lr) << ": " << format_number(100.0 * v) << "%\n";
    }
    return os.str();
}

inline std::string to_text(const OverheadReport& r) {
    std::ostringstream os;
    os << "Inference time over " << r.prompts << " prompts" << (r.model.empty() ? "" : " on " + r.model) << ", "
       << r.options.repetitions << " repetition(s)\n";
    os << std::left << std::setw(22) << "steps";
    for (const auto& row : r.rows) os << std::right << std::setw(11) << (row.steps == 0 ? std::string("baseline") : std::to_string(row.steps));
    os << "\n";
    auto line = [&](const char* name, auto get) {
        os << std::left << std::setw(22) << name << std::right;
        for (const auto& row : r.rows) os << std::setw(11) << get(row);
        os << "\n";
    };
    line("overall time (s)", [](const OverheadRow& x) { return format_number(x.mean_total_seconds); });
    line("relative overhead", [](const OverheadRow& x) { return format_number(100.0 * x.relative_overhead) + "%"; });
    line("prompt stage (s)", [](const OverheadRow& x) { return format_number(x.mean_prompt_seconds); });
    line("generation (s)", [](const OverheadRow& x) { return format_number(x.mean_generate_seconds); });
    line("SI (tok/s)", [](const OverheadRow& x) { return format_number(x.si); });
    line("SO (tok/s)", [](const OverheadRow& x) { return format_number(x.so); });
    line("new tokens", [](const OverheadRow& x) { return std::to_string(x.new_tokens); });
    return os.str();
}

} // namespace slot::eval
