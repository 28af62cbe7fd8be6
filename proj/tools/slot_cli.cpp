// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "slot/adapter.hpp"
#include "slot/eval.hpp"
#include "slot/lmv.hpp"
#include "slot/model.hpp"
#include "slot/synthetic.hpp"
#include "slot/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 1, kLoad = 2, kPartial = 3 };

struct Options {
    // model
    std::string model_dir;
    std::string tokenizer_dir;
    std::string synthetic;  // tiny | gpt2-small
    std::uint64_t synthetic_seed = 0;
    std::string precision = "f32";
    // adaptation
    std::size_t steps = 3;
    double lr = 0.01;
    double weight_decay = 1e-8;
    double adam_eps = 1e-5;
    double clip_norm = 0.0;
    std::string reduction = "mean";
    // generation
    std::size_t max_new_tokens = 32;
    bool greedy = false;
    double temperature = 0.0;
    std::uint64_t seed = 0;
    bool ignore_eos = false;
    // io
    std::string dataset;
    std::string prompt;
    std::size_t limit = 0;
    std::size_t workers = 1;
    std::string report;
    std::string format = "json";
    bool omit_timing = false;
    // subcommand specific
    bool no_baseline = false;
    std::vector<std::size_t> steps_grid{1, 2, 3, 4, 5};
    std::vector<double> lr_grid{0.01, 0.05, 0.1, 0.2};
    std::vector<std::uint64_t> seeds{0};
    std::vector<std::size_t> steps_list{0, 1, 3, 5};
    std::size_t repetitions = 1;
    bool no_warmup = false;
    std::size_t top_k = 20;
    std::string csv;
    std::string export_path;
    std::string out_dir;
};

slot::SlotConfig slot_config(const Options& o) {
    slot::SlotConfig c;
    c.steps = o.steps;
    c.learning_rate = o.lr;
    c.weight_decay = o.weight_decay;
    c.adam_eps = o.adam_eps;
    if (o.clip_norm > 0.0) c.clip_norm = o.clip_norm;
    if (o.reduction == "mean") {
        c.reduction = slot::LossReduction::mean;
    } else if (o.reduction == "sum") {
        c.reduction = slot::LossReduction::sum;
    } else {
        throw slot::ConfigError("--reduction must be mean or sum");
    }
    c.validate();
    return c;
}

slot::GenerationConfig generation_config(const Options& o) {
    slot::GenerationConfig g;
    g.max_new_tokens = o.max_new_tokens;
    g.greedy = o.temperature <= 0.0 || o.greedy;
    g.temperature = o.temperature > 0.0 ? o.temperature : 1.0;
    g.seed = o.seed;
    g.stop_at_eos = !o.ignore_eos;
    return g;
}

// Byte-level tokenizer and matching small model used by --synthetic tiny.
slot::ModelConfig tiny_byte_config() {
    auto c = slot::synthetic::tiny_config(257, 32, 2, 4, 512);
    c.eos_token_id = 256;
    return c;
}

slot::ByteLevelBpe load_tokenizer(const Options& o) {
    auto from_dir = [](const fs::path& d) { return slot::ByteLevelBpe::from_files(d / "vocab.json", d / "merges.txt"); };
    if (!o.tokenizer_dir.empty()) return from_dir(o.tokenizer_dir);
    if (!o.model_dir.empty() && fs::exists(fs::path(o.model_dir) / "vocab.json")) return from_dir(o.model_dir);
    if (o.synthetic == "tiny") return slot::ByteLevelBpe::from_byte_merges({});
    return from_dir(SLOT_ASSET_DIR);
}

template <typename T>
slot::Checkpoint<T> load_model(const Options& o, std::string& label) {
    if (!o.model_dir.empty()) {
        label = fs::path(o.model_dir).filename().string();
        if (label.empty()) label = o.model_dir;
        return slot::load_checkpoint<T>(o.model_dir);
    }
    if (o.synthetic == "tiny") {
        label = "synthetic-tiny-seed" + std::to_string(o.synthetic_seed);
        return slot::synthetic::tiny_checkpoint<T>(o.synthetic_seed, tiny_byte_config());
    }
    if (o.synthetic == "gpt2-small") {
        label = "synthetic-gpt2-small-seed" + std::to_string(o.synthetic_seed);
        slot::synthetic::InitOptions init;
        init.seed = o.synthetic_seed;
        return slot::synthetic::random_checkpoint<T>(slot::synthetic::gpt2_small_config(), init);
    }
    throw slot::ConfigError("give --model-dir or --synthetic {tiny|gpt2-small}");
}

void emit(const Options& o, const std::string& content) {
    if (o.report.empty()) {
        std::cout << content;
        if (!content.empty() && content.back() != '\n') std::cout << '\n';
        return;
    }
    std::ofstream out(o.report, std::ios::binary);
    if (!out) throw slot::LoadError("cannot write report " + o.report);
    out << content;
    if (!content.empty() && content.back() != '\n') out << '\n';
}

template <typename Report>
void emit_report(const Options& o, const Report& r) {
    if (o.format == "json") {
        json j = slot::eval::to_json(r);
        if (o.omit_timing) j = slot::eval::strip_timing(j);
        emit(o, j.dump(2));
    } else if (o.format == "csv") {
        emit(o, slot::eval::to_csv(r));
    } else {
        emit(o, slot::eval::to_text(r));
    }
}

std::vector<slot::eval::EvalRecord> dataset(const Options& o) {
    if (o.dataset.empty()) throw slot::ConfigError("--dataset is required");
    auto d = slot::eval::load_dataset(o.dataset);
    if (o.limit > 0 && d.size() > o.limit) d.resize(o.limit);
    return d;
}

std::vector<std::string> prompt_texts(const Options& o) {
    if (!o.prompt.empty()) return {o.prompt};
    std::vector<std::string> out;
    for (auto& r : dataset(o)) out.push_back(std::move(r.prompt));
    return out;
}

template <typename T>
int cmd_adapt(const Options& o) {
    const auto cfg = slot_config(o);
    const auto gen = generation_config(o);
    if (o.prompt.empty()) throw slot::ConfigError("--prompt is required");
    std::string label;
    const auto tok = load_tokenizer(o);
    const auto ck = load_model<T>(o, label);
    const auto ids = tok.encode(o.prompt);
    const auto sample = slot::optimize_delta(ck, ids, cfg);
    const auto result = slot::generate(ck, sample, gen);
    const auto lmv = slot::rank_tokens(slot::compute_lmv(ck, sample.delta), &tok,
                                       std::min(o.top_k, static_cast<std::size_t>(ck.config.vocab_size)),
                                       ck.config.eos_token_id, "prompt");
    if (!o.export_path.empty()) {
        std::ofstream ex(o.export_path);
        ex << json(slot::export_sample(sample)).dump(2) << '\n';
        if (!ex) throw slot::LoadError("cannot write " + o.export_path);
    }
    const std::string text = slot::eval::detail::strip_eos(tok, result.tokens, ck.config.eos_token_id);
    if (o.format == "json") {
        json j{{"kind", "adapt"},
               {"model", label},
               {"prompt_ids", ids},
               {"config", cfg},
               {"loss_trace", sample.loss_trace},
               {"degenerate", sample.degenerate},
               {"output_ids", result.tokens},
               {"output", text},
               {"hit_eos", result.hit_eos},
               {"lmv", slot::lmv_report_json(lmv)}};
        if (!sample.warning.empty()) j["warning"] = sample.warning;
        emit(o, j.dump(2));
    } else {
        std::ostringstream os;
        os << "prompt tokens: " << ids.size() << "\nloss trace:";
        for (double l : sample.loss_trace) os << ' ' << l;
        if (!sample.warning.empty()) os << "\nwarning: " << sample.warning;
        os << "\noutput: " << text << "\n\n" << slot::lmv_report_text(lmv);
        emit(o, os.str());
    }
    return kOk;
}

template <typename T>
int cmd_bench(const Options& o) {
    slot::eval::BenchmarkOptions b;
    b.slot = slot_config(o);
    b.generation = generation_config(o);
    b.run_baseline = !o.no_baseline;
    b.workers = o.workers;
    const auto data = dataset(o);
    std::string label;
    const auto tok = load_tokenizer(o);
    const auto ck = load_model<T>(o, label);
    const auto report = slot::eval::run_benchmark(ck, tok, data, b, label);
    emit_report(o, report);
    return report.failures > 0 ? kPartial : kOk;
}

template <typename T>
int cmd_sweep(const Options& o) {
    slot::eval::BenchmarkOptions b;
    b.slot = slot_config(o);
    b.generation = generation_config(o);
    b.workers = o.workers;
    slot::eval::SweepConfig s{o.steps_grid, o.lr_grid, o.seeds};
    const auto data = dataset(o);
    std::string label;
    const auto tok = load_tokenizer(o);
    const auto ck = load_model<T>(o, label);
    const auto report = slot::eval::run_sweep(ck, tok, data, s, b, label);
    emit_report(o, report);
    bool partial = false;
    for (const auto& c : report.cells) partial = partial || !c.error.empty() || c.failures > 0;
    return partial ? kPartial : kOk;
}

template <typename T>
int cmd_overhead(const Options& o) {
    slot::eval::OverheadOptions opt;
    opt.slot = slot_config(o);
    opt.generation = generation_config(o);
    opt.steps_list = o.steps_list;
    opt.repetitions = o.repetitions;
    opt.warmup = !o.no_warmup;
    const auto texts = prompt_texts(o);
    std::string label;
    const auto tok = load_tokenizer(o);
    const auto ck = load_model<T>(o, label);
    std::vector<slot::TokenSequence> prompts;
    for (const auto& t : texts) prompts.push_back(tok.encode(t));
    emit_report(o, slot::eval::measure_overhead(ck, prompts, opt, label));
    return kOk;
}

template <typename T>
int cmd_lmv(const Options& o) {
    const auto cfg = slot_config(o);
    std::vector<std::pair<std::string, std::string>> items;
    if (!o.prompt.empty()) {
        items.emplace_back("prompt", o.prompt);
    } else {
        for (auto& r : dataset(o)) items.emplace_back(r.id, r.prompt);
    }
    std::string label;
    const auto tok = load_tokenizer(o);
    const auto ck = load_model<T>(o, label);
    const std::size_t k = std::min(o.top_k, static_cast<std::size_t>(ck.config.vocab_size));
    std::vector<std::vector<double>> lmvs;
    std::vector<slot::LmvReport> reports;
    std::size_t failures = 0;
    json per = json::array();
    for (const auto& [id, text] : items) {
        try {
            const auto sample = slot::optimize_delta(ck, tok.encode(text), cfg);
            auto lmv = slot::compute_lmv(ck, sample.delta);
            lmvs.push_back(lmv);
            reports.push_back(slot::rank_tokens(std::move(lmv), &tok, k, ck.config.eos_token_id, id));
        } catch (const slot::Error& e) {
            ++failures;
            std::cerr << "lmv: " << id << ": " << e.what() << '\n';
        }
    }
    if (lmvs.empty()) throw slot::ConfigError("no prompt could be adapted");
    const auto mean = slot::rank_tokens(slot::mean_lmv(lmvs), &tok, k, ck.config.eos_token_id, "mean");
    if (!o.csv.empty()) {
        std::ofstream c(o.csv);
        c << slot::lmv_csv(mean, &tok);
        if (!c) throw slot::LoadError("cannot write " + o.csv);
    }
    if (o.format == "json") {
        json j{{"kind", "lmv"}, {"model", label}, {"config", cfg}, {"mean", slot::lmv_report_json(mean)}};
        for (const auto& r : reports) per.push_back(slot::lmv_report_json(r));
        j["prompts"] = per;
        j["failures"] = failures;
        emit(o, j.dump(2));
    } else if (o.format == "csv") {
        emit(o, slot::lmv_csv(mean, &tok));
    } else {
        std::string text = slot::lmv_report_text(mean);
        for (const auto& r : reports) text += "\n" + slot::lmv_report_text(r);
        emit(o, text);
    }
    return failures > 0 ? kPartial : kOk;
}

template <typename T>
int cmd_synth(const Options& o) {
    if (o.out_dir.empty()) throw slot::ConfigError("--out is required");
    if (o.synthetic.empty()) throw slot::ConfigError("--synthetic {tiny|gpt2-small} is required");
    Options src = o;
    src.model_dir.clear();
    std::string label;
    const auto ck = load_model<T>(src, label);
    slot::save_checkpoint(ck, o.out_dir);
    load_tokenizer(src).save(o.out_dir);
    std::cout << "wrote " << label << " to " << o.out_dir << " (sha256 " << slot::parameter_digest(ck) << ")\n";
    return kOk;
}

template <typename T>
int dispatch(const std::string& name, const Options& o) {
    if (name == "adapt") return cmd_adapt<T>(o);
    if (name == "bench") return cmd_bench<T>(o);
    if (name == "sweep") return cmd_sweep<T>(o);
    if (name == "overhead") return cmd_overhead<T>(o);
    if (name == "lmv") return cmd_lmv<T>(o);
    if (name == "synth") return cmd_synth<T>(o);
    throw slot::ConfigError("unknown subcommand " + name);
}

void add_model_options(CLI::App* c, Options& o) {
    c->add_option("--model-dir", o.model_dir, "Checkpoint directory (model.safetensors + config.json)");
    c->add_option("--tokenizer-dir", o.tokenizer_dir, "Directory with vocab.json and merges.txt");
    c->add_option("--synthetic", o.synthetic, "Use a generated model instead of --model-dir")
        ->check(CLI::IsMember({"tiny", "gpt2-small"}));
    c->add_option("--synthetic-seed", o.synthetic_seed, "Seed for --synthetic");
    c->add_option("--precision", o.precision, "Weight precision")->check(CLI::IsMember({"f32", "f64"}));
}

void add_slot_options(CLI::App* c, Options& o) {
    c->add_option("-T,--steps", o.steps, "Optimization steps on the prompt");
    c->add_option("--lr", o.lr, "Learning rate");
    c->add_option("--weight-decay", o.weight_decay, "Decoupled weight decay");
    c->add_option("--adam-eps", o.adam_eps, "AdamW epsilon");
    c->add_option("--clip-norm", o.clip_norm, "Clip the gradient to this L2 norm (0 = off)");
    c->add_option("--reduction", o.reduction, "Prompt loss reduction")->check(CLI::IsMember({"mean", "sum"}));
}

void add_generation_options(CLI::App* c, Options& o) {
    c->add_option("--max-new-tokens", o.max_new_tokens, "Generation budget");
    auto* greedy = c->add_flag("--greedy", o.greedy, "Greedy decoding (default)");
    c->add_option("--temperature", o.temperature, "Sample at this temperature")->excludes(greedy);
    c->add_option("--seed", o.seed, "Sampling seed");
    c->add_flag("--ignore-eos", o.ignore_eos, "Always generate --max-new-tokens tokens");
}

void add_report_options(CLI::App* c, Options& o) {
    c->add_option("--report", o.report, "Write the report here instead of stdout");
    c->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"json", "csv", "text"}));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Per-prompt delta adaptation for GPT-2-class decoders"};
    app.require_subcommand(1);
    Options o;

    auto* adapt = app.add_subcommand("adapt", "Adapt one prompt, generate, and report the logit shift");
    add_model_options(adapt, o);
    add_slot_options(adapt, o);
    add_generation_options(adapt, o);
    add_report_options(adapt, o);
    adapt->add_option("--prompt", o.prompt, "Prompt text")->required();
    adapt->add_option("--top-k", o.top_k, "Tokens listed per direction");
    adapt->add_option("--export", o.export_path, "Write delta, loss trace and config as JSON");

    auto* bench = app.add_subcommand("bench", "Baseline and adapted runs over a dataset");
    add_model_options(bench, o);
    add_slot_options(bench, o);
    add_generation_options(bench, o);
    add_report_options(bench, o);
    bench->add_option("--dataset", o.dataset, "JSON-Lines dataset")->required();
    bench->add_option("--limit", o.limit, "Use only the first N records");
    bench->add_option("--workers", o.workers, "Parallel records");
    bench->add_flag("--no-baseline", o.no_baseline, "Skip the unadapted run");
    bench->add_flag("--omit-timing", o.omit_timing, "Drop clock-derived fields from JSON");

    auto* sweep = app.add_subcommand("sweep", "Grid over steps and learning rate");
    add_model_options(sweep, o);
    add_slot_options(sweep, o);
    add_generation_options(sweep, o);
    add_report_options(sweep, o);
    sweep->add_option("--dataset", o.dataset, "JSON-Lines dataset")->required();
    sweep->add_option("--limit", o.limit, "Use only the first N records");
    sweep->add_option("--workers", o.workers, "Parallel records");
    sweep->add_option("--steps-grid", o.steps_grid, "Step counts")->delimiter(',');
    sweep->add_option("--lr-grid", o.lr_grid, "Learning rates")->delimiter(',');
    sweep->add_option("--seeds", o.seeds, "Sampling seeds")->delimiter(',');
    sweep->add_flag("--omit-timing", o.omit_timing, "Drop clock-derived fields from JSON");

    auto* overhead = app.add_subcommand("overhead", "Total inference time per step count");
    add_model_options(overhead, o);
    add_slot_options(overhead, o);
    add_generation_options(overhead, o);
    add_report_options(overhead, o);
    overhead->add_option("--dataset", o.dataset, "JSON-Lines dataset supplying prompts");
    overhead->add_option("--prompt", o.prompt, "Single prompt instead of a dataset");
    overhead->add_option("--limit", o.limit, "Use only the first N records");
    overhead->add_option("--steps-list", o.steps_list, "Step counts (0 is always included)")->delimiter(',');
    overhead->add_option("--repetitions", o.repetitions, "Timed passes over the prompt set");
    overhead->add_flag("--no-warmup", o.no_warmup, "Skip the discarded warm-up pass");

    auto* lmv = app.add_subcommand("lmv", "Logit shift rankings for adapted prompts");
    add_model_options(lmv, o);
    add_slot_options(lmv, o);
    add_report_options(lmv, o);
    lmv->add_option("--dataset", o.dataset, "JSON-Lines dataset");
    lmv->add_option("--prompt", o.prompt, "Single prompt instead of a dataset");
    lmv->add_option("--limit", o.limit, "Use only the first N records");
    lmv->add_option("--top-k", o.top_k, "Tokens listed per direction");
    lmv->add_option("--csv", o.csv, "Write token_id,token,shift for the mean shift");

    auto* synth = app.add_subcommand("synth", "Write a generated checkpoint and tokenizer to disk");
    add_model_options(synth, o);
    synth->add_option("--out", o.out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }
    const std::string name = app.get_subcommands().front()->get_name();
    try {
        return o.precision == "f64" ? dispatch<double>(name, o) : dispatch<float>(name, o);
    } catch (const slot::LoadError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kLoad;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kLoad;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfig;
    }
}
