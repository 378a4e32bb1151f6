// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gistlm/analytics.hpp"
#include "gistlm/checkpoint.hpp"
#include "gistlm/errors.hpp"
#include "gistlm/inference.hpp"
#include "gistlm/model.hpp"
#include "gistlm/tasks.hpp"
#include "gistlm/visibility.hpp"

namespace {

using namespace gistlm;

struct HarnessConfig {
    CompressionConfig comp;
    ModelConfig model;
    OptimizerConfig opt;
};

int64_t require_int(const nlohmann::json& j, const std::string& key) {
    if (!j.is_number_integer()) {
        throw ConfigError("config key '" + key + "' must be an integer");
    }
    return j.get<int64_t>();
}

// Top-level document: the compression keys {ratio, sink_count, window_units,
// block_size} plus optional "model" and "train" objects. Anything else is
// rejected.
HarnessConfig load_harness_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file: " + path);
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid config JSON: ") + e.what());
    }
    if (!doc.is_object()) {
        throw ConfigError("config JSON must be an object");
    }

    HarnessConfig cfg;
    nlohmann::json comp_doc = nlohmann::json::object();
    for (const auto& [key, value] : doc.items()) {
        if (key == "ratio" || key == "sink_count" || key == "window_units" ||
            key == "block_size") {
            comp_doc[key] = value;
        } else if (key == "model") {
            for (const auto& [mk, mv] : value.items()) {
                if (mk == "layers") {
                    cfg.model.layers = require_int(mv, mk);
                } else if (mk == "heads") {
                    cfg.model.heads = require_int(mv, mk);
                } else if (mk == "head_dim") {
                    cfg.model.head_dim = require_int(mv, mk);
                } else if (mk == "hidden_mult") {
                    cfg.model.hidden_mult = require_int(mv, mk);
                } else if (mk == "vocab") {
                    cfg.model.vocab = require_int(mv, mk);
                } else if (mk == "rope_theta") {
                    cfg.model.rope_theta = mv.get<double>();
                } else if (mk == "seed") {
                    cfg.model.seed = mv.get<uint64_t>();
                } else {
                    throw ConfigError("unknown model config key '" + mk + "'");
                }
            }
        } else if (key == "train") {
            for (const auto& [tk, tv] : value.items()) {
                if (tk == "lr") {
                    cfg.opt.lr = tv.get<double>();
                } else if (tk == "weight_decay") {
                    cfg.opt.weight_decay = tv.get<double>();
                } else if (tk == "warmup_steps") {
                    cfg.opt.warmup_steps = require_int(tv, tk);
                } else if (tk == "total_steps") {
                    cfg.opt.total_steps = require_int(tv, tk);
                } else if (tk == "final_lr_fraction") {
                    cfg.opt.final_lr_fraction = tv.get<double>();
                } else {
                    throw ConfigError("unknown train config key '" + tk + "'");
                }
            }
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    cfg.comp = CompressionConfig::from_json(comp_doc.dump());
    return cfg;
}

std::vector<TokenId> parse_token_list(const std::string& text) {
    std::vector<TokenId> tokens;
    std::string normalized = text;
    for (char& c : normalized) {
        if (c == ',') {
            c = ' ';
        }
    }
    std::istringstream in(normalized);
    int64_t v;
    while (in >> v) {
        tokens.push_back(static_cast<TokenId>(v));
    }
    if (!in.eof()) {
        throw ConfigError("prompt must be a list of integer token ids");
    }
    return tokens;
}

TaskKind parse_task(const std::string& name) {
    if (name == "copy") {
        return TaskKind::Copy;
    }
    if (name == "kv_recall") {
        return TaskKind::KvRecall;
    }
    if (name == "char_lm") {
        return TaskKind::CharLm;
    }
    throw ConfigError("unknown task '" + name + "'");
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot open output file: " + path);
    }
    return out;
}

struct CommonFlags {
    std::string config_path;
    std::string precision = "f32";
    std::string mode = "sparse";
    uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonFlags* flags) {
    cmd->add_option("--config", flags->config_path, "JSON config file");
    cmd->add_option("--precision", flags->precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--mode", flags->mode, "attention path: oracle or sparse")
        ->check(CLI::IsMember({"oracle", "sparse"}));
    cmd->add_option_function<uint64_t>(
        "--seed", [flags](const uint64_t v) { flags->seed = v; flags->seed_set = true; },
        "RNG seed");
}

struct TrainFlags {
    CommonFlags common;
    std::string task = "char_lm";
    std::string pattern = "unified";
    int64_t chunk_len = 64;
    int64_t steps = 200;
    int64_t batch = 2;
    int64_t seq_len = 512;
    int64_t needle_distance = 0;
    std::string out_prefix = "gistlm-ckpt";
    std::string loss_csv;
    // optional direct overrides of the config file
    int64_t ratio = -1, sink_count = -1, window_units = -1, block_size = -1;
    int64_t layers = -1, heads = -1, head_dim = -1, vocab = -1;
    double lr = -1.0;
    int64_t warmup = -1;
};

template <typename Real>
int run_train(const TrainFlags& flags) {
    HarnessConfig cfg;
    cfg.comp.sink_count = 4;  // toy-scale training defaults
    cfg.comp.window_units = 1;
    cfg.comp.block_size = 16;
    if (!flags.common.config_path.empty()) {
        cfg = load_harness_config(flags.common.config_path);
    }
    if (flags.ratio > 0) cfg.comp.ratio = flags.ratio;
    if (flags.sink_count >= 0) cfg.comp.sink_count = flags.sink_count;
    if (flags.window_units >= 0) cfg.comp.window_units = flags.window_units;
    if (flags.block_size > 0) cfg.comp.block_size = flags.block_size;
    if (flags.layers >= 0) cfg.model.layers = flags.layers;
    if (flags.heads > 0) cfg.model.heads = flags.heads;
    if (flags.head_dim > 0) cfg.model.head_dim = flags.head_dim;
    if (flags.vocab > 0) cfg.model.vocab = flags.vocab;
    if (flags.lr > 0) cfg.opt.lr = flags.lr;
    if (flags.warmup >= 0) cfg.opt.warmup_steps = flags.warmup;
    if (flags.common.seed_set) {
        cfg.model.seed = flags.common.seed;
    }
    cfg.opt.total_steps = flags.steps;

    const TrainPattern pattern = flags.pattern == "chunk" ? TrainPattern::ChunkBaseline
                                                          : TrainPattern::Unified;
    if (pattern == TrainPattern::ChunkBaseline) {
        cfg.comp.sink_count = 0;  // the baseline layout carries no sinks
    }

    SynthTaskSpec task;
    task.kind = parse_task(flags.task);
    task.vocab = cfg.model.vocab;
    task.seq_len = flags.seq_len;
    task.needle_distance = flags.needle_distance;
    task.seed = cfg.model.seed + 1;

    Model<Real> model(cfg.model, cfg.comp);
    TrainConfig tc;
    tc.optimizer = cfg.opt;
    tc.pattern = pattern;
    tc.chunk_len = flags.chunk_len;
    tc.mode = flags.common.mode == "oracle" ? AttentionMode::Oracle : AttentionMode::Sparse;
    Trainer<Real> trainer(model, tc);

    const auto data = gen_task(task, flags.steps * flags.batch);
    std::ofstream loss_csv;
    if (!flags.loss_csv.empty()) {
        loss_csv = open_out(flags.loss_csv);
        loss_csv << "step,mean_ce,grad_norm\n";
    }
    for (int64_t step = 0; step < flags.steps; ++step) {
        std::vector<std::vector<TokenId>> batch;
        for (int64_t b = 0; b < flags.batch; ++b) {
            batch.push_back(data[step * flags.batch + b].tokens);
        }
        const LossReport report = trainer.step(batch);
        if (loss_csv.is_open()) {
            loss_csv << step << ',' << report.mean_ce << ',' << report.grad_norm << '\n';
        }
        if (step % 50 == 0 || step + 1 == flags.steps) {
            std::cerr << "step " << step << " mean_ce " << report.mean_ce << " grad_norm "
                      << report.grad_norm << '\n';
        }
    }
    save_checkpoint(flags.out_prefix, model, pattern,
                    pattern == TrainPattern::ChunkBaseline ? flags.chunk_len : 0);
    std::cerr << "checkpoint written to " << flags.out_prefix << ".json/.bin\n";
    return 0;
}

struct EvalFlags {
    CommonFlags common;
    std::string checkpoint;
    int64_t chunk_len = 64;
    int64_t sequences = 8;
    int64_t seq_len = 512;
    std::string out;
};

template <typename Real>
int run_eval_boundary(const EvalFlags& flags) {
    const LoadedCheckpoint<Real> loaded = load_checkpoint<Real>(flags.checkpoint);
    SynthTaskSpec task;
    task.kind = TaskKind::CharLm;
    task.vocab = loaded.model.model_config().vocab;
    task.seq_len = flags.seq_len;
    task.seed = flags.common.seed_set ? flags.common.seed : 9999;

    std::vector<std::vector<TokenId>> data;
    for (const TaskInstance& inst : gen_task(task, flags.sequences)) {
        data.push_back(inst.tokens);
    }
    const BoundaryProfile profile = boundary_loss_profile(
        loaded.model, data, flags.chunk_len, loaded.pattern, loaded.chunk_len);
    if (flags.out.empty()) {
        write_boundary_csv(profile, std::cout);
    } else {
        auto out = open_out(flags.out);
        write_boundary_csv(profile, out);
    }
    return 0;
}

template <typename Real>
int run_attn_stats(const EvalFlags& flags) {
    const LoadedCheckpoint<Real> loaded = load_checkpoint<Real>(flags.checkpoint);
    SynthTaskSpec task;
    task.kind = TaskKind::CharLm;
    task.vocab = loaded.model.model_config().vocab;
    task.seq_len = flags.seq_len;
    task.seed = flags.common.seed_set ? flags.common.seed : 9999;

    std::vector<std::vector<TokenId>> data;
    for (const TaskInstance& inst : gen_task(task, flags.sequences)) {
        data.push_back(inst.tokens);
    }
    const auto mass = attention_mass_profile(loaded.model, data, flags.chunk_len, loaded.pattern,
                                             loaded.chunk_len);
    if (flags.out.empty()) {
        write_attn_stats_csv(mass, std::cout);
    } else {
        auto out = open_out(flags.out);
        write_attn_stats_csv(mass, out);
    }
    return 0;
}

struct GenerateFlags {
    CommonFlags common;
    std::string checkpoint;
    std::string prompt;
    std::string prompt_file;
    int64_t max_new = 32;
    int64_t chunk_size = 0;  // 0: one chunk over the whole padded prompt
    int64_t pad_id = 0;
    std::string trace_path;
};

template <typename Real>
int run_generate(const GenerateFlags& flags) {
    const LoadedCheckpoint<Real> loaded = load_checkpoint<Real>(flags.checkpoint);
    if (loaded.pattern == TrainPattern::ChunkBaseline) {
        throw ConfigError("generate requires a unified-pattern checkpoint");
    }
    const Model<Real>& model = loaded.model;
    const CompressionConfig& comp = model.compression_config();

    std::vector<TokenId> prompt;
    if (!flags.prompt_file.empty()) {
        std::ifstream in(flags.prompt_file);
        if (!in) {
            throw Error("cannot open prompt file: " + flags.prompt_file);
        }
        std::stringstream buf;
        buf << in.rdbuf();
        prompt = parse_token_list(buf.str());
    } else {
        prompt = parse_token_list(flags.prompt);
    }
    if (prompt.empty()) {
        throw ConfigError("empty prompt");
    }
    for (const TokenId t : prompt) {
        if (t < 0 || t >= model.model_config().vocab) {
            throw ConfigError("prompt token " + std::to_string(t) +
                              " outside the base vocabulary");
        }
    }
    prompt = pad_to_ratio(std::move(prompt), static_cast<TokenId>(flags.pad_id), comp);
    const int64_t chunk = flags.chunk_size > 0 ? flags.chunk_size
                                               : static_cast<int64_t>(prompt.size());

    InferenceEngine<Real> engine(model);
    std::vector<Real> logits = engine.prefill(prompt, chunk);

    std::vector<TraceRow> trace;
    const auto record_trace = [&](int64_t step) {
        for (int64_t l = 0; l < model.model_config().layers; ++l) {
            trace.push_back(TraceRow{step, l, engine.cache().sink_entries(),
                                     engine.cache().gist_entries(),
                                     engine.cache().raw_entries()});
        }
    };
    for (int64_t step = 0; step < flags.max_new; ++step) {
        const TokenId next = greedy_base_token(std::span<const Real>(logits),
                                               model.model_config().vocab);
        std::cout << next << '\n';
        logits = engine.decode_step(next);
        if (!flags.trace_path.empty()) {
            record_trace(step);
        }
    }
    if (!flags.trace_path.empty()) {
        auto out = open_out(flags.trace_path);
        write_trace_csv(trace, out);
    }
    return 0;
}

struct BenchFlags {
    std::vector<int64_t> lengths{16384, 32768, 65536, 131072};
    std::vector<int64_t> ratios{4, 8};
    int64_t repeats = 0;
    int64_t heads = 1;
    int64_t head_dim = 32;
    int64_t sink_count = 128;
    int64_t window_units = 32;
    int64_t block_size = 64;
    std::string out;
};

int run_bench(const BenchFlags& flags) {
    CompressionConfig base;
    base.sink_count = flags.sink_count;
    base.window_units = flags.window_units;
    base.block_size = flags.block_size;
    const auto records =
        bench(flags.lengths, flags.ratios, base, flags.repeats, flags.heads, flags.head_dim);
    if (flags.out.empty()) {
        write_bench_csv(records, std::cout);
    } else {
        auto out = open_out(flags.out);
        write_bench_csv(records, out);
    }
    return 0;
}

struct MaskDumpFlags {
    CommonFlags common;
    int64_t raw_len = 64;
    std::string pattern = "unified";
    int64_t chunk_len = 64;
    int64_t ratio = 4, sink_count = 4, window_units = 1, block_size = 16;
    std::string out;
};

int run_mask_dump(const MaskDumpFlags& flags) {
    CompressionConfig comp;
    if (!flags.common.config_path.empty()) {
        comp = CompressionConfig::from_json_file(flags.common.config_path);
    } else {
        comp.ratio = flags.ratio;
        comp.sink_count = flags.sink_count;
        comp.window_units = flags.window_units;
        comp.block_size = flags.block_size;
    }
    DenseMask mask;
    if (flags.pattern == "chunk") {
        mask = build_chunk_mask(flags.raw_len, ChunkBaselineSpec{flags.chunk_len, comp.ratio});
    } else {
        std::vector<TokenId> tokens(flags.raw_len, 0);
        mask = build_unified_mask(augment(tokens, comp, 1));
    }
    if (flags.out.empty()) {
        write_pbm(mask, std::cout);
    } else {
        auto out = open_out(flags.out);
        write_pbm(mask, out);
    }
    return 0;
}

template <typename Fn>
int dispatch_precision(const std::string& precision, Fn&& fn) {
    if (precision == "f64") {
        return fn(double{});
    }
    return fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gist-token context compression sandbox"};
    app.require_subcommand(1);

    TrainFlags train_flags;
    CLI::App* train = app.add_subcommand("train", "train a toy model on a synthetic task");
    add_common(train, &train_flags.common);
    train->add_option("--task", train_flags.task, "copy, kv_recall or char_lm");
    train->add_option("--pattern", train_flags.pattern, "unified or chunk")
        ->check(CLI::IsMember({"unified", "chunk"}));
    train->add_option("--chunk-len", train_flags.chunk_len, "baseline chunk length");
    train->add_option("--steps", train_flags.steps, "optimizer steps");
    train->add_option("--batch", train_flags.batch, "sequences per step");
    train->add_option("--seq-len", train_flags.seq_len, "raw tokens per sequence");
    train->add_option("--needle-distance", train_flags.needle_distance,
                      "kv_recall fact-to-query gap");
    train->add_option("--out", train_flags.out_prefix, "checkpoint path prefix");
    train->add_option("--loss-csv", train_flags.loss_csv, "per-step loss CSV");
    train->add_option("--ratio", train_flags.ratio, "compression ratio");
    train->add_option("--sink-count", train_flags.sink_count, "sink tokens");
    train->add_option("--window-units", train_flags.window_units, "local window units");
    train->add_option("--block-size", train_flags.block_size, "kernel block size");
    train->add_option("--layers", train_flags.layers, "transformer layers");
    train->add_option("--heads", train_flags.heads, "attention heads");
    train->add_option("--head-dim", train_flags.head_dim, "head dimension");
    train->add_option("--vocab", train_flags.vocab, "base vocabulary size");
    train->add_option("--lr", train_flags.lr, "peak learning rate");
    train->add_option("--warmup", train_flags.warmup, "warmup steps");

    EvalFlags eval_flags;
    CLI::App* eval_boundary =
        app.add_subcommand("eval-boundary", "per-position loss profile CSV");
    add_common(eval_boundary, &eval_flags.common);
    eval_boundary->add_option("--checkpoint", eval_flags.checkpoint, "checkpoint prefix")
        ->required();
    eval_boundary->add_option("--chunk-len", eval_flags.chunk_len, "profile chunk length");
    eval_boundary->add_option("--sequences", eval_flags.sequences, "eval sequences");
    eval_boundary->add_option("--seq-len", eval_flags.seq_len, "eval sequence length");
    eval_boundary->add_option("--out", eval_flags.out, "output CSV (stdout if omitted)");

    EvalFlags stats_flags;
    CLI::App* attn_stats =
        app.add_subcommand("attn-stats", "cross-chunk attention mass per layer");
    add_common(attn_stats, &stats_flags.common);
    attn_stats->add_option("--checkpoint", stats_flags.checkpoint, "checkpoint prefix")
        ->required();
    attn_stats->add_option("--chunk-len", stats_flags.chunk_len, "chunk length");
    attn_stats->add_option("--sequences", stats_flags.sequences, "eval sequences");
    attn_stats->add_option("--seq-len", stats_flags.seq_len, "eval sequence length");
    attn_stats->add_option("--out", stats_flags.out, "output CSV (stdout if omitted)");

    GenerateFlags gen_flags;
    CLI::App* generate = app.add_subcommand("generate", "greedy decoding with cache eviction");
    add_common(generate, &gen_flags.common);
    generate->add_option("--checkpoint", gen_flags.checkpoint, "checkpoint prefix")->required();
    generate->add_option("--prompt", gen_flags.prompt, "comma-separated token ids");
    generate->add_option("--prompt-file", gen_flags.prompt_file, "file of token ids");
    generate->add_option("--max-new", gen_flags.max_new, "tokens to generate");
    generate->add_option("--chunk-size", gen_flags.chunk_size, "prefill chunk (multiple of r)");
    generate->add_option("--pad-id", gen_flags.pad_id, "pad token for ragged prompts");
    generate->add_option("--trace", gen_flags.trace_path, "per-step cache-size CSV");

    BenchFlags bench_flags;
    CLI::App* bench_cmd = app.add_subcommand("bench", "attended-entry analytics and host timing");
    bench_cmd->add_option("--lengths", bench_flags.lengths, "raw lengths")->delimiter(',');
    bench_cmd->add_option("--ratios", bench_flags.ratios, "compression ratios")->delimiter(',');
    bench_cmd->add_option("--repeats", bench_flags.repeats,
                          "timing repeats (0 skips host timing)");
    bench_cmd->add_option("--heads", bench_flags.heads, "heads for timing");
    bench_cmd->add_option("--head-dim", bench_flags.head_dim, "head dim for timing");
    bench_cmd->add_option("--sink-count", bench_flags.sink_count, "sink tokens");
    bench_cmd->add_option("--window-units", bench_flags.window_units, "window units");
    bench_cmd->add_option("--block-size", bench_flags.block_size, "block size");
    bench_cmd->add_option("--out", bench_flags.out, "output CSV (stdout if omitted)");

    MaskDumpFlags mask_flags;
    CLI::App* mask_dump = app.add_subcommand("mask-dump", "serialize a visibility mask as PBM");
    add_common(mask_dump, &mask_flags.common);
    mask_dump->add_option("--T", mask_flags.raw_len, "raw sequence length")->required();
    mask_dump->add_option("--pattern", mask_flags.pattern, "unified or chunk")
        ->check(CLI::IsMember({"unified", "chunk"}));
    mask_dump->add_option("--chunk-len", mask_flags.chunk_len, "baseline chunk length");
    mask_dump->add_option("--ratio", mask_flags.ratio, "compression ratio");
    mask_dump->add_option("--sink-count", mask_flags.sink_count, "sink tokens");
    mask_dump->add_option("--window-units", mask_flags.window_units, "window units");
    mask_dump->add_option("--block-size", mask_flags.block_size, "block size");
    mask_dump->add_option("--out", mask_flags.out, "output file (stdout if omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed()) {
            return dispatch_precision(train_flags.common.precision, [&](auto tag) {
                return run_train<decltype(tag)>(train_flags);
            });
        }
        if (eval_boundary->parsed()) {
            return dispatch_precision(eval_flags.common.precision, [&](auto tag) {
                return run_eval_boundary<decltype(tag)>(eval_flags);
            });
        }
        if (attn_stats->parsed()) {
            return dispatch_precision(stats_flags.common.precision, [&](auto tag) {
                return run_attn_stats<decltype(tag)>(stats_flags);
            });
        }
        if (generate->parsed()) {
            return dispatch_precision(gen_flags.common.precision, [&](auto tag) {
                return run_generate<decltype(tag)>(gen_flags);
            });
        }
        if (bench_cmd->parsed()) {
            return run_bench(bench_flags);
        }
        if (mask_dump->parsed()) {
            return run_mask_dump(mask_flags);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
