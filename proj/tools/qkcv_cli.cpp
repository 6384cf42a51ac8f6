// Experiment driver: every subcommand reads one config document (plus
// dotted-path overrides), writes its artifacts into an output directory
// named by a hash of that document, and leaves a manifest describing the
// run. Fixed seed + fixed inputs means byte-identical artifacts.
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qkcv/checkpoint.hpp"
#include "qkcv/data.hpp"
#include "qkcv/errors.hpp"
#include "qkcv/finetune.hpp"
#include "qkcv/gradcheck.hpp"
#include "qkcv/run_config.hpp"

namespace fs = std::filesystem;
using namespace qkcv;

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string hex64(unsigned long long v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", v);
    return buf;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw DataError("short write to '" + path.string() + "'");
}

struct RunContext {
    Json config;
    std::string subcommand;
    std::string run_id;
    fs::path out_dir;
    Json manifest;

    void note_artifact(const std::string& name) { manifest["artifacts"].push_back(name); }

    void finish() {
        write_file(out_dir / "manifest.json", canonical_dump(manifest));
        std::cout << "run " << run_id << " -> " << out_dir.string() << "\n";
    }
};

RunContext open_run(const Json& config, const std::string& subcommand,
                    const std::string& out_root_flag) {
    RunContext ctx;
    ctx.config = config;
    ctx.subcommand = subcommand;
    const std::string doc = canonical_dump(config) + subcommand;
    ctx.run_id = hex64(fnv1a64(doc.data(), doc.size()));

    std::string root = out_root_flag;
    if (root.empty()) {
        const char* env = std::getenv("QKCV_OUT_ROOT");
        root = env ? env : "runs";
    }
    ctx.out_dir = fs::path(root) / (ctx.run_id + "-" + subcommand);
    fs::create_directories(ctx.out_dir);

    ctx.manifest["run_id"] = ctx.run_id;
    ctx.manifest["subcommand"] = subcommand;
    ctx.manifest["seed"] = config.at("seed");
    ctx.manifest["config"] = config;
    ctx.manifest["artifacts"] = Json::array();
    return ctx;
}

// What the run consumed, for provenance: the raw csv bytes, or the synthetic
// recipe when the data never exists as a file.
std::string input_hash(const Json& config) {
    const std::string source = config.at("data").at("source").get<std::string>();
    if (source == "csv") {
        const std::string path = config.at("data").at("csv").at("path").get<std::string>();
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open '" + path + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        const std::string bytes = ss.str();
        return hex64(fnv1a64(bytes.data(), bytes.size()));
    }
    const std::string recipe = config.at("data").at("synthetic").dump();
    return hex64(fnv1a64(recipe.data(), recipe.size()));
}

std::string metrics_csv(const std::string& run_id, const std::string& variant,
                        const std::string& mode, const MetricsReport& rep) {
    std::ostringstream out;
    out << "run_id,model,variant,mode,wpe,p50,p90,mae\n";
    out << run_id << ",forecaster," << variant << "," << mode << "," << fmt17(rep.wpe) << ","
        << fmt17(rep.p50) << "," << fmt17(rep.p90) << "," << fmt17(rep.mae) << "\n";
    return out.str();
}

// One window per entity, entity order, preferring the test split. Returns
// pairs of (window set, window index).
std::vector<long> sample_per_entity(const WindowSet& set, long n_entities) {
    std::vector<long> first(n_entities, -1);
    for (long w = 0; w < set.size(); ++w) {
        const long e = set.entities[w];
        if (first[e] < 0) first[e] = w;
    }
    std::vector<long> idx;
    for (long e = 0; e < n_entities; ++e) {
        if (first[e] >= 0) idx.push_back(first[e]);
    }
    return idx;
}

const WindowSet& pick_nonempty(const SplitResult& splits) {
    if (splits.test.size() > 0) return splits.test;
    if (splits.val.size() > 0) return splits.val;
    return splits.train;
}

int cmd_gen_data(RunContext& ctx) {
    const SyntheticResult result = generate_synthetic(synthetic_spec_from_run(ctx.config));
    write_file(ctx.out_dir / "data.csv", dataset_to_csv(result.data));
    write_file(ctx.out_dir / "truth.csv", truth_to_csv(result.truth));
    write_file(ctx.out_dir / "vocab.csv", vocabs_to_csv(result.data));
    ctx.note_artifact("data.csv");
    ctx.note_artifact("truth.csv");
    ctx.note_artifact("vocab.csv");
    ctx.manifest["input_hash"] = input_hash(ctx.config);
    ctx.finish();
    return 0;
}

int cmd_train(RunContext& ctx) {
    ctx.manifest["input_hash"] = input_hash(ctx.config);
    const LoadedData loaded = load_data_from_run(ctx.config);
    const ModelConfig mc = resolved_model_config(ctx.config, loaded.data);
    const unsigned long seed = ctx.config.at("seed").get<unsigned long>();
    Model m = build_model(mc, seed);
    const TrainConfig tc = train_config_from_run(ctx.config);
    const TrainHistory hist = train(m, loaded.splits.train, loaded.splits.val, tc);

    const WindowSet& eval_set = pick_nonempty(loaded.splits);
    const MetricsReport rep = evaluate(m, eval_set);
    write_file(ctx.out_dir / "metrics.csv",
               metrics_csv(ctx.run_id, variant_name(mc.variant), "pretrain", rep));
    save_model((ctx.out_dir / "model.ckpt").string(), m);
    ctx.note_artifact("metrics.csv");
    ctx.note_artifact("model.ckpt");
    ctx.manifest["model_content_hash"] = hex64(model_content_hash(m));
    ctx.manifest["best_step"] = hist.best_step;
    ctx.manifest["skipped_entities"] = loaded.splits.skipped_entities;
    ctx.finish();
    return 0;
}

int cmd_evaluate(RunContext& ctx) {
    const std::string ckpt = ctx.config.at("checkpoint").get<std::string>();
    if (ckpt.empty()) throw ConfigError("evaluate: config field 'checkpoint' is empty");
    const Model m = load_model(ckpt);
    ctx.manifest["input_hash"] = input_hash(ctx.config);
    ctx.manifest["model_content_hash"] = hex64(model_content_hash(m));
    const LoadedData loaded = load_data_from_run(ctx.config);
    if (loaded.splits.test.size() == 0) throw DataError("evaluate: test split is empty");
    const MetricsReport rep = evaluate(m, loaded.splits.test);
    write_file(ctx.out_dir / "metrics.csv",
               metrics_csv(ctx.run_id, variant_name(m.cfg.variant), "evaluate", rep));
    ctx.note_artifact("metrics.csv");
    ctx.finish();
    return 0;
}

int cmd_finetune(RunContext& ctx) {
    const Json& ft = ctx.config.at("finetune");
    const FinetuneMode mode = finetune_mode_from_name(ft.at("mode").get<std::string>());
    const std::string base_path = ft.at("base").get<std::string>();
    if (base_path.empty()) throw ConfigError("finetune: config field 'finetune.base' is empty");
    const PretrainedBase base = base_from_checkpoint(base_path);
    ctx.manifest["input_hash"] = input_hash(ctx.config);
    ctx.manifest["base_content_hash"] = hex64(base.content_hash);

    const LoadedData loaded = load_data_from_run(ctx.config);
    const std::vector<long> cards = loaded.data.cardinalities();
    const unsigned long attach_seed = ft.at("seed").get<unsigned long>();
    const std::string enc_name = ft.at("encoder").get<std::string>();
    const EncoderMode enc = enc_name == "mlp" ? EncoderMode::mlp : EncoderMode::sce;

    Model m = base.model;
    switch (mode) {
        case FinetuneMode::pl:
        case FinetuneMode::fp:
            break;
        case FinetuneMode::pl_qkcv:
        case FinetuneMode::fp_qkcv:
            m = attach_qkcv(base, cards, enc, variant_from_name(ft.at("variant").get<std::string>()),
                            attach_seed);
            break;
        case FinetuneMode::compressor_mlp:
            m = attach_compressor(base, cards, EncoderMode::mlp, attach_seed);
            break;
        case FinetuneMode::compressor_sce:
            m = attach_compressor(base, cards, EncoderMode::sce, attach_seed);
            break;
    }

    const FreezePolicy policy = partition_parameters(m, mode);
    const TrainConfig tc = train_config_from_run(ctx.config);
    if (loaded.splits.test.size() == 0) throw DataError("finetune: test split is empty");
    const FinetuneReport report =
        finetune_run(m, policy, loaded.splits.train, loaded.splits.val, loaded.splits.test, tc);

    write_file(ctx.out_dir / "metrics.csv",
               metrics_csv(ctx.run_id, variant_name(m.cfg.variant), finetune_mode_name(mode),
                           report.final));
    write_file(ctx.out_dir / "report.csv", finetune_report_csv({report}));
    save_model((ctx.out_dir / "finetuned.ckpt").string(), m);
    ctx.note_artifact("metrics.csv");
    ctx.note_artifact("report.csv");
    ctx.note_artifact("finetuned.ckpt");
    ctx.manifest["model_content_hash"] = hex64(model_content_hash(m));
    ctx.manifest["trainable_params"] = report.trainable_params;
    ctx.manifest["total_params"] = report.total_params;
    ctx.finish();
    return 0;
}

int cmd_gradcheck(RunContext& ctx) {
    std::ostringstream table;
    table << "op,seed,max_rel_err,tolerance\n";
    std::string failed_op;
    double failed_err = 0.0, failed_tol = 0.0;
    for (unsigned long seed = 0; seed < 3; ++seed) {
        struct Suite {
            std::vector<OpCheck> checks;
            double tol;
        };
        const Suite suites[2] = {{op_set_checks(seed), 1e-6}, {composite_checks(seed), 1e-4}};
        for (const Suite& suite : suites) {
            for (const OpCheck& check : suite.checks) {
                const double err = finite_difference_check(check.fn, check.inputs);
                std::cout << check.name << " seed " << seed << ": " << fmt17(err) << "\n";
                table << check.name << "," << seed << "," << fmt17(err) << "," << suite.tol << "\n";
                if (err >= suite.tol && failed_op.empty()) {
                    failed_op = check.name;
                    failed_err = err;
                    failed_tol = suite.tol;
                }
            }
        }
    }
    write_file(ctx.out_dir / "gradcheck.csv", table.str());
    ctx.note_artifact("gradcheck.csv");
    ctx.finish();
    if (!failed_op.empty()) {
        std::cerr << "gradcheck failed: " << failed_op << " rel err " << fmt17(failed_err)
                  << " >= " << fmt17(failed_tol) << "\n";
        return 1;
    }
    return 0;
}

int cmd_export_attention(RunContext& ctx) {
    const std::string ckpt = ctx.config.at("checkpoint").get<std::string>();
    if (ckpt.empty()) throw ConfigError("export-attention: config field 'checkpoint' is empty");
    const Model m = load_model(ckpt);
    const LoadedData loaded = load_data_from_run(ctx.config);
    const WindowSet& set = pick_nonempty(loaded.splits);
    if (set.size() == 0) throw DataError("export-attention: no windows to export");
    const std::vector<long> idx = sample_per_entity(set, loaded.data.n_entities());
    const ForecastBatch batch = gather_batch(set, idx);
    const ForwardResult fwd = model_forward(m, batch);
    ctx.manifest["input_hash"] = input_hash(ctx.config);
    ctx.manifest["model_content_hash"] = hex64(model_content_hash(m));

    for (std::size_t layer = 0; layer < fwd.scores.size(); ++layer) {
        const Tensor s = fwd.scores[layer].values;  // [B,H,T,T]
        const long b = s.shape()[0], h = s.shape()[1], t = s.shape()[2];
        std::ostringstream out;
        out << "sample,entity";
        for (long col = 0; col < h * t * t; ++col) out << ",score_" << col;
        out << "\n";
        const std::vector<double>& v = s.data();
        for (long r = 0; r < b; ++r) {
            for (long row = 0; row < h * t; ++row) {
                double sum = 0.0;
                for (long k = 0; k < t; ++k) sum += v[(r * h * t + row) * t + k];
                if (std::abs(sum - 1.0) > 1e-6) {
                    throw InternalError("export-attention: score row off the simplex by " +
                                        fmt17(sum - 1.0));
                }
            }
            out << r << "," << loaded.data.entity_ids[batch.entities[r]];
            for (long col = 0; col < h * t * t; ++col) out << "," << fmt17(v[r * h * t * t + col]);
            out << "\n";
        }
        const std::string name = "attention_layer" + std::to_string(layer) + ".csv";
        write_file(ctx.out_dir / name, out.str());
        ctx.note_artifact(name);
    }
    ctx.finish();
    return 0;
}

int cmd_importance(RunContext& ctx) {
    const std::string ckpt = ctx.config.at("checkpoint").get<std::string>();
    if (ckpt.empty()) throw ConfigError("importance: config field 'checkpoint' is empty");
    const Model m = load_model(ckpt);
    if (!m.has_encoder || m.cfg.encoder != EncoderMode::sce) {
        throw ConfigError("importance: checkpoint has no selection encoder");
    }
    const LoadedData loaded = load_data_from_run(ctx.config);
    const WindowSet& set = pick_nonempty(loaded.splits);
    if (set.size() == 0) throw DataError("importance: no windows to sample");
    const std::vector<long> idx = sample_per_entity(set, loaded.data.n_entities());
    const ForecastBatch batch = gather_batch(set, idx);
    const ForwardResult fwd = model_forward(m, batch);
    ctx.manifest["input_hash"] = input_hash(ctx.config);
    ctx.manifest["model_content_hash"] = hex64(model_content_hash(m));

    const Tensor w = fwd.selection_weights;  // [B,F]
    const long b = w.shape()[0], f = w.shape()[1];
    std::ostringstream out;
    out << "entity";
    for (const auto& col : loaded.data.static_columns) out << "," << col;
    out << "\n";
    std::vector<double> mean(f, 0.0);
    const std::vector<double>& v = w.data();
    for (long r = 0; r < b; ++r) {
        double sum = 0.0;
        for (long j = 0; j < f; ++j) sum += v[r * f + j];
        if (std::abs(sum - 1.0) > 1e-6) {
            throw InternalError("importance: selection row off the simplex by " + fmt17(sum - 1.0));
        }
        out << loaded.data.entity_ids[batch.entities[r]];
        for (long j = 0; j < f; ++j) {
            out << "," << fmt17(v[r * f + j]);
            mean[j] += v[r * f + j] / b;
        }
        out << "\n";
    }
    out << "mean";
    for (long j = 0; j < f; ++j) out << "," << fmt17(mean[j]);
    out << "\n";
    write_file(ctx.out_dir / "importance.csv", out.str());
    ctx.note_artifact("importance.csv");
    ctx.finish();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"QKCV forecaster experiment driver"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_root;
    app.add_option("-c,--config", config_path, "run config document (json)");
    app.add_option("--set", overrides, "dotted-path override, section.field=value");
    app.add_option("--out-root", out_root, "output root (default env QKCV_OUT_ROOT, then ./runs)");

    CLI::App* sub_gen = app.add_subcommand("gen-data", "write a synthetic panel + ground truth");
    CLI::App* sub_train = app.add_subcommand("train", "train a model from scratch");
    CLI::App* sub_eval = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
    CLI::App* sub_ft = app.add_subcommand("finetune", "adapt a pretrained base under a freeze policy");
    CLI::App* sub_grad = app.add_subcommand("gradcheck", "finite-difference check of the op set");
    CLI::App* sub_attn = app.add_subcommand("export-attention", "dump attention score heatmap rows");
    CLI::App* sub_imp = app.add_subcommand("importance", "dump static-variable selection weights");
    for (CLI::App* sub :
         {sub_gen, sub_train, sub_eval, sub_ft, sub_grad, sub_attn, sub_imp}) {
        sub->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        Json config = config_path.empty() ? default_run_config() : load_run_config(config_path);
        for (const std::string& assignment : overrides) apply_override(config, assignment);
        config = validate_run_config(config);

        RunContext ctx = open_run(config, app.get_subcommands().front()->get_name(), out_root);
        if (sub_gen->parsed()) return cmd_gen_data(ctx);
        if (sub_train->parsed()) return cmd_train(ctx);
        if (sub_eval->parsed()) return cmd_evaluate(ctx);
        if (sub_ft->parsed()) return cmd_finetune(ctx);
        if (sub_grad->parsed()) return cmd_gradcheck(ctx);
        if (sub_attn->parsed()) return cmd_export_attention(ctx);
        if (sub_imp->parsed()) return cmd_importance(ctx);
        std::cerr << "error: no subcommand dispatched\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
