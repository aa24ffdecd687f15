#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "sct/config.hpp"
#include "sct/eval.hpp"
#include "sct/expression.hpp"
#include "sct/flops.hpp"
#include "sct/model.hpp"
#include "sct/synthetic.hpp"
#include "sct/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) {
        throw sct::IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw sct::IoError("write failed for " + path.string());
    }
}

json run_json(const sct::RunConfig& r) {
    return {
        {"run", {{"name", r.run_name}, {"outdir", r.outdir}, {"seed", r.seed}}},
        {"data",
         {{"matrix", r.matrix_path},
          {"labels", r.labels_path},
          {"stage", r.stage == sct::Stage::raw_counts ? "raw_counts" : "normalized"}}},
        {"model", sct::detail::config_to_json(r.model)},
        {"preset", r.preset},
        {"mask",
         {{"nonzero_mask_ratio", r.mask.nonzero_mask_ratio},
          {"zero_mask_ratio", r.mask.zero_mask_ratio},
          {"replace_probs", r.mask.replace_probs},
          {"seed", r.mask.seed}}},
        {"train",
         {{"batch_size", r.train.batch_size},
          {"steps", r.train.steps},
          {"learning_rate", r.train.learning_rate},
          {"beta1", r.train.beta1},
          {"beta2", r.train.beta2},
          {"eps", r.train.eps},
          {"grad_clip", r.train.grad_clip},
          {"warmup_steps", r.train.warmup_steps},
          {"eval_every", r.train.eval_every},
          {"val_fraction", r.train.val_fraction},
          {"fixed_complement_denominator", r.train.fixed_complement_denominator},
          {"seed", r.train.seed}}},
        {"finetune",
         {{"steps", r.finetune.steps},
          {"batch_size", r.finetune.batch_size},
          {"learning_rate", r.finetune.learning_rate},
          {"unfreeze_trunk", r.finetune.unfreeze_trunk},
          {"seed", r.finetune.seed}}},
    };
}

// Loads the run config, the matrix it points at, and settles n_genes.
struct LoadedRun {
    sct::RunConfig cfg;
    sct::SparseExpressionMatrix data;
    std::vector<std::string> labels; // empty unless a labels path was given
};

LoadedRun load_run(const std::string& config_path, bool need_labels) {
    LoadedRun run;
    run.cfg = sct::load_run_config(sct::ConfigFile::load(config_path));
    sct::check_run_paths(run.cfg);
    run.data = sct::load_matrix(run.cfg.matrix_path, run.cfg.stage);
    if (run.cfg.model.n_genes == 0) {
        run.cfg.model.n_genes = run.data.n_genes;
    } else if (run.cfg.model.n_genes != run.data.n_genes) {
        throw sct::ConfigError("[model] n_genes " + std::to_string(run.cfg.model.n_genes) +
                               " does not match the matrix (" +
                               std::to_string(run.data.n_genes) + " genes)");
    }
    run.cfg.model.validate();
    if (!run.cfg.labels_path.empty()) {
        for (auto& [id, label] : sct::load_labels(run.cfg.labels_path)) {
            run.labels.push_back(label);
        }
        if (static_cast<long>(run.labels.size()) != run.data.n_cells) {
            throw sct::ValidationError("labels file has " + std::to_string(run.labels.size()) +
                                       " rows for " + std::to_string(run.data.n_cells) + " cells");
        }
    } else if (need_labels) {
        throw sct::ConfigError("this command needs [data] labels in " + config_path);
    }
    return run;
}

int cmd_prepare(const std::string& input, const std::string& output, const std::string& labels_in,
                const std::string& labels_out, int min_genes, double target_sum) {
    sct::SparseExpressionMatrix raw = sct::load_matrix(input, sct::Stage::raw_counts);
    std::vector<int> kept;
    sct::SparseExpressionMatrix filtered = sct::quality_filter(raw, min_genes, &kept);
    sct::SparseExpressionMatrix norm = sct::normalize(filtered, target_sum);
    sct::save_matrix(output, norm);
    if (!labels_in.empty()) {
        auto labels = sct::load_labels(labels_in);
        if (static_cast<long>(labels.size()) != raw.n_cells) {
            throw sct::ValidationError("labels file has " + std::to_string(labels.size()) +
                                       " rows for " + std::to_string(raw.n_cells) + " cells");
        }
        std::vector<std::pair<std::string, std::string>> subset;
        for (int c : kept) {
            subset.push_back(labels[c]);
        }
        sct::save_labels(labels_out, subset);
    }
    std::printf("prepare: kept %d of %d cells, dropped %d; wrote %s\n", filtered.n_cells,
                raw.n_cells, raw.n_cells - filtered.n_cells, output.c_str());
    return 0;
}

int cmd_synth(int cells, int genes, int types, double sparsity, std::uint64_t seed,
              const std::string& output, const std::string& labels_out) {
    sct::SyntheticSpec spec;
    spec.n_cells = cells;
    spec.n_genes = genes;
    spec.n_cell_types = types;
    spec.sparsity = sparsity;
    spec.seed = seed;
    sct::SyntheticData d = sct::synthesize_dataset(spec);
    sct::save_matrix(output, d.matrix);
    if (!labels_out.empty()) {
        std::vector<std::pair<std::string, std::string>> rows;
        for (int c = 0; c < d.matrix.n_cells; ++c) {
            rows.emplace_back("C" + std::to_string(c), d.labels[c]);
        }
        sct::save_labels(labels_out, rows);
    }
    std::printf("synth: wrote %d cells x %d genes (%zu entries) to %s\n", d.matrix.n_cells,
                d.matrix.n_genes, d.matrix.entries.size(), output.c_str());
    return 0;
}

int cmd_pretrain(const std::string& config_path) {
    LoadedRun run = load_run(config_path, false);
    const fs::path dir = run.cfg.run_dir();
    fs::create_directories(dir);
    write_text_file(dir / "run.json", run_json(run.cfg).dump(2) + "\n");

    sct::Model model(run.cfg.model);
    sct::PretrainResult res =
        sct::pretrain(model, run.data, run.cfg.mask, run.cfg.train, dir.string());
    std::printf("pretrain: %ld steps, val mse %.6g -> %.6g (%ld cells excluded)\n",
                res.steps_completed, res.initial_val_mse, res.final_val_mse, res.cells_excluded);
    std::printf("pretrain: metrics %s\n", res.metrics_path.c_str());
    std::printf("pretrain: checkpoint %s\n", res.checkpoint_path.c_str());
    if (res.aborted) {
        std::printf("pretrain: aborted early: %s\n", res.abort_reason.c_str());
    }
    return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& checkpoint,
                 const std::string& variant, std::string out_path) {
    LoadedRun run = load_run(config_path, true);
    sct::Model model = sct::load_checkpoint(checkpoint);
    std::vector<std::pair<std::string, sct::Model*>> variants = {{variant, &model}};
    std::vector<sct::AblationRow> rows = sct::ablation_harness(
        variants, run.data, run.labels, run.cfg.stream_seed("kmeans"));
    const std::string csv = sct::ablation_csv(rows);
    if (out_path.empty()) {
        out_path = (run.cfg.run_dir() / "evaluate.csv").string();
    }
    if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    write_text_file(out_path, csv);
    std::fputs(csv.c_str(), stdout);
    std::printf("evaluate: wrote %s\n", out_path.c_str());
    return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& checkpoint, bool unfreeze,
                 std::string out_path) {
    LoadedRun run = load_run(config_path, true);
    sct::Model model = sct::load_checkpoint(checkpoint);
    sct::FinetuneConfig fcfg = run.cfg.finetune;
    if (unfreeze) {
        fcfg.unfreeze_trunk = true;
    }
    sct::AnnotationReport rep = sct::finetune_annotation(model, run.data, run.labels, fcfg);

    std::vector<std::vector<int>> confusion(rep.classes.size());
    for (std::size_t i = 0; i < rep.classes.size(); ++i) {
        for (std::size_t j = 0; j < rep.classes.size(); ++j) {
            confusion[i].push_back(rep.confusion(static_cast<long>(i), static_cast<long>(j)));
        }
    }
    const json out = {
        {"classes", rep.classes},
        {"confusion", confusion},
        {"accuracy", rep.accuracy},
        {"macro_precision", rep.macro_precision},
        {"macro_recall", rep.macro_recall},
        {"macro_f1", rep.macro_f1},
        {"val_accuracy", rep.val_accuracy},
        {"n_train", rep.n_train},
        {"n_val", rep.n_val},
        {"n_test", rep.n_test},
    };
    if (out_path.empty()) {
        out_path = (run.cfg.run_dir() / "annotation.json").string();
    }
    if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    write_text_file(out_path, out.dump(2) + "\n");
    std::printf("finetune: test accuracy %.4f, macro f1 %.4f (%ld train / %ld val / %ld test)\n",
                rep.accuracy, rep.macro_f1, rep.n_train, rep.n_val, rep.n_test);
    std::printf("finetune: wrote %s\n", out_path.c_str());
    return 0;
}

sct::FlopsVariant parse_variant(const std::string& v, const sct::ConfigFile& c) {
    if (v == "exact" || v == "encoder_only_exact") {
        return sct::FlopsVariant::encoder_only_exact;
    }
    if (v == "linear" || v == "encoder_only_linear") {
        return sct::FlopsVariant::encoder_only_linear;
    }
    if (v == "asymmetric") {
        return sct::FlopsVariant::asymmetric;
    }
    throw sct::ConfigError(c.origin() + ": unknown variant '" + v +
                           "' (expected exact, linear or asymmetric)");
}

// One architecture per section. decoder_* describes the full-length stack;
// encoder_* only matters for the asymmetric variant. `reference = true`
// marks the 100% row (defaults to the first section).
std::pair<std::vector<sct::ArchitectureSpec>, std::string>
load_flops_specs(const std::string& path) {
    sct::ConfigFile c = sct::ConfigFile::load(path);
    if (c.section_names().empty()) {
        throw sct::ConfigError(path + ": no architecture sections");
    }
    std::vector<sct::ArchitectureSpec> specs;
    std::string reference;
    for (const std::string& name : c.section_names()) {
        sct::ArchitectureSpec s;
        s.name = name;
        s.variant = parse_variant(c.get(name, "variant"), c);
        s.seq_len_full = c.get_long_or(name, "seq_len_full", s.seq_len_full);
        s.seq_len_encoder = c.get_long_or(name, "seq_len_encoder", s.seq_len_encoder);
        auto stack = [&](const char* prefix, sct::StackConfig def) {
            def.depth = static_cast<int>(
                c.get_long_or(name, std::string(prefix) + "_depth", def.depth));
            def.heads = static_cast<int>(
                c.get_long_or(name, std::string(prefix) + "_heads", def.heads));
            def.dim = static_cast<int>(c.get_long_or(name, std::string(prefix) + "_dim", def.dim));
            return def;
        };
        s.encoder = stack("encoder", s.encoder);
        s.decoder = stack("decoder", s.decoder);
        s.bins = static_cast<int>(c.get_long_or(name, "bins", s.bins));
        s.n_random_features =
            static_cast<int>(c.get_long_or(name, "n_random_features", s.n_random_features));
        s.ffn_multiplier =
            static_cast<int>(c.get_long_or(name, "ffn_multiplier", s.ffn_multiplier));
        s.n_value_classes =
            static_cast<int>(c.get_long_or(name, "n_value_classes", s.n_value_classes));
        if (c.has(name, "params")) {
            s.params_declared = c.get_long(name, "params");
        }
        if (c.get_bool_or(name, "reference", false)) {
            reference = name;
        }
        specs.push_back(s);
    }
    if (reference.empty()) {
        reference = specs.front().name;
    }
    return {std::move(specs), std::move(reference)};
}

int cmd_estimate_flops(const std::string& spec_path, const std::string& csv_path, double samples,
                       int epochs) {
    std::vector<sct::ArchitectureSpec> specs;
    std::string reference;
    if (spec_path.empty()) {
        specs = sct::baseline_comparison_specs();
        reference = "transformer";
    } else {
        std::tie(specs, reference) = load_flops_specs(spec_path);
    }
    sct::EfficiencyReport rep = sct::efficiency_report(specs, reference, samples, epochs);
    std::fputs(sct::to_text(rep).c_str(), stdout);
    if (!csv_path.empty()) {
        write_text_file(csv_path, sct::to_csv(rep));
        std::printf("estimate-flops: wrote %s\n", csv_path.c_str());
    }
    return 0;
}

int cmd_weights_profile(const std::string& checkpoint, int bins, std::uint64_t seed, double lo,
                        double hi, double step, const std::string& out_path) {
    if (step <= 0.0 || hi < lo) {
        throw sct::ConfigError("weights-profile needs step > 0 and max >= min");
    }
    const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
    Eigen::VectorXd grid(n);
    for (int i = 0; i < n; ++i) {
        grid(i) = lo + step * i;
    }

    Eigen::MatrixXd weights;
    if (!checkpoint.empty()) {
        sct::Model model = sct::load_checkpoint(checkpoint);
        sct::ad::Tape t;
        weights = model.disc.forward(t, grid).weights.value();
    } else {
        // Only the mixture weights are profiled, so the embedding dim is
        // irrelevant; 1 keeps the throwaway table small.
        sct::AutoDiscretizer disc(1, bins, seed);
        sct::ad::Tape t;
        weights = disc.forward(t, grid).weights.value();
    }

    std::string csv;
    char num[64];
    for (long r = 0; r < weights.rows(); ++r) {
        for (long c = 0; c < weights.cols(); ++c) {
            std::snprintf(num, sizeof num, "%.9g", weights(r, c));
            csv += num;
            csv += c + 1 < weights.cols() ? ',' : '\n';
        }
    }
    if (out_path.empty()) {
        std::fputs(csv.c_str(), stdout);
    } else {
        write_text_file(out_path, csv);
        std::printf("weights-profile: wrote %ld rows x %ld bins to %s\n", weights.rows(),
                    weights.cols(), out_path.c_str());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse single-cell expression transformer toolkit"};
    app.require_subcommand(1);
    int rc = 0;

    auto* prepare = app.add_subcommand("prepare", "quality-filter and normalize a raw count matrix");
    struct {
        std::string input, output, labels_in, labels_out;
        int min_genes = 200;
        double target_sum = 10000.0;
    } prep;
    prepare->add_option("--input", prep.input, "raw count matrix (coordinate text)")
        ->required()
        ->check(CLI::ExistingFile);
    prepare->add_option("--output", prep.output, "normalized matrix destination")->required();
    prepare->add_option("--labels", prep.labels_in, "cell_id,label CSV to filter alongside")
        ->check(CLI::ExistingFile);
    prepare->add_option("--labels-out", prep.labels_out, "destination for filtered labels");
    prepare->add_option("--min-genes", prep.min_genes, "drop cells expressing fewer genes");
    prepare->add_option("--target-sum", prep.target_sum, "per-cell count total before log1p");
    prepare->callback([&] {
        if (!prep.labels_in.empty() && prep.labels_out.empty()) {
            throw sct::ConfigError("--labels needs --labels-out");
        }
        rc = cmd_prepare(prep.input, prep.output, prep.labels_in, prep.labels_out, prep.min_genes,
                         prep.target_sum);
    });

    auto* synth = app.add_subcommand("synth", "generate a synthetic raw count matrix");
    struct {
        int cells = 0, genes = 0, types = 1;
        double sparsity = 0.9;
        std::uint64_t seed = 1;
        std::string output, labels_out;
    } sy;
    synth->add_option("--cells", sy.cells, "number of cells")->required();
    synth->add_option("--genes", sy.genes, "number of genes")->required();
    synth->add_option("--types", sy.types, "number of cell types");
    synth->add_option("--sparsity", sy.sparsity, "fraction of zero entries per cell");
    synth->add_option("--seed", sy.seed, "generator seed");
    synth->add_option("--output", sy.output, "matrix destination")->required();
    synth->add_option("--labels", sy.labels_out, "cell type labels destination");
    synth->callback([&] {
        rc = cmd_synth(sy.cells, sy.genes, sy.types, sy.sparsity, sy.seed, sy.output,
                       sy.labels_out);
    });

    auto* pre = app.add_subcommand("pretrain", "masked-regression pre-training from a run config");
    struct {
        std::string config;
    } pt;
    pre->add_option("--config", pt.config, "run config file")->required()->check(CLI::ExistingFile);
    pre->callback([&] { rc = cmd_pretrain(pt.config); });

    auto* ev = app.add_subcommand("evaluate", "cluster checkpoint embeddings against labels");
    struct {
        std::string config, checkpoint, name = "model", out;
    } evo;
    ev->add_option("--config", evo.config, "run config file (matrix and labels paths)")
        ->required()
        ->check(CLI::ExistingFile);
    ev->add_option("--checkpoint", evo.checkpoint, "model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    ev->add_option("--name", evo.name, "variant name for the CSV row");
    ev->add_option("--out", evo.out, "CSV destination (default <run dir>/evaluate.csv)");
    ev->callback([&] { rc = cmd_evaluate(evo.config, evo.checkpoint, evo.name, evo.out); });

    auto* ft = app.add_subcommand("finetune", "fit a cell type head on a pre-trained checkpoint");
    struct {
        std::string config, checkpoint, out;
        bool unfreeze = false;
    } fto;
    ft->add_option("--config", fto.config, "run config file (matrix and labels paths)")
        ->required()
        ->check(CLI::ExistingFile);
    ft->add_option("--checkpoint", fto.checkpoint, "model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    ft->add_flag("--unfreeze", fto.unfreeze, "also update trunk weights");
    ft->add_option("--out", fto.out, "report destination (default <run dir>/annotation.json)");
    ft->callback([&] { rc = cmd_finetune(fto.config, fto.checkpoint, fto.unfreeze, fto.out); });

    auto* fl = app.add_subcommand("estimate-flops", "analytic training-cost comparison");
    struct {
        std::string spec, csv;
        double samples = 5e6;
        int epochs = 5;
    } flo;
    fl->add_option("--spec", flo.spec, "architecture spec file (default: bundled baselines)")
        ->check(CLI::ExistingFile);
    fl->add_option("--csv", flo.csv, "also write the report as CSV");
    fl->add_option("--samples", flo.samples, "training corpus size");
    fl->add_option("--epochs", flo.epochs, "training epochs");
    fl->callback([&] { rc = cmd_estimate_flops(flo.spec, flo.csv, flo.samples, flo.epochs); });

    auto* wp = app.add_subcommand("weights-profile",
                                  "dump discretizer mixture weights over a value grid");
    struct {
        std::string checkpoint, out;
        int bins = 100;
        std::uint64_t seed = 1;
        double lo = 0.0, hi = 10.0, step = 0.1;
    } wpo;
    wp->add_option("--checkpoint", wpo.checkpoint, "profile a trained model instead of a fresh one")
        ->check(CLI::ExistingFile);
    wp->add_option("--bins", wpo.bins, "bin count for a fresh discretizer");
    wp->add_option("--seed", wpo.seed, "init seed for a fresh discretizer");
    wp->add_option("--min", wpo.lo, "grid start");
    wp->add_option("--max", wpo.hi, "grid end (inclusive)");
    wp->add_option("--step", wpo.step, "grid spacing");
    wp->add_option("--output", wpo.out, "CSV destination (default stdout)");
    wp->callback([&] {
        rc = cmd_weights_profile(wpo.checkpoint, wpo.bins, wpo.seed, wpo.lo, wpo.hi, wpo.step,
                                 wpo.out);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const sct::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const sct::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const sct::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}
