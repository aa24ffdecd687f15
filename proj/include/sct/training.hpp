#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sct/common.hpp"
#include "sct/expression.hpp"
#include "sct/masking.hpp"
#include "sct/model.hpp"
#include "sct/packing.hpp"
#include "sct/rng.hpp"

namespace sct {

struct TrainConfig {
    int batch_size = 8;
    int steps = 1000;
    double learning_rate = 1e-3; // 0 is allowed for no-update diagnostics
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0; // global-norm cap, 0 disables
    int warmup_steps = 0;   // linear ramp up to learning_rate
    int eval_every = 100;
    double val_fraction = 0.1;
    // The objective normalizes by the masked-position count, which makes it
    // a true mean. This flag switches to the fixed (n_genes - m) * cells
    // denominator instead, where m is the packed survivor length.
    bool fixed_complement_denominator = false;
    std::uint64_t seed = 1;

    void validate() const {
        if (batch_size < 1) {
            throw ConfigError("batch_size must be at least 1");
        }
        if (steps < 0) {
            throw ConfigError("steps must be non-negative");
        }
        if (learning_rate < 0.0) {
            throw ConfigError("learning_rate must be non-negative");
        }
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("Adam betas must lie in [0, 1)");
        }
        if (eps <= 0.0 || grad_clip < 0.0 || warmup_steps < 0) {
            throw ConfigError("eps must be positive, grad_clip and warmup_steps non-negative");
        }
        if (eval_every < 1) {
            throw ConfigError("eval_every must be at least 1");
        }
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
            throw ConfigError("val_fraction must lie in [0, 1)");
        }
    }
};

// Objective value over masked positions, split by whether the ground truth
// was zero. masked_mse is always the count-weighted mean of the two buckets.
struct LossReport {
    double masked_mse = 0.0;
    double masked_nonzero_mse = 0.0;
    double masked_zero_mse = 0.0;
    long n_masked = 0;
    long n_masked_nonzero = 0;
    long n_masked_zero = 0;
};

namespace detail {

struct LossAccum {
    double nz_sum = 0.0, z_sum = 0.0;
    long nz_n = 0, z_n = 0;

    void add(double err, bool was_zero) {
        if (was_zero) {
            z_sum += err;
            ++z_n;
        } else {
            nz_sum += err;
            ++nz_n;
        }
    }

    LossReport report() const {
        if (nz_n + z_n == 0) {
            throw ValidationError("no masked positions to score");
        }
        LossReport r;
        r.n_masked_nonzero = nz_n;
        r.n_masked_zero = z_n;
        r.n_masked = nz_n + z_n;
        r.masked_nonzero_mse = nz_n ? nz_sum / nz_n : 0.0;
        r.masked_zero_mse = z_n ? z_sum / z_n : 0.0;
        r.masked_mse = (nz_sum + z_sum) / r.n_masked;
        return r;
    }
};

} // namespace detail

struct MaskedTargets {
    std::vector<int> rows; // flat cell * n_genes + gene
    Eigen::VectorXd truth;
    std::vector<char> was_zero;
};

inline MaskedTargets masked_targets(const PackedBatch& b) {
    MaskedTargets mt;
    std::vector<double> truth;
    for (int c = 0; c < b.batch; ++c) {
        for (const MaskedValue& mv : b.residuals[c].masked) {
            mt.rows.push_back(c * b.n_genes + mv.gene);
            truth.push_back(mv.truth);
            mt.was_zero.push_back(mv.was_zero ? 1 : 0);
        }
    }
    mt.truth = Eigen::Map<Eigen::VectorXd>(truth.data(), static_cast<long>(truth.size()));
    return mt;
}

// Bin a continuous value into its classification class: nearest integer,
// clipped into [0, n_classes).
inline int value_class(double v, int n_classes) {
    const int b = baseline_bin(v, BinScheme::round_zero);
    return std::min(b, n_classes - 1);
}

// Mean squared error over exactly the masked positions of a batch.
inline LossReport masked_mse(const Eigen::MatrixXd& predictions, const PackedBatch& batch) {
    if (predictions.rows() != static_cast<long>(batch.batch) * batch.n_genes) {
        throw ValidationError("masked_mse: predictions have " + std::to_string(predictions.rows()) +
                              " rows, batch covers " +
                              std::to_string(static_cast<long>(batch.batch) * batch.n_genes));
    }
    detail::LossAccum acc;
    for (int c = 0; c < batch.batch; ++c) {
        for (const MaskedValue& mv : batch.residuals[c].masked) {
            const double e = mv.truth - predictions(c * batch.n_genes + mv.gene, 0);
            acc.add(e * e, mv.was_zero);
        }
    }
    return acc.report();
}

// Objective-aware scoring of a finished forward pass (no tape involved).
// Regression buckets squared errors; classification buckets cross entropy.
inline LossReport score_batch(const Model& m, const Eigen::MatrixXd& output,
                              const PackedBatch& batch) {
    if (m.cfg.objective == Objective::regression) {
        return masked_mse(output, batch);
    }
    detail::LossAccum acc;
    for (int c = 0; c < batch.batch; ++c) {
        for (const MaskedValue& mv : batch.residuals[c].masked) {
            Eigen::RowVectorXd row = output.row(c * batch.n_genes + mv.gene);
            row.array() -= row.maxCoeff();
            const double lse = std::log(row.array().exp().sum());
            const int label = value_class(mv.truth, m.cfg.n_value_classes);
            acc.add(lse - row(label), mv.was_zero);
        }
    }
    return acc.report();
}

// Differentiable training objective over the masked positions.
inline ad::Var pretrain_loss(ad::Tape& t, Model& m, const Forward& f, const PackedBatch& batch,
                             bool fixed_complement_denominator = false) {
    MaskedTargets mt = masked_targets(batch);
    if (mt.rows.empty()) {
        throw ValidationError("batch has no masked positions");
    }
    if (m.cfg.objective == Objective::classification) {
        std::vector<int> labels(mt.rows.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            labels[i] = value_class(mt.truth(static_cast<long>(i)), m.cfg.n_value_classes);
        }
        return ad::softmax_xent(ad::gather_rows(f.output, std::move(mt.rows)), std::move(labels));
    }
    ad::Var diff = ad::sub(ad::gather_rows(f.output, std::move(mt.rows)), t.constant(mt.truth));
    ad::Var total = ad::sum_all(ad::cwise_mul(diff, diff));
    double denom = static_cast<double>(mt.truth.size());
    if (fixed_complement_denominator) {
        denom = static_cast<double>(batch.n_genes - batch.m) * batch.batch;
        if (denom <= 0.0) {
            throw ValidationError("complement denominator (n_genes - m) * cells is not positive");
        }
    }
    return ad::mul_scalar(total, 1.0 / denom);
}

// ---- optimizer ----

class Adam {
public:
    Adam(std::vector<ad::Parameter*> params, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const ad::Parameter* p : params_) {
            m_.push_back(ad::Mat::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(ad::Mat::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void zero_grad() {
        for (ad::Parameter* p : params_) {
            p->zero_grad();
        }
    }

    // Bias-corrected moment update; consumes the accumulated gradients.
    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const ad::Mat& g = params_[i]->grad;
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
            params_[i]->value.array() -=
                lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
        }
    }

    long steps_taken() const {
        return t_;
    }

private:
    std::vector<ad::Parameter*> params_;
    std::vector<ad::Mat> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping. max_norm = 0 only measures.
inline double clip_gradients(const std::vector<ad::Parameter*>& params, double max_norm) {
    double sq = 0.0;
    for (const ad::Parameter* p : params) {
        sq += p->grad.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (ad::Parameter* p : params) {
            p->grad *= scale;
        }
    }
    return norm;
}

// ---- pre-training loop ----

struct MetricsRow {
    long step;
    std::string split; // "train" or "val"
    double masked_mse;
    double nz_mse;
    double z_mse;
    double lr;
};

struct PretrainResult {
    std::vector<MetricsRow> metrics;
    double initial_val_mse = std::numeric_limits<double>::quiet_NaN();
    double final_val_mse = std::numeric_limits<double>::quiet_NaN();
    long steps_completed = 0;
    long cells_excluded = 0; // empty cells or degenerate mask counts
    bool aborted = false;
    std::string abort_reason;
    std::string checkpoint_path;
    std::string metrics_path;
};

namespace detail {

// Cells that cannot produce a mask plan: nothing expressed, or both mask
// counts round to zero.
inline bool maskable(long nnz, long n_zero, const MaskConfig& mc) {
    if (nnz < 1) {
        return false;
    }
    return std::lround(mc.nonzero_mask_ratio * static_cast<double>(nnz)) > 0 ||
           std::lround(mc.zero_mask_ratio * static_cast<double>(n_zero)) > 0;
}

inline std::vector<MaskedCell> mask_cells(const SparseExpressionMatrix& data,
                                          std::span<const int> cells, const MaskConfig& mc) {
    std::vector<MaskedCell> out;
    out.reserve(cells.size());
    for (int c : cells) {
        CellView v = view(data, c);
        out.push_back(apply_mask(v, build_mask_plan(v, mc)));
    }
    return out;
}

} // namespace detail

// Frozen-mask evaluation over the given cells; aggregates across batches.
inline LossReport evaluate_cells(Model& model, const SparseExpressionMatrix& data,
                                 std::span<const int> cells, const MaskConfig& mask_cfg,
                                 int batch_size) {
    if (cells.empty()) {
        throw ValidationError("evaluate_cells: no cells given");
    }
    if (batch_size < 1) {
        throw ValidationError("evaluate_cells: batch_size must be positive");
    }
    detail::LossAccum acc;
    for (std::size_t at = 0; at < cells.size(); at += batch_size) {
        const std::size_t end = std::min(cells.size(), at + batch_size);
        std::vector<MaskedCell> mc =
            detail::mask_cells(data, cells.subspan(at, end - at), mask_cfg);
        PackedBatch packed = filter_and_pack(mc);
        ad::Tape t;
        Forward f = forward_batch(t, model, packed);
        LossReport r = score_batch(model, f.output.value(), packed);
        acc.nz_sum += r.masked_nonzero_mse * r.n_masked_nonzero;
        acc.z_sum += r.masked_zero_mse * r.n_masked_zero;
        acc.nz_n += r.n_masked_nonzero;
        acc.z_n += r.n_masked_zero;
    }
    return acc.report();
}

inline PretrainResult pretrain(Model& model, const SparseExpressionMatrix& data,
                               const MaskConfig& mask_cfg, const TrainConfig& cfg,
                               const std::string& outdir = "") {
    cfg.validate();
    mask_cfg.validate();
    PretrainResult res;

    std::vector<int> usable;
    for (int c = 0; c < data.n_cells; ++c) {
        const long nnz = data.nnz(c);
        if (detail::maskable(nnz, data.n_genes - nnz, mask_cfg)) {
            usable.push_back(c);
        } else {
            ++res.cells_excluded;
        }
    }
    if (usable.empty()) {
        throw ValidationError("no cells can be masked under this config");
    }

    Rng split_rng(cfg.seed, "split");
    split_rng.shuffle(usable);
    long n_val = 0;
    if (cfg.val_fraction > 0.0) {
        n_val = std::max<long>(1, std::lround(cfg.val_fraction * usable.size()));
    }
    if (n_val >= static_cast<long>(usable.size())) {
        throw ConfigError("validation split leaves no training cells");
    }
    const std::vector<int> val(usable.begin(), usable.begin() + n_val);
    const std::vector<int> train(usable.begin() + n_val, usable.end());

    MaskConfig val_mask = mask_cfg;
    val_mask.seed = derive_seed(mask_cfg.seed, "mask/val");

    std::ofstream csv;
    if (!outdir.empty()) {
        std::filesystem::create_directories(outdir);
        res.metrics_path = outdir + "/metrics.csv";
        res.checkpoint_path = outdir + "/checkpoint.ckpt";
        csv.open(res.metrics_path);
        if (!csv) {
            throw IoError("cannot write " + res.metrics_path);
        }
        csv << "step,split,masked_mse,nz_mse,z_mse,lr\n";
    }
    auto log_row = [&](long step, const char* split, const LossReport& r, double lr) {
        res.metrics.push_back({step, split, r.masked_mse, r.masked_nonzero_mse, r.masked_zero_mse, lr});
        if (csv.is_open()) {
            char line[256];
            std::snprintf(line, sizeof line, "%ld,%s,%.17g,%.17g,%.17g,%.17g\n", step, split,
                          r.masked_mse, r.masked_nonzero_mse, r.masked_zero_mse, lr);
            csv << line << std::flush;
        }
    };
    auto lr_at = [&](long step) {
        if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
            return cfg.learning_rate * static_cast<double>(step) / cfg.warmup_steps;
        }
        return cfg.learning_rate;
    };

    std::vector<ad::Parameter*> params = model.parameters();
    std::vector<ad::Mat> snapshot;
    auto save_good = [&]() {
        snapshot.clear();
        for (const ad::Parameter* p : params) {
            snapshot.push_back(p->value);
        }
        if (!res.checkpoint_path.empty()) {
            save_checkpoint(res.checkpoint_path, model);
        }
    };
    auto restore_good = [&]() {
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i]->value = snapshot[i];
            params[i]->zero_grad();
        }
    };

    auto eval_val = [&]() -> std::optional<LossReport> {
        if (val.empty()) {
            return std::nullopt;
        }
        return evaluate_cells(model, data, val, val_mask, cfg.batch_size);
    };

    if (auto r = eval_val()) {
        res.initial_val_mse = r->masked_mse;
        res.final_val_mse = r->masked_mse;
        log_row(0, "val", *r, lr_at(1));
    }
    save_good();

    Adam opt(params, cfg.beta1, cfg.beta2, cfg.eps);
    std::vector<int> train_nnz(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        train_nnz[i] = data.nnz(train[i]);
    }
    std::vector<std::vector<int>> batches;
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;

    for (long step = 1; step <= cfg.steps; ++step) {
        if (cursor >= batches.size()) {
            Rng batch_rng(cfg.seed, "batches", epoch++);
            batches = make_batches(train_nnz, cfg.batch_size, batch_rng);
            cursor = 0;
        }
        std::vector<int> cell_ids;
        for (int local : batches[cursor++]) {
            cell_ids.push_back(train[local]);
        }
        // Training masks are redrawn on every visit; only validation masks
        // stay frozen.
        MaskConfig visit = mask_cfg;
        visit.seed = derive_seed(mask_cfg.seed, "mask/train", static_cast<std::uint64_t>(step));
        const double lr = lr_at(step);
        try {
            std::vector<MaskedCell> mc = detail::mask_cells(data, cell_ids, visit);
            PackedBatch packed = filter_and_pack(mc);
            ad::Tape t;
            Forward f = forward_batch(t, model, packed);
            ad::Var loss = pretrain_loss(t, model, f, packed, cfg.fixed_complement_denominator);
            LossReport r = score_batch(model, f.output.value(), packed);
            opt.zero_grad();
            t.backward(loss);
            if (cfg.grad_clip > 0.0) {
                clip_gradients(params, cfg.grad_clip);
            }
            opt.step(lr);
            log_row(step, "train", r, lr);
            if (step % cfg.eval_every == 0) {
                if (auto vr = eval_val()) {
                    res.final_val_mse = vr->masked_mse;
                    log_row(step, "val", *vr, lr);
                }
                save_good();
            }
            res.steps_completed = step;
        } catch (const NumericError& e) {
            res.aborted = true;
            res.abort_reason = e.what();
            restore_good();
            break;
        }
    }

    if (!res.aborted) {
        if (cfg.steps > 0 && cfg.steps % cfg.eval_every != 0) {
            if (auto vr = eval_val()) {
                res.final_val_mse = vr->masked_mse;
                log_row(cfg.steps, "val", *vr, lr_at(cfg.steps));
            }
        }
        save_good();
    }
    return res;
}

// ---- masked-value recovery correlation ----

inline double pearson(std::span<const double> x, std::span<const double> y,
                      bool* degenerate = nullptr) {
    if (degenerate) {
        *degenerate = false;
    }
    if (x.size() != y.size()) {
        throw ValidationError("pearson: length mismatch");
    }
    const long n = static_cast<long>(x.size());
    if (n < 2) {
        if (degenerate) {
            *degenerate = true;
        }
        return std::numeric_limits<double>::quiet_NaN();
    }
    double mx = 0.0, my = 0.0;
    for (long i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (long i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        if (degenerate) {
            *degenerate = true;
        }
        return std::numeric_limits<double>::quiet_NaN();
    }
    return sxy / std::sqrt(sxx * syy);
}

struct CorrelationReport {
    double overall_r = std::numeric_limits<double>::quiet_NaN();
    bool overall_degenerate = false;
    long n_positions = 0;
    struct Bucket {
        double lo = 0.0, hi = 0.0; // zero-fraction range
        long count = 0;
        double r = std::numeric_limits<double>::quiet_NaN();
        bool degenerate = false;
        bool skipped = false; // fewer than 2 positions
    };
    std::vector<Bucket> buckets; // 10 zero-fraction deciles
    std::vector<std::string> warnings;
};

// Scalar prediction for one output row under either objective; classifiers
// contribute their argmax class index.
inline double predicted_value(const ModelConfig& cfg, const Eigen::MatrixXd& output, long row) {
    if (cfg.objective == Objective::regression) {
        return output(row, 0);
    }
    Eigen::Index arg = 0;
    output.row(row).maxCoeff(&arg);
    return static_cast<double>(arg);
}

inline CorrelationReport recovery_correlation(Model& model, const SparseExpressionMatrix& data,
                                              std::span<const int> cells,
                                              const MaskConfig& mask_cfg, int batch_size = 16) {
    if (cells.empty()) {
        throw ValidationError("recovery_correlation: no cells given");
    }
    if (batch_size < 1) {
        throw ValidationError("recovery_correlation: batch_size must be positive");
    }
    std::vector<double> truth, pred;
    std::vector<int> bucket_of;
    for (std::size_t at = 0; at < cells.size(); at += batch_size) {
        const std::size_t end = std::min(cells.size(), at + batch_size);
        std::vector<MaskedCell> mc =
            detail::mask_cells(data, cells.subspan(at, end - at), mask_cfg);
        PackedBatch packed = filter_and_pack(mc);
        ad::Tape t;
        Forward f = forward_batch(t, model, packed);
        const Eigen::MatrixXd& out = f.output.value();
        for (int c = 0; c < packed.batch; ++c) {
            const int cell = static_cast<int>(cells[at + c]);
            // Integer decile so boundary fractions like 2/10 bucket exactly.
            const long n_zero = data.n_genes - data.nnz(cell);
            const int bucket = std::min(9L, n_zero * 10 / data.n_genes);
            for (const MaskedValue& mv : packed.residuals[c].masked) {
                truth.push_back(mv.truth);
                pred.push_back(predicted_value(model.cfg, out, c * packed.n_genes + mv.gene));
                bucket_of.push_back(bucket);
            }
        }
    }

    CorrelationReport rep;
    rep.n_positions = static_cast<long>(truth.size());
    rep.overall_r = pearson(truth, pred, &rep.overall_degenerate);
    rep.buckets.resize(10);
    for (int b = 0; b < 10; ++b) {
        rep.buckets[b].lo = b / 10.0;
        rep.buckets[b].hi = (b + 1) / 10.0;
        std::vector<double> tx, px;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (bucket_of[i] == b) {
                tx.push_back(truth[i]);
                px.push_back(pred[i]);
            }
        }
        rep.buckets[b].count = static_cast<long>(tx.size());
        if (tx.size() < 2) {
            rep.buckets[b].skipped = true;
            if (!tx.empty()) {
                char msg[128];
                std::snprintf(msg, sizeof msg,
                              "zero-fraction bucket [%.1f, %.1f) has %zu masked positions, skipped",
                              rep.buckets[b].lo, rep.buckets[b].hi, tx.size());
                rep.warnings.push_back(msg);
            }
            continue;
        }
        rep.buckets[b].r = pearson(tx, px, &rep.buckets[b].degenerate);
    }
    return rep;
}

// ---- cell annotation fine-tuning ----

struct FinetuneConfig {
    int steps = 300;
    int batch_size = 16;
    double learning_rate = 0.01;
    bool unfreeze_trunk = false;
    std::uint64_t seed = 1;

    void validate() const {
        if (steps < 1 || batch_size < 1) {
            throw ConfigError("finetune steps and batch_size must be at least 1");
        }
        if (learning_rate <= 0.0) {
            throw ConfigError("finetune learning_rate must be positive");
        }
    }
};

struct SplitIndices {
    std::vector<int> train, val, test;
};

// Deterministic 8:1:1 shuffle split.
inline SplitIndices annotation_split(int n_cells, std::uint64_t seed) {
    if (n_cells < 3) {
        throw ValidationError("need at least 3 labeled cells for an 8:1:1 split");
    }
    std::vector<int> order(n_cells);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed, "annotation/split");
    rng.shuffle(order);
    const int n_val = std::max(1, n_cells / 10);
    const int n_test = std::max(1, n_cells / 10);
    const int n_train = n_cells - n_val - n_test;
    if (n_train < 1) {
        throw ValidationError("8:1:1 split leaves no training cells");
    }
    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + n_train);
    s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    s.test.assign(order.begin() + n_train + n_val, order.end());
    return s;
}

// A cell with nothing masked: all expressed genes survive, the rest are
// untouched zeros. Used wherever the model embeds whole cells.
inline MaskedCell unmasked_cell(const CellView& v) {
    MaskedCell c;
    c.cell_index = v.cell_index;
    c.n_genes = v.n_genes;
    std::size_t e = 0;
    for (int g = 0; g < v.n_genes; ++g) {
        if (e < v.entries.size() && v.entries[e].gene == g) {
            c.survivors.emplace_back(g, v.entries[e].value);
            ++e;
        } else {
            c.unmasked_zeros.push_back(g);
        }
    }
    return c;
}

namespace detail {

// Max-pooled cell embeddings on the tape. The asymmetric model pools over
// its encoder outputs (the expressed genes carry the signal); encoder_only
// pools over the full-length stack output.
inline ad::Var embed_cells_var(ad::Tape& t, Model& m, const PackedBatch& packed) {
    if (m.cfg.arch == Architecture::asymmetric) {
        ad::Var tokens = embed_tokens(t, packed, m.disc, m.genes, m.cfg.value_mode);
        ad::Var enc = encoder_forward(t, m, tokens, packed.batch, flat_pad(packed));
        return cell_embedding(enc, encoder_pools(packed));
    }
    ad::Var full = assemble_full_input(t, m, packed, nullptr);
    ad::Var dec = decoder_forward(t, m, full, packed.batch);
    return cell_embedding(dec, full_pools(packed.batch, packed.n_genes));
}

} // namespace detail

inline int embedding_dim(const ModelConfig& cfg) {
    return cfg.arch == Architecture::asymmetric ? cfg.encoder.dim : cfg.decoder.dim;
}

inline Eigen::MatrixXd embed_cells(Model& model, const SparseExpressionMatrix& data,
                                   std::span<const int> cells, int batch_size = 32) {
    if (cells.empty()) {
        throw ValidationError("embed_cells: no cells given");
    }
    if (batch_size < 1) {
        throw ValidationError("embed_cells: batch_size must be positive");
    }
    Eigen::MatrixXd out(static_cast<long>(cells.size()), embedding_dim(model.cfg));
    for (std::size_t at = 0; at < cells.size(); at += batch_size) {
        const std::size_t end = std::min(cells.size(), at + batch_size);
        std::vector<MaskedCell> mc;
        mc.reserve(end - at);
        for (std::size_t i = at; i < end; ++i) {
            mc.push_back(unmasked_cell(view(data, cells[i])));
        }
        PackedBatch packed = filter_and_pack(mc);
        ad::Tape t;
        out.middleRows(static_cast<long>(at), static_cast<long>(end - at)) =
            detail::embed_cells_var(t, model, packed).value();
    }
    return out;
}

struct LinearHead {
    ad::Parameter w; // [n_classes, dim]
    ad::Parameter b; // [1, n_classes]
};

// Cross-entropy training of a softmax classifier over fixed embeddings.
inline LinearHead fit_linear_head(const Eigen::MatrixXd& embeddings, const std::vector<int>& labels,
                                  int n_classes, const FinetuneConfig& cfg) {
    cfg.validate();
    if (embeddings.rows() != static_cast<long>(labels.size())) {
        throw ValidationError("fit_linear_head: one label per embedding row");
    }
    Rng init(cfg.seed, "annotation/head");
    LinearHead head{ad::Parameter("annotation.w",
                                  detail::randn(n_classes, embeddings.cols(), kInitStd, init)),
                    ad::Parameter("annotation.b", ad::Mat::Zero(1, n_classes))};
    Adam opt({&head.w, &head.b});
    std::vector<int> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffler(cfg.seed, "annotation/batches");
    std::size_t cursor = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        if (cursor >= order.size()) {
            cursor = 0;
        }
        if (cursor == 0) {
            shuffler.shuffle(order);
        }
        const std::size_t end = std::min(order.size(), cursor + cfg.batch_size);
        Eigen::MatrixXd eb(static_cast<long>(end - cursor), embeddings.cols());
        std::vector<int> yb;
        for (std::size_t i = cursor; i < end; ++i) {
            eb.row(static_cast<long>(i - cursor)) = embeddings.row(order[i]);
            yb.push_back(labels[order[i]]);
        }
        cursor = end;
        ad::Tape t;
        ad::Var logits = ad::add_rowvec(ad::matmul(t.constant(std::move(eb)), t.param(head.w),
                                                    false, true),
                                        t.param(head.b));
        opt.zero_grad();
        t.backward(ad::softmax_xent(logits, std::move(yb)));
        opt.step(cfg.learning_rate);
    }
    return head;
}

inline int predict_class(const LinearHead& head, const Eigen::RowVectorXd& embedding) {
    Eigen::RowVectorXd logits = embedding * head.w.value.transpose() + head.b.value;
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    return static_cast<int>(arg);
}

struct AnnotationReport {
    std::vector<std::string> classes;
    Eigen::MatrixXi confusion; // rows truth, cols predicted; test split
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double val_accuracy = 0.0;
    long n_train = 0, n_val = 0, n_test = 0;
};

namespace detail {

inline AnnotationReport score_confusion(const Eigen::MatrixXi& confusion,
                                        std::vector<std::string> classes) {
    AnnotationReport rep;
    rep.classes = std::move(classes);
    rep.confusion = confusion;
    const int k = static_cast<int>(confusion.rows());
    long correct = 0, total = confusion.sum();
    double psum = 0.0, rsum = 0.0, fsum = 0.0;
    for (int c = 0; c < k; ++c) {
        correct += confusion(c, c);
        const long tp = confusion(c, c);
        const long pred_c = confusion.col(c).sum();
        const long truth_c = confusion.row(c).sum();
        const double prec = pred_c > 0 ? static_cast<double>(tp) / pred_c : 0.0;
        const double rec = truth_c > 0 ? static_cast<double>(tp) / truth_c : 0.0;
        psum += prec;
        rsum += rec;
        fsum += (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    rep.accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;
    rep.macro_precision = psum / k;
    rep.macro_recall = rsum / k;
    rep.macro_f1 = fsum / k;
    return rep;
}

} // namespace detail

// Max-pool embeddings, 8:1:1 split, linear softmax head. The trunk stays
// frozen unless cfg.unfreeze_trunk, in which case every model parameter
// trains alongside the head.
inline AnnotationReport finetune_annotation(Model& model, const SparseExpressionMatrix& data,
                                            std::span<const std::string> labels,
                                            const FinetuneConfig& cfg) {
    cfg.validate();
    if (static_cast<long>(labels.size()) != data.n_cells) {
        throw ValidationError("finetune_annotation: one label per cell required");
    }
    std::vector<std::string> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    const int k = static_cast<int>(classes.size());
    if (k < 2) {
        throw ValidationError("finetune_annotation: need at least 2 classes");
    }
    std::vector<int> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        y[i] = static_cast<int>(
            std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin());
    }

    SplitIndices split = annotation_split(data.n_cells, cfg.seed);
    std::vector<long> train_class_count(k, 0);
    for (int i : split.train) {
        ++train_class_count[y[i]];
    }
    for (int c = 0; c < k; ++c) {
        if (train_class_count[c] == 0) {
            throw ValidationError("class '" + classes[c] + "' is absent from the training split");
        }
    }
    auto labels_of = [&](const std::vector<int>& cells) {
        std::vector<int> out;
        out.reserve(cells.size());
        for (int i : cells) {
            out.push_back(y[i]);
        }
        return out;
    };

    LinearHead head{ad::Parameter("annotation.w", ad::Mat()), ad::Parameter("annotation.b", ad::Mat())};
    if (!cfg.unfreeze_trunk) {
        Eigen::MatrixXd train_emb = embed_cells(model, data, split.train);
        head = fit_linear_head(train_emb, labels_of(split.train), k, cfg);
    } else {
        Rng init(cfg.seed, "annotation/head");
        head.w = ad::Parameter("annotation.w",
                               detail::randn(k, embedding_dim(model.cfg), kInitStd, init));
        head.b = ad::Parameter("annotation.b", ad::Mat::Zero(1, k));
        std::vector<ad::Parameter*> params = model.parameters();
        params.push_back(&head.w);
        params.push_back(&head.b);
        Adam opt(params);
        std::vector<int> order = split.train;
        Rng shuffler(cfg.seed, "annotation/batches");
        std::size_t cursor = 0;
        for (int step = 0; step < cfg.steps; ++step) {
            if (cursor >= order.size()) {
                cursor = 0;
            }
            if (cursor == 0) {
                shuffler.shuffle(order);
            }
            const std::size_t end = std::min(order.size(), cursor + cfg.batch_size);
            std::vector<MaskedCell> mc;
            std::vector<int> yb;
            for (std::size_t i = cursor; i < end; ++i) {
                mc.push_back(unmasked_cell(view(data, order[i])));
                yb.push_back(y[order[i]]);
            }
            cursor = end;
            PackedBatch packed = filter_and_pack(mc);
            ad::Tape t;
            ad::Var pooled = detail::embed_cells_var(t, model, packed);
            ad::Var logits = ad::add_rowvec(ad::matmul(pooled, t.param(head.w), false, true),
                                            t.param(head.b));
            opt.zero_grad();
            t.backward(ad::softmax_xent(logits, std::move(yb)));
            opt.step(cfg.learning_rate);
        }
    }

    auto evaluate = [&](const std::vector<int>& cells) {
        Eigen::MatrixXi confusion = Eigen::MatrixXi::Zero(k, k);
        Eigen::MatrixXd emb = embed_cells(model, data, cells);
        for (std::size_t i = 0; i < cells.size(); ++i) {
            confusion(y[cells[i]], predict_class(head, emb.row(static_cast<long>(i)))) += 1;
        }
        return confusion;
    };
    AnnotationReport rep = detail::score_confusion(evaluate(split.test), classes);
    Eigen::MatrixXi val_conf = evaluate(split.val);
    rep.val_accuracy =
        val_conf.sum() > 0 ? static_cast<double>(val_conf.trace()) / val_conf.sum() : 0.0;
    rep.n_train = static_cast<long>(split.train.size());
    rep.n_val = static_cast<long>(split.val.size());
    rep.n_test = static_cast<long>(split.test.size());
    return rep;
}

} // namespace sct
