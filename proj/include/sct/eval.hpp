#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sct/common.hpp"
#include "sct/rng.hpp"
#include "sct/training.hpp"

namespace sct {

// K-means over embedding rows, k-means++ seeding, Lloyd iterations until the
// assignment stabilizes. Deterministic given the seed.
inline std::vector<int> cluster_cells(const Eigen::MatrixXd& points, int k, std::uint64_t seed) {
    const long n = points.rows();
    if (k < 1) {
        throw ValidationError("cluster_cells: k must be at least 1");
    }
    if (n < k) {
        throw ValidationError("cluster_cells: " + std::to_string(n) +
                              " points cannot form " + std::to_string(k) + " clusters");
    }
    Rng rng(seed, "kmeans");

    Eigen::MatrixXd centers(k, points.cols());
    centers.row(0) = points.row(static_cast<long>(rng.uniform_int(static_cast<int>(n))));
    Eigen::VectorXd d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        long pick = 0;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            while (pick + 1 < n && target > d2(pick)) {
                target -= d2(pick);
                ++pick;
            }
        } else {
            pick = static_cast<long>(rng.uniform_int(static_cast<int>(n)));
        }
        centers.row(c) = points.row(pick);
        d2 = d2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }

    std::vector<int> assign(n, 0);
    for (int iter = 0; iter < 200; ++iter) {
        bool changed = iter == 0;
        for (long i = 0; i < n; ++i) {
            long best = 0;
            (centers.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
            if (assign[i] != static_cast<int>(best)) {
                assign[i] = static_cast<int>(best);
                changed = true;
            }
        }
        if (!changed) {
            break;
        }
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
        std::vector<long> counts(k, 0);
        for (long i = 0; i < n; ++i) {
            sums.row(assign[i]) += points.row(i);
            ++counts[assign[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                centers.row(c) = sums.row(c) / static_cast<double>(counts[c]);
                continue;
            }
            // Re-seed an emptied cluster with the point farthest from its
            // current center.
            long far = 0;
            double far_d = -1.0;
            for (long i = 0; i < n; ++i) {
                const double d = (points.row(i) - centers.row(assign[i])).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            centers.row(c) = points.row(far);
        }
    }
    return assign;
}

struct ClusteringScores {
    double ari = 0.0;
    double nmi = 0.0;
    double homogeneity = 0.0;
    double completeness = 0.0;
    double silhouette = 0.0;
    // Entropy-based scores fall back to their single-partition conventions;
    // the flags say when that happened.
    bool entropy_degenerate = false;
    bool silhouette_degenerate = false;
};

namespace detail {

inline double entropy(const std::vector<long>& counts, double n) {
    double h = 0.0;
    for (long c : counts) {
        if (c > 0) {
            const double p = c / n;
            h -= p * std::log(p);
        }
    }
    return h;
}

inline double pairs(double c) {
    return c * (c - 1.0) / 2.0;
}

} // namespace detail

// Mean silhouette over points, Euclidean distance. Singleton clusters score
// zero; a lone cluster (or all-identical points) flags degenerate.
inline double silhouette_score(const Eigen::MatrixXd& points, const std::vector<int>& assign,
                               int k, bool* degenerate) {
    const long n = points.rows();
    *degenerate = k < 2;
    if (k < 2) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    std::vector<long> counts(k, 0);
    for (int a : assign) {
        ++counts[a];
    }
    double total = 0.0;
    bool any_spread = false;
    for (long i = 0; i < n; ++i) {
        std::vector<double> mean_d(k, 0.0);
        for (long j = 0; j < n; ++j) {
            if (j != i) {
                mean_d[assign[j]] += (points.row(i) - points.row(j)).norm();
            }
        }
        const int ci = assign[i];
        if (counts[ci] < 2) {
            continue; // singleton contributes 0
        }
        const double a = mean_d[ci] / static_cast<double>(counts[ci] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (c != ci && counts[c] > 0) {
                b = std::min(b, mean_d[c] / static_cast<double>(counts[c]));
            }
        }
        const double m = std::max(a, b);
        if (m > 0.0) {
            total += (b - a) / m;
            any_spread = true;
        }
    }
    if (!any_spread) {
        *degenerate = true;
        return 0.0;
    }
    return total / static_cast<double>(n);
}

inline ClusteringScores clustering_metrics(const std::vector<int>& assignments,
                                           const std::vector<int>& labels,
                                           const Eigen::MatrixXd& embeddings) {
    const long n = static_cast<long>(assignments.size());
    if (n == 0 || static_cast<long>(labels.size()) != n || embeddings.rows() != n) {
        throw ValidationError("clustering_metrics: assignments, labels and embeddings "
                              "must cover the same cells");
    }
    int ka = 0, kl = 0;
    for (long i = 0; i < n; ++i) {
        if (assignments[i] < 0 || labels[i] < 0) {
            throw ValidationError("clustering_metrics: ids must be non-negative");
        }
        ka = std::max(ka, assignments[i] + 1);
        kl = std::max(kl, labels[i] + 1);
    }

    std::vector<std::vector<long>> table(kl, std::vector<long>(ka, 0));
    std::vector<long> class_n(kl, 0), cluster_n(ka, 0);
    for (long i = 0; i < n; ++i) {
        ++table[labels[i]][assignments[i]];
        ++class_n[labels[i]];
        ++cluster_n[assignments[i]];
    }

    ClusteringScores s;
    const double nd = static_cast<double>(n);

    double sum_ij = 0.0;
    for (const auto& row : table) {
        for (long c : row) {
            sum_ij += detail::pairs(static_cast<double>(c));
        }
    }
    double sum_a = 0.0, sum_b = 0.0;
    for (long c : class_n) {
        sum_a += detail::pairs(static_cast<double>(c));
    }
    for (long c : cluster_n) {
        sum_b += detail::pairs(static_cast<double>(c));
    }
    const double expected = sum_a * sum_b / detail::pairs(nd);
    const double max_index = 0.5 * (sum_a + sum_b);
    s.ari = max_index == expected ? 1.0 : (sum_ij - expected) / (max_index - expected);

    const double hc = detail::entropy(class_n, nd);
    const double hk = detail::entropy(cluster_n, nd);
    double mi = 0.0;
    double h_c_given_k = 0.0, h_k_given_c = 0.0;
    for (int l = 0; l < kl; ++l) {
        for (int a = 0; a < ka; ++a) {
            const long c = table[l][a];
            if (c == 0) {
                continue;
            }
            const double p = c / nd;
            mi += p * std::log(nd * c / (static_cast<double>(class_n[l]) * cluster_n[a]));
            h_c_given_k -= p * std::log(static_cast<double>(c) / cluster_n[a]);
            h_k_given_c -= p * std::log(static_cast<double>(c) / class_n[l]);
        }
    }
    if (hc == 0.0 && hk == 0.0) {
        s.nmi = 1.0;
    } else if (hc == 0.0 || hk == 0.0) {
        s.nmi = 0.0;
    } else {
        s.nmi = mi / (0.5 * (hc + hk));
    }
    s.homogeneity = hc == 0.0 ? 1.0 : 1.0 - h_c_given_k / hc;
    s.completeness = hk == 0.0 ? 1.0 : 1.0 - h_k_given_c / hk;
    s.entropy_degenerate = hc == 0.0 || hk == 0.0;

    s.silhouette = silhouette_score(embeddings, assignments, ka, &s.silhouette_degenerate);
    return s;
}

// String labels to dense ids, classes sorted for stable ids.
inline std::pair<std::vector<int>, std::vector<std::string>>
label_ids(std::span<const std::string> labels) {
    std::vector<std::string> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    std::vector<int> ids;
    ids.reserve(labels.size());
    for (const std::string& l : labels) {
        ids.push_back(static_cast<int>(
            std::lower_bound(classes.begin(), classes.end(), l) - classes.begin()));
    }
    return {std::move(ids), std::move(classes)};
}

struct AblationRow {
    std::string variant;
    ClusteringScores scores;
};

// Shared evaluation for architecture/objective ablations: each variant embeds
// every cell, clusters at the true type count, and is scored against the
// labels. All variants see the same seed.
inline std::vector<AblationRow>
ablation_harness(const std::vector<std::pair<std::string, Model*>>& variants,
                 const SparseExpressionMatrix& data, std::span<const std::string> labels,
                 std::uint64_t seed, int batch_size = 32) {
    if (variants.empty()) {
        throw ValidationError("ablation_harness: no variants given");
    }
    if (static_cast<long>(labels.size()) != data.n_cells) {
        throw ValidationError("ablation_harness: one label per cell required");
    }
    auto [ids, classes] = label_ids(labels);
    if (classes.size() < 2) {
        throw ValidationError("ablation_harness: need at least 2 cell types");
    }
    std::vector<int> cells(data.n_cells);
    std::iota(cells.begin(), cells.end(), 0);

    std::vector<AblationRow> rows;
    for (const auto& [name, model] : variants) {
        if (model->cfg.n_genes != data.n_genes) {
            throw ValidationError("ablation_harness: variant '" + name + "' expects " +
                                  std::to_string(model->cfg.n_genes) + " genes, dataset has " +
                                  std::to_string(data.n_genes));
        }
        Eigen::MatrixXd emb = embed_cells(*model, data, cells, batch_size);
        std::vector<int> assign = cluster_cells(emb, static_cast<int>(classes.size()), seed);
        rows.push_back({name, clustering_metrics(assign, ids, emb)});
    }
    return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "variant,ari,nmi,homo,cp,sil\n";
    char line[256];
    for (const AblationRow& r : rows) {
        std::snprintf(line, sizeof line, "%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.variant.c_str(),
                      r.scores.ari, r.scores.nmi, r.scores.homogeneity, r.scores.completeness,
                      r.scores.silhouette);
        out += line;
    }
    return out;
}

} // namespace sct
