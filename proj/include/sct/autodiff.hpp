#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sct/common.hpp"

// Reverse-mode automatic differentiation over Eigen double matrices. A Tape
// records the forward graph for one step; Parameters live outside the tape
// and collect gradients when backward() reaches their leaf nodes. Everything
// is double precision so finite-difference checks can run at 1e-4 relative.
namespace sct::ad {

using Mat = Eigen::MatrixXd;

struct Parameter {
    std::string name;
    Mat value;
    Mat grad;

    Parameter(std::string n, Mat v)
        : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

    void zero_grad() {
        grad.setZero();
    }
};

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, int node) : tape_(tape), node_(node) {}

    const Mat& value() const;
    long rows() const {
        return value().rows();
    }
    long cols() const {
        return value().cols();
    }

    Tape* tape() const {
        return tape_;
    }
    int node() const {
        return node_;
    }

private:
    Tape* tape_ = nullptr;
    int node_ = -1;
};

class Tape {
public:
    using BackFn = std::function<void(Tape&, int)>;

    Var constant(Mat v) {
        return push(std::move(v), false, nullptr, {});
    }

    Var param(Parameter& p) {
        return push(p.value, true, &p, {});
    }

    const Mat& value(int node) const {
        return nodes_[node].value;
    }

    const Mat& value(const Var& v) const {
        return nodes_[v.node()].value;
    }

    bool needs_grad(const Var& v) const {
        return nodes_[v.node()].needs_grad;
    }

    // Gradient of a node as accumulated so far during backward(); zero-sized
    // until somebody downstream has contributed.
    const Mat& node_grad(int node) const {
        return nodes_[node].grad;
    }

    const Mat& grad(const Var& v) const {
        return nodes_[v.node()].grad;
    }

    // Seeds d(loss)/d(loss) = 1 and walks the graph in reverse creation
    // order, which is a valid topological order. Parameter gradients are
    // accumulated (+=) so several backward passes can share one step.
    void backward(const Var& loss) {
        if (loss.tape() != this) {
            throw ValidationError("backward: loss from another tape");
        }
        const Mat& lv = nodes_[loss.node()].value;
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw ValidationError("backward: loss must be 1x1");
        }
        accum(loss.node(), Mat::Ones(1, 1));
        for (int i = loss.node(); i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.grad.size() > 0 && n.back) {
                n.back(*this, i);
            }
        }
        for (Node& n : nodes_) {
            if (n.bound && n.grad.size() > 0) {
                n.bound->grad += n.grad;
            }
        }
    }

    // Adds g into the stored gradient of `node`, allocating zeros on first
    // touch. All op backward closures report through here; pushes into
    // nodes that do not need gradients are dropped.
    void accum(int node, const Mat& g) {
        Node& n = nodes_[node];
        if (!n.needs_grad) {
            return;
        }
        if (n.grad.size() == 0) {
            n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        }
        n.grad += g;
    }

    std::size_t size() const {
        return nodes_.size();
    }

    Var push(Mat value, bool needs_grad, Parameter* bound, BackFn back) {
        if (!value.allFinite()) {
            throw NumericError("tape node " + std::to_string(nodes_.size()) + " is not finite");
        }
        nodes_.push_back(Node{std::move(value), Mat(), needs_grad, bound, std::move(back)});
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad;
        Parameter* bound;
        BackFn back;
    };

    std::vector<Node> nodes_;
};

inline const Mat& Var::value() const {
    return tape_->value(node_);
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape() || a.tape() == nullptr) {
        throw ValidationError("operands live on different tapes");
    }
    return *a.tape();
}

inline void require(bool ok, const std::string& what) {
    if (!ok) {
        throw ValidationError(what);
    }
}

} // namespace detail

// ---- elementwise and broadcast arithmetic ----

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    const int ia = a.node(), ib = b.node();
    return t.push(a.value() + b.value(), t.needs_grad(a) || t.needs_grad(b), nullptr,
                  [ia, ib](Tape& t, int out) {
                      t.accum(ia, t.node_grad(out));
                      t.accum(ib, t.node_grad(out));
                  });
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    const int ia = a.node(), ib = b.node();
    return t.push(a.value() - b.value(), t.needs_grad(a) || t.needs_grad(b), nullptr,
                  [ia, ib](Tape& t, int out) {
                      t.accum(ia, t.node_grad(out));
                      t.accum(ib, -t.node_grad(out));
                  });
}

inline Var cwise_mul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "cwise_mul: shape mismatch");
    const int ia = a.node(), ib = b.node();
    return t.push(a.value().cwiseProduct(b.value()), t.needs_grad(a) || t.needs_grad(b), nullptr,
                  [ia, ib](Tape& t, int out) {
                      t.accum(ia, t.node_grad(out).cwiseProduct(t.value(ib)));
                      t.accum(ib, t.node_grad(out).cwiseProduct(t.value(ia)));
                  });
}

inline Var mul_scalar(const Var& a, double s) {
    Tape& t = *a.tape();
    const int ia = a.node();
    return t.push(a.value() * s, t.needs_grad(a), nullptr, [ia, s](Tape& t, int out) {
        t.accum(ia, t.node_grad(out) * s);
    });
}

// y = alpha * a with a learnable 1x1 alpha.
inline Var mul_scalar_param(const Var& a, const Var& alpha) {
    Tape& t = detail::same_tape(a, alpha);
    detail::require(alpha.rows() == 1 && alpha.cols() == 1, "mul_scalar_param: alpha must be 1x1");
    const int ia = a.node(), ial = alpha.node();
    return t.push(a.value() * alpha.value()(0, 0), t.needs_grad(a) || t.needs_grad(alpha), nullptr,
                  [ia, ial](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      t.accum(ia, g * t.value(ial)(0, 0));
                      Mat da(1, 1);
                      da(0, 0) = g.cwiseProduct(t.value(ia)).sum();
                      t.accum(ial, da);
                  });
}

// Adds a [1, n] row vector to every row.
inline Var add_rowvec(const Var& a, const Var& r) {
    Tape& t = detail::same_tape(a, r);
    detail::require(r.rows() == 1 && r.cols() == a.cols(), "add_rowvec: shape mismatch");
    const int ia = a.node(), ir = r.node();
    Mat y = a.value();
    y.rowwise() += r.value().row(0);
    return t.push(std::move(y), t.needs_grad(a) || t.needs_grad(r), nullptr, [ia, ir](Tape& t, int out) {
        t.accum(ia, t.node_grad(out));
        t.accum(ir, t.node_grad(out).colwise().sum());
    });
}

// Scales row i of a by v(i, 0).
inline Var mul_colvec(const Var& a, const Var& v) {
    Tape& t = detail::same_tape(a, v);
    detail::require(v.cols() == 1 && v.rows() == a.rows(), "mul_colvec: shape mismatch");
    const int ia = a.node(), iv = v.node();
    Mat y = a.value().array().colwise() * v.value().col(0).array();
    return t.push(std::move(y), t.needs_grad(a) || t.needs_grad(v), nullptr, [ia, iv](Tape& t, int out) {
        const Mat& g = t.node_grad(out);
        t.accum(ia, g.array().colwise() * t.value(iv).col(0).array());
        t.accum(iv, g.cwiseProduct(t.value(ia)).rowwise().sum());
    });
}

// Divides row i of a by v(i, 0).
inline Var div_colvec(const Var& a, const Var& v) {
    Tape& t = detail::same_tape(a, v);
    detail::require(v.cols() == 1 && v.rows() == a.rows(), "div_colvec: shape mismatch");
    const int ia = a.node(), iv = v.node();
    Mat y = a.value().array().colwise() / v.value().col(0).array();
    return t.push(std::move(y), t.needs_grad(a) || t.needs_grad(v), nullptr,
                  [ia, iv](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      const auto vi = t.value(iv).col(0).array();
                      t.accum(ia, g.array().colwise() / vi);
                      Mat dv = -(g.cwiseProduct(t.value(out)).rowwise().sum().array() / vi).matrix();
                      t.accum(iv, dv);
                  });
}

// Subtracts v(i, 0) from every element of row i.
inline Var sub_colvec(const Var& a, const Var& v) {
    Tape& t = detail::same_tape(a, v);
    detail::require(v.cols() == 1 && v.rows() == a.rows(), "sub_colvec: shape mismatch");
    const int ia = a.node(), iv = v.node();
    Mat y = a.value().array().colwise() - v.value().col(0).array();
    return t.push(std::move(y), t.needs_grad(a) || t.needs_grad(v), nullptr, [ia, iv](Tape& t, int out) {
        t.accum(ia, t.node_grad(out));
        t.accum(iv, -t.node_grad(out).rowwise().sum());
    });
}

// ---- matrix product ----

inline Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false) {
    Tape& t = detail::same_tape(a, b);
    const long ak = transpose_a ? a.rows() : a.cols();
    const long bk = transpose_b ? b.cols() : b.rows();
    detail::require(ak == bk, "matmul: inner dimensions disagree");
    const int ia = a.node(), ib = b.node();
    Mat y;
    if (!transpose_a && !transpose_b) {
        y = a.value() * b.value();
    } else if (transpose_a && !transpose_b) {
        y = a.value().transpose() * b.value();
    } else if (!transpose_a && transpose_b) {
        y = a.value() * b.value().transpose();
    } else {
        y = a.value().transpose() * b.value().transpose();
    }
    return t.push(std::move(y), t.needs_grad(a) || t.needs_grad(b), nullptr,
                  [ia, ib, transpose_a, transpose_b](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      const Mat& av = t.value(ia);
                      const Mat& bv = t.value(ib);
                      if (!transpose_a) {
                          t.accum(ia, transpose_b ? Mat(g * bv) : Mat(g * bv.transpose()));
                      } else {
                          t.accum(ia, transpose_b ? Mat(bv.transpose() * g.transpose()) : Mat(bv * g.transpose()));
                      }
                      if (!transpose_b) {
                          t.accum(ib, transpose_a ? Mat(av * g) : Mat(av.transpose() * g));
                      } else {
                          t.accum(ib, transpose_a ? Mat(g.transpose() * av.transpose()) : Mat(g.transpose() * av));
                      }
                  });
}

// ---- nonlinearities ----

inline Var exp(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.node();
    return t.push(a.value().array().exp().matrix(), t.needs_grad(a), nullptr, [ia](Tape& t, int out) {
        t.accum(ia, t.node_grad(out).cwiseProduct(t.value(out)));
    });
}

inline Var leaky_relu(const Var& a, double slope) {
    Tape& t = *a.tape();
    const int ia = a.node();
    Mat y = a.value().unaryExpr([slope](double x) { return x >= 0.0 ? x : slope * x; });
    return t.push(std::move(y), t.needs_grad(a), nullptr, [ia, slope](Tape& t, int out) {
        Mat mask = t.value(ia).unaryExpr([slope](double x) { return x >= 0.0 ? 1.0 : slope; });
        t.accum(ia, t.node_grad(out).cwiseProduct(mask));
    });
}

namespace detail {

inline double gelu_fwd(double x) {
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_bwd(double x) {
    constexpr double k = 0.7978845608028654;
    const double u = k * (x + 0.044715 * x * x * x);
    const double th = std::tanh(u);
    const double sech2 = 1.0 - th * th;
    return 0.5 * (1.0 + th) + 0.5 * x * sech2 * k * (1.0 + 3.0 * 0.044715 * x * x);
}

} // namespace detail

inline Var gelu(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.node();
    Mat y = a.value().unaryExpr([](double x) { return detail::gelu_fwd(x); });
    return t.push(std::move(y), t.needs_grad(a), nullptr, [ia](Tape& t, int out) {
        Mat d = t.value(ia).unaryExpr([](double x) { return detail::gelu_bwd(x); });
        t.accum(ia, t.node_grad(out).cwiseProduct(d));
    });
}

inline Var softmax_rows(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.node();
    Mat p = a.value();
    for (long r = 0; r < p.rows(); ++r) {
        p.row(r).array() -= p.row(r).maxCoeff();
        p.row(r) = p.row(r).array().exp();
        p.row(r) /= p.row(r).sum();
    }
    return t.push(std::move(p), t.needs_grad(a), nullptr, [ia](Tape& t, int out) {
        const Mat& p = t.value(out);
        const Mat& g = t.node_grad(out);
        Eigen::ArrayXd dot = g.cwiseProduct(p).rowwise().sum().array();
        Mat da = ((g.array().colwise() - dot) * p.array()).matrix();
        t.accum(ia, da);
    });
}

// Per-row layer normalization with learnable gain/bias ([1, d] each).
inline Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5) {
    Tape& t = detail::same_tape(a, gamma);
    detail::same_tape(gamma, beta);
    detail::require(gamma.rows() == 1 && beta.rows() == 1 && gamma.cols() == a.cols() &&
                        beta.cols() == a.cols(),
                    "layer_norm_rows: gain/bias must be [1, d]");
    const int ia = a.node(), ig = gamma.node(), ib = beta.node();
    const long n = a.rows(), d = a.cols();
    Mat xhat(n, d);
    Eigen::VectorXd inv_std(n);
    for (long r = 0; r < n; ++r) {
        const double mu = a.value().row(r).mean();
        const double var = (a.value().row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (a.value().row(r).array() - mu) * inv_std(r);
    }
    Mat y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
            beta.value().row(0).array();
    bool ng = t.needs_grad(a) || t.needs_grad(gamma) || t.needs_grad(beta);
    return t.push(std::move(y), ng, nullptr,
                  [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      t.accum(ib, g.colwise().sum());
                      t.accum(ig, g.cwiseProduct(xhat).colwise().sum());
                      Mat dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                      Mat da(dxhat.rows(), dxhat.cols());
                      for (long r = 0; r < dxhat.rows(); ++r) {
                          const double m1 = dxhat.row(r).mean();
                          const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                          da.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                      }
                      t.accum(ia, da);
                  });
}

// Half squared L2 norm per row -> [n, 1]; the kernel feature map uses it.
inline Var rowwise_halfsqnorm(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.node();
    Mat y = 0.5 * a.value().rowwise().squaredNorm();
    return t.push(std::move(y), t.needs_grad(a), nullptr, [ia](Tape& t, int out) {
        t.accum(ia, t.value(ia).array().colwise() * t.node_grad(out).col(0).array());
    });
}

inline Var sum_all(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.node();
    Mat y(1, 1);
    y(0, 0) = a.value().sum();
    return t.push(std::move(y), t.needs_grad(a), nullptr, [ia](Tape& t, int out) {
        const double g = t.node_grad(out)(0, 0);
        t.accum(ia, Mat::Constant(t.value(ia).rows(), t.value(ia).cols(), g));
    });
}

// ---- structural ops ----

// out.row(k) = a.row(rows[k]); duplicate sources allowed (gradients add).
inline Var gather_rows(const Var& a, std::vector<int> rows) {
    Tape& t = *a.tape();
    const int ia = a.node();
    Mat y(static_cast<long>(rows.size()), a.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        detail::require(rows[k] >= 0 && rows[k] < a.rows(), "gather_rows: index out of range");
        y.row(k) = a.value().row(rows[k]);
    }
    return t.push(std::move(y), t.needs_grad(a), nullptr, [ia, rows = std::move(rows)](Tape& t, int out) {
        const Mat& g = t.node_grad(out);
        Mat da = Mat::Zero(t.value(ia).rows(), t.value(ia).cols());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            da.row(rows[k]) += g.row(k);
        }
        t.accum(ia, da);
    });
}

// out has `out_rows` rows, zero except out.row(dest[k]) = a.row(k).
// Destinations must be distinct.
inline Var scatter_rows(const Var& a, std::vector<int> dest, long out_rows) {
    Tape& t = *a.tape();
    const int ia = a.node();
    detail::require(static_cast<long>(dest.size()) == a.rows(), "scatter_rows: one destination per row");
    Mat y = Mat::Zero(out_rows, a.cols());
    std::vector<char> used(static_cast<std::size_t>(out_rows), 0);
    for (std::size_t k = 0; k < dest.size(); ++k) {
        detail::require(dest[k] >= 0 && dest[k] < out_rows, "scatter_rows: destination out of range");
        detail::require(!used[dest[k]], "scatter_rows: destination used twice");
        used[dest[k]] = 1;
        y.row(dest[k]) = a.value().row(k);
    }
    return t.push(std::move(y), t.needs_grad(a), nullptr, [ia, dest = std::move(dest)](Tape& t, int out) {
        const Mat& g = t.node_grad(out);
        Mat da(static_cast<long>(dest.size()), g.cols());
        for (std::size_t k = 0; k < dest.size(); ++k) {
            da.row(k) = g.row(dest[k]);
        }
        t.accum(ia, da);
    });
}

inline Var slice_block(const Var& a, long r0, long c0, long nr, long nc) {
    Tape& t = *a.tape();
    const int ia = a.node();
    detail::require(r0 >= 0 && c0 >= 0 && r0 + nr <= a.rows() && c0 + nc <= a.cols(),
                    "slice_block: block outside matrix");
    return t.push(a.value().block(r0, c0, nr, nc), t.needs_grad(a), nullptr,
                  [ia, r0, c0, nr, nc](Tape& t, int out) {
                      Mat da = Mat::Zero(t.value(ia).rows(), t.value(ia).cols());
                      da.block(r0, c0, nr, nc) = t.node_grad(out);
                      t.accum(ia, da);
                  });
}

inline Var hstack(std::span<const Var> parts) {
    detail::require(!parts.empty(), "hstack: empty");
    Tape& t = *parts[0].tape();
    long cols = 0;
    for (const Var& p : parts) {
        detail::same_tape(parts[0], p);
        detail::require(p.rows() == parts[0].rows(), "hstack: row mismatch");
        cols += p.cols();
    }
    Mat y(parts[0].rows(), cols);
    std::vector<int> ids;
    std::vector<long> widths;
    bool ng = false;
    long c = 0;
    for (const Var& p : parts) {
        y.middleCols(c, p.cols()) = p.value();
        c += p.cols();
        ids.push_back(p.node());
        widths.push_back(p.cols());
        ng = ng || t.needs_grad(p);
    }
    return t.push(std::move(y), ng, nullptr,
                  [ids = std::move(ids), widths = std::move(widths)](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      long c = 0;
                      for (std::size_t k = 0; k < ids.size(); ++k) {
                          t.accum(ids[k], g.middleCols(c, widths[k]));
                          c += widths[k];
                      }
                  });
}

inline Var vstack(std::span<const Var> parts) {
    detail::require(!parts.empty(), "vstack: empty");
    Tape& t = *parts[0].tape();
    long rows = 0;
    for (const Var& p : parts) {
        detail::same_tape(parts[0], p);
        detail::require(p.cols() == parts[0].cols(), "vstack: column mismatch");
        rows += p.rows();
    }
    Mat y(rows, parts[0].cols());
    std::vector<int> ids;
    std::vector<long> heights;
    bool ng = false;
    long r = 0;
    for (const Var& p : parts) {
        y.middleRows(r, p.rows()) = p.value();
        r += p.rows();
        ids.push_back(p.node());
        heights.push_back(p.rows());
        ng = ng || t.needs_grad(p);
    }
    return t.push(std::move(y), ng, nullptr,
                  [ids = std::move(ids), heights = std::move(heights)](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      long r = 0;
                      for (std::size_t k = 0; k < ids.size(); ++k) {
                          t.accum(ids[k], g.middleRows(r, heights[k]));
                          r += heights[k];
                      }
                  });
}

// ---- fused attention ----

// Multi-head softmax attention over flat [batch*T, d] projections. `pad`
// flags flat rows to exclude: padded keys get -1e30 before the softmax and
// padded query rows are zeroed in the output (their gradient is exactly
// zero, so downstream never sees them).
inline Var attention_mix(const Var& q, const Var& k, const Var& v, int batch, int heads,
                         const std::vector<char>& pad) {
    Tape& t = detail::same_tape(q, k);
    detail::same_tape(k, v);
    detail::require(q.rows() == k.rows() && q.rows() == v.rows(), "attention_mix: row mismatch");
    detail::require(q.cols() == k.cols() && q.cols() == v.cols(), "attention_mix: col mismatch");
    detail::require(q.rows() % batch == 0, "attention_mix: rows not divisible by batch");
    detail::require(q.cols() % heads == 0, "attention_mix: dim not divisible by heads");
    detail::require(static_cast<long>(pad.size()) == q.rows(), "attention_mix: pad size mismatch");
    const int iq = q.node(), ik = k.node(), iv = v.node();
    const long T = q.rows() / batch;
    const long hs = q.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hs));

    Mat y = Mat::Zero(q.rows(), q.cols());
    // One probability matrix per (cell, head), consumed by the backward pass.
    std::vector<Mat> probs(static_cast<std::size_t>(batch) * heads);
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            auto qh = q.value().block(b * T, h * hs, T, hs);
            auto kh = k.value().block(b * T, h * hs, T, hs);
            auto vh = v.value().block(b * T, h * hs, T, hs);
            Mat s = qh * kh.transpose() * scale;
            for (long j = 0; j < T; ++j) {
                if (pad[b * T + j]) {
                    s.col(j).setConstant(-1e30);
                }
            }
            Mat p = Mat::Zero(T, T);
            for (long i = 0; i < T; ++i) {
                if (pad[b * T + i]) {
                    continue; // padded query: output row stays zero
                }
                Eigen::RowVectorXd row = s.row(i);
                row.array() -= row.maxCoeff();
                row = row.array().exp();
                p.row(i) = row / row.sum();
            }
            probs[static_cast<std::size_t>(b) * heads + h] = p;
            y.block(b * T, h * hs, T, hs) = p * vh;
        }
    }
    bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
    return t.push(std::move(y), ng, nullptr,
                  [iq, ik, iv, batch, heads, T, hs, scale, probs = std::move(probs)](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      Mat dq = Mat::Zero(g.rows(), g.cols());
                      Mat dk = Mat::Zero(g.rows(), g.cols());
                      Mat dv = Mat::Zero(g.rows(), g.cols());
                      for (int b = 0; b < batch; ++b) {
                          for (int h = 0; h < heads; ++h) {
                              const Mat& p = probs[static_cast<std::size_t>(b) * heads + h];
                              auto qh = t.value(iq).block(b * T, h * hs, T, hs);
                              auto kh = t.value(ik).block(b * T, h * hs, T, hs);
                              auto vh = t.value(iv).block(b * T, h * hs, T, hs);
                              auto gh = g.block(b * T, h * hs, T, hs);
                              dv.block(b * T, h * hs, T, hs) = p.transpose() * gh;
                              Mat dp = gh * vh.transpose();
                              Eigen::ArrayXd dot = dp.cwiseProduct(p).rowwise().sum().array();
                              Mat ds = ((dp.array().colwise() - dot) * p.array()).matrix() * scale;
                              dq.block(b * T, h * hs, T, hs) = ds * kh;
                              dk.block(b * T, h * hs, T, hs) = ds.transpose() * qh;
                          }
                      }
                      t.accum(iq, dq);
                      t.accum(ik, dk);
                      t.accum(iv, dv);
                  });
}

// Coordinatewise max over the given row groups -> [n_groups, d]. Ties go to
// the earliest row, which keeps the backward pass deterministic.
inline Var maxpool_groups(const Var& a, std::vector<std::vector<int>> groups) {
    Tape& t = *a.tape();
    const int ia = a.node();
    const long d = a.cols();
    Mat y(static_cast<long>(groups.size()), d);
    Eigen::MatrixXi argmax(static_cast<long>(groups.size()), d);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        detail::require(!groups[gi].empty(), "maxpool_groups: empty pool");
        for (long c = 0; c < d; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            int arg = -1;
            for (int r : groups[gi]) {
                detail::require(r >= 0 && r < a.rows(), "maxpool_groups: row out of range");
                const double x = a.value()(r, c);
                if (x > best) {
                    best = x;
                    arg = r;
                }
            }
            y(static_cast<long>(gi), c) = best;
            argmax(static_cast<long>(gi), c) = arg;
        }
    }
    return t.push(std::move(y), t.needs_grad(a), nullptr,
                  [ia, argmax = std::move(argmax)](Tape& t, int out) {
                      const Mat& g = t.node_grad(out);
                      Mat da = Mat::Zero(t.value(ia).rows(), t.value(ia).cols());
                      for (long r = 0; r < g.rows(); ++r) {
                          for (long c = 0; c < g.cols(); ++c) {
                              da(argmax(r, c), c) += g(r, c);
                          }
                      }
                      t.accum(ia, da);
                  });
}

// Mean cross entropy of row-wise softmax vs integer labels -> [1, 1].
inline Var softmax_xent(const Var& logits, std::vector<int> labels) {
    Tape& t = *logits.tape();
    const int il = logits.node();
    detail::require(static_cast<long>(labels.size()) == logits.rows(),
                    "softmax_xent: one label per row");
    Mat p = logits.value();
    double loss = 0.0;
    for (long r = 0; r < p.rows(); ++r) {
        detail::require(labels[r] >= 0 && labels[r] < p.cols(), "softmax_xent: label out of range");
        p.row(r).array() -= p.row(r).maxCoeff();
        const double lse = std::log(p.row(r).array().exp().sum());
        loss -= p(r, labels[r]) - lse;
        p.row(r) = (p.row(r).array() - lse).exp();
    }
    Mat y(1, 1);
    y(0, 0) = loss / static_cast<double>(p.rows());
    return t.push(std::move(y), t.needs_grad(logits), nullptr,
                  [il, p = std::move(p), labels = std::move(labels)](Tape& t, int out) {
                      const double g = t.node_grad(out)(0, 0) / static_cast<double>(p.rows());
                      Mat dl = p * g;
                      for (long r = 0; r < dl.rows(); ++r) {
                          dl(r, labels[r]) -= g;
                      }
                      t.accum(il, dl);
                  });
}

} // namespace sct::ad

