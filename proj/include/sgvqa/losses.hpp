#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgvqa/tensor.hpp"

namespace sgvqa {

enum class Variant { baseline, local, global, selfsim };

inline std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::baseline: return "baseline";
        case Variant::local: return "local";
        case Variant::global: return "global";
        case Variant::selfsim: return "selfsim";
    }
    return "?";
}

inline Variant variant_from_string(std::string_view s) {
    for (auto v : {Variant::baseline, Variant::local, Variant::global, Variant::selfsim})
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::baseline, "baseline"},
                                       {Variant::local, "local"},
                                       {Variant::global, "global"},
                                       {Variant::selfsim, "selfsim"}})

struct LossConfig {
    Variant variant = Variant::selfsim;
    bool link_reg = false;
    double alpha = 1.0;
    double beta = 1.0;
    double tau = 0.1;
    // Ablation switches. Turning both off gives the collapse-prone setup.
    bool stop_gradient = true;
    bool predictor = true;

    /// Throws std::invalid_argument naming the offending field.
    void validate(const std::string& prefix = "") const {
        auto fail = [&](const std::string& field, const std::string& msg) {
            throw std::invalid_argument(prefix + field + ": " + msg);
        };
        if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha", "must be a finite value >= 0");
        if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta", "must be a finite value >= 0");
        if (!(tau > 0.0) || !std::isfinite(tau)) fail("tau", "must be > 0");
        if (variant == Variant::baseline && beta != 0.0) fail("beta", "variant=baseline requires beta = 0");
        if (alpha == 0.0 && beta == 0.0) fail("alpha", "alpha and beta are both zero");
    }

    /// True when any two-view term enters the objective. The link regularizer
    /// is weighted by beta, so it is inert for the baseline.
    bool similarity() const { return variant != Variant::baseline && beta != 0.0; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossConfig, variant, link_reg, alpha, beta, tau, stop_gradient,
                                                predictor)

inline constexpr double kLogGuard = 1e-12;

/// Pairwise cosine distance matrix, D[i][j] = 1 - cos(a_i, b_j).
template <class T>
BasicTensor<T> cosine_distance_matrix(BasicTape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.cols() != b.cols()) throw ShapeError("cosine distance width mismatch");
    auto cos = tape.matmul(tape.l2_normalize(a), tape.l2_normalize(b), true);
    return tape.shift(tape.scale(cos, T(-1)), T(1));
}

/// D(a, b) = 1 - cos(a, b) for two row vectors.
template <class T>
BasicTensor<T> cosine_distance(BasicTape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rows() != 1 || b.rows() != 1) throw ShapeError("cosine_distance expects row vectors");
    return cosine_distance_matrix(tape, a, b);
}

namespace detail {

/// Sum of a column vector accumulated in ascending value order, so the result
/// does not depend on the row order of the input.
template <class T>
BasicTensor<T> ordered_sum(BasicTape<T>& tape, const BasicTensor<T>& col) {
    std::vector<std::size_t> order(col.rows());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return col(a, 0) < col(b, 0); });
    return tape.sum(tape.gather_rows(col, order));
}

/// L*(p, z) = mean_i min_j D(p_i, z_j).
template <class T>
BasicTensor<T> one_sided_local(BasicTape<T>& tape, const BasicTensor<T>& p, const BasicTensor<T>& z) {
    auto d = cosine_distance_matrix(tape, p, z);
    auto mins = tape.scale(tape.max(tape.scale(d, T(-1)), Axis::cols), T(-1));  // O_p x 1
    return tape.scale(ordered_sum(tape, mins), T(1) / static_cast<T>(p.rows()));
}

}  // namespace detail

/// 1/2 (L*(p1, z2) + L*(p2, z1)). The z arguments are expected detached.
template <class T>
BasicTensor<T> local_loss(BasicTape<T>& tape, const BasicTensor<T>& p1, const BasicTensor<T>& z2,
                          const BasicTensor<T>& p2, const BasicTensor<T>& z1) {
    if (!p1.defined() || !z2.defined() || !p2.defined() || !z1.defined()) throw ShapeError("local_loss: empty node set");
    if (p1.rows() != z1.rows() || p2.rows() != z2.rows()) throw ShapeError("local_loss: view row counts disagree");
    return tape.scale(tape.add(detail::one_sided_local(tape, p1, z2), detail::one_sided_local(tape, p2, z1)), T(0.5));
}

/// 1/2 (D(p1, z2) + D(p2, z1)).
template <class T>
BasicTensor<T> global_loss(BasicTape<T>& tape, const BasicTensor<T>& p1, const BasicTensor<T>& z2,
                           const BasicTensor<T>& p2, const BasicTensor<T>& z1) {
    return tape.scale(tape.add(cosine_distance(tape, p1, z2), cosine_distance(tape, p2, z1)), T(0.5));
}

/// J(z1, z2): mean row-wise cross entropy between the off-diagonal similarity
/// distributions of the anchor (target, detached here) and the augmented
/// view. Rows of z1 and z2 must describe the same objects in the same order.
template <class T>
BasicTensor<T> selfsim_reg(BasicTape<T>& tape, const BasicTensor<T>& z1, const BasicTensor<T>& z2, double tau,
                           bool detach_anchor = true) {
    const std::size_t n = z1.rows();
    if (n < 2) throw std::invalid_argument("selfsim needs at least two aligned nodes");
    if (z2.rows() != n) throw ShapeError("selfsim views must be aligned row for row");
    if (!(tau > 0.0)) throw std::invalid_argument("selfsim temperature must be > 0");
    std::vector<std::uint8_t> off(n * n, 1);
    for (std::size_t i = 0; i < n; ++i) off[i * n + i] = 0;
    const T k = T(-1) / static_cast<T>(tau);
    auto anchor = detach_anchor ? detach(z1) : z1;
    auto s1 = tape.softmax(tape.scale(cosine_distance_matrix(tape, anchor, anchor), k), &off);
    auto log_s2 = tape.log_softmax(tape.scale(cosine_distance_matrix(tape, z2, z2), k), &off);
    return tape.scale(tape.sum(tape.mul(s1, log_s2)), T(-1) / static_cast<T>(n));
}

/// L_s = local loss + J on the aligned node rows.
template <class T>
BasicTensor<T> selfsim_loss(BasicTape<T>& tape, const BasicTensor<T>& p1, const BasicTensor<T>& z2,
                            const BasicTensor<T>& p2, const BasicTensor<T>& z1, double tau) {
    return tape.add(local_loss(tape, p1, detach(z2), p2, detach(z1)), selfsim_reg(tape, z1, z2, tau));
}

/// -(1/E) sum_e sum_k r1_ek log(r2_ek + 1e-12), r1 the (detached) anchor rows.
template <class T>
BasicTensor<T> link_reg(BasicTape<T>& tape, const BasicTensor<T>& r1, const BasicTensor<T>& r2, bool detach_anchor = true) {
    if (!r1.defined() || !r2.defined()) throw std::invalid_argument("link_reg: no aligned edges between views");
    if (r1.shape() != r2.shape()) throw ShapeError("link_reg: edge rows are not aligned");
    auto target = detach_anchor ? detach(r1) : r1;
    auto lg = tape.log(tape.shift(r2, static_cast<T>(kLogGuard)));
    return tape.scale(tape.sum(tape.mul(target, lg)), T(-1) / static_cast<T>(r1.rows()));
}

/// Mean of -log softmax(logits)[answer] over rows.
template <class T>
BasicTensor<T> supervised_loss(BasicTape<T>& tape, const BasicTensor<T>& logits, std::span<const std::size_t> answers) {
    return tape.softmax_cross_entropy(logits, answers);
}

/// One item of a two-view batch. View 1 is the anchor.
template <class T>
struct BasicDualViewItem {
    BasicTensor<T> z1, z2;  // node embeddings
    BasicTensor<T> p1, p2;  // node predictor outputs
    BasicTensor<T> g1, g2;  // graph vectors
    BasicTensor<T> h1, h2;  // graph predictor outputs
    std::vector<std::pair<std::size_t, std::size_t>> node_pairs;  // aligned (row in z1, row in z2)
    BasicTensor<T> r1, r2;  // aligned edge score rows, undefined when no edges align
    BasicTensor<T> logits;  // anchor classifier output, 1 x answers
    std::size_t answer = 0;
};

template <class T>
struct BasicLossParts {
    BasicTensor<T> total;
    double sup = 0.0;
    double prime = 0.0;
    double link = 0.0;
};

using DualViewItem = BasicDualViewItem<double>;
using LossParts = BasicLossParts<double>;

/// Stop-gradient targets captured once and replayed on later evaluations, so
/// finite differences see the same constants the analytic gradient treats as
/// constants.
template <class T>
struct BasicFrozenTargets {
    std::vector<BasicTensor<T>> values;
    bool replay = false;
    std::size_t next = 0;
};

/// alpha * mean L_sup + beta * mean (L' + J_e). Terms with zero weight are
/// left out of the graph entirely.
template <class T>
BasicLossParts<T> total_loss(BasicTape<T>& tape, const LossConfig& cfg, const std::vector<BasicDualViewItem<T>>& batch,
                             BasicFrozenTargets<T>* frozen = nullptr) {
    cfg.validate();
    if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
    if (frozen) frozen->next = 0;
    auto sg = [&](const BasicTensor<T>& t) -> BasicTensor<T> {
        if (!cfg.stop_gradient) return t;
        if (!frozen) return detach(t);
        if (!frozen->replay) {
            frozen->values.push_back(detach(t));
            return frozen->values.back();
        }
        return frozen->values.at(frozen->next++);
    };
    BasicLossParts<T> parts;
    std::vector<BasicTensor<T>> terms;

    if (cfg.alpha != 0.0) {
        std::vector<BasicTensor<T>> rows;
        std::vector<std::size_t> answers;
        for (const auto& it : batch) {
            rows.push_back(it.logits);
            answers.push_back(it.answer);
        }
        auto sup = supervised_loss(tape, tape.concat(std::span<const BasicTensor<T>>(rows), Axis::rows), answers);
        parts.sup = static_cast<double>(sup.item());
        terms.push_back(tape.scale(sup, static_cast<T>(cfg.alpha)));
    }

    if (cfg.similarity()) {
        std::vector<BasicTensor<T>> prime, link;
        for (const auto& it : batch) {
            switch (cfg.variant) {
                case Variant::local: prime.push_back(local_loss(tape, it.p1, sg(it.z2), it.p2, sg(it.z1))); break;
                case Variant::global: prime.push_back(global_loss(tape, it.h1, sg(it.g2), it.h2, sg(it.g1))); break;
                case Variant::selfsim: {
                    auto l = local_loss(tape, it.p1, sg(it.z2), it.p2, sg(it.z1));
                    if (it.node_pairs.size() >= 2) {
                        std::vector<std::size_t> a, b;
                        for (auto [i, j] : it.node_pairs) a.push_back(i), b.push_back(j);
                        l = tape.add(l, selfsim_reg(tape, sg(tape.gather_rows(it.z1, a)), tape.gather_rows(it.z2, b),
                                                    cfg.tau, false));
                    }
                    prime.push_back(l);
                    break;
                }
                case Variant::baseline: break;
            }
            if (cfg.link_reg && it.r1.defined()) link.push_back(link_reg(tape, sg(it.r1), it.r2, false));
        }
        auto mean_of = [&](std::vector<BasicTensor<T>>& v) {
            auto s = tape.sum(tape.concat(std::span<const BasicTensor<T>>(v), Axis::rows));
            return tape.scale(s, T(1) / static_cast<T>(v.size()));
        };
        auto lp = mean_of(prime);
        parts.prime = static_cast<double>(lp.item());
        if (!link.empty()) {
            auto je = mean_of(link);
            parts.link = static_cast<double>(je.item());
            lp = tape.add(lp, je);
        }
        terms.push_back(tape.scale(lp, static_cast<T>(cfg.beta)));
    }
    parts.total = terms.size() == 1 ? terms[0] : tape.add(terms[0], terms[1]);
    return parts;
}

}  // namespace sgvqa
