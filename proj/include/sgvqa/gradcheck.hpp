#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sgvqa/rng.hpp"
#include "sgvqa/tensor.hpp"

namespace sgvqa {

template <class T>
struct BasicNamedTensor {
    std::string name;
    BasicTensor<T> tensor;
};
using NamedTensor = BasicNamedTensor<double>;
using XNamedTensor = BasicNamedTensor<long double>;

struct ParamGradReport {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t coords_checked = 0;
};

struct GradCheckReport {
    double eps = 0.0;
    std::vector<ParamGradReport> params;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& p : params) m = std::max(m, p.max_rel_err);
        return m;
    }
};

struct GradCheckOptions {
    /// 0 checks every coordinate; otherwise a deterministic sample per tensor.
    std::size_t max_coords_per_param = 0;
    std::uint64_t sample_seed = 0;
    /// Applied to each analytic gradient before comparison (bug injection in tests).
    std::function<void(std::size_t param_index, std::span<double> grad)> tamper;
};

/// A scalar function of the parameters, built on the tape it is given.
using LossFn = std::function<Tensor(Tape&)>;
using XLossFn = std::function<XTensor(XTape&)>;

namespace detail {

template <class T>
GradCheckReport finite_diff_check(const std::function<BasicTensor<T>(BasicTape<T>&)>& fn,
                                  std::vector<BasicNamedTensor<T>> params, double eps, const GradCheckOptions& opts) {
    if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("finite_diff_check: eps must be in [1e-7, 1e-3]");
    auto value = [&] {
        BasicTape<T> tape;
        const T v = fn(tape).item();
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
        return v;
    };

    for (auto& p : params) p.tensor.zero_grad();
    {
        BasicTape<T> tape;
        BasicTensor<T> loss = fn(tape);
        if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: loss is not finite");
        tape.backward(loss);
    }

    GradCheckReport report;
    report.eps = eps;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        BasicTensor<T>& t = params[pi].tensor;
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        if (opts.tamper) opts.tamper(pi, analytic);

        std::vector<std::size_t> coords(t.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (opts.max_coords_per_param && coords.size() > opts.max_coords_per_param) {
            Rng rng = Rng::stream(opts.sample_seed, "gradcheck-coords", pi);
            rng.shuffle(coords);
            coords.resize(opts.max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }

        ParamGradReport pr{params[pi].name, 0.0, 0.0, coords.size()};
        auto data = t.data();
        for (std::size_t c : coords) {
            const T orig = data[c];
            const T h = static_cast<T>(eps);
            data[c] = orig + h;
            const T up = value();
            data[c] = orig - h;
            const T down = value();
            data[c] = orig;
            const T numeric_t = (up - down) / (2 * h);
            const double numeric = static_cast<double>(numeric_t);
            const double abs_err = static_cast<double>(std::abs(static_cast<T>(analytic[c]) - numeric_t));
            const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), 1e-8});
            pr.max_abs_err = std::max(pr.max_abs_err, abs_err);
            pr.max_rel_err = std::max(pr.max_rel_err, abs_err / denom);
        }
        report.params.push_back(pr);
    }
    return report;
}

}  // namespace detail

/// Compares backward() against central differences coordinate by coordinate.
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
inline GradCheckReport finite_diff_check(const LossFn& fn, std::vector<NamedTensor> params, double eps,
                                         const GradCheckOptions& opts = {}) {
    return detail::finite_diff_check<double>(fn, std::move(params), eps, opts);
}

/// Same check carried out in extended precision, which keeps the
/// finite-difference roundoff well below gradients of order 1e-8.
inline GradCheckReport finite_diff_check(const XLossFn& fn, std::vector<XNamedTensor> params, double eps,
                                         const GradCheckOptions& opts = {}) {
    return detail::finite_diff_check<long double>(fn, std::move(params), eps, opts);
}

}  // namespace sgvqa
