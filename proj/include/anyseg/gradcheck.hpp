#pragma once

#include <cmath>
#include <functional>

#include "anyseg/ops.hpp"
#include "anyseg/rng.hpp"
#include "anyseg/tensor.hpp"

namespace anyseg::ad {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t worst_coordinate = -1;
};

// Central-difference oracle for d(f)/d(point). f must be a deterministic
// scalar-valued function built from the ops above; evaluation runs at
// whatever precision the point carries (use double for 1e-4 tolerances).
//
// Per-coordinate error is |analytic - numeric| / max(1, |numeric|).
template <typename S, typename F>
GradCheckResult grad_check(F&& f, const Tensor<S>& point, double step = 1e-5) {
    if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");

    auto eval_scalar = [&](const Tensor<S>& x, int64_t coord) -> double {
        Graph<S> scratch;  // discard any recording triggered by captured parameters
        auto scope = scratch.activate();
        Tensor<S> y = f(x);
        if (!y.is_scalar()) {
            throw std::invalid_argument("grad_check: function must return a scalar, got " + shape_str(y.shape()));
        }
        const double v = static_cast<double>(y.item());
        if (!std::isfinite(v)) {
            throw std::runtime_error("grad_check: non-finite function value at coordinate " + std::to_string(coord));
        }
        return v;
    };

    // analytic gradient
    Tensor<S> leaf = point.clone_detached();
    leaf.set_requires_grad(true);
    std::vector<S> analytic;
    {
        Graph<S> graph;
        auto scope = graph.activate();
        Tensor<S> loss = f(leaf);
        if (!loss.is_scalar()) {
            throw std::invalid_argument("grad_check: function must return a scalar, got " + shape_str(loss.shape()));
        }
        if (!std::isfinite(static_cast<double>(loss.item()))) {
            throw std::runtime_error("grad_check: non-finite function value at base point");
        }
        // a loss that never touched the tape is constant w.r.t. the ops;
        // finite differences below still expose any hidden dependence
        if (graph.contains(loss)) graph.backward(loss);
        analytic = leaf.has_grad() ? leaf.grad() : std::vector<S>(leaf.size(), S(0));
    }

    // central differences, one coordinate at a time
    GradCheckResult result;
    Tensor<S> probe = point.clone_detached();
    for (int64_t i = 0; i < probe.size(); ++i) {
        const S saved = probe.values()[i];
        probe.values()[i] = saved + static_cast<S>(step);
        const double fp = eval_scalar(probe, i);
        probe.values()[i] = saved - static_cast<S>(step);
        const double fm = eval_scalar(probe, i);
        probe.values()[i] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
        if (err > result.max_rel_err) {
            result.max_rel_err = err;
            result.worst_coordinate = i;
        }
    }
    return result;
}

struct OpCheckReport {
    OpKind kind;
    int operand_slot;
    double max_rel_err;
};

// Runs grad_check for every differentiable operation kind on `trials` random
// small inputs per operand slot. Weighted-sum readout so permutation errors
// in a VJP cannot cancel.
std::vector<OpCheckReport> check_all_ops(uint64_t seed, int trials);

}  // namespace anyseg::ad
