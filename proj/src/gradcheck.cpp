#include "anyseg/gradcheck.hpp"

#include "anyseg/rng.hpp"

namespace anyseg::ad {

namespace {

using DTensor = Tensor<double>;

DTensor rand_tensor(Rng& rng, Shape shape, double lo, double hi) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return DTensor::from_values(std::move(shape), std::move(v));
}

// uniform magnitude in [0.1, 1.5] with random sign, away from the relu kink
DTensor rand_tensor_off_zero(Rng& rng, Shape shape) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) {
        const double mag = rng.uniform(0.1, 1.5);
        x = rng.next_u64() & 1 ? mag : -mag;
    }
    return DTensor::from_values(std::move(shape), std::move(v));
}

// sum(out .* W) with W a fixed random weighting, so every output position
// contributes with a distinct coefficient
DTensor readout(const DTensor& out, const DTensor& w) {
    return sum_all(mul(out, w));
}

}  // namespace

std::vector<OpCheckReport> check_all_ops(uint64_t seed, int trials) {
    Rng rng(seed);
    std::vector<OpCheckReport> reports;

    // op applied to `point` in the given operand slot, other operands fixed
    auto run = [&](OpKind kind, int slot, auto make_case) {
        double worst = 0.0;
        for (int t = 0; t < trials; ++t) {
            auto [f, point] = make_case(rng);
            const auto res = grad_check<double>(f, point, 1e-5);
            worst = std::max(worst, res.max_rel_err);
        }
        reports.push_back({kind, slot, worst});
    };

    auto weights_for = [](Rng& r, const DTensor& sample_out) {
        std::vector<double> w(static_cast<size_t>(sample_out.size()));
        for (auto& x : w) x = r.uniform(-1.0, 1.0);
        return DTensor::from_values(sample_out.shape(), std::move(w));
    };

    using Case = std::pair<std::function<DTensor(const DTensor&)>, DTensor>;

    run(OpKind::Matmul, 0, [&](Rng& r) -> Case {
        DTensor b = rand_tensor(r, {4, 2}, -1.5, 1.5);
        DTensor point = rand_tensor(r, {3, 4}, -1.5, 1.5);
        DTensor w = weights_for(r, matmul(point, b));
        return {[b, w](const DTensor& x) { return readout(matmul(x, b), w); }, point};
    });
    run(OpKind::Matmul, 1, [&](Rng& r) -> Case {
        DTensor a = rand_tensor(r, {3, 4}, -1.5, 1.5);
        DTensor point = rand_tensor(r, {4, 2}, -1.5, 1.5);
        DTensor w = weights_for(r, matmul(a, point));
        return {[a, w](const DTensor& x) { return readout(matmul(a, x), w); }, point};
    });

    for (int slot = 0; slot < 2; ++slot) {
        for (OpKind kind : {OpKind::Add, OpKind::Sub, OpKind::Mul}) {
            run(kind, slot, [&, kind, slot](Rng& r) -> Case {
                DTensor other = rand_tensor(r, {2, 3, 2}, -1.5, 1.5);
                DTensor point = rand_tensor(r, {2, 3, 2}, -1.5, 1.5);
                DTensor w = weights_for(r, point);
                auto f = [kind, slot, other, w](const DTensor& x) {
                    const DTensor& a = slot == 0 ? x : other;
                    const DTensor& b = slot == 0 ? other : x;
                    std::vector<DTensor> ops = {a, b};
                    return readout(forward_op<double>(kind, ops), w);
                };
                return {f, point};
            });
        }
    }

    run(OpKind::ScalarScale, 0, [&](Rng& r) -> Case {
        const double c = r.uniform(-2.0, 2.0);
        DTensor point = rand_tensor(r, {3, 3}, -1.5, 1.5);
        DTensor w = weights_for(r, point);
        return {[c, w](const DTensor& x) { return readout(scalar_scale(x, c), w); }, point};
    });

    run(OpKind::Relu, 0, [&](Rng& r) -> Case {
        DTensor point = rand_tensor_off_zero(r, {3, 5});
        DTensor w = weights_for(r, point);
        return {[w](const DTensor& x) { return readout(relu(x), w); }, point};
    });

    run(OpKind::Gelu, 0, [&](Rng& r) -> Case {
        DTensor point = rand_tensor(r, {3, 5}, -2.0, 2.0);
        DTensor w = weights_for(r, point);
        return {[w](const DTensor& x) { return readout(gelu(x), w); }, point};
    });

    for (OpKind kind : {OpKind::MeanAxes, OpKind::SumAxes}) {
        run(kind, 0, [&, kind](Rng& r) -> Case {
            DTensor point = rand_tensor(r, {2, 3, 4}, -1.5, 1.5);
            std::vector<int> axes;
            for (int d = 0; d < 3; ++d) {
                if (r.next_u64() & 1) axes.push_back(d);
            }
            OpAttrs attrs;
            attrs.axes = axes;  // empty means reduce everything
            std::vector<DTensor> ops = {point};
            DTensor w = weights_for(r, forward_op<double>(kind, ops, attrs));
            auto f = [kind, attrs, w](const DTensor& x) {
                std::vector<DTensor> o = {x};
                return readout(forward_op<double>(kind, o, attrs), w);
            };
            return {f, point};
        });
    }

    run(OpKind::Reshape, 0, [&](Rng& r) -> Case {
        DTensor point = rand_tensor(r, {2, 3, 4}, -1.5, 1.5);
        DTensor w = weights_for(r, reshape(point, {3, 8}));
        return {[w](const DTensor& x) { return readout(reshape(x, {3, 8}), w); }, point};
    });

    run(OpKind::Transpose, 0, [&](Rng& r) -> Case {
        DTensor point = rand_tensor(r, {2, 3, 4}, -1.5, 1.5);
        std::vector<int> perm = {0, 1, 2};
        r.shuffle(perm);
        DTensor w = weights_for(r, transpose(point, perm));
        return {[w, perm](const DTensor& x) { return readout(transpose(x, perm), w); }, point};
    });

    for (int slot = 0; slot < 2; ++slot) {
        run(OpKind::Concat, slot, [&, slot](Rng& r) -> Case {
            const int axis = static_cast<int>(r.uniform_int(2));
            DTensor other = rand_tensor(r, {2, 3}, -1.5, 1.5);
            DTensor point = rand_tensor(r, {2, 3}, -1.5, 1.5);
            DTensor w = weights_for(r, concat<double>({other, other}, axis));
            auto f = [slot, axis, other, w](const DTensor& x) {
                std::vector<DTensor> xs = slot == 0 ? std::vector<DTensor>{x, other} : std::vector<DTensor>{other, x};
                return readout(concat(xs, axis), w);
            };
            return {f, point};
        });
    }

    for (OpKind kind : {OpKind::Softmax, OpKind::LogSoftmax}) {
        run(kind, 0, [&, kind](Rng& r) -> Case {
            const int axis = static_cast<int>(r.uniform_int(2));
            DTensor point = rand_tensor(r, {3, 5}, -2.0, 2.0);
            DTensor w = weights_for(r, point);
            OpAttrs attrs;
            attrs.axis = axis;
            auto f = [kind, attrs, w](const DTensor& x) {
                std::vector<DTensor> o = {x};
                return readout(forward_op<double>(kind, o, attrs), w);
            };
            return {f, point};
        });
    }

    run(OpKind::LogClamped, 0, [&](Rng& r) -> Case {
        DTensor point = rand_tensor(r, {3, 5}, 0.1, 2.0);
        DTensor w = weights_for(r, point);
        return {[w](const DTensor& x) { return readout(log_clamped(x), w); }, point};
    });

    run(OpKind::NearestUpsample2d, 0, [&](Rng& r) -> Case {
        DTensor point = rand_tensor(r, {2, 3, 2}, -1.5, 1.5);
        DTensor w = weights_for(r, upsample_nearest(point, 2));
        return {[w](const DTensor& x) { return readout(upsample_nearest(x, 2), w); }, point};
    });

    run(OpKind::PatchMerge2d, 0, [&](Rng& r) -> Case {
        DTensor point = rand_tensor(r, {4, 4, 2}, -1.5, 1.5);
        DTensor w = weights_for(r, patch_merge(point, 2));
        return {[w](const DTensor& x) { return readout(patch_merge(x, 2), w); }, point};
    });

    for (int slot = 0; slot < 2; ++slot) {
        run(OpKind::CosineSimilarity, slot, [&, slot](Rng& r) -> Case {
            DTensor other = rand_tensor(r, {4, 3}, -1.5, 1.5);
            DTensor point = rand_tensor(r, {4, 3}, -1.5, 1.5);
            DTensor w = weights_for(r, cosine_similarity(point, other, 0));
            auto f = [slot, other, w](const DTensor& x) {
                const DTensor& a = slot == 0 ? x : other;
                const DTensor& b = slot == 0 ? other : x;
                return readout(cosine_similarity(a, b, 0), w);
            };
            return {f, point};
        });
    }

    return reports;
}

}  // namespace anyseg::ad
