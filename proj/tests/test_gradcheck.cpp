#include <doctest.h>

#include <set>
#include "anyseg/gradcheck.hpp"
#include "anyseg/rng.hpp"

using namespace anyseg;
using namespace anyseg::ad;

using DT = Tensor<double>;

TEST_CASE("grad_check on f(x) = sum(x) is exact") {
    DT x = DT::from_values({4}, {0.3, -0.7, 1.1, 2.0});
    auto res = grad_check<double>([](const DT& t) { return sum_all(t); }, x, 1e-5);
    CHECK(res.max_rel_err < 1e-10);
}

TEST_CASE("grad_check of softmax cross-entropy on random 3-class logits") {
    Rng rng(11);
    for (int t = 0; t < 10; ++t) {
        std::vector<double> v(3);
        for (auto& e : v) e = rng.uniform(-2.0, 2.0);
        DT logits = DT::from_values({3}, v);
        const int label = static_cast<int>(rng.uniform_int(3));
        auto f = [label](const DT& x) {
            DT logp = log_softmax(x, 0);
            std::vector<double> onehot(3, 0.0);
            onehot[label] = 1.0;
            DT mask = DT::from_values({3}, onehot);
            return scalar_scale(sum_all(mul(mask, logp)), -1.0);
        };
        auto res = grad_check<double>(f, logits, 1e-5);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("grad_check of KL(softmax(x) || fixed target)") {
    Rng rng(13);
    std::vector<double> tv(4);
    for (auto& e : tv) e = rng.uniform(0.1, 1.0);
    double z = tv[0] + tv[1] + tv[2] + tv[3];
    for (auto& e : tv) e /= z;
    DT target = DT::from_values({4}, tv);

    std::vector<double> xv(4);
    for (auto& e : xv) e = rng.uniform(-1.5, 1.5);
    DT x = DT::from_values({4}, xv);

    auto f = [target](const DT& t) {
        DT p = softmax(t, 0);
        DT diff = sub(log_clamped(p), log_clamped(target));
        return sum_all(mul(p, diff));
    };
    auto res = grad_check<double>(f, x, 1e-5);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("grad_check of cosine similarity including near-parallel operands") {
    Rng rng(17);
    std::vector<double> cv(6);
    for (auto& e : cv) e = rng.uniform(-1.0, 1.0);
    DT c = DT::from_values({6}, cv);

    auto f = [c](const DT& x) { return cosine_similarity(x, c, 0); };

    std::vector<double> xv(6);
    for (auto& e : xv) e = rng.uniform(-1.0, 1.0);
    auto res = grad_check<double>(f, DT::from_values({6}, xv), 1e-5);
    CHECK(res.max_rel_err < 1e-4);

    // near-parallel: x = 2c + tiny perturbation
    std::vector<double> pv(6);
    for (int i = 0; i < 6; ++i) pv[i] = 2.0 * cv[i] + rng.uniform(-1e-3, 1e-3);
    res = grad_check<double>(f, DT::from_values({6}, pv), 1e-5);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("grad_check reports non-finite probes with the coordinate") {
    DT x = DT::from_values({2}, {1.0, 1.0});
    auto f = [](const DT& t) {
        // log of a plain buffer value; goes -inf... emulate via 1/x blowup instead:
        // use log_clamped on (x - 1) so the base point is at the clamp floor; still finite.
        return sum_all(log_clamped(t));
    };
    CHECK_NOTHROW(grad_check<double>(f, x, 1e-5));

    auto bad = [](const DT& t) {
        double v = t.values()[0];
        return DT::scalar(std::sqrt(v - 2.0));  // NaN once the probe crosses 2
    };
    DT near = DT::from_values({1}, {2.0});
    try {
        grad_check<double>(bad, near, 1e-5);
        FAIL("expected throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("coordinate") != std::string::npos);
    }
}

TEST_CASE("every op kind passes the finite-difference battery") {
    auto reports = check_all_ops(20250809, 5);
    // all 18 kinds covered, two-operand kinds in both slots
    std::set<OpKind> seen;
    for (const auto& r : reports) {
        CAPTURE(op_kind_name(r.kind));
        CAPTURE(r.operand_slot);
        CHECK(r.max_rel_err < 1e-4);
        seen.insert(r.kind);
    }
    CHECK(seen.size() == all_op_kinds().size());
}
