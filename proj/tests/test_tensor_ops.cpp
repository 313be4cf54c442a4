#include <doctest.h>

#include <cstring>

#include "anyseg/ops.hpp"
#include "anyseg/rng.hpp"
#include "anyseg/tensor.hpp"

using namespace anyseg;
using namespace anyseg::ad;

using FT = Tensor<float>;
using DT = Tensor<double>;

TEST_CASE("tensor construction and invariants") {
    FT t = FT::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.shape() == Shape{2, 3});
    CHECK_THROWS_AS(FT::from_values({2, 3}, {1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(FT::zeros({0, 3}), std::invalid_argument);

    FT s = FT::scalar(4.0f);
    CHECK(s.is_scalar());
    CHECK(s.item() == 4.0f);
    CHECK(s.rank() == 0);
}

TEST_CASE("matmul of all-ones 2x3 and 3x4 gives 2x4 of 3") {
    FT a = FT::filled({2, 3}, 1.0f);
    FT b = FT::filled({3, 4}, 1.0f);
    FT c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 4});
    for (float v : c.values()) CHECK(v == doctest::Approx(3.0f));
}

TEST_CASE("matmul rejects mismatched shapes with a diagnostic") {
    FT a = FT::filled({2, 3}, 1.0f);
    FT b = FT::filled({4, 4}, 1.0f);
    try {
        matmul(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("(2, 3)") != std::string::npos);
        CHECK(msg.find("(4, 4)") != std::string::npos);
    }
}

TEST_CASE("softmax of zeros is uniform and rows always sum to 1") {
    FT x = FT::zeros({3});
    FT s = softmax(x, 0);
    for (float v : s.values()) CHECK(v == doctest::Approx(1.0f / 3.0f));

    Rng rng(7);
    for (int t = 0; t < 50; ++t) {
        std::vector<float> v(12);
        for (auto& e : v) e = static_cast<float>(rng.uniform(-8.0, 8.0));
        FT y = softmax(FT::from_values({3, 4}, v), 1);
        for (int r = 0; r < 3; ++r) {
            float sum = 0.0f;
            for (int c = 0; c < 4; ++c) {
                const float p = y.values()[r * 4 + c];
                CHECK(p >= 0.0f);
                sum += p;
            }
            CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
        }
    }
}

TEST_CASE("patch-merge-2d matches a direct index oracle and unmerges exactly") {
    // 4x4x1 grid with distinct values per pixel
    std::vector<float> v(16);
    for (int i = 0; i < 16; ++i) v[i] = static_cast<float>(i);
    FT x = FT::from_values({4, 4, 1}, v);
    FT m = patch_merge(x, 2);
    CHECK(m.shape() == Shape{2, 2, 4});

    // channel 0 must be the top-left subsample
    for (int Y = 0; Y < 2; ++Y)
        for (int X = 0; X < 2; ++X) CHECK(m.values()[(Y * 2 + X) * 4 + 0] == v[(Y * 2) * 4 + (X * 2)]);

    // oracle: independent index arithmetic over the full grid
    for (int Y = 0; Y < 2; ++Y)
        for (int X = 0; X < 2; ++X)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const float expect = v[((Y * 2 + dy) * 4 + (X * 2 + dx)) * 1];
                    CHECK(m.values()[(Y * 2 + X) * 4 + (dy * 2 + dx)] == expect);
                }

    // inverse scatter reproduces the original buffer bit-exactly
    std::vector<float> restored(16, -1.0f);
    for (int Y = 0; Y < 2; ++Y)
        for (int X = 0; X < 2; ++X)
            for (int c = 0; c < 4; ++c) {
                const int dy = c / 2, dx = c % 2;
                restored[((Y * 2 + dy) * 4 + (X * 2 + dx))] = m.values()[(Y * 2 + X) * 4 + c];
            }
    CHECK(std::memcmp(restored.data(), v.data(), sizeof(float) * 16) == 0);
}

TEST_CASE("patch-merge-2d rejects non-divisible extents") {
    FT x = FT::zeros({3, 4, 1});
    CHECK_THROWS_AS(patch_merge(x, 2), std::invalid_argument);
}

TEST_CASE("nearest upsample replicates pixels") {
    FT x = FT::from_values({1, 2, 1}, {1.0f, 2.0f});
    FT u = upsample_nearest(x, 2);
    CHECK(u.shape() == Shape{2, 4, 1});
    CHECK(u.values() == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2});
}

TEST_CASE("concat stitches along the given axis") {
    FT a = FT::from_values({2, 2}, {1, 2, 3, 4});
    FT b = FT::from_values({1, 2}, {5, 6});
    FT c = concat<float>({a, b}, 0);
    CHECK(c.shape() == Shape{3, 2});
    CHECK(c.values() == std::vector<float>{1, 2, 3, 4, 5, 6});

    FT d = concat<float>({a, a}, 1);
    CHECK(d.shape() == Shape{2, 4});
    CHECK(d.values() == std::vector<float>{1, 2, 1, 2, 3, 4, 3, 4});

    CHECK_THROWS_AS(concat<float>({a, b}, 1), std::invalid_argument);
}

TEST_CASE("elementwise ops demand exact shape match") {
    FT a = FT::zeros({2, 3});
    FT b = FT::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(sub(a, b), std::invalid_argument);
    CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
}

TEST_CASE("forward_op dispatch covers every kind and validates arity") {
    FT a = FT::filled({2, 2}, 1.0f);
    std::vector<FT> one = {a};
    std::vector<FT> two = {a, a};

    OpAttrs attrs;
    attrs.axis = 0;
    attrs.factor = 2;
    attrs.shape = {4};
    attrs.perm = {1, 0};
    attrs.axes = {0};
    attrs.scale = 2.0;

    for (OpKind kind : all_op_kinds()) {
        CAPTURE(op_kind_name(kind));
        switch (kind) {
            case OpKind::Matmul:
            case OpKind::Add:
            case OpKind::Sub:
            case OpKind::Mul:
            case OpKind::CosineSimilarity:
                CHECK_NOTHROW(forward_op<float>(kind, std::span<const FT>(two), attrs));
                CHECK_THROWS_AS(forward_op<float>(kind, std::span<const FT>(one), attrs), std::invalid_argument);
                break;
            case OpKind::PatchMerge2d:
            case OpKind::NearestUpsample2d: {
                FT grid = FT::filled({2, 2, 1}, 1.0f);
                std::vector<FT> g = {grid};
                CHECK_NOTHROW(forward_op<float>(kind, std::span<const FT>(g), attrs));
                break;
            }
            default:
                CHECK_NOTHROW(forward_op<float>(kind, std::span<const FT>(one), attrs));
                break;
        }
    }
    CHECK(parse_op_kind("softmax-over-axis") == OpKind::Softmax);
    CHECK(!parse_op_kind("not-an-op").has_value());
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2x") {
    DT x = DT::from_values({3}, {1.0, 2.0, 3.0});
    x.set_requires_grad(true);
    {
        Graph<double> g;
        auto scope = g.activate();
        DT loss = sum_all(x);
        g.backward(loss);
        CHECK(x.grad() == std::vector<double>{1.0, 1.0, 1.0});
    }
    x.clear_grad();
    {
        Graph<double> g;
        auto scope = g.activate();
        DT loss = sum_all(mul(x, x));
        g.backward(loss);
        CHECK(x.grad() == std::vector<double>{2.0, 4.0, 6.0});
    }
}

TEST_CASE("backward sums gradients over fan-out") {
    DT x = DT::from_values({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Graph<double> g;
    auto scope = g.activate();
    DT loss = sum_all(add(x, x));
    g.backward(loss);
    CHECK(x.grad() == std::vector<double>{2.0, 2.0});
}

TEST_CASE("backward rejects non-scalar loss and foreign tensors") {
    DT x = DT::from_values({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Graph<double> g;
    auto scope = g.activate();
    DT y = add(x, x);
    CHECK_THROWS_AS(g.backward(y), std::invalid_argument);

    Graph<double> other;
    DT loss = sum_all(y);
    CHECK_THROWS_AS(other.backward(loss), std::invalid_argument);
    CHECK_NOTHROW(g.backward(loss));
}

TEST_CASE("no active graph means no recording, teacher style") {
    DT x = DT::from_values({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    DT y = add(x, x);  // no graph active
    CHECK(!y.requires_grad());
}

TEST_CASE("forward is deterministic: identical graphs produce identical buffers") {
    auto build = [](uint64_t seed) {
        Rng rng(seed);
        std::vector<float> v(24), wv(24);
        for (auto& e : v) e = static_cast<float>(rng.uniform(-1.0, 1.0));
        for (auto& e : wv) e = static_cast<float>(rng.uniform(-1.0, 1.0));
        FT x = FT::from_values({2, 3, 4}, v);
        x.set_requires_grad(true);
        FT w = FT::from_values({2, 3, 4}, wv);
        Graph<float> g;
        auto scope = g.activate();
        FT loss = sum_all(mul(softmax(gelu(x), 2), w));
        g.backward(loss);
        return std::make_pair(loss.item(), x.grad());
    };
    auto [l1, g1] = build(99);
    auto [l2, g2] = build(99);
    CHECK(std::memcmp(&l1, &l2, sizeof(float)) == 0);
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("log-clamped keeps finite values on zero input") {
    FT x = FT::from_values({2}, {0.0f, 1.0f});
    FT y = log_clamped(x);
    CHECK(std::isfinite(y.values()[0]));
    CHECK(y.values()[0] == doctest::Approx(std::log(1e-12)));
    CHECK(y.values()[1] == doctest::Approx(0.0f));
}

TEST_CASE("cosine similarity handles zero-norm operands as 0") {
    FT a = FT::zeros({3});
    FT b = FT::from_values({3}, {1.0f, 2.0f, 3.0f});
    CHECK(cosine_similarity(a, b, 0).item() == 0.0f);
    FT c = FT::from_values({3}, {2.0f, 4.0f, 6.0f});
    CHECK(cosine_similarity(b, c, 0).item() == doctest::Approx(1.0f));
}

TEST_CASE("transpose and reshape round values correctly") {
    FT x = FT::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    FT t = transpose2d(x);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.values() == std::vector<float>{1, 4, 2, 5, 3, 6});
    FT r = reshape(x, {3, 2});
    CHECK(r.values() == x.values());
    CHECK_THROWS_AS(reshape(x, {4, 2}), std::invalid_argument);
}

TEST_CASE("reductions over chosen axes") {
    FT x = FT::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(sum_axes(x, {0}).values() == std::vector<float>{4, 6});
    CHECK(sum_axes(x, {1}).values() == std::vector<float>{3, 7});
    CHECK(sum_all(x).item() == 10.0f);
    CHECK(mean_axes(x, {}).item() == doctest::Approx(2.5f));
    CHECK_THROWS_AS(sum_axes(x, {2}), std::invalid_argument);
    CHECK_THROWS_AS(sum_axes(x, {0, 0}), std::invalid_argument);
}
