#include "doctest.h"

#include <unistd.h>

#include <cmath>
#include <cstdio>

#include "mia/nn.hpp"
#include "oracles.hpp"

using namespace mia;
using namespace mia::nn;

namespace {

DenseMatrix random_batch(int n, int d, Rng& rng, double scale = 1.0) {
    DenseMatrix x(n, d);
    for (auto& v : x.data) v = scale * rng.normal();
    return x;
}

std::vector<int> random_labels(int n, Rng& rng) {
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.uniform_index(2));
    return y;
}

// Scalar loss of an MLP + BCE pipeline, used as the finite-difference target.
double pipeline_loss(const Mlp& mlp, const DenseMatrix& x, const std::vector<int>& y,
                     const std::vector<double>& w) {
    return bce_loss(mlp_forward(mlp, x).output, y, w).value;
}

double quad_loss(const Mlp& mlp, const DenseMatrix& x, const DenseMatrix& target) {
    MlpCache c = mlp_forward(mlp, x);
    double acc = 0.0;
    for (std::size_t i = 0; i < c.output.data.size(); ++i) {
        double d = c.output.data[i] - target.data[i];
        acc += 0.5 * d * d;
    }
    return acc;
}

}  // namespace

TEST_CASE("linear_forward computes x W^T + b") {
    DenseMatrix x(2, 3);
    double xv[] = {1, 2, 3, -1, 0, 2};
    x.data.assign(xv, xv + 6);
    DenseMatrix w(2, 3);
    double wv[] = {1, 0, 1, 2, -1, 0.5};
    w.data.assign(wv, wv + 6);
    DenseMatrix y = linear_forward(x, w, {0.5, -0.5});
    CHECK(y(0, 0) == doctest::Approx(4.5));    // 1+3+0.5
    CHECK(y(0, 1) == doctest::Approx(1.0));    // 2-2+1.5-0.5
    CHECK(y(1, 0) == doctest::Approx(1.5));
    CHECK(y(1, 1) == doctest::Approx(-1.5));
}

TEST_CASE("make_mlp: Glorot bounds, zero biases, determinism, validation") {
    Rng rng(3);
    MlpSpec spec{{6, 8, 2}, OutputHead::kSoftmax2};
    Mlp a = make_mlp(spec, rng);
    REQUIRE(a.layers.size() == 2);
    double lim0 = std::sqrt(6.0 / (6 + 8));
    for (double v : a.layers[0].w.data) CHECK(std::abs(v) <= lim0);
    for (double v : a.layers[0].b) CHECK(v == 0.0);

    Rng rng2(3);
    Mlp b = make_mlp(spec, rng2);
    CHECK(a.layers[1].w.data == b.layers[1].w.data);

    Rng rng3(4);
    CHECK_THROWS_AS(make_mlp(MlpSpec{{4, 2}, OutputHead::kIdentity}, rng3),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_mlp(MlpSpec{{4, 3, 3}, OutputHead::kSoftmax2}, rng3),
                    std::invalid_argument);
}

TEST_CASE("softmax head rows are probabilities") {
    Rng rng(11);
    Mlp mlp = make_mlp(MlpSpec{{5, 7, 2}, OutputHead::kSoftmax2}, rng);
    DenseMatrix x = random_batch(9, 5, rng);
    MlpCache c = mlp_forward(mlp, x);
    for (int r = 0; r < 9; ++r) {
        CHECK(c.output(r, 0) >= 0.0);
        CHECK(c.output(r, 0) + c.output(r, 1) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("bce_loss values, per-sample terms and gradients") {
    DenseMatrix probs(2, 2);
    probs(0, 0) = 0.8; probs(0, 1) = 0.2;
    probs(1, 0) = 0.3; probs(1, 1) = 0.7;
    BceResult r = bce_loss(probs, {1, 0}, {1.0, 2.0});
    CHECK(r.per_sample[0] == doctest::Approx(-std::log(0.8)).epsilon(1e-12));
    CHECK(r.per_sample[1] == doctest::Approx(-std::log(0.7)).epsilon(1e-12));
    CHECK(r.value == doctest::Approx(-std::log(0.8) - 2.0 * std::log(0.7)).epsilon(1e-12));
    CHECK(r.grad_probs(0, 0) == doctest::Approx(-1.0 / 0.8));
    CHECK(r.grad_probs(0, 1) == 0.0);
    CHECK(r.grad_probs(1, 0) == 0.0);
    CHECK(r.grad_probs(1, 1) == doctest::Approx(-2.0 / 0.7));

    // Clamping keeps degenerate probabilities finite.
    DenseMatrix hard(1, 2);
    hard(0, 0) = 0.0; hard(0, 1) = 1.0;
    BceResult h = bce_loss(hard, {1}, {1.0});
    CHECK(std::isfinite(h.value));
    CHECK(h.value == doctest::Approx(-std::log(1e-12)));

    CHECK_THROWS_AS(bce_loss(probs, {1, 2}, {1.0, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(bce_loss(probs, {1}, {1.0, 1.0}), std::invalid_argument);
}

TEST_CASE("softmax MLP + BCE gradients match finite differences") {
    Rng rng(20240817);
    Mlp mlp = make_mlp(MlpSpec{{4, 6, 3, 2}, OutputHead::kSoftmax2}, rng);
    DenseMatrix x = random_batch(7, 4, rng);
    std::vector<int> y = random_labels(7, rng);
    std::vector<double> w = {1.0, 0.5, 2.0, 1.0, 0.3, 1.7, 1.0};

    MlpCache cache = mlp_forward(mlp, x);
    BceResult loss = bce_loss(cache.output, y, w);
    MlpGrads grads = mlp_backward(mlp, cache, loss.grad_probs);

    int checked = 0;
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
        for (std::size_t i = 0; i < mlp.layers[l].w.data.size(); ++i) {
            Mlp probe = mlp;
            double fd = oracle::central_diff(
                [&](double v) {
                    probe.layers[l].w.data[i] = v;
                    return pipeline_loss(probe, x, y, w);
                },
                mlp.layers[l].w.data[i]);
            CHECK(oracle::rel_err_floor(grads.layers[l].w.data[i], fd, 1e-6) < 1e-4);
            ++checked;
        }
        for (std::size_t i = 0; i < mlp.layers[l].b.size(); ++i) {
            Mlp probe = mlp;
            double fd = oracle::central_diff(
                [&](double v) {
                    probe.layers[l].b[i] = v;
                    return pipeline_loss(probe, x, y, w);
                },
                mlp.layers[l].b[i]);
            CHECK(oracle::rel_err_floor(grads.layers[l].b[i], fd, 1e-6) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked > 50);

    // Input gradients too (the attack loss reaches the encoder through these).
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) {
            DenseMatrix xp = x;
            double fd = oracle::central_diff(
                [&](double v) {
                    xp(r, c) = v;
                    return pipeline_loss(mlp, xp, y, w);
                },
                x(r, c));
            CHECK(oracle::rel_err_floor(grads.input(r, c), fd, 1e-6) < 1e-4);
        }
}

TEST_CASE("identity MLP + quadratic loss gradients match finite differences") {
    Rng rng(7777);
    Mlp mlp = make_mlp(MlpSpec{{3, 5, 5, 4}, OutputHead::kIdentity}, rng);
    DenseMatrix x = random_batch(6, 3, rng);
    DenseMatrix target = random_batch(6, 4, rng);

    MlpCache cache = mlp_forward(mlp, x);
    DenseMatrix up(6, 4);
    for (std::size_t i = 0; i < up.data.size(); ++i)
        up.data[i] = cache.output.data[i] - target.data[i];
    MlpGrads grads = mlp_backward(mlp, cache, up);

    for (std::size_t l = 0; l < mlp.layers.size(); ++l)
        for (std::size_t i = 0; i < mlp.layers[l].w.data.size(); i += 3) {
            Mlp probe = mlp;
            double fd = oracle::central_diff(
                [&](double v) {
                    probe.layers[l].w.data[i] = v;
                    return quad_loss(probe, x, target);
                },
                mlp.layers[l].w.data[i]);
            CHECK(oracle::rel_err_floor(grads.layers[l].w.data[i], fd, 1e-6) < 1e-4);
        }
}

TEST_CASE("optimizer_step arithmetic: SGD momentum") {
    double theta = 1.0;
    double grad = 0.5;
    OptimizerSpec spec{OptKind::kSgdMomentum, 0.01, 0.7, 0.9, 0.999, 1e-8};
    OptState st;
    std::vector<ParamRef> refs = {{&theta, &grad, 1}};
    optimizer_step(spec, st, refs);
    CHECK(theta == doctest::Approx(0.995).epsilon(1e-15));   // v = -0.005
    optimizer_step(spec, st, refs);
    CHECK(theta == doctest::Approx(0.9865).epsilon(1e-15));  // v = -0.0085
}

TEST_CASE("optimizer_step arithmetic: Adam first step") {
    double theta = 1.0;
    double grad = 0.5;
    OptimizerSpec spec{OptKind::kAdam, 0.001, 0.0, 0.9, 0.999, 1e-8};
    OptState st;
    std::vector<ParamRef> refs = {{&theta, &grad, 1}};
    optimizer_step(spec, st, refs);
    // Bias-corrected first step is lr * g / (|g| + eps).
    CHECK(theta == doctest::Approx(1.0 - 0.001 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("50 full-batch steps decrease the weighted BCE") {
    for (OptKind kind : {OptKind::kSgdMomentum, OptKind::kAdam}) {
        Rng rng(99);
        Mlp mlp = make_mlp(MlpSpec{{5, 32, 8, 2}, OutputHead::kSoftmax2}, rng);
        DenseMatrix x = random_batch(40, 5, rng);
        std::vector<int> y(40);
        for (int i = 0; i < 40; ++i) y[i] = x(i, 0) + 0.3 * x(i, 1) > 0.0 ? 1 : 0;
        std::vector<double> w(40, 1.0);

        OptimizerSpec spec;
        spec.kind = kind;
        spec.lr = kind == OptKind::kAdam ? 0.001 : 0.01;
        OptState st;
        double first = pipeline_loss(mlp, x, y, w);
        for (int step = 0; step < 50; ++step) {
            MlpCache cache = mlp_forward(mlp, x);
            BceResult loss = bce_loss(cache.output, y, w);
            MlpGrads grads = mlp_backward(mlp, cache, loss.grad_probs);
            optimizer_step(spec, st, param_refs(mlp, grads));
        }
        double last = pipeline_loss(mlp, x, y, w);
        CHECK(last < first);
    }
}

TEST_CASE("checkpoint container round-trips exactly") {
    std::vector<NamedTensor> ts;
    ts.push_back({"a.w", {2, 3}, {1.0, -2.5, 3.25, 0.0, 1e-30, -7.125}});
    ts.push_back({"a.b", {3}, {0.5, 0.25, -0.125}});
    std::string path = "/tmp/mia_test_ckpt.bin";
    save_tensors(path, ts);
    std::vector<NamedTensor> back = load_tensors(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "a.w");
    CHECK(back[0].shape == std::vector<int>{2, 3});
    CHECK(back[0].data == ts[0].data);
    CHECK(back[1].data == ts[1].data);

    // Mlp round trip, bit for bit.
    Rng rng(5);
    Mlp mlp = make_mlp(MlpSpec{{4, 6, 2}, OutputHead::kSoftmax2}, rng);
    save_tensors(path, mlp_tensors(mlp, "attack"));
    Mlp restored;
    mlp_from_tensors(restored, load_tensors(path), "attack");
    CHECK(restored.spec.widths == mlp.spec.widths);
    CHECK(restored.spec.head == mlp.spec.head);
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
        CHECK(restored.layers[l].w.data == mlp.layers[l].w.data);
        CHECK(restored.layers[l].b == mlp.layers[l].b);
    }
}

TEST_CASE("checkpoint container rejects corrupt files") {
    std::string path = "/tmp/mia_test_ckpt_bad.bin";
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("NOTMAGIC????????", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_tensors(path), std::runtime_error);
    CHECK_THROWS_AS(load_tensors("/tmp/definitely_missing_mia.bin"), std::runtime_error);

    // Truncate a valid file mid-payload.
    std::vector<NamedTensor> ts = {{"t", {4}, {1, 2, 3, 4}}};
    save_tensors(path, ts);
    {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        std::fseek(f, 0, SEEK_END);
        long len = std::ftell(f);
        std::fclose(f);
        (void)truncate(path.c_str(), len - 12);
    }
    CHECK_THROWS_AS(load_tensors(path), std::runtime_error);
}
