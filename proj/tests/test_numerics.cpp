#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bifrec/errors.hpp"
#include "bifrec/ops.hpp"
#include "bifrec/optim.hpp"
#include "bifrec/rng.hpp"
#include "bifrec/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace bifrec;

TEST_CASE("splittable stream is deterministic and fork-stable") {
    RandomStream a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    // forks depend on the key, not on how far the stream has advanced
    RandomStream c(42);
    c.next_u64();
    CHECK(RandomStream(42).fork("x").next_u64() == c.fork("x").next_u64());
    CHECK(RandomStream(42).fork("x").next_u64() != RandomStream(42).fork("y").next_u64());
}

TEST_CASE("matmul identity") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor out = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(a.data()[i]));
}

TEST_CASE("softmax of constant row is uniform and sums to one") {
    Tensor x = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor s = softmax(x, 1);
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    RandomStream rs(7);
    Tensor y = testing::rand_matrix(rs, 5, 7, -30.0, 30.0);
    Tensor sy = softmax(y, 1);
    for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
            double v = sy.data()[i * 7 + j];
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::fabs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("l2 normalize: 3-4-5 row and unit-norm property") {
    Tensor x = Tensor::from_data({1, 2}, {3, 4});
    Tensor y = l2_normalize_rows(x);
    CHECK(y.data()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.8).epsilon(1e-12));

    RandomStream rs(11);
    Tensor m = testing::rand_matrix(rs, 6, 5);
    Tensor n = l2_normalize_rows(m);
    for (std::size_t i = 0; i < 6; ++i) {
        double ss = 0.0, in_norm = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            ss += n.data()[i * 5 + j] * n.data()[i * 5 + j];
            in_norm += m.data()[i * 5 + j] * m.data()[i * 5 + j];
        }
        if (std::sqrt(in_norm) > 1e-9) CHECK(std::fabs(std::sqrt(ss) - 1.0) < 1e-12);
    }

    // degenerate rows map to zero rather than dividing by zero
    Tensor z = l2_normalize_rows(Tensor::zeros({1, 4}));
    for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("backward: sum of squares and linear sums") {
    Tensor x = Tensor::from_data({1, 3}, {1, 2, 3}).set_requires_grad(true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));

    Tensor y = Tensor::from_data({2, 2}, {5, -1, 0, 2}).set_requires_grad(true);
    backward(sum(y));
    for (double g : y.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward: frozen leaf holds no grad") {
    Tensor frozen = Tensor::from_data({1, 2}, {1, 2});  // requires_grad defaults to false
    Tensor live = Tensor::from_data({1, 2}, {3, 4}).set_requires_grad(true);
    backward(sum(mul(frozen, live)));
    CHECK(live.has_grad());
    CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("backward rejects non-scalar loss and consumed tapes") {
    Tensor x = Tensor::from_data({1, 2}, {1, 2}).set_requires_grad(true);
    Tensor vec = mul(x, x);
    CHECK_THROWS_AS(backward(vec), NumericError);

    Tensor loss = sum(mul(x, x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), NumericError);
}

TEST_CASE("finite difference oracle basics") {
    Tensor x = Tensor::from_data({1, 2}, {1, 2});
    Tensor g = finite_diff_grad(
        [](const Tensor& t) {
            double acc = 0.0;
            for (double v : t.data()) acc += v * v;
            return acc;
        },
        x, 1e-5);
    CHECK(g.data()[0] == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(g.data()[1] == doctest::Approx(4.0).epsilon(1e-6));

    Tensor gc = finite_diff_grad([](const Tensor&) { return 3.5; }, x, 1e-5);
    for (double v : gc.data()) CHECK(v == doctest::Approx(0.0));

    std::vector<double> coeff = {0.7, -1.3};
    Tensor gl = finite_diff_grad(
        [&](const Tensor& t) { return coeff[0] * t.data()[0] + coeff[1] * t.data()[1]; }, x,
        1e-5);
    CHECK(gl.data()[0] == doctest::Approx(coeff[0]).epsilon(1e-7));
    CHECK(gl.data()[1] == doctest::Approx(coeff[1]).epsilon(1e-7));
}

TEST_CASE("every catalog primitive passes the gradient check") {
    RandomStream rs(2024);
    for (const auto& op : primitive_catalog()) {
        RandomStream op_rs = rs.fork(op);
        for (int trial = 0; trial < 10; ++trial) {
            auto gc = testing::random_case(op, op_rs);
            double err = testing::max_grad_err(gc);
            INFO("op=", op, " trial=", trial, " err=", err);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("apply_primitive rejects unknown ops and names shapes on mismatch") {
    CHECK_THROWS_AS(apply_primitive("conv2d", {Tensor::scalar(1)}), ShapeError);
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("adam: lr=0 leaves params unchanged but advances moments") {
    std::vector<Tensor> params = {Tensor::from_data({2}, {1.0, -2.0})};
    std::vector<std::vector<double>> grads = {{0.5, 0.25}};
    AdamState state;
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    adam_step(params, grads, state, 0.0, cfg);
    CHECK(params[0].data()[0] == doctest::Approx(1.0));
    CHECK(params[0].data()[1] == doctest::Approx(-2.0));
    CHECK(state.step_count == 1);
    CHECK(state.first_moment[0][0] == doctest::Approx(0.05));
    CHECK(state.second_moment[0][0] == doctest::Approx(0.001 * 0.25));
}

TEST_CASE("adam: first step hand expansion") {
    // param=1, grad=1, lr=0.1, wd=0: m_hat = v_hat = 1, step = lr / (1 + eps)
    std::vector<Tensor> params = {Tensor::scalar(1.0)};
    std::vector<std::vector<double>> grads = {{1.0}};
    AdamState state;
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    adam_step(params, grads, state, 0.1, cfg);
    double expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    CHECK(params[0].data()[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(params[0].data()[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adam: weight decay acts through the gradient") {
    // grad=0, wd=1e-6, param=1: g=1e-6, m_hat=1e-6, v_hat=1e-12
    std::vector<Tensor> params = {Tensor::scalar(1.0)};
    std::vector<std::vector<double>> grads = {{0.0}};
    AdamState state;
    AdamConfig cfg;  // wd = 1e-6 default
    double lr = 0.1;
    adam_step(params, grads, state, lr, cfg);
    double g = 1e-6;
    double m_hat = g, v_hat = g * g;
    double expected = 1.0 - lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    CHECK(params[0].data()[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(params[0].data()[0] < 1.0);
}

TEST_CASE("adam rejects shape mismatches") {
    std::vector<Tensor> params = {Tensor::from_data({2}, {1.0, 1.0})};
    std::vector<std::vector<double>> grads = {{1.0}};
    AdamState state;
    CHECK_THROWS_AS(adam_step(params, grads, state, 0.1), ShapeError);
}

TEST_CASE("lr schedule: endpoints, midpoint, clamping, continuity") {
    LrSchedule sched;  // peak 1e-4, warmup 5000, final 1e-8, total 100000
    CHECK(lr_at(5000, sched) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(100000, sched) == doctest::Approx(1e-8).epsilon(1e-12));
    CHECK(lr_at(2500, sched) == doctest::Approx(5e-5).epsilon(1e-12));
    CHECK(lr_at(0, sched) == doctest::Approx(0.0));
    CHECK(lr_at(-5, sched) == doctest::Approx(0.0));
    CHECK(lr_at(2000000, sched) == doctest::Approx(1e-8));
    double jump = std::fabs(lr_at(sched.warmup_steps - 1, sched) - lr_at(sched.warmup_steps, sched));
    double bound = sched.peak_lr / sched.warmup_steps +
                   sched.peak_lr / (sched.total_steps - sched.warmup_steps);
    CHECK(jump <= bound);
}

TEST_CASE("no-grad mode builds constants") {
    Tensor x = Tensor::from_data({1, 2}, {1, 2}).set_requires_grad(true);
    Tensor out;
    {
        NoGradGuard ng;
        out = sum(mul(x, x));
    }
    CHECK(out.is_leaf());
    CHECK_FALSE(out.requires_grad());
}
