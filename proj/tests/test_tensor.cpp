#include <cmath>

#include "doctest.h"

#include "dawn/nn.hpp"
#include "dawn/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/suites.hpp"

using namespace dawn;

TEST_CASE("elementwise basics") {
    Tensor a = Tensor::from_data({2}, {1.f, 2.f});
    Tensor b = Tensor::from_data({2}, {3.f, 4.f});
    Tensor c = add(a, b);
    CHECK(c.data()[0] == 4.f);
    CHECK(c.data()[1] == 6.f);

    Tensor z = silu(Tensor::from_data({1}, {0.f}));
    CHECK(z.item() == 0.f);

    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
    // shape error names both shapes
    try {
        add(Tensor::zeros({2, 3}), Tensor::zeros({4}));
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4]") != std::string::npos);
    }
}

TEST_CASE("mul backward matches finite differences at x=3") {
    Tensor64 x = Tensor64::from_data({1}, {3.0});
    auto r = gradcheck::compare([&]() { return mul(x, x); }, {x});
    CHECK(r.max_err < 1e-6);
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor64 y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("broadcasting follows trailing alignment on the small-shape table") {
    // exhaustive dims in {1,2,3} over rank-2 x rank-2
    for (int64_t a0 : {1, 2, 3})
        for (int64_t a1 : {1, 2, 3})
            for (int64_t b0 : {1, 2, 3})
                for (int64_t b1 : {1, 2, 3}) {
                    bool ok0 = a0 == b0 || a0 == 1 || b0 == 1;
                    bool ok1 = a1 == b1 || a1 == 1 || b1 == 1;
                    Tensor a = Tensor::full({a0, a1}, 2.f);
                    Tensor b = Tensor::full({b0, b1}, 5.f);
                    if (!(ok0 && ok1)) {
                        CHECK_THROWS_AS(add(a, b), ShapeError);
                        continue;
                    }
                    Tensor c = add(a, b);
                    CHECK(c.shape() == Shape{std::max(a0, b0), std::max(a1, b1)});
                    for (float v : c.data()) CHECK(v == 7.f);
                }
}

TEST_CASE("matmul identity and small fixed products") {
    Tensor eye = Tensor::from_data({2, 2}, {1.f, 0.f, 0.f, 1.f});
    Tensor v = Tensor::from_data({2, 1}, {2.f, 3.f});
    Tensor r = matmul(eye, v);
    CHECK(r.data()[0] == 2.f);
    CHECK(r.data()[1] == 3.f);

    Tensor a = Tensor::from_data({1, 2}, {1.f, 2.f});
    Tensor b = Tensor::from_data({2, 1}, {3.f, 4.f});
    CHECK(matmul(a, b).item() == 11.f);

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("matmul gradients match central differences") {
    RngStream rng(42);
    Tensor64 a = Tensor64::rand_uniform({2, 2}, rng, -1, 1);
    Tensor64 b = Tensor64::rand_uniform({2, 2}, rng, -1, 1);
    auto r = gradcheck::compare([&]() { return sum(matmul(a, b)); }, {a, b});
    CHECK(r.max_err < 1e-4);
}

TEST_CASE("conv2d identity, box kernel, and gradients") {
    // 1x1 kernel of value 1 maps each channel to itself
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.f});
    Tensor y = conv2d(x, w, Tensor(), 1, 0);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);

    // 3x3 all-ones kernel on 3x3 all-ones input, no padding -> 9
    Tensor x9 = Tensor::full({1, 1, 3, 3}, 1.f);
    Tensor w9 = Tensor::full({1, 1, 3, 3}, 1.f);
    CHECK(conv2d(x9, w9, Tensor(), 1, 0).item() == 9.f);

    // non-integer output size
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 6, 6}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 2, 0),
                    ConfigError);

    RngStream rng(7);
    Tensor64 xr = Tensor64::rand_uniform({2, 3, 8, 8}, rng, -1, 1);
    Tensor64 wr = Tensor64::rand_uniform({4, 3, 3, 3}, rng, -0.4, 0.4);
    Tensor64 br = Tensor64::rand_uniform({4}, rng, -0.2, 0.2);
    auto r = gradcheck::compare([&]() { return mean(conv2d(xr, wr, br, 1, 1)); }, {xr, wr, br});
    CHECK(r.max_err < 1e-4);
}

TEST_CASE("reductions") {
    Tensor s = softmax(Tensor::from_data({2}, {0.f, 0.f}), -1);
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));

    CHECK(mean(Tensor::from_data({3}, {1.f, 2.f, 3.f})).item() == doctest::Approx(2.0));

    CHECK_THROWS_AS(sum(Tensor::zeros({2, 2}), {5}, false), ShapeError);

    RngStream rng(3);
    Tensor64 logits = Tensor64::rand_uniform({4}, rng, -2, 2);
    auto r = gradcheck::compare([&]() { return sum(mul(softmax(logits, -1),
                                                       Tensor64::from_data({4}, {0.9, -0.3, 0.4, 0.2}))); },
                                {logits});
    CHECK(r.max_err < 1e-4);
}

TEST_CASE("backward contracts") {
    Tensor x = Tensor::from_data({3}, {1.f, 2.f, 3.f}, true);
    Tensor loss = sum(x);
    backward(loss);
    for (float g : x.grad()) CHECK(g == 1.f);

    // repeated backward without zero_grad accumulates
    Tensor loss2 = sum(x);
    backward(loss2);
    for (float g : x.grad()) CHECK(g == 2.f);

    // MSE derivative: d/dx 0.5*sum((x-y)^2) = x - y
    Tensor y = Tensor::from_data({3}, {0.f, 0.f, 0.f});
    x.zero_grad();
    Tensor l = mul(sum(mul(sub(x, y), sub(x, y))), 0.5f);
    backward(l);
    CHECK(x.grad()[0] == doctest::Approx(1.f));
    CHECK(x.grad()[1] == doctest::Approx(2.f));
    CHECK(x.grad()[2] == doctest::Approx(3.f));

    CHECK_THROWS_AS(backward(Tensor::zeros({2})), ContractError);
}

TEST_CASE("composite mlp gradient matches finite differences") {
    RngStream rng(11);
    ParamStoreT<double> ps;
    LinearT<double> l1(ps, "l1", 4, 6, rng);
    LinearT<double> l2(ps, "l2", 6, 2, rng);
    Tensor64 x = Tensor64::rand_uniform({3, 4}, rng, -1, 1);
    Tensor64 tgt = Tensor64::rand_uniform({3, 2}, rng, -1, 1);
    std::vector<Tensor64> leaves;
    for (auto& [n, p] : ps.items) leaves.push_back(p);
    auto r = gradcheck::compare(
        [&]() { return mse(l2.forward(silu(l1.forward(x))), tgt); }, leaves);
    CHECK(r.max_err < 1e-4);
}

TEST_CASE("adamw") {
    // zero gradient, zero weight decay: parameters unchanged
    ParamStore ps;
    Tensor p = ps.add("p", Tensor::from_data({2}, {1.f, -2.f}));
    p.grad();  // allocate zero grads
    AdamW opt;
    opt.weight_decay = 0.f;
    opt.step(ps);
    CHECK(p.data()[0] == 1.f);
    CHECK(p.data()[1] == -2.f);

    // one step on f(x)=x^2 from x=1 decreases x
    ParamStore ps2;
    Tensor x = ps2.add("x", Tensor::from_data({1}, {1.f}));
    AdamW opt2;
    opt2.lr = 0.1f;
    opt2.weight_decay = 0.f;
    Tensor loss = mul(x, x);
    backward(loss);
    opt2.step(ps2);
    CHECK(x.data()[0] < 1.f);

    // 200 steps on a 2-d quadratic reach loss < 1e-3 (minimum at origin)
    ParamStore ps3;
    Tensor v = ps3.add("v", Tensor::from_data({2}, {1.5f, -0.8f}));
    AdamW opt3;
    opt3.lr = 0.05f;
    opt3.weight_decay = 0.f;
    float last = 0.f;
    for (int i = 0; i < 200; ++i) {
        ps3.zero_grad();
        Tensor l = sum(mul(v, v));
        last = l.item();
        backward(l);
        opt3.step(ps3);
    }
    CHECK(last < 1e-3f);

    // NaN gradient aborts naming the parameter
    ParamStore ps4;
    Tensor q = ps4.add("layer.weight", Tensor::from_data({1}, {1.f}));
    q.grad()[0] = std::nanf("");
    AdamW opt4;
    try {
        opt4.step(ps4);
        CHECK(false);
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer.weight") != std::string::npos);
    }
}

TEST_CASE("rng streams replay and derive") {
    RngStream a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    RngStream c = a.derive("x"), d = a.derive("y");
    CHECK(c.next_u64() != d.next_u64());
    // counter state fully determines continuation
    RngStream e(9, 50);
    RngStream f(9);
    for (int i = 0; i < 50; ++i) f.next_u64();
    CHECK(e.next_u64() == f.next_u64());
}

TEST_CASE("results do not depend on worker thread count") {
    RngStream rng(5);
    Tensor a = Tensor::rand_uniform({64, 96}, rng, -1, 1);
    Tensor b = Tensor::rand_uniform({96, 48}, rng, -1, 1);
    Tensor x = Tensor::rand_uniform({4, 8, 16, 16}, rng, -1, 1);
    Tensor w = Tensor::rand_uniform({8, 8, 3, 3}, rng, -0.3, 0.3);
    int saved = num_threads();
    set_num_threads(1);
    Tensor m1 = matmul(a, b);
    Tensor c1 = conv2d(x, w, Tensor(), 1, 1);
    set_num_threads(4);
    Tensor m2 = matmul(a, b);
    Tensor c2 = conv2d(x, w, Tensor(), 1, 1);
    set_num_threads(saved);
    for (int64_t i = 0; i < m1.numel(); ++i) CHECK(m1.data()[i] == m2.data()[i]);
    for (int64_t i = 0; i < c1.numel(); ++i) CHECK(c1.data()[i] == c2.data()[i]);
}

TEST_CASE("gradient suite over every differentiable op") {
    auto r = suites::run_gradient_suite(2024, 20);
    INFO(r.detail);
    CHECK(r.pass);
    CHECK(r.seconds < 120.0);
}
