#include "support/suites.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

#include "dawn/dataset.hpp"
#include "dawn/diffusion.hpp"
#include "dawn/motion.hpp"
#include "dawn/sim.hpp"
#include "dawn/nn.hpp"
#include "dawn/tensor.hpp"
#include "support/gradcheck.hpp"

namespace suites {

using dawn::RngStream;
using dawn::Shape;
using dawn::Tensor64;

namespace {

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor64 randt(Shape shape, RngStream& rng, double lo = -1.5, double hi = 1.5) {
    return Tensor64::rand_uniform(std::move(shape), rng, lo, hi);
}

}  // namespace

CriterionResult run_gradient_suite(uint64_t seed, int cases_per_op) {
    auto t0 = std::chrono::steady_clock::now();
    RngStream root(seed);

    struct OpCase {
        std::string name;
        // builds leaves + loss function for one random instance
        std::function<std::pair<std::vector<Tensor64>, std::function<Tensor64()>>(RngStream&)> make;
    };

    auto scalarize = [](Tensor64 t) {
        // A fixed random-ish projection keeps the loss sensitive to every
        // element without ties.
        std::vector<double> wdata(t.numel());
        for (int64_t i = 0; i < t.numel(); ++i)
            wdata[i] = 0.3 + 0.07 * static_cast<double>((i * 2654435761u) % 97) / 97.0;
        Tensor64 w = Tensor64::from_data(t.shape(), std::move(wdata));
        return dawn::sum(dawn::mul(t, w));
    };

    std::vector<OpCase> ops;
    auto add_binary = [&](const std::string& name, auto opfn, double lo, double hi) {
        ops.push_back({name, [opfn, lo, hi, scalarize](RngStream& rng) {
                           Shape sa, sb;
                           switch (rng.uniform_int(3)) {
                               case 0: sa = {3, 4}; sb = {3, 4}; break;
                               case 1: sa = {2, 3, 2}; sb = {3, 2}; break;  // broadcast
                               default: sa = {2, 1, 4}; sb = {1, 3, 1}; break;
                           }
                           Tensor64 a = randt(sa, rng, lo, hi);
                           Tensor64 b = randt(sb, rng, lo, hi);
                           std::function<Tensor64()> f = [=]() { return scalarize(opfn(a, b)); };
                           return std::make_pair(std::vector<Tensor64>{a, b}, f);
                       }});
    };
    add_binary("add", [](auto a, auto b) { return dawn::add(a, b); }, -1.5, 1.5);
    add_binary("sub", [](auto a, auto b) { return dawn::sub(a, b); }, -1.5, 1.5);
    add_binary("mul", [](auto a, auto b) { return dawn::mul(a, b); }, -1.5, 1.5);
    add_binary("div", [](auto a, auto b) { return dawn::div(a, b); }, 0.5, 2.0);

    auto add_unary = [&](const std::string& name, auto opfn, double lo, double hi) {
        ops.push_back({name, [opfn, lo, hi, scalarize](RngStream& rng) {
                           Tensor64 a = randt({2, 3, 3}, rng, lo, hi);
                           std::function<Tensor64()> f = [=]() { return scalarize(opfn(a)); };
                           return std::make_pair(std::vector<Tensor64>{a}, f);
                       }});
    };
    add_unary("neg", [](auto a) { return dawn::neg(a); }, -2.0, 2.0);
    add_unary("exp", [](auto a) { return dawn::exp(a); }, -1.5, 1.5);
    add_unary("log", [](auto a) { return dawn::log(a); }, 0.3, 3.0);
    add_unary("sqrt", [](auto a) { return dawn::sqrt(a); }, 0.3, 3.0);
    add_unary("pow", [](auto a) { return dawn::pow(a, 2.5); }, 0.3, 2.0);
    add_unary("silu", [](auto a) { return dawn::silu(a); }, -3.0, 3.0);
    add_unary("gelu", [](auto a) { return dawn::gelu(a); }, -3.0, 3.0);
    add_unary("tanh", [](auto a) { return dawn::tanh(a); }, -2.0, 2.0);
    add_unary("sigmoid", [](auto a) { return dawn::sigmoid(a); }, -3.0, 3.0);

    ops.push_back({"matmul", [scalarize](RngStream& rng) {
                       const int variant = static_cast<int>(rng.uniform_int(3));
                       Shape sa = variant == 0 ? Shape{3, 4} : Shape{2, 3, 4};
                       Shape sb = variant == 2 ? Shape{2, 4, 2} : Shape{4, 2};
                       Tensor64 a = randt(sa, rng);
                       Tensor64 b = randt(sb, rng);
                       std::function<Tensor64()> f = [=]() { return scalarize(dawn::matmul(a, b)); };
                       return std::make_pair(std::vector<Tensor64>{a, b}, f);
                   }});
    ops.push_back({"conv2d", [scalarize](RngStream& rng) {
                       const int stride = 1 + static_cast<int>(rng.uniform_int(2));
                       const int pad = static_cast<int>(rng.uniform_int(2));
                       const int H = stride == 2 ? 5 : 4;  // keeps the output size integral
                       Tensor64 x = randt({2, 3, H, H}, rng);
                       Tensor64 w = randt({2, 3, 3, 3}, rng, -0.5, 0.5);
                       Tensor64 b = randt({2}, rng, -0.5, 0.5);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::conv2d(x, w, b, stride, pad));
                       };
                       return std::make_pair(std::vector<Tensor64>{x, w, b}, f);
                   }});
    ops.push_back({"sum", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 3, 4}, rng);
                       const int axis = static_cast<int>(rng.uniform_int(3));
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::sum(a, {axis}, false));
                       };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"mean", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 3, 4}, rng);
                       const int axis = static_cast<int>(rng.uniform_int(3));
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::mean(a, {axis}, true));
                       };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"max", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({3, 5}, rng);
                       const int axis = static_cast<int>(rng.uniform_int(2));
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::max(a, axis, false));
                       };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"softmax", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 4}, rng, -2.0, 2.0);
                       std::function<Tensor64()> f = [=]() { return scalarize(dawn::softmax(a, -1)); };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"logsumexp", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 5}, rng, -2.0, 2.0);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::logsumexp(a, -1));
                       };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"reshape_permute", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 3, 4}, rng);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::permute(dawn::reshape(a, {3, 2, 4}), {2, 0, 1}));
                       };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"slice_concat", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 6}, rng);
                       Tensor64 b = randt({2, 3}, rng);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::concat<double>({dawn::slice(a, 1, 1, 4), b}, 1));
                       };
                       return std::make_pair(std::vector<Tensor64>{a, b}, f);
                   }});
    ops.push_back({"upsample2x", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({1, 2, 3, 3}, rng);
                       std::function<Tensor64()> f = [=]() { return scalarize(dawn::upsample2x(a)); };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"group_norm", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 4, 3, 3}, rng);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::group_norm(a, 2, 1e-5));
                       };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"layer_norm", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 3, 6}, rng);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::layer_norm(a, 1e-5));
                       };
                       return std::make_pair(std::vector<Tensor64>{a}, f);
                   }});
    ops.push_back({"channel_affine", [scalarize](RngStream& rng) {
                       Tensor64 a = randt({2, 3, 2, 2}, rng);
                       Tensor64 g = randt({3}, rng, 0.5, 1.5);
                       Tensor64 b = randt({3}, rng);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::channel_affine(a, g, b));
                       };
                       return std::make_pair(std::vector<Tensor64>{a, g, b}, f);
                   }});
    ops.push_back({"embedding", [scalarize](RngStream& rng) {
                       Tensor64 tab = randt({5, 3}, rng);
                       std::vector<int32_t> ids;
                       for (int i = 0; i < 4; ++i)
                           ids.push_back(static_cast<int32_t>(rng.uniform_int(5)));
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(dawn::embedding(tab, ids, {2, 2}));
                       };
                       return std::make_pair(std::vector<Tensor64>{tab}, f);
                   }});
    ops.push_back({"mse", [](RngStream& rng) {
                       Tensor64 a = randt({3, 3}, rng);
                       Tensor64 b = randt({3, 3}, rng);
                       std::function<Tensor64()> f = [=]() { return dawn::mse(a, b); };
                       return std::make_pair(std::vector<Tensor64>{a, b}, f);
                   }});
    ops.push_back({"attention", [scalarize](RngStream& rng) {
                       dawn::ParamStoreT<double> ps;
                       RngStream wrng = rng.derive("attn-weights", rng.next_u64());
                       dawn::AttentionT<double> attn(ps, "a", 4, 6, 2, wrng);
                       Tensor64 x = randt({1, 3, 4}, rng, -1.0, 1.0);
                       Tensor64 ctx = randt({1, 2, 6}, rng, -1.0, 1.0);
                       std::vector<Tensor64> leaves{x, ctx};
                       for (auto& [n, p] : ps.items) leaves.push_back(p);
                       std::function<Tensor64()> f = [=]() {
                           return scalarize(attn.forward(x, ctx));
                       };
                       return std::make_pair(leaves, f);
                   }});

    CriterionResult res;
    res.name = "gradient-suite";
    double worst = 0.0;
    std::string worst_op;
    int64_t total = 0;
    for (const auto& op : ops) {
        RngStream oprng = root.derive(op.name);
        for (int c = 0; c < cases_per_op; ++c) {
            auto [leaves, f] = op.make(oprng);
            auto r = gradcheck::compare(f, leaves);
            total += r.checked;
            if (r.max_err > worst) {
                worst = r.max_err;
                worst_op = op.name + "#" + std::to_string(c);
            }
        }
    }
    res.pass = worst < 1e-4;
    std::ostringstream os;
    os << ops.size() << " ops x " << cases_per_op << " cases, " << total
       << " partials, max rel err " << worst << " (" << worst_op << ")";
    res.detail = os.str();
    res.seconds = elapsed(t0);
    return res;
}

CriterionResult run_diffusion_algebra(uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    CriterionResult res;
    res.name = "diffusion-algebra";
    RngStream rng(seed);
    std::ostringstream os;
    bool pass = true;

    // q_sample first/second moments over 1e5 scalar draws.
    auto sched = dawn::NoiseSchedule::make(dawn::ScheduleKind::cosine, 1000);
    {
        const int t = 500;
        const double ab = sched.alpha_bars[t];
        const double x0v = 0.7;
        const int N = 100000;
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < N; ++i) {
            Tensor64 x0 = Tensor64::full({1, 1}, x0v);
            Tensor64 eps = Tensor64::randn({1, 1}, rng);
            double v = dawn::q_sample(x0, t, eps, sched).item();
            s1 += v;
            s2 += v * v;
        }
        const double mean = s1 / N;
        const double var = s2 / N - mean * mean;
        const double exp_mean = std::sqrt(ab) * x0v;
        const double exp_var = 1.0 - ab;
        const double mean_tol = 3.0 * std::sqrt(exp_var / N);
        const double var_tol = 3.0 * exp_var * std::sqrt(2.0 / N);
        bool ok_mean = std::abs(mean - exp_mean) < mean_tol;
        bool ok_var = std::abs(var - exp_var) < var_tol;
        pass = pass && ok_mean && ok_var;
        os << "moments: mean err " << std::abs(mean - exp_mean) << " (tol " << mean_tol
           << "), var err " << std::abs(var - exp_var) << " (tol " << var_tol << "); ";
    }

    // 25-step eta=0 chain with an oracle eps predictor recovers x0.
    {
        Tensor64 x0 = Tensor64::rand_uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
        dawn::DenoiseFn<double> oracle = [&](const Tensor64& x_t, std::span<const int> ts) {
            const double ab = sched.alpha_bars[ts[0]];
            return dawn::mul(dawn::sub(x_t, dawn::mul(x0, std::sqrt(ab))),
                             1.0 / std::sqrt(1.0 - ab));
        };
        dawn::SamplerConfig cfg{25, 0.0};
        RngStream srng = rng.derive("chain");
        Tensor64 out = dawn::sample(oracle, x0.shape(), sched, cfg, srng);
        double max_err = 0.0;
        for (int64_t i = 0; i < x0.numel(); ++i)
            max_err = std::max(max_err, std::abs(out.data()[i] - x0.data()[i]));
        pass = pass && max_err < 1e-4;
        os << "25-step oracle chain max err " << max_err;
    }

    res.pass = pass;
    res.detail = os.str();
    res.seconds = elapsed(t0);
    return res;
}

CriterionResult run_flow_oracle_equivalence(uint64_t seed, int pairs) {
    auto t0 = std::chrono::steady_clock::now();
    CriterionResult res;
    res.name = "flow-oracle-equivalence";
    RngStream root(seed);
    double worst_mean = 0.0;
    int evaluated = 0;
    for (int p = 0; p < pairs; ++p) {
        RngStream rng = root.derive("pair", p);
        auto rr = dawn::reset(rng);
        dawn::WorldState ws = rr.world;
        // roll the expert to a random point, then sample an offset window
        const int t_pick = 2 + static_cast<int>(rng.uniform_int(40));
        const int k = 4 + static_cast<int>(rng.uniform_int(13));
        std::vector<dawn::WorldState> states{ws};
        for (int t = 0; t < t_pick + k; ++t) {
            auto ex = dawn::scripted_expert(ws, rr.task);
            dawn::step(ws, ex.action);
            states.push_back(ws);
        }
        const dawn::WorldState& w0 = states[t_pick];
        const dawn::WorldState& w1 = states[t_pick + k];
        dawn::IdBuffer ids0 = dawn::render_ids(w0);
        dawn::IdBuffer ids1 = dawn::render_ids(w1);
        dawn::PixelMotion analytic = dawn::analytic_flow(w0, w1, ids0);

        // brute-force correspondence of entity pixel sets: displacement of
        // each entity estimated from its pixel-set centroids alone
        const int n_entities = static_cast<int>(w0.objects.size()) + 2;
        std::vector<double> cx0(n_entities, 0), cy0(n_entities, 0), cx1(n_entities, 0),
            cy1(n_entities, 0);
        std::vector<int64_t> n0(n_entities, 0), n1(n_entities, 0);
        for (int y = 0; y < ids0.h; ++y)
            for (int x = 0; x < ids0.w; ++x) {
                int32_t a = ids0.at(y, x);
                cx0[a] += x; cy0[a] += y; ++n0[a];
                int32_t b = ids1.at(y, x);
                cx1[b] += x; cy1[b] += y; ++n1[b];
            }
        double acc = 0.0;
        int64_t count = 0;
        for (int y = 0; y < ids0.h; ++y)
            for (int x = 0; x < ids0.w; ++x) {
                const int32_t id = ids0.at(y, x);
                if (id == 0 || n0[id] == 0 || n1[id] == 0) continue;
                const double eu = cx1[id] / n1[id] - cx0[id] / n0[id];
                const double ev = cy1[id] / n1[id] - cy0[id] / n0[id];
                const int64_t i = y * ids0.w + x;
                const double du = analytic.u[i] - eu;
                const double dv = analytic.v[i] - ev;
                acc += std::sqrt(du * du + dv * dv);
                ++count;
            }
        if (count > 0) {
            worst_mean = std::max(worst_mean, acc / count);
            ++evaluated;
        }
    }
    res.pass = evaluated > 0 && worst_mean < 0.5;
    std::ostringstream os;
    os << evaluated << " pairs, worst mean abs diff " << worst_mean << " px";
    res.detail = os.str();
    res.seconds = elapsed(t0);
    return res;
}

CriterionResult run_motion_encoding(uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    CriterionResult res;
    res.name = "motion-encoding";
    RngStream rng(seed);
    const float d_max = 16.f;
    bool pass = true;
    double worst = 0.0;
    for (int c = 0; c < 16; ++c) {
        dawn::PixelMotion m = dawn::PixelMotion::zeros(16, 16);
        for (int64_t i = 0; i < m.numel(); ++i) {
            m.u[i] = static_cast<float>(rng.uniform(-d_max, d_max));
            m.v[i] = static_cast<float>(rng.uniform(-d_max, d_max));
        }
        dawn::MotionImage img = dawn::encode_motion(m, d_max);
        // exact third-channel identity on in-range flows
        const int64_t n = m.numel();
        for (int64_t i = 0; i < n; ++i)
            if (img.chw[2 * n + i] != 0.5f * (img.chw[i] + img.chw[n + i])) pass = false;
        dawn::PixelMotion rec = dawn::decode_motion(img, d_max);
        for (int64_t i = 0; i < n; ++i) {
            worst = std::max(worst, std::abs(static_cast<double>(rec.u[i]) - m.u[i]));
            worst = std::max(worst, std::abs(static_cast<double>(rec.v[i]) - m.v[i]));
        }
    }
    pass = pass && worst <= 1e-6;
    res.pass = pass;
    std::ostringstream os;
    os << "roundtrip max abs err " << worst << " px";
    res.detail = os.str();
    res.seconds = elapsed(t0);
    return res;
}

CriterionResult run_zero_init_conditioning(uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    CriterionResult res;
    res.name = "zero-init-conditioning";
    RngStream rng(seed);

    dawn::UNetSpec spec;
    spec.in_channels = 8;
    spec.out_channels = 4;
    spec.base_width = 32;
    spec.channel_mult = {1, 2};
    spec.attention_levels = {1};
    spec.context_dim = 24;
    spec.num_heads = 4;
    dawn::ParamStore ps;
    RngStream wrng = rng.derive("weights");
    dawn::UNet unet(ps, "unet", spec, wrng);

    dawn::Tensor x = dawn::Tensor::randn({2, 8, 8, 8}, rng);
    dawn::Tensor ctx = dawn::Tensor::randn({2, 5, 24}, rng);
    dawn::NoGradGuard ng;
    dawn::Tensor with_ctx = unet.forward(x, 7, ctx);
    dawn::Tensor without_ctx = unet.forward(x, 7, dawn::Tensor());
    bool identical = true;
    for (int64_t i = 0; i < with_ctx.numel(); ++i)
        if (with_ctx.data()[i] != without_ctx.data()[i]) identical = false;
    res.pass = identical;
    res.detail = identical ? "output bit-identical with and without context at init"
                           : "outputs differ at init";
    res.seconds = elapsed(t0);
    return res;
}

}  // namespace suites
