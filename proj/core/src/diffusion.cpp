#include "dawn/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace dawn {

const char* schedule_kind_name(ScheduleKind k) {
    return k == ScheduleKind::linear ? "linear" : "cosine";
}

ScheduleKind schedule_kind_from_name(const std::string& name) {
    if (name == "linear") return ScheduleKind::linear;
    if (name == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule kind: " + name);
}

NoiseSchedule NoiseSchedule::make(ScheduleKind kind, int T) {
    if (T < 1) throw ConfigError("schedule needs T >= 1");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.betas.resize(T);
    if (kind == ScheduleKind::linear) {
        const double b0 = 1e-4, b1 = 0.02;
        for (int t = 0; t < T; ++t)
            s.betas[t] = T == 1 ? b0 : b0 + (b1 - b0) * t / (T - 1);
    } else {
        // Squared-cosine alpha_bar profile, betas derived from its ratios.
        const double eps = 0.008;
        auto f = [&](double u) {
            double c = std::cos((u + eps) / (1.0 + eps) * M_PI / 2.0);
            return c * c;
        };
        double prev = 1.0;
        for (int t = 0; t < T; ++t) {
            double ab = f(static_cast<double>(t + 1) / T) / f(0.0);
            double beta = 1.0 - ab / prev;
            s.betas[t] = std::clamp(beta, 1e-8, 0.999);
            prev = ab;
        }
    }
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.alphas[t] = 1.0 - s.betas[t];
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }
    return s;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == -1) return 1.0;
    if (t < 0 || t >= T) throw ContractError("timestep " + std::to_string(t) + " out of range");
    return alpha_bars[t];
}

std::vector<int> sampler_timesteps(const NoiseSchedule& sched, int n_steps) {
    if (n_steps < 1 || n_steps > sched.T)
        throw ContractError("n_steps must be in [1, T], got " + std::to_string(n_steps));
    std::vector<int> taus;
    if (n_steps == 1) {
        taus.push_back(sched.T - 1);
        return taus;
    }
    for (int j = n_steps - 1; j >= 0; --j) {
        int t = static_cast<int>(std::llround(static_cast<double>(sched.T - 1) * j / (n_steps - 1)));
        if (taus.empty() || taus.back() != t) taus.push_back(t);
    }
    return taus;
}

template <class S>
TensorT<S> q_sample(const TensorT<S>& x0, int t, const TensorT<S>& eps, const NoiseSchedule& sched) {
    std::vector<int> ts(x0.size(0), t);
    return q_sample(x0, std::span<const int>(ts), eps, sched);
}

template <class S>
TensorT<S> q_sample(const TensorT<S>& x0, std::span<const int> ts, const TensorT<S>& eps,
                    const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape())
        throw ShapeError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
    if (static_cast<int64_t>(ts.size()) != x0.size(0))
        throw ContractError("q_sample: one timestep per batch element required");
    const int64_t B = x0.size(0);
    const int64_t per = x0.numel() / B;
    std::vector<S> ca(B), cb(B);
    for (int64_t b = 0; b < B; ++b) {
        double ab = sched.alpha_bar(ts[b]);
        ca[b] = static_cast<S>(std::sqrt(ab));
        cb[b] = static_cast<S>(std::sqrt(1.0 - ab));
    }
    Shape cshape(x0.ndim(), 1);
    cshape[0] = B;
    (void)per;
    TensorT<S> a = TensorT<S>::from_data(cshape, std::move(ca));
    TensorT<S> b = TensorT<S>::from_data(cshape, std::move(cb));
    return add(mul(x0, a), mul(eps, b));
}

template <class S>
TensorT<S> eps_loss(const DenoiseFn<S>& model, const TensorT<S>& x0, const NoiseSchedule& sched,
                    RngStream& rng) {
    const int64_t B = x0.size(0);
    std::vector<int> ts(B);
    for (int64_t b = 0; b < B; ++b) ts[b] = static_cast<int>(rng.uniform_int(sched.T));
    TensorT<S> eps = TensorT<S>::randn(x0.shape(), rng);
    TensorT<S> x_t = q_sample(x0, std::span<const int>(ts), eps, sched);
    TensorT<S> eps_hat = model(x_t, ts);
    if (eps_hat.shape() != x0.shape())
        throw ShapeError("eps_loss: model output " + shape_str(eps_hat.shape()) +
                         " does not match x0 " + shape_str(x0.shape()));
    return mse(eps_hat, eps);
}

template <class S>
TensorT<S> eps_loss_masked(const DenoiseFn<S>& model, const TensorT<S>& x0, const TensorT<S>& mask,
                           const NoiseSchedule& sched, RngStream& rng) {
    const int64_t B = x0.size(0);
    std::vector<int> ts(B);
    for (int64_t b = 0; b < B; ++b) ts[b] = static_cast<int>(rng.uniform_int(sched.T));
    TensorT<S> eps = TensorT<S>::randn(x0.shape(), rng);
    TensorT<S> x_t = q_sample(x0, std::span<const int>(ts), eps, sched);
    TensorT<S> eps_hat = model(x_t, ts);
    TensorT<S> d = sub(eps_hat, eps);
    TensorT<S> m3 = reshape(mask, {mask.size(0), mask.size(1), 1});
    TensorT<S> masked = mul(mul(d, d), m3);
    S denom = S(0);
    for (S v : mask.data()) denom += v;
    denom *= static_cast<S>(x0.size(2));
    return mul(sum(masked), S(1) / denom);
}

template <class S>
TensorT<S> ddim_step(const TensorT<S>& x_t, const TensorT<S>& eps_hat, int t, int t_prev,
                     const NoiseSchedule& sched, double eta, RngStream& rng) {
    if (t_prev >= t) throw ContractError("ddim_step requires t_prev < t");
    const double ab_t = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    if (ab_t <= 0.0) throw ContractError("ddim_step: alpha_bar(t) must be positive");
    const double sigma =
        eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    // x0_hat = (x_t - sqrt(1-ab_t) eps_hat) / sqrt(ab_t)
    TensorT<S> x0_hat = mul(sub(x_t, mul(eps_hat, static_cast<S>(std::sqrt(1.0 - ab_t)))),
                            static_cast<S>(1.0 / std::sqrt(ab_t)));
    const double dir_coef = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    TensorT<S> x_prev = add(mul(x0_hat, static_cast<S>(std::sqrt(ab_prev))),
                            mul(eps_hat, static_cast<S>(dir_coef)));
    if (eta > 0.0 && sigma > 0.0) {
        TensorT<S> z = TensorT<S>::randn(x_t.shape(), rng);
        x_prev = add(x_prev, mul(z, static_cast<S>(sigma)));
    }
    return x_prev;
}

namespace {

template <class S>
void check_finite(const TensorT<S>& x, int step) {
    for (S v : x.data())
        if (std::isnan(v) || std::isinf(v))
            throw NumericError("non-finite model output at sampler step " + std::to_string(step));
}

}  // namespace

template <class S>
TensorT<S> sample(const DenoiseFn<S>& model, const Shape& shape, const NoiseSchedule& sched,
                  const SamplerConfig& cfg, RngStream& rng) {
    if (cfg.eta < 0.0 || cfg.eta > 1.0) throw ContractError("eta must be in [0,1]");
    std::vector<int> taus = sampler_timesteps(sched, cfg.n_steps);
    TensorT<S> x = TensorT<S>::randn(shape, rng);
    std::vector<int> ts(shape[0]);
    for (size_t i = 0; i < taus.size(); ++i) {
        const int t = taus[i];
        const int t_prev = i + 1 < taus.size() ? taus[i + 1] : -1;
        std::fill(ts.begin(), ts.end(), t);
        TensorT<S> eps_hat = model(x, ts);
        check_finite(eps_hat, static_cast<int>(i));
        x = ddim_step(x, eps_hat, t, t_prev, sched, cfg.eta, rng);
    }
    return x;
}

template <class S>
TensorT<S> sample_ddpm(const DenoiseFn<S>& model, const Shape& shape, const NoiseSchedule& sched,
                       RngStream& rng) {
    TensorT<S> x = TensorT<S>::randn(shape, rng);
    std::vector<int> ts(shape[0]);
    for (int t = sched.T - 1; t >= 0; --t) {
        std::fill(ts.begin(), ts.end(), t);
        TensorT<S> eps_hat = model(x, ts);
        check_finite(eps_hat, t);
        const double ab = sched.alpha_bars[t];
        const double ab_prev = t > 0 ? sched.alpha_bars[t - 1] : 1.0;
        const double beta = sched.betas[t];
        const double alpha = sched.alphas[t];
        // Posterior mean, then the beta-tilde posterior variance.
        TensorT<S> mean = mul(sub(x, mul(eps_hat, static_cast<S>(beta / std::sqrt(1.0 - ab)))),
                              static_cast<S>(1.0 / std::sqrt(alpha)));
        if (t > 0) {
            const double var = (1.0 - ab_prev) / (1.0 - ab) * beta;
            TensorT<S> z = TensorT<S>::randn(shape, rng);
            x = add(mean, mul(z, static_cast<S>(std::sqrt(var))));
        } else {
            x = mean;
        }
    }
    return x;
}

#define DAWN_DIFF_INSTANTIATE(S)                                                                 \
    template TensorT<S> q_sample<S>(const TensorT<S>&, int, const TensorT<S>&,                   \
                                    const NoiseSchedule&);                                       \
    template TensorT<S> q_sample<S>(const TensorT<S>&, std::span<const int>, const TensorT<S>&,  \
                                    const NoiseSchedule&);                                       \
    template TensorT<S> eps_loss<S>(const DenoiseFn<S>&, const TensorT<S>&, const NoiseSchedule&, \
                                    RngStream&);                                                 \
    template TensorT<S> eps_loss_masked<S>(const DenoiseFn<S>&, const TensorT<S>&,               \
                                           const TensorT<S>&, const NoiseSchedule&, RngStream&); \
    template TensorT<S> ddim_step<S>(const TensorT<S>&, const TensorT<S>&, int, int,             \
                                     const NoiseSchedule&, double, RngStream&);                  \
    template TensorT<S> sample<S>(const DenoiseFn<S>&, const Shape&, const NoiseSchedule&,       \
                                  const SamplerConfig&, RngStream&);                             \
    template TensorT<S> sample_ddpm<S>(const DenoiseFn<S>&, const Shape&, const NoiseSchedule&,  \
                                       RngStream&);

DAWN_DIFF_INSTANTIATE(float)
DAWN_DIFF_INSTANTIATE(double)

}  // namespace dawn
