#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dawn/tensor.hpp"

namespace dawn {

enum class ScheduleKind { linear, cosine };

const char* schedule_kind_name(ScheduleKind k);
ScheduleKind schedule_kind_from_name(const std::string& name);

// Forward-process schedule. alpha_bars are cumulative products computed
// from the betas, strictly decreasing with alpha_bars[0] close to 1.
struct NoiseSchedule {
    int T = 1000;
    ScheduleKind kind = ScheduleKind::cosine;
    std::vector<double> betas, alphas, alpha_bars;

    static NoiseSchedule make(ScheduleKind kind, int T);
    // alpha_bar with the t = -1 convention mapping to 1 (fully denoised).
    double alpha_bar(int t) const;
};

struct SamplerConfig {
    int n_steps = 25;
    double eta = 0.0;  // 0 = deterministic
};

// Evenly spaced timestep subsequence including the terminal timestep,
// returned descending (first entry is T-1).
std::vector<int> sampler_timesteps(const NoiseSchedule& sched, int n_steps);

// Denoiser closure: (x_t, per-sample timesteps) -> eps_hat. Conditioning is
// captured by the caller; the sampler is oblivious to data semantics.
template <class S>
using DenoiseFn = std::function<TensorT<S>(const TensorT<S>&, std::span<const int>)>;

// sqrt(ab_t) x0 + sqrt(1-ab_t) eps.
template <class S>
TensorT<S> q_sample(const TensorT<S>& x0, int t, const TensorT<S>& eps, const NoiseSchedule& sched);
template <class S>
TensorT<S> q_sample(const TensorT<S>& x0, std::span<const int> ts, const TensorT<S>& eps,
                    const NoiseSchedule& sched);

// MSE noise-estimation loss with per-sample t uniform over [0, T).
template <class S>
TensorT<S> eps_loss(const DenoiseFn<S>& model, const TensorT<S>& x0, const NoiseSchedule& sched,
                    RngStream& rng);
// Same with a per-position mask (x0 [B,L,D], mask [B,L] of 0/1).
template <class S>
TensorT<S> eps_loss_masked(const DenoiseFn<S>& model, const TensorT<S>& x0, const TensorT<S>& mask,
                           const NoiseSchedule& sched, RngStream& rng);

template <class S>
TensorT<S> ddim_step(const TensorT<S>& x_t, const TensorT<S>& eps_hat, int t, int t_prev,
                     const NoiseSchedule& sched, double eta, RngStream& rng);

// Iterative DDIM sampling from pure noise over the chosen timestep
// subsequence. Aborts with the step index on non-finite model output.
template <class S>
TensorT<S> sample(const DenoiseFn<S>& model, const Shape& shape, const NoiseSchedule& sched,
                  const SamplerConfig& cfg, RngStream& rng);

// Full-length ancestral DDPM sampling; independent reference route used by
// the DDIM eta=1 equivalence property.
template <class S>
TensorT<S> sample_ddpm(const DenoiseFn<S>& model, const Shape& shape, const NoiseSchedule& sched,
                       RngStream& rng);

}  // namespace dawn
