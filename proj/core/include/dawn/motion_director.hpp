#pragma once

#include <string>
#include <vector>

#include "dawn/checkpoint.hpp"
#include "dawn/dataset.hpp"
#include "dawn/diffusion.hpp"
#include "dawn/nn.hpp"

namespace dawn {

// Convolutional VAE shared by RGB frames and encoded motion images: both
// live in [-1,1] and pass through the same weights. 64x64x3 <-> 8x8x4.
struct VaeSpec {
    int base = 32;
    int latent_ch = 4;
};

struct MotionVAE {
    VaeSpec spec;
    ParamStore params;
    bool frozen = false;
    float latent_scale = 1.0f;

    Conv2dT<float> e1, e2, e3, e4, e_out;
    GroupNormT<float> en1, en2, en3, en4;
    Conv2dT<float> d_in, d1, d2, d3, d4, d_out;
    GroupNormT<float> dn0, dn1, dn2, dn3, dn4;

    MotionVAE() = default;
    MotionVAE(VaeSpec spec, RngStream& rng);

    // x in [-1,1], [B,3,64,64] -> (mu, logvar) each [B,4,8,8]
    std::pair<Tensor, Tensor> encode(const Tensor& x) const;
    Tensor encode_mu(const Tensor& x) const;
    Tensor decode(const Tensor& z) const;  // [B,4,8,8] -> [B,3,64,64], tanh range
    void freeze();
    uint64_t checksum() const { return param_checksum(params); }
};

struct VaeTrainOptions {
    int steps = 3000;
    int batch = 16;
    float lr = 1e-4f;
    float weight_decay = 0.0f;
    float kl_weight = 1e-6f;
    uint64_t seed = 17;
};

struct TrainLogRow {
    int step;
    float loss;
};

// Trains on an even mix of static frames and encoded ground-truth motion
// images, then freezes the weights and calibrates latent_scale.
std::vector<TrainLogRow> train_vae(MotionVAE& vae, const Dataset& data, float d_max,
                                   const VaeTrainOptions& opt);

double vae_psnr(const MotionVAE& vae, const Dataset& data, int num_frames, uint64_t seed);

enum class MotionTarget { pixel_motion, rgb_goal };

struct MotionDirectorSpec {
    UNetSpec unet;  // defaults: in 8 (4 noisy + 4 clean cond), out 4, base 64, mult 1/2/4
    int ctx_dim = 64;
    int text_width = 64;
    int text_depth = 2;
    int text_heads = 4;
    bool use_gripper = true;
    MotionTarget target = MotionTarget::pixel_motion;
    ScheduleKind schedule = ScheduleKind::cosine;
    int t_train = 1000;
    float d_max = 16.0f;
    int k_min = 4;
    int k_max = 16;

    static MotionDirectorSpec defaults();
};

// The high-level stage: a conditioned latent diffusion model over 4-channel
// motion latents, with the clean frame latent concatenated on the channel
// axis at every denoising step.
struct MotionDirector {
    MotionDirectorSpec spec;
    NoiseSchedule sched;
    MotionVAE vae;      // frozen during diffusion training
    ParamStore params;  // denoiser + context encoders
    UNet unet;
    ConvTokenizer gripper_enc;
    TextEncoder text_enc;
    LinearT<float> offset_mlp1, offset_mlp2;
    Tensor token_type;  // [3, ctx_dim]: gripper / text / offset

    MotionDirector() = default;
    MotionDirector(MotionDirectorSpec spec, MotionVAE vae, RngStream& rng);

    // gripper [B,3,32,32] in [-1,1]; tokens flat B*len; ks one offset per row.
    Tensor build_context(const Tensor& gripper, const std::vector<int32_t>& tokens, int token_len,
                         const std::vector<int>& ks) const;
};

struct MotionTrainOptions {
    int steps = 20000;
    int batch = 16;
    float lr = 1e-4f;
    float weight_decay = 0.0f;
    uint64_t seed = 17;
    std::string sample_dir;  // when set, writes a sample panel every sample_every
    int sample_every = 1000;
    bool verbose = false;
};

std::vector<TrainLogRow> train_motion(MotionDirector& model, const Dataset& data,
                                      const MotionTrainOptions& opt);

struct GeneratedMotion {
    MotionImage image;
    PixelMotion flow;
};

GeneratedMotion generate_motion(const MotionDirector& model, const Observation& obs, int k,
                                int n_steps, RngStream& rng);
// rgb-goal variant: predicted future frame in [0,1].
ImageF generate_rgb_goal(const MotionDirector& model, const Observation& obs, int k, int n_steps,
                         RngStream& rng);

// Checkpoint bridging.
Checkpoint vae_checkpoint(const MotionVAE& vae);
MotionVAE vae_from_checkpoint(const Checkpoint& ck);
Checkpoint motion_checkpoint(const MotionDirector& model);
MotionDirector motion_from_checkpoint(const Checkpoint& ck);

}  // namespace dawn
