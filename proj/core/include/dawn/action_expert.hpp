#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dawn/checkpoint.hpp"
#include "dawn/dataset.hpp"
#include "dawn/diffusion.hpp"
#include "dawn/motion_director.hpp"
#include "dawn/nn.hpp"

namespace dawn {

enum class ActionVariant { none = 0, rgb_goal = 1, pixel_motion = 2 };

const char* action_variant_name(ActionVariant v);
ActionVariant action_variant_from_name(const std::string& name);

// Length-h sequence of continuous actions in simulator units.
struct ActionChunk {
    int h = 0;
    std::vector<std::array<float, 3>> actions;
};

struct ActionExpertSpec {
    TransformerSpec dit;  // depth 4, width 256, 4 heads over the h-token chunk
    int ctx_dim = 128;
    std::vector<int> vis_widths = {16, 32, 64, 128};  // shared encoder V_A, stride-2 blocks
    int text_width = 64;
    int text_depth = 2;
    int text_heads = 4;
    int state_hidden = 64;
    ActionVariant variant = ActionVariant::pixel_motion;
    ScheduleKind schedule = ScheduleKind::cosine;
    int t_train = 1000;
    int h = 10;
    int action_dim = 3;
    float d_max = 16.0f;
    int train_k = 16;  // offset for the oracle-flow motion input

    static ActionExpertSpec defaults();
};

// The low-level stage: a diffusion transformer denoising action chunks,
// conditioned via cross-attention on a shared visual encoder over the
// motion image and both views, a text encoder, and a state MLP. With
// variant = none the motion slot is absent (diffusion-policy baseline).
struct ActionExpert {
    ActionExpertSpec spec;
    NoiseSchedule sched;
    ParamStore params;
    ConvTokenizer visual_enc;  // V_A, shared across motion/static/gripper inputs
    TextEncoder text_enc;      // T_A
    LinearT<float> state_mlp1, state_mlp2;  // S_A
    DiT dit;                   // U_A
    Tensor token_type;         // [5, ctx_dim]: motion/static/gripper/text/state
    std::array<float, 3> act_min{}, act_max{};

    ActionExpert() = default;
    ActionExpert(ActionExpertSpec spec, RngStream& rng);

    // motion: [B,3,64,64] in [-1,1] (motion image or rgb-goal frame);
    // undefined iff variant == none.
    Tensor encode_context(const Tensor& motion, const Tensor& static_frame, const Tensor& gripper,
                          const std::vector<int32_t>& tokens, const Tensor& state) const;

    std::array<float, 3> normalize(const std::array<float, 3>& a) const;
    std::array<float, 3> denormalize(const std::array<float, 3>& a) const;
};

struct ActionTrainOptions {
    int steps = 5000;
    int batch = 16;
    float lr = 1e-4f;
    float weight_decay = 0.0f;
    uint64_t seed = 17;
    bool verbose = false;
    // when motion_source == generated, sample the motion input from this
    // model instead of the analytic-flow oracle
    const MotionDirector* generator = nullptr;
    int generator_steps = 10;
};

std::vector<TrainLogRow> train_action(ActionExpert& model, const Dataset& data,
                                      const ActionTrainOptions& opt);

// DDIM-samples one chunk, denormalized and clamped to action bounds.
ActionChunk predict_chunk(const ActionExpert& model, const Observation& obs,
                          const MotionImage* motion, const ImageF* goal_frame, int n_steps,
                          RngStream& rng);

// Mean squared error of predicted chunks vs expert actions on held-out
// frames, with oracle-flow motion input; `zero_baseline` reports the same
// metric for an all-zero prediction.
struct ChunkMse {
    double model = 0.0;
    double zero_baseline = 0.0;
};
ChunkMse heldout_chunk_mse(const ActionExpert& model, const Dataset& data, int samples,
                           int n_steps, uint64_t seed);

Checkpoint action_checkpoint(const ActionExpert& model, const std::string& motion_source);
ActionExpert action_from_checkpoint(const Checkpoint& ck);

}  // namespace dawn
