#pragma once

#include <string>
#include <vector>

#include "dawn/common.hpp"

namespace dawn {

// Flat key=value run configuration. Precedence: CLI > config file >
// defaults. Unknown keys are rejected; every run writes its resolved
// configuration next to its outputs.
struct RunConfig {
    // shared
    uint64_t seed = 17;
    int threads = 0;  // 0 = automatic
    std::string out;
    std::string data;

    // gen-data
    int episodes = 1000;

    // training
    std::string stage;  // vae | motion | action
    std::string variant = "pixel-motion";  // none | rgb-goal | pixel-motion
    int steps = -1;     // -1 = per-stage default (vae 3000, motion 20000, action 5000)
    double lr = 1e-4;
    double weight_decay = 0.0;
    int batch = 16;
    std::string schedule = "cosine";  // linear | cosine
    int t_train = 1000;
    double d_max = 16.0;
    int kmin = 4;
    int kmax = 16;
    int use_gripper = 1;
    std::string motion_source = "oracle";  // oracle | generated
    int sample_every = 1000;

    // checkpoints
    std::string vae_ckpt;
    std::string motion_ckpt;
    std::string action_ckpt;

    // rollout / eval
    int eval_episodes = 100;
    int chain = 5;
    int max_steps = 500;
    int replan = 10;
    int k_infer = 16;
    int n_motion = 25;
    int n_action = 25;
    int oracle_flow = 0;
    std::string suite = "single";  // single | chained
    std::string steps_sweep;       // e.g. "2,10,25,40"
    int vis = 0;

    // visualize
    std::string episode_file;
    int obs_index = 0;
    int frames = 1;

    static const std::vector<std::string>& known_keys();
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    std::string resolved() const;  // sorted key = value lines
    void load_file(const std::string& path);
    void write_resolved(const std::string& dir) const;

    int default_steps() const;
};

}  // namespace dawn
