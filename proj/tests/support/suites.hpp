#pragma once

// Shared criterion runners used by both the doctest suites and the
// acceptance binary.

#include <string>
#include <vector>

namespace suites {

struct CriterionResult {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

// Finite-difference checks over every differentiable op, 64-bit, with
// `cases_per_op` random instances per op. Threshold 1e-4.
CriterionResult run_gradient_suite(uint64_t seed, int cases_per_op);

// q_sample moment check (1e5 draws, 3 sigma) plus the 25-step eta=0 DDIM
// oracle-inversion chain (tolerance 1e-4).
CriterionResult run_diffusion_algebra(uint64_t seed);

// analytic flow vs brute-force entity-correspondence flow on random episode
// pairs (mean abs diff < 0.5 px).
CriterionResult run_flow_oracle_equivalence(uint64_t seed, int pairs);

// encode/decode roundtrip (<= 1e-6) and exact third-channel identity.
CriterionResult run_motion_encoding(uint64_t seed);

// U-Net output bit-identical with and without context tokens at init.
CriterionResult run_zero_init_conditioning(uint64_t seed);

// Chained-eval report arithmetic: avg length == sum of per-position success
// rates recomputed from raw logs, exactly.
CriterionResult run_protocol_arithmetic(uint64_t seed);

// Byte-identical datasets / checkpoints / reports on re-run.
CriterionResult run_determinism(uint64_t seed, const std::string& workdir);

struct E2eOptions {
    uint64_t seed = 17;
    std::string workdir;
    int episodes = 1000;
    int vae_steps = 3000;
    int motion_steps = 8000;
    int action_steps = 3500;
    int eval_episodes = 100;
    int ablation_motion_steps = 4000;
    int ablation_action_steps = 2000;
    int ablation_eval_episodes = 25;
    int seeds_for_ablation = 3;
};

// Full desk run: gen-data -> train vae/motion/action -> eval; gates on
// decoded-flow EPE vs the zero-flow baseline and on lift success rates.
std::vector<CriterionResult> run_end_to_end(const E2eOptions& opt);

// Ablation orderings (pixel-motion >= rgb-goal >= none; gripper >= none;
// n=25 >= n=2), 3-seed mean. Reuses artifacts from run_end_to_end when
// present in the same workdir.
std::vector<CriterionResult> run_ablations(const E2eOptions& opt);

}  // namespace suites
