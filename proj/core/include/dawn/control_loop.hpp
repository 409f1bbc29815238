#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dawn/action_expert.hpp"
#include "dawn/motion_director.hpp"
#include "dawn/sim.hpp"

namespace dawn {

struct RolloutConfig {
    int max_steps = 500;
    int replan = 10;       // low-level steps executed per plan
    int n_motion = 25;     // Motion Director diffusion steps
    int n_action = 25;     // Action Expert diffusion steps
    int k = 16;            // temporal offset requested at inference
    ActionVariant variant = ActionVariant::pixel_motion;
    bool oracle_flow = false;  // derive the motion input from the simulator
    int chain = 1;
    std::string vis_dir;   // when set, per-replan motion panels are written
};

enum class Outcome { success = 0, wrong_object = 1, fail = 2 };
const char* outcome_name(Outcome o);

struct EpisodeLog {
    int episode = 0;
    int position = 1;  // 1-based chain position
    uint64_t seed = 0;
    TaskKind kind = TaskKind::lift;
    Outcome outcome = Outcome::fail;
    int steps = 0;
    int motion_invocations = 0;
    int plans = 0;
    bool wrong_lift = false;
    bool wrong_place = false;
    uint64_t trace_hash = 0;  // rolling hash over world states (determinism checks)
};

// A policy plans the next chunk of low-level actions from the current
// observation; used_motion reports whether a motion model was invoked.
class ChunkPolicy {
  public:
    virtual ~ChunkPolicy() = default;
    struct Plan {
        std::vector<SimAction> actions;
        bool used_motion = false;
    };
    virtual Plan plan(const WorldState& ws, const Task& task, const Observation& obs,
                      RngStream& rng) = 0;
};

// Harness sanity baseline: replays the scripted expert through plan().
class ExpertPolicy : public ChunkPolicy {
  public:
    explicit ExpertPolicy(int horizon) : horizon_(horizon) {}
    Plan plan(const WorldState& ws, const Task& task, const Observation& obs,
              RngStream& rng) override;

  private:
    int horizon_;
};

// The two-stage pipeline (or its ablations).
class ModelPolicy : public ChunkPolicy {
  public:
    ModelPolicy(const MotionDirector* motion, const ActionExpert* action, RolloutConfig cfg);
    Plan plan(const WorldState& ws, const Task& task, const Observation& obs,
              RngStream& rng) override;
    const MotionImage* last_motion() const { return have_motion_ ? &last_motion_ : nullptr; }
    float d_max() const;

  private:
    const MotionDirector* motion_;
    const ActionExpert* action_;
    RolloutConfig cfg_;
    MotionImage last_motion_;
    bool have_motion_ = false;
};

// Closed loop: observe, plan, execute the first `replan` actions, check
// success after every step.
EpisodeLog rollout(WorldState& ws, const Task& task, ChunkPolicy& policy, const RolloutConfig& cfg,
                   RngStream rng);

struct EvalReport {
    std::vector<EpisodeLog> rows;
    int episodes = 0;
    int chain = 1;
    // aggregates
    double success_rate = 0.0;
    double wrong_object_rate = 0.0;
    std::vector<double> per_position;      // success rate by chain position
    std::vector<int64_t> position_counts;  // successes by position
    double avg_length = 0.0;
    double per_kind_success[3] = {0, 0, 0};
    int64_t per_kind_total[3] = {0, 0, 0};
    double per_kind_wrong[3] = {0, 0, 0};

    void finalize();
};

using PolicyFactory = std::function<std::unique_ptr<ChunkPolicy>()>;

// Chained evaluation: task i starts from the end state of task i-1; a chain
// stops at the first failure. chain == 1 reduces to single-task scoring.
EvalReport evaluate(const PolicyFactory& make_policy, const RolloutConfig& cfg, int episodes,
                    uint64_t seed, std::optional<TaskKind> only_kind = std::nullopt);

void write_report_csv(const std::string& dir, const EvalReport& report);

struct SweepRow {
    int n_steps;
    double avg_length;
    double success_rate;
};
std::vector<SweepRow> sweep_motion_steps(const MotionDirector& motion, const ActionExpert& action,
                                         RolloutConfig cfg, const std::vector<int>& steps_list,
                                         int episodes, uint64_t seed);

}  // namespace dawn
