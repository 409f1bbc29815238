#include "dawn/control_loop.hpp"

#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace dawn {

const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::success: return "success";
        case Outcome::wrong_object: return "wrong_object";
        default: return "fail";
    }
}

ChunkPolicy::Plan ExpertPolicy::plan(const WorldState& ws, const Task& task, const Observation&,
                                     RngStream&) {
    Plan p;
    WorldState sim = ws;
    for (int i = 0; i < horizon_; ++i) {
        ExpertOut ex = scripted_expert(sim, task);
        p.actions.push_back(ex.action);
        step(sim, ex.action);
    }
    return p;
}

ModelPolicy::ModelPolicy(const MotionDirector* motion, const ActionExpert* action,
                         RolloutConfig cfg)
    : motion_(motion), action_(action), cfg_(std::move(cfg)) {
    if (!action_) throw ContractError("model policy needs an action expert");
    if (action_->spec.variant != cfg_.variant)
        throw IncompatibleError(std::string("action checkpoint variant '") +
                                action_variant_name(action_->spec.variant) +
                                "' does not match the configured variant '" +
                                action_variant_name(cfg_.variant) + "'");
    if (cfg_.variant != ActionVariant::none && !cfg_.oracle_flow) {
        if (!motion_) throw IncompatibleError("variant requires a motion model or oracle flow");
        const bool wants_rgb = cfg_.variant == ActionVariant::rgb_goal;
        const bool is_rgb = motion_->spec.target == MotionTarget::rgb_goal;
        if (wants_rgb != is_rgb)
            throw IncompatibleError(std::string("motion checkpoint generates '") +
                                    (is_rgb ? "rgb-goal" : "pixel-motion") +
                                    "' but the variant is '" + action_variant_name(cfg_.variant) +
                                    "'");
    }
}

namespace {

// Oracle motion at evaluation time: roll a copy of the environment forward
// with the scripted expert and read off the analytic flow (or future frame).
PixelMotion oracle_flow_ahead(const WorldState& ws, const Task& task, int k, IdBuffer& ids_out) {
    WorldState sim = ws;
    ids_out = render_ids(sim);
    WorldState start = sim;
    for (int i = 0; i < k; ++i) {
        ExpertOut ex = scripted_expert(sim, task);
        step(sim, ex.action);
    }
    return analytic_flow(start, sim, ids_out);
}

ImageF oracle_goal_ahead(const WorldState& ws, const Task& task, int k) {
    WorldState sim = ws;
    for (int i = 0; i < k; ++i) {
        ExpertOut ex = scripted_expert(sim, task);
        step(sim, ex.action);
    }
    return render_static(sim).frame;
}

}  // namespace

float ModelPolicy::d_max() const { return action_->spec.d_max; }

ChunkPolicy::Plan ModelPolicy::plan(const WorldState& ws, const Task& task, const Observation& obs,
                                    RngStream& rng) {
    Plan p;
    const MotionImage* motion_in = nullptr;
    const ImageF* goal_in = nullptr;
    MotionImage mi;
    ImageF goal;
    have_motion_ = false;
    if (cfg_.variant == ActionVariant::pixel_motion) {
        if (cfg_.oracle_flow) {
            IdBuffer ids;
            mi = encode_motion(oracle_flow_ahead(ws, task, cfg_.k, ids), action_->spec.d_max);
        } else {
            RngStream mrng = rng.derive("motion");
            mi = generate_motion(*motion_, obs, cfg_.k, cfg_.n_motion, mrng).image;
            p.used_motion = true;
        }
        motion_in = &mi;
        last_motion_ = mi;
        have_motion_ = true;
    } else if (cfg_.variant == ActionVariant::rgb_goal) {
        if (cfg_.oracle_flow) {
            goal = oracle_goal_ahead(ws, task, cfg_.k);
        } else {
            RngStream mrng = rng.derive("motion");
            goal = generate_rgb_goal(*motion_, obs, cfg_.k, cfg_.n_motion, mrng);
            p.used_motion = true;
        }
        goal_in = &goal;
    }
    RngStream arng = rng.derive("action");
    ActionChunk chunk = predict_chunk(*action_, obs, motion_in, goal_in, cfg_.n_action, arng);
    for (const auto& a : chunk.actions) p.actions.push_back(SimAction{a[0], a[1], a[2]});
    return p;
}

namespace {

uint64_t hash_world(uint64_t h, const WorldState& ws) {
    auto mix = [&h](double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        h ^= bits;
        h *= 0x100000001b3ull;
    };
    mix(ws.gripper.pos.x);
    mix(ws.gripper.pos.y);
    mix(ws.gripper.grip);
    mix(static_cast<double>(ws.gripper.held));
    for (const auto& o : ws.objects) {
        mix(o.center.x);
        mix(o.center.y);
    }
    return h;
}

}  // namespace

EpisodeLog rollout(WorldState& ws, const Task& task, ChunkPolicy& policy, const RolloutConfig& cfg,
                   RngStream rng) {
    if (cfg.replan < 1) throw ContractError("replan interval must be >= 1");
    EpisodeLog log;
    log.kind = task.kind;
    log.trace_hash = 0xcbf29ce484222325ull;
    const int tid = find_target(ws, task);
    int wrong_id = -1;
    int executed = 0;
    bool done = success(ws, task);
    int replan_i = 0;
    while (!done && executed < cfg.max_steps) {
        Observation obs = observe(ws, task);
        RngStream prng = rng.derive("plan", replan_i++);
        ChunkPolicy::Plan plan = policy.plan(ws, task, obs, prng);
        ++log.plans;
        if (plan.used_motion) ++log.motion_invocations;
        if (!cfg.vis_dir.empty()) {
            if (auto* mp = dynamic_cast<ModelPolicy*>(&policy); mp && mp->last_motion()) {
                std::filesystem::create_directories(cfg.vis_dir);
                char name[64];
                std::snprintf(name, sizeof(name), "replan%04d.ppm", log.plans);
                const float dm = mp->d_max();
                write_ppm((std::filesystem::path(cfg.vis_dir) / name).string(),
                          hstack({obs.static_frame,
                                  colorize_motion(decode_motion(*mp->last_motion(), dm), dm)}));
            }
        }
        const int to_run = std::min<int>(cfg.replan, static_cast<int>(plan.actions.size()));
        for (int i = 0; i < to_run && !done && executed < cfg.max_steps; ++i) {
            step(ws, plan.actions[i]);
            ++executed;
            log.trace_hash = hash_world(log.trace_hash, ws);
            if (ws.gripper.held >= 0 && ws.gripper.held != tid) {
                log.wrong_lift = true;
                wrong_id = ws.gripper.held;
            }
            if (wrong_id >= 0 && ws.gripper.held == -1) {
                const SimObject* wo = ws.object_by_id(wrong_id);
                if (wo && ws.bin.contains(wo->center)) log.wrong_place = true;
            }
            done = success(ws, task);
        }
        if (plan.actions.empty()) break;  // defensive: a policy with no plan cannot progress
    }
    log.steps = executed;
    log.outcome = done ? Outcome::success
                       : (log.wrong_lift ? Outcome::wrong_object : Outcome::fail);
    return log;
}

void EvalReport::finalize() {
    per_position.assign(chain, 0.0);
    position_counts.assign(chain, 0);
    int64_t succ = 0, wrong = 0;
    for (const auto& r : rows) {
        const int k = static_cast<int>(r.kind);
        ++per_kind_total[k];
        if (r.outcome == Outcome::success) {
            ++succ;
            ++position_counts[r.position - 1];
            per_kind_success[k] += 1;
        }
        if (r.outcome == Outcome::wrong_object) {
            ++wrong;
            per_kind_wrong[k] += 1;
        }
    }
    for (int k = 0; k < 3; ++k) {
        if (per_kind_total[k] > 0) {
            per_kind_success[k] /= per_kind_total[k];
            per_kind_wrong[k] /= per_kind_total[k];
        }
    }
    success_rate = rows.empty() ? 0.0 : static_cast<double>(succ) / rows.size();
    wrong_object_rate = rows.empty() ? 0.0 : static_cast<double>(wrong) / rows.size();
    int64_t total_successes = 0;
    for (int p = 0; p < chain; ++p) {
        per_position[p] = episodes > 0 ? static_cast<double>(position_counts[p]) / episodes : 0.0;
        total_successes += position_counts[p];
    }
    avg_length = episodes > 0 ? static_cast<double>(total_successes) / episodes : 0.0;
}

EvalReport evaluate(const PolicyFactory& make_policy, const RolloutConfig& cfg, int episodes,
                    uint64_t seed, std::optional<TaskKind> only_kind) {
    if (episodes <= 0) throw ContractError("evaluate needs at least one episode");
    EvalReport report;
    report.episodes = episodes;
    report.chain = cfg.chain;
    RngStream root(seed);
    for (int e = 0; e < episodes; ++e) {
        RngStream erng = root.derive("episode", e);
        ResetResult rr = reset(erng);
        if (only_kind) {
            // resample the task on the same world until it matches the suite
            int guard = 0;
            while (rr.task.kind != *only_kind && guard++ < 64) {
                RngStream trng = erng.derive("task", guard);
                rr.task = sample_task_on_world(rr.world, trng);
            }
            if (rr.task.kind != *only_kind) {
                rr.task.kind = *only_kind;
                rr.task.goal_side = -1;
                if (*only_kind == TaskKind::push_to_region) {
                    rr.task.goal_side = 0;
                    rr.task.goal_region = goal_strip(0);
                }
            }
            rr.world.goal_side = rr.task.goal_side;
        }
        WorldState ws = rr.world;
        Task task = rr.task;
        auto policy = make_policy();
        for (int pos = 1; pos <= cfg.chain; ++pos) {
            if (pos > 1) {
                RngStream trng = erng.derive("chain-task", pos);
                task = sample_task_on_world(ws, trng);
                ws.goal_side = task.goal_side;
            }
            EpisodeLog log = rollout(ws, task, *policy, cfg, erng.derive("rollout", pos));
            log.episode = e;
            log.position = pos;
            log.seed = erng.seed();
            report.rows.push_back(log);
            if (log.outcome != Outcome::success) break;
        }
    }
    report.finalize();
    return report;
}

void write_report_csv(const std::string& dir, const EvalReport& report) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(std::filesystem::path(dir) / "episodes.csv");
        if (!f) throw IoError("cannot write episodes.csv in " + dir);
        f << "episode,position,seed,task,outcome,steps,plans,motion_invocations,wrong_lift,"
             "wrong_place\n";
        for (const auto& r : report.rows)
            f << r.episode << ',' << r.position << ',' << r.seed << ',' << task_kind_name(r.kind)
              << ',' << outcome_name(r.outcome) << ',' << r.steps << ',' << r.plans << ','
              << r.motion_invocations << ',' << (r.wrong_lift ? 1 : 0) << ','
              << (r.wrong_place ? 1 : 0) << "\n";
    }
    {
        std::ofstream f(std::filesystem::path(dir) / "summary.csv");
        if (!f) throw IoError("cannot write summary.csv in " + dir);
        f << "metric,value\n";
        f.precision(10);
        f << "episodes," << report.episodes << "\n";
        f << "chain," << report.chain << "\n";
        f << "success_rate," << report.success_rate << "\n";
        f << "wrong_object_rate," << report.wrong_object_rate << "\n";
        f << "avg_length," << report.avg_length << "\n";
        for (int p = 0; p < report.chain; ++p)
            f << "position_" << (p + 1) << "_success," << report.per_position[p] << "\n";
        const char* kinds[3] = {"lift", "place", "push"};
        for (int k = 0; k < 3; ++k) {
            f << kinds[k] << "_episodes," << report.per_kind_total[k] << "\n";
            f << kinds[k] << "_success," << report.per_kind_success[k] << "\n";
            f << kinds[k] << "_wrong_object," << report.per_kind_wrong[k] << "\n";
        }
    }
}

std::vector<SweepRow> sweep_motion_steps(const MotionDirector& motion, const ActionExpert& action,
                                         RolloutConfig cfg, const std::vector<int>& steps_list,
                                         int episodes, uint64_t seed) {
    std::vector<SweepRow> rows;
    for (int n : steps_list) {
        RolloutConfig c = cfg;
        c.n_motion = n;
        // same seeds for every row: paired comparison
        EvalReport rep = evaluate(
            [&]() { return std::make_unique<ModelPolicy>(&motion, &action, c); }, c, episodes,
            seed);
        rows.push_back({n, rep.avg_length, rep.success_rate});
    }
    return rows;
}

}  // namespace dawn
