#include "dawn/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>

#include "dawn/action_expert.hpp"
#include "dawn/control_loop.hpp"
#include "dawn/dataset.hpp"
#include "dawn/motion_director.hpp"

namespace fs = std::filesystem;

namespace dawn {

namespace {

void apply_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) set_num_threads(cfg.threads);
}

void write_loss_csv(const std::string& dir, const std::vector<TrainLogRow>& log) {
    std::ofstream f(fs::path(dir) / "loss.csv");
    if (!f) throw IoError("cannot write loss.csv in " + dir);
    f << "step,loss\n";
    for (const auto& r : log) f << r.step << ',' << r.loss << "\n";
}

std::string ckpt_path(const std::string& dir) { return (fs::path(dir) / "checkpoint.dawn").string(); }

// accepts either a checkpoint file or a run directory
std::string resolve_ckpt(const std::string& path) {
    if (fs::is_directory(path)) return ckpt_path(path);
    return path;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

MotionDirectorSpec motion_spec_from_cfg(const RunConfig& cfg) {
    MotionDirectorSpec s = MotionDirectorSpec::defaults();
    s.schedule = schedule_kind_from_name(cfg.schedule);
    s.t_train = cfg.t_train;
    s.d_max = static_cast<float>(cfg.d_max);
    s.k_min = cfg.kmin;
    s.k_max = cfg.kmax;
    s.use_gripper = cfg.use_gripper != 0;
    if (cfg.variant == "rgb-goal")
        s.target = MotionTarget::rgb_goal;
    else if (cfg.variant == "pixel-motion")
        s.target = MotionTarget::pixel_motion;
    else
        throw ConfigError("train --stage motion expects variant pixel-motion or rgb-goal");
    return s;
}

}  // namespace

int cmd_gen_data(const RunConfig& cfg) {
    apply_threads(cfg);
    if (cfg.episodes <= 0) throw ConfigError("gen-data needs --episodes > 0");
    if (cfg.out.empty()) throw ConfigError("gen-data needs --out");
    cfg.write_resolved(cfg.out);
    generate_dataset(cfg.episodes, RngStream(cfg.seed), cfg.out);
    std::printf("wrote %d episodes to %s\n", cfg.episodes, cfg.out.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    apply_threads(cfg);
    if (cfg.data.empty()) throw ConfigError("train needs --data");
    if (cfg.out.empty()) throw ConfigError("train needs --out");
    Dataset data = load_dataset(cfg.data);
    cfg.write_resolved(cfg.out);
    const int steps = cfg.default_steps();

    if (cfg.stage == "vae") {
        RngStream rng(cfg.seed);
        RngStream wrng = rng.derive("vae-init");
        MotionVAE vae(VaeSpec{}, wrng);
        VaeTrainOptions opt;
        opt.steps = steps;
        opt.batch = cfg.batch;
        opt.lr = static_cast<float>(cfg.lr);
        opt.weight_decay = static_cast<float>(cfg.weight_decay);
        opt.seed = rng.derive("vae-train").seed();
        auto log = train_vae(vae, data, static_cast<float>(cfg.d_max), opt);
        write_loss_csv(cfg.out, log);
        save_checkpoint(ckpt_path(cfg.out), vae_checkpoint(vae));
        std::printf("vae trained for %d steps, final loss %.5f, latent scale %.4f\n", steps,
                    log.empty() ? 0.f : log.back().loss, vae.latent_scale);
        return 0;
    }

    if (cfg.stage == "motion") {
        if (cfg.vae_ckpt.empty()) throw ConfigError("train --stage motion needs --vae");
        MotionVAE vae = vae_from_checkpoint(load_checkpoint(resolve_ckpt(cfg.vae_ckpt)));
        RngStream rng(cfg.seed);
        RngStream wrng = rng.derive("motion-init");
        MotionDirector model(motion_spec_from_cfg(cfg), std::move(vae), wrng);
        MotionTrainOptions opt;
        opt.steps = steps;
        opt.batch = cfg.batch;
        opt.lr = static_cast<float>(cfg.lr);
        opt.weight_decay = static_cast<float>(cfg.weight_decay);
        opt.seed = rng.derive("motion-train").seed();
        opt.sample_dir = (fs::path(cfg.out) / "samples").string();
        opt.sample_every = cfg.sample_every;
        auto log = train_motion(model, data, opt);
        write_loss_csv(cfg.out, log);
        save_checkpoint(ckpt_path(cfg.out), motion_checkpoint(model));
        std::printf("motion director (%s) trained for %d steps, final loss %.5f\n",
                    cfg.variant.c_str(), steps, log.empty() ? 0.f : log.back().loss);
        return 0;
    }

    if (cfg.stage == "action") {
        ActionExpertSpec spec = ActionExpertSpec::defaults();
        spec.variant = action_variant_from_name(cfg.variant);
        spec.schedule = schedule_kind_from_name(cfg.schedule);
        spec.t_train = cfg.t_train;
        spec.d_max = static_cast<float>(cfg.d_max);
        spec.train_k = cfg.k_infer;
        RngStream rng(cfg.seed);
        RngStream wrng = rng.derive("action-init");
        ActionExpert model(spec, wrng);
        ActionTrainOptions opt;
        opt.steps = steps;
        opt.batch = cfg.batch;
        opt.lr = static_cast<float>(cfg.lr);
        opt.weight_decay = static_cast<float>(cfg.weight_decay);
        opt.seed = rng.derive("action-train").seed();
        std::unique_ptr<MotionDirector> generator;
        if (cfg.motion_source == "generated") {
            if (spec.variant == ActionVariant::none)
                throw ConfigError("variant none has no motion source");
            if (cfg.motion_ckpt.empty())
                throw ConfigError("motion-source generated needs --motion");
            generator = std::make_unique<MotionDirector>(
                motion_from_checkpoint(load_checkpoint(resolve_ckpt(cfg.motion_ckpt))));
            opt.generator = generator.get();
            opt.generator_steps = cfg.n_motion;
        } else if (cfg.motion_source != "oracle") {
            throw ConfigError("motion_source must be oracle or generated");
        }
        auto log = train_action(model, data, opt);
        write_loss_csv(cfg.out, log);
        save_checkpoint(ckpt_path(cfg.out), action_checkpoint(model, cfg.motion_source));
        std::printf("action expert (%s, %s) trained for %d steps, final loss %.5f\n",
                    cfg.variant.c_str(), cfg.motion_source.c_str(), steps,
                    log.empty() ? 0.f : log.back().loss);
        return 0;
    }

    throw ConfigError("train needs --stage vae|motion|action");
}

int cmd_eval(const RunConfig& cfg) {
    apply_threads(cfg);
    if (cfg.action_ckpt.empty()) throw ConfigError("eval needs --action");
    if (cfg.out.empty()) throw ConfigError("eval needs --out");
    if (cfg.eval_episodes <= 0) throw ContractError("eval needs --episodes > 0");

    ActionExpert action = action_from_checkpoint(load_checkpoint(resolve_ckpt(cfg.action_ckpt)));
    const ActionVariant requested = action_variant_from_name(cfg.variant);
    if (requested != action.spec.variant)
        throw IncompatibleError(std::string("variant mismatch: action checkpoint is '") +
                                action_variant_name(action.spec.variant) + "', requested '" +
                                cfg.variant + "'");

    std::unique_ptr<MotionDirector> motion;
    if (requested != ActionVariant::none && !cfg.oracle_flow) {
        if (cfg.motion_ckpt.empty())
            throw ConfigError("eval with a generated motion input needs --motion");
        motion = std::make_unique<MotionDirector>(
            motion_from_checkpoint(load_checkpoint(resolve_ckpt(cfg.motion_ckpt))));
    }

    std::optional<TaskKind> only_kind;
    if (cfg.suite == "lift") only_kind = TaskKind::lift;
    else if (cfg.suite == "place") only_kind = TaskKind::place_in_bin;
    else if (cfg.suite == "push") only_kind = TaskKind::push_to_region;
    else if (cfg.suite != "single" && cfg.suite != "chained")
        throw ConfigError("suite must be single|chained|lift|place|push");

    RolloutConfig rc;
    rc.max_steps = cfg.max_steps;
    rc.replan = cfg.replan;
    rc.n_motion = cfg.n_motion;
    rc.n_action = cfg.n_action;
    rc.k = cfg.k_infer;
    rc.variant = requested;
    rc.oracle_flow = cfg.oracle_flow != 0;
    rc.chain = cfg.suite == "chained" ? cfg.chain : 1;
    cfg.write_resolved(cfg.out);
    if (cfg.vis) rc.vis_dir = (fs::path(cfg.out) / "vis").string();

    PolicyFactory factory = [&]() -> std::unique_ptr<ChunkPolicy> {
        return std::make_unique<ModelPolicy>(motion.get(), &action, rc);
    };

    if (!cfg.steps_sweep.empty()) {
        if (!motion) throw ConfigError("--steps-sweep needs a motion model");
        auto rows = sweep_motion_steps(*motion, action, rc, parse_int_list(cfg.steps_sweep),
                                       cfg.eval_episodes, cfg.seed);
        std::ofstream f(fs::path(cfg.out) / "sweep.csv");
        f << "n_steps,avg_length,success_rate\n";
        std::printf("%8s %12s %12s\n", "n_steps", "avg_length", "success");
        for (const auto& r : rows) {
            f << r.n_steps << ',' << r.avg_length << ',' << r.success_rate << "\n";
            std::printf("%8d %12.3f %12.3f\n", r.n_steps, r.avg_length, r.success_rate);
        }
        return 0;
    }

    EvalReport report = evaluate(factory, rc, cfg.eval_episodes, cfg.seed, only_kind);
    write_report_csv(cfg.out, report);
    std::printf("episodes %d, chain %d\n", report.episodes, report.chain);
    std::printf("success rate %.3f, wrong-object rate %.3f, avg length %.3f\n",
                report.success_rate, report.wrong_object_rate, report.avg_length);
    const char* kinds[3] = {"lift", "place", "push"};
    for (int k = 0; k < 3; ++k)
        if (report.per_kind_total[k] > 0)
            std::printf("  %-5s n=%-4lld success %.3f wrong %.3f\n", kinds[k],
                        static_cast<long long>(report.per_kind_total[k]),
                        report.per_kind_success[k], report.per_kind_wrong[k]);
    for (int p = 0; p < report.chain; ++p)
        std::printf("  position %d success %.3f\n", p + 1, report.per_position[p]);
    return 0;
}

int cmd_visualize(const RunConfig& cfg) {
    apply_threads(cfg);
    if (cfg.episode_file.empty()) throw ConfigError("visualize needs --episode-file");
    if (cfg.out.empty()) throw ConfigError("visualize needs --out");
    Episode ep = read_episode(cfg.episode_file);
    Dataset ds;
    ds.episodes.push_back(std::move(ep));
    ds.build_world_caches();
    const Episode& e = ds.episodes[0];
    std::unique_ptr<MotionDirector> motion;
    if (!cfg.motion_ckpt.empty())
        motion = std::make_unique<MotionDirector>(
            motion_from_checkpoint(load_checkpoint(resolve_ckpt(cfg.motion_ckpt))));
    fs::create_directories(cfg.out);
    cfg.write_resolved(cfg.out);
    const float d_max = motion ? motion->spec.d_max : static_cast<float>(cfg.d_max);
    int written = 0;
    for (int i = 0; i < cfg.frames; ++i) {
        const int t = cfg.obs_index + i;
        if (t >= e.length()) break;
        PixelMotion gt = episode_flow(e, t, cfg.k_infer);
        std::vector<ImageF> panels{dequantize(e.static_frames[t]), colorize_motion(gt, d_max)};
        if (motion) {
            Observation obs;
            obs.static_frame = dequantize(e.static_frames[t]);
            obs.gripper_frame = dequantize(e.gripper_frames[t]);
            obs.state = e.states[t];
            obs.tokens = e.tokens;
            RngStream rng(cfg.seed + t);
            GeneratedMotion gm = generate_motion(*motion, obs, cfg.k_infer, cfg.n_motion, rng);
            panels.push_back(colorize_motion(gm.flow, d_max));
        }
        char name[64];
        std::snprintf(name, sizeof(name), "frame%04d.ppm", t);
        write_ppm((fs::path(cfg.out) / name).string(), hstack(panels));
        ++written;
    }
    std::printf("wrote %d visualization panels to %s\n", written, cfg.out.c_str());
    return written > 0 ? 0 : 2;
}

}  // namespace dawn
