#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dawn/commands.hpp"

namespace dawn {

int run_cli(int argc, const char* const* argv) {
    RunConfig cfg;
    CLI::App app{"two-stage diffusion visuomotor pipeline (motion director + action expert)"};
    app.require_subcommand(1);

    // config file first, explicit flags override it
    try {
        for (int i = 1; i + 1 < argc; ++i)
            if (std::string(argv[i]) == "--config") cfg.load_file(argv[i + 1]);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", "flat key = value config file (CLI overrides it)");
        sub->add_option("--seed", cfg.seed, "master seed; all randomness derives from it");
        sub->add_option("--threads", cfg.threads, "worker threads (0 = automatic)");
        sub->add_option("--out", cfg.out, "output directory");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "record scripted-expert demonstrations");
    add_common(gen);
    gen->add_option("--episodes", cfg.episodes, "number of episodes to record");

    CLI::App* train = app.add_subcommand("train", "train one stage");
    add_common(train);
    train->add_option("--stage", cfg.stage, "vae | motion | action")->required();
    train->add_option("--data", cfg.data, "dataset directory");
    train->add_option("--variant", cfg.variant, "none | rgb-goal | pixel-motion");
    train->add_option("--steps", cfg.steps, "training steps (-1 = stage default)");
    train->add_option("--lr", cfg.lr, "learning rate");
    train->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
    train->add_option("--batch", cfg.batch, "batch size");
    train->add_option("--schedule", cfg.schedule, "linear | cosine");
    train->add_option("--t-train", cfg.t_train, "diffusion training timesteps");
    train->add_option("--d-max", cfg.d_max, "motion normalization range in pixels");
    train->add_option("--kmin", cfg.kmin, "minimum temporal offset");
    train->add_option("--kmax", cfg.kmax, "maximum temporal offset");
    train->add_option("--k", cfg.k_infer, "offset used for action-stage motion inputs");
    train->add_option("--use-gripper", cfg.use_gripper, "condition on the gripper view (0/1)");
    train->add_option("--motion-source", cfg.motion_source, "oracle | generated");
    train->add_option("--n-motion", cfg.n_motion, "generator diffusion steps (generated mode)");
    train->add_option("--vae", cfg.vae_ckpt, "vae checkpoint (motion stage)");
    train->add_option("--motion", cfg.motion_ckpt, "motion checkpoint (generated mode)");
    train->add_option("--sample-every", cfg.sample_every, "sample-panel period (motion stage)");

    CLI::App* ev = app.add_subcommand("eval", "closed-loop evaluation");
    add_common(ev);
    ev->add_option("--episodes", cfg.eval_episodes, "evaluation episodes");
    ev->add_option("--suite", cfg.suite, "single | chained");
    ev->add_option("--chain", cfg.chain, "tasks per chain (chained suite)");
    ev->add_option("--steps-sweep", cfg.steps_sweep, "comma list of motion diffusion steps");
    ev->add_option("--variant", cfg.variant, "none | rgb-goal | pixel-motion");
    ev->add_option("--vae", cfg.vae_ckpt, "unused; vae weights ride in the motion checkpoint");
    ev->add_option("--motion", cfg.motion_ckpt, "motion checkpoint");
    ev->add_option("--action", cfg.action_ckpt, "action checkpoint");
    ev->add_option("--max-steps", cfg.max_steps, "step budget per task");
    ev->add_option("--replan", cfg.replan, "actions executed per plan");
    ev->add_option("--k", cfg.k_infer, "temporal offset at inference");
    ev->add_option("--motion-steps", cfg.n_motion, "motion diffusion steps");
    ev->add_option("--action-steps", cfg.n_action, "action diffusion steps");
    ev->add_flag("--oracle-flow", cfg.oracle_flow, "use simulator flow instead of the generator");
    ev->add_flag("--vis", cfg.vis, "write per-replan motion panels");

    CLI::App* vis = app.add_subcommand("visualize", "frame / flow / generated-flow panels");
    add_common(vis);
    vis->add_option("--episode-file", cfg.episode_file, "episode file to inspect");
    vis->add_option("--checkpoint", cfg.motion_ckpt, "motion checkpoint for generated panels");
    vis->add_option("--obs-index", cfg.obs_index, "first frame index");
    vis->add_option("--frames", cfg.frames, "number of frames");
    vis->add_option("--k", cfg.k_infer, "temporal offset for the flow panels");
    vis->add_option("--d-max", cfg.d_max, "flow color normalization");
    vis->add_option("--motion-steps", cfg.n_motion, "motion diffusion steps");

    try {
        app.parse(argc, const_cast<char**>(argv));
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (ev->parsed()) return cmd_eval(cfg);
        if (vis->parsed()) return cmd_visualize(cfg);
        return 2;
    } catch (const IncompatibleError& e) {
        std::fprintf(stderr, "incompatible inputs: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 4;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace dawn
