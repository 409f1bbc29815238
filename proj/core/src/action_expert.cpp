#include "dawn/action_expert.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "internal_batch.hpp"

namespace dawn {

using batching::append_chw_pm1;
using batching::append_motion;
using batching::append_state_pm1;
using batching::train_split;

const char* action_variant_name(ActionVariant v) {
    switch (v) {
        case ActionVariant::none: return "none";
        case ActionVariant::rgb_goal: return "rgb-goal";
        default: return "pixel-motion";
    }
}

ActionVariant action_variant_from_name(const std::string& name) {
    if (name == "none") return ActionVariant::none;
    if (name == "rgb-goal") return ActionVariant::rgb_goal;
    if (name == "pixel-motion") return ActionVariant::pixel_motion;
    throw ConfigError("unknown variant: " + name);
}

ActionExpertSpec ActionExpertSpec::defaults() {
    ActionExpertSpec s;
    s.dit.depth = 4;
    s.dit.width = 256;
    s.dit.num_heads = 4;
    s.dit.context_dim = s.ctx_dim;
    s.dit.seq_len = s.h;
    s.dit.io_dim = s.action_dim;
    return s;
}

ActionExpert::ActionExpert(ActionExpertSpec s, RngStream& rng) : spec(std::move(s)) {
    spec.dit.context_dim = spec.ctx_dim;
    spec.dit.seq_len = spec.h;
    spec.dit.io_dim = spec.action_dim;
    sched = NoiseSchedule::make(spec.schedule, spec.t_train);
    visual_enc = ConvTokenizer(params, "vis", 3, spec.vis_widths, spec.ctx_dim, rng);
    text_enc = TextEncoder(params, "text", Vocab::size(), simc::kMaxTokens, spec.text_width,
                           spec.text_depth, spec.text_heads, spec.ctx_dim, rng);
    state_mlp1 = LinearT<float>(params, "state.l1", 4, spec.state_hidden, rng);
    state_mlp2 = LinearT<float>(params, "state.l2", spec.state_hidden, spec.ctx_dim, rng);
    dit = DiT(params, "dit", spec.dit, rng);
    token_type = Tensor::randn({5, spec.ctx_dim}, rng, 0.02f);
    params.add("token_type", token_type);
    act_min = {-0.05f, -0.05f, 0.f};
    act_max = {0.05f, 0.05f, 1.f};
}

Tensor ActionExpert::encode_context(const Tensor& motion, const Tensor& static_frame,
                                    const Tensor& gripper, const std::vector<int32_t>& tokens,
                                    const Tensor& state) const {
    const bool needs_motion = spec.variant != ActionVariant::none;
    if (needs_motion != motion.defined())
        throw ContractError(std::string("variant '") + action_variant_name(spec.variant) +
                            "' requires the motion input to be " +
                            (needs_motion ? "present" : "absent"));
    const int64_t B = static_frame.size(0);
    auto type_row = [&](int i) { return reshape(slice(token_type, 0, i, i + 1), {spec.ctx_dim}); };
    std::vector<Tensor> parts;
    if (motion.defined()) parts.push_back(add(visual_enc.forward(motion), type_row(0)));
    parts.push_back(add(visual_enc.forward(static_frame), type_row(1)));
    parts.push_back(add(visual_enc.forward(gripper), type_row(2)));
    parts.push_back(add(text_enc.forward(tokens, static_cast<int>(B), simc::kMaxTokens), type_row(3)));
    Tensor st = state_mlp2.forward(silu(state_mlp1.forward(state)));
    parts.push_back(add(reshape(st, {B, 1, spec.ctx_dim}), type_row(4)));
    return concat(parts, 1);
}

std::array<float, 3> ActionExpert::normalize(const std::array<float, 3>& a) const {
    std::array<float, 3> out{};
    for (int d = 0; d < 3; ++d) {
        const float range = act_max[d] - act_min[d];
        out[d] = range > 1e-9f ? 2.f * (a[d] - act_min[d]) / range - 1.f : 0.f;
    }
    return out;
}

std::array<float, 3> ActionExpert::denormalize(const std::array<float, 3>& a) const {
    std::array<float, 3> out{};
    for (int d = 0; d < 3; ++d) {
        const float range = act_max[d] - act_min[d];
        out[d] = act_min[d] + (a[d] + 1.f) / 2.f * range;
    }
    return out;
}

namespace {

Observation obs_from_episode(const Episode& ep, int t) {
    Observation obs;
    obs.static_frame = dequantize(ep.static_frames[t]);
    obs.gripper_frame = dequantize(ep.gripper_frames[t]);
    obs.state = ep.states[t];
    obs.tokens = ep.tokens;
    return obs;
}

struct ActionBatch {
    Tensor motion;  // undefined for variant none
    Tensor static_frame, gripper, state;
    std::vector<int32_t> tokens;
    Tensor chunk;  // [B,h,3] normalized
    Tensor mask;   // [B,h]
};

ActionBatch make_action_batch(const ActionExpert& model, const Dataset& data, int split, int batch,
                              const MotionDirector* generator, int generator_steps,
                              RngStream& rng) {
    ActionBatch ab;
    std::vector<float> motion, stat, grip, state, chunk, mask;
    const int h = model.spec.h;
    for (int b = 0; b < batch; ++b) {
        const auto& ep = data.episodes[rng.uniform_int(split)];
        const int t = static_cast<int>(rng.uniform_int(ep.length()));
        if (model.spec.variant == ActionVariant::pixel_motion) {
            if (generator) {
                RngStream grng = rng.derive("gen", rng.next_u64());
                GeneratedMotion gm = generate_motion(*generator, obs_from_episode(ep, t),
                                                     model.spec.train_k, generator_steps, grng);
                append_motion(motion, gm.image);
            } else {
                append_motion(motion,
                              encode_motion(episode_flow(ep, t, model.spec.train_k), model.spec.d_max));
            }
        } else if (model.spec.variant == ActionVariant::rgb_goal) {
            if (generator) {
                RngStream grng = rng.derive("gen", rng.next_u64());
                ImageF goal = generate_rgb_goal(*generator, obs_from_episode(ep, t),
                                                model.spec.train_k, generator_steps, grng);
                append_chw_pm1(motion, goal);
            } else {
                const int k = clamp_offset(ep, t, model.spec.train_k);
                append_chw_pm1(motion, ep.static_frames[t + k]);
            }
        }
        append_chw_pm1(stat, ep.static_frames[t]);
        append_chw_pm1(grip, ep.gripper_frames[t]);
        append_state_pm1(state, ep.states[t]);
        ab.tokens.insert(ab.tokens.end(), ep.tokens.begin(), ep.tokens.end());
        for (int i = 0; i < h; ++i) {
            const int ti = std::min(t + i, ep.length() - 1);
            const bool real = t + i < ep.length();
            auto a = model.normalize(ep.actions[ti]);
            chunk.insert(chunk.end(), a.begin(), a.end());
            mask.push_back(real ? 1.f : 0.f);
        }
    }
    if (!motion.empty()) ab.motion = Tensor::from_data({batch, 3, 64, 64}, std::move(motion));
    ab.static_frame = Tensor::from_data({batch, 3, 64, 64}, std::move(stat));
    ab.gripper = Tensor::from_data({batch, 3, 32, 32}, std::move(grip));
    ab.state = Tensor::from_data({batch, 4}, std::move(state));
    ab.chunk = Tensor::from_data({batch, h, 3}, std::move(chunk));
    ab.mask = Tensor::from_data({batch, h}, std::move(mask));
    return ab;
}

}  // namespace

std::vector<TrainLogRow> train_action(ActionExpert& model, const Dataset& data,
                                      const ActionTrainOptions& opt) {
    // normalization parameters come from the dataset and ride along in the
    // checkpoint metadata
    model.act_min = data.act_min;
    model.act_max = data.act_max;
    RngStream rng(opt.seed);
    const int split = train_split(data);
    AdamW optim;
    optim.lr = opt.lr;
    optim.weight_decay = opt.weight_decay;
    std::vector<TrainLogRow> log;
    for (int step = 0; step < opt.steps; ++step) {
        ActionBatch ab = make_action_batch(model, data, split, opt.batch, opt.generator,
                                           opt.generator_steps, rng);
        Tensor ctx = model.encode_context(ab.motion, ab.static_frame, ab.gripper, ab.tokens, ab.state);
        DenoiseFn<float> fn = [&](const Tensor& x_t, std::span<const int> ts) {
            return model.dit.forward(x_t, ts, ctx);
        };
        Tensor loss = eps_loss_masked(fn, ab.chunk, ab.mask, model.sched, rng);
        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw NumericError("action loss diverged at step " + std::to_string(step));
        model.params.zero_grad();
        backward(loss);
        optim.step(model.params);
        log.push_back({step, lv});
        if (opt.verbose && step % 100 == 0) {
            float avg = 0;
            int n = 0;
            for (int i = std::max(0, static_cast<int>(log.size()) - 100);
                 i < static_cast<int>(log.size()); ++i, ++n)
                avg += log[i].loss;
            std::fprintf(stderr, "[action] step %6d loss %.4f\n", step, avg / std::max(1, n));
        }
    }
    return log;
}

ActionChunk predict_chunk(const ActionExpert& model, const Observation& obs,
                          const MotionImage* motion, const ImageF* goal_frame, int n_steps,
                          RngStream& rng) {
    NoGradGuard ng;
    Tensor motion_t;
    if (model.spec.variant == ActionVariant::pixel_motion) {
        if (!motion) throw ContractError("pixel-motion variant needs a motion image");
        motion_t = reshape(motion_to_tensor(*motion), {1, 3, motion->h, motion->w});
    } else if (model.spec.variant == ActionVariant::rgb_goal) {
        if (!goal_frame) throw ContractError("rgb-goal variant needs a goal frame");
        std::vector<float> data;
        append_chw_pm1(data, *goal_frame);
        motion_t = Tensor::from_data({1, 3, goal_frame->h, goal_frame->w}, std::move(data));
    }
    std::vector<float> stat, grip, state;
    append_chw_pm1(stat, obs.static_frame);
    append_chw_pm1(grip, obs.gripper_frame);
    append_state_pm1(state, obs.state);
    Tensor ctx = model.encode_context(motion_t,
                                      Tensor::from_data({1, 3, 64, 64}, std::move(stat)),
                                      Tensor::from_data({1, 3, 32, 32}, std::move(grip)), obs.tokens,
                                      Tensor::from_data({1, 4}, std::move(state)));
    DenoiseFn<float> fn = [&](const Tensor& x_t, std::span<const int> ts) {
        return model.dit.forward(x_t, ts, ctx);
    };
    SamplerConfig cfg{n_steps, 0.0};
    Tensor out = sample(fn, {1, model.spec.h, model.spec.action_dim}, model.sched, cfg, rng);
    ActionChunk chunk;
    chunk.h = model.spec.h;
    for (int i = 0; i < model.spec.h; ++i) {
        std::array<float, 3> a{out.at({0, i, 0}), out.at({0, i, 1}), out.at({0, i, 2})};
        a = model.denormalize(a);
        a[0] = std::clamp(a[0], -static_cast<float>(simc::kAmax), static_cast<float>(simc::kAmax));
        a[1] = std::clamp(a[1], -static_cast<float>(simc::kAmax), static_cast<float>(simc::kAmax));
        a[2] = std::clamp(a[2], 0.f, 1.f);
        chunk.actions.push_back(a);
    }
    return chunk;
}

ChunkMse heldout_chunk_mse(const ActionExpert& model, const Dataset& data, int samples,
                           int n_steps, uint64_t seed) {
    NoGradGuard ng;
    RngStream rng(seed);
    const int split = train_split(data);
    const int held = static_cast<int>(data.episodes.size()) - split;
    if (held <= 0) throw ContractError("no held-out episodes");
    ChunkMse out;
    int64_t count = 0;
    for (int s = 0; s < samples; ++s) {
        const auto& ep = data.episodes[split + rng.uniform_int(held)];
        const int t = static_cast<int>(rng.uniform_int(ep.length()));
        Observation obs = obs_from_episode(ep, t);
        MotionImage mi;
        ImageF goal;
        const MotionImage* mp = nullptr;
        const ImageF* gp = nullptr;
        if (model.spec.variant == ActionVariant::pixel_motion) {
            mi = encode_motion(episode_flow(ep, t, model.spec.train_k), model.spec.d_max);
            mp = &mi;
        } else if (model.spec.variant == ActionVariant::rgb_goal) {
            goal = dequantize(ep.static_frames[t + clamp_offset(ep, t, model.spec.train_k)]);
            gp = &goal;
        }
        RngStream prng = rng.derive("predict", s);
        ActionChunk chunk = predict_chunk(model, obs, mp, gp, n_steps, prng);
        for (int i = 0; i < model.spec.h && t + i < ep.length(); ++i) {
            for (int d = 0; d < 3; ++d) {
                const double dm = chunk.actions[i][d] - ep.actions[t + i][d];
                const double dz = ep.actions[t + i][d];
                out.model += dm * dm;
                out.zero_baseline += dz * dz;
            }
            ++count;
        }
    }
    if (count > 0) {
        out.model /= static_cast<double>(count * 3);
        out.zero_baseline /= static_cast<double>(count * 3);
    }
    return out;
}

Checkpoint action_checkpoint(const ActionExpert& model, const std::string& motion_source) {
    Checkpoint ck;
    ck.kind = "action";
    ck.set_meta("variant", action_variant_name(model.spec.variant));
    ck.set_meta("motion_source", motion_source);
    ck.set_meta("dit.depth", static_cast<int64_t>(model.spec.dit.depth));
    ck.set_meta("dit.width", static_cast<int64_t>(model.spec.dit.width));
    ck.set_meta("dit.heads", static_cast<int64_t>(model.spec.dit.num_heads));
    ck.set_meta("ctx_dim", static_cast<int64_t>(model.spec.ctx_dim));
    {
        std::string w;
        for (size_t i = 0; i < model.spec.vis_widths.size(); ++i)
            w += (i ? "," : "") + std::to_string(model.spec.vis_widths[i]);
        ck.set_meta("vis.widths", w);
    }
    ck.set_meta("text.width", static_cast<int64_t>(model.spec.text_width));
    ck.set_meta("text.depth", static_cast<int64_t>(model.spec.text_depth));
    ck.set_meta("text.heads", static_cast<int64_t>(model.spec.text_heads));
    ck.set_meta("state.hidden", static_cast<int64_t>(model.spec.state_hidden));
    ck.set_meta("schedule", schedule_kind_name(model.spec.schedule));
    ck.set_meta("t_train", static_cast<int64_t>(model.spec.t_train));
    ck.set_meta("h", static_cast<int64_t>(model.spec.h));
    ck.set_meta("action_dim", static_cast<int64_t>(model.spec.action_dim));
    ck.set_meta("d_max", static_cast<double>(model.spec.d_max));
    ck.set_meta("train_k", static_cast<int64_t>(model.spec.train_k));
    for (int d = 0; d < 3; ++d) {
        ck.set_meta("act_min." + std::to_string(d), static_cast<double>(model.act_min[d]));
        ck.set_meta("act_max." + std::to_string(d), static_cast<double>(model.act_max[d]));
    }
    {
        std::string vs;
        const auto& words = Vocab::words();
        for (size_t i = 0; i < words.size(); ++i) vs += (i ? "," : "") + words[i];
        ck.set_meta("vocabulary", vs);
    }
    pack_params(ck, model.params);
    return ck;
}

ActionExpert action_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "action")
        throw IncompatibleError("expected an action checkpoint, got '" + ck.kind + "'");
    ActionExpertSpec s = ActionExpertSpec::defaults();
    s.variant = action_variant_from_name(ck.require("variant"));
    s.dit.depth = static_cast<int>(ck.require_int("dit.depth"));
    s.dit.width = static_cast<int>(ck.require_int("dit.width"));
    s.dit.num_heads = static_cast<int>(ck.require_int("dit.heads"));
    s.ctx_dim = static_cast<int>(ck.require_int("ctx_dim"));
    {
        s.vis_widths.clear();
        std::string w = ck.require("vis.widths");
        size_t pos = 0;
        while (pos < w.size()) {
            size_t comma = w.find(',', pos);
            if (comma == std::string::npos) comma = w.size();
            s.vis_widths.push_back(std::stoi(w.substr(pos, comma - pos)));
            pos = comma + 1;
        }
    }
    s.text_width = static_cast<int>(ck.require_int("text.width"));
    s.text_depth = static_cast<int>(ck.require_int("text.depth"));
    s.text_heads = static_cast<int>(ck.require_int("text.heads"));
    s.state_hidden = static_cast<int>(ck.require_int("state.hidden"));
    s.schedule = schedule_kind_from_name(ck.require("schedule"));
    s.t_train = static_cast<int>(ck.require_int("t_train"));
    s.h = static_cast<int>(ck.require_int("h"));
    s.action_dim = static_cast<int>(ck.require_int("action_dim"));
    s.d_max = static_cast<float>(ck.require_num("d_max"));
    s.train_k = static_cast<int>(ck.require_int("train_k"));
    RngStream rng(0);
    ActionExpert model(s, rng);
    for (int d = 0; d < 3; ++d) {
        model.act_min[d] = static_cast<float>(ck.require_num("act_min." + std::to_string(d)));
        model.act_max[d] = static_cast<float>(ck.require_num("act_max." + std::to_string(d)));
    }
    unpack_params(ck, model.params);
    return model;
}

}  // namespace dawn
