#include "dawn/motion_director.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "internal_batch.hpp"

namespace dawn {

using batching::append_chw_pm1;
using batching::append_motion;
using batching::train_split;

// ---------------------------------------------------------------- vae

MotionVAE::MotionVAE(VaeSpec s, RngStream& rng) : spec(s) {
    const int b = spec.base;
    e1 = Conv2dT<float>(params, "enc.c1", 3, b, 4, 2, 1, rng);
    en1 = GroupNormT<float>(params, "enc.n1", b, 8);
    e2 = Conv2dT<float>(params, "enc.c2", b, 2 * b, 4, 2, 1, rng);
    en2 = GroupNormT<float>(params, "enc.n2", 2 * b, 8);
    e3 = Conv2dT<float>(params, "enc.c3", 2 * b, 4 * b, 4, 2, 1, rng);
    en3 = GroupNormT<float>(params, "enc.n3", 4 * b, 8);
    e4 = Conv2dT<float>(params, "enc.c4", 4 * b, 4 * b, 3, 1, 1, rng);
    en4 = GroupNormT<float>(params, "enc.n4", 4 * b, 8);
    e_out = Conv2dT<float>(params, "enc.out", 4 * b, 2 * spec.latent_ch, 1, 1, 0, rng);

    d_in = Conv2dT<float>(params, "dec.in", spec.latent_ch, 4 * b, 1, 1, 0, rng);
    dn0 = GroupNormT<float>(params, "dec.n0", 4 * b, 8);
    d1 = Conv2dT<float>(params, "dec.c1", 4 * b, 4 * b, 3, 1, 1, rng);
    dn1 = GroupNormT<float>(params, "dec.n1", 4 * b, 8);
    d2 = Conv2dT<float>(params, "dec.c2", 4 * b, 2 * b, 3, 1, 1, rng);
    dn2 = GroupNormT<float>(params, "dec.n2", 2 * b, 8);
    d3 = Conv2dT<float>(params, "dec.c3", 2 * b, b, 3, 1, 1, rng);
    dn3 = GroupNormT<float>(params, "dec.n3", b, 8);
    d4 = Conv2dT<float>(params, "dec.c4", b, b / 2, 3, 1, 1, rng);
    dn4 = GroupNormT<float>(params, "dec.n4", b / 2, 8);
    d_out = Conv2dT<float>(params, "dec.out", b / 2, 3, 3, 1, 1, rng);
}

std::pair<Tensor, Tensor> MotionVAE::encode(const Tensor& x) const {
    Tensor h = silu(en1.forward(e1.forward(x)));
    h = silu(en2.forward(e2.forward(h)));
    h = silu(en3.forward(e3.forward(h)));
    h = silu(en4.forward(e4.forward(h)));
    Tensor out = e_out.forward(h);
    const int64_t c = spec.latent_ch;
    return {slice(out, 1, 0, c), slice(out, 1, c, 2 * c)};
}

Tensor MotionVAE::encode_mu(const Tensor& x) const { return encode(x).first; }

Tensor MotionVAE::decode(const Tensor& z) const {
    Tensor h = silu(dn0.forward(d_in.forward(z)));
    h = silu(dn1.forward(d1.forward(h)));
    h = silu(dn2.forward(d2.forward(upsample2x(h))));
    h = silu(dn3.forward(d3.forward(upsample2x(h))));
    h = silu(dn4.forward(d4.forward(upsample2x(h))));
    return tanh(d_out.forward(h));
}

void MotionVAE::freeze() {
    frozen = true;
    for (auto& [n, p] : params.items) p.set_requires_grad(false);
}

namespace {

// One mixed sample: frames and ground-truth motion images in equal
// proportion, both through the same weights.
void append_vae_sample(std::vector<float>& out, const Dataset& data, float d_max, int split,
                       RngStream& rng, int index) {
    const auto& ep = data.episodes[rng.uniform_int(split)];
    const int t = static_cast<int>(rng.uniform_int(ep.length()));
    if (index % 2 == 0) {
        append_chw_pm1(out, ep.static_frames[t]);
    } else {
        const int k = 4 + static_cast<int>(rng.uniform_int(13));
        append_motion(out, encode_motion(episode_flow(ep, t, k), d_max));
    }
}

Tensor frame_tensor_pm1(const ImageF& img) {
    std::vector<float> data;
    append_chw_pm1(data, img);
    return Tensor::from_data({1, 3, img.h, img.w}, std::move(data));
}

}  // namespace

std::vector<TrainLogRow> train_vae(MotionVAE& vae, const Dataset& data, float d_max,
                                   const VaeTrainOptions& opt) {
    RngStream rng(opt.seed);
    const int split = train_split(data);
    AdamW opt_state;
    opt_state.lr = opt.lr;
    opt_state.weight_decay = opt.weight_decay;
    std::vector<TrainLogRow> log;
    for (int step = 0; step < opt.steps; ++step) {
        std::vector<float> xdata;
        xdata.reserve(static_cast<size_t>(opt.batch) * 3 * 64 * 64);
        for (int b = 0; b < opt.batch; ++b) append_vae_sample(xdata, data, d_max, split, rng, b);
        Tensor x = Tensor::from_data({opt.batch, 3, 64, 64}, std::move(xdata));

        auto [mu, logvar] = vae.encode(x);
        Tensor eps = Tensor::randn(mu.shape(), rng);
        Tensor z = add(mu, mul(exp(mul(logvar, 0.5f)), eps));
        Tensor recon = vae.decode(z);
        Tensor rec_loss = mse(recon, x);
        // KL(q || N(0,1)) averaged per element
        Tensor kl = mul(mean(sub(add(mul(mu, mu), exp(logvar)), add(logvar, 1.0f))), 0.5f);
        Tensor loss = add(rec_loss, mul(kl, opt.kl_weight));
        const float lv = loss.item();
        if (!std::isfinite(lv)) throw NumericError("vae loss diverged at step " + std::to_string(step));
        vae.params.zero_grad();
        backward(loss);
        opt_state.step(vae.params);
        log.push_back({step, lv});
    }
    vae.freeze();

    // calibrate the latent scale so diffusion operates on unit-variance data
    {
        NoGradGuard ng;
        RngStream crng(opt.seed ^ 0x5ca1eull);
        double s2 = 0.0;
        int64_t n = 0;
        for (int i = 0; i < 16; ++i) {
            std::vector<float> xdata;
            for (int b = 0; b < 8; ++b) append_vae_sample(xdata, data, d_max, split, crng, b + i);
            Tensor x = Tensor::from_data({8, 3, 64, 64}, std::move(xdata));
            Tensor mu = vae.encode_mu(x);
            for (float v : mu.data()) s2 += static_cast<double>(v) * v;
            n += mu.numel();
        }
        const double std_ = std::sqrt(std::max(1e-12, s2 / n));
        vae.latent_scale = static_cast<float>(1.0 / std_);
    }
    return log;
}

double vae_psnr(const MotionVAE& vae, const Dataset& data, int num_frames, uint64_t seed) {
    NoGradGuard ng;
    RngStream rng(seed);
    const int split = train_split(data);
    const int held = static_cast<int>(data.episodes.size()) - split;
    if (held <= 0) throw ContractError("no held-out episodes for psnr");
    double mse_acc = 0.0;
    for (int i = 0; i < num_frames; ++i) {
        const auto& ep = data.episodes[split + rng.uniform_int(held)];
        const int t = static_cast<int>(rng.uniform_int(ep.length()));
        std::vector<float> xdata;
        append_chw_pm1(xdata, ep.static_frames[t]);
        Tensor x = Tensor::from_data({1, 3, 64, 64}, std::move(xdata));
        Tensor rec = vae.decode(vae.encode_mu(x));
        // measure in [0,1] units
        double m = 0.0;
        for (int64_t j = 0; j < x.numel(); ++j) {
            double d = (rec.data()[j] - x.data()[j]) / 2.0;
            m += d * d;
        }
        mse_acc += m / x.numel();
    }
    return 10.0 * std::log10(1.0 / (mse_acc / num_frames));
}

// ---------------------------------------------------------------- model

MotionDirectorSpec MotionDirectorSpec::defaults() {
    MotionDirectorSpec s;
    s.unet.in_channels = 8;
    s.unet.out_channels = 4;
    s.unet.base_width = 64;
    s.unet.channel_mult = {1, 2, 4};
    s.unet.attention_levels = {1, 2};
    s.unet.context_dim = s.ctx_dim;
    s.unet.num_heads = 4;
    return s;
}

MotionDirector::MotionDirector(MotionDirectorSpec s, MotionVAE v, RngStream& rng)
    : spec(std::move(s)), vae(std::move(v)) {
    spec.unet.context_dim = spec.ctx_dim;
    sched = NoiseSchedule::make(spec.schedule, spec.t_train);
    unet = UNet(params, "unet", spec.unet, rng);
    if (spec.use_gripper)
        gripper_enc = ConvTokenizer(params, "grip", 3, {16, 32, 64, 64}, spec.ctx_dim, rng);
    text_enc = TextEncoder(params, "text", Vocab::size(), simc::kMaxTokens, spec.text_width,
                           spec.text_depth, spec.text_heads, spec.ctx_dim, rng);
    offset_mlp1 = LinearT<float>(params, "offset.l1", spec.ctx_dim, spec.ctx_dim, rng);
    offset_mlp2 = LinearT<float>(params, "offset.l2", spec.ctx_dim, spec.ctx_dim, rng);
    token_type = Tensor::randn({3, spec.ctx_dim}, rng, 0.02f);
    params.add("token_type", token_type);
}

Tensor MotionDirector::build_context(const Tensor& gripper, const std::vector<int32_t>& tokens,
                                     int token_len, const std::vector<int>& ks) const {
    const int64_t B = static_cast<int64_t>(ks.size());
    std::vector<Tensor> parts;
    if (spec.use_gripper) {
        Tensor g = gripper_enc.forward(gripper);  // [B, 4, ctx]
        parts.push_back(add(g, reshape(slice(token_type, 0, 0, 1), {spec.ctx_dim})));
    }
    Tensor txt = text_enc.forward(tokens, static_cast<int>(B), token_len);
    parts.push_back(add(txt, reshape(slice(token_type, 0, 1, 2), {spec.ctx_dim})));
    Tensor ke = timestep_embed_batch<float>(std::span<const int>(ks.data(), ks.size()), spec.ctx_dim);
    Tensor kt = offset_mlp2.forward(silu(offset_mlp1.forward(ke)));
    parts.push_back(add(reshape(kt, {B, 1, spec.ctx_dim}),
                        reshape(slice(token_type, 0, 2, 3), {spec.ctx_dim})));
    return concat(parts, 1);
}

namespace {

struct MotionBatch {
    Tensor target_img;  // [B,3,64,64] in [-1,1]
    Tensor cond_img;    // [B,3,64,64]
    Tensor gripper;     // [B,3,32,32]
    std::vector<int32_t> tokens;
    std::vector<int> ks;
};

MotionBatch make_motion_batch(const MotionDirector& model, const Dataset& data, int split,
                              int batch, RngStream& rng) {
    MotionBatch mb;
    std::vector<float> tgt, cond, grip;
    for (int b = 0; b < batch; ++b) {
        const auto& ep = data.episodes[rng.uniform_int(split)];
        const int t = static_cast<int>(rng.uniform_int(ep.length()));
        int k = model.spec.k_min +
                static_cast<int>(rng.uniform_int(model.spec.k_max - model.spec.k_min + 1));
        k = clamp_offset(ep, t, k);
        if (model.spec.target == MotionTarget::pixel_motion) {
            append_motion(tgt, encode_motion(episode_flow(ep, t, k), model.spec.d_max));
        } else {
            append_chw_pm1(tgt, ep.static_frames[t + k]);
        }
        append_chw_pm1(cond, ep.static_frames[t]);
        append_chw_pm1(grip, ep.gripper_frames[t]);
        mb.tokens.insert(mb.tokens.end(), ep.tokens.begin(), ep.tokens.end());
        mb.ks.push_back(k);
    }
    mb.target_img = Tensor::from_data({batch, 3, 64, 64}, std::move(tgt));
    mb.cond_img = Tensor::from_data({batch, 3, 64, 64}, std::move(cond));
    mb.gripper = Tensor::from_data({batch, 3, 32, 32}, std::move(grip));
    return mb;
}

}  // namespace

std::vector<TrainLogRow> train_motion(MotionDirector& model, const Dataset& data,
                                      const MotionTrainOptions& opt) {
    if (!model.vae.frozen) throw ContractError("train_motion requires a frozen, pretrained VAE");
    const uint64_t vae_sum_before = model.vae.checksum();
    RngStream rng(opt.seed);
    const int split = train_split(data);
    AdamW optim;
    optim.lr = opt.lr;
    optim.weight_decay = opt.weight_decay;
    std::vector<TrainLogRow> log;
    for (int step = 0; step < opt.steps; ++step) {
        MotionBatch mb = make_motion_batch(model, data, split, opt.batch, rng);
        Tensor x0, cond;
        {
            NoGradGuard ng;
            x0 = mul(model.vae.encode_mu(mb.target_img), model.vae.latent_scale);
            cond = mul(model.vae.encode_mu(mb.cond_img), model.vae.latent_scale);
        }
        Tensor ctx = model.build_context(mb.gripper, mb.tokens, simc::kMaxTokens, mb.ks);
        DenoiseFn<float> fn = [&](const Tensor& x_t, std::span<const int> ts) {
            return model.unet.forward(concat<float>({x_t, cond}, 1), ts, ctx);
        };
        Tensor loss = eps_loss(fn, x0, model.sched, rng);
        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw NumericError("motion loss diverged at step " + std::to_string(step));
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
            std::fprintf(stderr, "[motion] step %6d loss %.4f\n", step, avg / std::max(1, n));
        }
        if (!opt.sample_dir.empty() && (step + 1) % opt.sample_every == 0) {
            std::filesystem::create_directories(opt.sample_dir);
            const auto& ep = data.episodes[split % data.episodes.size()];
            Observation obs;
            obs.static_frame = dequantize(ep.static_frames[0]);
            obs.gripper_frame = dequantize(ep.gripper_frames[0]);
            obs.tokens = ep.tokens;
            RngStream srng = rng.derive("sample", step);
            if (model.spec.target == MotionTarget::pixel_motion) {
                GeneratedMotion gm = generate_motion(model, obs, model.spec.k_max, 25, srng);
                PixelMotion gt = episode_flow(ep, 0, model.spec.k_max);
                ImageF panel = hstack({obs.static_frame, colorize_motion(gt, model.spec.d_max),
                                       colorize_motion(gm.flow, model.spec.d_max)});
                char name[64];
                std::snprintf(name, sizeof(name), "step%06d.ppm", step + 1);
                write_ppm((std::filesystem::path(opt.sample_dir) / name).string(), panel);
            } else {
                ImageF goal = generate_rgb_goal(model, obs, model.spec.k_max, 25, srng);
                char name[64];
                std::snprintf(name, sizeof(name), "step%06d.ppm", step + 1);
                write_ppm((std::filesystem::path(opt.sample_dir) / name).string(),
                          hstack({obs.static_frame, goal}));
            }
        }
    }
    if (model.vae.checksum() != vae_sum_before)
        throw ContractError("frozen VAE parameters changed during diffusion training");
    return log;
}

namespace {

Tensor sample_latent(const MotionDirector& model, const Observation& obs, int k, int n_steps,
                     RngStream& rng) {
    NoGradGuard ng;
    Tensor frame = frame_tensor_pm1(obs.static_frame);
    Tensor cond = mul(model.vae.encode_mu(frame), model.vae.latent_scale);
    Tensor grip = frame_tensor_pm1(obs.gripper_frame);
    std::vector<int> ks{k};
    Tensor ctx = model.build_context(grip, obs.tokens, simc::kMaxTokens, ks);
    DenoiseFn<float> fn = [&](const Tensor& x_t, std::span<const int> ts) {
        return model.unet.forward(concat<float>({x_t, cond}, 1), ts, ctx);
    };
    SamplerConfig cfg{n_steps, 0.0};
    Tensor z = sample(fn, {1, model.vae.spec.latent_ch, 8, 8}, model.sched, cfg, rng);
    return mul(z, 1.0f / model.vae.latent_scale);
}

}  // namespace

GeneratedMotion generate_motion(const MotionDirector& model, const Observation& obs, int k,
                                int n_steps, RngStream& rng) {
    if (model.spec.target != MotionTarget::pixel_motion)
        throw ContractError("generate_motion requires a pixel-motion model");
    NoGradGuard ng;
    Tensor img = model.vae.decode(sample_latent(model, obs, k, n_steps, rng));
    GeneratedMotion out;
    out.image = tensor_to_motion(img);
    out.flow = decode_motion(out.image, model.spec.d_max);
    return out;
}

ImageF generate_rgb_goal(const MotionDirector& model, const Observation& obs, int k, int n_steps,
                         RngStream& rng) {
    if (model.spec.target != MotionTarget::rgb_goal)
        throw ContractError("generate_rgb_goal requires an rgb-goal model");
    NoGradGuard ng;
    Tensor img = model.vae.decode(sample_latent(model, obs, k, n_steps, rng));
    ImageF out;
    out.h = static_cast<int>(img.size(2));
    out.w = static_cast<int>(img.size(3));
    out.rgb.resize(static_cast<size_t>(out.h) * out.w * 3);
    const int hw = out.h * out.w;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < hw; ++i)
            out.rgb[i * 3 + c] = std::clamp((img.data()[c * hw + i] + 1.0f) / 2.0f, 0.0f, 1.0f);
    return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

void put_vae_meta(Checkpoint& ck, const MotionVAE& vae) {
    ck.set_meta("vae.base", static_cast<int64_t>(vae.spec.base));
    ck.set_meta("vae.latent_ch", static_cast<int64_t>(vae.spec.latent_ch));
    ck.set_meta("vae.latent_scale", static_cast<double>(vae.latent_scale));
}

MotionVAE vae_from_meta(const Checkpoint& ck) {
    VaeSpec vs;
    vs.base = static_cast<int>(ck.require_int("vae.base"));
    vs.latent_ch = static_cast<int>(ck.require_int("vae.latent_ch"));
    RngStream rng(0);
    MotionVAE vae(vs, rng);
    vae.latent_scale = static_cast<float>(ck.require_num("vae.latent_scale"));
    return vae;
}

}  // namespace

Checkpoint vae_checkpoint(const MotionVAE& vae) {
    Checkpoint ck;
    ck.kind = "vae";
    put_vae_meta(ck, vae);
    ck.set_meta("vocab", std::to_string(Vocab::size()));
    pack_params(ck, vae.params);
    return ck;
}

MotionVAE vae_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "vae") throw IncompatibleError("expected a vae checkpoint, got '" + ck.kind + "'");
    MotionVAE vae = vae_from_meta(ck);
    unpack_params(ck, vae.params);
    vae.freeze();
    return vae;
}

Checkpoint motion_checkpoint(const MotionDirector& model) {
    Checkpoint ck;
    ck.kind = model.spec.target == MotionTarget::pixel_motion ? "motion" : "motion-rgb-goal";
    put_vae_meta(ck, model.vae);
    ck.set_meta("unet.base", static_cast<int64_t>(model.spec.unet.base_width));
    ck.set_meta("unet.mult", join_ints(model.spec.unet.channel_mult));
    ck.set_meta("unet.attn", join_ints(model.spec.unet.attention_levels));
    ck.set_meta("unet.heads", static_cast<int64_t>(model.spec.unet.num_heads));
    ck.set_meta("ctx_dim", static_cast<int64_t>(model.spec.ctx_dim));
    ck.set_meta("text.width", static_cast<int64_t>(model.spec.text_width));
    ck.set_meta("text.depth", static_cast<int64_t>(model.spec.text_depth));
    ck.set_meta("text.heads", static_cast<int64_t>(model.spec.text_heads));
    ck.set_meta("use_gripper", static_cast<int64_t>(model.spec.use_gripper ? 1 : 0));
    ck.set_meta("schedule", schedule_kind_name(model.spec.schedule));
    ck.set_meta("t_train", static_cast<int64_t>(model.spec.t_train));
    ck.set_meta("d_max", static_cast<double>(model.spec.d_max));
    ck.set_meta("k_min", static_cast<int64_t>(model.spec.k_min));
    ck.set_meta("k_max", static_cast<int64_t>(model.spec.k_max));
    {
        std::ostringstream vs;
        const auto& words = Vocab::words();
        for (size_t i = 0; i < words.size(); ++i) vs << (i ? "," : "") << words[i];
        ck.set_meta("vocabulary", vs.str());
    }
    pack_params(ck, model.vae.params, "vae.");
    pack_params(ck, model.params, "model.");
    return ck;
}

MotionDirector motion_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "motion" && ck.kind != "motion-rgb-goal")
        throw IncompatibleError("expected a motion checkpoint, got '" + ck.kind + "'");
    MotionDirectorSpec s = MotionDirectorSpec::defaults();
    s.target = ck.kind == "motion" ? MotionTarget::pixel_motion : MotionTarget::rgb_goal;
    s.unet.base_width = static_cast<int>(ck.require_int("unet.base"));
    s.unet.channel_mult = split_ints(ck.require("unet.mult"));
    s.unet.attention_levels = split_ints(ck.require("unet.attn"));
    s.unet.num_heads = static_cast<int>(ck.require_int("unet.heads"));
    s.ctx_dim = static_cast<int>(ck.require_int("ctx_dim"));
    s.unet.context_dim = s.ctx_dim;
    s.text_width = static_cast<int>(ck.require_int("text.width"));
    s.text_depth = static_cast<int>(ck.require_int("text.depth"));
    s.text_heads = static_cast<int>(ck.require_int("text.heads"));
    s.use_gripper = ck.require_int("use_gripper") != 0;
    s.schedule = schedule_kind_from_name(ck.require("schedule"));
    s.t_train = static_cast<int>(ck.require_int("t_train"));
    s.d_max = static_cast<float>(ck.require_num("d_max"));
    s.k_min = static_cast<int>(ck.require_int("k_min"));
    s.k_max = static_cast<int>(ck.require_int("k_max"));
    MotionVAE vae = vae_from_meta(ck);
    RngStream rng(0);
    MotionDirector model(s, std::move(vae), rng);
    unpack_params(ck, model.vae.params, "vae.");
    model.vae.freeze();
    unpack_params(ck, model.params, "model.");
    return model;
}

}  // namespace dawn
