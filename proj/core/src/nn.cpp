#include "dawn/nn.hpp"

#include <cmath>

namespace dawn {

// ---------------------------------------------------------------- embeddings

template <class S>
TensorT<S> timestep_embed(int t, int dim) {
    int arr[1] = {t};
    return reshape(timestep_embed_batch<S>(std::span<const int>(arr, 1), dim), {dim});
}

template <class S>
TensorT<S> timestep_embed_batch(std::span<const int> ts, int dim) {
    if (dim % 2 != 0) throw ConfigError("timestep embedding dim must be even, got " + std::to_string(dim));
    const int half = dim / 2;
    const int64_t B = static_cast<int64_t>(ts.size());
    std::vector<S> out(B * dim);
    for (int64_t b = 0; b < B; ++b) {
        if (ts[b] < 0) throw ContractError("timestep must be >= 0");
        for (int i = 0; i < half; ++i) {
            double f = half > 1 ? std::exp(-std::log(10000.0) * i / (half - 1)) : 1.0;
            double arg = ts[b] * f;
            out[b * dim + i] = static_cast<S>(std::sin(arg));
            out[b * dim + half + i] = static_cast<S>(std::cos(arg));
        }
    }
    return TensorT<S>::from_data({B, dim}, std::move(out));
}

// ---------------------------------------------------------------- linear / conv

template <class S>
LinearT<S>::LinearT(ParamStoreT<S>& ps, const std::string& name, int in, int out, RngStream& rng,
                    bool bias, bool zero_init) {
    S bound = static_cast<S>(1.0 / std::sqrt(static_cast<double>(in)));
    w = zero_init ? TensorT<S>::zeros({in, out})
                  : TensorT<S>::rand_uniform({in, out}, rng, -bound, bound);
    ps.add(name + ".w", w);
    if (bias) {
        b = TensorT<S>::zeros({out});
        ps.add(name + ".b", b);
    }
}

template <class S>
TensorT<S> LinearT<S>::forward(const TensorT<S>& x) const {
    TensorT<S> y = matmul(x, w);
    if (b.defined()) y = add(y, b);
    return y;
}

template <class S>
Conv2dT<S>::Conv2dT(ParamStoreT<S>& ps, const std::string& name, int in_ch, int out_ch, int k,
                    int stride_, int pad_, RngStream& rng, bool zero_init)
    : stride(stride_), pad(pad_) {
    S bound = static_cast<S>(1.0 / std::sqrt(static_cast<double>(in_ch) * k * k));
    w = zero_init ? TensorT<S>::zeros({out_ch, in_ch, k, k})
                  : TensorT<S>::rand_uniform({out_ch, in_ch, k, k}, rng, -bound, bound);
    b = TensorT<S>::zeros({out_ch});
    ps.add(name + ".w", w);
    ps.add(name + ".b", b);
}

template <class S>
TensorT<S> Conv2dT<S>::forward(const TensorT<S>& x) const {
    return conv2d(x, w, b, stride, pad);
}

// ---------------------------------------------------------------- norms

template <class S>
GroupNormT<S>::GroupNormT(ParamStoreT<S>& ps, const std::string& name, int channels, int groups_)
    : groups(groups_) {
    gamma = TensorT<S>::full({channels}, S(1));
    beta = TensorT<S>::zeros({channels});
    ps.add(name + ".g", gamma);
    ps.add(name + ".b", beta);
}

template <class S>
TensorT<S> GroupNormT<S>::forward(const TensorT<S>& x) const {
    return channel_affine(group_norm(x, groups), gamma, beta);
}

template <class S>
LayerNormT<S>::LayerNormT(ParamStoreT<S>& ps, const std::string& name, int dim) {
    gamma = TensorT<S>::full({dim}, S(1));
    beta = TensorT<S>::zeros({dim});
    ps.add(name + ".g", gamma);
    ps.add(name + ".b", beta);
}

template <class S>
TensorT<S> LayerNormT<S>::forward(const TensorT<S>& x) const {
    return add(mul(layer_norm(x), gamma), beta);
}

// ---------------------------------------------------------------- attention

template <class S>
AttentionT<S>::AttentionT(ParamStoreT<S>& ps, const std::string& name, int dim, int ctx_dim,
                          int num_heads_, RngStream& rng, bool zero_init_out)
    : num_heads(num_heads_) {
    if (dim % num_heads != 0)
        throw ShapeError("attention width " + std::to_string(dim) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
    wq = LinearT<S>(ps, name + ".q", dim, dim, rng, false);
    wk = LinearT<S>(ps, name + ".k", ctx_dim, dim, rng, false);
    wv = LinearT<S>(ps, name + ".v", ctx_dim, dim, rng, false);
    wo = LinearT<S>(ps, name + ".o", dim, dim, rng, true, zero_init_out);
}

template <class S>
TensorT<S> AttentionT<S>::forward(const TensorT<S>& x, const TensorT<S>& ctx) const {
    if (!ctx.defined() || ctx.numel() == 0 || ctx.size(1) == 0)
        throw ContractError("attention context must be nonempty");
    const int64_t B = x.size(0), N = x.size(1), D = x.size(2), M = ctx.size(1);
    const int64_t H = num_heads, dh = D / H;

    auto split_heads = [&](const TensorT<S>& t, int64_t len) {
        return reshape(permute(reshape(t, {B, len, H, dh}), {0, 2, 1, 3}), {B * H, len, dh});
    };
    TensorT<S> q = split_heads(wq.forward(x), N);
    TensorT<S> k = split_heads(wk.forward(ctx), M);
    TensorT<S> v = split_heads(wv.forward(ctx), M);

    TensorT<S> scores = mul(matmul(q, permute(k, {0, 2, 1})),
                            static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
    TensorT<S> att = softmax(scores, -1);
    TensorT<S> out = matmul(att, v);  // [B*H, N, dh]
    out = reshape(permute(reshape(out, {B, H, N, dh}), {0, 2, 1, 3}), {B, N, D});
    return wo.forward(out);
}

template <class S>
TensorT<S> cross_attention(const AttentionT<S>& attn, const TensorT<S>& x, const TensorT<S>& ctx) {
    return attn.forward(x, ctx);
}

// ---------------------------------------------------------------- res block

template <class S>
ResBlockT<S>::ResBlockT(ParamStoreT<S>& ps, const std::string& name, int in_ch, int out_ch,
                        int temb_dim, RngStream& rng) {
    gn1 = GroupNormT<S>(ps, name + ".gn1", in_ch, 8);
    conv1 = Conv2dT<S>(ps, name + ".conv1", in_ch, out_ch, 3, 1, 1, rng);
    if (temb_dim > 0) temb_proj = LinearT<S>(ps, name + ".temb", temb_dim, out_ch, rng);
    gn2 = GroupNormT<S>(ps, name + ".gn2", out_ch, 8);
    conv2 = Conv2dT<S>(ps, name + ".conv2", out_ch, out_ch, 3, 1, 1, rng, /*zero_init=*/true);
    if (in_ch != out_ch) {
        skip = Conv2dT<S>(ps, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
        has_skip = true;
    }
}

template <class S>
TensorT<S> ResBlockT<S>::forward(const TensorT<S>& x, const TensorT<S>& temb) const {
    TensorT<S> h = conv1.forward(silu(gn1.forward(x)));
    if (temb.defined() && temb_proj.w.defined()) {
        TensorT<S> tp = temb_proj.forward(silu(temb));  // [B, out_ch]
        h = add(h, reshape(tp, {tp.size(0), tp.size(1), 1, 1}));
    }
    h = conv2.forward(silu(gn2.forward(h)));
    return add(h, has_skip ? skip.forward(x) : x);
}

// ---------------------------------------------------------------- unet

namespace {

template <class S>
TensorT<S> spatial_tokens(const TensorT<S>& x) {
    // [B,C,H,W] -> [B,HW,C]
    return permute(reshape(x, {x.size(0), x.size(1), x.size(2) * x.size(3)}), {0, 2, 1});
}

template <class S>
TensorT<S> spatial_untokens(const TensorT<S>& t, int64_t C, int64_t H, int64_t W) {
    return reshape(permute(t, {0, 2, 1}), {t.size(0), C, H, W});
}

}  // namespace

template <class S>
UNetT<S>::UNetT(ParamStoreT<S>& ps, const std::string& name, UNetSpec s, RngStream& rng)
    : spec(std::move(s)) {
    const int L = static_cast<int>(spec.channel_mult.size());
    const int temb_dim = spec.base_width * 4;
    auto has_attn = [&](int level) {
        for (int a : spec.attention_levels)
            if (a == level) return true;
        return false;
    };
    if (spec.context_dim <= 0 && !spec.attention_levels.empty())
        throw ConfigError("unet: attention levels require context_dim > 0");

    conv_in = Conv2dT<S>(ps, name + ".in", spec.in_channels, spec.base_width, 3, 1, 1, rng);
    temb1 = LinearT<S>(ps, name + ".temb1", spec.base_width, temb_dim, rng);
    temb2 = LinearT<S>(ps, name + ".temb2", temb_dim, temb_dim, rng);

    int prev = spec.base_width;
    down.resize(L);
    for (int i = 0; i < L; ++i) {
        const int w = spec.base_width * spec.channel_mult[i];
        const std::string ln = name + ".down" + std::to_string(i);
        down[i].res = ResBlockT<S>(ps, ln + ".res", prev, w, temb_dim, rng);
        down[i].has_attn = has_attn(i);
        if (down[i].has_attn) {
            down[i].attn_norm = GroupNormT<S>(ps, ln + ".anorm", w, 8);
            down[i].self_attn = AttentionT<S>(ps, ln + ".self", w, w, spec.num_heads, rng);
            down[i].cross_norm = LayerNormT<S>(ps, ln + ".cnorm", w);
            down[i].cross_attn = AttentionT<S>(ps, ln + ".cross", w, spec.context_dim,
                                               spec.num_heads, rng, spec.zero_init_context);
        }
        if (i < L - 1) down[i].down = Conv2dT<S>(ps, ln + ".down", w, w, 4, 2, 1, rng);
        prev = w;
    }

    const int wm = spec.base_width * spec.channel_mult[L - 1];
    mid1 = ResBlockT<S>(ps, name + ".mid1", wm, wm, temb_dim, rng);
    mid_attn_norm = GroupNormT<S>(ps, name + ".midanorm", wm, 8);
    mid_self = AttentionT<S>(ps, name + ".midself", wm, wm, spec.num_heads, rng);
    mid_cross_norm = LayerNormT<S>(ps, name + ".midcnorm", wm);
    mid_cross = AttentionT<S>(ps, name + ".midcross", wm, spec.context_dim, spec.num_heads, rng,
                              spec.zero_init_context);
    mid2 = ResBlockT<S>(ps, name + ".mid2", wm, wm, temb_dim, rng);

    up.resize(L);
    for (int i = L - 1; i >= 0; --i) {
        const int w = spec.base_width * spec.channel_mult[i];
        const int cur = (i == L - 1) ? wm : spec.base_width * spec.channel_mult[i + 1];
        (void)cur;
        const std::string ln = name + ".up" + std::to_string(i);
        up[i].res = ResBlockT<S>(ps, ln + ".res", w + w, w, temb_dim, rng);
        up[i].has_attn = has_attn(i);
        if (up[i].has_attn) {
            up[i].attn_norm = GroupNormT<S>(ps, ln + ".anorm", w, 8);
            up[i].self_attn = AttentionT<S>(ps, ln + ".self", w, w, spec.num_heads, rng);
            up[i].cross_norm = LayerNormT<S>(ps, ln + ".cnorm", w);
            up[i].cross_attn = AttentionT<S>(ps, ln + ".cross", w, spec.context_dim,
                                             spec.num_heads, rng, spec.zero_init_context);
        }
        if (i > 0) {
            const int wn = spec.base_width * spec.channel_mult[i - 1];
            up[i].up_conv = Conv2dT<S>(ps, ln + ".upc", w, wn, 3, 1, 1, rng);
        }
    }

    norm_out = GroupNormT<S>(ps, name + ".onorm", spec.base_width, 8);
    conv_out = Conv2dT<S>(ps, name + ".out", spec.base_width, spec.out_channels, 3, 1, 1, rng,
                          /*zero_init=*/true);
}

namespace {

template <class S, class Lvl>
TensorT<S> apply_attn(const Lvl& lvl, TensorT<S> x, const TensorT<S>& ctx) {
    const int64_t C = x.size(1), H = x.size(2), W = x.size(3);
    TensorT<S> tok = spatial_tokens(lvl.attn_norm.forward(x));
    TensorT<S> s = lvl.self_attn.forward(tok, tok);
    x = add(x, spatial_untokens(s, C, H, W));
    if (ctx.defined()) {
        TensorT<S> tok2 = spatial_tokens(x);
        TensorT<S> c = lvl.cross_attn.forward(lvl.cross_norm.forward(tok2), ctx);
        x = add(x, spatial_untokens(c, C, H, W));
    }
    return x;
}

}  // namespace

template <class S>
TensorT<S> UNetT<S>::forward(const TensorT<S>& x, std::span<const int> ts,
                             const TensorT<S>& ctx) const {
    const int L = static_cast<int>(spec.channel_mult.size());
    const int64_t H = x.size(2), W = x.size(3);
    const int64_t div = int64_t(1) << (L - 1);
    if (H % div != 0 || W % div != 0)
        throw ConfigError("unet: spatial size " + shape_str(x.shape()) +
                          " not divisible by 2^(levels-1)");
    if (x.size(1) != spec.in_channels)
        throw ShapeError("unet: expected " + std::to_string(spec.in_channels) + " input channels, got " +
                         shape_str(x.shape()));
    if (ctx.defined() && ctx.size(2) != spec.context_dim)
        throw ShapeError("unet: context width mismatch: " + shape_str(ctx.shape()));

    TensorT<S> temb = temb2.forward(silu(temb1.forward(timestep_embed_batch<S>(ts, spec.base_width))));

    TensorT<S> cur = conv_in.forward(x);
    std::vector<TensorT<S>> skips;
    for (int i = 0; i < L; ++i) {
        cur = down[i].res.forward(cur, temb);
        if (down[i].has_attn) cur = apply_attn(down[i], cur, ctx);
        skips.push_back(cur);
        if (i < L - 1) cur = down[i].down.forward(cur);
    }
    cur = mid1.forward(cur, temb);
    {
        const int64_t C = cur.size(1), Hs = cur.size(2), Ws = cur.size(3);
        TensorT<S> tok = spatial_tokens(mid_attn_norm.forward(cur));
        cur = add(cur, spatial_untokens(mid_self.forward(tok, tok), C, Hs, Ws));
        if (ctx.defined()) {
            TensorT<S> tok2 = spatial_tokens(cur);
            TensorT<S> c = mid_cross.forward(mid_cross_norm.forward(tok2), ctx);
            cur = add(cur, spatial_untokens(c, C, Hs, Ws));
        }
    }
    cur = mid2.forward(cur, temb);
    for (int i = L - 1; i >= 0; --i) {
        cur = concat<S>({cur, skips[i]}, 1);
        cur = up[i].res.forward(cur, temb);
        if (up[i].has_attn) cur = apply_attn(up[i], cur, ctx);
        if (i > 0) cur = up[i].up_conv.forward(upsample2x(cur));
    }
    return conv_out.forward(silu(norm_out.forward(cur)));
}

template <class S>
TensorT<S> UNetT<S>::forward(const TensorT<S>& x, int t, const TensorT<S>& ctx) const {
    std::vector<int> ts(x.size(0), t);
    return forward(x, std::span<const int>(ts), ctx);
}

// ---------------------------------------------------------------- dit

template <class S>
DiTT<S>::DiTT(ParamStoreT<S>& ps, const std::string& name, TransformerSpec s, RngStream& rng)
    : spec(std::move(s)) {
    if (spec.width % spec.num_heads != 0)
        throw ConfigError("transformer width must be divisible by num_heads");
    proj_in = LinearT<S>(ps, name + ".pin", spec.io_dim, spec.width, rng);
    pos_embed = TensorT<S>::randn({spec.seq_len, spec.width}, rng, S(0.02));
    ps.add(name + ".pos", pos_embed);
    temb1 = LinearT<S>(ps, name + ".temb1", spec.width, spec.width, rng);
    temb2 = LinearT<S>(ps, name + ".temb2", spec.width, spec.width, rng);
    blocks.resize(spec.depth);
    for (int i = 0; i < spec.depth; ++i) {
        const std::string bn = name + ".blk" + std::to_string(i);
        blocks[i].ln1 = LayerNormT<S>(ps, bn + ".ln1", spec.width);
        blocks[i].self_attn = AttentionT<S>(ps, bn + ".self", spec.width, spec.width,
                                            spec.num_heads, rng);
        blocks[i].ln2 = LayerNormT<S>(ps, bn + ".ln2", spec.width);
        blocks[i].cross_attn = AttentionT<S>(ps, bn + ".cross", spec.width, spec.context_dim,
                                             spec.num_heads, rng, spec.zero_init_context);
        blocks[i].ln3 = LayerNormT<S>(ps, bn + ".ln3", spec.width);
        blocks[i].mlp1 = LinearT<S>(ps, bn + ".mlp1", spec.width, spec.width * 2, rng);
        blocks[i].mlp2 = LinearT<S>(ps, bn + ".mlp2", spec.width * 2, spec.width, rng);
    }
    norm_out = LayerNormT<S>(ps, name + ".onorm", spec.width);
    proj_out = LinearT<S>(ps, name + ".pout", spec.width, spec.io_dim, rng, true, /*zero_init=*/true);
}

template <class S>
TensorT<S> DiTT<S>::forward(const TensorT<S>& seq, std::span<const int> ts,
                            const TensorT<S>& ctx) const {
    if (seq.size(1) != spec.seq_len)
        throw ShapeError("transformer: sequence length mismatch " + shape_str(seq.shape()));
    if (ctx.defined() && ctx.size(2) != spec.context_dim)
        throw ShapeError("transformer: context width mismatch " + shape_str(ctx.shape()));
    TensorT<S> temb =
        temb2.forward(silu(temb1.forward(timestep_embed_batch<S>(ts, spec.width))));
    TensorT<S> x = add(proj_in.forward(seq), pos_embed);
    x = add(x, reshape(temb, {temb.size(0), 1, spec.width}));
    for (const auto& blk : blocks) {
        TensorT<S> h = blk.ln1.forward(x);
        x = add(x, blk.self_attn.forward(h, h));
        if (ctx.defined()) x = add(x, blk.cross_attn.forward(blk.ln2.forward(x), ctx));
        x = add(x, blk.mlp2.forward(gelu(blk.mlp1.forward(blk.ln3.forward(x)))));
    }
    return proj_out.forward(norm_out.forward(x));
}

template <class S>
TensorT<S> DiTT<S>::forward(const TensorT<S>& seq, int t, const TensorT<S>& ctx) const {
    std::vector<int> ts(seq.size(0), t);
    return forward(seq, std::span<const int>(ts), ctx);
}

// ---------------------------------------------------------------- tokenizers

template <class S>
ConvTokenizerT<S>::ConvTokenizerT(ParamStoreT<S>& ps, const std::string& name, int in_ch,
                                  const std::vector<int>& widths, int token_dim, RngStream& rng) {
    int prev = in_ch;
    for (size_t i = 0; i < widths.size(); ++i) {
        convs.push_back(Conv2dT<S>(ps, name + ".c" + std::to_string(i), prev, widths[i], 4, 2, 1, rng));
        norms.push_back(GroupNormT<S>(ps, name + ".n" + std::to_string(i), widths[i], 8));
        prev = widths[i];
    }
    proj = Conv2dT<S>(ps, name + ".proj", prev, token_dim, 1, 1, 0, rng);
}

template <class S>
TensorT<S> ConvTokenizerT<S>::forward(const TensorT<S>& img) const {
    TensorT<S> x = img;
    for (size_t i = 0; i < convs.size(); ++i) x = silu(norms[i].forward(convs[i].forward(x)));
    x = proj.forward(x);
    return spatial_tokens(x);  // [B, HW, token_dim]
}

// ---------------------------------------------------------------- text encoder

template <class S>
TextEncoderT<S>::TextEncoderT(ParamStoreT<S>& ps, const std::string& name, int vocab, int max_len,
                              int width_, int depth, int num_heads, int out_dim, RngStream& rng)
    : width(width_) {
    tok_embed = TensorT<S>::randn({vocab, width}, rng, S(0.02));
    ps.add(name + ".tok", tok_embed);
    pos_embed = TensorT<S>::randn({max_len, width}, rng, S(0.02));
    ps.add(name + ".pos", pos_embed);
    blocks.resize(depth);
    for (int i = 0; i < depth; ++i) {
        const std::string bn = name + ".blk" + std::to_string(i);
        blocks[i].ln1 = LayerNormT<S>(ps, bn + ".ln1", width);
        blocks[i].attn = AttentionT<S>(ps, bn + ".attn", width, width, num_heads, rng);
        blocks[i].ln2 = LayerNormT<S>(ps, bn + ".ln2", width);
        blocks[i].mlp1 = LinearT<S>(ps, bn + ".mlp1", width, width * 2, rng);
        blocks[i].mlp2 = LinearT<S>(ps, bn + ".mlp2", width * 2, width, rng);
    }
    norm_out = LayerNormT<S>(ps, name + ".onorm", width);
    proj_out = LinearT<S>(ps, name + ".pout", width, out_dim, rng);
}

template <class S>
TensorT<S> TextEncoderT<S>::forward(const std::vector<int32_t>& tokens, int batch, int len) const {
    TensorT<S> x = embedding(tok_embed, tokens, {batch, len});
    x = add(x, slice(pos_embed, 0, 0, len));
    for (const auto& blk : blocks) {
        TensorT<S> h = blk.ln1.forward(x);
        x = add(x, blk.attn.forward(h, h));
        x = add(x, blk.mlp2.forward(gelu(blk.mlp1.forward(blk.ln2.forward(x)))));
    }
    return proj_out.forward(norm_out.forward(x));
}

// ---------------------------------------------------------------- instantiation

#define DAWN_NN_INSTANTIATE(S)                                                                \
    template TensorT<S> timestep_embed<S>(int, int);                                         \
    template TensorT<S> timestep_embed_batch<S>(std::span<const int>, int);                  \
    template struct LinearT<S>;                                                              \
    template struct Conv2dT<S>;                                                              \
    template struct GroupNormT<S>;                                                           \
    template struct LayerNormT<S>;                                                           \
    template struct AttentionT<S>;                                                           \
    template TensorT<S> cross_attention<S>(const AttentionT<S>&, const TensorT<S>&,          \
                                           const TensorT<S>&);                               \
    template struct ResBlockT<S>;                                                            \
    template struct UNetT<S>;                                                                \
    template struct DiTT<S>;                                                                 \
    template struct ConvTokenizerT<S>;                                                       \
    template struct TextEncoderT<S>;

DAWN_NN_INSTANTIATE(float)
DAWN_NN_INSTANTIATE(double)

}  // namespace dawn
