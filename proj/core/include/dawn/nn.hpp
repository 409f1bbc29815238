#pragma once

#include <span>
#include <string>
#include <vector>

#include "dawn/tensor.hpp"

namespace dawn {

// Sinusoidal embedding over log-spaced frequencies, sin half then cos half.
// Shared by diffusion timesteps and the temporal offset k.
template <class S>
TensorT<S> timestep_embed(int t, int dim);
template <class S>
TensorT<S> timestep_embed_batch(std::span<const int> ts, int dim);

template <class S>
struct LinearT {
    TensorT<S> w;  // [in, out]
    TensorT<S> b;  // [out], undefined when bias disabled

    LinearT() = default;
    LinearT(ParamStoreT<S>& ps, const std::string& name, int in, int out, RngStream& rng,
            bool bias = true, bool zero_init = false);
    TensorT<S> forward(const TensorT<S>& x) const;  // [..,in] -> [..,out]
};

template <class S>
struct Conv2dT {
    TensorT<S> w;  // [O,C,kh,kw]
    TensorT<S> b;  // [O]
    int stride = 1, pad = 0;

    Conv2dT() = default;
    Conv2dT(ParamStoreT<S>& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
            int pad, RngStream& rng, bool zero_init = false);
    TensorT<S> forward(const TensorT<S>& x) const;
};

template <class S>
struct GroupNormT {
    int groups = 8;
    TensorT<S> gamma, beta;

    GroupNormT() = default;
    GroupNormT(ParamStoreT<S>& ps, const std::string& name, int channels, int groups);
    TensorT<S> forward(const TensorT<S>& x) const;
};

template <class S>
struct LayerNormT {
    TensorT<S> gamma, beta;

    LayerNormT() = default;
    LayerNormT(ParamStoreT<S>& ps, const std::string& name, int dim);
    TensorT<S> forward(const TensorT<S>& x) const;
};

// Multi-head attention; self-attention when ctx is the input sequence.
// softmax(QK^T/sqrt(d_head))V with per-head projections; the residual is
// added by the caller. zero_init_out makes the block contribute exactly
// zero at initialization.
template <class S>
struct AttentionT {
    int num_heads = 1;
    LinearT<S> wq, wk, wv, wo;

    AttentionT() = default;
    AttentionT(ParamStoreT<S>& ps, const std::string& name, int dim, int ctx_dim, int num_heads,
               RngStream& rng, bool zero_init_out = false);
    TensorT<S> forward(const TensorT<S>& x, const TensorT<S>& ctx) const;  // [B,N,D],[B,M,Dc]
};

template <class S>
TensorT<S> cross_attention(const AttentionT<S>& attn, const TensorT<S>& x, const TensorT<S>& ctx);

// GroupNorm -> SiLU -> conv, with the timestep embedding projected into the
// channel dimension between the two convs; 1x1 skip when widths change.
template <class S>
struct ResBlockT {
    GroupNormT<S> gn1, gn2;
    Conv2dT<S> conv1, conv2, skip;
    LinearT<S> temb_proj;
    bool has_skip = false;

    ResBlockT() = default;
    ResBlockT(ParamStoreT<S>& ps, const std::string& name, int in_ch, int out_ch, int temb_dim,
              RngStream& rng);
    TensorT<S> forward(const TensorT<S>& x, const TensorT<S>& temb) const;  // temb [B,temb_dim]
};

struct UNetSpec {
    int in_channels = 8;
    int out_channels = 4;
    int base_width = 64;
    std::vector<int> channel_mult = {1, 2, 4};
    std::vector<int> attention_levels = {1, 2};  // indices into channel_mult
    int context_dim = 64;
    int num_heads = 4;
    bool zero_init_context = true;  // cross-attention out-projections start at zero
};

// Conditioned U-Net denoiser: per-level res blocks with self/cross
// attention at the configured levels, stride-2 downsampling, nearest
// upsampling, skip connections.
template <class S>
struct UNetT {
    UNetSpec spec;

    struct Level {
        ResBlockT<S> res;
        bool has_attn = false;
        GroupNormT<S> attn_norm;
        AttentionT<S> self_attn;
        LayerNormT<S> cross_norm;
        AttentionT<S> cross_attn;
        Conv2dT<S> down;  // unused on the last level
    };
    struct UpLevel {
        Conv2dT<S> up_conv;
        ResBlockT<S> res;
        bool has_attn = false;
        GroupNormT<S> attn_norm;
        AttentionT<S> self_attn;
        LayerNormT<S> cross_norm;
        AttentionT<S> cross_attn;
    };

    Conv2dT<S> conv_in;
    LinearT<S> temb1, temb2;
    std::vector<Level> down;
    ResBlockT<S> mid1, mid2;
    GroupNormT<S> mid_attn_norm;
    AttentionT<S> mid_self, mid_cross;
    LayerNormT<S> mid_cross_norm;
    std::vector<UpLevel> up;
    GroupNormT<S> norm_out;
    Conv2dT<S> conv_out;

    UNetT() = default;
    UNetT(ParamStoreT<S>& ps, const std::string& name, UNetSpec spec, RngStream& rng);

    // ts has one timestep per batch element; ctx [B,M,context_dim] may be
    // undefined, in which case cross-attention is skipped.
    TensorT<S> forward(const TensorT<S>& x, std::span<const int> ts, const TensorT<S>& ctx) const;
    TensorT<S> forward(const TensorT<S>& x, int t, const TensorT<S>& ctx) const;
};
using UNet = UNetT<float>;

struct TransformerSpec {
    int depth = 4;
    int width = 256;
    int num_heads = 4;
    int context_dim = 128;
    int seq_len = 10;
    int io_dim = 3;  // per-element dimensionality of the denoised sequence
    bool zero_init_context = true;
};

// Denoising transformer over a fixed-length sequence: pre-norm self
// attention, cross attention to the conditioning tokens, GELU MLP.
template <class S>
struct DiTT {
    TransformerSpec spec;

    struct Block {
        LayerNormT<S> ln1, ln2, ln3;
        AttentionT<S> self_attn, cross_attn;
        LinearT<S> mlp1, mlp2;
    };

    LinearT<S> proj_in;
    TensorT<S> pos_embed;  // [seq_len, width]
    LinearT<S> temb1, temb2;
    std::vector<Block> blocks;
    LayerNormT<S> norm_out;
    LinearT<S> proj_out;

    DiTT() = default;
    DiTT(ParamStoreT<S>& ps, const std::string& name, TransformerSpec spec, RngStream& rng);

    TensorT<S> forward(const TensorT<S>& seq, std::span<const int> ts, const TensorT<S>& ctx) const;
    TensorT<S> forward(const TensorT<S>& seq, int t, const TensorT<S>& ctx) const;
};
using DiT = DiTT<float>;

// Stack of stride-2 conv blocks mapping an image to a grid of context
// tokens: [B,3,H,W] -> [B, (H/2^n)*(W/2^n), token_dim].
template <class S>
struct ConvTokenizerT {
    std::vector<Conv2dT<S>> convs;
    std::vector<GroupNormT<S>> norms;
    Conv2dT<S> proj;

    ConvTokenizerT() = default;
    ConvTokenizerT(ParamStoreT<S>& ps, const std::string& name, int in_ch,
                   const std::vector<int>& widths, int token_dim, RngStream& rng);
    TensorT<S> forward(const TensorT<S>& img) const;
};
using ConvTokenizer = ConvTokenizerT<float>;

// Token embedding + learned positions + self-attention blocks; returns one
// token per input position.
template <class S>
struct TextEncoderT {
    int width = 64;
    TensorT<S> tok_embed;  // [vocab, width]
    TensorT<S> pos_embed;  // [max_len, width]
    struct Block {
        LayerNormT<S> ln1, ln2;
        AttentionT<S> attn;
        LinearT<S> mlp1, mlp2;
    };
    std::vector<Block> blocks;
    LayerNormT<S> norm_out;
    LinearT<S> proj_out;

    TextEncoderT() = default;
    TextEncoderT(ParamStoreT<S>& ps, const std::string& name, int vocab, int max_len, int width,
                 int depth, int num_heads, int out_dim, RngStream& rng);
    TensorT<S> forward(const std::vector<int32_t>& tokens, int batch, int len) const;
};
using TextEncoder = TextEncoderT<float>;

}  // namespace dawn
