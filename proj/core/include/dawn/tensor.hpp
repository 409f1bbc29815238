#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dawn/common.hpp"
#include "dawn/rng.hpp"

namespace dawn {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

template <class S>
struct TensorImpl;

// Dense n-dimensional array with reverse-mode autodiff. A TensorT is a
// cheap handle sharing storage; data is immutable after creation except for
// grad buffers and explicit optimizer updates. The computation graph is
// built eagerly during the forward pass and released by backward().
//
// S is float for training, double for verification (gradient checks run in
// the double instantiation).
template <class S>
class TensorT {
  public:
    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false);
    static TensorT full(Shape shape, S value, bool requires_grad = false);
    static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false);
    static TensorT scalar(S value);
    static TensorT randn(Shape shape, RngStream& rng, S stddev = S(1), bool requires_grad = false);
    static TensorT rand_uniform(Shape shape, RngStream& rng, S lo, S hi, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int ndim() const;
    int64_t size(int axis) const;

    std::span<S> data();
    std::span<const S> data() const;
    std::span<S> grad() const;  // allocates a zeroed buffer on first access
    bool has_grad() const;
    void zero_grad();

    bool requires_grad() const;
    TensorT& set_requires_grad(bool v);

    S item() const;  // scalar tensors only
    S at(std::initializer_list<int64_t> idx) const;

    TensorT detach() const;  // shares data, drops graph and grad tracking
    TensorT clone() const;   // deep copy of data (leaf, no graph)

    template <class T>
    TensorT<T> cast() const;  // deep copy converting the scalar type

    TensorImpl<S>* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl<S>> impl_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Scoped guard disabling graph construction (inference / sampling).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Runs reverse-mode accumulation from a scalar loss. Every reachable leaf
// with requires_grad set receives (additively accumulated) gradients; the
// graph reachable from `loss` is freed afterwards.
template <class S>
void backward(const TensorT<S>& loss);

// ---- elementwise ----
template <class S> TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);
template <class S> TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
template <class S> TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
template <class S> TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b);
template <class S> TensorT<S> add(const TensorT<S>& a, S b);
template <class S> TensorT<S> mul(const TensorT<S>& a, S b);
template <class S> TensorT<S> neg(const TensorT<S>& a);
template <class S> TensorT<S> exp(const TensorT<S>& a);
template <class S> TensorT<S> log(const TensorT<S>& a);
template <class S> TensorT<S> sqrt(const TensorT<S>& a);
template <class S> TensorT<S> pow(const TensorT<S>& a, S exponent);
template <class S> TensorT<S> silu(const TensorT<S>& a);
template <class S> TensorT<S> gelu(const TensorT<S>& a);
template <class S> TensorT<S> tanh(const TensorT<S>& a);
template <class S> TensorT<S> sigmoid(const TensorT<S>& a);

// ---- contractions ----
// Batched matrix product [..,M,K] x [..,K,N] -> [..,M,N]; leading dims
// broadcast under trailing-alignment rules.
template <class S> TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b);

// Cross-correlation: x [B,C,H,W], w [O,C,kh,kw], optional bias [O].
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                  int stride = 1, int pad = 0);

// ---- reductions ----
template <class S> TensorT<S> sum(const TensorT<S>& x, const std::vector<int>& axes, bool keepdim = false);
template <class S> TensorT<S> sum(const TensorT<S>& x);  // all axes -> scalar
template <class S> TensorT<S> mean(const TensorT<S>& x, const std::vector<int>& axes, bool keepdim = false);
template <class S> TensorT<S> mean(const TensorT<S>& x);
template <class S> TensorT<S> max(const TensorT<S>& x, int axis, bool keepdim = false);
template <class S> TensorT<S> softmax(const TensorT<S>& x, int axis = -1);
template <class S> TensorT<S> logsumexp(const TensorT<S>& x, int axis = -1);

// ---- shape ops ----
template <class S> TensorT<S> reshape(const TensorT<S>& x, Shape shape);
template <class S> TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& dims);
template <class S> TensorT<S> slice(const TensorT<S>& x, int axis, int64_t start, int64_t stop);
template <class S> TensorT<S> concat(const std::vector<TensorT<S>>& xs, int axis);
template <class S> TensorT<S> upsample2x(const TensorT<S>& x);  // nearest, [B,C,H,W]

// ---- normalization primitives ----
// Normalizes [B,C,H,W] per (batch, group) to zero mean / unit variance.
// Affine transforms are applied separately (channel_affine).
template <class S> TensorT<S> group_norm(const TensorT<S>& x, int groups, S eps = S(1e-5));
// Normalizes the last axis of x.
template <class S> TensorT<S> layer_norm(const TensorT<S>& x, S eps = S(1e-5));
// y[b,c,*] = x[b,c,*] * gamma[c] + beta[c] for x [B,C,...].
template <class S>
TensorT<S> channel_affine(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta);

// Row gather: table [V,D], ids with shape ids_shape -> [ids_shape..,D].
template <class S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<int32_t>& ids, Shape ids_shape);

// mean((a-b)^2) over all elements.
template <class S> TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b);

// ---- parameters / optimizer ----
template <class S>
struct ParamStoreT {
    std::vector<std::pair<std::string, TensorT<S>>> items;

    TensorT<S>& add(const std::string& name, TensorT<S> t);
    TensorT<S>* find(const std::string& name);
    void zero_grad();
    int64_t numel() const;
};
using ParamStore = ParamStoreT<float>;

// AdamW with decoupled weight decay (applied before the moment update) and
// bias-corrected moments. Aborts with the parameter name on NaN gradients.
template <class S>
struct AdamWT {
    S lr = S(1e-4);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    S weight_decay = S(0);

    struct Slot {
        std::vector<S> m, v;
    };
    std::vector<Slot> slots;
    int64_t t = 0;

    void step(ParamStoreT<S>& params);
};
using AdamW = AdamWT<float>;

}  // namespace dawn
