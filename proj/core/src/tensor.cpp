#include "dawn/tensor.hpp"

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace dawn {

namespace {

template <class S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;

thread_local int g_no_grad_depth = 0;

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------- impl

template <class S>
struct TensorImpl {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until touched
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<TensorImpl<S>>> parents;
    std::function<void(TensorImpl<S>&)> backfn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    std::span<S> grad_span() {
        if (grad.empty()) grad.assign(data.size(), S(0));
        return grad;
    }
};

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---------------------------------------------------------------- handle

template <class S>
TensorT<S> TensorT<S>::zeros(Shape shape, bool requires_grad) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(shape_numel(t.impl_->shape), S(0));
    t.impl_->requires_grad = requires_grad;
    return t;
}

template <class S>
TensorT<S> TensorT<S>::full(Shape shape, S value, bool requires_grad) {
    TensorT t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

template <class S>
TensorT<S> TensorT<S>::from_data(Shape shape, std::vector<S> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data size " +
                         std::to_string(data.size()));
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

template <class S>
TensorT<S> TensorT<S>::scalar(S value) {
    return from_data({1}, {value});
}

template <class S>
TensorT<S> TensorT<S>::randn(Shape shape, RngStream& rng, S stddev, bool requires_grad) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (S& v : t.impl_->data) v = static_cast<S>(rng.normal()) * stddev;
    return t;
}

template <class S>
TensorT<S> TensorT<S>::rand_uniform(Shape shape, RngStream& rng, S lo, S hi, bool requires_grad) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (S& v : t.impl_->data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

template <class S> const Shape& TensorT<S>::shape() const { return impl_->shape; }
template <class S> int64_t TensorT<S>::numel() const { return impl_->numel(); }
template <class S> int TensorT<S>::ndim() const { return static_cast<int>(impl_->shape.size()); }
template <class S> int64_t TensorT<S>::size(int axis) const {
    if (axis < 0) axis += ndim();
    return impl_->shape[axis];
}
template <class S> std::span<S> TensorT<S>::data() { return impl_->data; }
template <class S> std::span<const S> TensorT<S>::data() const { return impl_->data; }
template <class S> std::span<S> TensorT<S>::grad() const { return impl_->grad_span(); }
template <class S> bool TensorT<S>::has_grad() const { return !impl_->grad.empty(); }
template <class S> void TensorT<S>::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
}
template <class S> bool TensorT<S>::requires_grad() const { return impl_->requires_grad; }
template <class S> TensorT<S>& TensorT<S>::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

template <class S>
S TensorT<S>::item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

template <class S>
S TensorT<S>::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) throw ShapeError("at(): rank mismatch");
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) off = off * s[i] + v, ++i;
    return impl_->data[off];
}

template <class S>
TensorT<S> TensorT<S>::detach() const {
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;  // value copy; detached views are rare and small here
    return t;
}

template <class S>
TensorT<S> TensorT<S>::clone() const {
    return from_data(impl_->shape, impl_->data);
}

template <class S>
template <class T>
TensorT<T> TensorT<S>::cast() const {
    std::vector<T> out(impl_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(impl_->data[i]);
    return TensorT<T>::from_data(impl_->shape, std::move(out));
}

// ---------------------------------------------------------------- graph

namespace {

template <class S>
TensorT<S> make_result(Shape shape, std::vector<S> data,
                       std::vector<TensorT<S>> parents,
                       std::function<void(TensorImpl<S>&)> backfn) {
    TensorT<S> out = TensorT<S>::from_data(std::move(shape), std::move(data));
    bool needs = false;
    if (grad_enabled())
        for (const auto& p : parents)
            if (p.defined() && p.impl()->requires_grad) needs = true;
    if (needs) {
        out.impl_->requires_grad = true;
        out.impl_->leaf = false;
        for (auto& p : parents)
            if (p.defined()) out.impl_->parents.push_back(p.impl_);
        out.impl_->backfn = std::move(backfn);
    }
    return out;
}

}  // namespace

template <class S>
void backward(const TensorT<S>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward() requires a scalar loss");
    // Iterative post-order topological sort over parents. Shared ownership
    // keeps nodes alive while the graph is dismantled below.
    std::vector<std::shared_ptr<TensorImpl<S>>> topo;
    std::unordered_set<TensorImpl<S>*> visited;
    std::vector<std::pair<std::shared_ptr<TensorImpl<S>>, size_t>> stack;
    stack.push_back({loss.impl_, 0});
    visited.insert(loss.impl());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            const auto& p = node->parents[child++];
            if (!visited.count(p.get())) {
                visited.insert(p.get());
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    loss.impl()->grad_span()[0] = S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorImpl<S>* node = it->get();
        if (node->backfn) {
            node->grad_span();  // ensure allocated (zero contribution is valid)
            node->backfn(*node);
        }
        // Intermediate grads are consumed once this node's rule has run.
        node->backfn = nullptr;
        if (!node->leaf) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
    for (auto& node : topo) node->parents.clear();
}

// ---------------------------------------------------------------- broadcast

namespace {

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 on broadcast dims, right-aligned to out rank.
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    int64_t stride = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        size_t oi = out.size() - s.size() + i;
        st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : stride;
        stride *= s[i];
    }
    return st;
}

// Calls fn(out_index, a_index, b_index) for every element of `out` in
// memory order. Serial; used by the general broadcast paths.
template <class F>
void broadcast_iter(const Shape& out, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, F&& fn) {
    const int nd = static_cast<int>(out.size());
    const int64_t n = shape_numel(out);
    std::vector<int64_t> idx(nd, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0; o < n; ++o) {
        fn(o, ia, ib);
        for (int d = nd - 1; d >= 0; --d) {
            ia += sa[d];
            ib += sb[d];
            if (++idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------- elementwise

namespace {

template <class S>
struct BinOp {
    const char* name;
    S (*fwd)(S, S);
    S (*da)(S, S, S);  // (a, b, y) -> dy/da
    S (*db)(S, S, S);
};

template <class S>
TensorT<S> binary_ew(const BinOp<S>& op, const TensorT<S>& a, const TensorT<S>& b) {
    Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    std::vector<S> out(shape_numel(out_shape));
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    if (a.shape() == b.shape()) {
        const int64_t n = out.size();
        const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && n > 16384)
        for (int64_t i = 0; i < n; ++i) out[i] = op.fwd(pa[i], pb[i]);
    } else {
        auto sa = broadcast_strides(a.shape(), out_shape);
        auto sb = broadcast_strides(b.shape(), out_shape);
        broadcast_iter(out_shape, sa, sb,
                       [&](int64_t o, int64_t ia, int64_t ib) { out[o] = op.fwd(pa[ia], pb[ib]); });
    }
    auto fwd_shape = out_shape;
    return make_result<S>(
        std::move(out_shape), std::move(out), {a, b},
        [op, a, b, fwd_shape](TensorImpl<S>& self) {
            const S* g = self.grad.data();
            const S* pa2 = a.data().data();
            const S* pb2 = b.data().data();
            const S* y = self.data.data();
            const bool need_a = a.impl()->requires_grad;
            const bool need_b = b.impl()->requires_grad;
            if (a.shape() == b.shape()) {
                S* ga = need_a ? a.grad().data() : nullptr;
                S* gb = need_b ? b.grad().data() : nullptr;
                const int64_t n = self.numel();
                const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && n > 16384)
                for (int64_t i = 0; i < n; ++i) {
                    if (ga) ga[i] += g[i] * op.da(pa2[i], pb2[i], y[i]);
                    if (gb) gb[i] += g[i] * op.db(pa2[i], pb2[i], y[i]);
                }
            } else {
                auto sa = broadcast_strides(a.shape(), fwd_shape);
                auto sb = broadcast_strides(b.shape(), fwd_shape);
                S* ga = need_a ? a.grad().data() : nullptr;
                S* gb = need_b ? b.grad().data() : nullptr;
                broadcast_iter(fwd_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                    if (ga) ga[ia] += g[o] * op.da(pa2[ia], pb2[ib], y[o]);
                    if (gb) gb[ib] += g[o] * op.db(pa2[ia], pb2[ib], y[o]);
                });
            }
        });
}

template <class S>
TensorT<S> unary_ew(const char*, const TensorT<S>& a, S (*fwd)(S), S (*bwd)(S, S)) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    const int64_t n = out.size();
    const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && n > 8192)
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    return make_result<S>(a.shape(), std::move(out), {a}, [a, bwd](TensorImpl<S>& self) {
        if (!a.impl()->requires_grad) return;
        const S* g = self.grad.data();
        const S* pa2 = a.data().data();
        const S* y = self.data.data();
        S* ga = a.grad().data();
        const int64_t m = self.numel();
        const int nth = num_threads();
#pragma omp parallel for schedule(static) num_threads(nth) if (nth > 1 && m > 8192)
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * bwd(pa2[i], y[i]);
    });
}

template <class S> S sigmoid_val(S x) { return S(1) / (S(1) + std::exp(-x)); }

}  // namespace

template <class S> TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    static const BinOp<S> op{"add", [](S x, S y) { return x + y; },
                             [](S, S, S) { return S(1); }, [](S, S, S) { return S(1); }};
    return binary_ew(op, a, b);
}
template <class S> TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    static const BinOp<S> op{"sub", [](S x, S y) { return x - y; },
                             [](S, S, S) { return S(1); }, [](S, S, S) { return S(-1); }};
    return binary_ew(op, a, b);
}
template <class S> TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    static const BinOp<S> op{"mul", [](S x, S y) { return x * y; },
                             [](S, S y, S) { return y; }, [](S x, S, S) { return x; }};
    return binary_ew(op, a, b);
}
template <class S> TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    static const BinOp<S> op{"div", [](S x, S y) { return x / y; },
                             [](S, S y, S) { return S(1) / y; },
                             [](S x, S y, S) { return -x / (y * y); }};
    return binary_ew(op, a, b);
}
template <class S> TensorT<S> add(const TensorT<S>& a, S b) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] + b;
    return make_result<S>(a.shape(), std::move(out), {a}, [a](TensorImpl<S>& self) {
        if (!a.impl()->requires_grad) return;
        S* ga = a.grad().data();
        const S* g = self.grad.data();
        for (int64_t i = 0; i < self.numel(); ++i) ga[i] += g[i];
    });
}
template <class S> TensorT<S> mul(const TensorT<S>& a, S b) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] * b;
    return make_result<S>(a.shape(), std::move(out), {a}, [a, b](TensorImpl<S>& self) {
        if (!a.impl()->requires_grad) return;
        S* ga = a.grad().data();
        const S* g = self.grad.data();
        for (int64_t i = 0; i < self.numel(); ++i) ga[i] += g[i] * b;
    });
}
template <class S> TensorT<S> neg(const TensorT<S>& a) { return mul(a, S(-1)); }
template <class S> TensorT<S> exp(const TensorT<S>& a) {
    return unary_ew<S>("exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}
template <class S> TensorT<S> log(const TensorT<S>& a) {
    return unary_ew<S>("log", a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}
template <class S> TensorT<S> sqrt(const TensorT<S>& a) {
    return unary_ew<S>("sqrt", a, [](S x) { return std::sqrt(x); },
                       [](S, S y) { return S(0.5) / y; });
}
template <class S> TensorT<S> pow(const TensorT<S>& a, S p) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::pow(pa[i], p);
    return make_result<S>(a.shape(), std::move(out), {a}, [a, p](TensorImpl<S>& self) {
        if (!a.impl()->requires_grad) return;
        S* ga = a.grad().data();
        const S* g = self.grad.data();
        const S* pa2 = a.data().data();
        for (int64_t i = 0; i < self.numel(); ++i)
            ga[i] += g[i] * p * std::pow(pa2[i], p - S(1));
    });
}
template <class S> TensorT<S> silu(const TensorT<S>& a) {
    return unary_ew<S>("silu", a, [](S x) { return x * sigmoid_val(x); },
                       [](S x, S) {
                           S s = sigmoid_val(x);
                           return s * (S(1) + x * (S(1) - s));
                       });
}
template <class S> TensorT<S> gelu(const TensorT<S>& a) {
    return unary_ew<S>("gelu", a,
                       [](S x) { return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2))); },
                       [](S x, S) {
                           S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
                           S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
                           return cdf + x * pdf;
                       });
}
template <class S> TensorT<S> tanh(const TensorT<S>& a) {
    return unary_ew<S>("tanh", a, [](S x) { return std::tanh(x); },
                       [](S, S y) { return S(1) - y * y; });
}
template <class S> TensorT<S> sigmoid(const TensorT<S>& a) {
    return unary_ew<S>("sigmoid", a, [](S x) { return sigmoid_val(x); },
                       [](S, S y) { return y * (S(1) - y); });
}

// ---------------------------------------------------------------- matmul

namespace {

// Fixed chunk sizes keep the per-call gemm shapes identical for any worker
// count, so the blocked accumulation rounds identically and results are
// bit-reproducible across thread settings.
constexpr int64_t kGemmRowChunk = 1024;
constexpr int64_t kGemmColChunk = 8192;

template <class S>
void gemm_rows_parallel(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n,
                        bool accumulate = false) {
    const int threads = num_threads();
#pragma omp parallel for schedule(static, 1) num_threads(threads)     if (threads > 1 && m > kGemmRowChunk)
    for (int64_t r0 = 0; r0 < m; r0 += kGemmRowChunk) {
        const int64_t rows = std::min(kGemmRowChunk, m - r0);
        ConstMatMap<S> A(a + r0 * k, rows, k);
        ConstMatMap<S> B(b, k, n);
        MatMap<S> C(c + r0 * n, rows, n);
        if (accumulate)
            C.noalias() += A * B;
        else
            C.noalias() = A * B;
    }
}

struct MatmulPlan {
    Shape out_shape;
    Shape batch;                       // broadcast batch dims
    std::vector<int64_t> sa, sb;       // batch strides (elements of one slice)
    int64_t m, k, n, nbatch;
};

template <class S>
MatmulPlan matmul_plan(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw ShapeError("matmul requires rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    MatmulPlan p;
    p.m = a.size(-2);
    p.k = a.size(-1);
    p.n = b.size(-1);
    if (b.size(-2) != p.k)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    p.batch = broadcast_shapes(ba, bb);
    p.nbatch = shape_numel(p.batch);
    auto sa_nd = broadcast_strides(ba, p.batch);
    auto sb_nd = broadcast_strides(bb, p.batch);
    // Flatten batch odometer strides into per-batch-linear-index offsets.
    p.sa.resize(p.nbatch);
    p.sb.resize(p.nbatch);
    std::vector<int64_t> idx(p.batch.size(), 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0; o < p.nbatch; ++o) {
        p.sa[o] = ia * p.m * p.k;
        p.sb[o] = ib * p.k * p.n;
        for (int d = static_cast<int>(p.batch.size()) - 1; d >= 0; --d) {
            ia += sa_nd[d];
            ib += sb_nd[d];
            if (++idx[d] < p.batch[d]) break;
            ia -= sa_nd[d] * p.batch[d];
            ib -= sb_nd[d] * p.batch[d];
            idx[d] = 0;
        }
    }
    p.out_shape = p.batch;
    p.out_shape.push_back(p.m);
    p.out_shape.push_back(p.n);
    return p;
}

}  // namespace

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    MatmulPlan p = matmul_plan(a, b);
    std::vector<S> out(p.nbatch * p.m * p.n);
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    if (b.ndim() == 2 && p.nbatch >= 1) {
        // Fold batch into rows: [nbatch*m, k] x [k, n].
        gemm_rows_parallel(pa, pb, out.data(), p.nbatch * p.m, p.k, p.n);
    } else {
        const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && p.nbatch > 1)
        for (int64_t i = 0; i < p.nbatch; ++i) {
            ConstMatMap<S> A(pa + p.sa[i], p.m, p.k);
            ConstMatMap<S> B(pb + p.sb[i], p.k, p.n);
            MatMap<S> C(out.data() + i * p.m * p.n, p.m, p.n);
            C.noalias() = A * B;
        }
    }
    return make_result<S>(p.out_shape, std::move(out), {a, b}, [a, b, p](TensorImpl<S>& self) {
        const S* g = self.grad.data();
        const S* pa2 = a.data().data();
        const S* pb2 = b.data().data();
        if (a.impl()->requires_grad) {
            S* ga = a.grad().data();
            if (b.ndim() == 2) {
                // dA = dC x B^T as one fold.
                const int64_t rows = p.nbatch * p.m;
                const int threads = num_threads();
#pragma omp parallel for schedule(static, 1) num_threads(threads)     if (threads > 1 && rows > kGemmRowChunk)
                for (int64_t r0 = 0; r0 < rows; r0 += kGemmRowChunk) {
                    const int64_t nr = std::min(kGemmRowChunk, rows - r0);
                    ConstMatMap<S> G(g + r0 * p.n, nr, p.n);
                    ConstMatMap<S> B(pb2, p.k, p.n);
                    MatMap<S> GA(ga + r0 * p.k, nr, p.k);
                    GA.noalias() += G * B.transpose();
                }
            } else {
                for (int64_t i = 0; i < p.nbatch; ++i) {
                    ConstMatMap<S> G(g + i * p.m * p.n, p.m, p.n);
                    ConstMatMap<S> B(pb2 + p.sb[i], p.k, p.n);
                    MatMap<S> GA(ga + p.sa[i], p.m, p.k);
                    GA.noalias() += G * B.transpose();
                }
            }
        }
        if (b.impl()->requires_grad) {
            S* gb = b.grad().data();
            if (b.ndim() == 2) {
                // dB = A^T x dC folding batch into the reduction dim: the
                // k-order is the flattened batch*m order, fixed and serial
                // per output element.
                const int64_t rows = p.nbatch * p.m;
                ConstMatMap<S> A(pa2, rows, p.k);
                ConstMatMap<S> G(g, rows, p.n);
                const int threads = num_threads();
                constexpr int64_t kChunk = 128;
#pragma omp parallel for schedule(static, 1) num_threads(threads)     if (threads > 1 && p.k > kChunk)
                for (int64_t c0 = 0; c0 < p.k; c0 += kChunk) {
                    const int64_t nc = std::min(kChunk, p.k - c0);
                    MatMap<S> GB(gb + c0 * p.n, nc, p.n);
                    GB.noalias() += A.middleCols(c0, nc).transpose() * G;
                }
            } else {
                for (int64_t i = 0; i < p.nbatch; ++i) {
                    ConstMatMap<S> A(pa2 + p.sa[i], p.m, p.k);
                    ConstMatMap<S> G(g + i * p.m * p.n, p.m, p.n);
                    MatMap<S> GB(gb + p.sb[i], p.k, p.n);
                    GB.noalias() += A.transpose() * G;
                }
            }
        }
    });
}

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvDims {
    int64_t B, C, H, W, O, kh, kw, Ho, Wo, ckk, hp;
};

template <class S>
ConvDims conv_dims(const TensorT<S>& x, const TensorT<S>& w, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw ShapeError("conv2d expects 4-d input and weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    ConvDims d;
    d.B = x.size(0); d.C = x.size(1); d.H = x.size(2); d.W = x.size(3);
    d.O = w.size(0); d.kh = w.size(2); d.kw = w.size(3);
    if (w.size(1) != d.C)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()));
    if (d.kh > d.H + 2 * pad || d.kw > d.W + 2 * pad)
        throw ConfigError("conv2d kernel larger than padded input");
    int64_t hnum = d.H + 2 * pad - d.kh;
    int64_t wnum = d.W + 2 * pad - d.kw;
    if (hnum % stride != 0 || wnum % stride != 0)
        throw ConfigError("conv2d non-integer output size for input " + shape_str(x.shape()) +
                          " kernel " + shape_str(w.shape()) + " stride " + std::to_string(stride) +
                          " pad " + std::to_string(pad));
    d.Ho = hnum / stride + 1;
    d.Wo = wnum / stride + 1;
    d.ckk = d.C * d.kh * d.kw;
    d.hp = d.Ho * d.Wo;
    return d;
}

// Reusable scratch pools: convolutions are called from a single training
// thread, so per-thread buffers avoid repeated large allocations (the page
// faults dominate the gemm cost otherwise).
template <class S>
S* conv_scratch(int which, int64_t n) {
    static thread_local std::vector<S> bufs[3];
    if (bufs[which].size() < static_cast<size_t>(n)) bufs[which].resize(n);
    return bufs[which].data();
}

// colT layout: [ckk, B*hp] row-major; each row (c,i,j) is contiguous over
// the output pixels, so both the fill and the drain are linear passes.
// Every element is written (zero padding included).
template <class S>
void im2col_t(const S* x, const ConvDims& d, int stride, int pad, S* colt) {
    const int64_t rows = d.B * d.hp;
    const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && d.ckk > 1)
    for (int64_t rk = 0; rk < d.ckk; ++rk) {
        const int64_t c = rk / (d.kh * d.kw);
        const int64_t i = (rk / d.kw) % d.kh;
        const int64_t j = rk % d.kw;
        S* dst_row = colt + rk * rows;
        for (int64_t b = 0; b < d.B; ++b) {
            const S* xb = x + (b * d.C + c) * d.H * d.W;
            for (int64_t oy = 0; oy < d.Ho; ++oy) {
                S* dst = dst_row + b * d.hp + oy * d.Wo;
                const int64_t y = oy * stride + i - pad;
                if (y < 0 || y >= d.H) {
                    for (int64_t ox = 0; ox < d.Wo; ++ox) dst[ox] = S(0);
                    continue;
                }
                const S* src = xb + y * d.W;
                if (stride == 1) {
                    const int64_t off = j - pad;
                    const int64_t lo = std::max<int64_t>(0, -off);
                    const int64_t hi = std::min<int64_t>(d.Wo, d.W - off);
                    for (int64_t ox = 0; ox < lo; ++ox) dst[ox] = S(0);
                    for (int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox + off];
                    for (int64_t ox = hi; ox < d.Wo; ++ox) dst[ox] = S(0);
                } else {
                    for (int64_t ox = 0; ox < d.Wo; ++ox) {
                        const int64_t xc = ox * stride + j - pad;
                        dst[ox] = (xc >= 0 && xc < d.W) ? src[xc] : S(0);
                    }
                }
            }
        }
    }
}

template <class S>
void col2im_t_add(const S* dcolt, const ConvDims& d, int stride, int pad, S* dx) {
    const int64_t rows = d.B * d.hp;
    const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && d.B > 1)
    for (int64_t b = 0; b < d.B; ++b) {
        for (int64_t rk = 0; rk < d.ckk; ++rk) {
            const int64_t c = rk / (d.kh * d.kw);
            const int64_t i = (rk / d.kw) % d.kh;
            const int64_t j = rk % d.kw;
            const S* src_row = dcolt + rk * rows + b * d.hp;
            S* xb = dx + (b * d.C + c) * d.H * d.W;
            for (int64_t oy = 0; oy < d.Ho; ++oy) {
                const int64_t y = oy * stride + i - pad;
                if (y < 0 || y >= d.H) continue;
                const S* src = src_row + oy * d.Wo;
                S* dst = xb + y * d.W;
                if (stride == 1) {
                    const int64_t off = j - pad;
                    const int64_t lo = std::max<int64_t>(0, -off);
                    const int64_t hi = std::min<int64_t>(d.Wo, d.W - off);
                    for (int64_t ox = lo; ox < hi; ++ox) dst[ox + off] += src[ox];
                } else {
                    for (int64_t ox = 0; ox < d.Wo; ++ox) {
                        const int64_t xc = ox * stride + j - pad;
                        if (xc >= 0 && xc < d.W) dst[xc] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                  int stride, int pad) {
    ConvDims d = conv_dims(x, w, stride, pad);
    if (bias.defined() && bias.numel() != d.O)
        throw ShapeError("conv2d bias size mismatch");
    const int64_t rows = d.B * d.hp;
    // Yt [O, B*hp] = W [O, ckk] x colT [ckk, B*hp]; the im2col matrix lives
    // in scratch and is recomputed for the backward pass.
    S* colt = conv_scratch<S>(0, d.ckk * rows);
    im2col_t(x.data().data(), d, stride, pad, colt);
    S* yt = conv_scratch<S>(1, static_cast<int64_t>(d.O) * rows);
    {
        const S* pw = w.data().data();
        const int threads = num_threads();
#pragma omp parallel for schedule(static, 1) num_threads(threads)     if (threads > 1 && rows > kGemmColChunk)
        for (int64_t c0 = 0; c0 < rows; c0 += kGemmColChunk) {
            const int64_t nc = std::min(kGemmColChunk, rows - c0);
            ConstMatMap<S> W(pw, d.O, d.ckk);
            Eigen::Map<const EigenMat<S>, 0, Eigen::OuterStride<>> A(colt + c0, d.ckk, nc,
                                                                     Eigen::OuterStride<>(rows));
            Eigen::Map<EigenMat<S>, 0, Eigen::OuterStride<>> Y(yt + c0, d.O, nc,
                                                               Eigen::OuterStride<>(rows));
            Y.noalias() = W * A;
        }
    }
    std::vector<S> out(d.B * d.O * d.hp);
    {
        const S* pbias = bias.defined() ? bias.data().data() : nullptr;
        const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && d.B * d.O > 1)
        for (int64_t bo = 0; bo < d.B * d.O; ++bo) {
            const int64_t b = bo / d.O, o = bo % d.O;
            const S* src = yt + o * rows + b * d.hp;
            S* dst = out.data() + bo * d.hp;
            const S bv = pbias ? pbias[o] : S(0);
            for (int64_t p = 0; p < d.hp; ++p) dst[p] = src[p] + bv;
        }
    }
    Shape out_shape{d.B, d.O, d.Ho, d.Wo};
    return make_result<S>(
        std::move(out_shape), std::move(out), {x, w, bias},
        [x, w, bias, d, stride, pad, rows](TensorImpl<S>& self) {
            const S* g = self.grad.data();
            const int nth = num_threads();
            S* colt = conv_scratch<S>(0, d.ckk * rows);
            im2col_t(x.data().data(), d, stride, pad, colt);
            // gt [O, B*hp]: permuted incoming grad
            S* gt = conv_scratch<S>(1, static_cast<int64_t>(d.O) * rows);
#pragma omp parallel for schedule(static) num_threads(nth) if (nth > 1 && d.B * d.O > 1)
            for (int64_t bo = 0; bo < d.B * d.O; ++bo) {
                const int64_t b = bo / d.O, o = bo % d.O;
                const S* src = g + bo * d.hp;
                S* dst = gt + o * rows + b * d.hp;
                for (int64_t p = 0; p < d.hp; ++p) dst[p] = src[p];
            }
            if (bias.defined() && bias.impl()->requires_grad) {
                S* gb = bias.grad().data();
#pragma omp parallel for schedule(static) num_threads(nth) if (nth > 1 && d.O > 1)
                for (int64_t o = 0; o < d.O; ++o) {
                    S acc = S(0);
                    const S* row = gt + o * rows;
                    for (int64_t p = 0; p < rows; ++p) acc += row[p];
                    gb[o] += acc;
                }
            }
            if (w.impl()->requires_grad) {
                // dW [O, ckk] += gt x colT^T; the reduction runs over the
                // fixed pixel order for every output element
                S* gw = w.grad().data();
                constexpr int64_t kOChunk = 16;
#pragma omp parallel for schedule(static, 1) num_threads(nth)     if (nth > 1 && d.O > kOChunk)
                for (int64_t o0 = 0; o0 < d.O; o0 += kOChunk) {
                    const int64_t no = std::min(kOChunk, d.O - o0);
                    ConstMatMap<S> G(gt + o0 * rows, no, rows);
                    ConstMatMap<S> A(colt, d.ckk, rows);
                    MatMap<S> GW(gw + o0 * d.ckk, no, d.ckk);
                    GW.noalias() += G * A.transpose();
                }
            }
            if (x.impl()->requires_grad) {
                // dcolT [ckk, B*hp] = W^T x gt
                S* dcolt = conv_scratch<S>(2, d.ckk * rows);
                const S* pw2 = w.data().data();
#pragma omp parallel for schedule(static, 1) num_threads(nth)     if (nth > 1 && rows > kGemmColChunk)
                for (int64_t c0 = 0; c0 < rows; c0 += kGemmColChunk) {
                    const int64_t nc = std::min(kGemmColChunk, rows - c0);
                    ConstMatMap<S> W(pw2, d.O, d.ckk);
                    Eigen::Map<const EigenMat<S>, 0, Eigen::OuterStride<>> G(
                        gt + c0, d.O, nc, Eigen::OuterStride<>(rows));
                    Eigen::Map<EigenMat<S>, 0, Eigen::OuterStride<>> D(
                        dcolt + c0, d.ckk, nc, Eigen::OuterStride<>(rows));
                    D.noalias() = W.transpose() * G;
                }
                col2im_t_add(dcolt, d, stride, pad, x.grad().data());
            }
        });
}

// ---------------------------------------------------------------- reductions

namespace {

std::vector<int> normalize_axes(const std::vector<int>& axes, int nd) {
    std::vector<int> out;
    for (int a : axes) {
        int v = a < 0 ? a + nd : a;
        if (v < 0 || v >= nd)
            throw ShapeError("invalid reduction axis " + std::to_string(a) + " for rank " +
                             std::to_string(nd));
        out.push_back(v);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

Shape reduced_shape(const Shape& s, const std::vector<int>& axes, bool keepdim) {
    Shape out;
    size_t j = 0;
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
        bool hit = j < axes.size() && axes[j] == i;
        if (hit) {
            ++j;
            if (keepdim) out.push_back(1);
        } else {
            out.push_back(s[i]);
        }
    }
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace

template <class S>
TensorT<S> sum(const TensorT<S>& x, const std::vector<int>& axes_in, bool keepdim) {
    auto axes = normalize_axes(axes_in, x.ndim());
    Shape out_shape = reduced_shape(x.shape(), axes, keepdim);
    // Keepdim shape of the output, used for the index mapping.
    Shape keep = x.shape();
    for (int a : axes) keep[a] = 1;
    auto sx = broadcast_strides(keep, x.shape());
    std::vector<S> out(shape_numel(out_shape), S(0));
    const S* px = x.data().data();
    {
        auto sfull = broadcast_strides(x.shape(), x.shape());
        broadcast_iter(x.shape(), sfull, sx,
                       [&](int64_t, int64_t ix, int64_t io) { out[io] += px[ix]; });
    }
    auto xshape = x.shape();
    return make_result<S>(std::move(out_shape), std::move(out), {x},
                          [x, sx, xshape](TensorImpl<S>& self) {
                              if (!x.impl()->requires_grad) return;
                              S* gx = x.grad().data();
                              const S* g = self.grad.data();
                              auto sfull = broadcast_strides(xshape, xshape);
                              broadcast_iter(xshape, sfull, sx, [&](int64_t, int64_t ix, int64_t io) {
                                  gx[ix] += g[io];
                              });
                          });
}

template <class S> TensorT<S> sum(const TensorT<S>& x) {
    std::vector<int> axes(x.ndim());
    for (int i = 0; i < x.ndim(); ++i) axes[i] = i;
    return sum(x, axes, false);
}

template <class S>
TensorT<S> mean(const TensorT<S>& x, const std::vector<int>& axes_in, bool keepdim) {
    auto axes = normalize_axes(axes_in, x.ndim());
    int64_t count = 1;
    for (int a : axes) count *= x.shape()[a];
    return mul(sum(x, axes_in, keepdim), S(1) / static_cast<S>(count));
}

template <class S> TensorT<S> mean(const TensorT<S>& x) {
    return mul(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <class S>
TensorT<S> max(const TensorT<S>& x, int axis, bool keepdim) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("invalid max axis");
    const Shape& s = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= s[i];
    const int64_t len = s[axis];
    Shape out_shape = reduced_shape(s, {axis}, keepdim);
    std::vector<S> out(outer * inner);
    auto argmax = std::make_shared<std::vector<int64_t>>(outer * inner);
    const S* px = x.data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            int64_t best = 0;
            S bv = px[o * len * inner + i];
            for (int64_t l = 1; l < len; ++l) {
                S v = px[(o * len + l) * inner + i];
                if (v > bv) bv = v, best = l;
            }
            out[o * inner + i] = bv;
            (*argmax)[o * inner + i] = best;
        }
    return make_result<S>(std::move(out_shape), std::move(out), {x},
                          [x, argmax, outer, inner, len](TensorImpl<S>& self) {
                              if (!x.impl()->requires_grad) return;
                              S* gx = x.grad().data();
                              const S* g = self.grad.data();
                              for (int64_t o = 0; o < outer; ++o)
                                  for (int64_t i = 0; i < inner; ++i) {
                                      int64_t l = (*argmax)[o * inner + i];
                                      gx[(o * len + l) * inner + i] += g[o * inner + i];
                                  }
                          });
}

namespace {

// Iterates lanes along `axis`: fn(base_offset, stride, len).
template <class F>
void for_each_lane(const Shape& s, int axis, F&& fn) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
    const int64_t len = s[axis];
    const int threads = num_threads();
#pragma omp parallel for schedule(static) collapse(2) num_threads(threads) if (threads > 1 && outer * inner > 8)
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) fn(o * len * inner + i, inner, len);
}

}  // namespace

template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("invalid softmax axis");
    std::vector<S> out(x.numel());
    const S* px = x.data().data();
    for_each_lane(x.shape(), axis, [&](int64_t base, int64_t stride, int64_t len) {
        S m = px[base];
        for (int64_t l = 1; l < len; ++l) m = std::max(m, px[base + l * stride]);
        S z = S(0);
        for (int64_t l = 0; l < len; ++l) {
            S e = std::exp(px[base + l * stride] - m);
            out[base + l * stride] = e;
            z += e;
        }
        S inv = S(1) / z;
        for (int64_t l = 0; l < len; ++l) out[base + l * stride] *= inv;
    });
    auto xshape = x.shape();
    return make_result<S>(x.shape(), std::move(out), {x}, [x, axis, xshape](TensorImpl<S>& self) {
        if (!x.impl()->requires_grad) return;
        S* gx = x.grad().data();
        const S* g = self.grad.data();
        const S* y = self.data.data();
        for_each_lane(xshape, axis, [&](int64_t base, int64_t stride, int64_t len) {
            S dot = S(0);
            for (int64_t l = 0; l < len; ++l) dot += g[base + l * stride] * y[base + l * stride];
            for (int64_t l = 0; l < len; ++l)
                gx[base + l * stride] += y[base + l * stride] * (g[base + l * stride] - dot);
        });
    });
}

template <class S>
TensorT<S> logsumexp(const TensorT<S>& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("invalid logsumexp axis");
    const Shape& s = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= s[i];
    const int64_t len = s[axis];
    Shape out_shape = reduced_shape(s, {axis}, false);
    std::vector<S> out(outer * inner);
    const S* px = x.data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            S m = px[o * len * inner + i];
            for (int64_t l = 1; l < len; ++l) m = std::max(m, px[(o * len + l) * inner + i]);
            S z = S(0);
            for (int64_t l = 0; l < len; ++l) z += std::exp(px[(o * len + l) * inner + i] - m);
            out[o * inner + i] = m + std::log(z);
        }
    return make_result<S>(std::move(out_shape), std::move(out), {x},
                          [x, outer, inner, len](TensorImpl<S>& self) {
                              if (!x.impl()->requires_grad) return;
                              S* gx = x.grad().data();
                              const S* g = self.grad.data();
                              const S* y = self.data.data();
                              const S* px2 = x.data().data();
                              for (int64_t o = 0; o < outer; ++o)
                                  for (int64_t i = 0; i < inner; ++i) {
                                      S lse = y[o * inner + i];
                                      S go = g[o * inner + i];
                                      for (int64_t l = 0; l < len; ++l) {
                                          int64_t ix = (o * len + l) * inner + i;
                                          gx[ix] += go * std::exp(px2[ix] - lse);
                                      }
                                  }
                          });
}

// ---------------------------------------------------------------- shape ops

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
    int64_t infer = -1;
    int64_t prod = 1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: multiple -1 dims");
            infer = static_cast<int64_t>(i);
        } else {
            prod *= shape[i];
        }
    }
    if (infer >= 0) shape[infer] = x.numel() / prod;
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<S> out(x.data().begin(), x.data().end());
    return make_result<S>(std::move(shape), std::move(out), {x}, [x](TensorImpl<S>& self) {
        if (!x.impl()->requires_grad) return;
        S* gx = x.grad().data();
        const S* g = self.grad.data();
        for (int64_t i = 0; i < self.numel(); ++i) gx[i] += g[i];
    });
}

template <class S>
TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& dims) {
    const int nd = x.ndim();
    if (static_cast<int>(dims.size()) != nd) throw ShapeError("permute rank mismatch");
    Shape out_shape(nd);
    for (int i = 0; i < nd; ++i) out_shape[i] = x.shape()[dims[i]];
    std::vector<int64_t> xstr(nd, 1);
    for (int i = nd - 2; i >= 0; --i) xstr[i] = xstr[i + 1] * x.shape()[i + 1];
    std::vector<int64_t> src_stride(nd);
    for (int i = 0; i < nd; ++i) src_stride[i] = xstr[dims[i]];
    std::vector<S> out(x.numel());
    const S* px = x.data().data();
    std::vector<int64_t> idx(nd, 0);
    int64_t src = 0;
    for (int64_t o = 0; o < x.numel(); ++o) {
        out[o] = px[src];
        for (int d = nd - 1; d >= 0; --d) {
            src += src_stride[d];
            if (++idx[d] < out_shape[d]) break;
            src -= src_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    return make_result<S>(std::move(out_shape), std::move(out), {x},
                          [x, src_stride](TensorImpl<S>& self) {
                              if (!x.impl()->requires_grad) return;
                              S* gx = x.grad().data();
                              const S* g = self.grad.data();
                              const int nd2 = static_cast<int>(self.shape.size());
                              std::vector<int64_t> idx2(nd2, 0);
                              int64_t src2 = 0;
                              for (int64_t o = 0; o < self.numel(); ++o) {
                                  gx[src2] += g[o];
                                  for (int d = nd2 - 1; d >= 0; --d) {
                                      src2 += src_stride[d];
                                      if (++idx2[d] < self.shape[d]) break;
                                      src2 -= src_stride[d] * self.shape[d];
                                      idx2[d] = 0;
                                  }
                              }
                          });
}

template <class S>
TensorT<S> slice(const TensorT<S>& x, int axis, int64_t start, int64_t stop) {
    if (axis < 0) axis += x.ndim();
    const Shape& s = x.shape();
    if (axis < 0 || axis >= x.ndim() || start < 0 || stop > s[axis] || start >= stop)
        throw ShapeError("slice out of range on " + shape_str(s));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= s[i];
    const int64_t len = s[axis], nlen = stop - start;
    Shape out_shape = s;
    out_shape[axis] = nlen;
    std::vector<S> out(outer * nlen * inner);
    const S* px = x.data().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * nlen * inner, px + (o * len + start) * inner,
                    sizeof(S) * nlen * inner);
    return make_result<S>(std::move(out_shape), std::move(out), {x},
                          [x, outer, inner, len, nlen, start](TensorImpl<S>& self) {
                              if (!x.impl()->requires_grad) return;
                              S* gx = x.grad().data();
                              const S* g = self.grad.data();
                              for (int64_t o = 0; o < outer; ++o) {
                                  const S* src = g + o * nlen * inner;
                                  S* dst = gx + (o * len + start) * inner;
                                  for (int64_t i = 0; i < nlen * inner; ++i) dst[i] += src[i];
                              }
                          });
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat of zero tensors");
    int nd = xs[0].ndim();
    if (axis < 0) axis += nd;
    Shape out_shape = xs[0].shape();
    int64_t total = 0;
    for (const auto& t : xs) {
        if (t.ndim() != nd) throw ShapeError("concat rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && t.shape()[i] != out_shape[i])
                throw ShapeError("concat shape mismatch: " + shape_str(out_shape) + " vs " +
                                 shape_str(t.shape()));
        total += t.shape()[axis];
    }
    out_shape[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];
    std::vector<S> out(shape_numel(out_shape));
    int64_t off = 0;
    std::vector<int64_t> offsets;
    for (const auto& t : xs) {
        offsets.push_back(off);
        const int64_t tl = t.shape()[axis];
        const S* pt = t.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, pt + o * tl * inner,
                        sizeof(S) * tl * inner);
        off += tl;
    }
    return make_result<S>(std::move(out_shape), std::move(out), xs,
                          [xs, offsets, outer, inner, total, axis](TensorImpl<S>& self) {
                              const S* g = self.grad.data();
                              for (size_t k = 0; k < xs.size(); ++k) {
                                  if (!xs[k].impl()->requires_grad) continue;
                                  S* gx = xs[k].grad().data();
                                  const int64_t tl = xs[k].shape()[axis];
                                  for (int64_t o = 0; o < outer; ++o) {
                                      const S* src = g + (o * total + offsets[k]) * inner;
                                      S* dst = gx + o * tl * inner;
                                      for (int64_t i = 0; i < tl * inner; ++i) dst[i] += src[i];
                                  }
                              }
                          });
}

template <class S>
TensorT<S> upsample2x(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("upsample2x expects [B,C,H,W]");
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    Shape out_shape{B, C, 2 * H, 2 * W};
    std::vector<S> out(shape_numel(out_shape));
    const S* px = x.data().data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const S* src = px + bc * H * W;
        S* dst = out.data() + bc * 4 * H * W;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                S v = src[y * W + xx];
                dst[(2 * y) * 2 * W + 2 * xx] = v;
                dst[(2 * y) * 2 * W + 2 * xx + 1] = v;
                dst[(2 * y + 1) * 2 * W + 2 * xx] = v;
                dst[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
            }
    }
    return make_result<S>(std::move(out_shape), std::move(out), {x},
                          [x, B, C, H, W](TensorImpl<S>& self) {
                              if (!x.impl()->requires_grad) return;
                              S* gx = x.grad().data();
                              const S* g = self.grad.data();
                              for (int64_t bc = 0; bc < B * C; ++bc) {
                                  const S* src = g + bc * 4 * H * W;
                                  S* dst = gx + bc * H * W;
                                  for (int64_t y = 0; y < H; ++y)
                                      for (int64_t xx = 0; xx < W; ++xx)
                                          dst[y * W + xx] += src[(2 * y) * 2 * W + 2 * xx] +
                                                             src[(2 * y) * 2 * W + 2 * xx + 1] +
                                                             src[(2 * y + 1) * 2 * W + 2 * xx] +
                                                             src[(2 * y + 1) * 2 * W + 2 * xx + 1];
                              }
                          });
}

// ---------------------------------------------------------------- normalization

namespace {

// Shared lane-normalization: x viewed as [rows, len] contiguous lanes.
template <class S>
TensorT<S> lane_norm(const TensorT<S>& x, int64_t rows, int64_t len, S eps) {
    std::vector<S> out(x.numel());
    auto stats = std::make_shared<std::vector<S>>(rows * 2);  // (mean, inv_std) per row
    const S* px = x.data().data();
    const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && rows > 1)
    for (int64_t r = 0; r < rows; ++r) {
        const S* src = px + r * len;
        S m = S(0);
        for (int64_t i = 0; i < len; ++i) m += src[i];
        m /= static_cast<S>(len);
        S v = S(0);
        for (int64_t i = 0; i < len; ++i) {
            S d = src[i] - m;
            v += d * d;
        }
        v /= static_cast<S>(len);
        S inv = S(1) / std::sqrt(v + eps);
        (*stats)[r * 2] = m;
        (*stats)[r * 2 + 1] = inv;
        S* dst = out.data() + r * len;
        for (int64_t i = 0; i < len; ++i) dst[i] = (src[i] - m) * inv;
    }
    return make_result<S>(x.shape(), std::move(out), {x},
                          [x, rows, len, stats](TensorImpl<S>& self) {
                              if (!x.impl()->requires_grad) return;
                              S* gx = x.grad().data();
                              const S* g = self.grad.data();
                              const S* y = self.data.data();
                              const int nth = num_threads();
#pragma omp parallel for schedule(static) num_threads(nth) if (nth > 1 && rows > 1)
                              for (int64_t r = 0; r < rows; ++r) {
                                  const S inv = (*stats)[r * 2 + 1];
                                  const S* gr = g + r * len;
                                  const S* yr = y + r * len;
                                  S* gxr = gx + r * len;
                                  S gm = S(0), gy = S(0);
                                  for (int64_t i = 0; i < len; ++i) {
                                      gm += gr[i];
                                      gy += gr[i] * yr[i];
                                  }
                                  gm /= static_cast<S>(len);
                                  gy /= static_cast<S>(len);
                                  for (int64_t i = 0; i < len; ++i)
                                      gxr[i] += inv * (gr[i] - gm - yr[i] * gy);
                              }
                          });
}

}  // namespace

template <class S>
TensorT<S> group_norm(const TensorT<S>& x, int groups, S eps) {
    if (x.ndim() != 4) throw ShapeError("group_norm expects [B,C,H,W]");
    const int64_t B = x.size(0), C = x.size(1);
    if (groups <= 0 || C % groups != 0)
        throw ConfigError("group_norm: channels " + std::to_string(C) +
                          " not divisible by groups " + std::to_string(groups));
    const int64_t len = (C / groups) * x.size(2) * x.size(3);
    return lane_norm(x, B * groups, len, eps);
}

template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, S eps) {
    const int64_t len = x.size(-1);
    return lane_norm(x, x.numel() / len, len, eps);
}

template <class S>
TensorT<S> channel_affine(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta) {
    if (x.ndim() < 2) throw ShapeError("channel_affine expects rank >= 2");
    const int64_t B = x.size(0), C = x.size(1);
    const int64_t sp = x.numel() / (B * C);
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("channel_affine parameter size mismatch");
    std::vector<S> out(x.numel());
    const S* px = x.data().data();
    const S* pg = gamma.data().data();
    const S* pb = beta.data().data();
    const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && B * C > 1)
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const S gk = pg[bc % C], bk = pb[bc % C];
        const S* src = px + bc * sp;
        S* dst = out.data() + bc * sp;
        for (int64_t i = 0; i < sp; ++i) dst[i] = src[i] * gk + bk;
    }
    return make_result<S>(
        x.shape(), std::move(out), {x, gamma, beta}, [x, gamma, beta, B, C, sp](TensorImpl<S>& self) {
            const S* g = self.grad.data();
            const S* px2 = x.data().data();
            const S* pg2 = gamma.data().data();
            const int nth = num_threads();
            if (x.impl()->requires_grad) {
                S* gx = x.grad().data();
#pragma omp parallel for schedule(static) num_threads(nth) if (nth > 1 && B * C > 1)
                for (int64_t bc = 0; bc < B * C; ++bc) {
                    const S gk = pg2[bc % C];
                    const S* gr = g + bc * sp;
                    S* dst = gx + bc * sp;
                    for (int64_t i = 0; i < sp; ++i) dst[i] += gr[i] * gk;
                }
            }
            if (gamma.impl()->requires_grad || beta.impl()->requires_grad) {
                S* gg = gamma.impl()->requires_grad ? gamma.grad().data() : nullptr;
                S* gb = beta.impl()->requires_grad ? beta.grad().data() : nullptr;
#pragma omp parallel for schedule(static) num_threads(nth) if (nth > 1 && C > 1)
                for (int64_t c = 0; c < C; ++c) {
                    S sg = S(0), sb = S(0);
                    for (int64_t b = 0; b < B; ++b) {
                        const S* gr = g + (b * C + c) * sp;
                        const S* xr = px2 + (b * C + c) * sp;
                        for (int64_t i = 0; i < sp; ++i) {
                            sg += gr[i] * xr[i];
                            sb += gr[i];
                        }
                    }
                    if (gg) gg[c] += sg;
                    if (gb) gb[c] += sb;
                }
            }
        });
}

template <class S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<int32_t>& ids, Shape ids_shape) {
    if (table.ndim() != 2) throw ShapeError("embedding table must be 2-d");
    if (shape_numel(ids_shape) != static_cast<int64_t>(ids.size()))
        throw ShapeError("embedding ids shape mismatch");
    const int64_t V = table.size(0), D = table.size(1);
    for (int32_t id : ids)
        if (id < 0 || id >= V)
            throw ContractError("embedding id " + std::to_string(id) + " out of range [0," +
                                std::to_string(V) + ")");
    Shape out_shape = ids_shape;
    out_shape.push_back(D);
    std::vector<S> out(ids.size() * D);
    const S* pt = table.data().data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + i * D, pt + ids[i] * D, sizeof(S) * D);
    return make_result<S>(std::move(out_shape), std::move(out), {table},
                          [table, ids, D](TensorImpl<S>& self) {
                              if (!table.impl()->requires_grad) return;
                              S* gt = table.grad().data();
                              const S* g = self.grad.data();
                              for (size_t i = 0; i < ids.size(); ++i) {
                                  S* dst = gt + ids[i] * D;
                                  const S* src = g + i * D;
                                  for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
                              }
                          });
}

template <class S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
    TensorT<S> d = sub(a, b);
    return mean(mul(d, d));
}

// ---------------------------------------------------------------- params

template <class S>
TensorT<S>& ParamStoreT<S>::add(const std::string& name, TensorT<S> t) {
    for (auto& [n, _] : items)
        if (n == name) throw ContractError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    items.emplace_back(name, std::move(t));
    return items.back().second;
}

template <class S>
TensorT<S>* ParamStoreT<S>::find(const std::string& name) {
    for (auto& [n, t] : items)
        if (n == name) return &t;
    return nullptr;
}

template <class S>
void ParamStoreT<S>::zero_grad() {
    for (auto& [_, t] : items) t.zero_grad();
}

template <class S>
int64_t ParamStoreT<S>::numel() const {
    int64_t n = 0;
    for (const auto& [_, t] : items) n += t.numel();
    return n;
}

template <class S>
void AdamWT<S>::step(ParamStoreT<S>& params) {
    if (slots.empty()) {
        slots.resize(params.items.size());
        for (size_t i = 0; i < params.items.size(); ++i) {
            slots[i].m.assign(params.items[i].second.numel(), S(0));
            slots[i].v.assign(params.items[i].second.numel(), S(0));
        }
    }
    if (slots.size() != params.items.size())
        throw ContractError("optimizer state does not match parameter list");
    ++t;
    const S bc1 = S(1) - std::pow(beta1, static_cast<S>(t));
    const S bc2 = S(1) - std::pow(beta2, static_cast<S>(t));
    for (size_t i = 0; i < params.items.size(); ++i) {
        auto& [name, p] = params.items[i];
        if (!p.has_grad()) continue;
        std::span<S> w = p.data();
        std::span<S> g = p.grad();
        auto& slot = slots[i];
        for (int64_t j = 0; j < p.numel(); ++j) {
            if (std::isnan(g[j]) || std::isinf(g[j]))
                throw NumericError("non-finite gradient in parameter '" + name + "'");
            // Decoupled weight decay before the Adam update.
            w[j] -= lr * weight_decay * w[j];
            slot.m[j] = beta1 * slot.m[j] + (S(1) - beta1) * g[j];
            slot.v[j] = beta2 * slot.v[j] + (S(1) - beta2) * g[j] * g[j];
            S mhat = slot.m[j] / bc1;
            S vhat = slot.v[j] / bc2;
            w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            if (std::isnan(w[j]) || std::isinf(w[j]))
                throw NumericError("non-finite value in parameter '" + name + "' after update");
        }
    }
}

// ---------------------------------------------------------------- instantiation

#define DAWN_INSTANTIATE(S)                                                                       \
    template class TensorT<S>;                                                                    \
    template struct ParamStoreT<S>;                                                               \
    template struct AdamWT<S>;                                                                    \
    template void backward<S>(const TensorT<S>&);                                                 \
    template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);                             \
    template TensorT<S> sub<S>(const TensorT<S>&, const TensorT<S>&);                             \
    template TensorT<S> mul<S>(const TensorT<S>&, const TensorT<S>&);                             \
    template TensorT<S> div<S>(const TensorT<S>&, const TensorT<S>&);                             \
    template TensorT<S> add<S>(const TensorT<S>&, S);                                             \
    template TensorT<S> mul<S>(const TensorT<S>&, S);                                             \
    template TensorT<S> neg<S>(const TensorT<S>&);                                                \
    template TensorT<S> exp<S>(const TensorT<S>&);                                                \
    template TensorT<S> log<S>(const TensorT<S>&);                                                \
    template TensorT<S> sqrt<S>(const TensorT<S>&);                                               \
    template TensorT<S> pow<S>(const TensorT<S>&, S);                                             \
    template TensorT<S> silu<S>(const TensorT<S>&);                                               \
    template TensorT<S> gelu<S>(const TensorT<S>&);                                               \
    template TensorT<S> tanh<S>(const TensorT<S>&);                                               \
    template TensorT<S> sigmoid<S>(const TensorT<S>&);                                            \
    template TensorT<S> matmul<S>(const TensorT<S>&, const TensorT<S>&);                          \
    template TensorT<S> conv2d<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, int,   \
                                  int);                                                           \
    template TensorT<S> sum<S>(const TensorT<S>&, const std::vector<int>&, bool);                 \
    template TensorT<S> sum<S>(const TensorT<S>&);                                                \
    template TensorT<S> mean<S>(const TensorT<S>&, const std::vector<int>&, bool);                \
    template TensorT<S> mean<S>(const TensorT<S>&);                                               \
    template TensorT<S> max<S>(const TensorT<S>&, int, bool);                                     \
    template TensorT<S> softmax<S>(const TensorT<S>&, int);                                       \
    template TensorT<S> logsumexp<S>(const TensorT<S>&, int);                                     \
    template TensorT<S> reshape<S>(const TensorT<S>&, Shape);                                     \
    template TensorT<S> permute<S>(const TensorT<S>&, const std::vector<int>&);                   \
    template TensorT<S> slice<S>(const TensorT<S>&, int, int64_t, int64_t);                       \
    template TensorT<S> concat<S>(const std::vector<TensorT<S>>&, int);                           \
    template TensorT<S> upsample2x<S>(const TensorT<S>&);                                         \
    template TensorT<S> group_norm<S>(const TensorT<S>&, int, S);                                 \
    template TensorT<S> layer_norm<S>(const TensorT<S>&, S);                                      \
    template TensorT<S> channel_affine<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&); \
    template TensorT<S> embedding<S>(const TensorT<S>&, const std::vector<int32_t>&, Shape);      \
    template TensorT<S> mse<S>(const TensorT<S>&, const TensorT<S>&);

DAWN_INSTANTIATE(float)
DAWN_INSTANTIATE(double)

template TensorT<double> TensorT<float>::cast<double>() const;
template TensorT<float> TensorT<double>::cast<float>() const;
template TensorT<float> TensorT<float>::cast<float>() const;
template TensorT<double> TensorT<double>::cast<double>() const;

}  // namespace dawn
