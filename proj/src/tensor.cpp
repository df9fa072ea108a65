#include "relight/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

namespace relight {

namespace {

Dtype g_default_dtype = Dtype::F32;
int g_num_threads = 1;
thread_local Graph* tl_current_graph = nullptr;
std::atomic<std::uint64_t> g_graph_serial{1};

void check_shape(const Shape& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
        throw std::invalid_argument("tensor shape dims must all be >= 1, got " + to_string(s));
}

std::shared_ptr<Tensor::Impl> make_impl(const Shape& s, std::shared_ptr<Storage> st, bool rg) {
    auto impl = std::make_shared<Tensor::Impl>();
    impl->shape = s;
    impl->storage = std::move(st);
    impl->requires_grad = rg;
    return impl;
}

Tensor wrap(const Shape& s, std::shared_ptr<Storage> st) {
    return Tensor(make_impl(s, std::move(st), false));
}

/// Partition [0, n) into fixed chunks and run them on up to num_threads()
/// workers. Chunk boundaries depend only on n, never on scheduling, so any
/// output written by disjoint chunks is bitwise reproducible.
template <typename Fn>
void parallel_for(std::int64_t n, const Fn& fn) {
    const int threads = std::min<std::int64_t>(num_threads(), n);
    if (threads <= 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        const std::int64_t lo = n * t / threads;
        const std::int64_t hi = n * (t + 1) / threads;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

void add_into(Storage& dst, const Storage& src) {
    if (dst.dtype == Dtype::F32) {
        float* d = dst.ptr<float>();
        const float* s = src.ptr<float>();
        for (std::int64_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
    } else {
        double* d = dst.ptr<double>();
        const double* s = src.ptr<double>();
        for (std::int64_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape() == b.shape()))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                    " vs " + to_string(b.shape()));
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw std::invalid_argument(std::string(op) + ": mixed dtypes");
}

} // namespace

std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << "(" << s.n << "," << s.c << "," << s.h << "," << s.w << ")";
    return os.str();
}

Dtype default_dtype() { return g_default_dtype; }
void set_default_dtype(Dtype dt) { g_default_dtype = dt; }

int num_threads() { return g_num_threads; }
void set_num_threads(int n) {
    if (n < 1) throw std::invalid_argument("num_threads must be >= 1");
    g_num_threads = n;
}

Storage::Storage(Dtype dt, std::int64_t n) : dtype(dt) {
    if (dt == Dtype::F32)
        f32.assign(static_cast<std::size_t>(n), 0.0f);
    else
        f64.assign(static_cast<std::size_t>(n), 0.0);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    check_shape(s);
    return Tensor(make_impl(s, std::make_shared<Storage>(default_dtype(), s.numel()), requires_grad));
}

Tensor Tensor::full(const Shape& s, double value, bool requires_grad) {
    Tensor t = zeros(s, requires_grad);
    auto& st = *t.impl_->storage;
    for (std::int64_t i = 0, n = s.numel(); i < n; ++i) st.set(i, value);
    return t;
}

Tensor Tensor::from_values(const Shape& s, std::span<const double> values, bool requires_grad) {
    check_shape(s);
    if (static_cast<std::int64_t>(values.size()) != s.numel())
        throw std::invalid_argument("from_values: got " + std::to_string(values.size()) +
                                    " values for shape " + to_string(s));
    Tensor t = zeros(s, requires_grad);
    auto& st = *t.impl_->storage;
    for (std::int64_t i = 0, n = s.numel(); i < n; ++i) st.set(i, values[static_cast<std::size_t>(i)]);
    return t;
}

Tensor Tensor::uniform(const Shape& s, double lo, double hi, std::uint64_t seed, bool requires_grad) {
    Tensor t = zeros(s, requires_grad);
    std::mt19937_64 rng(seed);
    auto& st = *t.impl_->storage;
    // Explicit 53-bit mapping instead of std::uniform_real_distribution,
    // whose output is implementation-defined.
    constexpr double kInv = 1.0 / 9007199254740992.0; // 2^-53
    for (std::int64_t i = 0, n = s.numel(); i < n; ++i) {
        const double u = static_cast<double>(rng() >> 11) * kInv;
        st.set(i, lo + (hi - lo) * u);
    }
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) throw std::logic_error("shape() on undefined tensor");
    return impl_->shape;
}

Dtype Tensor::dtype() const {
    if (!impl_) throw std::logic_error("dtype() on undefined tensor");
    return impl_->storage->dtype;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    if (!impl_) throw std::logic_error("set_requires_grad() on undefined tensor");
    impl_->requires_grad = rg;
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar, shape " + to_string(shape()));
    return impl_->storage->get(0);
}

double Tensor::at(std::int64_t i) const {
    if (i < 0 || i >= numel()) throw std::out_of_range("Tensor::at index out of range");
    return impl_->storage->get(i);
}

std::vector<double> Tensor::values() const {
    std::vector<double> out(static_cast<std::size_t>(numel()));
    for (std::int64_t i = 0, n = numel(); i < n; ++i) out[static_cast<std::size_t>(i)] = impl_->storage->get(i);
    return out;
}

template <typename T> std::span<const T> Tensor::data() const {
    return {impl_->storage->ptr<T>(), static_cast<std::size_t>(numel())};
}
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

template <typename T> std::span<T> Tensor::mutable_data() {
    if (Graph::current() && is_tracked(*this))
        throw std::logic_error("mutable_data(): in-place update of a tensor tracked by an active graph");
    return {impl_->storage->ptr<T>(), static_cast<std::size_t>(numel())};
}
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

Tensor Tensor::grad() const {
    if (!impl_) throw std::logic_error("grad() on undefined tensor");
    if (!impl_->requires_grad) throw std::logic_error("grad() on a tensor without requires_grad");
    if (!impl_->grad) return Tensor::zeros(impl_->shape);
    auto gi = make_impl(impl_->shape, impl_->grad, false);
    return Tensor(std::move(gi));
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.reset();
}

Tensor Tensor::clone() const {
    if (!impl_) return {};
    auto st = std::make_shared<Storage>(*impl_->storage);
    return Tensor(make_impl(impl_->shape, std::move(st), impl_->requires_grad));
}

Tensor Tensor::detached() const {
    if (!impl_) return {};
    return Tensor(make_impl(impl_->shape, impl_->storage, false));
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

Graph::Graph() : serial_(g_graph_serial.fetch_add(1)) {
    if (tl_current_graph)
        throw std::logic_error("a Graph is already active on this thread");
    tl_current_graph = this;
}

Graph::~Graph() { tl_current_graph = nullptr; }

Graph* Graph::current() { return tl_current_graph; }

int Graph::record(const Shape& out_shape, BackwardFn fn) {
    Node nd;
    nd.shape = out_shape;
    nd.dtype = default_dtype();
    nd.backward = std::move(fn);
    nodes_.push_back(std::move(nd));
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::node_for(const Tensor& t) {
    if (!t.defined()) return -1;
    auto& impl = *t.impl();
    if (impl.node >= 0 && impl.graph_serial == serial_) return impl.node;
    if (!impl.requires_grad) return -1;
    // Register as a leaf.
    Node nd;
    nd.shape = impl.shape;
    nd.dtype = impl.storage->dtype;
    nd.leaf = t.impl();
    nodes_.push_back(std::move(nd));
    const int id = static_cast<int>(nodes_.size()) - 1;
    impl.node = id;
    impl.graph_serial = serial_;
    return id;
}

Storage& Graph::grad_of(int node) {
    Node& nd = nodes_[static_cast<std::size_t>(node)];
    if (!nd.grad) nd.grad = std::make_shared<Storage>(nd.dtype, nd.shape.numel());
    return *nd.grad;
}

void Graph::backward(const Tensor& scalar_loss) {
    if (!scalar_loss.defined() || scalar_loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar tensor of shape (1,1,1,1)");
    const auto& impl = *scalar_loss.impl();
    if (impl.node < 0 || impl.graph_serial != serial_)
        throw std::invalid_argument("backward: tensor is not attached to this graph");

    grad_of(impl.node).set(0, 1.0);
    for (int i = impl.node; i >= 0; --i) {
        Node& nd = nodes_[static_cast<std::size_t>(i)];
        if (!nd.grad) continue;
        if (nd.leaf) {
            if (!nd.leaf->grad)
                nd.leaf->grad = std::make_shared<Storage>(nd.dtype, nd.shape.numel());
            add_into(*nd.leaf->grad, *nd.grad);
        }
        if (nd.backward) nd.backward(*this, *nd.grad);
        nd.grad.reset();
    }
}

bool is_tracked(const Tensor& t) {
    if (!t.defined()) return false;
    if (t.requires_grad()) return true;
    Graph* g = Graph::current();
    return g && t.impl()->node >= 0 && t.impl()->graph_serial == g->serial();
}

namespace {

/// Finish an op: attach the result to the active graph when any input is
/// tracked. `inputs` supplies the tensors whose nodes the rule needs; the
/// rule receives their node ids (-1 for untracked) in the same order.
Tensor finish(const Shape& shape, std::shared_ptr<Storage> out,
              std::initializer_list<Tensor> inputs,
              const std::function<Graph::BackwardFn(const std::vector<int>&)>& make_rule) {
    Tensor result = wrap(shape, std::move(out));
    Graph* g = Graph::current();
    if (!g) return result;
    bool any = false;
    for (const Tensor& t : inputs)
        if (is_tracked(t)) { any = true; break; }
    if (!any) return result;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor& t : inputs) ids.push_back(g->node_for(t));
    const int node = g->record(shape, make_rule(ids));
    result.impl()->node = node;
    result.impl()->graph_serial = g->serial();
    return result;
}

// ---------------- elementwise kernels ----------------

enum class EwKind { Add, Sub, Mul, Div };

template <typename T>
void ewise_kernel(EwKind k, const T* a, const T* b, T* o, std::int64_t n) {
    switch (k) {
    case EwKind::Add: for (std::int64_t i = 0; i < n; ++i) o[i] = a[i] + b[i]; break;
    case EwKind::Sub: for (std::int64_t i = 0; i < n; ++i) o[i] = a[i] - b[i]; break;
    case EwKind::Mul: for (std::int64_t i = 0; i < n; ++i) o[i] = a[i] * b[i]; break;
    case EwKind::Div: for (std::int64_t i = 0; i < n; ++i) o[i] = a[i] / b[i]; break;
    }
}

template <typename T>
void axpy(T* dst, const T* src, T alpha, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] += alpha * src[i];
}

template <typename T>
void accum_prod(T* dst, const T* a, const T* b, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

Tensor ewise(EwKind kind, const char* name, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, name);
    require_same_dtype(a, b, name);
    const Shape shape = a.shape();
    const std::int64_t n = shape.numel();
    auto out = std::make_shared<Storage>(a.dtype(), n);
    if (a.dtype() == Dtype::F32)
        ewise_kernel<float>(kind, a.data<float>().data(), b.data<float>().data(), out->ptr<float>(), n);
    else
        ewise_kernel<double>(kind, a.data<double>().data(), b.data<double>().data(), out->ptr<double>(), n);

    auto sa = a.impl()->storage;
    auto sb = b.impl()->storage;
    return finish(shape, out, {a, b}, [=](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int na = ids[0], nb = ids[1];
        switch (kind) {
        case EwKind::Add:
            return [na, nb, n](Graph& g, const Storage& gout) {
                if (na >= 0) add_into(g.grad_of(na), gout);
                if (nb >= 0) add_into(g.grad_of(nb), gout);
            };
        case EwKind::Sub:
            return [na, nb, n](Graph& g, const Storage& gout) {
                if (na >= 0) add_into(g.grad_of(na), gout);
                if (nb >= 0) {
                    Storage& gb = g.grad_of(nb);
                    if (gb.dtype == Dtype::F32)
                        axpy<float>(gb.ptr<float>(), gout.ptr<float>(), -1.0f, n);
                    else
                        axpy<double>(gb.ptr<double>(), gout.ptr<double>(), -1.0, n);
                }
            };
        case EwKind::Mul:
            return [na, nb, n, sa, sb](Graph& g, const Storage& gout) {
                if (na >= 0) {
                    Storage& ga = g.grad_of(na);
                    if (ga.dtype == Dtype::F32)
                        accum_prod<float>(ga.ptr<float>(), gout.ptr<float>(), sb->ptr<float>(), n);
                    else
                        accum_prod<double>(ga.ptr<double>(), gout.ptr<double>(), sb->ptr<double>(), n);
                }
                if (nb >= 0) {
                    Storage& gb = g.grad_of(nb);
                    if (gb.dtype == Dtype::F32)
                        accum_prod<float>(gb.ptr<float>(), gout.ptr<float>(), sa->ptr<float>(), n);
                    else
                        accum_prod<double>(gb.ptr<double>(), gout.ptr<double>(), sa->ptr<double>(), n);
                }
            };
        case EwKind::Div:
            return [na, nb, n, sa, sb](Graph& g, const Storage& gout) {
                if (na >= 0) {
                    Storage& ga = g.grad_of(na);
                    if (ga.dtype == Dtype::F32) {
                        float* d = ga.ptr<float>();
                        const float* go = gout.ptr<float>();
                        const float* pb = sb->ptr<float>();
                        for (std::int64_t i = 0; i < n; ++i) d[i] += go[i] / pb[i];
                    } else {
                        double* d = ga.ptr<double>();
                        const double* go = gout.ptr<double>();
                        const double* pb = sb->ptr<double>();
                        for (std::int64_t i = 0; i < n; ++i) d[i] += go[i] / pb[i];
                    }
                }
                if (nb >= 0) {
                    Storage& gb = g.grad_of(nb);
                    if (gb.dtype == Dtype::F32) {
                        float* d = gb.ptr<float>();
                        const float* go = gout.ptr<float>();
                        const float* pa = sa->ptr<float>();
                        const float* pb = sb->ptr<float>();
                        for (std::int64_t i = 0; i < n; ++i) d[i] -= go[i] * pa[i] / (pb[i] * pb[i]);
                    } else {
                        double* d = gb.ptr<double>();
                        const double* go = gout.ptr<double>();
                        const double* pa = sa->ptr<double>();
                        const double* pb = sb->ptr<double>();
                        for (std::int64_t i = 0; i < n; ++i) d[i] -= go[i] * pa[i] / (pb[i] * pb[i]);
                    }
                }
            };
        }
        throw std::logic_error("unreachable");
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return ewise(EwKind::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return ewise(EwKind::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return ewise(EwKind::Mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return ewise(EwKind::Div, "div", a, b); }

Tensor scale(const Tensor& a, double alpha) {
    if (!a.defined()) throw std::invalid_argument("scale: undefined tensor");
    const Shape shape = a.shape();
    const std::int64_t n = shape.numel();
    auto out = std::make_shared<Storage>(a.dtype(), n);
    if (a.dtype() == Dtype::F32) {
        const float al = static_cast<float>(alpha);
        const float* p = a.data<float>().data();
        float* o = out->ptr<float>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = al * p[i];
    } else {
        const double* p = a.data<double>().data();
        double* o = out->ptr<double>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = alpha * p[i];
    }
    return finish(shape, out, {a}, [alpha, n](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int na = ids[0];
        return [na, alpha, n](Graph& g, const Storage& gout) {
            if (na < 0) return;
            Storage& ga = g.grad_of(na);
            if (ga.dtype == Dtype::F32)
                axpy<float>(ga.ptr<float>(), gout.ptr<float>(), static_cast<float>(alpha), n);
            else
                axpy<double>(ga.ptr<double>(), gout.ptr<double>(), alpha, n);
        };
    });
}

Tensor abs(const Tensor& a) {
    if (!a.defined()) throw std::invalid_argument("abs: undefined tensor");
    const Shape shape = a.shape();
    const std::int64_t n = shape.numel();
    auto out = std::make_shared<Storage>(a.dtype(), n);
    if (a.dtype() == Dtype::F32) {
        const float* p = a.data<float>().data();
        float* o = out->ptr<float>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = std::fabs(p[i]);
    } else {
        const double* p = a.data<double>().data();
        double* o = out->ptr<double>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = std::fabs(p[i]);
    }
    auto sa = a.impl()->storage;
    return finish(shape, out, {a}, [n, sa](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int na = ids[0];
        // subgradient at 0 is 0
        return [na, n, sa](Graph& g, const Storage& gout) {
            if (na < 0) return;
            Storage& ga = g.grad_of(na);
            if (ga.dtype == Dtype::F32) {
                float* d = ga.ptr<float>();
                const float* go = gout.ptr<float>();
                const float* px = sa->ptr<float>();
                for (std::int64_t i = 0; i < n; ++i)
                    d[i] += px[i] > 0 ? go[i] : (px[i] < 0 ? -go[i] : 0.0f);
            } else {
                double* d = ga.ptr<double>();
                const double* go = gout.ptr<double>();
                const double* px = sa->ptr<double>();
                for (std::int64_t i = 0; i < n; ++i)
                    d[i] += px[i] > 0 ? go[i] : (px[i] < 0 ? -go[i] : 0.0);
            }
        };
    });
}

Tensor relu(const Tensor& a) {
    if (!a.defined()) throw std::invalid_argument("relu: undefined tensor");
    const Shape shape = a.shape();
    const std::int64_t n = shape.numel();
    auto out = std::make_shared<Storage>(a.dtype(), n);
    if (a.dtype() == Dtype::F32) {
        const float* p = a.data<float>().data();
        float* o = out->ptr<float>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = p[i] > 0 ? p[i] : 0.0f;
    } else {
        const double* p = a.data<double>().data();
        double* o = out->ptr<double>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = p[i] > 0 ? p[i] : 0.0;
    }
    auto sa = a.impl()->storage;
    return finish(shape, out, {a}, [n, sa](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int na = ids[0];
        // gradient at exactly 0 is 0
        return [na, n, sa](Graph& g, const Storage& gout) {
            if (na < 0) return;
            Storage& ga = g.grad_of(na);
            if (ga.dtype == Dtype::F32) {
                float* d = ga.ptr<float>();
                const float* go = gout.ptr<float>();
                const float* px = sa->ptr<float>();
                for (std::int64_t i = 0; i < n; ++i)
                    if (px[i] > 0) d[i] += go[i];
            } else {
                double* d = ga.ptr<double>();
                const double* go = gout.ptr<double>();
                const double* px = sa->ptr<double>();
                for (std::int64_t i = 0; i < n; ++i)
                    if (px[i] > 0) d[i] += go[i];
            }
        };
    });
}

// ---------------------------------------------------------------------------
// conv2d via im2col
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
    const std::int64_t plane = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int u = 0; u < k; ++u) {
            for (int v = 0; v < k; ++v) {
                T* dst = col + ((static_cast<std::int64_t>(c) * k + u) * k + v) * plane;
                for (int i = 0; i < Ho; ++i) {
                    const int y = i * stride + u - pad;
                    if (y < 0 || y >= H) {
                        std::memset(dst + static_cast<std::int64_t>(i) * Wo, 0,
                                    sizeof(T) * static_cast<std::size_t>(Wo));
                        continue;
                    }
                    const T* src = x + (static_cast<std::int64_t>(c) * H + y) * W;
                    T* d = dst + static_cast<std::int64_t>(i) * Wo;
                    for (int j = 0; j < Wo; ++j) {
                        const int xx = j * stride + v - pad;
                        d[j] = (xx >= 0 && xx < W) ? src[xx] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* x) {
    const std::int64_t plane = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int u = 0; u < k; ++u) {
            for (int v = 0; v < k; ++v) {
                const T* src = col + ((static_cast<std::int64_t>(c) * k + u) * k + v) * plane;
                for (int i = 0; i < Ho; ++i) {
                    const int y = i * stride + u - pad;
                    if (y < 0 || y >= H) continue;
                    T* dst = x + (static_cast<std::int64_t>(c) * H + y) * W;
                    const T* s = src + static_cast<std::int64_t>(i) * Wo;
                    for (int j = 0; j < Wo; ++j) {
                        const int xx = j * stride + v - pad;
                        if (xx >= 0 && xx < W) dst[xx] += s[j];
                    }
                }
            }
        }
    }
}

// out[co, pix] = sum_q wm[co, q] * col[q, pix] + bias[co]
template <typename T>
void gemm_forward(const T* wm, const T* col, const T* bias, int Cout, std::int64_t CKK,
                  std::int64_t P, T* out) {
    parallel_for(Cout, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t co = lo; co < hi; ++co) {
            T* op = out + co * P;
            const T b = bias[co];
            for (std::int64_t p = 0; p < P; ++p) op[p] = b;
            const T* wr = wm + co * CKK;
            for (std::int64_t q = 0; q < CKK; ++q) {
                const T a = wr[q];
                if (a == T(0)) continue;
                const T* cp = col + q * P;
                for (std::int64_t p = 0; p < P; ++p) op[p] += a * cp[p];
            }
        }
    });
}

template <typename T>
void conv2d_forward_kernel(const T* x, const T* w, const T* b, int N, int Cin, int H, int W,
                           int Cout, int k, int stride, int pad, int Ho, int Wo, T* out) {
    const std::int64_t CKK = static_cast<std::int64_t>(Cin) * k * k;
    const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
    std::vector<T> col(static_cast<std::size_t>(CKK * P));
    for (int n = 0; n < N; ++n) {
        im2col(x + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo,
               col.data());
        gemm_forward(w, col.data(), b, Cout, CKK, P, out + static_cast<std::int64_t>(n) * Cout * P);
    }
}

template <typename T>
void conv2d_backward_kernel(const T* x, const T* w, const T* gout, int N, int Cin, int H, int W,
                            int Cout, int k, int stride, int pad, int Ho, int Wo, T* gx, T* gw,
                            T* gb) {
    const std::int64_t CKK = static_cast<std::int64_t>(Cin) * k * k;
    const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
    std::vector<T> col(static_cast<std::size_t>(CKK * P));
    std::vector<T> gcol(gx ? static_cast<std::size_t>(CKK * P) : 0);
    for (int n = 0; n < N; ++n) {
        const T* go = gout + static_cast<std::int64_t>(n) * Cout * P;
        if (gw || gx)
            im2col(x + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, k, stride, pad, Ho,
                   Wo, col.data());
        if (gb) {
            for (int co = 0; co < Cout; ++co) {
                T acc = 0;
                const T* gp = go + static_cast<std::int64_t>(co) * P;
                for (std::int64_t p = 0; p < P; ++p) acc += gp[p];
                gb[co] += acc;
            }
        }
        if (gw) {
            parallel_for(Cout, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t co = lo; co < hi; ++co) {
                    const T* gp = go + co * P;
                    T* gwr = gw + co * CKK;
                    for (std::int64_t q = 0; q < CKK; ++q) {
                        const T* cp = col.data() + q * P;
                        T acc = 0;
                        for (std::int64_t p = 0; p < P; ++p) acc += gp[p] * cp[p];
                        gwr[q] += acc;
                    }
                }
            });
        }
        if (gx) {
            std::fill(gcol.begin(), gcol.end(), T(0));
            parallel_for(CKK, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t q = lo; q < hi; ++q) {
                    T* gc = gcol.data() + q * P;
                    for (int co = 0; co < Cout; ++co) {
                        const T a = w[static_cast<std::int64_t>(co) * CKK + q];
                        if (a == T(0)) continue;
                        const T* gp = go + static_cast<std::int64_t>(co) * P;
                        for (std::int64_t p = 0; p < P; ++p) gc[p] += a * gp[p];
                    }
                }
            });
            col2im(gcol.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                   gx + static_cast<std::int64_t>(n) * Cin * H * W);
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (!x.defined() || !w.defined() || !bias.defined())
        throw std::invalid_argument("conv2d: undefined tensor argument");
    require_same_dtype(x, w, "conv2d");
    require_same_dtype(x, bias, "conv2d");
    const Shape xs = x.shape(), ws = w.shape(), bs = bias.shape();
    const int k = ws.h;
    if (ws.w != k) throw std::invalid_argument("conv2d: kernel must be square");
    if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
    if (ws.c != xs.c)
        throw std::invalid_argument("conv2d: input has " + std::to_string(xs.c) +
                                    " channels but kernel expects " + std::to_string(ws.c));
    if (!(bs == Shape{1, ws.n, 1, 1}))
        throw std::invalid_argument("conv2d: bias must have shape (1,Cout,1,1)");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    if (xs.h + 2 * pad < k || xs.w + 2 * pad < k)
        throw std::invalid_argument("conv2d: kernel larger than padded input");

    const int Ho = (xs.h + 2 * pad - k) / stride + 1;
    const int Wo = (xs.w + 2 * pad - k) / stride + 1;
    const Shape os{xs.n, ws.n, Ho, Wo};
    auto out = std::make_shared<Storage>(x.dtype(), os.numel());
    if (x.dtype() == Dtype::F32)
        conv2d_forward_kernel<float>(x.data<float>().data(), w.data<float>().data(),
                                     bias.data<float>().data(), xs.n, xs.c, xs.h, xs.w, ws.n, k,
                                     stride, pad, Ho, Wo, out->ptr<float>());
    else
        conv2d_forward_kernel<double>(x.data<double>().data(), w.data<double>().data(),
                                      bias.data<double>().data(), xs.n, xs.c, xs.h, xs.w, ws.n, k,
                                      stride, pad, Ho, Wo, out->ptr<double>());

    auto sx = x.impl()->storage;
    auto sw = w.impl()->storage;
    return finish(os, out, {x, w, bias},
                  [=](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int nx = ids[0], nw = ids[1], nb = ids[2];
        return [=](Graph& g, const Storage& gout) {
            Storage* gx = nx >= 0 ? &g.grad_of(nx) : nullptr;
            Storage* gw = nw >= 0 ? &g.grad_of(nw) : nullptr;
            Storage* gb = nb >= 0 ? &g.grad_of(nb) : nullptr;
            if (!gx && !gw && !gb) return;
            if (gout.dtype == Dtype::F32)
                conv2d_backward_kernel<float>(sx->ptr<float>(), sw->ptr<float>(),
                                              gout.ptr<float>(), xs.n, xs.c, xs.h, xs.w, ws.n, k,
                                              stride, pad, Ho, Wo, gx ? gx->ptr<float>() : nullptr,
                                              gw ? gw->ptr<float>() : nullptr,
                                              gb ? gb->ptr<float>() : nullptr);
            else
                conv2d_backward_kernel<double>(sx->ptr<double>(), sw->ptr<double>(),
                                               gout.ptr<double>(), xs.n, xs.c, xs.h, xs.w, ws.n, k,
                                               stride, pad, Ho, Wo,
                                               gx ? gx->ptr<double>() : nullptr,
                                               gw ? gw->ptr<double>() : nullptr,
                                               gb ? gb->ptr<double>() : nullptr);
        };
    });
}

// ---------------------------------------------------------------------------
// depthwise conv with a fixed kernel
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void dw_forward_kernel(const T* x, const T* ker, int N, int C, int H, int W, int kh, int kw,
                       int pad, int Ho, int Wo, T* out) {
    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
    parallel_for(planes, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t pl = lo; pl < hi; ++pl) {
            const T* xp = x + pl * H * W;
            T* op = out + pl * Ho * Wo;
            for (int i = 0; i < Ho; ++i) {
                for (int j = 0; j < Wo; ++j) {
                    T acc = 0;
                    for (int u = 0; u < kh; ++u) {
                        const int y = i + u - pad;
                        if (y < 0 || y >= H) continue;
                        for (int v = 0; v < kw; ++v) {
                            const int xx = j + v - pad;
                            if (xx < 0 || xx >= W) continue;
                            acc += ker[u * kw + v] * xp[y * W + xx];
                        }
                    }
                    op[i * Wo + j] = acc;
                }
            }
        }
    });
}

template <typename T>
void dw_backward_kernel(const T* ker, const T* gout, int N, int C, int H, int W, int kh, int kw,
                        int pad, int Ho, int Wo, T* gx) {
    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
    parallel_for(planes, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t pl = lo; pl < hi; ++pl) {
            const T* gp = gout + pl * Ho * Wo;
            T* gxp = gx + pl * H * W;
            for (int i = 0; i < Ho; ++i) {
                for (int j = 0; j < Wo; ++j) {
                    const T go = gp[i * Wo + j];
                    if (go == T(0)) continue;
                    for (int u = 0; u < kh; ++u) {
                        const int y = i + u - pad;
                        if (y < 0 || y >= H) continue;
                        for (int v = 0; v < kw; ++v) {
                            const int xx = j + v - pad;
                            if (xx < 0 || xx >= W) continue;
                            gxp[y * W + xx] += ker[u * kw + v] * go;
                        }
                    }
                }
            }
        }
    });
}

} // namespace

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel, int pad) {
    if (!x.defined() || !kernel.defined())
        throw std::invalid_argument("depthwise_conv2d: undefined tensor argument");
    require_same_dtype(x, kernel, "depthwise_conv2d");
    if (kernel.requires_grad() || is_tracked(kernel))
        throw std::invalid_argument("depthwise_conv2d: kernel must be a constant");
    const Shape xs = x.shape(), ks = kernel.shape();
    if (ks.n != 1 || ks.c != 1)
        throw std::invalid_argument("depthwise_conv2d: kernel must have shape (1,1,kh,kw)");
    if (pad < 0) throw std::invalid_argument("depthwise_conv2d: bad pad");
    const int kh = ks.h, kw = ks.w;
    if (xs.h + 2 * pad < kh || xs.w + 2 * pad < kw)
        throw std::invalid_argument("depthwise_conv2d: kernel larger than padded input");
    const int Ho = xs.h + 2 * pad - kh + 1;
    const int Wo = xs.w + 2 * pad - kw + 1;
    const Shape os{xs.n, xs.c, Ho, Wo};
    auto out = std::make_shared<Storage>(x.dtype(), os.numel());
    if (x.dtype() == Dtype::F32)
        dw_forward_kernel<float>(x.data<float>().data(), kernel.data<float>().data(), xs.n, xs.c,
                                 xs.h, xs.w, kh, kw, pad, Ho, Wo, out->ptr<float>());
    else
        dw_forward_kernel<double>(x.data<double>().data(), kernel.data<double>().data(), xs.n,
                                  xs.c, xs.h, xs.w, kh, kw, pad, Ho, Wo, out->ptr<double>());

    auto sk = kernel.impl()->storage;
    return finish(os, out, {x}, [=](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int nx = ids[0];
        return [=](Graph& g, const Storage& gout) {
            if (nx < 0) return;
            Storage& gx = g.grad_of(nx);
            if (gout.dtype == Dtype::F32)
                dw_backward_kernel<float>(sk->ptr<float>(), gout.ptr<float>(), xs.n, xs.c, xs.h,
                                          xs.w, kh, kw, pad, Ho, Wo, gx.ptr<float>());
            else
                dw_backward_kernel<double>(sk->ptr<double>(), gout.ptr<double>(), xs.n, xs.c, xs.h,
                                           xs.w, kh, kw, pad, Ho, Wo, gx.ptr<double>());
        };
    });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void down2_forward(const T* x, std::int64_t planes, int H, int W, T* out) {
    const int Ho = H / 2, Wo = W / 2;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* xp = x + pl * H * W;
        T* op = out + pl * Ho * Wo;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                const T* r0 = xp + (2 * i) * W + 2 * j;
                const T* r1 = r0 + W;
                op[i * Wo + j] = (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
            }
    }
}

template <typename T>
void down2_backward(const T* gout, std::int64_t planes, int H, int W, T* gx) {
    const int Ho = H / 2, Wo = W / 2;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* gp = gout + pl * Ho * Wo;
        T* gxp = gx + pl * H * W;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                const T q = gp[i * Wo + j] * T(0.25);
                T* r0 = gxp + (2 * i) * W + 2 * j;
                T* r1 = r0 + W;
                r0[0] += q; r0[1] += q; r1[0] += q; r1[1] += q;
            }
    }
}

struct LerpTap {
    int i0, i1;
    double w0, w1;
};

// half-pixel-center source coordinate (i+0.5)/2 - 0.5, clamped to [0, n-1]
std::vector<LerpTap> make_taps(int out_n, int in_n) {
    std::vector<LerpTap> taps(static_cast<std::size_t>(out_n));
    for (int i = 0; i < out_n; ++i) {
        double src = (i + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        if (src > in_n - 1) src = in_n - 1;
        const int i0 = static_cast<int>(src);
        const int i1 = std::min(i0 + 1, in_n - 1);
        const double t = src - i0;
        taps[static_cast<std::size_t>(i)] = {i0, i1, 1.0 - t, t};
    }
    return taps;
}

template <typename T>
void up2_forward(const T* x, std::int64_t planes, int H, int W, const std::vector<LerpTap>& ty,
                 const std::vector<LerpTap>& tx, T* out) {
    const int Ho = H * 2, Wo = W * 2;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* xp = x + pl * H * W;
        T* op = out + pl * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
            const LerpTap& a = ty[static_cast<std::size_t>(i)];
            for (int j = 0; j < Wo; ++j) {
                const LerpTap& b = tx[static_cast<std::size_t>(j)];
                const double v = a.w0 * (b.w0 * xp[a.i0 * W + b.i0] + b.w1 * xp[a.i0 * W + b.i1]) +
                                 a.w1 * (b.w0 * xp[a.i1 * W + b.i0] + b.w1 * xp[a.i1 * W + b.i1]);
                op[i * Wo + j] = static_cast<T>(v);
            }
        }
    }
}

template <typename T>
void up2_backward(const T* gout, std::int64_t planes, int H, int W, const std::vector<LerpTap>& ty,
                  const std::vector<LerpTap>& tx, T* gx) {
    const int Ho = H * 2, Wo = W * 2;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* gp = gout + pl * Ho * Wo;
        T* gxp = gx + pl * H * W;
        for (int i = 0; i < Ho; ++i) {
            const LerpTap& a = ty[static_cast<std::size_t>(i)];
            for (int j = 0; j < Wo; ++j) {
                const LerpTap& b = tx[static_cast<std::size_t>(j)];
                const T go = gp[i * Wo + j];
                gxp[a.i0 * W + b.i0] += static_cast<T>(a.w0 * b.w0) * go;
                gxp[a.i0 * W + b.i1] += static_cast<T>(a.w0 * b.w1) * go;
                gxp[a.i1 * W + b.i0] += static_cast<T>(a.w1 * b.w0) * go;
                gxp[a.i1 * W + b.i1] += static_cast<T>(a.w1 * b.w1) * go;
            }
        }
    }
}

} // namespace

Tensor downsample_avg2x(const Tensor& x) {
    if (!x.defined()) throw std::invalid_argument("downsample_avg2x: undefined tensor");
    const Shape xs = x.shape();
    if (xs.h % 2 != 0 || xs.w % 2 != 0)
        throw std::invalid_argument("downsample_avg2x: H and W must be even, got " + to_string(xs));
    const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
    const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
    auto out = std::make_shared<Storage>(x.dtype(), os.numel());
    if (x.dtype() == Dtype::F32)
        down2_forward<float>(x.data<float>().data(), planes, xs.h, xs.w, out->ptr<float>());
    else
        down2_forward<double>(x.data<double>().data(), planes, xs.h, xs.w, out->ptr<double>());

    return finish(os, out, {x}, [=](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int nx = ids[0];
        return [=](Graph& g, const Storage& gout) {
            if (nx < 0) return;
            Storage& gx = g.grad_of(nx);
            if (gout.dtype == Dtype::F32)
                down2_backward<float>(gout.ptr<float>(), planes, xs.h, xs.w, gx.ptr<float>());
            else
                down2_backward<double>(gout.ptr<double>(), planes, xs.h, xs.w, gx.ptr<double>());
        };
    });
}

Tensor upsample_bilinear2x(const Tensor& x) {
    if (!x.defined()) throw std::invalid_argument("upsample_bilinear2x: undefined tensor");
    const Shape xs = x.shape();
    const Shape os{xs.n, xs.c, xs.h * 2, xs.w * 2};
    const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
    const auto ty = make_taps(os.h, xs.h);
    const auto tx = make_taps(os.w, xs.w);
    auto out = std::make_shared<Storage>(x.dtype(), os.numel());
    if (x.dtype() == Dtype::F32)
        up2_forward<float>(x.data<float>().data(), planes, xs.h, xs.w, ty, tx, out->ptr<float>());
    else
        up2_forward<double>(x.data<double>().data(), planes, xs.h, xs.w, ty, tx, out->ptr<double>());

    return finish(os, out, {x}, [=](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int nx = ids[0];
        return [=](Graph& g, const Storage& gout) {
            if (nx < 0) return;
            Storage& gx = g.grad_of(nx);
            if (gout.dtype == Dtype::F32)
                up2_backward<float>(gout.ptr<float>(), planes, xs.h, xs.w, ty, tx, gx.ptr<float>());
            else
                up2_backward<double>(gout.ptr<double>(), planes, xs.h, xs.w, ty, tx,
                                     gx.ptr<double>());
        };
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace {

Tensor reduce_impl(const Tensor& x, bool mean) {
    if (!x.defined()) throw std::invalid_argument("reduce: undefined tensor");
    const std::int64_t n = x.numel();
    const Shape os{1, 1, 1, 1};
    auto out = std::make_shared<Storage>(x.dtype(), 1);
    double acc = 0.0;
    if (x.dtype() == Dtype::F32) {
        const float* p = x.data<float>().data();
        for (std::int64_t i = 0; i < n; ++i) acc += p[i];
    } else {
        const double* p = x.data<double>().data();
        for (std::int64_t i = 0; i < n; ++i) acc += p[i];
    }
    out->set(0, mean ? acc / static_cast<double>(n) : acc);

    return finish(os, out, {x}, [n, mean](const std::vector<int>& ids) -> Graph::BackwardFn {
        const int nx = ids[0];
        return [nx, n, mean](Graph& g, const Storage& gout) {
            if (nx < 0) return;
            Storage& gx = g.grad_of(nx);
            const double go = gout.get(0);
            const double v = mean ? go / static_cast<double>(n) : go;
            if (gx.dtype == Dtype::F32) {
                float* d = gx.ptr<float>();
                const float vf = static_cast<float>(v);
                for (std::int64_t i = 0; i < n; ++i) d[i] += vf;
            } else {
                double* d = gx.ptr<double>();
                for (std::int64_t i = 0; i < n; ++i) d[i] += v;
            }
        };
    });
}

} // namespace

Tensor reduce_mean(const Tensor& x) { return reduce_impl(x, true); }
Tensor reduce_sum(const Tensor& x) { return reduce_impl(x, false); }

Tensor clamp01(const Tensor& x) {
    if (!x.defined()) throw std::invalid_argument("clamp01: undefined tensor");
    if (Graph::current() && is_tracked(x))
        throw std::logic_error("clamp01 is a data operation; it cannot be applied to a tensor "
                               "tracked by an active graph");
    const std::int64_t n = x.numel();
    auto out = std::make_shared<Storage>(x.dtype(), n);
    for (std::int64_t i = 0; i < n; ++i) {
        double v = x.at(i);
        out->set(i, v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v));
    }
    return wrap(x.shape(), out);
}

// ---------------------------------------------------------------------------
// gradient check oracle
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    if (default_dtype() != Dtype::F64)
        throw std::logic_error("grad_check requires the engine to be in F64 mode");
    if (!x.defined()) throw std::invalid_argument("grad_check: undefined tensor");

    Tensor leaf = x.clone();
    leaf.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Graph g;
        Tensor y = f(leaf);
        if (y.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
        g.backward(y);
        analytic = leaf.grad().values();
    }

    const std::vector<double> base = x.values();
    double max_rel = 0.0;
    std::vector<double> probe = base;
    for (std::size_t i = 0; i < base.size(); ++i) {
        probe[i] = base[i] + h;
        const double fp = f(Tensor::from_values(x.shape(), probe)).item();
        probe[i] = base[i] - h;
        const double fm = f(Tensor::from_values(x.shape(), probe)).item();
        probe[i] = base[i];
        const double fd = (fp - fm) / (2.0 * h);
        const double ad = analytic[i];
        const double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-8});
        max_rel = std::max(max_rel, std::fabs(fd - ad) / denom);
    }
    return max_rel;
}

} // namespace relight
