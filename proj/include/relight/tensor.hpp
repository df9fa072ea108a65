#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace relight {

/// Engine-wide scalar precision. F32 is the training/inference mode,
/// F64 exists for gradient checking, where central differences need the
/// extra mantissa bits.
enum class Dtype { F32, F64 };

Dtype default_dtype();
void set_default_dtype(Dtype dt);

/// Number of worker threads ops may use internally. Work is partitioned by
/// index so results are bitwise identical for any thread count. Default 1.
int num_threads();
void set_num_threads(int n);

/// N x C x H x W, row-major, all dims >= 1.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

/// Type-erased flat buffer. Exactly one of the two vectors is populated,
/// selected by `dtype`.
class Storage {
public:
    Storage(Dtype dt, std::int64_t n);

    Dtype dtype;
    std::vector<float> f32;
    std::vector<double> f64;

    std::int64_t size() const {
        return dtype == Dtype::F32 ? static_cast<std::int64_t>(f32.size())
                                   : static_cast<std::int64_t>(f64.size());
    }
    double get(std::int64_t i) const {
        return dtype == Dtype::F32 ? static_cast<double>(f32[static_cast<std::size_t>(i)])
                                   : f64[static_cast<std::size_t>(i)];
    }
    void set(std::int64_t i, double v) {
        if (dtype == Dtype::F32)
            f32[static_cast<std::size_t>(i)] = static_cast<float>(v);
        else
            f64[static_cast<std::size_t>(i)] = v;
    }

    template <typename T> T* ptr();
    template <typename T> const T* ptr() const;
};

template <> inline float* Storage::ptr<float>() { return f32.data(); }
template <> inline double* Storage::ptr<double>() { return f64.data(); }
template <> inline const float* Storage::ptr<float>() const { return f32.data(); }
template <> inline const double* Storage::ptr<double>() const { return f64.data(); }

class Graph;

/// Dense 4-D tensor handle. Copies share the underlying buffer; values are
/// immutable after creation except through `mutable_data`, which exists for
/// the optimizer's in-place parameter update.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor full(const Shape& s, double value, bool requires_grad = false);
    static Tensor from_values(const Shape& s, std::span<const double> values,
                              bool requires_grad = false);
    /// Uniform draw on [lo, hi). The seed fully determines the result:
    /// identical seeds give bitwise-identical tensors on every platform.
    static Tensor uniform(const Shape& s, double lo, double hi, std::uint64_t seed,
                          bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t numel() const { return shape().numel(); }
    Dtype dtype() const;
    bool requires_grad() const;
    void set_requires_grad(bool rg);

    /// Scalar extraction; requires shape (1,1,1,1).
    double item() const;
    double at(std::int64_t i) const;
    std::vector<double> values() const;

    template <typename T> std::span<const T> data() const;
    /// Raw write access for optimizer updates. Throws if the tensor is part
    /// of an active graph.
    template <typename T> std::span<T> mutable_data();

    /// Accumulated gradient of a requires_grad leaf. Zeros if no backward
    /// pass has touched it.
    Tensor grad() const;
    void zero_grad();

    /// Deep copy, detached from any graph.
    Tensor clone() const;
    /// Same storage, no graph linkage.
    Tensor detached() const;

    struct Impl;
    const std::shared_ptr<Impl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<Impl> impl_;
};

struct Tensor::Impl {
    Shape shape;
    std::shared_ptr<Storage> storage;
    bool requires_grad = false;
    std::shared_ptr<Storage> grad; // lazily allocated, zero-filled

    // Linkage into the graph that recorded this tensor, if any.
    std::uint64_t graph_serial = 0;
    int node = -1;
};

/// Reverse-mode tape. Construction makes it the active graph for the current
/// thread (one at a time); ops record themselves while it is active and any
/// input is tracked. `backward` replays the tape in exact reverse insertion
/// order and accumulates gradients into requires_grad leaves.
class Graph {
public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* current();

    void backward(const Tensor& scalar_loss);

    std::uint64_t serial() const { return serial_; }
    std::size_t node_count() const { return nodes_.size(); }

    // -- recording interface, used by op implementations --
    using BackwardFn = std::function<void(Graph&, const Storage& grad_out)>;
    int record(const Shape& out_shape, BackwardFn fn);
    /// Node id for `t` in this graph: an existing node, a freshly registered
    /// leaf if t requires grad, or -1 if untracked.
    int node_for(const Tensor& t);
    /// Gradient buffer of a node, allocated zero-filled on first use.
    Storage& grad_of(int node);

private:
    struct Node {
        Shape shape;
        Dtype dtype;
        std::shared_ptr<Storage> grad;
        BackwardFn backward;                     // empty for leaves
        std::shared_ptr<Tensor::Impl> leaf;      // set for leaves
    };
    std::vector<Node> nodes_;
    std::uint64_t serial_;
};

bool is_tracked(const Tensor& t);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double alpha);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---- structural ----

/// Cross-correlation with zero padding. x: [N,Cin,H,W], w: [Cout,Cin,k,k]
/// (k odd), bias: [1,Cout,1,1]. Output H' = floor((H + 2*pad - k)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

/// One fixed 2-D kernel [1,1,kh,kw] applied to every channel independently,
/// stride 1, zero padding. The kernel is a constant: gradients flow to x only.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel, int pad);

/// 2x2 mean pooling; H and W must be even.
Tensor downsample_avg2x(const Tensor& x);

/// Bilinear x2 upsampling, half-pixel-center convention: output pixel i
/// samples source coordinate (i+0.5)/2 - 0.5, clamped to borders.
Tensor upsample_bilinear2x(const Tensor& x);

// ---- reductions (scalar output, shape (1,1,1,1)) ----
Tensor reduce_mean(const Tensor& x);
Tensor reduce_sum(const Tensor& x);

/// Clamp to [0,1]. A data operation for inference/export: refuses to run on
/// a tensor that is tracked in an active graph.
Tensor clamp01(const Tensor& x);

// ---- test oracle ----

/// Central-difference check of reverse-mode gradients: returns the maximum
/// elementwise relative error, with denominator max(|a|,|b|,1e-8). Requires
/// the engine to be in F64 mode and f to be deterministic.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);

} // namespace relight
