#include "relight/losses.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace relight {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!(a.shape() == b.shape()))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + to_string(a.shape()) +
                                    " vs " + to_string(b.shape()));
}

Tensor gaussian_window(int window, double sigma) {
    std::vector<double> vals(static_cast<std::size_t>(window) * window);
    const double c = (window - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < window; ++i)
        for (int j = 0; j < window; ++j) {
            const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
            const double v = std::exp(-d2 / (2.0 * sigma * sigma));
            vals[static_cast<std::size_t>(i) * window + j] = v;
            sum += v;
        }
    for (double& v : vals) v /= sum;
    return Tensor::from_values({1, 1, window, window}, vals);
}

} // namespace

Tensor l1_loss(const Tensor& pred, const Tensor& tgt) {
    require_same_shape(pred, tgt, "l1_loss");
    return reduce_mean(abs(pred - tgt));
}

Tensor l2_loss(const Tensor& pred, const Tensor& tgt) {
    require_same_shape(pred, tgt, "l2_loss");
    Tensor d = pred - tgt;
    return reduce_mean(mul(d, d));
}

Tensor ssim_value(const Tensor& x, const Tensor& y, int window, double sigma, double c1,
                  double c2) {
    require_same_shape(x, y, "ssim_value");
    const Shape s = x.shape();
    if (s.h < window || s.w < window)
        throw std::invalid_argument("ssim_value: image " + to_string(s) +
                                    " smaller than window " + std::to_string(window));

    Tensor g = gaussian_window(window, sigma);
    Tensor mx = depthwise_conv2d(x, g, 0);
    Tensor my = depthwise_conv2d(y, g, 0);
    Tensor vx = depthwise_conv2d(mul(x, x), g, 0) - mul(mx, mx);
    Tensor vy = depthwise_conv2d(mul(y, y), g, 0) - mul(my, my);
    Tensor cxy = depthwise_conv2d(mul(x, y), g, 0) - mul(mx, my);

    Tensor k1 = Tensor::full(mx.shape(), c1);
    Tensor k2 = Tensor::full(mx.shape(), c2);
    Tensor num = mul(scale(mul(mx, my), 2.0) + k1, scale(cxy, 2.0) + k2);
    Tensor den = mul(mul(mx, mx) + mul(my, my) + k1, vx + vy + k2);
    return reduce_mean(div(num, den));
}

Tensor tv_loss(const Tensor& pred) {
    const Shape s = pred.shape();
    if (s.h < 2 || s.w < 2)
        throw std::invalid_argument("tv_loss: needs H >= 2 and W >= 2, got " + to_string(s));
    const double diff[] = {-1.0, 1.0};
    Tensor kh = Tensor::from_values({1, 1, 1, 2}, diff);
    Tensor kv = Tensor::from_values({1, 1, 2, 1}, diff);
    Tensor dh = depthwise_conv2d(pred, kh, 0);
    Tensor dv = depthwise_conv2d(pred, kv, 0);
    Tensor total = reduce_sum(mul(dh, dh)) + reduce_sum(mul(dv, dv));
    return scale(total, 1.0 / static_cast<double>(pred.numel()));
}

PerceptualNet PerceptualNet::seeded(std::uint64_t seed) {
    PerceptualNet net;
    std::mt19937_64 rng(seed);
    const int widths[] = {3, 16, 32, 64};
    for (int i = 0; i < 3; ++i) {
        const int cin = widths[i], cout = widths[i + 1];
        const double bound = std::sqrt(6.0 / (cin * 9.0));
        net.w_.push_back(Tensor::uniform({cout, cin, 3, 3}, -bound, bound, rng()));
        net.b_.push_back(Tensor::zeros({1, cout, 1, 1}));
    }
    return net;
}

Tensor perceptual_loss(const Tensor& pred, const Tensor& tgt, const PerceptualNet& net) {
    require_same_shape(pred, tgt, "perceptual_loss");
    const Shape s = pred.shape();
    if (s.c != 3) throw std::invalid_argument("perceptual_loss: inputs must have 3 channels");
    if (s.h % 8 != 0 || s.w % 8 != 0)
        throw std::invalid_argument("perceptual_loss: H and W must be divisible by 8, got " +
                                    to_string(s));
    Tensor fp = pred;
    Tensor ft = tgt.detached();
    Tensor total;
    for (std::size_t i = 0; i < net.weights().size(); ++i) {
        fp = relu(conv2d(fp, net.weights()[i], net.biases()[i], 2, 1));
        ft = relu(conv2d(ft, net.weights()[i], net.biases()[i], 2, 1));
        Tensor d = fp - ft;
        Tensor term = reduce_mean(mul(d, d));
        total = total.defined() ? total + term : term;
    }
    return total;
}

Tensor advanced_sobel_loss(const Tensor& pred, const Tensor& tgt) {
    require_same_shape(pred, tgt, "advanced_sobel_loss");
    static const double g0[] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    static const double g90[] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    static const double g45[] = {0, 1, 2, -1, 0, 1, -2, -1, 0};
    static const double g135[] = {-2, -1, 0, -1, 0, 1, 0, 1, 2};
    Tensor total;
    // Interior positions only: border rows of a padded response are artifacts
    // of the padding (a flat image would score nonzero edges there).
    for (const double* k : {g0, g90, g45, g135}) {
        Tensor ker = Tensor::from_values({1, 1, 3, 3}, {k, 9});
        Tensor term = reduce_mean(abs(depthwise_conv2d(pred, ker, 0) -
                                      depthwise_conv2d(tgt, ker, 0)));
        total = total.defined() ? total + term : term;
    }
    return scale(total, 0.25);
}

Tensor combined_loss(const Tensor& pred, const Tensor& tgt, const LossWeights& w,
                     const PerceptualNet& net, CombinedBreakdown* breakdown) {
    Tensor t1 = l1_loss(pred, tgt);
    Tensor ts = ssim_value(pred, tgt);
    Tensor tp = perceptual_loss(pred, tgt, net);
    Tensor tt = tv_loss(pred);
    Tensor total = scale(t1, w.l1) + scale(ts, w.ssim) + scale(tp, w.perceptual) + scale(tt, w.tv);
    if (breakdown) {
        breakdown->l1 = t1.item();
        breakdown->ssim = ts.item();
        breakdown->perceptual = tp.item();
        breakdown->tv = tt.item();
        breakdown->total = total.item();
    }
    return total;
}

Tensor combined_sobel_loss(const Tensor& pred, const Tensor& tgt, double sobel_mix) {
    return l2_loss(pred, tgt) + scale(advanced_sobel_loss(pred, tgt), sobel_mix);
}

} // namespace relight
