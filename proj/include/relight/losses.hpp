#pragma once

#include "relight/tensor.hpp"

namespace relight {

/// Combined-loss weights. ssim is negative: the SSIM term is a similarity
/// (higher is better), so the combination maximizes it.
struct LossWeights {
    double l1 = 1.0;
    double ssim = -5e-3;
    double perceptual = 0.006;
    double tv = 2e-8;
    double sobel_mix = 0.1;
};

/// mean |pred - tgt|
Tensor l1_loss(const Tensor& pred, const Tensor& tgt);

/// mean (pred - tgt)^2
Tensor l2_loss(const Tensor& pred, const Tensor& tgt);

/// Gaussian-windowed structural similarity over valid positions only,
/// averaged over positions and channels. Returns the raw similarity in
/// [-1, 1]; inputs are assumed to live in [0, 1] (dynamic range 1).
Tensor ssim_value(const Tensor& x, const Tensor& y, int window = 11, double sigma = 1.5,
                  double c1 = 1e-4, double c2 = 9e-4);

/// (sum of squared horizontal diffs + sum of squared vertical diffs) / numel
Tensor tv_loss(const Tensor& pred);

/// Frozen random feature extractor for the perceptual distance: three
/// stride-2 conv+relu layers 3->16->32->64, He-uniform weights from a fixed
/// seed, never trained.
class PerceptualNet {
public:
    static PerceptualNet seeded(std::uint64_t seed = 0);

    const std::vector<Tensor>& weights() const { return w_; }
    const std::vector<Tensor>& biases() const { return b_; }

private:
    std::vector<Tensor> w_, b_;
};

/// Sum over the three feature levels of mean squared feature difference.
/// Symmetric in value; gradients flow to pred only. H, W divisible by 8.
Tensor perceptual_loss(const Tensor& pred, const Tensor& tgt, const PerceptualNet& net);

/// Mean over four directional 3x3 edge kernels (0/45/90/135 degrees, applied
/// depthwise with zero padding) of mean |edge(pred) - edge(tgt)|.
Tensor advanced_sobel_loss(const Tensor& pred, const Tensor& tgt);

struct CombinedBreakdown {
    double l1 = 0, ssim = 0, perceptual = 0, tv = 0, total = 0;
};

/// w.l1 * L1 + w.ssim * SSIM + w.perceptual * Lp + w.tv * Ltv. The optional
/// breakdown reports each unweighted term plus the combined scalar.
Tensor combined_loss(const Tensor& pred, const Tensor& tgt, const LossWeights& w,
                     const PerceptualNet& net, CombinedBreakdown* breakdown = nullptr);

/// L2 + sobel_mix * advanced Sobel.
Tensor combined_sobel_loss(const Tensor& pred, const Tensor& tgt, double sobel_mix);

} // namespace relight
