#pragma once

#include "relight/tensor.hpp"

#include <string>
#include <vector>

namespace relight {

/// 10*log10(max_val^2 / MSE) after clamping both images to [0, max_val].
/// Identical images give +infinity.
double psnr(const Tensor& pred, const Tensor& tgt, double max_val = 1.0);

/// Same formula as losses ssim_value, evaluated without gradient tracking on
/// images clamped to [0,1].
double ssim_metric(const Tensor& pred, const Tensor& tgt);

struct SampleMetrics {
    std::string id;
    double psnr = 0;
    double ssim = 0;
};

/// Per-sample metric collection with infinity-aware aggregation: samples
/// with infinite PSNR are excluded from the PSNR mean and counted separately.
struct MetricsReport {
    std::vector<SampleMetrics> samples;

    void add(std::string id, double psnr_db, double ssim);
    std::size_t count() const { return samples.size(); }
    int infinite_psnr_count() const;
    double mean_psnr() const;
    double mean_ssim() const;

    /// Human-readable text table with a mean row.
    std::string table() const;
    /// One `sample_id<TAB>psnr<TAB>ssim` line per sample.
    std::string tsv() const;
};

} // namespace relight
