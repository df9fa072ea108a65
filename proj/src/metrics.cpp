#include "relight/metrics.hpp"

#include "relight/losses.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace relight {

double psnr(const Tensor& pred, const Tensor& tgt, double max_val) {
    if (!(pred.shape() == tgt.shape()))
        throw std::invalid_argument("psnr: shape mismatch " + to_string(pred.shape()) + " vs " +
                                    to_string(tgt.shape()));
    if (max_val <= 0) throw std::invalid_argument("psnr: max_val must be positive");
    const std::vector<double> pv = pred.values();
    const std::vector<double> tv = tgt.values();
    auto clamp = [max_val](double v) { return v < 0 ? 0.0 : (v > max_val ? max_val : v); };
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = clamp(pv[i]) - clamp(tv[i]);
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(pv.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_val * max_val / mse);
}

double ssim_metric(const Tensor& pred, const Tensor& tgt) {
    return ssim_value(clamp01(pred), clamp01(tgt)).item();
}

void MetricsReport::add(std::string id, double psnr_db, double ssim) {
    samples.push_back({std::move(id), psnr_db, ssim});
}

int MetricsReport::infinite_psnr_count() const {
    int n = 0;
    for (const auto& s : samples)
        if (std::isinf(s.psnr)) ++n;
    return n;
}

double MetricsReport::mean_psnr() const {
    double acc = 0.0;
    int n = 0;
    for (const auto& s : samples) {
        if (std::isinf(s.psnr)) continue;
        acc += s.psnr;
        ++n;
    }
    return n == 0 ? std::numeric_limits<double>::infinity() : acc / n;
}

double MetricsReport::mean_ssim() const {
    if (samples.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& s : samples) acc += s.ssim;
    return acc / static_cast<double>(samples.size());
}

namespace {

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

} // namespace

std::string MetricsReport::table() const {
    std::ostringstream os;
    os << "sample                     psnr(dB)     ssim\n";
    for (const auto& s : samples) {
        os << s.id;
        for (std::size_t i = s.id.size(); i < 25; ++i) os << ' ';
        os << ' ' << fmt(s.psnr) << "   " << fmt(s.ssim) << '\n';
    }
    os << "mean (" << samples.size() << " samples)         " << fmt(mean_psnr()) << "   "
       << fmt(mean_ssim()) << '\n';
    if (const int inf = infinite_psnr_count(); inf > 0)
        os << inf << " sample(s) with infinite psnr excluded from the psnr mean\n";
    return os.str();
}

std::string MetricsReport::tsv() const {
    std::ostringstream os;
    for (const auto& s : samples) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\n", s.id.c_str(), s.psnr, s.ssim);
        os << buf;
    }
    return os.str();
}

} // namespace relight
