#include "relight/net.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace relight {

void validate(const NetConfig& config) {
    if (config.base_channels < 1)
        throw std::invalid_argument("base_channels must be >= 1, got " +
                                    std::to_string(config.base_channels));
    if (config.stacks != 1 && config.stacks != 2)
        throw std::invalid_argument("stacks must be 1 or 2, got " + std::to_string(config.stacks));
}

const Tensor& param(const ParamMap& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("missing parameter: " + name);
    return it->second;
}

namespace {

struct ConvSpec {
    const char* layer;
    int cin, cout;
};

// Creation order is fixed; the master RNG hands each weight its own seed in
// this order, so the layout of the map never affects the draw.
std::vector<ConvSpec> encoder_layers(int C) {
    return {{"c0", 3, C},          {"c1", C, 2 * C},      {"c2", 2 * C, 4 * C},
            {"r0.c0", 4 * C, 4 * C}, {"r0.c1", 4 * C, 4 * C},
            {"r1.c0", 4 * C, 4 * C}, {"r1.c1", 4 * C, 4 * C}};
}

std::vector<ConvSpec> decoder_layers(int C) {
    return {{"r0.c0", 4 * C, 4 * C}, {"r0.c1", 4 * C, 4 * C},
            {"r1.c0", 4 * C, 4 * C}, {"r1.c1", 4 * C, 4 * C},
            {"u0", 4 * C, 2 * C},    {"u1", 2 * C, C},      {"c2", C, 3}};
}

void add_conv(ParamMap& out, std::mt19937_64& rng, const std::string& prefix,
              const ConvSpec& spec) {
    const double bound = std::sqrt(6.0 / (spec.cin * 9.0));
    const std::string base = prefix + "." + spec.layer;
    out.emplace(base + ".w", Tensor::uniform({spec.cout, spec.cin, 3, 3}, -bound, bound, rng(),
                                             /*requires_grad=*/true));
    out.emplace(base + ".b", Tensor::zeros({1, spec.cout, 1, 1}, /*requires_grad=*/true));
}

Tensor conv_layer(const ParamMap& params, const std::string& base, const Tensor& x, int stride) {
    return conv2d(x, param(params, base + ".w"), param(params, base + ".b"), stride, 1);
}

Tensor residual_block(const ParamMap& params, const std::string& base, const Tensor& x) {
    Tensor y = relu(conv_layer(params, base + ".c0", x, 1));
    y = conv_layer(params, base + ".c1", y, 1);
    return relu(x + y);
}

} // namespace

ParamMap init_params(const NetConfig& config) {
    validate(config);
    const int C = config.base_channels;
    std::mt19937_64 rng(config.init_seed);
    ParamMap out;
    for (int s = 0; s < config.stacks; ++s) {
        for (int l = 1; l <= NetConfig::levels; ++l) {
            const std::string lv = "s" + std::to_string(s) + ".l" + std::to_string(l);
            for (const ConvSpec& spec : encoder_layers(C)) add_conv(out, rng, lv + ".enc", spec);
            for (const ConvSpec& spec : decoder_layers(C)) add_conv(out, rng, lv + ".dec", spec);
        }
    }
    return out;
}

std::int64_t param_count(const ParamMap& params) {
    std::int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

Pyramid build_pyramid(const Tensor& image) {
    const Shape s = image.shape();
    if (s.h % 4 != 0 || s.w % 4 != 0)
        throw std::invalid_argument("pyramid input H and W must be divisible by 4, got " +
                                    to_string(s));
    Pyramid p;
    p.b3 = image;
    p.b2 = downsample_avg2x(p.b3);
    p.b1 = downsample_avg2x(p.b2);
    return p;
}

Tensor encoder_forward(const ParamMap& params, const std::string& prefix, const Tensor& x) {
    const Shape s = x.shape();
    if (s.h % 4 != 0 || s.w % 4 != 0)
        throw std::invalid_argument("encoder input H and W must be divisible by 4, got " +
                                    to_string(s));
    Tensor h = relu(conv_layer(params, prefix + ".c0", x, 1));
    h = relu(conv_layer(params, prefix + ".c1", h, 2));
    h = relu(conv_layer(params, prefix + ".c2", h, 2));
    h = residual_block(params, prefix + ".r0", h);
    return residual_block(params, prefix + ".r1", h);
}

Tensor decoder_forward(const ParamMap& params, const std::string& prefix, const Tensor& f) {
    Tensor h = residual_block(params, prefix + ".r0", f);
    h = residual_block(params, prefix + ".r1", h);
    h = relu(conv_layer(params, prefix + ".u0", upsample_bilinear2x(h), 1));
    h = relu(conv_layer(params, prefix + ".u1", upsample_bilinear2x(h), 1));
    return conv_layer(params, prefix + ".c2", h, 1);
}

Tensor dmshn_forward(const ParamMap& params, int stack, const Tensor& image) {
    const Shape s = image.shape();
    if (s.h % 16 != 0 || s.w % 16 != 0)
        throw std::invalid_argument("network input H and W must be divisible by 16, got " +
                                    to_string(s));
    const std::string sp = "s" + std::to_string(stack) + ".";
    const Pyramid pyr = build_pyramid(image);

    Tensor f1 = encoder_forward(params, sp + "l1.enc", pyr.b1);
    Tensor o1 = decoder_forward(params, sp + "l1.dec", f1);

    Tensor i2 = pyr.b2 + upsample_bilinear2x(o1);
    Tensor f2 = encoder_forward(params, sp + "l2.enc", i2) + upsample_bilinear2x(f1);
    Tensor o2 = decoder_forward(params, sp + "l2.dec", f2);

    Tensor i3 = pyr.b3 + upsample_bilinear2x(o2);
    Tensor f3 = encoder_forward(params, sp + "l3.enc", i3) + upsample_bilinear2x(f2);
    return decoder_forward(params, sp + "l3.dec", f3);
}

NetOutput net_forward(const NetConfig& config, const ParamMap& params, const Tensor& image) {
    validate(config);
    NetOutput out;
    out.mid = dmshn_forward(params, 0, image);
    out.out = config.stacks == 2 ? dmshn_forward(params, 1, out.mid) : out.mid;
    return out;
}

} // namespace relight
