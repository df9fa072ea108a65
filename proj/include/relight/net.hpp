#pragma once

#include "relight/tensor.hpp"

#include <map>
#include <string>

namespace relight {

/// Architecture knobs for the multi-scale relighting network.
struct NetConfig {
    int base_channels = 8;       // C; 32 reproduces the full-size model
    int stacks = 1;              // 1 = single pass, 2 = cascade of two passes
    std::uint64_t init_seed = 0;
    static constexpr int levels = 3;
};

void validate(const NetConfig& config);

/// Deterministic name -> tensor map. Names follow
///   s<stack>.l<level>.{enc|dec}.<layer>.{w|b}
/// and are stable across save/load.
using ParamMap = std::map<std::string, Tensor>;

const Tensor& param(const ParamMap& params, const std::string& name);

/// He-uniform weights (bound sqrt(6/fan_in)) drawn from init_seed, zero
/// biases, every tensor requires_grad. Bitwise deterministic per seed.
ParamMap init_params(const NetConfig& config);

std::int64_t param_count(const ParamMap& params);

/// Three-level image pyramid: b3 is the input, each level below is 2x2
/// mean-pooled from the one above. H and W must be divisible by 4.
struct Pyramid {
    Tensor b1, b2, b3;
};
Pyramid build_pyramid(const Tensor& image);

/// conv(3->C)+relu; conv(C->2C,s2)+relu; conv(2C->4C,s2)+relu; two residual
/// blocks. Input [N,3,h,w] with h,w divisible by 4; output [N,4C,h/4,w/4].
Tensor encoder_forward(const ParamMap& params, const std::string& prefix, const Tensor& x);

/// Mirror of the encoder: two residual blocks; upsample+conv(4C->2C)+relu;
/// upsample+conv(2C->C)+relu; conv(C->3) with no activation.
Tensor decoder_forward(const ParamMap& params, const std::string& prefix, const Tensor& f);

/// One coarse-to-fine pass over the pyramid. Each level's decoder output is
/// upscaled and added to the next level's pyramid image, and each level's
/// encoder output is added with the upscaled encoder output of the previous
/// level before decoding. H and W must be divisible by 16.
Tensor dmshn_forward(const ParamMap& params, int stack, const Tensor& image);

/// Full network forward. With stacks=1, mid and out are the same tensor;
/// with stacks=2, out = stack 1 applied to mid. Training supervises out only.
struct NetOutput {
    Tensor mid;
    Tensor out;
};
NetOutput net_forward(const NetConfig& config, const ParamMap& params, const Tensor& image);

} // namespace relight
