#pragma once

#include "relight/data.hpp"
#include "relight/losses.hpp"
#include "relight/metrics.hpp"
#include "relight/net.hpp"

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace relight {

/// Training objective. MSE is the plain pixel loss; CL is the weighted
/// combined loss (l1/ssim/perceptual/tv); CSL mixes MSE with the
/// multi-directional edge loss.
enum class LossMode { MSE, CL, CSL };

std::string to_string(LossMode mode);
LossMode loss_mode_from_string(const std::string& name);

struct TrainConfig {
    int batch_size = 2;
    int epochs_total = 2500;
    double stage1_fraction = 0.5;  // share of epochs trained on plain MSE
    double lr_init = 2e-3;
    double lr_final = 5e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    LossMode stage1_loss = LossMode::MSE;
    LossMode stage2_loss = LossMode::CL;
    bool train_resize = false;  // mean-pool each batch to half resolution
    LossWeights weights{};
};

/// Throws std::invalid_argument on out-of-range fields.
void validate(const TrainConfig& cfg);

/// Adam moment buffers, keyed like the parameter map they track.
struct AdamState {
    ParamMap m;
    ParamMap v;
    std::uint64_t t = 0;
};

AdamState make_adam_state(const ParamMap& params);

/// One bias-corrected Adam update over all parameters in name order.
/// grads must contain a matching-shape tensor for every parameter.
void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Cosine decay: lr_final + 0.5*(lr_init - lr_final)*(1 + cos(pi*step/total)).
/// Endpoints are exact; step outside [0, total_steps] throws.
double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

struct Model {
    NetConfig config;
    ParamMap params;
};

Model make_model(const NetConfig& config);

/// Order in which samples are visited during one epoch; a deterministic
/// function of (seed, stage, epoch) only.
std::vector<std::size_t> epoch_permutation(std::uint64_t seed, int stage_index, int epoch,
                                           std::size_t n);

struct StageSpec {
    int index = 1;  // 1-based; shows up in logs and error diagnostics
    LossMode mode = LossMode::MSE;
    int epochs = 0;
    std::int64_t max_steps = 0;    // 0 = run all epochs
    std::int64_t step_offset = 0;  // added to logged step numbers
};

struct StepRecord {
    std::int64_t step = 0;  // global (offset included), 1-based
    int stage = 1;
    double lr = 0;
    double loss = 0;
    /// Per-term values when the stage trains the combined loss; null
    /// otherwise. Valid only for the duration of the callback.
    const CombinedBreakdown* breakdown = nullptr;
};
using StepLogger = std::function<void(const StepRecord&)>;
/// Called after each epoch with the live model (e.g. for periodic
/// checkpoints); epoch numbering is global across stages.
using EpochHook = std::function<void(const Model& model, int epoch, std::int64_t steps_done)>;

/// Raised when a training step produces a non-finite loss.
struct NumericalError : std::runtime_error {
    std::int64_t step;
    double lr;
    std::string terms;
    NumericalError(std::int64_t step_, double lr_, std::string terms_);
};

/// Trains one stage over the manifest, updating model.params and state in
/// place. Returns the per-step scalar loss history.
std::vector<double> run_stage(Model& model, const Manifest& manifest, const StageSpec& stage,
                              const TrainConfig& cfg, AdamState& state,
                              const StepLogger& logger = {}, const EpochHook& epoch_hook = {});

struct Checkpoint {
    NetConfig config;
    ParamMap params;
    std::uint64_t global_step = 0;
    std::uint32_t stage_index = 0;
    bool has_adam = false;
    AdamState adam;
};

/// Stage 1 trains stage1_loss for ceil(stage1_fraction * epochs_total)
/// epochs, stage 2 trains stage2_loss for the remainder from the stage-1
/// weights. Adam state and the LR schedule both reset at the boundary.
Checkpoint train_two_stage(const NetConfig& net_cfg, const TrainConfig& cfg,
                           const Manifest& manifest, const StepLogger& logger = {},
                           const EpochHook& epoch_hook = {});

/// Full-resolution inference over every manifest pair, PSNR + SSIM each.
MetricsReport evaluate(const Model& model, const Manifest& manifest);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct VersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct TruncationError : CheckpointError {
    using CheckpointError::CheckpointError;
};

/// Binary checkpoint, all integers little-endian:
///   "DMSH" | version u32 | base_channels u32 | levels u32 | stacks u32 |
///   init_seed u64 | global_step u64 | stage_index u32 | has_adam u8 |
///   adam_t u64 | tensor_count u32 | tensor entries.
/// Each entry: name_len u16, name bytes, ndim u8 (= 4), dims u32 x 4, raw
/// f32 data. Parameters come first in name order; if has_adam, the moment
/// buffers follow with "m:" / "v:" name prefixes. save->load->save is
/// bitwise stable.
void checkpoint_save(const std::string& path, const Checkpoint& ckpt);
Checkpoint checkpoint_load(const std::string& path);

} // namespace relight
