#pragma once

#include "relight/tensor.hpp"

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace relight {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
/// File does not exist or cannot be opened.
struct FileMissingError : DataError {
    using DataError::DataError;
};
/// File exists and parses, but is not an 8-bit RGB PNG.
struct FormatError : DataError {
    using DataError::DataError;
};
/// File exists but cannot be parsed as a PNG.
struct DecodeError : DataError {
    using DataError::DataError;
};

/// 8-bit RGB PNG -> [1,3,H,W] tensor in [0,1] (v/255).
Tensor load_image(const std::string& path);

/// Clamp to [0,1], quantize by round(v*255), write 8-bit RGB PNG.
void save_image(const Tensor& image, const std::string& path);

struct PngDims {
    int height = 0;
    int width = 0;
};
/// Header-only read, cheap enough for scan-time validation.
PngDims read_png_dims(const std::string& path);

struct SamplePair {
    std::string scene_id;
    std::string input_path;
    std::string target_path;
};

struct Manifest {
    std::vector<SamplePair> pairs;
    std::string split;   // basename of the scanned directory
    std::string root;    // the scanned directory itself
    int skipped = 0;     // scenes missing either file

    /// UTF-8 CSV with a `scene_id,input_path,target_path` header row.
    std::string to_csv() const;
};

/// Scan one split directory whose immediate children are scene directories
/// containing <input_tag>.png and <target_tag>.png. Scenes missing either
/// file are skipped and counted; zero usable pairs or a missing root is an
/// error, as is a pair whose two images have different dimensions.
Manifest scan_dataset(const std::string& root, const std::string& input_tag = "N_6500",
                      const std::string& target_tag = "E_4500");

struct Batch {
    Tensor input;
    Tensor target;
};
/// Load and stack the given manifest rows into [B,3,H,W] pairs.
Batch make_batch(const Manifest& m, std::span<const std::size_t> indices);

/// Raw synthetic scene description: piecewise-constant albedo over random
/// rectangles and disks, plus unit normals from a smooth random heightfield.
struct SceneFields {
    int size = 0;
    std::vector<double> albedo;      // 3 planes of size*size
    std::vector<double> nx, ny, nz;  // unit normal per pixel
};

std::uint64_t scene_seed(std::uint64_t dataset_seed, int scene_index);
SceneFields synth_scene_fields(std::uint64_t scene_seed, int size);

/// Unit direction toward the light plus per-channel gain.
struct LightSpec {
    double lx = 0, ly = 0, lz = 1;
    double gain[3] = {1, 1, 1};
};
LightSpec north_light(); // overhead-tilted from the top of the image, neutral
LightSpec east_light();  // from the right of the image, warm gain

/// Lambertian shading: per channel clamp01(gain * albedo * (max(0,n.l) + 0.1)).
Tensor render_scene(const SceneFields& fields, const LightSpec& light);

/// Write n_scenes synthetic scenes under out_root in the scan_dataset layout
/// (scene directories with N_6500.png / E_4500.png). size must be divisible
/// by 16. Returns the manifest of what was written.
Manifest synth_generate(const std::string& out_root, std::uint64_t seed, int n_scenes, int size);

/// 2x2 mean-pool to half resolution; H and W must be even.
Tensor resize_half(const Tensor& image);

} // namespace relight
