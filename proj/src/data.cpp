#include "relight/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <random>
#include <sstream>

namespace fs = std::filesystem;

namespace relight {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_or_throw(const std::string& path, const char* mode) {
    std::FILE* f = std::fopen(path.c_str(), mode);
    if (!f) throw FileMissingError("cannot open " + path);
    return FilePtr(f);
}

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;

    PngReader() {
        png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (png) info = png_create_info_struct(png);
        if (!png || !info) {
            png_destroy_read_struct(&png, &info, nullptr);
            throw DecodeError("png reader allocation failed");
        }
    }
    ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;

    PngWriter() {
        png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (png) info = png_create_info_struct(png);
        if (!png || !info) {
            png_destroy_write_struct(&png, &info);
            throw DataError("png writer allocation failed");
        }
    }
    ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

void check_signature(std::FILE* f, const std::string& path) {
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f) != 8 || png_sig_cmp(sig, 0, 8))
        throw DecodeError("not a PNG file: " + path);
}

void require_rgb8(png_structp png, png_infop info, const std::string& path) {
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB)
        throw FormatError("not an RGB PNG (unexpected color type): " + path);
    if (png_get_bit_depth(png, info) != 8)
        throw FormatError("not an 8-bit PNG: " + path);
}

} // namespace

Tensor load_image(const std::string& path) {
    FilePtr file = open_or_throw(path, "rb");
    check_signature(file.get(), path);

    PngReader r;
    std::vector<unsigned char> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(r.png))) throw DecodeError("failed to decode " + path);
    png_init_io(r.png, file.get());
    png_set_sig_bytes(r.png, 8);
    png_read_info(r.png, r.info);
    require_rgb8(r.png, r.info, path);

    const int w = static_cast<int>(png_get_image_width(r.png, r.info));
    const int h = static_cast<int>(png_get_image_height(r.png, r.info));
    pixels.resize(static_cast<std::size_t>(h) * w * 3);
    rows.resize(static_cast<std::size_t>(h));
    for (int i = 0; i < h; ++i) rows[static_cast<std::size_t>(i)] = pixels.data() + static_cast<std::size_t>(i) * w * 3;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);

    Tensor out = Tensor::zeros({1, 3, h, w});
    auto& st = *out.impl()->storage;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                st.set((static_cast<std::int64_t>(c) * h + i) * w + j,
                       pixels[(static_cast<std::size_t>(i) * w + j) * 3 + static_cast<std::size_t>(c)] / 255.0);
    return out;
}

void save_image(const Tensor& image, const std::string& path) {
    const Shape s = image.shape();
    if (s.n != 1 || s.c != 3)
        throw std::invalid_argument("save_image: expected shape (1,3,H,W), got " + to_string(s));

    const std::vector<double> vals = image.values();
    std::vector<unsigned char> pixels(static_cast<std::size_t>(s.h) * s.w * 3);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < s.h; ++i)
            for (int j = 0; j < s.w; ++j) {
                double v = vals[(static_cast<std::size_t>(c) * s.h + i) * s.w + j];
                v = v < 0 ? 0 : (v > 1 ? 1 : v);
                // Ties round down so 0.5 quantizes to 127, not 128.
                int q = static_cast<int>(std::ceil(v * 255.0 - 0.5));
                q = q < 0 ? 0 : (q > 255 ? 255 : q);
                pixels[(static_cast<std::size_t>(i) * s.w + j) * 3 + static_cast<std::size_t>(c)] =
                    static_cast<unsigned char>(q);
            }

    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw FileMissingError("cannot open for writing: " + path);
    FilePtr file(f);

    PngWriter w;
    std::vector<png_bytep> rows(static_cast<std::size_t>(s.h));
    for (int i = 0; i < s.h; ++i) rows[static_cast<std::size_t>(i)] = pixels.data() + static_cast<std::size_t>(i) * s.w * 3;
    if (setjmp(png_jmpbuf(w.png))) throw DataError("failed to encode " + path);
    png_init_io(w.png, file.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(s.w), static_cast<png_uint_32>(s.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    png_write_image(w.png, rows.data());
    png_write_end(w.png, nullptr);
}

PngDims read_png_dims(const std::string& path) {
    FilePtr file = open_or_throw(path, "rb");
    check_signature(file.get(), path);

    PngReader r;
    if (setjmp(png_jmpbuf(r.png))) throw DecodeError("failed to decode " + path);
    png_init_io(r.png, file.get());
    png_set_sig_bytes(r.png, 8);
    png_read_info(r.png, r.info);
    return {static_cast<int>(png_get_image_height(r.png, r.info)),
            static_cast<int>(png_get_image_width(r.png, r.info))};
}

std::string Manifest::to_csv() const {
    std::ostringstream os;
    os << "scene_id,input_path,target_path\n";
    for (const auto& p : pairs) os << p.scene_id << ',' << p.input_path << ',' << p.target_path << '\n';
    return os.str();
}

Manifest scan_dataset(const std::string& root, const std::string& input_tag,
                      const std::string& target_tag) {
    const fs::path rp(root);
    if (!fs::exists(rp)) throw FileMissingError("dataset root does not exist: " + root);
    if (!fs::is_directory(rp)) throw DataError("dataset root is not a directory: " + root);

    std::vector<std::string> scenes;
    for (const auto& entry : fs::directory_iterator(rp))
        if (entry.is_directory()) scenes.push_back(entry.path().filename().string());
    std::sort(scenes.begin(), scenes.end());

    Manifest m;
    m.root = root;
    m.split = rp.filename().string();
    for (const std::string& scene : scenes) {
        const fs::path in = rp / scene / (input_tag + ".png");
        const fs::path tgt = rp / scene / (target_tag + ".png");
        if (!fs::exists(in) || !fs::exists(tgt)) {
            m.skipped += 1;
            continue;
        }
        const PngDims di = read_png_dims(in.string());
        const PngDims dt = read_png_dims(tgt.string());
        if (di.height != dt.height || di.width != dt.width)
            throw DataError("pair dimension mismatch in scene " + scene + ": " +
                            std::to_string(di.width) + "x" + std::to_string(di.height) + " vs " +
                            std::to_string(dt.width) + "x" + std::to_string(dt.height));
        m.pairs.push_back({scene, in.string(), tgt.string()});
    }
    if (m.pairs.empty())
        throw DataError("no usable sample pairs under " + root + " (skipped " +
                        std::to_string(m.skipped) + " incomplete scenes)");
    return m;
}

Batch make_batch(const Manifest& m, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
    std::vector<Tensor> ins, tgts;
    for (std::size_t idx : indices) {
        if (idx >= m.pairs.size()) throw std::out_of_range("make_batch: index out of range");
        ins.push_back(load_image(m.pairs[idx].input_path));
        tgts.push_back(load_image(m.pairs[idx].target_path));
        if (!(ins.back().shape() == ins.front().shape()) ||
            !(tgts.back().shape() == ins.front().shape()))
            throw DataError("make_batch: inconsistent image dimensions in batch");
    }
    const Shape one = ins.front().shape();
    const Shape bs{static_cast<int>(indices.size()), one.c, one.h, one.w};
    Tensor in = Tensor::zeros(bs), tgt = Tensor::zeros(bs);
    auto& si = *in.impl()->storage;
    auto& st = *tgt.impl()->storage;
    const std::int64_t per = one.numel();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::vector<double> iv = ins[b].values();
        const std::vector<double> tv = tgts[b].values();
        for (std::int64_t k = 0; k < per; ++k) {
            si.set(static_cast<std::int64_t>(b) * per + k, iv[static_cast<std::size_t>(k)]);
            st.set(static_cast<std::int64_t>(b) * per + k, tv[static_cast<std::size_t>(k)]);
        }
    }
    return {in, tgt};
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double u01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

double urange(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * u01(rng); }

} // namespace

std::uint64_t scene_seed(std::uint64_t dataset_seed, int scene_index) {
    return splitmix64(dataset_seed + static_cast<std::uint64_t>(scene_index));
}

SceneFields synth_scene_fields(std::uint64_t scene_seed, int size) {
    std::mt19937_64 rng(scene_seed);
    SceneFields f;
    f.size = size;
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    f.albedo.assign(3 * plane, 0.0);
    f.nx.assign(plane, 0.0);
    f.ny.assign(plane, 0.0);
    f.nz.assign(plane, 1.0);

    // base color, then 4-8 painted shapes
    double base[3];
    for (double& c : base) c = urange(rng, 0.2, 0.9);
    for (int c = 0; c < 3; ++c)
        std::fill_n(f.albedo.begin() + static_cast<std::ptrdiff_t>(c) * static_cast<std::ptrdiff_t>(plane),
                    plane, base[c]);

    const int n_shapes = 4 + static_cast<int>(rng() % 5);
    for (int s = 0; s < n_shapes; ++s) {
        double color[3];
        for (double& c : color) c = urange(rng, 0.05, 0.95);
        const bool disk = (rng() & 1) != 0;
        if (disk) {
            const double cx = urange(rng, 0, size), cy = urange(rng, 0, size);
            const double rad = urange(rng, size / 12.0, size / 4.0);
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j) {
                    const double dx = j - cx, dy = i - cy;
                    if (dx * dx + dy * dy <= rad * rad)
                        for (int c = 0; c < 3; ++c)
                            f.albedo[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(i) * size + j] = color[c];
                }
        } else {
            const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(size));
            const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(size));
            const int w = size / 8 + static_cast<int>(rng() % static_cast<std::uint64_t>(size / 3 + 1));
            const int h = size / 8 + static_cast<int>(rng() % static_cast<std::uint64_t>(size / 3 + 1));
            for (int i = y0; i < std::min(size, y0 + h); ++i)
                for (int j = x0; j < std::min(size, x0 + w); ++j)
                    for (int c = 0; c < 3; ++c)
                        f.albedo[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(i) * size + j] = color[c];
        }
    }

    // smooth heightfield: sum of gaussian bumps with analytic gradients
    struct Bump {
        double cx, cy, sigma, amp;
    };
    std::vector<Bump> bumps(3 + rng() % 4);
    for (Bump& b : bumps) {
        b.cx = urange(rng, 0, size);
        b.cy = urange(rng, 0, size);
        b.sigma = urange(rng, size / 8.0, size / 3.0);
        const double mag = urange(rng, 0.5, 1.5) * b.sigma;
        b.amp = (rng() & 1) ? mag : -mag;
    }
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            double hx = 0, hy = 0;
            for (const Bump& b : bumps) {
                const double dx = j - b.cx, dy = i - b.cy;
                const double e = b.amp * std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
                hx += e * (-dx / (b.sigma * b.sigma));
                hy += e * (-dy / (b.sigma * b.sigma));
            }
            const double inv = 1.0 / std::sqrt(hx * hx + hy * hy + 1.0);
            const std::size_t p = static_cast<std::size_t>(i) * size + j;
            f.nx[p] = -hx * inv;
            f.ny[p] = -hy * inv;
            f.nz[p] = inv;
        }
    return f;
}

LightSpec north_light() {
    const double s = 1.0 / std::sqrt(2.0);
    return {0.0, -s, s, {1.0, 1.0, 1.0}};
}

LightSpec east_light() {
    const double s = 1.0 / std::sqrt(2.0);
    return {s, 0.0, s, {1.0, 0.85, 0.65}};
}

Tensor render_scene(const SceneFields& fields, const LightSpec& light) {
    const int size = fields.size;
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    Tensor out = Tensor::zeros({1, 3, size, size});
    auto& st = *out.impl()->storage;
    for (std::size_t p = 0; p < plane; ++p) {
        const double ndotl =
            fields.nx[p] * light.lx + fields.ny[p] * light.ly + fields.nz[p] * light.lz;
        const double shade = (ndotl > 0 ? ndotl : 0.0) + 0.1;
        for (int c = 0; c < 3; ++c) {
            double v = light.gain[c] * fields.albedo[static_cast<std::size_t>(c) * plane + p] * shade;
            v = v < 0 ? 0 : (v > 1 ? 1 : v);
            st.set(static_cast<std::int64_t>(c) * static_cast<std::int64_t>(plane) + static_cast<std::int64_t>(p), v);
        }
    }
    return out;
}

Manifest synth_generate(const std::string& out_root, std::uint64_t seed, int n_scenes, int size) {
    if (size % 16 != 0)
        throw std::invalid_argument("synthetic scene size must be divisible by 16, got " +
                                    std::to_string(size));
    if (n_scenes < 1) throw std::invalid_argument("n_scenes must be >= 1");

    fs::create_directories(out_root);
    Manifest m;
    m.root = out_root;
    m.split = fs::path(out_root).filename().string();
    for (int i = 0; i < n_scenes; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04d", i);
        const fs::path dir = fs::path(out_root) / name;
        fs::create_directories(dir);
        const SceneFields fields = synth_scene_fields(scene_seed(seed, i), size);
        const std::string in_path = (dir / "N_6500.png").string();
        const std::string tgt_path = (dir / "E_4500.png").string();
        save_image(render_scene(fields, north_light()), in_path);
        save_image(render_scene(fields, east_light()), tgt_path);
        m.pairs.push_back({name, in_path, tgt_path});
    }
    return m;
}

Tensor resize_half(const Tensor& image) { return downsample_avg2x(image); }

} // namespace relight
