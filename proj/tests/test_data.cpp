#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "relight/data.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace relight;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("relight_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<char> file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_gray_png(const fs::path& path, int size) {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    REQUIRE(f != nullptr);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    std::vector<unsigned char> row(static_cast<std::size_t>(size), 100);
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(size), static_cast<png_uint_32>(size), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int i = 0; i < size; ++i) png_write_row(png, row.data());
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
}

} // namespace

TEST_CASE("save/load round trip quantizes 0.5 down to 127/255") {
    const fs::path dir = fresh_dir("roundtrip");
    const fs::path p = dir / "half.png";

    save_image(Tensor::full({1, 3, 16, 16}, 0.5), p.string());
    const Tensor back = load_image(p.string());
    REQUIRE(back.shape() == Shape{1, 3, 16, 16});
    for (double v : back.values()) CHECK(std::abs(v - 127.0 / 255.0) < 1e-7);
}

TEST_CASE("second save/load round trip is an exact fixpoint") {
    const fs::path dir = fresh_dir("fixpoint");
    const fs::path p0 = dir / "orig.png";
    const fs::path p1 = dir / "once.png";
    const fs::path p2 = dir / "twice.png";

    Tensor img = Tensor::uniform({1, 3, 24, 24}, 0.0, 1.0, 99);
    save_image(img, p0.string());
    const Tensor a = load_image(p0.string());
    save_image(a, p1.string());
    const Tensor b = load_image(p1.string());
    save_image(b, p2.string());
    const Tensor c = load_image(p2.string());

    const auto bv = b.values(), cv = c.values();
    REQUIRE(bv.size() == cv.size());
    for (std::size_t i = 0; i < bv.size(); ++i) REQUIRE(bv[i] == cv[i]);
    CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("load rejects values scaled outside 0..255 range never occur") {
    const fs::path dir = fresh_dir("clamp");
    const fs::path p = dir / "over.png";
    Tensor img = Tensor::full({1, 3, 8, 8}, 1.7);
    save_image(img, p.string());
    for (double v : load_image(p.string()).values()) CHECK(v == 1.0);

    const fs::path q = dir / "under.png";
    save_image(Tensor::full({1, 3, 8, 8}, -0.3), q.string());
    for (double v : load_image(q.string()).values()) CHECK(v == 0.0);
}

TEST_CASE("distinct error kinds: missing file, non-RGB, decode failure") {
    const fs::path dir = fresh_dir("errors");

    CHECK_THROWS_AS(load_image((dir / "nope.png").string()), FileMissingError);

    const fs::path gray = dir / "gray.png";
    write_gray_png(gray, 16);
    CHECK_THROWS_AS(load_image(gray.string()), FormatError);

    const fs::path junk = dir / "junk.png";
    std::ofstream(junk) << "this is definitely not a png";
    CHECK_THROWS_AS(load_image(junk.string()), DecodeError);

    CHECK_THROWS_AS(save_image(Tensor::zeros({2, 3, 8, 8}), (dir / "x.png").string()),
                    std::invalid_argument);
    CHECK_THROWS_AS(save_image(Tensor::zeros({1, 1, 8, 8}), (dir / "x.png").string()),
                    std::invalid_argument);
}

TEST_CASE("read_png_dims reports header dimensions without full decode") {
    const fs::path dir = fresh_dir("dims");
    const fs::path p = dir / "img.png";
    save_image(Tensor::zeros({1, 3, 12, 20}), p.string());
    const PngDims d = read_png_dims(p.string());
    CHECK(d.height == 12);
    CHECK(d.width == 20);
}

TEST_CASE("scan_dataset orders pairs lexicographically and counts skipped scenes") {
    const fs::path root = fresh_dir("scan") / "train";
    const Tensor img = Tensor::full({1, 3, 16, 16}, 0.25);
    // created out of order on purpose; manifest order must not depend on it
    for (const char* scene : {"scene_b", "scene_a", "scene_c"}) {
        fs::create_directories(root / scene);
        save_image(img, (root / scene / "N_6500.png").string());
    }
    save_image(img, (root / "scene_a" / "E_4500.png").string());
    save_image(img, (root / "scene_b" / "E_4500.png").string());
    // scene_c has no target and must be skipped

    const Manifest m = scan_dataset(root.string());
    CHECK(m.split == "train");
    CHECK(m.root == root.string());
    CHECK(m.skipped == 1);
    REQUIRE(m.pairs.size() == 2);
    CHECK(m.pairs[0].scene_id == "scene_a");
    CHECK(m.pairs[1].scene_id == "scene_b");
    CHECK(fs::path(m.pairs[0].input_path).filename() == "N_6500.png");
    CHECK(fs::path(m.pairs[0].target_path).filename() == "E_4500.png");

    const std::string csv = m.to_csv();
    CHECK(csv.rfind("scene_id,input_path,target_path\n", 0) == 0);
    CHECK(csv.find("scene_a," + m.pairs[0].input_path + "," + m.pairs[0].target_path + "\n") !=
          std::string::npos);
}

TEST_CASE("scan_dataset error cases") {
    const fs::path base = fresh_dir("scan_err");

    CHECK_THROWS_AS(scan_dataset((base / "missing_root").string()), FileMissingError);

    fs::create_directories(base / "empty");
    CHECK_THROWS_AS(scan_dataset((base / "empty").string()), DataError);

    // only-incomplete scenes count as zero pairs
    fs::create_directories(base / "incomplete" / "scene_0000");
    save_image(Tensor::zeros({1, 3, 16, 16}),
               (base / "incomplete" / "scene_0000" / "N_6500.png").string());
    CHECK_THROWS_AS(scan_dataset((base / "incomplete").string()), DataError);

    fs::create_directories(base / "mismatch" / "scene_0000");
    save_image(Tensor::zeros({1, 3, 16, 16}),
               (base / "mismatch" / "scene_0000" / "N_6500.png").string());
    save_image(Tensor::zeros({1, 3, 32, 32}),
               (base / "mismatch" / "scene_0000" / "E_4500.png").string());
    CHECK_THROWS_AS(scan_dataset((base / "mismatch").string()), DataError);
}

TEST_CASE("make_batch stacks manifest rows in index order") {
    const fs::path root = fresh_dir("batch") / "train";
    for (int i = 0; i < 3; ++i) {
        const std::string scene = "scene_000" + std::to_string(i);
        fs::create_directories(root / scene);
        save_image(Tensor::full({1, 3, 16, 16}, 0.1 * (i + 1)), (root / scene / "N_6500.png").string());
        save_image(Tensor::full({1, 3, 16, 16}, 0.1 * (i + 1) + 0.05),
                   (root / scene / "E_4500.png").string());
    }
    const Manifest m = scan_dataset(root.string());
    const std::size_t idx[] = {2, 0};
    const Batch b = make_batch(m, idx);
    REQUIRE(b.input.shape() == Shape{2, 3, 16, 16});
    REQUIRE(b.target.shape() == Shape{2, 3, 16, 16});

    const Tensor in2 = load_image(m.pairs[2].input_path);
    const Tensor tgt0 = load_image(m.pairs[0].target_path);
    CHECK(b.input.at(0) == in2.at(0));
    const std::int64_t off = (1 * 16 + 3) * 16 + 3;
    CHECK(b.target.at(3 * 16 * 16 + off) == tgt0.at(off));

    CHECK_THROWS_AS(make_batch(m, std::span<const std::size_t>{}), std::invalid_argument);
    const std::size_t bad[] = {7};
    CHECK_THROWS_AS(make_batch(m, bad), std::out_of_range);
}

TEST_CASE("synthetic generator writes two PNGs per scene, deterministically") {
    const fs::path root_a = fresh_dir("synth_a");
    const fs::path root_b = fresh_dir("synth_b");

    const Manifest ma = synth_generate(root_a.string(), 7, 4, 32);
    REQUIRE(ma.pairs.size() == 4);
    int png_count = 0;
    for (const auto& e : fs::recursive_directory_iterator(root_a))
        if (e.path().extension() == ".png") ++png_count;
    CHECK(png_count == 8);

    const Manifest mb = synth_generate(root_b.string(), 7, 4, 32);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(file_bytes(ma.pairs[i].input_path) == file_bytes(mb.pairs[i].input_path));
        CHECK(file_bytes(ma.pairs[i].target_path) == file_bytes(mb.pairs[i].target_path));
    }

    // a different seed must actually change the images
    const fs::path root_c = fresh_dir("synth_c");
    const Manifest mc = synth_generate(root_c.string(), 8, 1, 32);
    CHECK(file_bytes(ma.pairs[0].input_path) != file_bytes(mc.pairs[0].input_path));

    CHECK_THROWS_AS(synth_generate((root_a / "bad").string(), 7, 4, 40), std::invalid_argument);
    CHECK_THROWS_AS(synth_generate((root_a / "bad").string(), 7, 0, 32), std::invalid_argument);

    // generated output rescans cleanly
    const Manifest rescanned = scan_dataset(root_a.string());
    CHECK(rescanned.pairs.size() == 4);
    CHECK(rescanned.skipped == 0);
}

TEST_CASE("generated pixel values stay inside [0,1]") {
    for (int i = 0; i < 4; ++i) {
        const SceneFields f = synth_scene_fields(scene_seed(123, i), 32);
        for (const Tensor& img : {render_scene(f, north_light()), render_scene(f, east_light())})
            for (double v : img.values()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
    }
}

TEST_CASE("surface facing the light with albedo 1 shades to exactly 1.0") {
    const LightSpec l = north_light();
    SceneFields f;
    f.size = 16;
    const std::size_t plane = 16 * 16;
    f.albedo.assign(3 * plane, 1.0);
    f.nx.assign(plane, l.lx);
    f.ny.assign(plane, l.ly);
    f.nz.assign(plane, l.lz);
    // n.l = 1, so shade = 1.0 + 0.1 ambient, clamped back to 1.0
    for (double v : render_scene(f, l).values()) CHECK(v == 1.0);
}

TEST_CASE("input and target of a scene share albedo and geometry") {
    const fs::path root = fresh_dir("shared");
    const Manifest m = synth_generate(root.string(), 42, 2, 32);

    for (int i = 0; i < 2; ++i) {
        const SceneFields f = synth_scene_fields(scene_seed(42, i), 32);
        const Tensor in = load_image(m.pairs[static_cast<std::size_t>(i)].input_path);
        const Tensor tgt = load_image(m.pairs[static_cast<std::size_t>(i)].target_path);
        const auto iv = in.values(), rv = render_scene(f, north_light()).values();
        const auto tv = tgt.values(), sv = render_scene(f, east_light()).values();
        for (std::size_t k = 0; k < iv.size(); ++k) {
            CHECK(std::abs(iv[k] - rv[k]) <= 0.5 / 255.0 + 1e-6);
            CHECK(std::abs(tv[k] - sv[k]) <= 0.5 / 255.0 + 1e-6);
        }
    }

    // the two renders differ only through the light: swapping specs swaps images
    const SceneFields f = synth_scene_fields(scene_seed(42, 0), 32);
    const auto north = render_scene(f, north_light()).values();
    const auto east = render_scene(f, east_light()).values();
    bool any_diff = false;
    for (std::size_t k = 0; k < north.size(); ++k) any_diff |= north[k] != east[k];
    CHECK(any_diff);
}

TEST_CASE("scene_seed decorrelates neighboring scene indices") {
    CHECK(scene_seed(5, 0) == scene_seed(5, 0));
    CHECK(scene_seed(5, 0) != scene_seed(5, 1));
    CHECK(scene_seed(5, 0) != scene_seed(6, 0));
}

TEST_CASE("resize_half mean-pools 2x2 blocks") {
    const std::vector<double> vals{0, 2, 4, 6};
    Tensor t = Tensor::from_values({1, 1, 2, 2}, vals);
    CHECK(resize_half(t).item() == 3.0);

    const Tensor big = resize_half(Tensor::full({1, 3, 1024, 1024}, 0.25));
    CHECK(big.shape() == Shape{1, 3, 512, 512});
    CHECK(big.at(big.numel() - 1) == 0.25);

    CHECK_THROWS_AS(resize_half(Tensor::zeros({1, 3, 15, 16})), std::invalid_argument);
}
