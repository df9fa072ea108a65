#include "CLI11.hpp"

#include "relight/config.hpp"
#include "relight/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace relight;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.8g", v);
    return buf;
}

int cmd_synth(std::uint64_t seed, int scenes, int size, const std::string& out) {
    std::printf("command = synth\nseed = %llu\nscenes = %d\nsize = %d\nout = %s\n",
                static_cast<unsigned long long>(seed), scenes, size, out.c_str());
    const Manifest m = synth_generate(out, seed, scenes, size);
    std::printf("wrote %zu scene pairs under %s\n", m.pairs.size(), m.root.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_override,
              const std::string& out_override) {
    CliConfig cfg = config_path.empty() ? CliConfig{} : load_config(config_path);
    if (!data_override.empty()) cfg.data_root = data_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (cfg.data_root.empty())
        throw ConfigError("data_root is required (config key data_root or --data)");
    std::printf("command = train\n%s", effective_config(cfg).c_str());

    const Manifest manifest = scan_dataset(cfg.data_root, cfg.input_tag, cfg.target_tag);
    std::printf("dataset: %zu pairs (%d incomplete scenes skipped)\n", manifest.pairs.size(),
                manifest.skipped);
    fs::create_directories(cfg.out_dir);
    const fs::path log_path = fs::path(cfg.out_dir) / "train.log";
    std::ofstream log(log_path);
    if (!log) throw DataError("cannot write " + log_path.string());

    const StepLogger logger = [&](const StepRecord& r) {
        std::ostringstream os;
        os << r.step << '\t' << r.stage << '\t' << fmt(r.lr) << '\t' << fmt(r.loss);
        if (r.breakdown)
            os << "\tl1=" << fmt(r.breakdown->l1) << "\tssim=" << fmt(r.breakdown->ssim)
               << "\tperceptual=" << fmt(r.breakdown->perceptual)
               << "\ttv=" << fmt(r.breakdown->tv);
        os << '\n';
        log << os.str();
        std::fputs(os.str().c_str(), stdout);
    };
    const int epochs1 = static_cast<int>(
        std::ceil(cfg.train.stage1_fraction * static_cast<double>(cfg.train.epochs_total)));
    const EpochHook hook = [&](const Model& model, int epoch, std::int64_t steps_done) {
        if (cfg.checkpoint_every <= 0 || epoch % cfg.checkpoint_every != 0) return;
        Checkpoint ck;
        ck.config = model.config;
        ck.params = model.params;
        ck.global_step = static_cast<std::uint64_t>(steps_done);
        ck.stage_index = epoch <= epochs1 ? 1 : 2;
        char name[48];
        std::snprintf(name, sizeof name, "epoch_%06d.ckpt", epoch);
        checkpoint_save((fs::path(cfg.out_dir) / name).string(), ck);
    };

    const Checkpoint final_ck = train_two_stage(cfg.net, cfg.train, manifest, logger, hook);
    const std::string final_path = (fs::path(cfg.out_dir) / "final.ckpt").string();
    checkpoint_save(final_path, final_ck);
    log.flush();
    std::printf("trained %llu steps; final checkpoint: %s\n",
                static_cast<unsigned long long>(final_ck.global_step), final_path.c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_root,
             const std::string& input_tag, const std::string& target_tag) {
    std::printf("command = eval\nckpt = %s\ndata = %s\ninput_tag = %s\ntarget_tag = %s\n",
                ckpt_path.c_str(), data_root.c_str(), input_tag.c_str(), target_tag.c_str());
    const Checkpoint ck = checkpoint_load(ckpt_path);
    const Model model{ck.config, ck.params};
    const Manifest manifest = scan_dataset(data_root, input_tag, target_tag);
    const MetricsReport report = evaluate(model, manifest);
    std::fputs(report.table().c_str(), stdout);
    std::printf("mean_psnr = %.6f\nmean_ssim = %.6f\n", report.mean_psnr(), report.mean_ssim());
    return 0;
}

void infer_one(const Model& model, const fs::path& in_path, const fs::path& out_path) {
    const Tensor input = load_image(in_path.string());
    const Shape s = input.shape();
    if (s.h % 16 != 0 || s.w % 16 != 0)
        throw DataError("image dimensions must be divisible by 16, got " + std::to_string(s.w) +
                        "x" + std::to_string(s.h) + " in " + in_path.string());
    const Tensor pred = net_forward(model.config, model.params, input).out;
    save_image(pred, out_path.string());
    std::printf("%s -> %s\n", in_path.string().c_str(), out_path.string().c_str());
}

int cmd_infer(const std::string& ckpt_path, const std::string& in, const std::string& out) {
    std::printf("command = infer\nckpt = %s\nin = %s\nout = %s\n", ckpt_path.c_str(), in.c_str(),
                out.c_str());
    const Checkpoint ck = checkpoint_load(ckpt_path);
    const Model model{ck.config, ck.params};

    if (fs::is_directory(in)) {
        std::vector<fs::path> inputs;
        for (const auto& e : fs::directory_iterator(in))
            if (e.path().extension() == ".png") inputs.push_back(e.path());
        std::sort(inputs.begin(), inputs.end());
        if (inputs.empty()) throw DataError("no .png files under " + in);
        fs::create_directories(out);
        for (const fs::path& p : inputs) infer_one(model, p, fs::path(out) / p.filename());
    } else {
        if (!fs::exists(in)) throw FileMissingError("no such input: " + in);
        fs::path out_path(out);
        if (fs::is_directory(out_path)) out_path /= fs::path(in).filename();
        else if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
        infer_one(model, in, out_path);
    }
    return 0;
}

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

int cmd_bench(const std::string& ckpt_path, int size, int repeats) {
    NetConfig base;
    if (!ckpt_path.empty()) base = checkpoint_load(ckpt_path).config;
    std::printf("command = bench\nsize = %d\nrepeats = %d\nbase_channels = %d\n", size, repeats,
                base.base_channels);
    if (size % 16 != 0)
        throw std::invalid_argument("bench size must be divisible by 16, got " +
                                    std::to_string(size));
    if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");

    const Tensor input = Tensor::uniform({1, 3, size, size}, 0, 1, 42);
    auto time_config = [&](int stacks) {
        NetConfig cfg = base;
        cfg.stacks = stacks;
        const ParamMap params = init_params(cfg);
        for (int i = 0; i < 3; ++i) net_forward(cfg, params, input); // warmup
        std::vector<double> times;
        for (int i = 0; i < repeats; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            net_forward(cfg, params, input);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        return median(times);
    };

    const double single = time_config(1);
    const double stacked = time_config(2);
    std::printf("single_median_s = %.6f\nstacked_median_s = %.6f\nratio = %.4f\n", single,
                stacked, stacked / single);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"stacked multi-scale hierarchical network for one-to-one image relighting"};
    app.require_subcommand(1);

    std::uint64_t synth_seed = 0;
    int synth_scenes = 4;
    int synth_size = 64;
    std::string synth_out;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic relighting dataset");
    synth->add_option("--seed", synth_seed, "dataset seed");
    synth->add_option("--scenes", synth_scenes, "number of scenes");
    synth->add_option("--size", synth_size, "image side length (divisible by 16)");
    synth->add_option("--out", synth_out, "output root directory")->required();

    std::string train_config, train_data, train_out;
    CLI::App* train = app.add_subcommand("train", "run two-stage training");
    train->add_option("--config", train_config, "config file (key = value lines)");
    train->add_option("--data", train_data, "dataset split directory (overrides data_root)");
    train->add_option("--out", train_out, "output directory (overrides out_dir)");

    std::string eval_ckpt, eval_data, eval_input_tag = "N_6500", eval_target_tag = "E_4500";
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--data", eval_data, "dataset split directory")->required();
    eval->add_option("--input-tag", eval_input_tag, "input image tag");
    eval->add_option("--target-tag", eval_target_tag, "target image tag");

    std::string infer_ckpt, infer_in, infer_out;
    CLI::App* infer = app.add_subcommand("infer", "relight a PNG file or a directory of PNGs");
    infer->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
    infer->add_option("--in", infer_in, "input PNG or directory")->required();
    infer->add_option("--out", infer_out, "output PNG or directory")->required();

    std::string bench_ckpt;
    int bench_size = 256;
    int bench_repeats = 5;
    CLI::App* bench = app.add_subcommand("bench", "time single vs stacked forward passes");
    bench->add_option("--ckpt", bench_ckpt, "checkpoint supplying the network config");
    bench->add_option("--size", bench_size, "input side length (divisible by 16)");
    bench->add_option("--repeats", bench_repeats, "timed repetitions (after 3 warmups)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (const char* threads = std::getenv("RELIGHT_THREADS")) {
        const int n = std::atoi(threads);
        if (n >= 1) set_num_threads(n);
    }

    try {
        if (app.got_subcommand(synth)) return cmd_synth(synth_seed, synth_scenes, synth_size, synth_out);
        if (app.got_subcommand(train)) return cmd_train(train_config, train_data, train_out);
        if (app.got_subcommand(eval)) return cmd_eval(eval_ckpt, eval_data, eval_input_tag, eval_target_tag);
        if (app.got_subcommand(infer)) return cmd_infer(infer_ckpt, infer_in, infer_out);
        if (app.got_subcommand(bench)) return cmd_bench(bench_ckpt, bench_size, bench_repeats);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical abort: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
