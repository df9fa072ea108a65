#include "relight/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace relight {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& v, int line) {
    std::size_t used = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line) + ": expected an integer, got '" + v + "'");
    }
    if (used != v.size())
        throw ConfigError("line " + std::to_string(line) + ": expected an integer, got '" + v + "'");
    return x;
}

double parse_double(const std::string& v, int line) {
    std::size_t used = 0;
    double x = 0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line) + ": expected a number, got '" + v + "'");
    }
    if (used != v.size())
        throw ConfigError("line " + std::to_string(line) + ": expected a number, got '" + v + "'");
    return x;
}

bool parse_bool(const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("line " + std::to_string(line) + ": expected true/false, got '" + v + "'");
}

std::string fmt(double v) {
    char buf[64];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

} // namespace

CliConfig parse_config_text(const std::string& text) {
    CliConfig cfg;
    using Setter = std::function<void(const std::string&, int)>;
    const std::map<std::string, Setter> setters = {
        {"base_channels", [&](const std::string& v, int l) { cfg.net.base_channels = static_cast<int>(parse_int(v, l)); }},
        {"stacks", [&](const std::string& v, int l) { cfg.net.stacks = static_cast<int>(parse_int(v, l)); }},
        {"init_seed", [&](const std::string& v, int l) { cfg.net.init_seed = static_cast<std::uint64_t>(parse_int(v, l)); }},
        {"batch_size", [&](const std::string& v, int l) { cfg.train.batch_size = static_cast<int>(parse_int(v, l)); }},
        {"epochs", [&](const std::string& v, int l) { cfg.train.epochs_total = static_cast<int>(parse_int(v, l)); }},
        {"stage1_fraction", [&](const std::string& v, int l) { cfg.train.stage1_fraction = parse_double(v, l); }},
        {"lr_init", [&](const std::string& v, int l) { cfg.train.lr_init = parse_double(v, l); }},
        {"lr_final", [&](const std::string& v, int l) { cfg.train.lr_final = parse_double(v, l); }},
        {"adam_beta1", [&](const std::string& v, int l) { cfg.train.adam_beta1 = parse_double(v, l); }},
        {"adam_beta2", [&](const std::string& v, int l) { cfg.train.adam_beta2 = parse_double(v, l); }},
        {"adam_eps", [&](const std::string& v, int l) { cfg.train.adam_eps = parse_double(v, l); }},
        {"seed", [&](const std::string& v, int l) { cfg.train.seed = static_cast<std::uint64_t>(parse_int(v, l)); }},
        {"stage1_loss", [&](const std::string& v, int l) {
             try {
                 cfg.train.stage1_loss = loss_mode_from_string(v);
             } catch (const std::invalid_argument& e) {
                 throw ConfigError("line " + std::to_string(l) + ": " + e.what());
             }
         }},
        {"stage2_loss", [&](const std::string& v, int l) {
             try {
                 cfg.train.stage2_loss = loss_mode_from_string(v);
             } catch (const std::invalid_argument& e) {
                 throw ConfigError("line " + std::to_string(l) + ": " + e.what());
             }
         }},
        {"train_resize", [&](const std::string& v, int l) { cfg.train.train_resize = parse_bool(v, l); }},
        {"lambda_l1", [&](const std::string& v, int l) { cfg.train.weights.l1 = parse_double(v, l); }},
        {"lambda_ssim", [&](const std::string& v, int l) { cfg.train.weights.ssim = parse_double(v, l); }},
        {"lambda_perceptual", [&](const std::string& v, int l) { cfg.train.weights.perceptual = parse_double(v, l); }},
        {"lambda_tv", [&](const std::string& v, int l) { cfg.train.weights.tv = parse_double(v, l); }},
        {"sobel_mix", [&](const std::string& v, int l) { cfg.train.weights.sobel_mix = parse_double(v, l); }},
        {"data_root", [&](const std::string& v, int) { cfg.data_root = v; }},
        {"out_dir", [&](const std::string& v, int) { cfg.out_dir = v; }},
        {"checkpoint_every", [&](const std::string& v, int l) { cfg.checkpoint_every = static_cast<int>(parse_int(v, l)); }},
        {"input_tag", [&](const std::string& v, int) { cfg.input_tag = v; }},
        {"target_tag", [&](const std::string& v, int) { cfg.target_tag = v; }},
    };

    std::istringstream is(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                              line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end())
            throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        it->second(value, line_no);
    }
    return cfg;
}

CliConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return parse_config_text(text);
}

std::string effective_config(const CliConfig& cfg) {
    std::ostringstream os;
    os << "base_channels = " << cfg.net.base_channels << '\n';
    os << "stacks = " << cfg.net.stacks << '\n';
    os << "init_seed = " << cfg.net.init_seed << '\n';
    os << "batch_size = " << cfg.train.batch_size << '\n';
    os << "epochs = " << cfg.train.epochs_total << '\n';
    os << "stage1_fraction = " << fmt(cfg.train.stage1_fraction) << '\n';
    os << "lr_init = " << fmt(cfg.train.lr_init) << '\n';
    os << "lr_final = " << fmt(cfg.train.lr_final) << '\n';
    os << "adam_beta1 = " << fmt(cfg.train.adam_beta1) << '\n';
    os << "adam_beta2 = " << fmt(cfg.train.adam_beta2) << '\n';
    os << "adam_eps = " << fmt(cfg.train.adam_eps) << '\n';
    os << "seed = " << cfg.train.seed << '\n';
    os << "stage1_loss = " << to_string(cfg.train.stage1_loss) << '\n';
    os << "stage2_loss = " << to_string(cfg.train.stage2_loss) << '\n';
    os << "train_resize = " << (cfg.train.train_resize ? "true" : "false") << '\n';
    os << "lambda_l1 = " << fmt(cfg.train.weights.l1) << '\n';
    os << "lambda_ssim = " << fmt(cfg.train.weights.ssim) << '\n';
    os << "lambda_perceptual = " << fmt(cfg.train.weights.perceptual) << '\n';
    os << "lambda_tv = " << fmt(cfg.train.weights.tv) << '\n';
    os << "sobel_mix = " << fmt(cfg.train.weights.sobel_mix) << '\n';
    os << "data_root = " << cfg.data_root << '\n';
    os << "out_dir = " << cfg.out_dir << '\n';
    os << "checkpoint_every = " << cfg.checkpoint_every << '\n';
    os << "input_tag = " << cfg.input_tag << '\n';
    os << "target_tag = " << cfg.target_tag << '\n';
    return os.str();
}

} // namespace relight
