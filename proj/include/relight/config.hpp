#pragma once

#include "relight/net.hpp"
#include "relight/trainer.hpp"

#include <stdexcept>
#include <string>

namespace relight {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Everything a command needs, resolved from defaults plus an optional
/// `key = value` config file.
struct CliConfig {
    NetConfig net;
    TrainConfig train;
    std::string data_root;
    std::string out_dir = "out";
    int checkpoint_every = 50;  // epochs between checkpoints; 0 = final only
    std::string input_tag = "N_6500";
    std::string target_tag = "E_4500";
};

/// Parses flat `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Unknown keys and malformed values throw ConfigError with the
/// line number.
CliConfig parse_config_text(const std::string& text);

CliConfig load_config(const std::string& path);

/// Every key with its resolved value, one `key = value` line each, in a
/// fixed order. Feeding the output back through parse_config_text
/// reproduces the config.
std::string effective_config(const CliConfig& cfg);

} // namespace relight
