#pragma once

// Training hyperparameters with defaults matching the published schedule,
// plus a flat `key = value` config-file reader.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>

#include "cma/attention.hpp"
#include "cma/error.hpp"

namespace cma {

struct TrainConfig {
    double lambda_xe = 0.2;
    double lambda_rl = 0.1;
    std::size_t batch_size = 50;
    std::size_t xe_epochs = 30;
    std::size_t scst_epochs = 15;
    double xe_lr = 2e-4;          // annealed by 0.8 every 3 epochs
    double scst_lr = 2e-5;        // annealed by 0.5 on a 3-evaluation CIDEr-D plateau
    double label_smoothing = 0.2;
    double ss_increment = 0.05;   // scheduled sampling, per 5 epochs
    std::size_t ss_every = 5;
    double ss_cap = 0.5;
    double clip_lo = -0.1;
    double clip_hi = 0.1;
    std::uint64_t seed = 1;

    // Model dimensions (desk-scale defaults).
    std::size_t d_r = 64;
    std::size_t d_d = 64;
    std::size_t heads = 4;
    std::size_t d_c = 16;
    std::size_t d_o = 64;
    CmaMode mode = CmaMode::kCmaD;
    bool residual_visual = true;
    bool residual_textual = false;

    void validate() const {
        if (lambda_xe < 0.0 || lambda_rl < 0.0)
            throw ContractError("config: lambda coefficients must be >= 0");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw ContractError("config: label_smoothing must lie in [0, 1)");
        if (ss_cap < 0.0 || ss_cap > 1.0) throw ContractError("config: ss_cap must lie in [0, 1]");
        if (batch_size == 0) throw ContractError("config: batch_size must be positive");
        if (!(clip_lo < clip_hi)) throw ContractError("config: clip range must satisfy lo < hi");
    }
};

inline TrainConfig parse_config(std::istream& is) {
    TrainConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            std::istringstream check(line);
            std::string leftover;
            if (check >> leftover)
                throw ContractError("config line " + std::to_string(lineno) + ": expected key = value");
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ContractError("config line " + std::to_string(lineno) + ": empty key or value");
        try {
            if (key == "lambda_xe") cfg.lambda_xe = std::stod(value);
            else if (key == "lambda_rl") cfg.lambda_rl = std::stod(value);
            else if (key == "batch_size") cfg.batch_size = std::stoul(value);
            else if (key == "xe_epochs") cfg.xe_epochs = std::stoul(value);
            else if (key == "scst_epochs") cfg.scst_epochs = std::stoul(value);
            else if (key == "xe_lr") cfg.xe_lr = std::stod(value);
            else if (key == "scst_lr") cfg.scst_lr = std::stod(value);
            else if (key == "label_smoothing") cfg.label_smoothing = std::stod(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "d_r") cfg.d_r = std::stoul(value);
            else if (key == "d_d") cfg.d_d = std::stoul(value);
            else if (key == "heads") cfg.heads = std::stoul(value);
            else if (key == "d_c") cfg.d_c = std::stoul(value);
            else if (key == "d_o") cfg.d_o = std::stoul(value);
            else if (key == "mode") cfg.mode = cma_mode_from(value);
            else if (key == "residual_visual") cfg.residual_visual = value == "true" || value == "1";
            else if (key == "residual_textual") cfg.residual_textual = value == "true" || value == "1";
            else throw ContractError("config line " + std::to_string(lineno) + ": unknown key " + key);
        } catch (const std::invalid_argument&) {
            throw ContractError("config line " + std::to_string(lineno) + ": bad value for " + key);
        }
    }
    cfg.validate();
    return cfg;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ContractError("config: cannot open " + path);
    return parse_config(is);
}

inline std::string config_to_string(const TrainConfig& c) {
    std::ostringstream os;
    os << "lambda_xe = " << c.lambda_xe << "\n"
       << "lambda_rl = " << c.lambda_rl << "\n"
       << "batch_size = " << c.batch_size << "\n"
       << "xe_epochs = " << c.xe_epochs << "\n"
       << "scst_epochs = " << c.scst_epochs << "\n"
       << "xe_lr = " << c.xe_lr << "\n"
       << "scst_lr = " << c.scst_lr << "\n"
       << "label_smoothing = " << c.label_smoothing << "\n"
       << "seed = " << c.seed << "\n"
       << "d_r = " << c.d_r << "\n"
       << "d_d = " << c.d_d << "\n"
       << "heads = " << c.heads << "\n"
       << "d_c = " << c.d_c << "\n"
       << "d_o = " << c.d_o << "\n"
       << "mode = " << to_string(c.mode) << "\n"
       << "residual_visual = " << (c.residual_visual ? "true" : "false") << "\n"
       << "residual_textual = " << (c.residual_textual ? "true" : "false") << "\n";
    return os.str();
}

}  // namespace cma
