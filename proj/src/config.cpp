// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace ttmoe {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace

ConfigFile ConfigFile::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
    ConfigFile cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(origin + ":" + std::to_string(line_no) +
                                  ": malformed section header '" + line + "'");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
        }
        cfg.entries_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
}

std::string ConfigFile::get_str(const std::string& key, const std::string& fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

double ConfigFile::get_double(const std::string& key, double fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
        std::size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(origin_ + ": key '" + key + "' has non-numeric value '" +
                          it->second + "'");
    }
}

std::size_t ConfigFile::get_size(const std::string& key, std::size_t fallback) const {
    const double v = get_double(key, double(fallback));
    if (v < 0 || v != double(std::size_t(v))) {
        throw ConfigError(origin_ + ": key '" + key + "' must be a non-negative integer");
    }
    return std::size_t(v);
}

std::uint64_t ConfigFile::get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(origin_ + ": key '" + key + "' has non-integer value '" +
                          it->second + "'");
    }
}

std::vector<std::size_t>
ConfigFile::get_size_list(const std::string& key,
                          std::vector<std::size_t> fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::vector<std::size_t> out;
    std::istringstream ss(it->second);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (part.empty()) continue;
        try {
            out.push_back(std::stoull(part));
        } catch (const std::exception&) {
            throw ConfigError(origin_ + ": key '" + key + "' has non-integer entry '" +
                              part + "'");
        }
    }
    if (out.empty()) {
        throw ConfigError(origin_ + ": key '" + key + "' is an empty list");
    }
    return out;
}

ToyConfig toy_config_from(const ConfigFile& cfg) {
    ToyConfig c;
    c.vocab = cfg.get_size("model.vocab", c.vocab);
    c.d_model = cfg.get_size("model.d_model", c.d_model);
    c.d_v = cfg.get_size("model.d_v", c.d_v);
    c.n_layers = cfg.get_size("model.n_layers", c.n_layers);
    c.n_heads = cfg.get_size("model.n_heads", c.n_heads);
    c.max_seq = cfg.get_size("model.max_seq", c.max_seq);
    c.d_ff = cfg.get_size("model.d_ff", c.d_ff);
    c.seed = cfg.get_u64("model.seed", c.seed);
    return c;
}

TrainConfig train_config_from(const ConfigFile& cfg) {
    const std::string kind = cfg.get_str("train.adapter", "tt");
    TrainConfig c;
    if (kind == "tt") {
        c = TrainConfig::defaults_for(AdapterKind::Tt);
    } else if (kind == "lora") {
        c = TrainConfig::defaults_for(AdapterKind::Lora);
    } else {
        throw ConfigError("train.adapter must be 'tt' or 'lora', got '" + kind + "'");
    }
    c.learning_rate = cfg.get_double("train.learning_rate", c.learning_rate);
    c.batch_size = cfg.get_size("train.batch_size", c.batch_size);
    c.max_epochs = cfg.get_size("train.max_epochs", c.max_epochs);
    c.patience = cfg.get_size("train.patience", c.patience);
    c.seed = cfg.get_u64("train.seed", c.seed);
    c.alpha = cfg.get_double("train.alpha", c.alpha);
    c.rank = cfg.get_size("train.rank", c.rank);
    c.init_std = cfg.get_double("train.init_std", c.init_std);
    c.clip_norm = cfg.get_double("train.clip_norm", c.clip_norm);
    c.q_in_factors = cfg.get_size_list("train.q_in_factors", c.q_in_factors);
    c.q_out_factors = cfg.get_size_list("train.q_out_factors", c.q_out_factors);
    c.v_in_factors = cfg.get_size_list("train.v_in_factors", c.v_in_factors);
    c.v_out_factors = cfg.get_size_list("train.v_out_factors", c.v_out_factors);
    const std::string opt = cfg.get_str("train.optimizer", "adam");
    if (opt == "adam") {
        c.optimizer = OptimizerKind::AdaptiveMoment;
    } else if (opt == "sgd") {
        c.optimizer = OptimizerKind::PlainSgd;
    } else {
        throw ConfigError("train.optimizer must be 'adam' or 'sgd', got '" + opt + "'");
    }
    return c;
}

RouterTrainConfig router_config_from(const ConfigFile& cfg) {
    RouterTrainConfig c;
    c.learning_rate = cfg.get_double("router.learning_rate", c.learning_rate);
    c.batch_size = cfg.get_size("router.batch_size", c.batch_size);
    c.max_epochs = cfg.get_size("router.max_epochs", c.max_epochs);
    c.patience = cfg.get_size("router.patience", c.patience);
    c.lambda = cfg.get_double("router.lambda", c.lambda);
    c.seed = cfg.get_u64("router.seed", c.seed);
    return c;
}

GenOptions gen_options_from(const ConfigFile& cfg) {
    GenOptions g;
    g.n_per_task = cfg.get_size("tasks.n_per_task", g.n_per_task);
    g.seq_len = cfg.get_size("tasks.seq_len", g.seq_len);
    g.num_classes = cfg.get_size("tasks.num_classes", g.num_classes);
    g.val_fraction = cfg.get_double("tasks.val_fraction", g.val_fraction);
    g.probe_threshold = cfg.get_double("tasks.probe_threshold", g.probe_threshold);
    g.max_regen = cfg.get_size("tasks.max_regen", g.max_regen);
    return g;
}

MixedConfig mixed_config_from(const ConfigFile& cfg) {
    MixedConfig m;
    const std::string paths = cfg.get_str("mixed.tasks", "");
    std::istringstream ss(paths);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (!part.empty()) m.task_paths.push_back(part);
    }
    m.per_task = cfg.get_size("mixed.per_task", 0);
    m.seed = cfg.get_u64("mixed.seed", 0);
    return m;
}

} // namespace ttmoe
