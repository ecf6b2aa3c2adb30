// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/data.hpp"
#include "ttmoe/router.hpp"
#include "ttmoe/train.hpp"

#include <map>
#include <string>
#include <vector>

namespace ttmoe {

// Plain "key = value" preset files with [section] headers and '#' comments.
// Keys are addressed as "section.key".
class ConfigFile {
public:
    static ConfigFile parse_file(const std::string& path);
    static ConfigFile parse_string(const std::string& text, const std::string& origin);

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    std::string get_str(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::size_t get_size(const std::string& key, std::size_t fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    std::vector<std::size_t> get_size_list(const std::string& key,
                                           std::vector<std::size_t> fallback) const;

    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
    std::string origin_;
};

// Section readers; absent keys keep the struct defaults.
ToyConfig toy_config_from(const ConfigFile& cfg);        // [model]
TrainConfig train_config_from(const ConfigFile& cfg);    // [train]
RouterTrainConfig router_config_from(const ConfigFile& cfg); // [router]
GenOptions gen_options_from(const ConfigFile& cfg);      // [tasks]

// [mixed] section: task dataset paths plus equal-sampling controls.
struct MixedConfig {
    std::vector<std::string> task_paths;
    std::size_t per_task = 0; // 0 = auto (smallest train split)
    std::uint64_t seed = 0;
};
MixedConfig mixed_config_from(const ConfigFile& cfg);

} // namespace ttmoe
