// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/data.hpp"
#include "ttmoe/model.hpp"
#include "ttmoe/router.hpp"

#include <string>
#include <vector>

namespace ttmoe {

// All binary formats: little-endian, 4-byte magic, version byte, precision
// byte (4 = float32). Loads refuse version, precision or config-hash
// mismatches rather than converting silently.

void save_expert(const std::string& path, const ExpertAdapter<float>& adapter);
ExpertAdapter<float> load_expert(const std::string& path, const ToyConfig& expected);

struct RouterCheckpoint {
    RouterParams params;
    double lambda = 1.0;
    std::vector<std::string> expert_names; // index == expert id
    std::uint64_t config_hash = 0;
};

void save_router(const std::string& path, const RouterCheckpoint& ckpt);
RouterCheckpoint load_router(const std::string& path, const ToyConfig& expected);

void save_dataset(const std::string& path, const TaskDataset& task);
TaskDataset load_dataset(const std::string& path);

// Bank manifest: a JSON file listing expert checkpoint files with their
// config hashes; expert paths are resolved relative to the manifest.
struct BankManifest {
    std::uint64_t config_hash = 0;
    struct Entry {
        std::uint32_t id = 0;
        std::string task;
        std::string path;
        std::uint64_t config_hash = 0;
    };
    std::vector<Entry> experts;
};

void save_bank_manifest(const std::string& path, const BankManifest& manifest);
BankManifest load_bank_manifest(const std::string& path);

// Loads every expert named by the manifest and assembles the bank.
ExpertBank load_bank(const std::string& manifest_path, const ToyConfig& expected);

} // namespace ttmoe
