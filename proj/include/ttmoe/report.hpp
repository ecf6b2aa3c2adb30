// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/common.hpp"

#include <json.hpp>

#include <fstream>
#include <string>

namespace ttmoe {

// Append-only JSON-lines report stream. Every record carries a schema-version
// field so downstream plotting scripts can evolve safely.
class ReportWriter {
public:
    ReportWriter() = default;

    explicit ReportWriter(const std::string& path) {
        if (path.empty()) return;
        out_.open(path, std::ios::app);
        if (!out_) throw FormatError("cannot open report file '" + path + "'");
    }

    bool active() const { return out_.is_open(); }

    void write(nlohmann::json record) {
        if (!out_.is_open()) return;
        if (!record.contains("schema_version")) record["schema_version"] = 1;
        out_ << record.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

} // namespace ttmoe
