// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

namespace ttmoe {

namespace {

constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kPrecisionF32 = 4;

class ByteWriter {
public:
    explicit ByteWriter(const std::string& path)
        : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw FormatError("cannot open '" + path + "' for writing");
    }

    void magic(const char m[4]) { out_.write(m, 4); }
    void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(b, 4);
    }
    void u64(std::uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(b, 8);
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void floats(std::span<const float> v) {
        for (float x : v) f32(x);
    }
    void sizes(const std::vector<std::size_t>& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        for (std::size_t x : v) u32(static_cast<std::uint32_t>(x));
    }

    void close() {
        out_.close();
        if (!out_) throw FormatError("write failed while closing checkpoint");
    }

private:
    std::ofstream out_;
};

class ByteReader {
public:
    explicit ByteReader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open '" + path + "'");
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    void expect_magic(const char m[4], const char* kind) {
        if (pos_ + 4 > buf_.size() || std::memcmp(buf_.data() + pos_, m, 4) != 0) {
            throw FormatError("'" + path_ + "' is not a " + kind + " file");
        }
        pos_ += 4;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= std::uint32_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= std::uint64_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void floats(std::span<float> v) {
        for (float& x : v) x = f32();
    }
    std::vector<std::size_t> sizes() {
        const std::uint32_t n = u32();
        std::vector<std::size_t> v(n);
        for (auto& x : v) x = u32();
        return v;
    }
    void done() const {
        if (pos_ != buf_.size()) {
            throw FormatError("'" + path_ + "' has " +
                              std::to_string(buf_.size() - pos_) + " trailing bytes");
        }
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) {
            throw FormatError("'" + path_ + "' is truncated");
        }
    }

    std::string path_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

void check_version_precision(ByteReader& r, const std::string& path) {
    const std::uint8_t version = r.u8();
    if (version != kVersion) {
        throw FormatError("'" + path + "': unsupported version " +
                          std::to_string(version));
    }
    const std::uint8_t precision = r.u8();
    if (precision != kPrecisionF32) {
        throw FormatError("'" + path + "': precision " + std::to_string(precision) +
                          "-byte floats cannot load into the 32-bit runtime (no "
                          "silent cast)");
    }
}

// Checkpoint fragment for one adapted matrix: shape header then the cores in
// chain order, each row-major.
void write_fragment(ByteWriter& w, const TtCores<float>& tt) {
    w.u32(static_cast<std::uint32_t>(tt.shape.d_in()));
    w.u32(static_cast<std::uint32_t>(tt.shape.d_out()));
    w.sizes(tt.shape.input_factors);
    w.sizes(tt.shape.output_factors);
    w.u32(static_cast<std::uint32_t>(tt.shape.rank));
    w.f32(tt.alpha);
    w.u8(kPrecisionF32);
    for (const auto& core : tt.cores) w.floats(core.data());
}

TtCores<float> read_fragment(ByteReader& r, const std::string& path) {
    const std::uint32_t d_in = r.u32();
    const std::uint32_t d_out = r.u32();
    TtShape shape;
    shape.input_factors = r.sizes();
    shape.output_factors = r.sizes();
    shape.rank = r.u32();
    const float alpha = r.f32();
    const std::uint8_t precision = r.u8();
    if (precision != kPrecisionF32) {
        throw FormatError("'" + path + "': fragment precision " +
                          std::to_string(precision) +
                          "-byte floats cannot load into the 32-bit runtime (no "
                          "silent cast)");
    }
    validate_shape(shape, d_in, d_out);
    TtCores<float> tt;
    tt.shape = shape;
    tt.alpha = alpha;
    const auto ranks = shape.bond_ranks();
    for (std::size_t k = 0; k < shape.num_cores(); ++k) {
        Tensor<float> core({ranks[k], shape.factor_dim(k), ranks[k + 1]});
        r.floats(core.data());
        tt.cores.push_back(std::move(core));
    }
    tt.validate();
    return tt;
}

} // namespace

void save_expert(const std::string& path, const ExpertAdapter<float>& adapter) {
    if (adapter.q_cores.empty() || adapter.q_cores.size() != adapter.v_cores.size()) {
        throw ShapeError("save_expert: malformed adapter layer structure");
    }
    ByteWriter w(path);
    w.magic("TTMX");
    w.u8(kVersion);
    w.u8(kPrecisionF32);
    w.u64(adapter.config_hash);
    w.u64(adapter.seed);
    w.u32(adapter.expert_id);
    w.str(adapter.task_name);
    w.u32(static_cast<std::uint32_t>(adapter.num_classes));
    w.u32(static_cast<std::uint32_t>(adapter.q_cores.size()));
    w.f32(adapter.q_cores.front().alpha);
    w.u32(static_cast<std::uint32_t>(adapter.q_cores.front().shape.rank));
    w.sizes(adapter.q_cores.front().shape.input_factors);
    w.sizes(adapter.q_cores.front().shape.output_factors);
    w.sizes(adapter.v_cores.front().shape.input_factors);
    w.sizes(adapter.v_cores.front().shape.output_factors);
    for (std::size_t l = 0; l < adapter.q_cores.size(); ++l) {
        write_fragment(w, adapter.q_cores[l]);
        write_fragment(w, adapter.v_cores[l]);
    }
    w.u32(static_cast<std::uint32_t>(adapter.head_w.dim(0)));
    w.u32(static_cast<std::uint32_t>(adapter.head_w.dim(1)));
    w.floats(adapter.head_w.data());
    w.floats(adapter.head_b.data());
    w.close();
}

ExpertAdapter<float> load_expert(const std::string& path, const ToyConfig& expected) {
    ByteReader r(path);
    r.expect_magic("TTMX", "TT-LoRA expert checkpoint");
    check_version_precision(r, path);
    ExpertAdapter<float> a;
    a.config_hash = r.u64();
    if (a.config_hash != expected.hash()) {
        throw FormatError("'" + path + "': base-model config hash mismatch (file " +
                          std::to_string(a.config_hash) + ", runtime " +
                          std::to_string(expected.hash()) + ")");
    }
    a.seed = r.u64();
    a.expert_id = r.u32();
    a.task_name = r.str();
    a.num_classes = r.u32();
    const std::uint32_t layers = r.u32();
    (void)r.f32();  // alpha (repeated in each fragment)
    (void)r.u32();  // rank
    (void)r.sizes(); // q factors, informational in the manifest header
    (void)r.sizes();
    (void)r.sizes();
    (void)r.sizes();
    for (std::uint32_t l = 0; l < layers; ++l) {
        a.q_cores.push_back(read_fragment(r, path));
        a.v_cores.push_back(read_fragment(r, path));
    }
    const std::uint32_t d = r.u32();
    const std::uint32_t c = r.u32();
    a.head_w = TensorF({d, c});
    r.floats(a.head_w.data());
    a.head_b = TensorF({c});
    r.floats(a.head_b.data());
    r.done();
    if (a.num_classes != c) {
        throw FormatError("'" + path + "': head width " + std::to_string(c) +
                          " does not match declared classes " +
                          std::to_string(a.num_classes));
    }
    return a;
}

void save_router(const std::string& path, const RouterCheckpoint& ckpt) {
    if (ckpt.expert_names.size() != ckpt.params.num_experts()) {
        throw ShapeError("save_router: expert-name table does not match N");
    }
    ByteWriter w(path);
    w.magic("TTMR");
    w.u8(kVersion);
    w.u8(kPrecisionF32);
    w.u64(ckpt.config_hash);
    w.u32(static_cast<std::uint32_t>(ckpt.params.dim()));
    w.u32(static_cast<std::uint32_t>(ckpt.params.num_experts()));
    w.f32(static_cast<float>(ckpt.lambda));
    for (const auto& name : ckpt.expert_names) w.str(name);
    w.floats(ckpt.params.w_gate.data());
    w.floats(ckpt.params.b_gate.data());
    w.floats(ckpt.params.w_noise.data());
    w.close();
}

RouterCheckpoint load_router(const std::string& path, const ToyConfig& expected) {
    ByteReader r(path);
    r.expect_magic("TTMR", "router checkpoint");
    check_version_precision(r, path);
    RouterCheckpoint ckpt;
    ckpt.config_hash = r.u64();
    if (ckpt.config_hash != expected.hash()) {
        throw FormatError("'" + path + "': base-model config hash mismatch");
    }
    const std::uint32_t d = r.u32();
    const std::uint32_t n = r.u32();
    ckpt.lambda = r.f32();
    for (std::uint32_t i = 0; i < n; ++i) ckpt.expert_names.push_back(r.str());
    ckpt.params.w_gate = TensorF({d, n});
    r.floats(ckpt.params.w_gate.data());
    ckpt.params.b_gate = TensorF({n});
    r.floats(ckpt.params.b_gate.data());
    ckpt.params.w_noise = TensorF({d, n});
    r.floats(ckpt.params.w_noise.data());
    r.done();
    return ckpt;
}

void save_dataset(const std::string& path, const TaskDataset& task) {
    ByteWriter w(path);
    w.magic("TTMD");
    w.u8(kVersion);
    w.u8(kPrecisionF32);
    w.str(task.name);
    w.u32(static_cast<std::uint32_t>(task.num_classes));
    w.u64(task.seed);
    w.u32(task.rule_id);
    w.u32(static_cast<std::uint32_t>(task.tokens.batch));
    w.u32(static_cast<std::uint32_t>(task.tokens.seq));
    for (std::uint32_t id : task.tokens.ids) w.u32(id);
    for (std::size_t l : task.labels) w.u32(static_cast<std::uint32_t>(l));
    w.sizes(task.train_idx);
    w.sizes(task.val_idx);
    w.close();
}

TaskDataset load_dataset(const std::string& path) {
    ByteReader r(path);
    r.expect_magic("TTMD", "task dataset");
    check_version_precision(r, path);
    TaskDataset t;
    t.name = r.str();
    t.num_classes = r.u32();
    t.seed = r.u64();
    t.rule_id = r.u32();
    const std::uint32_t n = r.u32();
    const std::uint32_t seq = r.u32();
    t.tokens = TokenBatch(n, seq);
    for (auto& id : t.tokens.ids) id = r.u32();
    t.labels.resize(n);
    for (auto& l : t.labels) l = r.u32();
    t.train_idx = r.sizes();
    t.val_idx = r.sizes();
    r.done();
    for (std::size_t l : t.labels) {
        if (l >= t.num_classes) {
            throw FormatError("'" + path + "': label " + std::to_string(l) +
                              " out of range");
        }
    }
    return t;
}

void save_bank_manifest(const std::string& path, const BankManifest& manifest) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["config_hash"] = std::to_string(manifest.config_hash);
    j["experts"] = nlohmann::json::array();
    for (const auto& e : manifest.experts) {
        j["experts"].push_back({{"id", e.id},
                                {"task", e.task},
                                {"path", e.path},
                                {"config_hash", std::to_string(e.config_hash)}});
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

BankManifest load_bank_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' is not valid JSON: " + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != 1) {
            throw FormatError("'" + path + "': unsupported manifest schema");
        }
        BankManifest m;
        m.config_hash = std::stoull(j.at("config_hash").get<std::string>());
        for (const auto& e : j.at("experts")) {
            BankManifest::Entry entry;
            entry.id = e.at("id").get<std::uint32_t>();
            entry.task = e.at("task").get<std::string>();
            entry.path = e.at("path").get<std::string>();
            entry.config_hash = std::stoull(e.at("config_hash").get<std::string>());
            m.experts.push_back(std::move(entry));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "': malformed manifest: " + e.what());
    }
}

ExpertBank load_bank(const std::string& manifest_path, const ToyConfig& expected) {
    BankManifest manifest = load_bank_manifest(manifest_path);
    if (manifest.config_hash != expected.hash()) {
        throw FormatError("'" + manifest_path + "': base-model config hash mismatch");
    }
    const auto dir = std::filesystem::path(manifest_path).parent_path();
    std::vector<ExpertAdapter<float>> experts(manifest.experts.size());
    for (const auto& entry : manifest.experts) {
        if (entry.id >= experts.size()) {
            throw FormatError("'" + manifest_path + "': expert id " +
                              std::to_string(entry.id) + " out of range");
        }
        auto full = (dir / entry.path).string();
        experts[entry.id] = load_expert(full, expected);
        if (experts[entry.id].task_name != entry.task) {
            throw FormatError("'" + full + "': task name '" +
                              experts[entry.id].task_name +
                              "' does not match manifest entry '" + entry.task + "'");
        }
    }
    return make_bank(std::move(experts));
}

} // namespace ttmoe
