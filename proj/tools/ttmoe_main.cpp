// SPDX-License-Identifier: Apache-2.0
//
// ttmoe: train TT-LoRA experts on a frozen toy transformer, route them with a
// noisy top-1 gate, count parameters against the reference configurations and
// benchmark contraction against reconstruction.

#include "ttmoe/bench.hpp"
#include "ttmoe/checkpoint.hpp"
#include "ttmoe/config.hpp"
#include "ttmoe/report.hpp"
#include "ttmoe/router.hpp"
#include "ttmoe/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <thread>

namespace fs = std::filesystem;
using namespace ttmoe;

namespace {

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag) {
    if (flag) return *flag;
    if (const char* env = std::getenv("TTMOE_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("TTMOE_SEED is not an integer: '" + std::string(env) +
                              "'");
        }
    }
    return 0;
}

ConfigFile load_config_or_default(const std::string& path) {
    if (path.empty()) return ConfigFile::parse_string("", "<defaults>");
    return ConfigFile::parse_file(path);
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) {
        throw ConfigError(std::string(what) + " not found: '" + path + "'");
    }
}

std::vector<std::size_t> parse_size_list(const std::string& csv, const char* what) {
    std::vector<std::size_t> out;
    std::string part;
    std::istringstream ss(csv);
    while (std::getline(ss, part, ',')) {
        if (part.empty()) continue;
        try {
            out.push_back(std::stoull(part));
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": bad integer '" + part + "'");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
    return out;
}

// ----- count-params ----------------------------------------------------------

int run_count_params(const std::string& preset, const std::string& kind,
                     const std::string& in_csv, const std::string& out_csv,
                     std::size_t rank, std::size_t layers, std::size_t d_in,
                     std::size_t d_out, std::size_t router_d, std::size_t router_n,
                     const std::string& report_path) {
    const TtShape full_q{{16, 8, 4, 4}, {4, 4, 8, 16}, 5};
    const TtShape full_v{{16, 16, 4, 2}, {2, 16, 16}, 5};

    std::size_t value = 0;
    if (preset == "paper-tt") {
        value = 16 * (tt_param_count(full_q) + tt_param_count(full_v));
    } else if (preset == "paper-lora") {
        value = 16 * (lora_param_count(2048, 2048, 16) + lora_param_count(2048, 512, 16));
    } else if (preset.rfind("paper-router-", 0) == 0) {
        const std::string n_str = preset.substr(std::string("paper-router-").size());
        std::size_t n = 0;
        try {
            n = std::stoull(n_str);
        } catch (const std::exception&) {
            throw ConfigError("bad router preset '" + preset + "'");
        }
        value = router_param_count(2048, n);
    } else if (preset == "custom") {
        if (kind == "tt") {
            TtShape shape{parse_size_list(in_csv, "--in-factors"),
                          parse_size_list(out_csv, "--out-factors"), rank};
            validate_shape(shape, shape.d_in(), shape.d_out());
            value = layers * tt_param_count(shape);
        } else if (kind == "lora") {
            value = layers * lora_param_count(d_in, d_out, rank);
        } else if (kind == "router") {
            value = router_param_count(router_d, router_n);
        } else {
            throw ConfigError("custom preset needs --kind tt|lora|router");
        }
    } else {
        throw ConfigError("unknown preset '" + preset + "'");
    }

    std::printf("%zu\n", value);
    ReportWriter report(report_path);
    report.write({{"record", "param_count"}, {"preset", preset}, {"value", value}});
    return 0;
}

// ----- gen-tasks --------------------------------------------------------------

int run_gen_tasks(std::size_t n_tasks, const std::string& out_dir,
                  const std::string& config_path, std::optional<std::uint64_t> seed_flag,
                  const std::string& report_path) {
    const auto cfg_file = load_config_or_default(config_path);
    const ToyConfig toy = toy_config_from(cfg_file);
    const GenOptions opts = gen_options_from(cfg_file);
    const std::uint64_t seed = resolve_seed(seed_flag);

    BaseModel<float> base(toy);
    auto tasks = gen_synthetic_tasks(base, n_tasks, seed, opts);

    fs::create_directories(out_dir);
    ReportWriter report(report_path);
    std::printf("%-10s %8s %8s %5s %9s %10s  %s\n", "task", "samples", "classes",
                "rule", "band", "probe_acc", "path");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto path = (fs::path(out_dir) / (tasks[i].name + ".ttmd")).string();
        save_dataset(path, tasks[i]);
        const double probe = linear_probe_accuracy(base, tasks[i]);
        const std::size_t band = toy.vocab / n_tasks;
        std::printf("%-10s %8zu %8zu %5u %4zu-%-4zu %10.3f  %s\n", tasks[i].name.c_str(),
                    tasks[i].size(), tasks[i].num_classes, tasks[i].rule_id, i * band,
                    (i + 1) * band - 1, probe, path.c_str());
        report.write({{"record", "task_generated"},
                      {"name", tasks[i].name},
                      {"samples", tasks[i].size()},
                      {"classes", tasks[i].num_classes},
                      {"rule", tasks[i].rule_id},
                      {"probe_accuracy", probe},
                      {"seed", tasks[i].seed},
                      {"path", path}});
    }
    return 0;
}

// ----- train-expert -----------------------------------------------------------

int run_train_expert(const std::vector<std::string>& task_paths,
                     const std::string& config_path, const std::string& out_path,
                     const std::string& out_dir, const std::string& bank_out,
                     bool parallel, std::optional<std::uint64_t> seed_flag,
                     const std::string& report_path) {
    if (task_paths.empty()) throw ConfigError("train-expert needs at least one --task");
    if (task_paths.size() > 1 && !out_path.empty()) {
        throw ConfigError("multiple tasks need --out-dir, not --out");
    }
    for (const auto& p : task_paths) require_file(p, "task dataset");

    const auto cfg_file = load_config_or_default(config_path);
    const ToyConfig toy = toy_config_from(cfg_file);
    TrainConfig train_cfg = train_config_from(cfg_file);
    if (seed_flag || std::getenv("TTMOE_SEED")) train_cfg.seed = resolve_seed(seed_flag);

    BaseModel<float> base(toy);
    std::vector<TaskDataset> tasks;
    for (const auto& p : task_paths) tasks.push_back(load_dataset(p));

    if (train_cfg.adapter == AdapterKind::Lora) {
        // Baseline mode: train and report. Expert checkpoints and banks hold
        // TT cores, so there is nothing to save here.
        if (!out_path.empty() || !out_dir.empty() || !bank_out.empty()) {
            throw ConfigError(
                "adapter = lora is a reporting baseline; checkpoints are TT-only "
                "(drop --out/--out-dir/--bank-out)");
        }
        ReportWriter report(report_path);
        std::printf("%-10s %8s %10s %10s %8s %9s\n", "task", "epochs", "best_acc",
                    "params", "best_ep", "stopped");
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            TrainConfig cfg = train_cfg;
            cfg.seed = hash_mix(train_cfg.seed, 0x77 + i);
            auto [adapter, rep] = train_lora_expert(base, tasks[i], cfg,
                                                    std::uint32_t(i));
            (void)adapter;
            std::printf("%-10s %8zu %10.3f %10zu %8zu %9s\n", tasks[i].name.c_str(),
                        rep.epochs_run, rep.best_val_accuracy, rep.trainable_params,
                        rep.best_epoch, rep.early_stopped ? "early" : "full");
            report.write({{"record", "train_summary"},
                          {"task", tasks[i].name},
                          {"adapter", "lora"},
                          {"best_epoch", rep.best_epoch},
                          {"best_val_accuracy", rep.best_val_accuracy},
                          {"trainable_params", rep.trainable_params},
                          {"epochs_run", rep.epochs_run},
                          {"clip_events", rep.clip_events},
                          {"early_stopped", rep.early_stopped},
                          {"wall_clock_sec", rep.wall_clock_sec}});
        }
        return 0;
    }

    struct Job {
        ExpertAdapter<float> adapter;
        TrainReport report;
        std::string out_file;
    };
    std::vector<Job> jobs(tasks.size());

    auto work = [&](std::size_t i) {
        TrainConfig cfg = train_cfg;
        cfg.seed = hash_mix(train_cfg.seed, 0x77 + i);
        auto [adapter, rep] = train_expert(base, tasks[i], cfg, std::uint32_t(i));
        jobs[i].adapter = std::move(adapter);
        jobs[i].report = std::move(rep);
    };
    if (parallel && tasks.size() > 1) {
        // Distinct experts share only the immutable base; train concurrently.
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < tasks.size(); ++i) pool.emplace_back(work, i);
        for (auto& t : pool) t.join();
    } else {
        for (std::size_t i = 0; i < tasks.size(); ++i) work(i);
    }

    ReportWriter report(report_path);
    BankManifest manifest;
    manifest.config_hash = toy.hash();
    std::printf("%-10s %8s %10s %10s %8s %9s\n", "task", "epochs", "best_acc",
                "params", "best_ep", "stopped");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        Job& job = jobs[i];
        if (tasks.size() == 1 && !out_path.empty()) {
            job.out_file = out_path;
        } else {
            const std::string dir = out_dir.empty() ? "." : out_dir;
            fs::create_directories(dir);
            job.out_file = (fs::path(dir) / (tasks[i].name + ".expert.ttmx")).string();
        }
        save_expert(job.out_file, job.adapter);
        manifest.experts.push_back({std::uint32_t(i), tasks[i].name,
                                    fs::path(job.out_file).filename().string(),
                                    toy.hash()});
        std::printf("%-10s %8zu %10.3f %10zu %8zu %9s\n", tasks[i].name.c_str(),
                    job.report.epochs_run, job.report.best_val_accuracy,
                    job.report.trainable_params, job.report.best_epoch,
                    job.report.early_stopped ? "early" : "full");
        for (std::size_t e = 0; e < job.report.train_loss.size(); ++e) {
            report.write({{"record", "train_epoch"},
                          {"task", tasks[i].name},
                          {"epoch", e + 1},
                          {"train_loss", job.report.train_loss[e]},
                          {"val_accuracy", job.report.val_accuracy[e]}});
        }
        report.write({{"record", "train_summary"},
                      {"task", tasks[i].name},
                      {"checkpoint", job.out_file},
                      {"best_epoch", job.report.best_epoch},
                      {"best_val_accuracy", job.report.best_val_accuracy},
                      {"trainable_params", job.report.trainable_params},
                      {"epochs_run", job.report.epochs_run},
                      {"clip_events", job.report.clip_events},
                      {"early_stopped", job.report.early_stopped},
                      {"wall_clock_sec", job.report.wall_clock_sec}});
    }
    if (!bank_out.empty()) {
        if (out_dir.empty() && tasks.size() == 1 && !out_path.empty() &&
            fs::path(bank_out).parent_path() != fs::path(out_path).parent_path()) {
            throw ConfigError(
                "--bank-out must live next to the expert checkpoints (paths in the "
                "manifest are relative)");
        }
        save_bank_manifest(bank_out, manifest);
        std::printf("bank manifest: %s (%zu experts)\n", bank_out.c_str(),
                    manifest.experts.size());
    }
    return 0;
}

// ----- train-router -----------------------------------------------------------

int run_train_router(const std::string& bank_path, const std::string& mixed_cfg_path,
                     const std::string& out_path, const std::string& config_path,
                     std::optional<std::uint64_t> seed_flag,
                     const std::string& report_path) {
    require_file(bank_path, "bank manifest");
    require_file(mixed_cfg_path, "mixed config");

    const auto cfg_file = load_config_or_default(config_path);
    const ToyConfig toy = toy_config_from(cfg_file);
    const auto mixed_cfg_file = ConfigFile::parse_file(mixed_cfg_path);
    const MixedConfig mixed_cfg = mixed_config_from(mixed_cfg_file);
    RouterTrainConfig router_cfg = router_config_from(mixed_cfg_file);
    if (seed_flag || std::getenv("TTMOE_SEED")) {
        router_cfg.seed = resolve_seed(seed_flag);
    }
    if (mixed_cfg.task_paths.empty()) {
        throw ConfigError("mixed config lists no tasks ([mixed] tasks = a,b,...)");
    }

    BaseModel<float> base(toy);
    ExpertBank bank = load_bank(bank_path, toy);

    // Task datasets resolve relative to the mixed config file.
    const auto dir = fs::path(mixed_cfg_path).parent_path();
    std::vector<TaskDataset> tasks;
    for (const auto& rel : mixed_cfg.task_paths) {
        auto p = fs::path(rel).is_absolute() ? rel : (dir / rel).string();
        require_file(p, "task dataset");
        tasks.push_back(load_dataset(p));
    }
    if (tasks.size() != bank.size()) {
        throw ConfigError("mixed config lists " + std::to_string(tasks.size()) +
                          " tasks for a bank of " + std::to_string(bank.size()));
    }
    // Align dataset order with expert ids by task name.
    std::vector<TaskDataset> ordered(tasks.size());
    for (auto& t : tasks) {
        bool placed = false;
        for (std::size_t e = 0; e < bank.size(); ++e) {
            if (bank.expert(e).task_name == t.name) {
                ordered[e] = std::move(t);
                placed = true;
                break;
            }
        }
        if (!placed) {
            throw ConfigError("task '" + t.name + "' has no expert in the bank");
        }
    }

    MixedDataset mixed =
        build_mixed(ordered, mixed_cfg.per_task, mixed_cfg.seed, toy.pad_id());
    auto [params, rep] = train_router(base, bank, mixed, router_cfg);

    RouterCheckpoint ckpt;
    ckpt.params = std::move(params);
    ckpt.lambda = router_cfg.lambda;
    ckpt.expert_names = bank.task_names();
    ckpt.config_hash = toy.hash();
    save_router(out_path, ckpt);

    std::printf("router: %zu experts, %zu params\n", bank.size(), rep.trainable_params);
    std::printf("routing accuracy: best %.4f at epoch %zu/%zu%s\n",
                rep.best_routing_accuracy, rep.best_epoch, rep.epochs_run,
                rep.early_stopped ? " (early stop)" : "");
    std::printf("moe task accuracy (eval): %.4f\n", rep.final_task_accuracy);
    for (std::size_t e = 0; e < rep.per_task_accuracy.size(); ++e) {
        std::printf("  %-10s %.4f\n", bank.expert(e).task_name.c_str(),
                    rep.per_task_accuracy[e]);
    }

    ReportWriter report(report_path);
    for (std::size_t e = 0; e < rep.routing_accuracy.size(); ++e) {
        report.write({{"record", "router_epoch"},
                      {"epoch", e + 1},
                      {"router_loss", rep.router_loss[e]},
                      {"routing_accuracy", rep.routing_accuracy[e]}});
    }
    report.write({{"record", "router_summary"},
                  {"checkpoint", out_path},
                  {"experts", bank.size()},
                  {"trainable_params", rep.trainable_params},
                  {"best_epoch", rep.best_epoch},
                  {"best_routing_accuracy", rep.best_routing_accuracy},
                  {"task_accuracy", rep.final_task_accuracy},
                  {"per_task_accuracy", rep.per_task_accuracy},
                  {"total_loss", rep.final_total_loss},
                  {"task_loss", rep.final_task_loss},
                  {"router_loss", rep.final_router_loss},
                  {"early_stopped", rep.early_stopped},
                  {"wall_clock_sec", rep.wall_clock_sec}});
    return 0;
}

// ----- eval --------------------------------------------------------------------

int run_eval(const std::string& expert_path, const std::string& moe_path,
             const std::string& bank_path, const std::vector<std::string>& task_paths,
             const std::string& split, const std::string& config_path,
             const std::string& report_path) {
    if (task_paths.empty()) throw ConfigError("eval needs at least one --task");
    for (const auto& p : task_paths) require_file(p, "task dataset");
    const auto cfg_file = load_config_or_default(config_path);
    const ToyConfig toy = toy_config_from(cfg_file);
    BaseModel<float> base(toy);
    ReportWriter report(report_path);

    if (!expert_path.empty()) {
        require_file(expert_path, "expert checkpoint");
        if (task_paths.size() != 1) {
            throw ConfigError("eval --expert takes exactly one --task");
        }
        auto adapter = load_expert(expert_path, toy);
        auto task = load_dataset(task_paths[0]);
        const auto& idx = split == "train" ? task.train_idx : task.val_idx;
        const double acc = evaluate(base, adapter, task, idx);
        std::printf("%-10s %-10s accuracy %.4f (%zu samples)\n", task.name.c_str(),
                    split.c_str(), acc, idx.size());
        report.write({{"record", "eval"},
                      {"task", task.name},
                      {"split", split},
                      {"accuracy", acc},
                      {"samples", idx.size()}});
        return 0;
    }

    if (moe_path.empty() || bank_path.empty()) {
        throw ConfigError("eval needs either --expert or both --moe and --bank");
    }
    require_file(moe_path, "router checkpoint");
    require_file(bank_path, "bank manifest");
    auto router_ckpt = load_router(moe_path, toy);
    ExpertBank bank = load_bank(bank_path, toy);
    if (router_ckpt.params.num_experts() != bank.size()) {
        throw ConfigError("router expects " +
                          std::to_string(router_ckpt.params.num_experts()) +
                          " experts, bank has " + std::to_string(bank.size()));
    }

    std::vector<TaskDataset> ordered(bank.size());
    std::vector<bool> present(bank.size(), false);
    for (const auto& p : task_paths) {
        auto t = load_dataset(p);
        bool placed = false;
        for (std::size_t e = 0; e < bank.size(); ++e) {
            if (bank.expert(e).task_name == t.name) {
                ordered[e] = std::move(t);
                present[e] = placed = true;
                break;
            }
        }
        if (!placed) throw ConfigError("task '" + t.name + "' has no expert in the bank");
    }
    for (std::size_t e = 0; e < bank.size(); ++e) {
        if (!present[e]) {
            throw ConfigError("no dataset given for expert '" +
                              bank.expert(e).task_name + "'");
        }
    }

    MixedDataset mixed = build_mixed(ordered, 0, 0, toy.pad_id());
    TokenBatch tb(mixed.eval_idx.size(), mixed.tokens.seq);
    std::vector<std::size_t> y, t;
    for (std::size_t i = 0; i < mixed.eval_idx.size(); ++i) {
        const std::size_t r = mixed.eval_idx[i];
        for (std::size_t c = 0; c < mixed.tokens.seq; ++c) {
            tb.at(i, c) = mixed.tokens.at(r, c);
        }
        y.push_back(mixed.labels[r]);
        t.push_back(mixed.expert_labels[r]);
    }
    Rng rng(0);
    auto mo = moe_forward(base, bank, router_ckpt.params, tb, GateMode::Eval, rng, 1);
    std::size_t routed = 0, correct = 0;
    std::vector<std::size_t> per_correct(bank.size()), per_total(bank.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        routed += (mo.gates[i].selected == t[i]);
        const auto& row = mo.task_logits[i];
        std::size_t arg = 0;
        for (std::size_t j = 1; j < row.size(); ++j) {
            if (row[j] > row[arg]) arg = j;
        }
        const bool ok = y[i] < row.size() && arg == y[i];
        correct += ok;
        per_correct[t[i]] += ok;
        ++per_total[t[i]];
    }
    const double routing_acc = double(routed) / double(y.size());
    const double task_acc = double(correct) / double(y.size());
    std::printf("routing accuracy: %.4f   moe task accuracy: %.4f (%zu samples)\n",
                routing_acc, task_acc, y.size());
    nlohmann::json per_task = nlohmann::json::array();
    for (std::size_t e = 0; e < bank.size(); ++e) {
        const double acc =
            per_total[e] ? double(per_correct[e]) / double(per_total[e]) : 0.0;
        std::printf("  %-10s %.4f (%zu samples)\n", bank.expert(e).task_name.c_str(),
                    acc, per_total[e]);
        per_task.push_back({{"task", bank.expert(e).task_name}, {"accuracy", acc}});
    }
    report.write({{"record", "moe_eval"},
                  {"routing_accuracy", routing_acc},
                  {"task_accuracy", task_acc},
                  {"per_task", per_task},
                  {"samples", y.size()}});
    return 0;
}

// ----- bench -------------------------------------------------------------------

int run_bench(const std::string& dims, const std::string& in_csv,
              const std::string& out_csv, std::size_t rank, const std::string& batches,
              std::size_t reps, bool no_pin, std::optional<std::uint64_t> seed_flag,
              const std::string& report_path) {
    const auto x = dims.find('x');
    if (x == std::string::npos) throw ConfigError("--dims must look like 2048x2048");
    std::size_t d_in = 0, d_out = 0;
    try {
        d_in = std::stoull(dims.substr(0, x));
        d_out = std::stoull(dims.substr(x + 1));
    } catch (const std::exception&) {
        throw ConfigError("--dims must look like 2048x2048");
    }
    TtShape shape{parse_size_list(in_csv, "--in-factors"),
                  parse_size_list(out_csv, "--out-factors"), rank};
    BenchOptions opts;
    opts.reps = reps;
    opts.pin_thread = !no_pin;
    opts.seed = resolve_seed(seed_flag);
    if (opts.seed == 0) opts.seed = 7;

    auto results = bench_contract_vs_reconstruct(
        d_in, d_out, shape, parse_size_list(batches, "--batches"), opts);

    // Timing convention: monotonic clock around the math call only, allocation
    // included, I/O excluded; reconstruction cost is paid per forward call.
    std::printf("%6s %21s %21s %9s   (medians over %zu reps, [IQR] in ms)\n", "batch",
                "reconstruction", "contraction", "speedup", opts.reps);
    ReportWriter report(report_path);
    for (const auto& r : results) {
        std::printf("%6zu %12.4f [%6.4f] %12.4f [%6.4f] %8.2fx\n", r.batch,
                    r.recon_median_sec * 1e3, r.recon_iqr_sec * 1e3,
                    r.contract_median_sec * 1e3, r.contract_iqr_sec * 1e3, r.speedup);
        report.write({{"record", "bench"},
                      {"batch", r.batch},
                      {"d_in", r.d_in},
                      {"d_out", r.d_out},
                      {"rank", r.shape.rank},
                      {"reps", r.reps},
                      {"recon_median_sec", r.recon_median_sec},
                      {"recon_iqr_sec", r.recon_iqr_sec},
                      {"contract_median_sec", r.contract_median_sec},
                      {"contract_iqr_sec", r.contract_iqr_sec},
                      {"speedup", r.speedup}});
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"TT-LoRA mixture-of-experts desk-scale harness"};
    app.require_subcommand(1);
    app.fallthrough(); // global options may follow the subcommand

    std::string report_path;
    app.add_option("--report", report_path, "append JSON-lines records to this file");

    auto* count = app.add_subcommand("count-params", "trainable-parameter accounting");
    std::string preset = "paper-tt", kind = "tt", cp_in, cp_out;
    std::size_t cp_rank = 5, cp_layers = 1, cp_din = 2048, cp_dout = 2048,
                cp_rd = 2048, cp_rn = 2;
    count->add_option("--preset", preset,
                      "paper-tt | paper-lora | paper-router-<N> | custom");
    count->add_option("--kind", kind, "custom: tt | lora | router");
    count->add_option("--in-factors", cp_in, "custom tt: comma list");
    count->add_option("--out-factors", cp_out, "custom tt: comma list");
    count->add_option("--rank", cp_rank, "custom: tt/lora rank");
    count->add_option("--layers", cp_layers, "custom: adapted layer count");
    count->add_option("--d-in", cp_din, "custom lora: input dim");
    count->add_option("--d-out", cp_dout, "custom lora: output dim");
    count->add_option("--d", cp_rd, "custom router: hidden dim");
    count->add_option("--n", cp_rn, "custom router: expert count");

    auto* gen = app.add_subcommand("gen-tasks", "generate synthetic task datasets");
    std::size_t gen_n = 2;
    std::string gen_out = "tasks", gen_cfg;
    std::optional<std::uint64_t> gen_seed;
    gen->add_option("--n", gen_n, "number of tasks");
    gen->add_option("--out-dir", gen_out, "output directory");
    gen->add_option("--config", gen_cfg, "preset config ([model]/[tasks] sections)");
    gen->add_option("--seed", gen_seed, "generator seed (fallback: TTMOE_SEED)");

    auto* te = app.add_subcommand("train-expert", "stage-1 adapter training");
    std::vector<std::string> te_tasks;
    std::string te_cfg, te_out, te_out_dir, te_bank;
    bool te_parallel = false;
    std::optional<std::uint64_t> te_seed;
    te->add_option("--task", te_tasks, "task dataset file (repeatable)")->required();
    te->add_option("--config", te_cfg, "preset config file");
    te->add_option("--out", te_out, "checkpoint path (single task)");
    te->add_option("--out-dir", te_out_dir, "checkpoint directory (multiple tasks)");
    te->add_option("--bank-out", te_bank, "also write a bank manifest here");
    te->add_flag("--parallel", te_parallel, "train experts concurrently");
    te->add_option("--seed", te_seed, "training seed (fallback: TTMOE_SEED)");

    auto* tr = app.add_subcommand("train-router", "stage-2 router training");
    std::string tr_bank, tr_mixed, tr_out = "router.ttmr", tr_cfg;
    std::optional<std::uint64_t> tr_seed;
    tr->add_option("--bank", tr_bank, "bank manifest")->required();
    tr->add_option("--mixed-config", tr_mixed, "[mixed]/[router] config file")
        ->required();
    tr->add_option("--out", tr_out, "router checkpoint path");
    tr->add_option("--config", tr_cfg, "model preset config");
    tr->add_option("--seed", tr_seed, "training seed (fallback: TTMOE_SEED)");

    auto* ev = app.add_subcommand("eval", "evaluate an expert or the full MoE");
    std::string ev_expert, ev_moe, ev_bank, ev_split = "validation", ev_cfg;
    std::vector<std::string> ev_tasks;
    ev->add_option("--expert", ev_expert, "expert checkpoint");
    ev->add_option("--moe", ev_moe, "router checkpoint");
    ev->add_option("--bank", ev_bank, "bank manifest (with --moe)");
    ev->add_option("--task", ev_tasks, "task dataset file (repeatable)")->required();
    ev->add_option("--split", ev_split, "validation | train");
    ev->add_option("--config", ev_cfg, "model preset config");

    auto* be = app.add_subcommand("bench", "contraction vs reconstruction timing");
    std::string be_dims = "2048x2048", be_in = "16,8,4,4", be_out = "4,4,8,16";
    std::string be_batches = "2,4,8,16,32,64,128";
    std::size_t be_rank = 5, be_reps = 10;
    bool be_no_pin = false;
    std::optional<std::uint64_t> be_seed;
    be->add_option("--dims", be_dims, "matrix dims, e.g. 2048x2048");
    be->add_option("--in-factors", be_in, "input factorization");
    be->add_option("--out-factors", be_out, "output factorization");
    be->add_option("--rank", be_rank, "TT rank");
    be->add_option("--batches", be_batches, "comma list of batch sizes");
    be->add_option("--reps", be_reps, "timed repetitions (>= 10)");
    be->add_flag("--no-pin", be_no_pin, "skip CPU pinning");
    be->add_option("--seed", be_seed, "input seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*count) {
            return run_count_params(preset, kind, cp_in, cp_out, cp_rank, cp_layers,
                                    cp_din, cp_dout, cp_rd, cp_rn, report_path);
        }
        if (*gen) return run_gen_tasks(gen_n, gen_out, gen_cfg, gen_seed, report_path);
        if (*te) {
            return run_train_expert(te_tasks, te_cfg, te_out, te_out_dir, te_bank,
                                    te_parallel, te_seed, report_path);
        }
        if (*tr) {
            return run_train_router(tr_bank, tr_mixed, tr_out, tr_cfg, tr_seed,
                                    report_path);
        }
        if (*ev) {
            return run_eval(ev_expert, ev_moe, ev_bank, ev_tasks, ev_split, ev_cfg,
                            report_path);
        }
        if (*be) {
            return run_bench(be_dims, be_in, be_out, be_rank, be_batches, be_reps,
                             be_no_pin, be_seed, report_path);
        }
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
