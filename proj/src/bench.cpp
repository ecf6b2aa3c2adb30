// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/bench.hpp"

#include "ttmoe/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#ifdef __linux__
#include <sched.h>
#endif

namespace ttmoe {

namespace {

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - double(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

struct ThreadPin {
#ifdef __linux__
    cpu_set_t saved;
    bool active = false;
    explicit ThreadPin(bool enable) {
        if (!enable) return;
        if (sched_getaffinity(0, sizeof(saved), &saved) != 0) return;
        cpu_set_t one;
        CPU_ZERO(&one);
        for (int c = 0; c < CPU_SETSIZE; ++c) {
            if (CPU_ISSET(c, &saved)) {
                CPU_SET(c, &one);
                break;
            }
        }
        active = sched_setaffinity(0, sizeof(one), &one) == 0;
    }
    ~ThreadPin() {
        if (active) sched_setaffinity(0, sizeof(saved), &saved);
    }
#else
    explicit ThreadPin(bool) {}
#endif
};

double max_rel_err(const TensorF& a, const TensorF& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double denom =
            std::max(1.0, std::max(std::abs(double(a[i])), std::abs(double(b[i]))));
        m = std::max(m, std::abs(double(a[i]) - double(b[i])) / denom);
    }
    return m;
}

} // namespace

std::vector<BenchResult>
bench_contract_vs_reconstruct(std::size_t d_in, std::size_t d_out, const TtShape& shape,
                              const std::vector<std::size_t>& batch_sizes,
                              const BenchOptions& opts) {
    if (opts.reps < 10) {
        throw ConfigError("bench requires reps >= 10, got " + std::to_string(opts.reps));
    }
    if (batch_sizes.empty()) throw ConfigError("bench: no batch sizes");
    for (std::size_t b : batch_sizes) {
        if (b == 0) throw ConfigError("bench: batch size 0 rejected");
    }
    validate_shape(shape, d_in, d_out);

    TtCores<float> tt = init_cores<float>(shape, opts.seed, 0.05f, 1.0f);
    Rng rng(hash_mix(opts.seed, 0xbe7c));
    for (auto& v : tt.cores.back().data()) v = float(rng.normal() * 0.05);

    ThreadPin pin(opts.pin_thread);
    using clock = std::chrono::steady_clock;
    std::vector<BenchResult> results;

    for (std::size_t batch : batch_sizes) {
        TensorF x({batch, d_in});
        for (auto& v : x.data()) v = float(rng.normal());

        // Paths must agree before any timing is trusted.
        auto recon_path = [&]() {
            TensorF w = tt_reconstruct(tt);
            TensorF y = matmul(x, w);
            for (auto& v : y.data()) v *= tt.alpha;
            return y;
        };
        auto contract_path = [&]() { return tt_contract_forward(x, tt); };
        {
            const double err = max_rel_err(recon_path(), contract_path());
            if (err > opts.agreement_rel_tol) {
                throw Error("bench: paths disagree at batch " + std::to_string(batch) +
                            " (max rel err " + std::to_string(err) +
                            "); refusing to time divergent math");
            }
        }

        for (std::size_t wi = 0; wi < opts.warmup; ++wi) {
            (void)recon_path();
            (void)contract_path();
        }

        std::vector<double> recon_times, contract_times;
        for (std::size_t rep = 0; rep < opts.reps; ++rep) {
            const auto t0 = clock::now();
            TensorF yr = recon_path();
            const auto t1 = clock::now();
            TensorF yc = contract_path();
            const auto t2 = clock::now();
            recon_times.push_back(std::chrono::duration<double>(t1 - t0).count());
            contract_times.push_back(std::chrono::duration<double>(t2 - t1).count());
            // Fold the outputs into a sink so the calls cannot be elided.
            volatile float sink = yr[0] + yc[0];
            (void)sink;
        }

        BenchResult r;
        r.batch = batch;
        r.reps = opts.reps;
        r.d_in = d_in;
        r.d_out = d_out;
        r.shape = shape;
        r.recon_median_sec = percentile(recon_times, 0.5);
        r.recon_iqr_sec = percentile(recon_times, 0.75) - percentile(recon_times, 0.25);
        r.contract_median_sec = percentile(contract_times, 0.5);
        r.contract_iqr_sec =
            percentile(contract_times, 0.75) - percentile(contract_times, 0.25);
        r.speedup = r.recon_median_sec / r.contract_median_sec;
        results.push_back(std::move(r));
    }
    return results;
}

} // namespace ttmoe
