// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/tt.hpp"

#include <vector>

namespace ttmoe {

struct BenchResult {
    std::size_t batch = 0;
    double recon_median_sec = 0;
    double recon_iqr_sec = 0;
    double contract_median_sec = 0;
    double contract_iqr_sec = 0;
    double speedup = 0; // recon_median / contract_median
    std::size_t reps = 0;
    std::size_t d_in = 0, d_out = 0;
    TtShape shape;
};

struct BenchOptions {
    std::size_t reps = 10;   // timed repetitions per path (>= 10)
    std::size_t warmup = 3;  // discarded warm-up calls per path
    double agreement_rel_tol = 1e-3;
    std::uint64_t seed = 7;
    bool pin_thread = true; // pin to one CPU while timing, restored afterwards
};

// Times reconstruct-then-matmul against direct input contraction per forward
// call (allocation included, I/O excluded; monotonic clock around the math
// only). Both paths must agree within the tolerance or the run is rejected,
// so timings are never reported for divergent math.
std::vector<BenchResult>
bench_contract_vs_reconstruct(std::size_t d_in, std::size_t d_out, const TtShape& shape,
                              const std::vector<std::size_t>& batch_sizes,
                              const BenchOptions& opts = {});

} // namespace ttmoe
