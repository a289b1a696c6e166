#pragma once

#include <span>
#include <vector>

#include "protodiff/rng.hpp"
#include "protodiff/tensor.hpp"

namespace protodiff {

struct Codebook; // protolearn.hpp

/// Distinguished label for unconditional passes.
inline constexpr int kNullLabel = -1;

/// (C+1) x d_p embedding table. Rows 0..C-1 are class embeddings, row C is
/// the null token used for unconditional passes. When frozen, class rows are
/// bit-invariant under training; the null row always trains.
struct ConditioningTable {
    int C = 0;
    int d_p = 0;
    bool frozen = false;
    Tensor rows; // (C+1, d_p)

    std::span<const double> row(int label) const;
    std::span<double> row_mut(int label);
    int row_index(int label) const; // label or C for kNullLabel
};

/// Copies prototypes into class rows (requires K=1); null row starts at zero.
ConditioningTable init_from_codebook(const Codebook& codebook, bool frozen);

/// Baseline: rows ~ 0.02 * N(0,1) from the seeded generator; null row zero.
ConditioningTable init_random(int C, int d_p, uint64_t seed, bool frozen = false);

/// entry 2k   = sin(t / 10000^(2k/d_t))
/// entry 2k+1 = cos(t / 10000^(2k/d_t))
std::vector<double> time_embedding(int t, int d_t);

/// z = concat(time_embedding(t, d_t), table row for label). Pure.
std::vector<double> build_conditioning(int t, int label, const ConditioningTable& table, int d_t);

} // namespace protodiff
