#include "protodiff/embed.hpp"

#include <cmath>
#include <span>
#include <string>

#include "protodiff/errors.hpp"
#include "protodiff/protolearn.hpp"

namespace protodiff {

int ConditioningTable::row_index(int label) const {
    if (label == kNullLabel) return C;
    if (label < 0 || label >= C)
        throw ShapeError("conditioning: label " + std::to_string(label) + " out of range [0," +
                         std::to_string(C) + ")");
    return label;
}

std::span<const double> ConditioningTable::row(int label) const {
    const int r = row_index(label);
    return {rows.data.data() + static_cast<size_t>(r) * d_p, static_cast<size_t>(d_p)};
}

std::span<double> ConditioningTable::row_mut(int label) {
    const int r = row_index(label);
    return {rows.data.data() + static_cast<size_t>(r) * d_p, static_cast<size_t>(d_p)};
}

ConditioningTable init_from_codebook(const Codebook& codebook, bool frozen) {
    if (codebook.K != 1)
        throw ConfigError("conditioning table requires a single prototype per class (K=1), got K=" +
                          std::to_string(codebook.K));
    ConditioningTable t;
    t.C = codebook.C;
    t.d_p = codebook.dim;
    t.frozen = frozen;
    t.rows = Tensor({t.C + 1, t.d_p});
    for (int i = 0; i < t.C; ++i) {
        auto p = codebook.prototype(i, 0);
        std::copy(p.begin(), p.end(), t.rows.data.begin() + static_cast<size_t>(i) * t.d_p);
    }
    // Null row stays zero.
    return t;
}

ConditioningTable init_random(int C, int d_p, uint64_t seed, bool frozen) {
    if (C < 1 || d_p < 1) throw ConfigError("init_random: C and d_p must be >= 1");
    ConditioningTable t;
    t.C = C;
    t.d_p = d_p;
    t.frozen = frozen;
    t.rows = Tensor({C + 1, d_p});
    Rng rng(seed);
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < d_p; ++j) t.rows.data[static_cast<size_t>(i) * d_p + j] = 0.02 * rng.normal();
    return t;
}

std::vector<double> time_embedding(int t, int d_t) {
    if (d_t % 2 != 0) throw ConfigError("time_embedding: d_t must be even");
    std::vector<double> e(d_t);
    for (int k = 0; 2 * k < d_t; ++k) {
        const double freq = std::pow(10000.0, -2.0 * k / static_cast<double>(d_t));
        e[2 * k] = std::sin(t * freq);
        e[2 * k + 1] = std::cos(t * freq);
    }
    return e;
}

std::vector<double> build_conditioning(int t, int label, const ConditioningTable& table, int d_t) {
    std::vector<double> z = time_embedding(t, d_t);
    auto r = table.row(label);
    z.insert(z.end(), r.begin(), r.end());
    return z;
}

} // namespace protodiff
