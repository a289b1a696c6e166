#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace protodiff {

// xoshiro256++ with splitmix64 seeding. The standard <random> distributions
// are implementation-defined, so all stochastic draws in this project go
// through this generator to keep runs reproducible across compilers. State is
// four 64-bit words and serializes into checkpoints verbatim.
class Rng {
public:
    Rng() : Rng(0x9e3779b97f4a7c15ULL) {}
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform();

    // Uniform integer in [0, n), n >= 1.
    uint64_t uniform_int(uint64_t n);

    // Standard normal via Box-Muller. Consumes exactly two uniforms per draw
    // so the stream position is a pure function of the draw count.
    double normal();

    void fill_normal(double* out, size_t n);
    void fill_normal(std::vector<double>& out) { fill_normal(out.data(), out.size()); }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

private:
    std::array<uint64_t, 4> s_;
};

} // namespace protodiff
