#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace protodiff {

// Dense row-major tensor of doubles, rank 1..4. Heavy math lives in the
// kernel functions; this type only owns storage and shape bookkeeping.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static size_t count(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= static_cast<size_t>(d);
        return n;
    }
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    size_t numel() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    // NCHW accessors for rank-4 tensors.
    double& at(int n, int c, int h, int w) {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at(int n, int c, int h, int w) const {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double& at(int n, int c) { return data[static_cast<size_t>(n) * shape[1] + c]; }
    double at(int n, int c) const { return data[static_cast<size_t>(n) * shape[1] + c]; }

    bool all_finite() const;
    std::string shape_str() const;
};

// Parameters and gradients keyed by path ("enc0.block1.conv1.weight", ...).
// std::map keeps iteration order deterministic, which the optimizer and the
// checkpoint writer both rely on.
using ParamStore = std::map<std::string, Tensor>;

ParamStore zeros_like(const ParamStore& p);
size_t total_params(const ParamStore& p);

std::string shape_to_string(const std::vector<int>& s);

} // namespace protodiff
