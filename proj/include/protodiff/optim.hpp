#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "protodiff/tensor.hpp"

namespace protodiff {

// Adam with decoupled weight decay. weight_decay = 0 reduces to plain Adam.
struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int64_t t = 0;
    ParamStore m, v;

    void init(const ParamStore& params) {
        m = zeros_like(params);
        v = zeros_like(params);
        t = 0;
    }

    void update_span(std::span<double> p, std::span<const double> g, std::span<double> ms,
                     std::span<double> vs) const {
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < p.size(); ++i) {
            ms[i] = beta1 * ms[i] + (1.0 - beta1) * g[i];
            vs[i] = beta2 * vs[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = ms[i] / bc1;
            const double vhat = vs[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
        }
    }

    // One step over every parameter in the store. Iteration order is the
    // sorted key order, so steps are reproducible.
    void step(ParamStore& params, const ParamStore& grads) {
        ++t;
        for (auto& [key, p] : params) {
            const auto git = grads.find(key);
            if (git == grads.end()) continue;
            update_span(p.data, git->second.data, m.at(key).data, v.at(key).data);
        }
    }
};

} // namespace protodiff
