#include "protodiff/tensor.hpp"

#include <cmath>
#include <sstream>

namespace protodiff {

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

std::string shape_to_string(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

ParamStore zeros_like(const ParamStore& p) {
    ParamStore out;
    for (const auto& [k, v] : p) out.emplace(k, Tensor::zeros(v.shape));
    return out;
}

size_t total_params(const ParamStore& p) {
    size_t n = 0;
    for (const auto& [k, v] : p) n += v.numel();
    return n;
}

} // namespace protodiff
