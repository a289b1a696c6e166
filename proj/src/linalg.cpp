#include "protodiff/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protodiff {

SymmetricEigen jacobi_eigen(const std::vector<double>& a_in, int d, int max_sweeps) {
    std::vector<double> a = a_in;
    std::vector<double> v(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) v[static_cast<size_t>(i) * d + i] = 1.0;

    auto off_norm = [&]() {
        double s = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) s += a[static_cast<size_t>(i) * d + j] * a[static_cast<size_t>(i) * d + j];
        return std::sqrt(2.0 * s);
    };
    double fro = 0.0;
    for (double x : a) fro += x * x;
    fro = std::sqrt(fro);
    const double tol = (fro > 0.0 ? fro : 1.0) * 1e-14;

    SymmetricEigen out;
    out.converged = false;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (off_norm() <= tol) {
            out.converged = true;
            break;
        }
        for (int p = 0; p < d - 1; ++p) {
            for (int q = p + 1; q < d; ++q) {
                const double apq = a[static_cast<size_t>(p) * d + q];
                if (std::abs(apq) <= tol * 1e-2) continue;
                const double app = a[static_cast<size_t>(p) * d + p];
                const double aqq = a[static_cast<size_t>(q) * d + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = a[static_cast<size_t>(k) * d + p];
                    const double akq = a[static_cast<size_t>(k) * d + q];
                    a[static_cast<size_t>(k) * d + p] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * d + q] = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = a[static_cast<size_t>(p) * d + k];
                    const double aqk = a[static_cast<size_t>(q) * d + k];
                    a[static_cast<size_t>(p) * d + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * d + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < d; ++k) {
                    const double vkp = v[static_cast<size_t>(k) * d + p];
                    const double vkq = v[static_cast<size_t>(k) * d + q];
                    v[static_cast<size_t>(k) * d + p] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k) * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!out.converged && off_norm() <= tol * 10.0) out.converged = true;

    std::vector<int> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> diag(d);
    for (int i = 0; i < d; ++i) diag[i] = a[static_cast<size_t>(i) * d + i];
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return diag[i] > diag[j]; });

    out.eigenvalues.resize(d);
    out.eigenvectors.assign(static_cast<size_t>(d) * d, 0.0);
    for (int j = 0; j < d; ++j) {
        out.eigenvalues[j] = diag[order[j]];
        for (int i = 0; i < d; ++i)
            out.eigenvectors[static_cast<size_t>(i) * d + j] = v[static_cast<size_t>(i) * d + order[j]];
    }
    return out;
}

std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, int d) {
    std::vector<double> c(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            const double aik = a[static_cast<size_t>(i) * d + k];
            if (aik == 0.0) continue;
            for (int j = 0; j < d; ++j)
                c[static_cast<size_t>(i) * d + j] += aik * b[static_cast<size_t>(k) * d + j];
        }
    return c;
}

std::vector<double> symmetrize(const std::vector<double>& a, int d) {
    std::vector<double> s(static_cast<size_t>(d) * d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            s[static_cast<size_t>(i) * d + j] =
                0.5 * (a[static_cast<size_t>(i) * d + j] + a[static_cast<size_t>(j) * d + i]);
    return s;
}

double trace(const std::vector<double>& a, int d) {
    double t = 0.0;
    for (int i = 0; i < d; ++i) t += a[static_cast<size_t>(i) * d + i];
    return t;
}

} // namespace protodiff
