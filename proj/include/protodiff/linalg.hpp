#pragma once

#include <vector>

namespace protodiff {

// Small dense helpers for the evaluation metrics and PCA. Matrices are
// row-major d x d vectors.

struct SymmetricEigen {
    std::vector<double> eigenvalues;   // descending
    std::vector<double> eigenvectors;  // row-major, column j = eigenvector j
    bool converged = true;
};

// Cyclic Jacobi rotations; input must be symmetric. Accurate to machine
// precision for the modest sizes used here (d <= a few hundred).
SymmetricEigen jacobi_eigen(const std::vector<double>& a, int d, int max_sweeps = 64);

std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, int d);

// (A + A^T) / 2
std::vector<double> symmetrize(const std::vector<double>& a, int d);

double trace(const std::vector<double>& a, int d);

} // namespace protodiff
