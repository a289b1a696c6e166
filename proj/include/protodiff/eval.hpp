#pragma once

#include <string>
#include <vector>

#include "protodiff/protolearn.hpp"
#include "protodiff/tensor.hpp"

namespace protodiff {

struct FeatureStats {
    int d = 0;
    int64_t n = 0;
    std::vector<double> mean; // length d
    std::vector<double> cov;  // d x d, unbiased
};

FeatureStats gaussian_stats(const Tensor& features);

/// ||mu_a - mu_b||^2 + tr(Sigma_a + Sigma_b - 2 (Sigma_a Sigma_b)^(1/2)),
/// matrix square root via the symmetric eigendecomposition of
/// Sigma_a^(1/2) Sigma_b Sigma_a^(1/2), eigenvalues floored at 0; result
/// floored at 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// exp(mean_n KL(p(y|x_n) || p_bar)), with 0*log0 := 0. Rows must sum to 1
/// within 1e-6.
double inception_score(const Tensor& class_probs);

struct EvalReport {
    double fid = 0.0;
    double is_score = 1.0;
    int n_samples = 0;
    std::string feature_extractor_id;
    uint64_t seed = 0;
    std::string config_hash;
};

std::string eval_report_csv_header();
std::string eval_report_to_csv(const EvalReport& r);
EvalReport eval_report_from_csv(const std::string& line);
std::string eval_report_to_json(const EvalReport& r);

/// FID from the extractor's feature vectors of both batches, IS from the
/// prototype-softmax class posteriors of the generated batch.
EvalReport evaluate(const Tensor& generated, const Tensor& reference, const FeatureExtractor& extractor,
                    const Codebook& codebook, double gamma, const std::string& extractor_id,
                    uint64_t seed);

/// Class posteriors p(i) = sum_j p(i,j) for each sample, (N, C).
Tensor class_posteriors(const FeatureExtractor& extractor, const Codebook& codebook, double gamma,
                        const Tensor& images);

} // namespace protodiff
