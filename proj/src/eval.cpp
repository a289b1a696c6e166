#include "protodiff/eval.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "protodiff/errors.hpp"
#include "protodiff/linalg.hpp"

namespace protodiff {

FeatureStats gaussian_stats(const Tensor& features) {
    if (features.shape.size() != 2) throw ShapeError("gaussian_stats: expected (N,d)");
    const int N = features.dim(0), d = features.dim(1);
    if (N < 2) throw ShapeError("gaussian_stats: need at least 2 samples");

    FeatureStats s;
    s.d = d;
    s.n = N;
    s.mean.assign(d, 0.0);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < d; ++i) s.mean[i] += features.at(n, i);
    for (auto& v : s.mean) v /= N;

    s.cov.assign(static_cast<size_t>(d) * d, 0.0);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < d; ++i) {
            const double xi = features.at(n, i) - s.mean[i];
            for (int j = i; j < d; ++j)
                s.cov[static_cast<size_t>(i) * d + j] += xi * (features.at(n, j) - s.mean[j]);
        }
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            s.cov[static_cast<size_t>(i) * d + j] /= (N - 1);
            s.cov[static_cast<size_t>(j) * d + i] = s.cov[static_cast<size_t>(i) * d + j];
        }
    return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.d != b.d) throw ShapeError("frechet_distance: dimension mismatch");
    const int d = a.d;

    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a.mean[i] - b.mean[i];
        mean_term += diff * diff;
    }

    // sqrt(Sigma_a) via eigendecomposition, eigenvalues floored at 0.
    auto eig_a = jacobi_eigen(symmetrize(a.cov, d), d);
    if (!eig_a.converged) throw IoError("frechet_distance: eigensolve did not converge");
    std::vector<double> sqrt_a(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double s = 0.0;
            for (int k = 0; k < d; ++k) {
                const double l = std::max(eig_a.eigenvalues[k], 0.0);
                s += eig_a.eigenvectors[static_cast<size_t>(i) * d + k] * std::sqrt(l) *
                     eig_a.eigenvectors[static_cast<size_t>(j) * d + k];
            }
            sqrt_a[static_cast<size_t>(i) * d + j] = s;
        }

    auto inner = matmul(matmul(sqrt_a, symmetrize(b.cov, d), d), sqrt_a, d);
    auto eig_m = jacobi_eigen(symmetrize(inner, d), d);
    if (!eig_m.converged) throw IoError("frechet_distance: eigensolve did not converge");
    double sqrt_trace = 0.0;
    for (double l : eig_m.eigenvalues) sqrt_trace += std::sqrt(std::max(l, 0.0));

    const double fid = mean_term + trace(a.cov, d) + trace(b.cov, d) - 2.0 * sqrt_trace;
    return std::max(fid, 0.0);
}

double inception_score(const Tensor& class_probs) {
    if (class_probs.shape.size() != 2) throw ShapeError("inception_score: expected (N,C)");
    const int N = class_probs.dim(0), C = class_probs.dim(1);
    if (N < 1) throw ShapeError("inception_score: empty input");

    std::vector<double> marginal(C, 0.0);
    for (int n = 0; n < N; ++n) {
        double row_sum = 0.0;
        for (int c = 0; c < C; ++c) {
            const double p = class_probs.at(n, c);
            if (p < 0.0) throw ShapeError("inception_score: negative probability");
            row_sum += p;
        }
        if (std::abs(row_sum - 1.0) > 1e-6)
            throw ShapeError("inception_score: row " + std::to_string(n) + " sums to " +
                             std::to_string(row_sum));
        for (int c = 0; c < C; ++c) marginal[c] += class_probs.at(n, c);
    }
    for (auto& v : marginal) v /= N;

    double mean_kl = 0.0;
    for (int n = 0; n < N; ++n) {
        double kl = 0.0;
        for (int c = 0; c < C; ++c) {
            const double p = class_probs.at(n, c);
            if (p > 0.0) kl += p * std::log(p / marginal[c]);
        }
        mean_kl += kl;
    }
    mean_kl /= N;
    return std::exp(mean_kl);
}

std::string eval_report_csv_header() { return "fid,is,n_samples,feature_extractor_id,seed,config_hash"; }

std::string eval_report_to_csv(const EvalReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d,%s,%llu,%s", r.fid, r.is_score, r.n_samples,
                  r.feature_extractor_id.c_str(), static_cast<unsigned long long>(r.seed),
                  r.config_hash.c_str());
    return buf;
}

EvalReport eval_report_from_csv(const std::string& line) {
    std::istringstream is(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(is, field, ',')) fields.push_back(field);
    if (fields.size() != 6) throw IoError("eval report row has " + std::to_string(fields.size()) + " fields");
    EvalReport r;
    r.fid = std::stod(fields[0]);
    r.is_score = std::stod(fields[1]);
    r.n_samples = std::stoi(fields[2]);
    r.feature_extractor_id = fields[3];
    r.seed = std::stoull(fields[4]);
    r.config_hash = fields[5];
    return r;
}

std::string eval_report_to_json(const EvalReport& r) {
    std::ostringstream os;
    os << "{\n"
       << "  \"fid\": " << r.fid << ",\n"
       << "  \"is_score\": " << r.is_score << ",\n"
       << "  \"n_samples\": " << r.n_samples << ",\n"
       << "  \"feature_extractor_id\": \"" << r.feature_extractor_id << "\",\n"
       << "  \"seed\": " << r.seed << ",\n"
       << "  \"config_hash\": \"" << r.config_hash << "\"\n"
       << "}\n";
    return os.str();
}

Tensor class_posteriors(const FeatureExtractor& extractor, const Codebook& codebook, double gamma,
                        const Tensor& images) {
    Tensor features = extract_features(extractor, images);
    const int N = features.dim(0);
    Tensor probs({N, codebook.C});
    for (int n = 0; n < N; ++n) {
        std::span<const double> f{features.data.data() + static_cast<size_t>(n) * codebook.dim,
                                  static_cast<size_t>(codebook.dim)};
        auto p = proto_probabilities(f, codebook, gamma);
        for (int i = 0; i < codebook.C; ++i) {
            double s = 0.0;
            for (int j = 0; j < codebook.K; ++j) s += p[static_cast<size_t>(i) * codebook.K + j];
            probs.at(n, i) = s;
        }
    }
    return probs;
}

EvalReport evaluate(const Tensor& generated, const Tensor& reference, const FeatureExtractor& extractor,
                    const Codebook& codebook, double gamma, const std::string& extractor_id,
                    uint64_t seed) {
    if (generated.dim(0) == 0 || reference.dim(0) == 0) throw ShapeError("evaluate: empty batch");
    if (generated.dim(1) != reference.dim(1) || generated.dim(2) != reference.dim(2) ||
        generated.dim(3) != reference.dim(3))
        throw ShapeError("evaluate: generated " + generated.shape_str() + " vs reference " +
                         reference.shape_str());

    Tensor gen_feat = extract_features(extractor, generated);
    Tensor ref_feat = extract_features(extractor, reference);

    EvalReport r;
    r.fid = frechet_distance(gaussian_stats(gen_feat), gaussian_stats(ref_feat));
    r.is_score = inception_score(class_posteriors(extractor, codebook, gamma, generated));
    r.n_samples = generated.dim(0);
    r.feature_extractor_id = extractor_id;
    r.seed = seed;
    return r;
}

} // namespace protodiff
