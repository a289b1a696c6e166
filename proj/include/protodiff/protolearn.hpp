#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "protodiff/rng.hpp"
#include "protodiff/tensor.hpp"

namespace protodiff {

struct LabeledDataset; // dataset.hpp

/// C x K prototype vectors in feature space. The pipeline trains K=1; the
/// type supports K>1.
struct Codebook {
    int C = 0;
    int K = 1;
    int dim = 0;
    Tensor prototypes; // (C, K, dim)

    std::span<const double> prototype(int i, int j) const {
        return {prototypes.data.data() + (static_cast<size_t>(i) * K + j) * dim,
                static_cast<size_t>(dim)};
    }
    std::span<double> prototype_mut(int i, int j) {
        return {prototypes.data.data() + (static_cast<size_t>(i) * K + j) * dim,
                static_cast<size_t>(dim)};
    }
};

struct ProtoTrainConfig {
    double gamma = 1.0;   // assignment sharpness, > 0
    double lambda = 0.01; // pull-to-closest regularizer weight, >= 0
    int epochs = 20;
    int batch_size = 512;
    double learning_rate = 1e-4;
    uint64_t seed = 0;
    int dim = 128;
    int prototypes_per_class = 1;
    double proto_init_scale = 0.1;
    std::string arch = "desk"; // "desk" (4-layer convnet) or "resnet18"
};

/// Convolutional feature extractor mapping (N,C,H,W) images to (N,dim)
/// feature vectors. Two architectures: a small 4-layer net for desk-scale
/// runs and a ResNet-18-shaped variant for fidelity runs.
struct FeatureExtractor {
    std::string arch = "desk";
    int in_channels = 3;
    int image_size = 16;
    int dim = 128;
    ParamStore params;
};

FeatureExtractor build_extractor(const std::string& arch, int in_channels, int image_size, int dim,
                                 uint64_t seed);

struct ExtractorTrace; // saved activations, defined in protolearn.cpp

Tensor extractor_forward(const FeatureExtractor& fx, const Tensor& images,
                         std::shared_ptr<ExtractorTrace>* trace = nullptr);
ParamStore extractor_backward(const FeatureExtractor& fx, const ExtractorTrace& trace,
                              const Tensor& dfeatures);

/// Nearest-prototype classification: argmax_i ( -min_j ||f - e_ij||^2 ),
/// ties broken by lowest class index (then lowest prototype index).
int assign_class(std::span<const double> features, const Codebook& codebook);

/// p(i,j) = softmax over all (i,j) of -gamma * ||f - e_ij||^2, flattened as
/// i*K + j. Computed with max-subtraction; sums to 1 within 1e-9.
std::vector<double> proto_probabilities(std::span<const double> features, const Codebook& codebook,
                                        double gamma);

/// -log(sum_j p(label, j)) + lambda * ||f - e_closest||^2 where e_closest is
/// the globally nearest prototype.
double cpl_loss(std::span<const double> features, int label, const Codebook& codebook, double gamma,
                double lambda);

/// Per-sample gradient: writes dL/df into dfeatures and accumulates
/// scale * dL/de into dprototypes (shape (C,K,dim)). Returns the loss.
double cpl_loss_backward(std::span<const double> features, int label, const Codebook& codebook,
                         double gamma, double lambda, std::span<double> dfeatures,
                         Tensor& dprototypes, double scale);

struct CplBatchGradients {
    ParamStore extractor_grads;
    Tensor prototype_grads; // (C,K,dim)
    double mean_loss = 0.0;
};

/// Exact reverse-mode gradients of the mean batch loss w.r.t. every extractor
/// tensor and every prototype.
CplBatchGradients cpl_loss_gradients(const Tensor& images, const std::vector<int>& labels,
                                     const FeatureExtractor& extractor, const Codebook& codebook,
                                     const ProtoTrainConfig& config);

struct ProtoArtifacts {
    FeatureExtractor extractor;
    Codebook codebook;
    std::vector<double> accuracy_history; // per epoch, via assign_class
    ProtoTrainConfig config;
};

/// Stage I: joint Adam training of the extractor and the codebook.
/// Deterministic per seed.
ProtoArtifacts train_prototypes(const LabeledDataset& dataset, const ProtoTrainConfig& config);

Tensor extract_features(const FeatureExtractor& fx, const Tensor& images, int batch = 256);

double classification_accuracy(const FeatureExtractor& fx, const Codebook& codebook,
                               const LabeledDataset& dataset);

struct PcaResult {
    Tensor coords;                      // (N, n_components)
    Tensor basis;                       // (n_components, dim)
    std::vector<double> mean;           // feature mean removed before projection
    std::vector<double> eigenvalues;    // all dim eigenvalues, descending
    std::vector<double> explained_ratio; // per returned component
    int n_components = 0;
    bool rank_deficient = false;

    /// Projects an extra point with the fitted mean/basis.
    std::vector<double> project(std::span<const double> point) const;
};

/// Mean-centered projection onto the top principal components. Component
/// signs are fixed so each one's largest-magnitude entry is positive. If the
/// covariance rank is below out_dim, the available components are returned
/// and rank_deficient is set.
PcaResult pca_project(const Tensor& features, int out_dim);

/// Fingerprint of the extractor weights; pins the feature space an
/// evaluation ran in.
std::string extractor_id(const FeatureExtractor& fx);

void save_proto_artifacts(const std::string& path, const ProtoArtifacts& art,
                          const std::string& config_hash);
ProtoArtifacts load_proto_artifacts(const std::string& path);

/// Membership in the convex hull of a 2-D point cloud (boundary counts as
/// inside, with a small tolerance). Used for the prototype-visualization
/// geometry check.
bool inside_convex_hull(double px, double py, const std::vector<std::array<double, 2>>& cloud);

} // namespace protodiff
