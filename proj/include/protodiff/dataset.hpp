#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protodiff/tensor.hpp"

namespace protodiff {

struct LabeledDataset {
    Tensor images; // (N, C, H, W), values in [-1, 1]
    std::vector<int> labels;
    int num_classes = 0;
    std::string config_hash; // provenance tag carried through artifacts
};

/// Synthetic stand-in for the natural-image datasets: each class is a fixed
/// hue band plus a fixed shape (disc, square, cross, ring cycling with the
/// class index), with jittered position/scale and pixel noise.
struct SyntheticSpec {
    int classes = 3;
    int n_per_class = 667;
    int image_size = 16;
    uint64_t seed = 7;
    double noise_sigma = 0.02;
};

LabeledDataset generate_hue_shapes(const SyntheticSpec& spec);

/// Pixel-space nearest-centroid classifier accuracy; the generator self-test
/// requires >= 0.99 of this on a held-out split.
double nearest_centroid_accuracy(const LabeledDataset& train, const LabeledDataset& test);

/// CIFAR-10 binary format: records of 3073 bytes, 1 label byte then the
/// 32x32 R, G, B planes. Values scaled to [-1, 1].
LabeledDataset read_cifar10_binary(const std::string& path);

enum class ResizeMode { nearest, bilinear };
LabeledDataset resize_images(const LabeledDataset& ds, int new_size, ResizeMode mode);

void save_dataset(const std::string& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::string& path);

/// Deterministic subset (first n of a seeded shuffle).
LabeledDataset sample_subset(const LabeledDataset& ds, int n, uint64_t seed);

} // namespace protodiff
