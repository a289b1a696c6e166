#include "protodiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "protodiff/checkpoint.hpp"
#include "protodiff/errors.hpp"
#include "protodiff/rng.hpp"

namespace protodiff {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) r = c, g = x;
    else if (hp < 2) r = x, g = c;
    else if (hp < 3) g = c, b = x;
    else if (hp < 4) g = x, b = c;
    else if (hp < 5) r = x, b = c;
    else r = c, b = x;
    const double m = v - c;
    return {r + m, g + m, b + m};
}

// Signed distance (in [0,1] image units) to each shape's boundary.
double shape_sdf(int shape, double dx, double dy, double r) {
    switch (shape) {
        case 0: // disc
            return std::sqrt(dx * dx + dy * dy) - r;
        case 1: // square
            return std::max(std::abs(dx), std::abs(dy)) - r;
        case 2: { // cross (two bars)
            const double bar = 0.35 * r;
            const double d1 = std::max(std::abs(dx) - r, std::abs(dy) - bar);
            const double d2 = std::max(std::abs(dx) - bar, std::abs(dy) - r);
            return std::min(d1, d2);
        }
        default: { // ring
            const double rad = std::sqrt(dx * dx + dy * dy);
            return std::abs(rad - 0.78 * r) - 0.3 * r;
        }
    }
}

} // namespace

LabeledDataset generate_hue_shapes(const SyntheticSpec& spec) {
    if (spec.classes < 1 || spec.n_per_class < 1 || spec.image_size < 4)
        throw ConfigError("synthetic spec: classes >= 1, n_per_class >= 1, image_size >= 4");
    const int S = spec.image_size;
    const int N = spec.classes * spec.n_per_class;

    LabeledDataset ds;
    ds.num_classes = spec.classes;
    ds.images = Tensor({N, 3, S, S});
    ds.labels.resize(N);

    Rng rng(spec.seed);
    const double px = 1.0 / S;
    const double bg = 0.10;

    int n = 0;
    for (int cls = 0; cls < spec.classes; ++cls) {
        const double hue_center = static_cast<double>(cls) / spec.classes;
        const int shape = cls % 4;
        for (int k = 0; k < spec.n_per_class; ++k, ++n) {
            ds.labels[n] = cls;
            const double hue = hue_center + (rng.uniform() - 0.5) * 0.3 / spec.classes;
            const double sat = 0.85 + 0.15 * rng.uniform();
            const double val = 0.80 + 0.20 * rng.uniform();
            const Rgb color = hsv_to_rgb(hue, sat, val);
            const double cx = 0.5 + (rng.uniform() - 0.5) * 0.24;
            const double cy = 0.5 + (rng.uniform() - 0.5) * 0.24;
            const double r = 0.26 + 0.12 * rng.uniform();
            for (int y = 0; y < S; ++y) {
                for (int x = 0; x < S; ++x) {
                    const double fx = (x + 0.5) * px - cx;
                    const double fy = (y + 0.5) * px - cy;
                    const double d = shape_sdf(shape, fx, fy, r);
                    const double cov = std::clamp(0.5 - d / px, 0.0, 1.0);
                    const double ch[3] = {color.r, color.g, color.b};
                    for (int c = 0; c < 3; ++c) {
                        double v = bg + cov * (ch[c] - bg) + spec.noise_sigma * rng.normal();
                        v = std::clamp(v, 0.0, 1.0);
                        ds.images.at(n, c, y, x) = v * 2.0 - 1.0;
                    }
                }
            }
        }
    }
    return ds;
}

double nearest_centroid_accuracy(const LabeledDataset& train, const LabeledDataset& test) {
    const int C = train.num_classes;
    const size_t dim = train.images.numel() / train.images.dim(0);
    std::vector<std::vector<double>> centroid(C, std::vector<double>(dim, 0.0));
    std::vector<int> count(C, 0);
    for (int n = 0; n < train.images.dim(0); ++n) {
        const double* img = train.images.data.data() + n * dim;
        auto& c = centroid[train.labels[n]];
        for (size_t i = 0; i < dim; ++i) c[i] += img[i];
        ++count[train.labels[n]];
    }
    for (int c = 0; c < C; ++c) {
        if (count[c] == 0) throw ConfigError("nearest_centroid: class " + std::to_string(c) + " empty");
        for (auto& v : centroid[c]) v /= count[c];
    }
    int correct = 0;
    for (int n = 0; n < test.images.dim(0); ++n) {
        const double* img = test.images.data.data() + n * dim;
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) {
            double d = 0.0;
            for (size_t i = 0; i < dim; ++i) {
                const double diff = img[i] - centroid[c][i];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (best == test.labels[n]) ++correct;
    }
    return static_cast<double>(correct) / test.images.dim(0);
}

LabeledDataset read_cifar10_binary(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError("cannot open CIFAR-10 file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty()) throw IoError("empty dataset file: " + path);
    constexpr size_t kRecord = 3073;
    if (bytes.size() % kRecord != 0)
        throw IoError("CIFAR-10 parse error: size " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073 (stray bytes start at offset " +
                      std::to_string((bytes.size() / kRecord) * kRecord) + ")");
    const int N = static_cast<int>(bytes.size() / kRecord);

    LabeledDataset ds;
    ds.num_classes = 10;
    ds.images = Tensor({N, 3, 32, 32});
    ds.labels.resize(N);
    for (int n = 0; n < N; ++n) {
        const size_t base = static_cast<size_t>(n) * kRecord;
        const unsigned char label = bytes[base];
        if (label > 9)
            throw IoError("CIFAR-10 parse error: label byte " + std::to_string(int(label)) +
                          " > 9 at offset " + std::to_string(base));
        ds.labels[n] = label;
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 1024; ++i)
                ds.images.data[((static_cast<size_t>(n) * 3 + c) * 1024) + i] =
                    bytes[base + 1 + static_cast<size_t>(c) * 1024 + i] / 255.0 * 2.0 - 1.0;
    }
    return ds;
}

LabeledDataset resize_images(const LabeledDataset& ds, int new_size, ResizeMode mode) {
    const int N = ds.images.dim(0), C = ds.images.dim(1), H = ds.images.dim(2), W = ds.images.dim(3);
    LabeledDataset out;
    out.labels = ds.labels;
    out.num_classes = ds.num_classes;
    out.config_hash = ds.config_hash;
    out.images = Tensor({N, C, new_size, new_size});
    const double sy = static_cast<double>(H) / new_size;
    const double sx = static_cast<double>(W) / new_size;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < new_size; ++y)
                for (int x = 0; x < new_size; ++x) {
                    if (mode == ResizeMode::nearest) {
                        const int iy = std::min(static_cast<int>((y + 0.5) * sy), H - 1);
                        const int ix = std::min(static_cast<int>((x + 0.5) * sx), W - 1);
                        out.images.at(n, c, y, x) = ds.images.at(n, c, iy, ix);
                    } else {
                        const double fy = (y + 0.5) * sy - 0.5;
                        const double fx = (x + 0.5) * sx - 0.5;
                        const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, H - 1);
                        const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, W - 1);
                        const int y1 = std::min(y0 + 1, H - 1);
                        const int x1 = std::min(x0 + 1, W - 1);
                        const double wy = std::clamp(fy - y0, 0.0, 1.0);
                        const double wx = std::clamp(fx - x0, 0.0, 1.0);
                        out.images.at(n, c, y, x) =
                            (1 - wy) * ((1 - wx) * ds.images.at(n, c, y0, x0) + wx * ds.images.at(n, c, y0, x1)) +
                            wy * ((1 - wx) * ds.images.at(n, c, y1, x0) + wx * ds.images.at(n, c, y1, x1));
                    }
                }
    return out;
}

void save_dataset(const std::string& path, const LabeledDataset& ds) {
    TensorFile tf;
    tf.header["kind"] = "dataset";
    tf.header["num_classes"] = ds.num_classes;
    tf.header["config_hash"] = ds.config_hash;
    tf.tensors["images"] = ds.images;
    Tensor labels({ds.images.dim(0)});
    for (size_t i = 0; i < ds.labels.size(); ++i) labels.data[i] = ds.labels[i];
    tf.tensors["labels"] = labels;
    write_tensor_file(path, tf);
}

LabeledDataset load_dataset(const std::string& path) {
    TensorFile tf = read_tensor_file(path);
    if (tf.header.value("kind", "") != "dataset")
        throw IoError("not a dataset file: " + path + " (kind=" + tf.header.value("kind", "?") + ")");
    LabeledDataset ds;
    ds.num_classes = tf.header.value("num_classes", 0);
    ds.config_hash = tf.header.value("config_hash", "");
    ds.images = tf.tensors.at("images");
    const Tensor& labels = tf.tensors.at("labels");
    ds.labels.resize(labels.numel());
    for (size_t i = 0; i < ds.labels.size(); ++i) ds.labels[i] = static_cast<int>(labels.data[i]);
    return ds;
}

LabeledDataset sample_subset(const LabeledDataset& ds, int n, uint64_t seed) {
    const int N = ds.images.dim(0);
    n = std::min(n, N);
    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (int i = N - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i) + 1));
        std::swap(order[i], order[j]);
    }
    const size_t dim = ds.images.numel() / N;
    LabeledDataset out;
    out.num_classes = ds.num_classes;
    out.config_hash = ds.config_hash;
    out.images = Tensor({n, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    out.labels.resize(n);
    for (int k = 0; k < n; ++k) {
        std::copy(ds.images.data.begin() + order[k] * dim, ds.images.data.begin() + (order[k] + 1) * dim,
                  out.images.data.begin() + k * dim);
        out.labels[k] = ds.labels[order[k]];
    }
    return out;
}

} // namespace protodiff
