#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "protodiff/checkpoint.hpp"
#include "protodiff/dataset.hpp"
#include "protodiff/errors.hpp"
#include "test_util.hpp"

using namespace protodiff;
using namespace testutil;

namespace {
std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
} // namespace

TEST_CASE("hue-shapes generation: determinism, range, self-test") {
    SyntheticSpec spec;
    spec.classes = 3;
    spec.n_per_class = 40;
    spec.image_size = 16;
    spec.seed = 99;
    LabeledDataset a = generate_hue_shapes(spec);
    LabeledDataset b = generate_hue_shapes(spec);
    CHECK(bit_equal(a.images, b.images));
    CHECK(a.labels == b.labels);
    CHECK(a.images.dim(0) == 120);
    for (double v : a.images.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }

    SyntheticSpec held = spec;
    held.seed = 100;
    held.n_per_class = 30;
    LabeledDataset h = generate_hue_shapes(held);
    CHECK(nearest_centroid_accuracy(a, h) >= 0.99);
}

TEST_CASE("dataset file round trip is byte-identical") {
    SyntheticSpec spec;
    spec.classes = 2;
    spec.n_per_class = 10;
    spec.image_size = 8;
    spec.seed = 3;
    LabeledDataset ds = generate_hue_shapes(spec);
    ds.config_hash = "cafe0000cafe0000";

    const std::string p1 = tmp_path("pd_test_ds1.pdds");
    const std::string p2 = tmp_path("pd_test_ds2.pdds");
    save_dataset(p1, ds);
    LabeledDataset back = load_dataset(p1);
    CHECK(bit_equal(ds.images, back.images));
    CHECK(ds.labels == back.labels);
    CHECK(back.num_classes == 2);
    CHECK(back.config_hash == "cafe0000cafe0000");
    save_dataset(p2, back);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("cifar-10 binary reader") {
    SUBCASE("hand-built single record") {
        const std::string p = tmp_path("pd_test_cifar.bin");
        std::vector<unsigned char> rec(3073, 255);
        rec[0] = 3;
        std::ofstream os(p, std::ios::binary);
        os.write(reinterpret_cast<const char*>(rec.data()), rec.size());
        os.close();
        LabeledDataset ds = read_cifar10_binary(p);
        CHECK(ds.images.dim(0) == 1);
        CHECK(ds.labels[0] == 3);
        for (double v : ds.images.data) CHECK(v == doctest::Approx(1.0));
        std::remove(p.c_str());
    }
    SUBCASE("truncated file reports offset") {
        const std::string p = tmp_path("pd_test_cifar_trunc.bin");
        std::vector<unsigned char> rec(3073 + 100, 0);
        std::ofstream os(p, std::ios::binary);
        os.write(reinterpret_cast<const char*>(rec.data()), rec.size());
        os.close();
        CHECK_THROWS_WITH_AS(read_cifar10_binary(p), doctest::Contains("3073"), IoError);
        std::remove(p.c_str());
    }
    SUBCASE("empty file") {
        const std::string p = tmp_path("pd_test_cifar_empty.bin");
        std::ofstream os(p, std::ios::binary);
        os.close();
        CHECK_THROWS_AS(read_cifar10_binary(p), IoError);
        std::remove(p.c_str());
    }
    SUBCASE("bad label byte") {
        const std::string p = tmp_path("pd_test_cifar_label.bin");
        std::vector<unsigned char> rec(3073, 0);
        rec[0] = 10;
        std::ofstream os(p, std::ios::binary);
        os.write(reinterpret_cast<const char*>(rec.data()), rec.size());
        os.close();
        CHECK_THROWS_AS(read_cifar10_binary(p), IoError);
        std::remove(p.c_str());
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(read_cifar10_binary("/nonexistent/x.bin"), MissingFileError); }
}

TEST_CASE("resize keeps labels and adjusts geometry") {
    SyntheticSpec spec;
    spec.classes = 2;
    spec.n_per_class = 3;
    spec.image_size = 16;
    spec.seed = 5;
    LabeledDataset ds = generate_hue_shapes(spec);
    for (auto mode : {ResizeMode::nearest, ResizeMode::bilinear}) {
        LabeledDataset r = resize_images(ds, 8, mode);
        CHECK(r.images.dim(2) == 8);
        CHECK(r.images.dim(3) == 8);
        CHECK(r.labels == ds.labels);
        for (double v : r.images.data) {
            CHECK(v >= -1.0 - 1e-12);
            CHECK(v <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("tensor container: integrity and corruption detection") {
    TensorFile tf;
    tf.header["kind"] = "test";
    tf.header["note"] = "roundtrip";
    Tensor t({2, 3});
    for (size_t i = 0; i < t.numel(); ++i) t.data[i] = 0.5 * static_cast<double>(i) - 1.0;
    tf.tensors["a.b"] = t;
    Tensor f32({4});
    for (size_t i = 0; i < 4; ++i) f32.data[i] = 1.25 * static_cast<double>(i);
    tf.tensors["c"] = f32;
    tf.dtypes["c"] = 'f';

    const std::string p = tmp_path("pd_test_container.pdck");
    write_tensor_file(p, tf);
    TensorFile back = read_tensor_file(p);
    CHECK(back.header.at("note") == "roundtrip");
    CHECK(bit_equal(back.tensors.at("a.b"), t));
    CHECK(back.dtype_of("c") == 'f');
    CHECK(back.tensors.at("c").data[3] == doctest::Approx(3.75));

    // flip one payload byte -> checksum error
    std::fstream fs(p, std::ios::binary | std::ios::in | std::ios::out);
    fs.seekp(30);
    char c;
    fs.seekg(30);
    fs.read(&c, 1);
    c ^= 0x01;
    fs.seekp(30);
    fs.write(&c, 1);
    fs.close();
    CHECK_THROWS_WITH_AS(read_tensor_file(p), doctest::Contains("checksum"), IoError);
    std::remove(p.c_str());

    CHECK_THROWS_AS(read_tensor_file("/nonexistent/file.pdck"), MissingFileError);
}
