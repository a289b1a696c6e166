#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protodiff/tensor.hpp"

namespace protodiff {

struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 3; // 3 or 4
    std::vector<uint8_t> pixels; // row-major, interleaved
};

void write_png(const std::string& path, const Image8& img);
Image8 read_png(const std::string& path);

/// [-1,1] -> u8 with clamping; (C,H,W) slice n of a batch tensor.
Image8 tensor_to_image(const Tensor& batch, int n);

/// Tile a batch row-major into a rows x cols grid with `pad` background
/// pixels between cells. Grayscale batches are replicated to RGB.
Image8 make_grid(const Tensor& batch, int rows, int cols, int pad = 2);

/// 2-D scatter of projected features colored by class, with prototype
/// markers drawn larger and ringed.
Image8 draw_scatter(const Tensor& coords, const std::vector<int>& labels, const Tensor& proto_coords,
                    int size = 512);

} // namespace protodiff
