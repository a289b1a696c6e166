#include "protodiff/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "protodiff/errors.hpp"

namespace protodiff {

namespace {

const uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32_be(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_u32_be(out, static_cast<uint32_t>(data.size()));
    std::vector<uint8_t> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    out.insert(out.end(), body.begin(), body.end());
    put_u32_be(out, static_cast<uint32_t>(crc32(0L, body.data(), static_cast<uInt>(body.size()))));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

void write_png(const std::string& path, const Image8& img) {
    if (img.channels != 3 && img.channels != 4) throw ShapeError("write_png: 3 or 4 channels only");
    if (static_cast<size_t>(img.width) * img.height * img.channels != img.pixels.size())
        throw ShapeError("write_png: pixel buffer size mismatch");

    const int bpp = img.channels;
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.height) * (1 + static_cast<size_t>(img.width) * bpp));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0); // filter: none
        const uint8_t* row = img.pixels.data() + static_cast<size_t>(y) * img.width * bpp;
        raw.insert(raw.end(), row, row + static_cast<size_t>(img.width) * bpp);
    }

    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("write_png: deflate failed");
    comp.resize(comp_size);

    std::vector<uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(img.width));
    put_u32_be(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);                                    // bit depth
    ihdr.push_back(img.channels == 3 ? 2 : 6);            // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(out, "IHDR", ihdr);
    write_chunk(out, "IDAT", comp);
    write_chunk(out, "IEND", {});

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("write_png: cannot open " + path);
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!os) throw IoError("write_png: write failed for " + path);
}

Image8 read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError("read_png: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw IoError("read_png: not a PNG file: " + path);

    Image8 img;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    int bit_depth = 0, color_type = 0, interlace = 0;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = get_u32_be(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("read_png: truncated chunk");
        const std::string type(bytes.begin() + pos + 4, bytes.begin() + pos + 8);
        const uint8_t* data = bytes.data() + pos + 8;
        if (type == "IHDR") {
            img.width = static_cast<int>(get_u32_be(data));
            img.height = static_cast<int>(get_u32_be(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (bit_depth != 8 || (color_type != 2 && color_type != 6) || interlace != 0)
        throw IoError("read_png: unsupported format (8-bit RGB/RGBA non-interlaced only)");
    img.channels = (color_type == 2) ? 3 : 4;

    const int bpp = img.channels;
    const size_t stride = static_cast<size_t>(img.width) * bpp;
    std::vector<uint8_t> raw(static_cast<size_t>(img.height) * (stride + 1));
    uLongf raw_size = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_size != raw.size())
        throw IoError("read_png: inflate failed");

    img.pixels.assign(static_cast<size_t>(img.height) * stride, 0);
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < img.height; ++y) {
        const uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
        uint8_t* dst = img.pixels.data() + static_cast<size_t>(y) * stride;
        for (size_t i = 0; i < stride; ++i) {
            const int a = (i >= static_cast<size_t>(bpp)) ? dst[i - bpp] : 0;
            const int b = prev[i];
            const int c = (i >= static_cast<size_t>(bpp)) ? prev[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("read_png: unknown filter type");
            }
            dst[i] = static_cast<uint8_t>(v & 0xff);
        }
        std::copy(dst, dst + stride, prev.begin());
    }
    return img;
}

namespace {

uint8_t to_u8(double v) {
    const double x = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
    return static_cast<uint8_t>(std::lround(x));
}

} // namespace

Image8 tensor_to_image(const Tensor& batch, int n) {
    const int C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    Image8 img;
    img.width = W;
    img.height = H;
    img.channels = 3;
    img.pixels.resize(static_cast<size_t>(W) * H * 3);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src_c = (C == 1) ? 0 : c;
                img.pixels[(static_cast<size_t>(y) * W + x) * 3 + c] = to_u8(batch.at(n, src_c, y, x));
            }
    return img;
}

Image8 make_grid(const Tensor& batch, int rows, int cols, int pad) {
    const int N = batch.dim(0), H = batch.dim(2), W = batch.dim(3);
    Image8 grid;
    grid.width = cols * W + (cols + 1) * pad;
    grid.height = rows * H + (rows + 1) * pad;
    grid.channels = 3;
    grid.pixels.assign(static_cast<size_t>(grid.width) * grid.height * 3, 24);
    for (int n = 0; n < std::min(N, rows * cols); ++n) {
        const int r = n / cols, c = n % cols;
        const Image8 tile = tensor_to_image(batch, n);
        const int y0 = pad + r * (H + pad);
        const int x0 = pad + c * (W + pad);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    grid.pixels[((static_cast<size_t>(y0 + y) * grid.width) + x0 + x) * 3 + ch] =
                        tile.pixels[(static_cast<size_t>(y) * W + x) * 3 + ch];
    }
    return grid;
}

namespace {

void class_color(int cls, int num_classes, uint8_t rgb[3]) {
    const double h = (num_classes > 0 ? static_cast<double>(cls) / num_classes : 0.0) * 6.0;
    const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
    double r = 0, g = 0, b = 0;
    if (h < 1) r = 1, g = x;
    else if (h < 2) r = x, g = 1;
    else if (h < 3) g = 1, b = x;
    else if (h < 4) g = x, b = 1;
    else if (h < 5) r = x, b = 1;
    else r = 1, b = x;
    rgb[0] = static_cast<uint8_t>(40 + 200 * r);
    rgb[1] = static_cast<uint8_t>(40 + 200 * g);
    rgb[2] = static_cast<uint8_t>(40 + 200 * b);
}

void fill_disc(Image8& img, double cx, double cy, double radius, const uint8_t rgb[3]) {
    const int x0 = std::max(0, static_cast<int>(cx - radius - 1));
    const int x1 = std::min(img.width - 1, static_cast<int>(cx + radius + 1));
    const int y0 = std::max(0, static_cast<int>(cy - radius - 1));
    const int y1 = std::min(img.height - 1, static_cast<int>(cy + radius + 1));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy <= radius * radius)
                for (int c = 0; c < 3; ++c)
                    img.pixels[(static_cast<size_t>(y) * img.width + x) * 3 + c] = rgb[c];
        }
}

} // namespace

Image8 draw_scatter(const Tensor& coords, const std::vector<int>& labels, const Tensor& proto_coords,
                    int size) {
    Image8 img;
    img.width = size;
    img.height = size;
    img.channels = 3;
    img.pixels.assign(static_cast<size_t>(size) * size * 3, 255);

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    auto update = [&](double x, double y) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    };
    for (int n = 0; n < coords.dim(0); ++n) update(coords.at(n, 0), coords.at(n, 1));
    for (int n = 0; n < proto_coords.dim(0); ++n) update(proto_coords.at(n, 0), proto_coords.at(n, 1));
    const double spanx = std::max(xmax - xmin, 1e-12), spany = std::max(ymax - ymin, 1e-12);
    const double margin = 0.06;
    auto px = [&](double x) { return (margin + (1 - 2 * margin) * (x - xmin) / spanx) * size; };
    auto py = [&](double y) { return (1.0 - margin - (1 - 2 * margin) * (y - ymin) / spany) * size; };

    int num_classes = 0;
    for (int l : labels) num_classes = std::max(num_classes, l + 1);
    num_classes = std::max(num_classes, proto_coords.dim(0));

    uint8_t rgb[3];
    for (int n = 0; n < coords.dim(0); ++n) {
        class_color(labels[n], num_classes, rgb);
        fill_disc(img, px(coords.at(n, 0)), py(coords.at(n, 1)), 2.2, rgb);
    }
    const uint8_t black[3] = {0, 0, 0};
    for (int c = 0; c < proto_coords.dim(0); ++c) {
        fill_disc(img, px(proto_coords.at(c, 0)), py(proto_coords.at(c, 1)), 7.0, black);
        class_color(c, num_classes, rgb);
        fill_disc(img, px(proto_coords.at(c, 0)), py(proto_coords.at(c, 1)), 5.0, rgb);
    }
    return img;
}

} // namespace protodiff
