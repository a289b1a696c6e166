#include "protodiff/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

#include "protodiff/errors.hpp"

namespace protodiff {

namespace {

const char kMagic[4] = {'P', 'D', 'C', 'K'};

template <typename T>
void append_raw(std::vector<unsigned char>& buf, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf.insert(buf.end(), b, b + sizeof(T));
}

template <typename T>
T read_raw(const std::vector<unsigned char>& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size())
        throw IoError("checkpoint truncated at byte offset " + std::to_string(pos));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

void write_tensor_file(const std::string& path, const TensorFile& tf) {
    nlohmann::json header = tf.header;
    header["tensor_count"] = tf.tensors.size();

    std::vector<unsigned char> payload;
    append_raw<uint32_t>(payload, tf.version);
    const std::string hdr = header.dump();
    append_raw<uint64_t>(payload, hdr.size());
    payload.insert(payload.end(), hdr.begin(), hdr.end());

    for (const auto& [name, t] : tf.tensors) {
        append_raw<uint32_t>(payload, static_cast<uint32_t>(name.size()));
        payload.insert(payload.end(), name.begin(), name.end());
        const char dt = tf.dtype_of(name);
        append_raw<uint8_t>(payload, dt == 'f' ? 0 : 1);
        append_raw<uint32_t>(payload, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) append_raw<uint32_t>(payload, static_cast<uint32_t>(d));
        if (dt == 'f') {
            for (double v : t.data) append_raw<float>(payload, static_cast<float>(v));
        } else {
            for (double v : t.data) append_raw<double>(payload, v);
        }
    }

    const uint32_t crc =
        static_cast<uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size())));

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    os.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!os) throw IoError("write failed: " + path);
}

TensorFile read_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError("cannot open: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 4 + sizeof(uint32_t) * 2) throw IoError("file too short: " + path);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("bad magic (not a PDCK file): " + path);

    const size_t payload_begin = 4;
    const size_t payload_end = bytes.size() - sizeof(uint32_t);
    uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + payload_end, sizeof(stored_crc));
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, bytes.data() + payload_begin, static_cast<uInt>(payload_end - payload_begin)));
    if (crc != stored_crc)
        throw IoError("checksum mismatch in " + path + " (stored " + std::to_string(stored_crc) +
                      ", computed " + std::to_string(crc) + ")");

    std::vector<unsigned char> payload(bytes.begin() + payload_begin, bytes.begin() + payload_end);
    size_t pos = 0;

    TensorFile tf;
    tf.version = read_raw<uint32_t>(payload, pos);
    if (tf.version != kTensorFileVersion)
        throw IoError("unsupported format version " + std::to_string(tf.version) + " in " + path);
    const uint64_t hdr_len = read_raw<uint64_t>(payload, pos);
    if (pos + hdr_len > payload.size()) throw IoError("truncated header in " + path);
    std::string hdr(payload.begin() + pos, payload.begin() + pos + hdr_len);
    pos += hdr_len;
    try {
        tf.header = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed header JSON in " + path + ": " + e.what());
    }

    const uint64_t count = tf.header.value("tensor_count", uint64_t{0});
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_raw<uint32_t>(payload, pos);
        if (pos + name_len > payload.size()) throw IoError("truncated record name in " + path);
        std::string name(payload.begin() + pos, payload.begin() + pos + name_len);
        pos += name_len;
        const uint8_t dt = read_raw<uint8_t>(payload, pos);
        if (dt > 1) throw IoError("unknown dtype tag in " + path);
        const uint32_t rank = read_raw<uint32_t>(payload, pos);
        std::vector<int> shape(rank);
        size_t n = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            shape[r] = static_cast<int>(read_raw<uint32_t>(payload, pos));
            n *= static_cast<size_t>(shape[r]);
        }
        Tensor t(shape);
        if (dt == 0) {
            for (size_t k = 0; k < n; ++k) t.data[k] = read_raw<float>(payload, pos);
            tf.dtypes[name] = 'f';
        } else {
            for (size_t k = 0; k < n; ++k) t.data[k] = read_raw<double>(payload, pos);
            tf.dtypes[name] = 'd';
        }
        tf.tensors.emplace(std::move(name), std::move(t));
    }
    if (pos != payload.size()) throw IoError("trailing bytes after records in " + path);
    return tf;
}

std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace protodiff
