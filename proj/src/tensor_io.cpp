#include "ccm/tensor_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "ccm/errors.hpp"

namespace ccm {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr uint8_t kVersion = 1;

template <typename T>
constexpr uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
           static_cast<uint32_t>(b[3]) << 24;
}

// Payload scalars are stored as little-endian IEEE-754 bit patterns.
template <typename T>
void put_scalars(std::ostream& os, const std::vector<T>& data) {
    using Bits = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    std::vector<unsigned char> buf(data.size() * sizeof(T));
    for (size_t i = 0; i < data.size(); ++i) {
        Bits bits;
        std::memcpy(&bits, &data[i], sizeof(T));
        for (size_t k = 0; k < sizeof(T); ++k) buf[i * sizeof(T) + k] = static_cast<unsigned char>(bits >> (8 * k));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
void get_scalars(std::istream& is, std::vector<T>& data) {
    using Bits = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    std::vector<unsigned char> buf(data.size() * sizeof(T));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    for (size_t i = 0; i < data.size(); ++i) {
        Bits bits = 0;
        for (size_t k = 0; k < sizeof(T); ++k) bits |= static_cast<Bits>(buf[i * sizeof(T) + k]) << (8 * k);
        std::memcpy(&data[i], &bits, sizeof(T));
    }
}

}  // namespace

template <typename T>
void write_tnsr(std::ostream& os, const TensorT<T>& t) {
    if (t.ndim() < 1 || t.ndim() > 255) throw DimensionError("tnsr: unsupported rank");
    os.write(kMagic, 4);
    const uint8_t head[4] = {kVersion, dtype_code<T>(), static_cast<uint8_t>(t.ndim()), 0};
    os.write(reinterpret_cast<const char*>(head), 4);
    for (int i = 0; i < t.ndim(); ++i) put_u32(os, static_cast<uint32_t>(t.dim(i)));
    put_scalars(os, t.raw());
    if (!os) throw IoError("tnsr: write failed");
}

template <typename T>
TensorT<T> read_tnsr(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("tnsr: bad magic");
    uint8_t head[4];
    is.read(reinterpret_cast<char*>(head), 4);
    if (!is) throw FormatError("tnsr: truncated header");
    if (head[0] != kVersion) throw FormatError("tnsr: unsupported version " + std::to_string(head[0]));
    if (head[1] != dtype_code<T>()) throw FormatError("tnsr: stored dtype does not match requested scalar type");
    const int ndim = head[2];
    if (ndim < 1) throw FormatError("tnsr: invalid rank");
    std::vector<int> dims(static_cast<size_t>(ndim));
    long n = 1;
    for (int i = 0; i < ndim; ++i) {
        dims[static_cast<size_t>(i)] = static_cast<int>(get_u32(is));
        if (dims[static_cast<size_t>(i)] <= 0) throw FormatError("tnsr: non-positive extent");
        n *= dims[static_cast<size_t>(i)];
    }
    std::vector<T> data(static_cast<size_t>(n));
    get_scalars(is, data);
    if (!is) throw FormatError("tnsr: truncated payload");
    return TensorT<T>(std::move(dims), std::move(data));
}

int peek_tnsr_dtype(std::istream& is) {
    const auto pos = is.tellg();
    char magic[4];
    uint8_t head[4];
    is.read(magic, 4);
    is.read(reinterpret_cast<char*>(head), 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("tnsr: bad magic");
    is.seekg(pos);
    return head[1];
}

template <typename T>
void write_tnsr_file(const std::string& path, const TensorT<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_tnsr(os, t);
}

template <typename T>
TensorT<T> read_tnsr_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tnsr<T>(is);
}

template void write_tnsr<float>(std::ostream&, const TensorT<float>&);
template void write_tnsr<double>(std::ostream&, const TensorT<double>&);
template TensorT<float> read_tnsr<float>(std::istream&);
template TensorT<double> read_tnsr<double>(std::istream&);
template void write_tnsr_file<float>(const std::string&, const TensorT<float>&);
template void write_tnsr_file<double>(const std::string&, const TensorT<double>&);
template TensorT<float> read_tnsr_file<float>(const std::string&);
template TensorT<double> read_tnsr_file<double>(const std::string&);

void export_pgm(const Tensor& image, const std::string& path) {
    const auto& s = image.shape();
    int H = 0, W = 0;
    if (s.size() == 2) {
        H = s[0];
        W = s[1];
    } else if (s.size() == 3 && s[2] == 1) {
        H = s[0];
        W = s[1];
    } else {
        throw DimensionError("export_pgm expects [H,W] or [H,W,1], got " + image.shape_string());
    }
    for (long i = 0; i < image.numel(); ++i)
        if (!(image[i] >= 0.0f && image[i] <= 1.0f))
            throw ArgumentError("export_pgm: pixel value outside [0,1]");

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(W));
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            row[static_cast<size_t>(x)] =
                static_cast<unsigned char>(std::lround(255.0f * image[static_cast<long>(y) * W + x]));
        os.write(reinterpret_cast<const char*>(row.data()), W);
    }
    if (!os) throw IoError("pgm: write failed");
}

}  // namespace ccm
