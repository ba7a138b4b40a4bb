#include "ccm/model_io.hpp"

#include <cstring>
#include <fstream>

#include "ccm/errors.hpp"
#include "ccm/tensor_io.hpp"

namespace ccm {

std::string to_string(NetworkSpec::Kind k) {
    switch (k) {
        case NetworkSpec::Kind::Ann1R: return "ann1_r";
        case NetworkSpec::Kind::Ann1C: return "ann1_c";
        case NetworkSpec::Kind::Ann2: return "ann2";
    }
    return "ann1_r";
}

NetworkSpec::Kind network_kind_from_string(const std::string& s) {
    if (s == "ann1_r") return NetworkSpec::Kind::Ann1R;
    if (s == "ann1_c") return NetworkSpec::Kind::Ann1C;
    if (s == "ann2") return NetworkSpec::Kind::Ann2;
    throw ArgumentError("unknown network kind: " + s);
}

namespace {

constexpr char kMagic[4] = {'C', 'C', 'M', 'M'};
constexpr uint8_t kVersion = 1;

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

void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v & 0xffffffffULL));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint64_t get_u64(std::istream& is) {
    const uint64_t lo = get_u32(is);
    const uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

}  // namespace

void save_model(ModelState& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);

    os.write(kMagic, 4);
    const uint8_t head[2] = {kVersion, static_cast<uint8_t>(model.spec.kind)};
    os.write(reinterpret_cast<const char*>(head), 2);
    put_u32(os, static_cast<uint32_t>(model.spec.extent));
    put_u32(os, static_cast<uint32_t>(model.spec.depth));
    put_u32(os, static_cast<uint32_t>(model.spec.base_channels));
    put_u32(os, static_cast<uint32_t>(model.spec.in_channels));
    put_u64(os, model.seed);
    put_u64(os, static_cast<uint64_t>(model.train_steps));

    uint32_t count = 0;
    model.for_each_tensor([&count](const std::string&, Tensor&) { ++count; });
    put_u32(os, count);

    model.for_each_tensor([&os](const std::string& name, Tensor& t) {
        if (name.size() > 0xffff) throw IoError("tensor name too long");
        const uint16_t len = static_cast<uint16_t>(name.size());
        const unsigned char lb[2] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8)};
        os.write(reinterpret_cast<const char*>(lb), 2);
        os.write(name.data(), len);
        write_tnsr(os, t);
    });
    if (!os) throw IoError("model write failed: " + path);
}

ModelState load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a model file: " + path);
    uint8_t head[2];
    is.read(reinterpret_cast<char*>(head), 2);
    if (head[0] != kVersion) throw FormatError("unsupported model version " + std::to_string(head[0]));
    if (head[1] > 2) throw FormatError("corrupt network kind");

    NetworkSpec spec;
    spec.kind = static_cast<NetworkSpec::Kind>(head[1]);
    spec.extent = static_cast<int>(get_u32(is));
    spec.depth = static_cast<int>(get_u32(is));
    spec.base_channels = static_cast<int>(get_u32(is));
    spec.in_channels = static_cast<int>(get_u32(is));
    const uint64_t seed = get_u64(is);
    const long steps = static_cast<long>(get_u64(is));
    const uint32_t count = get_u32(is);
    if (!is) throw FormatError("truncated model header: " + path);

    ModelState model = build_model<float>(spec, seed);
    model.train_steps = steps;

    uint32_t expected = 0;
    model.for_each_tensor([&expected](const std::string&, Tensor&) { ++expected; });
    if (count != expected)
        throw FormatError("model holds " + std::to_string(count) + " tensors, spec expects " +
                          std::to_string(expected));

    model.for_each_tensor([&is, &path](const std::string& name, Tensor& t) {
        unsigned char lb[2];
        is.read(reinterpret_cast<char*>(lb), 2);
        const uint16_t len = static_cast<uint16_t>(lb[0] | (lb[1] << 8));
        std::string stored(len, '\0');
        is.read(stored.data(), len);
        if (!is) throw FormatError("truncated model tensor table: " + path);
        if (stored != name)
            throw FormatError("model tensor order mismatch: expected " + name + ", found " + stored);
        Tensor loaded = read_tnsr<float>(is);
        if (!(loaded.shape() == t.shape()))
            throw FormatError("tensor " + name + " has extent " + loaded.shape_string() + ", spec expects " +
                              t.shape_string());
        t = std::move(loaded);
    });
    return model;
}

}  // namespace ccm
