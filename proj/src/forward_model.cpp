#include "ccm/forward_model.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <fstream>
#include <random>

#include "ccm/errors.hpp"
#include "ccm/tensor_io.hpp"

namespace ccm {

namespace {

constexpr double kBlurRadiusPx = 2.0;
constexpr double kFluctuationRatio = 0.5;  // fluctuation sigma_1 relative to the mean mode
constexpr double kMaxLayerCorrelation = 0.99;

// Separable Gaussian blur over a [E,E] image stored flat, zero-padded edges.
void blur_inplace(std::vector<double>& img, int extent, double radius) {
    const int half = static_cast<int>(std::ceil(3.0 * radius));
    std::vector<double> kernel(static_cast<size_t>(2 * half + 1));
    double ksum = 0;
    for (int i = -half; i <= half; ++i) ksum += kernel[static_cast<size_t>(i + half)] = std::exp(-0.5 * i * i / (radius * radius));
    for (auto& v : kernel) v /= ksum;

    std::vector<double> tmp(img.size());
    for (int y = 0; y < extent; ++y)
        for (int x = 0; x < extent; ++x) {
            double acc = 0;
            for (int i = -half; i <= half; ++i) {
                const int xx = x + i;
                if (xx < 0 || xx >= extent) continue;
                acc += kernel[static_cast<size_t>(i + half)] * img[static_cast<size_t>(y) * extent + xx];
            }
            tmp[static_cast<size_t>(y) * extent + x] = acc;
        }
    for (int y = 0; y < extent; ++y)
        for (int x = 0; x < extent; ++x) {
            double acc = 0;
            for (int i = -half; i <= half; ++i) {
                const int yy = y + i;
                if (yy < 0 || yy >= extent) continue;
                acc += kernel[static_cast<size_t>(i + half)] * tmp[static_cast<size_t>(yy) * extent + x];
            }
            img[static_cast<size_t>(y) * extent + x] = acc;
        }
}

Tensor64 make_layer_matrix(int object_extent, int meas_extent, uint64_t seed, double conditioning) {
    const long N = static_cast<long>(object_extent) * object_extent;
    const long M = static_cast<long>(meas_extent) * meas_extent;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    // White nonnegative field blurred over both planes: each column is a
    // smooth speckle image, and neighboring object pixels map to correlated
    // speckles, the way a lightpipe's intensity transport behaves.
    Eigen::MatrixXd a(M, N);
    std::vector<double> col(static_cast<size_t>(M));
    for (long j = 0; j < N; ++j) {
        for (long i = 0; i < M; ++i) col[static_cast<size_t>(i)] = uni(rng);
        blur_inplace(col, meas_extent, kBlurRadiusPx);
        for (long i = 0; i < M; ++i) a(i, j) = col[static_cast<size_t>(i)];
    }
    std::vector<double> row(static_cast<size_t>(N));
    for (long i = 0; i < M; ++i) {
        for (long j = 0; j < N; ++j) row[static_cast<size_t>(j)] = a(i, j);
        blur_inplace(row, object_extent, kBlurRadiusPx);
        for (long j = 0; j < N; ++j) a(i, j) = row[static_cast<size_t>(j)];
    }

    // Reshape the spectrum, keeping the operator's own singular vectors.
    // A nonnegative row-normalized operator is always dominated by its mean
    // (Perron) mode, so the decay law sigma_k ~ k^(-conditioning) is imposed
    // on the information-carrying fluctuation modes relative to that mode.
    Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const long r = svd.singularValues().size();
    Eigen::VectorXd s(r);
    const double s0 = svd.singularValues()(0);
    s(0) = s0;
    for (long k = 1; k < r; ++k)
        s(k) = kFluctuationRatio * s0 * std::pow(static_cast<double>(k), -conditioning);
    a = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();

    Tensor64 out({static_cast<int>(M), static_cast<int>(N)});
    for (long i = 0; i < M; ++i) {
        double row_sum = 0;
        for (long j = 0; j < N; ++j) {
            const double v = std::max(0.0, a(i, j));
            out[i * N + j] = v;
            row_sum += v;
        }
        if (row_sum <= 0) throw GenerationError("forward model produced an empty row");
        for (long j = 0; j < N; ++j) out[i * N + j] /= row_sum;
    }
    return out;
}

}  // namespace

double flat_correlation(const Tensor64& a, const Tensor64& b) {
    if (a.numel() != b.numel()) throw DimensionError("correlation of differently sized tensors");
    const long n = a.numel();
    const double ma = a.mean(), mb = b.mean();
    double sab = 0, saa = 0, sbb = 0;
    for (long i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0 || sbb == 0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

ForwardModel make_forward_model(int object_extent, int meas_extent, uint64_t seed, double conditioning,
                                double noise_sigma) {
    if (object_extent < 1 || meas_extent < 1) throw ArgumentError("forward model extents must be >= 1");
    if (noise_sigma < 0) throw ArgumentError("noise_sigma must be >= 0");

    ForwardModel m;
    m.object_extent = object_extent;
    m.meas_extent = meas_extent;
    m.noise_sigma = noise_sigma;
    m.conditioning = conditioning;
    m.seed = seed;
    for (int z = 0; z < 3; ++z)
        m.matrices[static_cast<size_t>(z)] =
            make_layer_matrix(object_extent, meas_extent, seed * 1000003ULL + static_cast<uint64_t>(z + 1), conditioning);

    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
            if (flat_correlation(m.matrices[static_cast<size_t>(i)], m.matrices[static_cast<size_t>(j)]) >=
                kMaxLayerCorrelation)
                throw GenerationError("layer operators too correlated; choose another seed");
    return m;
}

Tensor64 simulate_measurement_raw(const SceneStack& scene, const ForwardModel& model, uint64_t noise_seed) {
    const long N = model.n_object();
    const long M = model.n_meas();
    for (const auto& layer : scene.layers)
        if (layer.numel() != N)
            throw DimensionError("scene layer " + layer.shape_string() + " does not match object extent " +
                                 std::to_string(model.object_extent));

    Tensor64 y({static_cast<int>(M)});
    for (int z = 0; z < 3; ++z) {
        const auto& a = model.matrices[static_cast<size_t>(z)];
        const auto& x = scene.layers[static_cast<size_t>(z)];
        // Skip empty layers; single-layer scenes dominate dataset generation.
        bool any = false;
        for (long j = 0; j < N && !any; ++j) any = x[j] != 0.0f;
        if (!any) continue;
        for (long i = 0; i < M; ++i) {
            double acc = 0;
            const double* row = a.data() + i * N;
            for (long j = 0; j < N; ++j) acc += row[j] * static_cast<double>(x[j]);
            y[i] += acc;
        }
    }
    if (model.noise_sigma > 0) {
        std::mt19937_64 rng(noise_seed ? noise_seed : model.seed);
        std::normal_distribution<double> gauss(0.0, model.noise_sigma);
        for (long i = 0; i < M; ++i) y[i] += gauss(rng);
    }
    return y;
}

Tensor simulate_measurement(const SceneStack& scene, const ForwardModel& model, uint64_t noise_seed) {
    Tensor64 y = simulate_measurement_raw(scene, model, noise_seed);
    Tensor out({model.meas_extent, model.meas_extent});
    const double lo = y.min(), hi = y.max();
    if (hi > lo)
        for (long i = 0; i < y.numel(); ++i) out[i] = static_cast<float>((y[i] - lo) / (hi - lo));
    return out;
}

Tensor64 calibration_scan(const ForwardModel& model, int layer, uint64_t noise_seed) {
    if (layer < 1 || layer > 3) throw ArgumentError("layer must be 1..3");
    const long N = model.n_object();
    const long M = model.n_meas();
    Tensor64 calib({static_cast<int>(M), static_cast<int>(N)});

    SceneStack scene;
    for (auto& l : scene.layers) l = Tensor({model.object_extent, model.object_extent});
    auto& active = scene.layers[static_cast<size_t>(layer - 1)];
    for (long j = 0; j < N; ++j) {
        active[j] = 1.0f;
        const Tensor64 y = simulate_measurement_raw(scene, model, noise_seed ? noise_seed + static_cast<uint64_t>(j) : 0);
        active[j] = 0.0f;
        for (long i = 0; i < M; ++i) calib[i * N + j] = y[i];
    }
    return calib;
}

void save_forward_model(const ForwardModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("FWDM", 4);
    const uint8_t version = 1;
    os.write(reinterpret_cast<const char*>(&version), 1);
    auto put_u32 = [&os](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(static_cast<uint32_t>(model.object_extent));
    put_u32(static_cast<uint32_t>(model.meas_extent));
    put_u32(static_cast<uint32_t>(model.seed & 0xffffffffULL));
    put_u32(static_cast<uint32_t>(model.seed >> 32));
    Tensor64 params({2}, {model.noise_sigma, model.conditioning});
    write_tnsr(os, params);
    for (const auto& mat : model.matrices) write_tnsr(os, mat);
    if (!os) throw IoError("forward model write failed: " + path);
}

ForwardModel load_forward_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    uint8_t version = 0;
    is.read(reinterpret_cast<char*>(&version), 1);
    if (!is || std::string(magic, 4) != "FWDM") throw FormatError("not a forward model file: " + path);
    if (version != 1) throw FormatError("unsupported forward model version");
    auto get_u32 = [&is]() {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
               static_cast<uint32_t>(b[3]) << 24;
    };
    ForwardModel m;
    m.object_extent = static_cast<int>(get_u32());
    m.meas_extent = static_cast<int>(get_u32());
    const uint64_t lo = get_u32(), hi = get_u32();
    m.seed = lo | (hi << 32);
    Tensor64 params = read_tnsr<double>(is);
    if (params.numel() != 2) throw FormatError("forward model parameter block corrupt");
    m.noise_sigma = params[0];
    m.conditioning = params[1];
    for (auto& mat : m.matrices) mat = read_tnsr<double>(is);
    for (const auto& mat : m.matrices)
        if (mat.ndim() != 2 || mat.dim(0) != static_cast<int>(m.n_meas()) || mat.dim(1) != static_cast<int>(m.n_object()))
            throw FormatError("forward model matrix extent mismatch");
    return m;
}

}  // namespace ccm
