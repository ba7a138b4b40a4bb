#include "ccm/linear_recon.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <fstream>

#include "ccm/errors.hpp"
#include "ccm/tensor_io.hpp"

namespace ccm {

int choose_rank(const std::vector<double>& singular_values, const RankPolicy& policy) {
    if (singular_values.empty()) throw ArgumentError("choose_rank: empty spectrum");
    for (size_t i = 0; i < singular_values.size(); ++i) {
        if (singular_values[i] <= 0) throw ArgumentError("choose_rank: singular values must be positive");
        if (i > 0 && singular_values[i] > singular_values[i - 1])
            throw ArgumentError("choose_rank: singular values must be non-increasing");
    }
    const int n = static_cast<int>(singular_values.size());
    if (policy.kind == RankPolicy::Kind::Fixed) {
        if (policy.fixed_k < 1 || policy.fixed_k > n) throw ArgumentError("choose_rank: fixed rank out of range");
        return policy.fixed_k;
    }
    double total = 0;
    for (double s : singular_values) total += s * s;
    double partial = 0;
    for (int k = 0; k < n; ++k) {
        partial += singular_values[static_cast<size_t>(k)] * singular_values[static_cast<size_t>(k)];
        if (partial >= policy.tau * total) return k + 1;
    }
    return n;
}

LinearReconstructor LinearReconstructor::fit(const Tensor64& calib, const RankPolicy& policy, int object_extent) {
    if (calib.ndim() != 2) throw DimensionError("fit expects a [M,N] calibration matrix");
    if (!calib.all_finite()) throw NumericError("calibration matrix contains non-finite entries");
    const int M = calib.dim(0), N = calib.dim(1);

    Eigen::MatrixXd a(M, N);
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) a(i, j) = calib.at(i, j);

    Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = svd.singularValues();

    std::vector<double> positive;
    for (long k = 0; k < s.size(); ++k) {
        if (s(k) <= 0) break;  // trailing zeros of a rank-deficient matrix
        positive.push_back(s(k));
    }
    if (positive.empty()) throw NumericError("calibration matrix has no positive singular values");

    LinearReconstructor r;
    r.rank_ = choose_rank(positive, policy);
    r.policy_ = policy;
    r.object_extent_ = object_extent;
    r.sigma_.assign(positive.begin(), positive.begin() + r.rank_);
    r.u_ = Tensor64({M, r.rank_});
    r.v_ = Tensor64({N, r.rank_});
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < r.rank_; ++k) r.u_.at(i, k) = svd.matrixU()(i, k);
    for (int j = 0; j < N; ++j)
        for (int k = 0; k < r.rank_; ++k) r.v_.at(j, k) = svd.matrixV()(j, k);
    return r;
}

Tensor64 LinearReconstructor::reconstruct_raw(const Tensor64& y) const {
    if (rank_ == 0) throw StateError("reconstructor not fitted");
    const int M = u_.dim(0), N = v_.dim(0);
    if (y.numel() != M)
        throw DimensionError("measurement size " + std::to_string(y.numel()) + " does not match calibration M=" +
                             std::to_string(M));
    std::vector<double> coeff(static_cast<size_t>(rank_), 0.0);
    for (int k = 0; k < rank_; ++k) {
        double acc = 0;
        for (int i = 0; i < M; ++i) acc += u_.at(i, k) * y[i];
        coeff[static_cast<size_t>(k)] = acc / sigma_[static_cast<size_t>(k)];
    }
    Tensor64 x({N});
    for (int j = 0; j < N; ++j) {
        double acc = 0;
        for (int k = 0; k < rank_; ++k) acc += v_.at(j, k) * coeff[static_cast<size_t>(k)];
        x[j] = acc;
    }
    return x;
}

Tensor LinearReconstructor::reconstruct(const Tensor& y) const {
    Tensor64 flat({static_cast<int>(y.numel())});
    for (long i = 0; i < y.numel(); ++i) flat[i] = static_cast<double>(y[i]);
    Tensor64 x = reconstruct_raw(flat);
    for (long i = 0; i < x.numel(); ++i) x[i] = std::max(0.0, x[i]);  // fluorescence is nonnegative

    const int N = static_cast<int>(x.numel());
    int side = object_extent_;
    if (side <= 0) {
        side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(N))));
        if (side * side != N) side = 0;
    }
    Tensor out = side > 0 ? Tensor({side, side}) : Tensor({N});
    const double lo = x.min(), hi = x.max();
    if (hi > lo)
        for (long i = 0; i < x.numel(); ++i) out[i] = static_cast<float>((x[i] - lo) / (hi - lo));
    return out;
}

void LinearReconstructor::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("LREC", 4);
    const uint8_t version = 1;
    const uint8_t kind = policy_.kind == RankPolicy::Kind::Fixed ? 0 : 1;
    os.write(reinterpret_cast<const char*>(&version), 1);
    os.write(reinterpret_cast<const char*>(&kind), 1);
    auto put_u32 = [&os](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(static_cast<uint32_t>(rank_));
    put_u32(static_cast<uint32_t>(object_extent_));
    put_u32(static_cast<uint32_t>(policy_.fixed_k));
    Tensor64 tau({1}, {policy_.tau});
    write_tnsr(os, tau);
    Tensor64 sig({rank_});
    for (int k = 0; k < rank_; ++k) sig[k] = sigma_[static_cast<size_t>(k)];
    write_tnsr(os, sig);
    write_tnsr(os, u_);
    write_tnsr(os, v_);
    if (!os) throw IoError("reconstructor write failed: " + path);
}

LinearReconstructor LinearReconstructor::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "LREC") throw FormatError("not a reconstructor file: " + path);
    uint8_t version = 0, kind = 0;
    is.read(reinterpret_cast<char*>(&version), 1);
    is.read(reinterpret_cast<char*>(&kind), 1);
    if (version != 1) throw FormatError("unsupported reconstructor version");
    auto get_u32 = [&is]() {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
               static_cast<uint32_t>(b[3]) << 24;
    };
    LinearReconstructor r;
    r.rank_ = static_cast<int>(get_u32());
    r.object_extent_ = static_cast<int>(get_u32());
    r.policy_.fixed_k = static_cast<int>(get_u32());
    r.policy_.kind = kind == 0 ? RankPolicy::Kind::Fixed : RankPolicy::Kind::Energy;
    Tensor64 tau = read_tnsr<double>(is);
    r.policy_.tau = tau[0];
    Tensor64 sig = read_tnsr<double>(is);
    if (sig.numel() != r.rank_) throw FormatError("reconstructor sigma block corrupt");
    r.sigma_.assign(sig.raw().begin(), sig.raw().end());
    r.u_ = read_tnsr<double>(is);
    r.v_ = read_tnsr<double>(is);
    if (r.u_.ndim() != 2 || r.v_.ndim() != 2 || r.u_.dim(1) != r.rank_ || r.v_.dim(1) != r.rank_)
        throw FormatError("reconstructor factors corrupt");
    return r;
}

}  // namespace ccm
