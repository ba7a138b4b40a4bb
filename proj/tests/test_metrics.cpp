#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ccm/metrics.hpp"
#include "testutil.hpp"

using namespace ccm;

namespace {

// Direct per-window SSIM, quadruple loops, no shared machinery with the
// integral-image implementation.
double ssim_oracle(const Tensor& a, const Tensor& b) {
    const int H = a.dim(0), W = a.dim(1), n = 7;
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0;
    int count = 0;
    for (int y = 0; y + n <= H; ++y)
        for (int x = 0; x + n <= W; ++x) {
            double ma = 0, mb = 0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    ma += a.at(y + i, x + j);
                    mb += b.at(y + i, x + j);
                }
            ma /= n * n;
            mb /= n * n;
            double va = 0, vb = 0, cov = 0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    const double da = a.at(y + i, x + j) - ma;
                    const double db = b.at(y + i, x + j) - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= n * n;
            vb /= n * n;
            cov /= n * n;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

}  // namespace

TEST_CASE("ssim: self-identity, constant images, oracle agreement") {
    auto rng = testutil::make_rng(2);
    auto x = testutil::rand_tensor<float>({16, 16}, rng);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-9));

    CHECK(ssim(Tensor({8, 8}, 0.2f), Tensor({8, 8}, 0.8f)) < 1.0);

    for (int trial = 0; trial < 5; ++trial) {
        auto a = testutil::rand_tensor<float>({15, 18}, rng);
        auto b = testutil::rand_tensor<float>({15, 18}, rng);
        CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-6);
        CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
        CHECK(ssim(a, b) <= 1.0);
    }

    CHECK_THROWS_AS(ssim(Tensor({8, 8}), Tensor({9, 9})), DimensionError);
    CHECK_THROWS_AS(ssim(Tensor({5, 5}), Tensor({5, 5})), DimensionError);
}

TEST_CASE("mae: unit values, symmetry, triangle inequality") {
    auto rng = testutil::make_rng(3);
    auto x = testutil::rand_tensor<float>({8, 8}, rng);
    CHECK(mae(x, x) == 0.0);
    CHECK(mae(Tensor({4, 4}, 0.0f), Tensor({4, 4}, 1.0f)) == doctest::Approx(1.0));

    auto a = testutil::rand_tensor<float>({8, 8}, rng);
    auto b = testutil::rand_tensor<float>({8, 8}, rng);
    auto c = testutil::rand_tensor<float>({8, 8}, rng);
    CHECK(mae(a, b) == doctest::Approx(mae(b, a)).epsilon(1e-12));
    CHECK(mae(a, c) <= mae(a, b) + mae(b, c) + 1e-9);

    CHECK_THROWS_AS(mae(Tensor({2, 2}), Tensor({3, 3})), DimensionError);
}

TEST_CASE("accuracy unit values") {
    CHECK(accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
    CHECK(accuracy({1, 1, 1}, {2, 3, 2}) == 0.0);

    std::vector<int> preds(1000, 1), labels(1000, 1);
    preds[10] = 2;
    preds[900] = 3;
    CHECK(accuracy(preds, labels) == doctest::Approx(0.998));

    CHECK_THROWS_AS(accuracy({}, {}), ArgumentError);
    CHECK_THROWS_AS(accuracy({1}, {1, 2}), DimensionError);
}

TEST_CASE("fwhm: triangle peak is exact by geometry") {
    // Rise by 0.25 per pixel to a peak of 1 at x=4: half-crossings at exactly
    // x=2 and x=6, width 4.
    Tensor img({3, 9});
    const float tri[9] = {0.0f, 0.25f, 0.5f, 0.75f, 1.0f, 0.75f, 0.5f, 0.25f, 0.0f};
    for (int x = 0; x < 9; ++x) img.at(1, x) = tri[x];
    CHECK(fwhm_px(img, 1) == doctest::Approx(4.0).epsilon(1e-9));

    // Conversion to micrometers by the field-of-view scale.
    CHECK(fwhm_um(img, 1, 200.0) == doctest::Approx(4.0 * 200.0 / 9.0).epsilon(1e-9));
}

TEST_CASE("fwhm: sampled gaussian matches the closed form within 5%") {
    const double s = 3.0;
    Tensor img({3, 32});
    for (int x = 0; x < 32; ++x) img.at(1, x) = static_cast<float>(std::exp(-0.5 * (x - 16.0) * (x - 16.0) / (s * s)));
    const double expect = 2.354820045 * s;
    CHECK(std::abs(fwhm_px(img, 1) - expect) / expect < 0.05);
}

TEST_CASE("fwhm error cases: flat row, twin peaks") {
    Tensor flat({2, 8});
    CHECK_THROWS_AS(fwhm_px(flat, 0), MeasurementError);

    Tensor twin({1, 11});
    const float two[11] = {0, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0};
    for (int x = 0; x < 11; ++x) twin.at(0, x) = two[x];
    CHECK_THROWS_AS(fwhm_px(twin, 0), MeasurementError);

    CHECK_THROWS_AS(fwhm_px(twin, 5), ArgumentError);
}

TEST_CASE("evaluate_model aggregates are exact means") {
    auto samples = testutil::make_bead_samples(6, 16, 77);
    auto model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 3);
    auto report = evaluate_model(model, samples);
    REQUIRE(report.metrics.per_sample_ssim.size() == 6);
    double s = 0, m = 0;
    for (double v : report.metrics.per_sample_ssim) s += v;
    for (double v : report.metrics.per_sample_mae) m += v;
    CHECK(report.metrics.ssim == s / 6.0);
    CHECK(report.metrics.mae == m / 6.0);
    CHECK(report.metrics.n_samples == 6);
}

TEST_CASE("bench emits exactly the four method rows with timings") {
    auto samples = testutil::make_bead_samples(4, 16, 78);
    auto ann1_r = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 3);
    auto ann1_c = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1C, 16, 2, 16, 1}, 4);
    auto ann2 = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann2, 16, 2, 8, 1}, 5);

    auto fwd = make_forward_model(16, 16, 78, 0.75, 0.0);
    auto svd = LinearReconstructor::fit(calibration_scan(fwd, 1), RankPolicy::energy(0.99), 16);

    auto rows = bench(ann1_r, ann1_c, ann2, svd, samples);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].method == "ann1_r");
    CHECK(rows[1].method == "ann1_c");
    CHECK(rows[2].method == "ann2");
    CHECK(rows[3].method == "svd");
    for (const auto& r : rows) CHECK(r.median_ms > 0.0);
    CHECK(rows[1].accuracy >= 0.0);
    CHECK(rows[0].accuracy == -1.0);
    CHECK(rows[3].ssim >= -1.0);

    const auto table = format_bench_table(rows);
    CHECK(table.find("ann1_r") != std::string::npos);
    CHECK(table.find("svd") != std::string::npos);
}
