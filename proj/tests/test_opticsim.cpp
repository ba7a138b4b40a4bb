#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <filesystem>
#include <set>

#include "ccm/dataset.hpp"
#include "ccm/forward_model.hpp"
#include "ccm/phantoms.hpp"
#include "testutil.hpp"

using namespace ccm;
namespace fs = std::filesystem;

namespace {

// Numerical rank via a dense SVD of the finished matrix.
int numerical_rank(const Tensor64& a, double rel_threshold) {
    Eigen::MatrixXd m(a.dim(0), a.dim(1));
    for (int i = 0; i < a.dim(0); ++i)
        for (int j = 0; j < a.dim(1); ++j) m(i, j) = a.at(i, j);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
    const auto& s = svd.singularValues();
    int rank = 0;
    for (long k = 0; k < s.size(); ++k)
        if (s(k) > rel_threshold * s(0)) ++rank;
    return rank;
}

SceneStack empty_scene(int extent) {
    SceneStack s;
    for (auto& l : s.layers) l = Tensor({extent, extent});
    return s;
}

// 8-connected flood fill over a boolean mask; returns component count.
int count_components(const std::vector<bool>& mask, int H, int W) {
    std::vector<bool> seen(mask.size(), false);
    int components = 0;
    for (int start = 0; start < H * W; ++start) {
        if (!mask[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
        ++components;
        std::vector<int> stack = {start};
        seen[static_cast<size_t>(start)] = true;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int y = p / W, x = p % W;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                    const int np = ny * W + nx;
                    if (mask[static_cast<size_t>(np)] && !seen[static_cast<size_t>(np)]) {
                        seen[static_cast<size_t>(np)] = true;
                        stack.push_back(np);
                    }
                }
        }
    }
    return components;
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("ccm_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("forward model is deterministic per seed") {
    auto m1 = make_forward_model(8, 8, 11, 1.0, 0.0);
    auto m2 = make_forward_model(8, 8, 11, 1.0, 0.0);
    for (int z = 0; z < 3; ++z)
        for (long i = 0; i < m1.matrices[z].numel(); ++i) REQUIRE(m1.matrices[z][i] == m2.matrices[z][i]);
}

TEST_CASE("forward model rows sum to one") {
    auto m = make_forward_model(8, 10, 5, 1.0, 0.0);
    for (int z = 0; z < 3; ++z) {
        const auto& a = m.matrices[z];
        for (int i = 0; i < a.dim(0); ++i) {
            double s = 0;
            for (int j = 0; j < a.dim(1); ++j) s += a.at(i, j);
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("conditioning controls numerical rank") {
    auto gentle = make_forward_model(12, 12, 3, 0.5, 0.0);
    auto steep = make_forward_model(12, 12, 3, 2.0, 0.0);
    const int r_gentle = numerical_rank(gentle.matrices[0], 1e-3);
    const int r_steep = numerical_rank(steep.matrices[0], 1e-3);
    CHECK(r_gentle > r_steep);
}

TEST_CASE("layer operators are mutually distinct") {
    auto m = make_forward_model(8, 8, 21, 1.0, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) CHECK(std::abs(flat_correlation(m.matrices[i], m.matrices[j])) < 0.99);
}

TEST_CASE("simulate_measurement: zero scene, linearity, single-pixel column") {
    auto model = make_forward_model(6, 6, 2, 1.0, 0.0);
    auto scene = empty_scene(6);

    auto y0 = simulate_measurement_raw(scene, model);
    for (long i = 0; i < y0.numel(); ++i) CHECK(y0[i] == 0.0);
    auto n0 = simulate_measurement(scene, model);
    for (long i = 0; i < n0.numel(); ++i) CHECK(n0[i] == 0.0f);

    // Unit pixel j in layer 2 reads out column j of A_2.
    const int j = 13;
    scene.layers[1][j] = 1.0f;
    auto y = simulate_measurement_raw(scene, model);
    for (long i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(model.matrices[1][i * 36 + j]).epsilon(1e-12));

    // Superposition.
    auto rng = testutil::make_rng(4);
    auto s1 = empty_scene(6), s2 = empty_scene(6), s12 = empty_scene(6);
    for (int z = 0; z < 3; ++z) {
        s1.layers[z] = testutil::rand_tensor<float>({6, 6}, rng);
        s2.layers[z] = testutil::rand_tensor<float>({6, 6}, rng);
        for (long i = 0; i < 36; ++i) s12.layers[z][i] = s1.layers[z][i] + s2.layers[z][i];
    }
    auto ya = simulate_measurement_raw(s1, model);
    auto yb = simulate_measurement_raw(s2, model);
    auto yab = simulate_measurement_raw(s12, model);
    for (long i = 0; i < yab.numel(); ++i) CHECK(std::abs(yab[i] - (ya[i] + yb[i])) < 1e-6);
}

TEST_CASE("simulate_measurement rejects extent mismatch") {
    auto model = make_forward_model(6, 6, 2, 1.0, 0.0);
    auto scene = empty_scene(8);
    CHECK_THROWS_AS(simulate_measurement(scene, model), DimensionError);
}

TEST_CASE("calibration_scan recovers the layer matrix exactly") {
    auto model = make_forward_model(5, 7, 9, 1.0, 0.0);
    for (int layer : {1, 2}) {
        auto calib = calibration_scan(model, layer);
        const auto& a = model.matrices[static_cast<size_t>(layer - 1)];
        REQUIRE(calib.shape() == a.shape());
        for (long i = 0; i < a.numel(); ++i) REQUIRE(calib[i] == a[i]);
    }
    CHECK(calibration_scan(model, 1).dim(1) == 25);
}

TEST_CASE("calibration_scan noise has the configured scale") {
    auto model = make_forward_model(10, 10, 9, 1.0, 0.05);
    auto calib = calibration_scan(model, 1, 123);
    const auto& a = model.matrices[0];
    double var = 0;
    long n = 0;
    for (long i = 0; i < a.numel(); ++i) {
        const double d = calib[i] - a[i];
        var += d * d;
        ++n;
    }
    const double std_err = std::sqrt(var / n);
    CHECK(std_err == doctest::Approx(0.05).epsilon(0.1));
}

TEST_CASE("render_beads: empty, determinism, integrated intensity") {
    CHECK(render_beads(32, 0, 3.0, 1).max() == 0.0f);

    auto a = render_beads(32, 3, 3.0, 7);
    auto b = render_beads(32, 3, 3.0, 7);
    for (long i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);

    // One 3 px bead integrates to about the disk area pi * 1.5^2.
    auto one = render_beads(32, 1, 3.0, 5);
    const double area = M_PI * 1.5 * 1.5;
    double integral = 0;
    for (long i = 0; i < one.numel(); ++i) integral += one[i];
    CHECK(std::abs(integral - area) / area < 0.15);

    // Supersampled-disk oracle at a fixed center: dense sampling converges to
    // the same area.
    Tensor dense_img({32, 32});
    const double cx = 16.3, cy = 15.7, r = 1.5;
    double dense_area = 0;
    const int ss = 32;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            int hit = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss - cx;
                    const double py = y + (sy + 0.5) / ss - cy;
                    if (px * px + py * py <= r * r) ++hit;
                }
            dense_area += static_cast<double>(hit) / (ss * ss);
        }
    CHECK(std::abs(dense_area - area) / area < 0.01);

    // Impossible packing fails loudly.
    CHECK_THROWS_AS(render_beads(16, 60, 4.0, 3), GenerationError);
}

TEST_CASE("render_neuron: connectivity, determinism, foreground fraction") {
    auto a = render_neuron(32, 3);
    auto b = render_neuron(32, 3);
    for (long i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);

    int connected_ok = 0;
    double frac_min = 1.0, frac_max = 0.0;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        auto img = render_neuron(32, seed);
        const float half = img.max() / 2.0f;
        std::vector<bool> mask(static_cast<size_t>(img.numel()));
        int fg = 0;
        for (long i = 0; i < img.numel(); ++i) {
            mask[static_cast<size_t>(i)] = img[i] > half;
            fg += img[i] > half;
        }
        if (count_components(mask, 32, 32) == 1) ++connected_ok;
        const double frac = static_cast<double>(fg) / img.numel();
        frac_min = std::min(frac_min, frac);
        frac_max = std::max(frac_max, frac);
    }
    CHECK(connected_ok == 100);
    CHECK(frac_min >= 0.01);
    CHECK(frac_max <= 0.25);
}

TEST_CASE("build_dataset split arithmetic and label uniformity") {
    DatasetConfig cfg;
    cfg.extent = 8;
    cfg.meas_extent = 8;
    cfg.max_beads = 1;
    cfg.bead_diameter_px = 2.0;
    cfg.per_layer = 100;
    cfg.test_count = 30;
    cfg.noise_sigma = 0.0;
    cfg.seed = 3;
    auto dir = temp_dir("split");
    auto m = build_dataset(cfg, dir.string());

    CHECK(m.ids_of(Split::Test).size() == 30);
    CHECK(m.ids_of(Split::Validation).size() == 27);  // 10% of 270
    CHECK(m.ids_of(Split::Train).size() == 243);
    for (int layer = 1; layer <= 3; ++layer) CHECK(m.count_of_layer(layer) == 100);

    // Splits are disjoint and cover everything.
    std::set<int> all;
    for (Split s : {Split::Train, Split::Validation, Split::Test})
        for (int id : m.ids_of(s)) CHECK(all.insert(id).second);
    CHECK(all.size() == 300);
}

TEST_CASE("build_dataset regeneration is byte-identical") {
    DatasetConfig cfg;
    cfg.extent = 8;
    cfg.meas_extent = 8;
    cfg.max_beads = 1;
    cfg.bead_diameter_px = 2.0;
    cfg.per_layer = 10;
    cfg.test_count = 6;
    cfg.seed = 12;
    auto d1 = temp_dir("regen1");
    auto d2 = temp_dir("regen2");
    build_dataset(cfg, d1.string());
    build_dataset(cfg, d2.string());

    for (const auto& entry : fs::recursive_directory_iterator(d1)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), d1);
        std::ifstream f1(entry.path(), std::ios::binary);
        std::ifstream f2(d2 / rel, std::ios::binary);
        REQUIRE(f2.good());
        std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        REQUIRE(s1 == s2);
    }
}

TEST_CASE("manifest round trip") {
    DatasetConfig cfg;
    cfg.extent = 8;
    cfg.meas_extent = 8;
    cfg.max_beads = 1;
    cfg.bead_diameter_px = 2.0;
    cfg.per_layer = 5;
    cfg.test_count = 3;
    cfg.seed = 5;
    auto dir = temp_dir("manifest");
    auto m = build_dataset(cfg, dir.string());
    auto loaded = load_manifest((dir / "manifest.txt").string());
    CHECK(loaded.extent == m.extent);
    CHECK(loaded.seed == m.seed);
    CHECK(loaded.entries.size() == m.entries.size());
    for (size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(loaded.entries[i].id == m.entries[i].id);
        CHECK(loaded.entries[i].file == m.entries[i].file);
        CHECK(loaded.entries[i].layer == m.entries[i].layer);
        CHECK(loaded.entries[i].split == m.entries[i].split);
    }
}

TEST_CASE("merge_layers: identity on zeros, permutation invariance, peak bound") {
    auto rng = testutil::make_rng(8);
    Sample s1, s2, s3;
    s1.ccm = testutil::rand_tensor<float>({8, 8}, rng);
    s1.ref = testutil::rand_tensor<float>({8, 8}, rng);
    s1.layer_label = 1;
    s2.ccm = Tensor({8, 8});
    s2.ref = Tensor({8, 8});
    s2.layer_label = 2;
    s3.ccm = Tensor({8, 8});
    s3.ref = Tensor({8, 8});
    s3.layer_label = 3;

    // Merging with two empty samples renormalizes the original.
    auto m = merge_layers(s1, s2, s3);
    auto expect_ccm = normalize_unit(s1.ccm);
    for (long i = 0; i < m.ccm.numel(); ++i) CHECK(m.ccm[i] == doctest::Approx(expect_ccm[i]).epsilon(1e-6));
    CHECK(m.layer_label == kMergedLabel);

    // Permutation invariance.
    s2.ccm = testutil::rand_tensor<float>({8, 8}, rng);
    s2.ref = testutil::rand_tensor<float>({8, 8}, rng);
    s3.ccm = testutil::rand_tensor<float>({8, 8}, rng);
    s3.ref = testutil::rand_tensor<float>({8, 8}, rng);
    auto m123 = merge_layers(s1, s2, s3);
    auto m312 = merge_layers(s3, s1, s2);
    for (long i = 0; i < m123.ccm.numel(); ++i) REQUIRE(m123.ccm[i] == m312.ccm[i]);

    // Pre-normalization peak bounded by the sum of the individual maxima.
    float pre_peak = 0;
    for (long i = 0; i < s1.ccm.numel(); ++i)
        pre_peak = std::max(pre_peak, s1.ccm[i] + s2.ccm[i] + s3.ccm[i]);
    CHECK(pre_peak <= s1.ccm.max() + s2.ccm.max() + s3.ccm.max() + 1e-6f);

    // Duplicate labels rejected.
    s3.layer_label = 2;
    CHECK_THROWS_AS(merge_layers(s1, s2, s3), ArgumentError);
}

TEST_CASE("merged dataset: targets equal normalized sums, splits leak-free") {
    DatasetConfig cfg;
    cfg.extent = 8;
    cfg.meas_extent = 8;
    cfg.max_beads = 1;
    cfg.bead_diameter_px = 2.0;
    cfg.per_layer = 12;
    cfg.test_count = 9;
    cfg.seed = 31;
    auto dir = temp_dir("merged_src");
    auto out = temp_dir("merged_out");
    auto src = build_dataset(cfg, dir.string());
    auto merged = build_merged_dataset(src, dir.string(), out.string());

    CHECK(merged.merged);
    CHECK(!merged.entries.empty());
    for (const auto& e : merged.entries) CHECK(e.layer == kMergedLabel);

    // Every merged sample is normalized to [0,1] with max exactly 1.
    for (const auto& e : merged.entries) {
        auto s = read_sample((out / e.file).string(), e.layer, e.z_um);
        CHECK(s.ccm.max() == doctest::Approx(1.0f));
        CHECK(s.ref.max() == doctest::Approx(1.0f));
        CHECK(s.ccm.min() >= 0.0f);
    }
}
