#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ccm/metrics.hpp"
#include "ccm/model_io.hpp"
#include "ccm/networks.hpp"
#include "testutil.hpp"

using namespace ccm;

namespace {

// Layer-by-layer parameter counting, independent of the builder.
long conv_params(int kh, int kw, int cin, int cout) { return static_cast<long>(kh) * kw * cin * cout + cout; }
long block_params(int cin, int cout) { return conv_params(3, 3, cin, cout) + conv_params(3, 3, cout, cout) + 2 * cout; }

long unet_param_oracle(const NetworkSpec& spec) {
    long total = 0;
    int cin = spec.in_channels;
    for (int l = 0; l < spec.depth; ++l) {
        const int cout = spec.base_channels << l;
        total += block_params(cin, cout);
        cin = cout;
    }
    const int cb = spec.base_channels << spec.depth;
    total += block_params(cin, cb);
    cin = cb;
    for (int l = spec.depth - 1; l >= 0; --l) {
        const int cskip = spec.base_channels << l;
        total += block_params(cin + cskip, cskip);
        cin = cskip;
    }
    total += conv_params(1, 1, cin, spec.out_planes());
    return total;
}

long classifier_param_oracle(const NetworkSpec& spec) {
    long total = 0;
    int cin = spec.in_channels;
    for (int i = 0; i < spec.classifier_blocks(); ++i) {
        const int cout = std::min(8 << (i / 2), 64);
        total += conv_params(3, 3, cin, cout) + 2 * cout;
        cin = cout;
    }
    total += static_cast<long>(cin) * 3 + 3;
    return total;
}

Tensor probe_image(int extent, uint64_t seed) {
    auto rng = testutil::make_rng(seed);
    return testutil::rand_tensor<float>({extent, extent}, rng);
}

}  // namespace

TEST_CASE("ann1_r: output shape, range, determinism") {
    auto spec = NetworkSpec::ann1_r(32);
    auto m1 = build_model<float>(spec, 7);
    auto m2 = build_model<float>(spec, 7);

    const Tensor probe = probe_image(32, 3);
    auto out1 = infer_reconstruct(m1, probe);
    auto out2 = infer_reconstruct(m2, probe);
    REQUIRE(out1.shape() == std::vector<int>{32, 32});
    for (long i = 0; i < out1.numel(); ++i) {
        CHECK(out1[i] > 0.0f);
        CHECK(out1[i] < 1.0f);
        REQUIRE(out1[i] == out2[i]);
    }
}

TEST_CASE("ann1_r rejects non-divisible extent") {
    NetworkSpec spec = NetworkSpec::ann1_r(20);  // 20 / 8 is not whole
    CHECK_THROWS_AS(build_model<float>(spec, 1), ConfigError);
}

TEST_CASE("parameter counts match the layer-by-layer oracle") {
    for (auto spec : {NetworkSpec::ann1_r(32), NetworkSpec::ann2(32), NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}}) {
        auto m = build_model<float>(spec, 1);
        CHECK(m.param_count() == unet_param_oracle(spec));
    }
    for (auto spec : {NetworkSpec::ann1_c(32), NetworkSpec{NetworkSpec::Kind::Ann1C, 16, 2, 16, 1}}) {
        auto m = build_model<float>(spec, 1);
        CHECK(m.param_count() == classifier_param_oracle(spec));
    }
}

TEST_CASE("shape contracts hold over random legal specs") {
    auto rng = testutil::make_rng(5);
    for (int trial = 0; trial < 8; ++trial) {
        NetworkSpec spec;
        spec.depth = 1 + static_cast<int>(rng() % 3);
        spec.base_channels = 4 + static_cast<int>(rng() % 5);
        const int mult = 1 << spec.depth;
        spec.extent = mult * (1 + static_cast<int>(rng() % 3));
        spec.kind = trial % 2 ? NetworkSpec::Kind::Ann2 : NetworkSpec::Kind::Ann1R;
        if (trial % 3 == 0) {
            spec.kind = NetworkSpec::Kind::Ann1C;
            spec.extent = std::max(spec.extent, mult);
        }
        auto m = build_model<float>(spec, 11 + static_cast<uint64_t>(trial));

        auto in_rng = testutil::make_rng(100 + static_cast<uint64_t>(trial));
        auto input = make_var(testutil::rand_tensor<float>({2, spec.extent, spec.extent, 1}, in_rng));
        auto out = forward(m, input, RunMode::Train);
        if (spec.kind == NetworkSpec::Kind::Ann1C) {
            REQUIRE(out->value.shape() == std::vector<int>{2, 3});
            for (int b = 0; b < 2; ++b) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += out->value.at(b, k);
                CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
            }
        } else {
            REQUIRE(out->value.shape() ==
                    std::vector<int>{2, spec.extent, spec.extent, spec.kind == NetworkSpec::Kind::Ann2 ? 3 : 1});
            for (long i = 0; i < out->value.numel(); ++i) {
                CHECK(out->value[i] > 0.0f);
                CHECK(out->value[i] < 1.0f);
            }
        }
    }
}

TEST_CASE("ann1_c: probabilities, pooling cadence, tie break") {
    auto m = build_model<float>(NetworkSpec::ann1_c(32), 3);
    CHECK(m.spec.classifier_blocks() == 8);

    auto [layer, probs] = infer_classify(m, probe_image(32, 9));
    CHECK(layer >= 1);
    CHECK(layer <= 3);
    CHECK(probs[0] + probs[1] + probs[2] == doctest::Approx(1.0).epsilon(1e-6));

    // Too small for 4 pooling stages.
    CHECK_THROWS_AS(build_model<float>(NetworkSpec::ann1_c(8), 1), ConfigError);

    // Argmax is invariant under positive rescaling of logits, and ties break
    // toward the lowest index.
    auto scaled_argmax = [](std::vector<float> logits, float scale) {
        for (auto& v : logits) v *= scale;
        auto probs = softmax(make_var(Tensor({static_cast<int>(logits.size())}, logits)));
        int best = 0;
        for (int k = 1; k < static_cast<int>(logits.size()); ++k)
            if (probs->value[k] > probs->value[best]) best = k;
        return best;
    };
    CHECK(scaled_argmax({0.3f, 1.5f, 0.2f}, 1.0f) == scaled_argmax({0.3f, 1.5f, 0.2f}, 37.0f));
    CHECK(scaled_argmax({0.7f, 0.7f, 0.1f}, 1.0f) == 0);
}

TEST_CASE("ann2: target places the reference on its labelled plane") {
    auto rng = testutil::make_rng(4);
    const Tensor ref = testutil::rand_tensor<float>({8, 8}, rng);
    const Tensor target = make_ann2_target(ref, 2);
    REQUIRE(target.shape() == std::vector<int>{8, 8, 3});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            CHECK(target.at(y, x, 0) == 0.0f);
            CHECK(target.at(y, x, 1) == ref.at(y, x));
            CHECK(target.at(y, x, 2) == 0.0f);
        }
    CHECK_THROWS_AS(make_ann2_target(ref, 0), ArgumentError);

    // All-zero prediction against an all-zero target costs nothing after
    // clipping.
    auto zero_pred = make_var(Tensor({8, 8, 3}));
    CHECK(pixelwise_bce(zero_pred, Tensor({8, 8, 3}))->value[0] <= 1e-6f);
}

TEST_CASE("gradient check: miniature classifier (2 blocks) vs finite differences") {
    NetworkSpec spec;
    spec.kind = NetworkSpec::Kind::Ann1C;
    spec.extent = 8;
    spec.depth = 1;
    auto m = build_model<double>(spec, 21);

    auto rng = testutil::make_rng(31);
    auto input = make_var(testutil::rand_tensor<double>({2, 8, 8, 1}, rng), true);
    const std::vector<int> labels = {1, 2};

    auto leaves = m.params();
    leaves.push_back(input);
    auto build = [&] { return categorical_ce(forward(m, input, RunMode::Train), labels); };
    CHECK(testutil::fd_max_rel_error(leaves, build, 1e-5) < 1e-4);
}

TEST_CASE("gradient check: miniature u-net vs finite differences") {
    NetworkSpec spec;
    spec.kind = NetworkSpec::Kind::Ann1R;
    spec.extent = 8;
    spec.depth = 1;
    spec.base_channels = 4;
    auto m = build_model<double>(spec, 22);

    auto rng = testutil::make_rng(32);
    auto input = make_var(testutil::rand_tensor<double>({2, 8, 8, 1}, rng), true);
    auto target = testutil::rand_tensor<double>({2, 8, 8, 1}, rng, 0.1, 0.9);

    auto leaves = m.params();
    leaves.push_back(input);
    auto build = [&] { return pixelwise_bce(forward(m, input, RunMode::Train), target); };
    CHECK(testutil::fd_max_rel_error(leaves, build, 1e-5) < 1e-4);
}

TEST_CASE("model save/load round trip") {
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "ccm_test_model.ccmm").string();

    auto m = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann2, 16, 2, 8, 1}, 55);
    m.train_steps = 123;
    const Tensor probe = probe_image(16, 8);
    const Tensor before = infer_reconstruct(m, probe);

    save_model(m, path);
    auto loaded = load_model(path);
    CHECK(loaded.spec == m.spec);
    CHECK(loaded.seed == m.seed);
    CHECK(loaded.train_steps == 123);
    const Tensor after = infer_reconstruct(loaded, probe);
    for (long i = 0; i < before.numel(); ++i) REQUIRE(before[i] == after[i]);

    // save -> load -> save is byte-stable.
    const auto path2 = (fs::temp_directory_path() / "ccm_test_model2.ccmm").string();
    save_model(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("model load rejects corruption and extent mismatch") {
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "ccm_test_model3.ccmm").string();
    auto m = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 5);
    save_model(m, path);

    // Corrupt magic.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_model(path), FormatError);

    // Patch the header channel width without touching tensor payloads: the
    // loader must flag the spec/tensor mismatch rather than silently reshape.
    save_model(m, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(14);  // magic(4) + version(1) + kind(1) + extent(4) + depth(4)
        const unsigned char base16[4] = {16, 0, 0, 0};
        f.write(reinterpret_cast<const char*>(base16), 4);
    }
    CHECK_THROWS_AS(load_model(path), FormatError);

    // A model used at the wrong extent fails loudly instead of adapting.
    save_model(m, path);
    auto loaded = load_model(path);
    CHECK_THROWS_AS(infer_reconstruct(loaded, Tensor({32, 32})), DimensionError);
}
