#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ccm/autodiff.hpp"
#include "ccm/metrics.hpp"
#include "ccm/optimizer.hpp"
#include "ccm/training.hpp"
#include "testutil.hpp"

using namespace ccm;

namespace {

double eval_loss(ModelState& model, const std::vector<Sample>& samples) {
    auto input = make_var(make_input_batch(samples, [&] {
        std::vector<int> idx(samples.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        return idx;
    }()));
    auto out = forward(model, input, RunMode::Eval);
    const int B = static_cast<int>(samples.size());
    const int H = samples[0].ref.dim(0), W = samples[0].ref.dim(1);
    Tensor target({B, H, W, 1});
    for (int b = 0; b < B; ++b)
        std::copy(samples[static_cast<size_t>(b)].ref.raw().begin(), samples[static_cast<size_t>(b)].ref.raw().end(),
                  target.raw().begin() + static_cast<long>(b) * H * W);
    return pixelwise_bce(out, target)->value[0];
}

}  // namespace

TEST_CASE("one epoch on a toy set strictly reduces the training loss") {
    auto samples = testutil::make_bead_samples(50, 16, 5);

    // Initial training-mode loss, measured on a throwaway same-seed build so
    // the batch-norm state of the trained model is untouched.
    double before;
    {
        auto probe_model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 9);
        std::vector<int> idx(samples.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        auto out = forward(probe_model, make_var(make_input_batch(samples, idx)), RunMode::Train);
        const int B = static_cast<int>(samples.size());
        Tensor target({B, 16, 16, 1});
        for (int b = 0; b < B; ++b)
            std::copy(samples[static_cast<size_t>(b)].ref.raw().begin(),
                      samples[static_cast<size_t>(b)].ref.raw().end(), target.raw().begin() + b * 256L);
        before = pixelwise_bce(out, target)->value[0];
    }

    auto model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 9);
    TrainConfig cfg;
    cfg.max_epochs = 1;
    cfg.seed = 2;
    auto report = train_on_samples(model, samples, {}, cfg);
    CHECK(report.train_loss[0] < before);
}

TEST_CASE("single-sample overfit drives the loss under 0.05") {
    auto samples = testutil::make_bead_samples(1, 16, 6);
    // The one sample twice per batch keeps batch statistics well defined.
    std::vector<Sample> doubled = {samples[0], samples[0]};

    auto model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 10);
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_epochs = 200;  // one step per epoch on this two-copy set
    cfg.patience = 200;
    cfg.seed = 3;
    cfg.lr = 1e-2f;
    train_on_samples(model, doubled, {}, cfg);
    CHECK(eval_loss(model, samples) < 0.05);
}

TEST_CASE("fixed seed reproduces the training trace bit-identically") {
    auto samples = testutil::make_bead_samples(24, 16, 7, 0.01);
    std::vector<Sample> train_set(samples.begin(), samples.begin() + 18);
    std::vector<Sample> val_set(samples.begin() + 18, samples.end());

    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 11;

    auto m1 = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 21);
    auto m2 = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 21);
    auto r1 = train_on_samples(m1, train_set, val_set, cfg);
    auto r2 = train_on_samples(m2, train_set, val_set, cfg);

    REQUIRE(r1.epochs_run == r2.epochs_run);
    for (int e = 0; e < r1.epochs_run; ++e) {
        REQUIRE(r1.train_loss[static_cast<size_t>(e)] == r2.train_loss[static_cast<size_t>(e)]);
        REQUIRE(r1.val_loss[static_cast<size_t>(e)] == r2.val_loss[static_cast<size_t>(e)]);
    }
    CHECK(r1.best_epoch == r2.best_epoch);

    auto p1 = m1.params();
    auto p2 = m2.params();
    for (size_t i = 0; i < p1.size(); ++i)
        for (long j = 0; j < p1[i]->value.numel(); ++j) REQUIRE(p1[i]->value[j] == p2[i]->value[j]);
}

TEST_CASE("lr = 0 leaves parameters bit-identical") {
    auto samples = testutil::make_bead_samples(8, 16, 8);
    auto model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 33);
    std::vector<Tensor> before;
    for (auto& p : model.params()) before.push_back(p->value);

    TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.batch_size = 4;
    cfg.lr = 0.0f;
    cfg.seed = 4;
    train_on_samples(model, samples, {}, cfg);

    auto params = model.params();
    for (size_t i = 0; i < params.size(); ++i)
        for (long j = 0; j < params[i]->value.numel(); ++j) REQUIRE(params[i]->value[j] == before[i][j]);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
    auto samples = testutil::make_bead_samples(4, 16, 9);
    samples[1].ccm[5] = std::numeric_limits<float>::quiet_NaN();
    auto model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 3);
    TrainConfig cfg;
    cfg.max_epochs = 1;
    cfg.batch_size = 4;
    CHECK_THROWS_AS(train_on_samples(model, samples, {}, cfg), NumericError);
}

TEST_CASE("classifier training on a tiny set raises accuracy above chance") {
    auto samples = testutil::make_bead_samples(60, 16, 12);
    auto model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1C, 16, 2, 16, 1}, 14);
    TrainConfig cfg;
    cfg.max_epochs = 8;
    cfg.batch_size = 8;
    cfg.seed = 5;
    train_on_samples(model, samples, {}, cfg);

    std::vector<int> preds, labels;
    for (const auto& s : samples) {
        preds.push_back(infer_classify(model, s.ccm).first);
        labels.push_back(s.layer_label);
    }
    CHECK(accuracy(preds, labels) > 0.6);
}

TEST_CASE("train() validates manifest against the network") {
    auto samples = testutil::make_bead_samples(4, 16, 13);
    DatasetManifest manifest;
    manifest.extent = 32;  // model below is 16
    auto model = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1R, 16, 2, 8, 1}, 3);
    TrainConfig cfg;
    CHECK_THROWS_AS(train(model, manifest, "/nonexistent", cfg), ConfigError);

    manifest.extent = 16;
    manifest.merged = true;
    auto cls = build_model<float>(NetworkSpec{NetworkSpec::Kind::Ann1C, 16, 2, 16, 1}, 3);
    CHECK_THROWS_AS(train(cls, manifest, "/nonexistent", cfg), ConfigError);
}
