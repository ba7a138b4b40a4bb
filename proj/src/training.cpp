#include "ccm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include "ccm/errors.hpp"
#include "ccm/optimizer.hpp"

namespace ccm {

namespace {

Tensor make_recon_target(const std::vector<Sample>& samples, const std::vector<int>& idx) {
    const int H = samples[0].ref.dim(0), W = samples[0].ref.dim(1);
    const int B = static_cast<int>(idx.size());
    Tensor t({B, H, W, 1});
    for (int b = 0; b < B; ++b) {
        const auto& ref = samples[static_cast<size_t>(idx[static_cast<size_t>(b)])].ref;
        std::copy(ref.raw().begin(), ref.raw().end(), t.raw().begin() + static_cast<long>(b) * H * W);
    }
    return t;
}

Tensor make_three_plane_target(const std::vector<Sample>& samples, const std::vector<int>& idx) {
    const int H = samples[0].ref.dim(0), W = samples[0].ref.dim(1);
    const int B = static_cast<int>(idx.size());
    Tensor t({B, H, W, 3});
    for (int b = 0; b < B; ++b) {
        const auto& s = samples[static_cast<size_t>(idx[static_cast<size_t>(b)])];
        const Tensor plane = make_ann2_target(s.ref, s.layer_label);
        std::copy(plane.raw().begin(), plane.raw().end(), t.raw().begin() + static_cast<long>(b) * H * W * 3);
    }
    return t;
}

std::vector<int> make_labels(const std::vector<Sample>& samples, const std::vector<int>& idx) {
    std::vector<int> labels;
    for (int i : idx) {
        const int layer = samples[static_cast<size_t>(i)].layer_label;
        if (layer < 1 || layer > 3) throw ConfigError("classifier training needs layer labels 1..3");
        labels.push_back(layer - 1);
    }
    return labels;
}

// Loss over one batch; the graph is recorded only in train mode contexts
// where gradients are wanted (params always require grad, so recording
// happens in both; eval just never calls backward).
Var batch_loss(ModelState& model, const std::vector<Sample>& samples, const std::vector<int>& idx,
               RunMode mode) {
    auto input = make_var(make_input_batch(samples, idx));
    auto out = forward(model, input, mode);
    switch (model.spec.kind) {
        case NetworkSpec::Kind::Ann1R:
            return pixelwise_bce(out, make_recon_target(samples, idx));
        case NetworkSpec::Kind::Ann2:
            return pixelwise_bce(out, make_three_plane_target(samples, idx));
        case NetworkSpec::Kind::Ann1C:
            return categorical_ce(out, make_labels(samples, idx));
    }
    throw ConfigError("unknown network kind");
}

double dataset_loss(ModelState& model, const std::vector<Sample>& samples, int batch_size) {
    double total = 0;
    long n = 0;
    std::vector<int> idx;
    for (int start = 0; start < static_cast<int>(samples.size()); start += batch_size) {
        idx.clear();
        for (int i = start; i < std::min<int>(start + batch_size, static_cast<int>(samples.size())); ++i)
            idx.push_back(i);
        const double loss = batch_loss(model, samples, idx, RunMode::Eval)->value[0];
        total += loss * static_cast<double>(idx.size());
        n += static_cast<long>(idx.size());
    }
    return total / static_cast<double>(n);
}

}  // namespace

Tensor make_input_batch(const std::vector<Sample>& samples, const std::vector<int>& idx) {
    if (idx.empty()) throw ArgumentError("empty batch");
    const int H = samples[0].ccm.dim(0), W = samples[0].ccm.dim(1);
    const int B = static_cast<int>(idx.size());
    Tensor t({B, H, W, 1});
    for (int b = 0; b < B; ++b) {
        const auto& ccm = samples[static_cast<size_t>(idx[static_cast<size_t>(b)])].ccm;
        if (ccm.dim(0) != H || ccm.dim(1) != W) throw DimensionError("ragged sample extents in batch");
        std::copy(ccm.raw().begin(), ccm.raw().end(), t.raw().begin() + static_cast<long>(b) * H * W);
    }
    return t;
}

TrainReport train_on_samples(ModelState& model, const std::vector<Sample>& train_samples,
                             const std::vector<Sample>& val_samples, const TrainConfig& cfg) {
    if (train_samples.empty()) throw ConfigError("no training samples");
    if (cfg.batch_size < 2) throw ConfigError("batch size must be >= 2 for batch normalization");
    if (cfg.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (train_samples[0].ccm.dim(0) != model.spec.extent)
        throw ConfigError("dataset extent " + std::to_string(train_samples[0].ccm.dim(0)) +
                          " does not match network extent " + std::to_string(model.spec.extent));

    AdamConfig ocfg;
    ocfg.lr = cfg.lr;
    Adam opt(model.params(), ocfg);
    std::mt19937_64 rng(cfg.seed);

    TrainReport report;
    report.best_val = std::numeric_limits<double>::infinity();

    // Snapshot/restore of everything persistent, for best-epoch retention.
    auto snapshot = [&model]() {
        std::vector<Tensor> tensors;
        model.for_each_tensor([&tensors](const std::string&, Tensor& t) { tensors.push_back(t); });
        return tensors;
    };
    auto restore = [&model](const std::vector<Tensor>& tensors) {
        size_t i = 0;
        model.for_each_tensor([&tensors, &i](const std::string&, Tensor& t) { t = tensors[i++]; });
    };
    std::vector<Tensor> best = snapshot();
    long best_steps = model.train_steps;

    std::vector<int> order(train_samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    int stale_epochs = 0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);

        double epoch_loss = 0;
        long epoch_n = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            std::vector<int> idx(order.begin() + static_cast<long>(start),
                                 order.begin() + static_cast<long>(std::min(order.size(),
                                                                            start + static_cast<size_t>(cfg.batch_size))));
            if (idx.size() < 2) continue;  // batch norm needs at least 2

            opt.zero_grad();
            auto loss = batch_loss(model, train_samples, idx, RunMode::Train);
            const double lv = loss->value[0];
            if (!std::isfinite(lv))
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(opt.step_count()));
            backward(loss);
            opt.step();
            ++model.train_steps;
            epoch_loss += lv * static_cast<double>(idx.size());
            epoch_n += static_cast<long>(idx.size());
        }
        report.train_loss.push_back(epoch_loss / static_cast<double>(epoch_n));

        double val = report.train_loss.back();
        if (!val_samples.empty()) val = dataset_loss(model, val_samples, cfg.batch_size);
        report.val_loss.push_back(val);
        report.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        ++report.epochs_run;

        if (val < report.best_val) {
            report.best_val = val;
            report.best_epoch = epoch;
            best = snapshot();
            best_steps = model.train_steps;
            stale_epochs = 0;
        } else if (++stale_epochs >= cfg.patience) {
            break;
        }
    }

    restore(best);
    model.train_steps = best_steps;
    return report;
}

TrainReport train(ModelState& model, const DatasetManifest& manifest, const std::string& data_dir,
                  const TrainConfig& cfg) {
    if (manifest.extent != model.spec.extent)
        throw ConfigError("dataset extent " + std::to_string(manifest.extent) + " vs network extent " +
                          std::to_string(model.spec.extent));
    const bool needs_layers =
        model.spec.kind == NetworkSpec::Kind::Ann1C || model.spec.kind == NetworkSpec::Kind::Ann2;
    if (needs_layers && manifest.merged)
        throw ConfigError(to_string(model.spec.kind) + " requires single-layer data, got a merged dataset");

    const auto train_samples = load_split(manifest, data_dir, Split::Train);
    const auto val_samples = load_split(manifest, data_dir, Split::Validation);
    return train_on_samples(model, train_samples, val_samples, cfg);
}

}  // namespace ccm
