#pragma once

#include <string>
#include <vector>

#include "ccm/dataset.hpp"
#include "ccm/networks.hpp"

namespace ccm {

struct TrainConfig {
    int batch_size = 16;
    int max_epochs = 15;
    float lr = 1e-3f;
    int patience = 3;  // epochs without validation improvement before stopping
    uint64_t seed = 1;
};

struct TrainReport {
    std::vector<double> train_loss;  // one entry per epoch run
    std::vector<double> val_loss;
    std::vector<double> epoch_seconds;  // wall clock, informational only
    int epochs_run = 0;
    int best_epoch = -1;  // 0-based epoch whose weights were kept
    double best_val = 0.0;
};

// Mini-batch training with per-epoch shuffling, validation-based early
// stopping, and best-validation weight retention. The loss follows the
// network kind: pixel-wise binary cross-entropy for reconstructors,
// categorical cross-entropy for the classifier.
TrainReport train_on_samples(ModelState& model, const std::vector<Sample>& train_samples,
                             const std::vector<Sample>& val_samples, const TrainConfig& cfg);

// Loads the manifest's train/validation splits and delegates. Checks that
// the dataset matches the network (extent; merged data only for ann1_r-shaped
// models, single-layer data for ann2 and the classifier).
TrainReport train(ModelState& model, const DatasetManifest& manifest, const std::string& data_dir,
                  const TrainConfig& cfg);

// Input batch [B,H,W,1] from the samples at the given indices.
Tensor make_input_batch(const std::vector<Sample>& samples, const std::vector<int>& idx);

}  // namespace ccm
