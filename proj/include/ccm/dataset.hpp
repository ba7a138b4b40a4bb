#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ccm/forward_model.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// Deterministic seed derivation for per-sample randomness.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

enum class ObjectKind { Beads, Neurons, Mixed };

std::string to_string(ObjectKind k);
ObjectKind object_kind_from_string(const std::string& s);

enum class Split { Train, Validation, Test };

std::string to_string(Split s);

constexpr int kMergedLabel = 0;  // layer_label for merged samples

// One measurement/reference pair. layer_label 1..3 marks which scene layer
// carried the object; kMergedLabel marks a synthetic multi-layer sum.
struct Sample {
    Tensor ccm;  // [H,W], normalized to [0,1]
    Tensor ref;  // [H,W], normalized to [0,1]
    int layer_label = 1;
    double z_um = 0.0;
};

struct ManifestEntry {
    int id = 0;
    std::string file;
    int layer = 1;
    double z_um = 0.0;
    Split split = Split::Train;
};

struct DatasetManifest {
    int extent = 32;
    int meas_extent = 32;
    int per_layer = 0;
    int test_count = 0;
    uint64_t seed = 0;
    ObjectKind object = ObjectKind::Beads;
    double noise_sigma = 0.0;
    double conditioning = 1.0;
    bool merged = false;
    std::string forward_model_file;  // relative to the dataset directory
    std::vector<ManifestEntry> entries;

    std::vector<int> ids_of(Split s) const;
    int count_of_layer(int layer) const;
};

struct DatasetConfig {
    int extent = 32;
    int meas_extent = 32;
    int per_layer = 600;
    int test_count = 300;
    ObjectKind object = ObjectKind::Beads;
    int min_beads = 1;
    int max_beads = 3;
    double bead_diameter_px = 3.0;
    int neuron_branches = 4;
    double noise_sigma = 0.01;
    double conditioning = 1.0;
    uint64_t seed = 1;
};

// Generates per-layer single-object samples with the fixed split rule
// (test first, then 10% of the remainder for validation), writes one tensor
// container per sample pair plus the manifest and forward model.
DatasetManifest build_dataset(const DatasetConfig& config, const std::string& out_dir);

// Pixel-wise sums of the three samples' measurement and reference images,
// renormalized to [0,1]. Inputs must carry layer labels 1, 2, 3.
Sample merge_layers(const Sample& a, const Sample& b, const Sample& c);

// Builds the synthetic multi-layer dataset from a single-layer one by merging
// disjoint triples inside each split. Also copies the forward model file.
DatasetManifest build_merged_dataset(const DatasetManifest& src, const std::string& src_dir,
                                     const std::string& out_dir);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

void write_sample(const Sample& s, const std::string& path);
Sample read_sample(const std::string& path, int layer, double z_um);

std::vector<Sample> load_split(const DatasetManifest& m, const std::string& dir, Split split);

}  // namespace ccm
