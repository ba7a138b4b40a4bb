#include "ccm/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ccm/errors.hpp"
#include "ccm/phantoms.hpp"
#include "ccm/tensor_io.hpp"

namespace fs = std::filesystem;

namespace ccm {

namespace {

constexpr double kLayerSpacingUm = 50.0;
constexpr double kMaxIdenticalSceneCorrelation = 0.95;

Tensor render_object(const DatasetConfig& cfg, uint64_t seed) {
    switch (cfg.object) {
        case ObjectKind::Beads: {
            std::mt19937_64 rng(seed);
            std::uniform_int_distribution<int> n(cfg.min_beads, cfg.max_beads);
            return render_beads(cfg.extent, n(rng), cfg.bead_diameter_px, mix_seed(seed, 1));
        }
        case ObjectKind::Neurons:
            return render_neuron(cfg.extent, mix_seed(seed, 2), cfg.neuron_branches);
        case ObjectKind::Mixed: {
            std::mt19937_64 rng(seed);
            if (rng() % 2 == 0) {
                std::uniform_int_distribution<int> n(cfg.min_beads, cfg.max_beads);
                return render_beads(cfg.extent, n(rng), cfg.bead_diameter_px, mix_seed(seed, 1));
            }
            return render_neuron(cfg.extent, mix_seed(seed, 2), cfg.neuron_branches);
        }
    }
    throw ArgumentError("unknown object kind");
}

// Same object placed at each layer in turn must give distinguishable
// measurements, otherwise the classifier has nothing to learn from.
void check_layer_separability(const DatasetConfig& cfg, const ForwardModel& model) {
    double corr_sum = 0;
    int corr_n = 0;
    for (int probe = 0; probe < 3; ++probe) {
        const Tensor obj = render_object(cfg, mix_seed(cfg.seed, 900 + static_cast<uint64_t>(probe)));
        std::array<Tensor64, 3> meas;
        for (int z = 0; z < 3; ++z) {
            SceneStack scene;
            for (auto& l : scene.layers) l = Tensor({cfg.extent, cfg.extent});
            scene.layers[static_cast<size_t>(z)] = obj;
            meas[static_cast<size_t>(z)] = simulate_measurement_raw(scene, model, 0);
        }
        for (int i = 0; i < 3; ++i)
            for (int j = i + 1; j < 3; ++j) {
                corr_sum += flat_correlation(meas[static_cast<size_t>(i)], meas[static_cast<size_t>(j)]);
                ++corr_n;
            }
    }
    if (corr_sum / corr_n >= kMaxIdenticalSceneCorrelation)
        throw GenerationError("cross-layer measurements too correlated to classify");
}

std::string sample_filename(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "samples/s%05d.tnsr", id);
    return buf;
}

void assign_splits(std::vector<ManifestEntry>& entries, int test_count, uint64_t seed) {
    const int total = static_cast<int>(entries.size());
    if (test_count < 0 || test_count >= total) throw ConfigError("test count must be in [0, total)");
    std::vector<int> order(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) order[static_cast<size_t>(i)] = i;
    std::mt19937_64 rng(mix_seed(seed, 0x5117));
    std::shuffle(order.begin(), order.end(), rng);

    const int val_count = (total - test_count) / 10;
    for (int pos = 0; pos < total; ++pos) {
        Split s = Split::Train;
        if (pos < test_count)
            s = Split::Test;
        else if (pos < test_count + val_count)
            s = Split::Validation;
        entries[static_cast<size_t>(order[static_cast<size_t>(pos)])].split = s;
    }
}

}  // namespace

std::string to_string(ObjectKind k) {
    switch (k) {
        case ObjectKind::Beads: return "beads";
        case ObjectKind::Neurons: return "neurons";
        case ObjectKind::Mixed: return "mixed";
    }
    return "beads";
}

ObjectKind object_kind_from_string(const std::string& s) {
    if (s == "beads") return ObjectKind::Beads;
    if (s == "neurons") return ObjectKind::Neurons;
    if (s == "mixed") return ObjectKind::Mixed;
    throw ArgumentError("unknown object kind: " + s);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

std::vector<int> DatasetManifest::ids_of(Split s) const {
    std::vector<int> out;
    for (const auto& e : entries)
        if (e.split == s) out.push_back(e.id);
    return out;
}

int DatasetManifest::count_of_layer(int layer) const {
    int n = 0;
    for (const auto& e : entries)
        if (e.layer == layer) ++n;
    return n;
}

void write_sample(const Sample& s, const std::string& path) {
    if (!s.ccm.same_shape(s.ref)) throw DimensionError("sample ccm/ref extent mismatch");
    const int H = s.ccm.dim(0), W = s.ccm.dim(1);
    Tensor pair({2, H, W});
    std::copy(s.ccm.raw().begin(), s.ccm.raw().end(), pair.raw().begin());
    std::copy(s.ref.raw().begin(), s.ref.raw().end(), pair.raw().begin() + s.ccm.numel());
    write_tnsr_file(path, pair);
}

Sample read_sample(const std::string& path, int layer, double z_um) {
    Tensor pair = read_tnsr_file<float>(path);
    if (pair.ndim() != 3 || pair.dim(0) != 2) throw FormatError("sample file must hold [2,H,W]: " + path);
    const int H = pair.dim(1), W = pair.dim(2);
    Sample s;
    s.ccm = Tensor({H, W});
    s.ref = Tensor({H, W});
    std::copy(pair.raw().begin(), pair.raw().begin() + s.ccm.numel(), s.ccm.raw().begin());
    std::copy(pair.raw().begin() + s.ccm.numel(), pair.raw().end(), s.ref.raw().begin());
    s.layer_label = layer;
    s.z_um = z_um;
    return s;
}

DatasetManifest build_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
    if (cfg.per_layer < 1) throw ConfigError("per_layer must be >= 1");
    const int total = 3 * cfg.per_layer;
    if (cfg.test_count >= total) throw ConfigError("test count exceeds dataset size");

    fs::create_directories(fs::path(out_dir) / "samples");

    ForwardModel model = make_forward_model(cfg.extent, cfg.meas_extent, cfg.seed, cfg.conditioning, cfg.noise_sigma);
    check_layer_separability(cfg, model);
    save_forward_model(model, (fs::path(out_dir) / "forward.fwd").string());

    DatasetManifest m;
    m.extent = cfg.extent;
    m.meas_extent = cfg.meas_extent;
    m.per_layer = cfg.per_layer;
    m.test_count = cfg.test_count;
    m.seed = cfg.seed;
    m.object = cfg.object;
    m.noise_sigma = cfg.noise_sigma;
    m.conditioning = cfg.conditioning;
    m.forward_model_file = "forward.fwd";

    int id = 0;
    for (int layer = 1; layer <= 3; ++layer) {
        for (int i = 0; i < cfg.per_layer; ++i, ++id) {
            const uint64_t sample_seed = mix_seed(cfg.seed, static_cast<uint64_t>(id) + 17);
            const Tensor obj = render_object(cfg, sample_seed);

            SceneStack scene;
            for (auto& l : scene.layers) l = Tensor({cfg.extent, cfg.extent});
            scene.layers[static_cast<size_t>(layer - 1)] = obj;

            Sample s;
            s.ccm = simulate_measurement(scene, model, mix_seed(sample_seed, 3));
            s.ref = normalize_unit(obj);
            s.layer_label = layer;
            s.z_um = (layer - 1) * kLayerSpacingUm;

            ManifestEntry e;
            e.id = id;
            e.file = sample_filename(id);
            e.layer = layer;
            e.z_um = s.z_um;
            m.entries.push_back(e);
            write_sample(s, (fs::path(out_dir) / e.file).string());
        }
    }

    assign_splits(m.entries, cfg.test_count, cfg.seed);
    save_manifest(m, (fs::path(out_dir) / "manifest.txt").string());
    return m;
}

Sample merge_layers(const Sample& a, const Sample& b, const Sample& c) {
    const Sample* by_layer[4] = {nullptr, nullptr, nullptr, nullptr};
    for (const Sample* s : {&a, &b, &c}) {
        if (s->layer_label < 1 || s->layer_label > 3) throw ArgumentError("merge_layers: labels must be 1..3");
        if (by_layer[s->layer_label]) throw ArgumentError("merge_layers: duplicate layer label");
        by_layer[s->layer_label] = s;
    }
    if (!a.ccm.same_shape(b.ccm) || !a.ccm.same_shape(c.ccm) || !a.ref.same_shape(b.ref) ||
        !a.ref.same_shape(c.ref))
        throw DimensionError("merge_layers: extent mismatch");

    Sample out;
    out.ccm = Tensor(a.ccm.shape());
    out.ref = Tensor(a.ref.shape());
    // Sum in layer order so the result is independent of argument order.
    for (long i = 0; i < out.ccm.numel(); ++i)
        out.ccm[i] = by_layer[1]->ccm[i] + by_layer[2]->ccm[i] + by_layer[3]->ccm[i];
    for (long i = 0; i < out.ref.numel(); ++i)
        out.ref[i] = by_layer[1]->ref[i] + by_layer[2]->ref[i] + by_layer[3]->ref[i];
    out.ccm = normalize_unit(out.ccm);
    out.ref = normalize_unit(out.ref);
    out.layer_label = kMergedLabel;
    out.z_um = 0.0;
    return out;
}

DatasetManifest build_merged_dataset(const DatasetManifest& src, const std::string& src_dir,
                                     const std::string& out_dir) {
    if (src.merged) throw ArgumentError("source dataset is already merged");
    fs::create_directories(fs::path(out_dir) / "samples");

    DatasetManifest m = src;
    m.merged = true;
    m.entries.clear();

    fs::copy_file(fs::path(src_dir) / src.forward_model_file, fs::path(out_dir) / "forward.fwd",
                  fs::copy_options::overwrite_existing);
    m.forward_model_file = "forward.fwd";

    int id = 0;
    // Merge disjoint triples inside each split so no information leaks
    // between train and test.
    for (Split split : {Split::Train, Split::Validation, Split::Test}) {
        std::array<std::vector<const ManifestEntry*>, 3> per_layer;
        for (const auto& e : src.entries)
            if (e.split == split) per_layer[static_cast<size_t>(e.layer - 1)].push_back(&e);

        std::mt19937_64 rng(mix_seed(src.seed, 7000 + static_cast<uint64_t>(split)));
        for (auto& list : per_layer) std::shuffle(list.begin(), list.end(), rng);

        const size_t k = std::min({per_layer[0].size(), per_layer[1].size(), per_layer[2].size()});
        for (size_t i = 0; i < k; ++i, ++id) {
            std::array<Sample, 3> parts;
            for (int z = 0; z < 3; ++z) {
                const ManifestEntry* e = per_layer[static_cast<size_t>(z)][i];
                parts[static_cast<size_t>(z)] =
                    read_sample((fs::path(src_dir) / e->file).string(), e->layer, e->z_um);
            }
            const Sample merged = merge_layers(parts[0], parts[1], parts[2]);

            ManifestEntry e;
            e.id = id;
            e.file = sample_filename(id);
            e.layer = kMergedLabel;
            e.z_um = 0.0;
            e.split = split;
            m.entries.push_back(e);
            write_sample(merged, (fs::path(out_dir) / e.file).string());
        }
    }

    m.per_layer = 0;
    m.test_count = static_cast<int>(m.ids_of(Split::Test).size());
    save_manifest(m, (fs::path(out_dir) / "manifest.txt").string());
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << "# ccm dataset manifest\n";
    os << "version=1\n";
    os << "seed=" << m.seed << "\n";
    os << "extent=" << m.extent << "\n";
    os << "meas_extent=" << m.meas_extent << "\n";
    os << "per_layer=" << m.per_layer << "\n";
    os << "test_count=" << m.test_count << "\n";
    os << "object=" << to_string(m.object) << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", m.noise_sigma);
    os << "noise_sigma=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.9g", m.conditioning);
    os << "conditioning=" << buf << "\n";
    os << "merged=" << (m.merged ? 1 : 0) << "\n";
    os << "forward_model=" << m.forward_model_file << "\n";
    os << "count=" << m.entries.size() << "\n";
    os << "# id file layer z_um split\n";
    for (const auto& e : m.entries) {
        std::snprintf(buf, sizeof(buf), "%.9g", e.z_um);
        os << e.id << " " << e.file << " " << e.layer << " " << buf << " " << to_string(e.split) << "\n";
    }
    if (!os) throw IoError("manifest write failed: " + path);
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    DatasetManifest m;
    std::string line;
    size_t expected = 0;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq != std::string::npos && line.find(' ') == std::string::npos) {
            const std::string key = line.substr(0, eq);
            const std::string val = line.substr(eq + 1);
            if (key == "seed") m.seed = std::stoull(val);
            else if (key == "extent") m.extent = std::stoi(val);
            else if (key == "meas_extent") m.meas_extent = std::stoi(val);
            else if (key == "per_layer") m.per_layer = std::stoi(val);
            else if (key == "test_count") m.test_count = std::stoi(val);
            else if (key == "object") m.object = object_kind_from_string(val);
            else if (key == "noise_sigma") m.noise_sigma = std::stod(val);
            else if (key == "conditioning") m.conditioning = std::stod(val);
            else if (key == "merged") m.merged = val == "1";
            else if (key == "forward_model") m.forward_model_file = val;
            else if (key == "count") expected = std::stoul(val);
            // unknown keys are ignored for forward compatibility
            continue;
        }
        std::istringstream ss(line);
        ManifestEntry e;
        std::string split;
        if (!(ss >> e.id >> e.file >> e.layer >> e.z_um >> split))
            throw FormatError("bad manifest row: " + line);
        if (split == "train") e.split = Split::Train;
        else if (split == "val") e.split = Split::Validation;
        else if (split == "test") e.split = Split::Test;
        else throw FormatError("bad split tag: " + split);
        m.entries.push_back(e);
    }
    if (expected != m.entries.size()) throw FormatError("manifest count mismatch in " + path);
    return m;
}

std::vector<Sample> load_split(const DatasetManifest& m, const std::string& dir, Split split) {
    std::vector<Sample> out;
    for (const auto& e : m.entries)
        if (e.split == split) out.push_back(read_sample((fs::path(dir) / e.file).string(), e.layer, e.z_um));
    return out;
}

}  // namespace ccm
