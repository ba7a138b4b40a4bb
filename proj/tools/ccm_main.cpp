// ccm: desk-scale 3-d computational cannula microscopy toolkit.
//
// Subcommands: gen-data, train, eval, recon, classify, insert-scan, volume,
// bench. Every command takes --seed, --config <file> (key=value, # comments,
// command line wins) and --out <dir>. All randomness flows from --seed.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ccm/dataset.hpp"
#include "ccm/errors.hpp"
#include "ccm/linear_recon.hpp"
#include "ccm/metrics.hpp"
#include "ccm/model_io.hpp"
#include "ccm/tensor_io.hpp"
#include "ccm/training.hpp"
#include "ccm/volume.hpp"

namespace fs = std::filesystem;
using namespace ccm;

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_kv(const std::string& path, const std::vector<std::pair<std::string, std::string>>& kv) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    if (!os) throw IoError("report write failed: " + path);
}

struct CommonOpts {
    uint64_t seed = 1;
    std::string out = "out";
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--seed", o.seed, "master random seed");
    cmd->add_option("--out", o.out, "output directory");
    cmd->set_config("--config", "", "key=value config file; command line overrides it");
}

NetworkSpec spec_for(const std::string& net, int extent, int depth, int base) {
    NetworkSpec spec;
    spec.kind = net == "ann1_r_star" ? NetworkSpec::Kind::Ann1R : network_kind_from_string(net);
    spec.extent = extent;
    spec.depth = depth > 0 ? depth : (spec.kind == NetworkSpec::Kind::Ann1C ? 4 : 3);
    spec.base_channels = base > 0 ? base : 16;
    return spec;
}

// The measurement plane of a recon/classify input: either a bare [H,W]
// image or the first plane of a [2,H,W] sample pair.
Tensor load_measurement(const std::string& path) {
    Tensor t = read_tnsr_file<float>(path);
    if (t.ndim() == 2) return t;
    if (t.ndim() == 3 && t.dim(0) == 2) {
        Tensor ccm({t.dim(1), t.dim(2)});
        std::copy(t.raw().begin(), t.raw().begin() + ccm.numel(), ccm.raw().begin());
        return ccm;
    }
    throw FormatError("expected a [H,W] measurement or [2,H,W] sample pair: " + path);
}

LinearReconstructor fit_svd_from(const std::string& fwd_path, int layer, double tau) {
    const ForwardModel fwd = load_forward_model(fwd_path);
    return LinearReconstructor::fit(calibration_scan(fwd, layer), RankPolicy::energy(tau), fwd.object_extent);
}

int cmd_gen_data(const CommonOpts& common, const DatasetConfig& cfg, bool merged) {
    DatasetConfig c = cfg;
    c.seed = common.seed;
    const std::string dataset_dir = common.out + "/dataset";
    auto manifest = build_dataset(c, dataset_dir);
    std::cout << "dataset: " << manifest.entries.size() << " samples in " << dataset_dir << "\n";
    if (merged) {
        auto m2 = build_merged_dataset(manifest, dataset_dir, common.out + "/dataset_merged");
        std::cout << "merged dataset: " << m2.entries.size() << " samples in " << common.out
                  << "/dataset_merged\n";
    }
    return 0;
}

int cmd_train(const CommonOpts& common, const std::string& net, std::string data_dir, const TrainConfig& tcfg,
              int depth, int base) {
    if (data_dir.empty()) data_dir = common.out + (net == "ann1_r_star" ? "/dataset_merged" : "/dataset");
    const auto manifest = load_manifest(data_dir + "/manifest.txt");

    if (net == "ann1_r_star" && !manifest.merged)
        throw ConfigError("ann1_r_star trains on a merged dataset; got " + data_dir);
    if (net == "ann1_r" && manifest.merged)
        throw ConfigError("ann1_r trains on single-layer data; use --net ann1_r_star for merged data");

    auto model = build_model<float>(spec_for(net, manifest.extent, depth, base), common.seed);
    TrainConfig cfg = tcfg;
    cfg.seed = common.seed;
    const auto report = train(model, manifest, data_dir, cfg);

    fs::create_directories(common.out + "/models");
    const std::string model_path = common.out + "/models/" + net + ".ccmm";
    save_model(model, model_path);

    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("net", net);
    kv.emplace_back("epochs_run", std::to_string(report.epochs_run));
    kv.emplace_back("best_epoch", std::to_string(report.best_epoch));
    kv.emplace_back("best_val_loss", fmt(report.best_val));
    for (int e = 0; e < report.epochs_run; ++e) {
        kv.emplace_back("train_loss_" + std::to_string(e), fmt(report.train_loss[static_cast<size_t>(e)]));
        kv.emplace_back("val_loss_" + std::to_string(e), fmt(report.val_loss[static_cast<size_t>(e)]));
    }
    write_kv(common.out + "/reports/train_" + net + ".txt", kv);

    double total_s = 0;
    for (double s : report.epoch_seconds) total_s += s;
    std::cout << "trained " << net << " for " << report.epochs_run << " epochs (" << fmt(total_s)
              << " s), best val loss " << fmt(report.best_val) << " at epoch " << report.best_epoch << "\n"
              << "model: " << model_path << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& net, std::string model_path, std::string data_dir) {
    if (model_path.empty()) model_path = common.out + "/models/" + net + ".ccmm";
    if (data_dir.empty()) data_dir = common.out + (net == "ann1_r_star" ? "/dataset_merged" : "/dataset");
    auto model = load_model(model_path);
    const auto manifest = load_manifest(data_dir + "/manifest.txt");
    const auto test_set = load_split(manifest, data_dir, Split::Test);
    if (test_set.empty()) throw ConfigError("dataset has no test split: " + data_dir);

    auto report = evaluate_model(model, test_set);

    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("net", net);
    kv.emplace_back("n_samples", std::to_string(report.metrics.n_samples));
    if (report.metrics.ssim >= -0.5) kv.emplace_back("ssim", fmt(report.metrics.ssim));
    if (report.metrics.mae >= 0) kv.emplace_back("mae", fmt(report.metrics.mae));
    if (report.metrics.accuracy >= 0) kv.emplace_back("accuracy", fmt(report.metrics.accuracy));
    if (report.off_target_ratio >= 0) kv.emplace_back("off_target_ratio", fmt(report.off_target_ratio));
    const std::string path = common.out + "/reports/eval_" + net + ".txt";
    write_kv(path, kv);

    std::cout << "eval " << net << " over " << report.metrics.n_samples << " test samples\n";
    for (const auto& [k, v] : kv)
        if (k != "net") std::cout << "  " << k << " = " << v << "\n";
    std::cout << "  median inference " << fmt(report.median_infer_ms) << " ms\n"
              << "report: " << path << "\n";
    return 0;
}

int cmd_recon(const CommonOpts& common, const std::string& method, const std::string& model_path,
              const std::string& input_path, const std::string& fwd_path, int svd_layer, double tau) {
    const Tensor meas = load_measurement(input_path);
    fs::create_directories(common.out);

    Tensor result;
    if (method == "ann") {
        auto model = load_model(model_path);
        result = infer_reconstruct(model, meas);
    } else if (method == "svd") {
        auto svd = fit_svd_from(fwd_path, svd_layer, tau);
        result = svd.reconstruct(meas);
    } else {
        throw ArgumentError("recon method must be ann or svd");
    }

    write_tnsr_file(common.out + "/recon.tnsr", result);
    if (result.ndim() == 2) {
        export_pgm(result, common.out + "/recon.pgm");
    } else {
        for (int p = 0; p < result.dim(2); ++p) {
            Tensor plane({result.dim(0), result.dim(1)});
            for (int y = 0; y < result.dim(0); ++y)
                for (int x = 0; x < result.dim(1); ++x) plane.at(y, x) = result.at(y, x, p);
            export_pgm(plane, common.out + "/recon_plane" + std::to_string(p + 1) + ".pgm");
        }
    }
    std::cout << "reconstruction written to " << common.out << "/recon.tnsr\n";
    return 0;
}

int cmd_classify(const CommonOpts& common, const std::string& model_path, const std::string& input_path) {
    auto model = load_model(model_path);
    const Tensor meas = load_measurement(input_path);
    auto [layer, probs] = infer_classify(model, meas);

    write_kv(common.out + "/reports/classify.txt",
             {{"layer", std::to_string(layer)},
              {"p1", fmt(probs[0])},
              {"p2", fmt(probs[1])},
              {"p3", fmt(probs[2])}});
    std::cout << "layer=" << layer << " probs=[" << fmt(probs[0]) << ", " << fmt(probs[1]) << ", "
              << fmt(probs[2]) << "]\n";
    return 0;
}

int cmd_insert_scan(const CommonOpts& common, const std::string& model_path, const std::string& fwd_path,
                    int n_beads, double bead_diameter, double depth_um, double step_um) {
    auto model = load_model(model_path);
    const ForwardModel fwd = load_forward_model(fwd_path);

    // Beads scattered through the full insertion range plus the last window.
    auto phantom = make_bead_phantom(fwd.object_extent, n_beads, depth_um + 100.0, bead_diameter, common.seed);
    auto vol = insertion_scan(model, phantom, fwd, step_um, depth_um, 0.0);

    const std::string vol_dir = common.out + "/volumes";
    fs::create_directories(vol_dir);
    for (size_t d = 0; d < vol.slices.size(); ++d) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s/slice_%03zu", vol_dir.c_str(), d);
        write_tnsr_file(std::string(name) + ".tnsr", vol.slices[d]);
        export_pgm(vol.slices[d], std::string(name) + ".pgm");
    }
    save_volume(vol, vol_dir + "/scan");
    std::cout << "insertion scan: " << vol.slices.size() << " slices into " << vol_dir << "/scan.tnsr\n";
    return 0;
}

int cmd_volume(const CommonOpts& common, const std::string& slices_dir, double z0, double step) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(slices_dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("slice_", 0) == 0 && e.path().extension() == ".tnsr") files.push_back(e.path().string());
    }
    if (files.empty()) throw IoError("no slice_*.tnsr files in " + slices_dir);
    std::sort(files.begin(), files.end());

    std::vector<Tensor> slices;
    for (const auto& f : files) slices.push_back(read_tnsr_file<float>(f));
    auto vol = assemble_volume(std::move(slices), step, z0);
    fs::create_directories(common.out + "/volumes");
    save_volume(vol, common.out + "/volumes/volume");
    std::cout << "assembled " << files.size() << " slices into " << common.out << "/volumes/volume.tnsr\n";
    return 0;
}

int cmd_bench(const CommonOpts& common, std::string data_dir, std::string models_dir, int svd_layer,
              double tau) {
    if (data_dir.empty()) data_dir = common.out + "/dataset";
    if (models_dir.empty()) models_dir = common.out + "/models";
    const auto manifest = load_manifest(data_dir + "/manifest.txt");
    const auto test_set = load_split(manifest, data_dir, Split::Test);

    auto ann1_r = load_model(models_dir + "/ann1_r.ccmm");
    auto ann1_c = load_model(models_dir + "/ann1_c.ccmm");
    auto ann2 = load_model(models_dir + "/ann2.ccmm");
    auto svd = fit_svd_from(data_dir + "/" + manifest.forward_model_file, svd_layer, tau);

    const auto rows = bench(ann1_r, ann1_c, ann2, svd, test_set);
    const std::string table = format_bench_table(rows);
    std::cout << table;

    fs::create_directories(common.out + "/reports");
    std::ofstream os(common.out + "/reports/bench.txt");
    os << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"computational cannula microscopy toolkit"};
    app.require_subcommand(1);

    // gen-data
    CommonOpts gd_common;
    DatasetConfig gd_cfg;
    bool gd_merged = false;
    std::string gd_object = "beads";
    auto* gen = app.add_subcommand("gen-data", "simulate a per-layer dataset");
    add_common(gen, gd_common);
    gen->add_option("--extent", gd_cfg.extent, "object/measurement extent in px");
    gen->add_option("--meas-extent", gd_cfg.meas_extent, "measurement extent override");
    gen->add_option("--per-layer", gd_cfg.per_layer, "samples per layer");
    gen->add_option("--test-count", gd_cfg.test_count, "total held-out test samples");
    gen->add_option("--object", gd_object, "beads|neurons|mixed");
    gen->add_option("--min-beads", gd_cfg.min_beads, "min beads per sample");
    gen->add_option("--max-beads", gd_cfg.max_beads, "max beads per sample");
    gen->add_option("--bead-diameter", gd_cfg.bead_diameter_px, "bead diameter in px");
    gen->add_option("--noise-sigma", gd_cfg.noise_sigma, "measurement noise std");
    gen->add_option("--conditioning", gd_cfg.conditioning, "singular value decay exponent");
    gen->add_flag("--merged", gd_merged, "also build the merged 3-layer dataset");

    // train
    CommonOpts tr_common;
    std::string tr_net, tr_data;
    TrainConfig tr_cfg;
    int tr_depth = 0, tr_base = 0;
    auto* tr = app.add_subcommand("train", "train a network");
    add_common(tr, tr_common);
    tr->add_option("--net", tr_net, "ann1_r|ann1_c|ann2|ann1_r_star")->required();
    tr->add_option("--data", tr_data, "dataset directory");
    tr->add_option("--epochs", tr_cfg.max_epochs, "max epochs");
    tr->add_option("--batch", tr_cfg.batch_size, "batch size");
    tr->add_option("--lr", tr_cfg.lr, "learning rate");
    tr->add_option("--patience", tr_cfg.patience, "early-stop patience in epochs");
    tr->add_option("--depth", tr_depth, "encoder depth / pooling stages");
    tr->add_option("--base-channels", tr_base, "first-level channel count");

    // eval
    CommonOpts ev_common;
    std::string ev_net, ev_model, ev_data;
    auto* ev = app.add_subcommand("eval", "evaluate a trained network on the test split");
    add_common(ev, ev_common);
    ev->add_option("--net", ev_net, "ann1_r|ann1_c|ann2|ann1_r_star")->required();
    ev->add_option("--model", ev_model, "model file");
    ev->add_option("--data", ev_data, "dataset directory");

    // recon
    CommonOpts rc_common;
    std::string rc_method = "ann", rc_model, rc_in, rc_fwd;
    int rc_layer = 1;
    double rc_tau = 0.99;
    auto* rc = app.add_subcommand("recon", "reconstruct one measurement");
    add_common(rc, rc_common);
    rc->add_option("--method", rc_method, "ann|svd");
    rc->add_option("--model", rc_model, "model file (ann)");
    rc->add_option("--in", rc_in, "measurement .tnsr file")->required();
    rc->add_option("--forward", rc_fwd, "forward model file (svd)");
    rc->add_option("--svd-layer", rc_layer, "calibration layer for svd");
    rc->add_option("--tau", rc_tau, "svd energy threshold");

    // classify
    CommonOpts cl_common;
    std::string cl_model, cl_in;
    auto* cl = app.add_subcommand("classify", "predict the layer of one measurement");
    add_common(cl, cl_common);
    cl->add_option("--model", cl_model, "classifier model file")->required();
    cl->add_option("--in", cl_in, "measurement .tnsr file")->required();

    // insert-scan
    CommonOpts is_common;
    std::string is_model, is_fwd;
    int is_beads = 12;
    double is_diam = 3.0, is_depth = 700.0, is_step = 50.0;
    auto* isc = app.add_subcommand("insert-scan", "depth scan through a bead phantom");
    add_common(isc, is_common);
    isc->add_option("--model", is_model, "merged-projection model file")->required();
    isc->add_option("--forward", is_fwd, "forward model file")->required();
    isc->add_option("--beads", is_beads, "beads in the phantom");
    isc->add_option("--bead-diameter", is_diam, "bead diameter in px");
    isc->add_option("--depth", is_depth, "max depth in um");
    isc->add_option("--step", is_step, "depth step in um");

    // volume
    CommonOpts vo_common;
    std::string vo_slices;
    double vo_z0 = 0.0, vo_step = 50.0;
    auto* vo = app.add_subcommand("volume", "assemble slice files into a volume");
    add_common(vo, vo_common);
    vo->add_option("--slices", vo_slices, "directory holding slice_*.tnsr")->required();
    vo->add_option("--z0", vo_z0, "first slice depth in um");
    vo->add_option("--step", vo_step, "depth step in um");

    // bench
    CommonOpts be_common;
    std::string be_data, be_models;
    int be_layer = 1;
    double be_tau = 0.99;
    auto* be = app.add_subcommand("bench", "desk-scale comparison table over the test split");
    add_common(be, be_common);
    be->add_option("--data", be_data, "dataset directory");
    be->add_option("--models", be_models, "models directory");
    be->add_option("--svd-layer", be_layer, "calibration layer for svd");
    be->add_option("--tau", be_tau, "svd energy threshold");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "ccm: " << e.what() << "\n" << app.help() << std::flush;
        return 2;
    }

    try {
        if (gen->parsed()) {
            gd_cfg.object = object_kind_from_string(gd_object);
            if (!gen->count("--meas-extent")) gd_cfg.meas_extent = gd_cfg.extent;
            return cmd_gen_data(gd_common, gd_cfg, gd_merged);
        }
        if (tr->parsed()) return cmd_train(tr_common, tr_net, tr_data, tr_cfg, tr_depth, tr_base);
        if (ev->parsed()) return cmd_eval(ev_common, ev_net, ev_model, ev_data);
        if (rc->parsed()) return cmd_recon(rc_common, rc_method, rc_model, rc_in, rc_fwd, rc_layer, rc_tau);
        if (cl->parsed()) return cmd_classify(cl_common, cl_model, cl_in);
        if (isc->parsed()) return cmd_insert_scan(is_common, is_model, is_fwd, is_beads, is_diam, is_depth, is_step);
        if (vo->parsed()) return cmd_volume(vo_common, vo_slices, vo_z0, vo_step);
        if (be->parsed()) return cmd_bench(be_common, be_data, be_models, be_layer, be_tau);
    } catch (const std::exception& e) {
        std::cerr << "ccm: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
