#include "ccm/volume.hpp"

#include <cmath>
#include <fstream>

#include "ccm/dataset.hpp"
#include "ccm/errors.hpp"
#include "ccm/tensor_io.hpp"

namespace ccm {

Volume insertion_scan(ModelState& model_star, const BeadPhantom& phantom, const ForwardModel& fwd,
                      double z_step_um, double max_depth_um, double z0_um) {
    if (model_star.spec.kind == NetworkSpec::Kind::Ann1C)
        throw ArgumentError("insertion scan needs a reconstruction network");
    if (model_star.train_steps <= 0) throw StateError("insertion scan requires a trained model");
    if (phantom.extent < 1 || phantom.depth_um <= 0) throw ArgumentError("empty phantom volume");
    if (phantom.extent != fwd.object_extent || model_star.spec.extent != fwd.meas_extent)
        throw DimensionError("phantom/model/forward extents disagree");
    if (z_step_um <= 0 || max_depth_um < z0_um) throw ArgumentError("bad scan range");

    constexpr double kPlaneSpacingUm = 50.0;

    Volume vol;
    vol.z_step_um = z_step_um;
    vol.z0_um = z0_um;
    vol.fov_um = phantom.fov_um;

    int step_index = 0;
    for (double z0 = z0_um; z0 <= max_depth_um + 1e-9; z0 += z_step_um, ++step_index) {
        SceneStack scene;
        const std::vector<double> planes = {z0, z0 + kPlaneSpacingUm, z0 + 2 * kPlaneSpacingUm};
        bool any_signal = false;
        for (int p = 0; p < 3; ++p) {
            scene.layers[static_cast<size_t>(p)] = render_phantom_plane(phantom, planes, p);
            if (scene.layers[static_cast<size_t>(p)].max() > 0) any_signal = true;
        }
        if (!any_signal) {
            // No fluorescence in this window: dark slice, nothing to invert.
            vol.slices.emplace_back(Tensor({fwd.object_extent, fwd.object_extent}));
            continue;
        }
        const Tensor meas =
            simulate_measurement(scene, fwd, mix_seed(fwd.seed, 40000 + static_cast<uint64_t>(step_index)));
        vol.slices.push_back(infer_reconstruct(model_star, meas));
    }
    return vol;
}

Volume assemble_volume(std::vector<Tensor> slices, double z_step_um, double z0_um, double fov_um) {
    if (slices.empty()) throw ArgumentError("assemble_volume needs at least one slice");
    for (const auto& s : slices)
        if (s.ndim() != 2 || !(s.shape() == slices[0].shape()))
            throw DimensionError("assemble_volume: ragged slice extents");
    Volume v;
    v.slices = std::move(slices);
    v.z_step_um = z_step_um;
    v.z0_um = z0_um;
    v.fov_um = fov_um;
    return v;
}

void save_volume(const Volume& v, const std::string& base_path) {
    if (v.slices.empty()) throw ArgumentError("cannot save an empty volume");
    const int D = static_cast<int>(v.slices.size());
    const int H = v.slices[0].dim(0), W = v.slices[0].dim(1);
    Tensor stack({D, H, W});
    for (int d = 0; d < D; ++d) {
        const auto& s = v.slices[static_cast<size_t>(d)];
        if (s.dim(0) != H || s.dim(1) != W) throw DimensionError("ragged slice extents");
        std::copy(s.raw().begin(), s.raw().end(), stack.raw().begin() + static_cast<long>(d) * H * W);
    }
    write_tnsr_file(base_path + ".tnsr", stack);

    std::ofstream os(base_path + ".meta");
    if (!os) throw IoError("cannot open for write: " + base_path + ".meta");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v.z0_um);
    os << "z0_um=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.9g", v.z_step_um);
    os << "z_step_um=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.9g", v.fov_um);
    os << "fov_um=" << buf << "\n";
    if (!os) throw IoError("volume metadata write failed");
}

Volume load_volume(const std::string& base_path) {
    Tensor stack = read_tnsr_file<float>(base_path + ".tnsr");
    if (stack.ndim() != 3) throw FormatError("volume container must hold [D,H,W]");
    Volume v;
    const int D = stack.dim(0), H = stack.dim(1), W = stack.dim(2);
    for (int d = 0; d < D; ++d) {
        Tensor s({H, W});
        std::copy(stack.raw().begin() + static_cast<long>(d) * H * W,
                  stack.raw().begin() + static_cast<long>(d + 1) * H * W, s.raw().begin());
        v.slices.push_back(std::move(s));
    }

    std::ifstream is(base_path + ".meta");
    if (!is) throw IoError("cannot open: " + base_path + ".meta");
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const double val = std::stod(line.substr(eq + 1));
        if (key == "z0_um") v.z0_um = val;
        else if (key == "z_step_um") v.z_step_um = val;
        else if (key == "fov_um") v.fov_um = val;
    }
    return v;
}

}  // namespace ccm
