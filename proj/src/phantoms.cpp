#include "ccm/phantoms.hpp"

#include <cmath>
#include <random>

#include "ccm/errors.hpp"

namespace ccm {

namespace {

constexpr int kSupersample = 4;  // subpixel coverage samples per axis
constexpr int kPlacementAttempts = 1000;

void blur_image(Tensor& img, double radius) {
    const int H = img.dim(0), W = img.dim(1);
    const int half = static_cast<int>(std::ceil(3.0 * radius));
    std::vector<double> kernel(static_cast<size_t>(2 * half + 1));
    double ksum = 0;
    for (int i = -half; i <= half; ++i)
        ksum += kernel[static_cast<size_t>(i + half)] = std::exp(-0.5 * i * i / (radius * radius));
    for (auto& v : kernel) v /= ksum;

    Tensor tmp({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -half; i <= half; ++i) {
                const int xx = x + i;
                if (xx < 0 || xx >= W) continue;
                acc += kernel[static_cast<size_t>(i + half)] * img.at(y, xx);
            }
            tmp.at(y, x) = static_cast<float>(acc);
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -half; i <= half; ++i) {
                const int yy = y + i;
                if (yy < 0 || yy >= H) continue;
                acc += kernel[static_cast<size_t>(i + half)] * tmp.at(yy, x);
            }
            img.at(y, x) = static_cast<float>(acc);
        }
}

}  // namespace

void stamp_disk(Tensor& image, double cx, double cy, double diameter_px, double peak) {
    const int H = image.dim(0), W = image.dim(1);
    const double r = diameter_px / 2.0;
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + r + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + r + 1)));
    const double step = 1.0 / kSupersample;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            int inside = 0;
            for (int sy = 0; sy < kSupersample; ++sy)
                for (int sx = 0; sx < kSupersample; ++sx) {
                    const double px = x + (sx + 0.5) * step - cx;
                    const double py = y + (sy + 0.5) * step - cy;
                    if (px * px + py * py <= r * r) ++inside;
                }
            const double cover = static_cast<double>(inside) / (kSupersample * kSupersample);
            const float v = static_cast<float>(peak * cover);
            if (v > image.at(y, x)) image.at(y, x) = v;
        }
}

Tensor render_beads(int extent, int count, double diameter_px, uint64_t seed) {
    if (diameter_px < 1.0) throw ArgumentError("bead diameter must be >= 1 px");
    if (count < 0) throw ArgumentError("bead count must be >= 0");
    Tensor image({extent, extent});
    if (count == 0) return image;

    const double r = diameter_px / 2.0;
    if (2 * r + 2 > extent) throw GenerationError("bead does not fit inside the field");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(r + 0.5, extent - r - 0.5);

    std::vector<std::pair<double, double>> centers;
    for (int b = 0; b < count; ++b) {
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
            const double cx = pos(rng), cy = pos(rng);
            bool ok = true;
            for (const auto& [ox, oy] : centers) {
                const double dx = cx - ox, dy = cy - oy;
                if (dx * dx + dy * dy < diameter_px * diameter_px) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                centers.emplace_back(cx, cy);
                placed = true;
            }
        }
        if (!placed)
            throw GenerationError("could not place " + std::to_string(count) + " non-overlapping beads in " +
                                  std::to_string(extent) + " px field");
    }
    for (const auto& [cx, cy] : centers) stamp_disk(image, cx, cy, diameter_px);
    return image;
}

Tensor render_neuron(int extent, uint64_t seed, int n_branches) {
    if (n_branches < 1) throw ArgumentError("n_branches must be >= 1");
    Tensor image({extent, extent});
    std::mt19937_64 rng(seed);

    const double soma_r = std::max(2.0, extent / 12.0);
    std::uniform_real_distribution<double> center(extent * 0.3, extent * 0.7);
    const double sx = center(rng), sy = center(rng);
    stamp_disk(image, sx, sy, 2.0 * soma_r);

    std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
    std::normal_distribution<double> turn(0.0, 0.35);
    std::uniform_int_distribution<int> len_dist(extent / 3, extent * 2 / 3);
    // Process width 1..2 px; the stamp is wide enough that the blurred ridge
    // stays above half of the soma peak, keeping the half-max set connected.
    std::uniform_real_distribution<double> width_dist(1.9, 2.4);

    for (int b = 0; b < n_branches; ++b) {
        double theta = angle(rng);
        double x = sx + soma_r * 0.8 * std::cos(theta);
        double y = sy + soma_r * 0.8 * std::sin(theta);
        const int steps = len_dist(rng);
        const double width = width_dist(rng);
        for (int s = 0; s < steps; ++s) {
            stamp_disk(image, x, y, width);
            theta += turn(rng);
            x += std::cos(theta);
            y += std::sin(theta);
            if (x < 1 || x > extent - 2 || y < 1 || y > extent - 2) break;
        }
    }

    blur_image(image, 0.6);
    const float peak = image.max();
    if (peak > 0)
        for (long i = 0; i < image.numel(); ++i) image[i] /= peak;
    return image;
}

BeadPhantom make_bead_phantom(int extent, int count, double depth_um, double diameter_px, uint64_t seed) {
    if (count < 0) throw ArgumentError("bead count must be >= 0");
    BeadPhantom ph;
    ph.extent = extent;
    ph.depth_um = depth_um;
    std::mt19937_64 rng(seed);
    const double r = diameter_px / 2.0;
    std::uniform_real_distribution<double> pos(r + 0.5, extent - r - 0.5);
    std::uniform_real_distribution<double> depth(0.0, depth_um);
    for (int i = 0; i < count; ++i) {
        Bead3 b;
        b.x_px = pos(rng);
        b.y_px = pos(rng);
        b.z_um = depth(rng);
        b.diameter_px = diameter_px;
        ph.beads.push_back(b);
    }
    return ph;
}

Tensor render_phantom_plane(const BeadPhantom& phantom, const std::vector<double>& plane_depths_um,
                            int plane_index) {
    if (plane_index < 0 || plane_index >= static_cast<int>(plane_depths_um.size()))
        throw ArgumentError("plane index out of range");
    const double spacing = plane_depths_um.size() > 1 ? std::abs(plane_depths_um[1] - plane_depths_um[0]) : 50.0;

    Tensor image({phantom.extent, phantom.extent});
    for (const auto& b : phantom.beads) {
        // Assign each bead to the nearest plane, within half a spacing.
        int nearest = 0;
        double best = std::abs(b.z_um - plane_depths_um[0]);
        for (size_t p = 1; p < plane_depths_um.size(); ++p) {
            const double d = std::abs(b.z_um - plane_depths_um[p]);
            if (d < best) {
                best = d;
                nearest = static_cast<int>(p);
            }
        }
        if (nearest != plane_index || best > spacing / 2.0) continue;
        stamp_disk(image, b.x_px, b.y_px, b.diameter_px);
    }
    return image;
}

}  // namespace ccm
