#pragma once

#include <array>
#include <functional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ccm/autodiff.hpp"
#include "ccm/dataset.hpp"

namespace ccm {

// Architecture description. `depth` counts pooling stages: U-Net encoder
// levels for the reconstructors, pairs of conv blocks for the classifier
// (default 4 stages = 8 blocks).
struct NetworkSpec {
    enum class Kind { Ann1R, Ann1C, Ann2 };

    Kind kind = Kind::Ann1R;
    int extent = 32;
    int depth = 3;
    int base_channels = 16;
    int in_channels = 1;

    static constexpr int kClasses = 3;
    static constexpr int kClassifierBaseChannels = 8;
    static constexpr int kClassifierMaxChannels = 64;

    int out_planes() const { return kind == Kind::Ann2 ? 3 : 1; }
    int classifier_blocks() const { return 2 * depth; }

    static NetworkSpec ann1_r(int extent = 32) { return {Kind::Ann1R, extent, 3, 16, 1}; }
    static NetworkSpec ann1_c(int extent = 32) { return {Kind::Ann1C, extent, 4, 16, 1}; }
    static NetworkSpec ann2(int extent = 32) { return {Kind::Ann2, extent, 3, 16, 1}; }

    bool operator==(const NetworkSpec&) const = default;
};

std::string to_string(NetworkSpec::Kind k);
NetworkSpec::Kind network_kind_from_string(const std::string& s);

template <typename T>
struct ConvLayerT {
    VarT<T> kernel;  // [kh,kw,Cin,Cout]
    VarT<T> bias;    // [Cout]
};

// Two conv+relu layers followed by batch normalization.
template <typename T>
struct DenseBlockT {
    ConvLayerT<T> conv1, conv2;
    BatchNormStateT<T> bn;
};

template <typename T>
struct UNetT {
    std::vector<DenseBlockT<T>> encoder;  // depth blocks
    DenseBlockT<T> bottleneck;
    std::vector<DenseBlockT<T>> decoder;  // decoder[i] consumes skip level depth-1-i
    ConvLayerT<T> head;                   // 1x1 conv to the output planes
};

template <typename T>
struct ClassifierT {
    struct Block {
        ConvLayerT<T> conv;
        BatchNormStateT<T> bn;
    };
    std::vector<Block> blocks;  // max_pool2 after every second block
    VarT<T> fc_w;               // [C,3]
    VarT<T> fc_b;               // [3]
};

template <typename T>
struct ModelStateT {
    NetworkSpec spec;
    uint64_t seed = 0;
    long train_steps = 0;
    std::variant<UNetT<T>, ClassifierT<T>> net;

    std::vector<VarT<T>> params();
    long param_count();

    // Visits every persistent tensor (parameters and batch-norm running
    // statistics) in a fixed structural order; the basis of serialization.
    void for_each_tensor(const std::function<void(const std::string&, TensorT<T>&)>& fn);
};

using ModelState = ModelStateT<float>;

namespace detail {

template <typename T>
ConvLayerT<T> make_conv(int kh, int kw, int cin, int cout, const std::string& name, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / (static_cast<double>(kh) * kw * cin));
    TensorT<T> k({kh, kw, cin, cout});
    fill_uniform(k, rng, -bound, bound);
    ConvLayerT<T> layer;
    layer.kernel = make_param(std::move(k), name + ".kernel");
    layer.bias = make_param(TensorT<T>({cout}), name + ".bias");
    return layer;
}

template <typename T>
DenseBlockT<T> make_dense_block(int cin, int cout, const std::string& name, std::mt19937_64& rng) {
    DenseBlockT<T> b;
    b.conv1 = make_conv<T>(3, 3, cin, cout, name + ".conv1", rng);
    b.conv2 = make_conv<T>(3, 3, cout, cout, name + ".conv2", rng);
    b.bn = BatchNormStateT<T>::create(cout, name + ".bn");
    return b;
}

template <typename T>
VarT<T> dense_block_forward(DenseBlockT<T>& b, VarT<T> x, RunMode mode) {
    x = relu(bias_add(conv2d(x, b.conv1.kernel, 1, Padding::Same), b.conv1.bias));
    x = relu(bias_add(conv2d(x, b.conv2.kernel, 1, Padding::Same), b.conv2.bias));
    return batch_norm(x, b.bn, mode);
}

inline int classifier_channels(int stage) {
    return std::min(NetworkSpec::kClassifierBaseChannels << stage, NetworkSpec::kClassifierMaxChannels);
}

}  // namespace detail

// Builds a model with seeded fan-in-scaled uniform weights, zero biases, and
// identity batch-norm state.
template <typename T>
ModelStateT<T> build_model(const NetworkSpec& spec, uint64_t seed) {
    if (spec.depth < 1) throw ConfigError("network depth must be >= 1");
    if (spec.base_channels < 1) throw ConfigError("base channel count must be >= 1");
    const int div = 1 << spec.depth;
    if (spec.extent % div != 0 || spec.extent / div < 1)
        throw ConfigError("input extent " + std::to_string(spec.extent) + " is not divisible by 2^depth = " +
                          std::to_string(div));

    ModelStateT<T> m;
    m.spec = spec;
    m.seed = seed;
    std::mt19937_64 rng(seed);

    if (spec.kind == NetworkSpec::Kind::Ann1C) {
        ClassifierT<T> c;
        int cin = spec.in_channels;
        for (int i = 0; i < spec.classifier_blocks(); ++i) {
            const int stage = i / 2;
            const int cout = detail::classifier_channels(stage);
            typename ClassifierT<T>::Block blk;
            const std::string name = "block" + std::to_string(i);
            blk.conv = detail::make_conv<T>(3, 3, cin, cout, name + ".conv", rng);
            blk.bn = BatchNormStateT<T>::create(cout, name + ".bn");
            c.blocks.push_back(std::move(blk));
            cin = cout;
        }
        const double bound = std::sqrt(6.0 / cin);
        TensorT<T> w({cin, NetworkSpec::kClasses});
        fill_uniform(w, rng, -bound, bound);
        c.fc_w = make_param(std::move(w), "fc.weight");
        c.fc_b = make_param(TensorT<T>({NetworkSpec::kClasses}), "fc.bias");
        m.net = std::move(c);
        return m;
    }

    UNetT<T> u;
    int cin = spec.in_channels;
    for (int level = 0; level < spec.depth; ++level) {
        const int cout = spec.base_channels << level;
        u.encoder.push_back(detail::make_dense_block<T>(cin, cout, "enc" + std::to_string(level), rng));
        cin = cout;
    }
    const int cbottom = spec.base_channels << spec.depth;
    u.bottleneck = detail::make_dense_block<T>(cin, cbottom, "bottleneck", rng);
    cin = cbottom;
    for (int level = spec.depth - 1; level >= 0; --level) {
        const int cskip = spec.base_channels << level;
        u.decoder.push_back(detail::make_dense_block<T>(cin + cskip, cskip, "dec" + std::to_string(level), rng));
        cin = cskip;
    }
    u.head = detail::make_conv<T>(1, 1, cin, spec.out_planes(), "head", rng);
    m.net = std::move(u);
    return m;
}

// Forward pass on a [B,H,W,in] batch. Reconstructors return [B,H,W,planes]
// sigmoid outputs; the classifier returns [B,3] softmax probabilities.
template <typename T>
VarT<T> forward(ModelStateT<T>& m, const VarT<T>& input, RunMode mode) {
    const auto& xs = input->value.shape();
    if (xs.size() != 4 || xs[1] != m.spec.extent || xs[2] != m.spec.extent || xs[3] != m.spec.in_channels)
        throw DimensionError("input " + input->value.shape_string() + " does not match network extent " +
                             std::to_string(m.spec.extent));

    if (auto* c = std::get_if<ClassifierT<T>>(&m.net)) {
        VarT<T> x = input;
        for (size_t i = 0; i < c->blocks.size(); ++i) {
            auto& blk = c->blocks[i];
            x = batch_norm(relu(bias_add(conv2d(x, blk.conv.kernel, 1, Padding::Same), blk.conv.bias)), blk.bn,
                           mode);
            if (i % 2 == 1) x = max_pool2(x);
        }
        return softmax(dense(global_avg_pool(x), c->fc_w, c->fc_b));
    }

    auto& u = std::get<UNetT<T>>(m.net);
    VarT<T> x = input;
    std::vector<VarT<T>> skips;
    for (auto& block : u.encoder) {
        x = detail::dense_block_forward(block, x, mode);
        skips.push_back(x);
        x = max_pool2(x);
    }
    x = detail::dense_block_forward(u.bottleneck, x, mode);
    for (size_t i = 0; i < u.decoder.size(); ++i) {
        x = upsample2_concat(x, skips[skips.size() - 1 - i]);
        x = detail::dense_block_forward(u.decoder[i], x, mode);
    }
    return sigmoid(bias_add(conv2d(x, u.head.kernel, 1, Padding::Same), u.head.bias));
}

template <typename T>
void ModelStateT<T>::for_each_tensor(const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    auto visit_conv = [&fn](ConvLayerT<T>& c, const std::string& name) {
        fn(name + ".kernel", c.kernel->value);
        fn(name + ".bias", c.bias->value);
    };
    auto visit_bn = [&fn](BatchNormStateT<T>& bn, const std::string& name) {
        fn(name + ".gamma", bn.gamma->value);
        fn(name + ".beta", bn.beta->value);
        fn(name + ".running_mean", bn.running_mean);
        fn(name + ".running_var", bn.running_var);
    };
    auto visit_block = [&](DenseBlockT<T>& b, const std::string& name) {
        visit_conv(b.conv1, name + ".conv1");
        visit_conv(b.conv2, name + ".conv2");
        visit_bn(b.bn, name + ".bn");
    };

    if (auto* c = std::get_if<ClassifierT<T>>(&net)) {
        for (size_t i = 0; i < c->blocks.size(); ++i) {
            const std::string name = "block" + std::to_string(i);
            visit_conv(c->blocks[i].conv, name + ".conv");
            visit_bn(c->blocks[i].bn, name + ".bn");
        }
        fn("fc.weight", c->fc_w->value);
        fn("fc.bias", c->fc_b->value);
        return;
    }
    auto& u = std::get<UNetT<T>>(net);
    for (size_t l = 0; l < u.encoder.size(); ++l) visit_block(u.encoder[l], "enc" + std::to_string(l));
    visit_block(u.bottleneck, "bottleneck");
    for (size_t i = 0; i < u.decoder.size(); ++i)
        visit_block(u.decoder[i], "dec" + std::to_string(u.decoder.size() - 1 - i));
    visit_conv(u.head, "head");
}

template <typename T>
std::vector<VarT<T>> ModelStateT<T>::params() {
    std::vector<VarT<T>> out;
    auto push_conv = [&out](ConvLayerT<T>& c) {
        out.push_back(c.kernel);
        out.push_back(c.bias);
    };
    auto push_block = [&](DenseBlockT<T>& b) {
        push_conv(b.conv1);
        push_conv(b.conv2);
        out.push_back(b.bn.gamma);
        out.push_back(b.bn.beta);
    };
    if (auto* c = std::get_if<ClassifierT<T>>(&net)) {
        for (auto& blk : c->blocks) {
            push_conv(blk.conv);
            out.push_back(blk.bn.gamma);
            out.push_back(blk.bn.beta);
        }
        out.push_back(c->fc_w);
        out.push_back(c->fc_b);
        return out;
    }
    auto& u = std::get<UNetT<T>>(net);
    for (auto& b : u.encoder) push_block(b);
    push_block(u.bottleneck);
    for (auto& b : u.decoder) push_block(b);
    push_conv(u.head);
    return out;
}

template <typename T>
long ModelStateT<T>::param_count() {
    long n = 0;
    for (const auto& p : params()) n += p->value.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Inference entry points (eval mode, single image).
// ---------------------------------------------------------------------------

// Reconstruction: [H,W] measurement into [H,W] (ann1_r) or [H,W,3] (ann2).
template <typename T>
TensorT<T> infer_reconstruct(ModelStateT<T>& m, const TensorT<T>& ccm) {
    if (m.spec.kind == NetworkSpec::Kind::Ann1C) throw ArgumentError("infer_reconstruct on a classifier");
    if (ccm.ndim() != 2 || ccm.dim(0) != m.spec.extent || ccm.dim(1) != m.spec.extent)
        throw DimensionError("measurement " + ccm.shape_string() + " does not match network extent");
    auto input = make_var(ccm.reshaped({1, m.spec.extent, m.spec.extent, 1}));
    auto out = forward(m, input, RunMode::Eval);
    const int planes = m.spec.out_planes();
    if (planes == 1) return out->value.reshaped({m.spec.extent, m.spec.extent});
    return out->value.reshaped({m.spec.extent, m.spec.extent, planes});
}

// Classification: returns (layer 1..3, probabilities). Ties break toward the
// lowest layer index.
template <typename T>
std::pair<int, std::array<T, 3>> infer_classify(ModelStateT<T>& m, const TensorT<T>& ccm) {
    if (m.spec.kind != NetworkSpec::Kind::Ann1C) throw ArgumentError("infer_classify on a reconstructor");
    if (ccm.ndim() != 2 || ccm.dim(0) != m.spec.extent || ccm.dim(1) != m.spec.extent)
        throw DimensionError("measurement " + ccm.shape_string() + " does not match network extent");
    auto input = make_var(ccm.reshaped({1, m.spec.extent, m.spec.extent, 1}));
    auto out = forward(m, input, RunMode::Eval);
    std::array<T, 3> probs{out->value[0], out->value[1], out->value[2]};
    int best = 0;
    for (int k = 1; k < 3; ++k)
        if (probs[static_cast<size_t>(k)] > probs[static_cast<size_t>(best)]) best = k;
    return {best + 1, probs};
}

// ANN2 training target: the reference image on the plane of its layer label,
// zeros elsewhere.
template <typename T>
TensorT<T> make_ann2_target(const TensorT<T>& ref, int layer_label) {
    if (layer_label < 1 || layer_label > 3) throw ArgumentError("ann2 target requires layer label 1..3");
    const int H = ref.dim(0), W = ref.dim(1);
    TensorT<T> target({H, W, 3});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) target.at(y, x, layer_label - 1) = ref.at(y, x);
    return target;
}

}  // namespace ccm
