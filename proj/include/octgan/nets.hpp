#ifndef OCTGAN_NETS_HPP
#define OCTGAN_NETS_HPP

#include <string>
#include <vector>

#include "octgan/ops.hpp"

namespace octgan {

template <typename S>
struct NamedTensor {
    std::string name;
    Tensor<S> tensor;
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename S>
struct Conv2dLayer {
    Tensor<S> kernel, bias;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(Extent cin, Extent cout, Extent k, int stride_, int pad_)
        : kernel(Tensor<S>::zeros({cout, cin, k, k})), bias(Tensor<S>::zeros({cout})),
          stride(stride_), pad(pad_) {
        kernel.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, kernel, stride, pad, bias); }
};

template <typename S>
struct ConvTranspose2dLayer {
    Tensor<S> kernel, bias;
    int stride = 1, pad = 0;

    ConvTranspose2dLayer() = default;
    ConvTranspose2dLayer(Extent cin, Extent cout, Extent k, int stride_, int pad_)
        : kernel(Tensor<S>::zeros({cin, cout, k, k})), bias(Tensor<S>::zeros({cout})),
          stride(stride_), pad(pad_) {
        kernel.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        return conv_transpose2d(x, kernel, stride, pad, bias);
    }
};

template <typename S>
struct Conv3dLayer {
    Tensor<S> kernel;
    std::array<int, 3> stride{1, 1, 1}, pad{0, 0, 0};

    Conv3dLayer() = default;
    Conv3dLayer(Extent cin, Extent cout, std::array<Extent, 3> k, std::array<int, 3> stride_,
                std::array<int, 3> pad_)
        : kernel(Tensor<S>::zeros({cout, cin, k[0], k[1], k[2]})), stride(stride_), pad(pad_) {
        kernel.set_requires_grad(true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return conv3d(x, kernel, stride, pad); }
};

template <typename S>
struct BatchNormLayer {
    Tensor<S> gamma, beta;
    RunningStats<S> running;
    S eps = S(1e-5);
    S momentum = S(0.1);

    BatchNormLayer() = default;
    explicit BatchNormLayer(Extent channels)
        : gamma(Tensor<S>::ones({channels})), beta(Tensor<S>::zeros({channels})),
          running(channels) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    // Batch statistics in both modes (the test protocol uses them too);
    // running averages are only refreshed while training.
    Tensor<S> forward(const Tensor<S>& x, Mode mode) {
        return batch_norm(x, gamma, beta, BatchNormMode::batch_stats, eps, &running, momentum,
                          mode == Mode::train);
    }
};

// ---------------------------------------------------------------------------
// configs
// ---------------------------------------------------------------------------

struct SpatioTemporalEncoderConfig {
    int n_frames = 2;       // prior visits fused by the 3D block
    int feat_channels = 8;  // stage-1 width
    int out_channels = 16;  // 2D feature width handed to the U-Net

    void validate() const {
        if (n_frames < 2) throw InvalidConfig("encoder: n_frames must be >= 2");
        if (feat_channels < 1 || out_channels < 1)
            throw InvalidConfig("encoder: channel counts must be >= 1");
    }
};

struct UNetConfig {
    int in_channels = 16;
    int base_channels = 64;  // stage widths base*{1,2,4,8}
    int depth = 4;
    double dropout_rate = 0.5;

    void validate() const {
        if (depth != 4) throw InvalidConfig("unet: depth is fixed at 4");
        if (in_channels < 1 || base_channels < 1) throw InvalidConfig("unet: bad channel counts");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw InvalidConfig("unet: dropout_rate must be in [0,1)");
    }
};

struct PatchGANConfig {
    int in_channels = 3;  // conditioning frames + 1 candidate
    int base_width = 64;  // stage widths base*{1,2,4,8}, then 1

    static constexpr int kernel = 4;
    static constexpr std::array<int, 5> strides{2, 2, 2, 1, 1};

    std::array<Extent, 5> widths() const {
        const Extent b = base_width;
        return {b, 2 * b, 4 * b, 8 * b, 1};
    }

    void validate() const {
        if (in_channels < 2) throw InvalidConfig("patchgan: needs conditioning plus candidate");
        if (base_width < 1) throw InvalidConfig("patchgan: base_width must be >= 1");
    }
};

struct GeneratorConfig {
    SpatioTemporalEncoderConfig encoder;
    UNetConfig unet;

    void validate() const {
        encoder.validate();
        unet.validate();
        if (unet.in_channels != encoder.out_channels)
            throw InvalidConfig("generator: unet.in_channels must equal encoder.out_channels");
    }
};

// Receptive field of one output pixel for a stack of square convolutions,
// by the reverse recurrence r <- (r-1)*stride + kernel.
inline int receptive_field(const std::vector<int>& strides, const std::vector<int>& kernels) {
    if (strides.empty() || strides.size() != kernels.size())
        throw InvalidConfig("receptive_field: need equal-length, non-empty stride/kernel lists");
    long r = 1;
    for (std::size_t i = strides.size(); i-- > 0;) r = (r - 1) * strides[i] + kernels[i];
    return static_cast<int>(r);
}

// ---------------------------------------------------------------------------
// weight init
// ---------------------------------------------------------------------------

// Kernels ~ N(0, 0.02), batch-norm gains ~ N(1, 0.02), biases and shifts 0.
template <typename S>
void init_weights(const std::vector<NamedTensor<S>>& params, std::uint64_t seed) {
    std::uint64_t idx = 0;
    for (const auto& p : params) {
        Tensor<S> t = p.tensor;
        const std::uint64_t sub = mix_seed(seed, idx++);
        if (p.name.ends_with(".kernel"))
            t.values() = Tensor<S>::normal(t.shape(), S(0), S(0.02), sub).values();
        else if (p.name.ends_with(".gamma"))
            t.values() = Tensor<S>::normal(t.shape(), S(1), S(0.02), sub).values();
        else
            t.values().setZero();
    }
}

// ---------------------------------------------------------------------------
// spatio-temporal encoder: two 3D conv stages fusing the visit stack
// ---------------------------------------------------------------------------

template <typename S>
class SpatioTemporalEncoder {
public:
    SpatioTemporalEncoder() = default;
    explicit SpatioTemporalEncoder(const SpatioTemporalEncoderConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        stage1_ = Conv3dLayer<S>(1, cfg.feat_channels, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
        // depth kernel spans all frames, collapsing time to a 2D map
        stage2_ = Conv3dLayer<S>(cfg.feat_channels, cfg.out_channels, {cfg.n_frames, 3, 3},
                                 {1, 1, 1}, {0, 1, 1});
    }

    SpatioTemporalEncoder(const SpatioTemporalEncoderConfig& cfg, std::uint64_t seed)
        : SpatioTemporalEncoder(cfg) {
        init_weights(parameters(), seed);
    }

    // frames [b,1,T,h,w] -> features [b,out_channels,h,w]
    Tensor<S> forward(const Tensor<S>& frames) const {
        if (frames.rank() != 5 || frames.dim(1) != 1 || frames.dim(2) != cfg_.n_frames)
            throw ShapeMismatch("encoder: frames must be [b,1," + std::to_string(cfg_.n_frames) +
                                ",h,w], got " + shape_str(frames.shape()));
        Tensor<S> x = leaky_relu(stage1_.forward(frames), S(0.2));
        Tensor<S> f = stage2_.forward(x);  // [b,out,1,h,w]
        return reshape(f, {f.dim(0), f.dim(1), f.dim(3), f.dim(4)});
    }

    std::vector<NamedTensor<S>> parameters() const {
        return {{"st1.kernel", stage1_.kernel}, {"st2.kernel", stage2_.kernel}};
    }

    const SpatioTemporalEncoderConfig& config() const { return cfg_; }

private:
    SpatioTemporalEncoderConfig cfg_;
    Conv3dLayer<S> stage1_, stage2_;
};

// ---------------------------------------------------------------------------
// U-Net trunk: 4 down stages, identity bottleneck, 4 up stages with skips
// ---------------------------------------------------------------------------

template <typename S>
class UNet {
public:
    // Zeroes one encoder skip before concatenation; 0 means none.
    struct ForwardOptions {
        Mode mode = Mode::train;
        std::uint64_t dropout_seed = 0;
        int ablate_skip = 0;
    };

    UNet() = default;
    explicit UNet(const UNetConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        const Extent b = cfg.base_channels;
        enc_[0] = Conv2dLayer<S>(cfg.in_channels, b, 4, 2, 1);
        enc_[1] = Conv2dLayer<S>(b, 2 * b, 4, 2, 1);
        enc_[2] = Conv2dLayer<S>(2 * b, 4 * b, 4, 2, 1);
        enc_[3] = Conv2dLayer<S>(4 * b, 8 * b, 4, 2, 1);
        enc_bn_[0] = BatchNormLayer<S>(2 * b);
        enc_bn_[1] = BatchNormLayer<S>(4 * b);
        enc_bn_[2] = BatchNormLayer<S>(8 * b);
        // decoder inputs are path + skip concatenations, hence the doubled widths
        dec_[0] = ConvTranspose2dLayer<S>(16 * b, 4 * b, 4, 2, 1);
        dec_[1] = ConvTranspose2dLayer<S>(8 * b, 2 * b, 4, 2, 1);
        dec_[2] = ConvTranspose2dLayer<S>(4 * b, b, 4, 2, 1);
        dec_[3] = ConvTranspose2dLayer<S>(2 * b, b, 4, 2, 1);
        for (int i = 0; i < 4; ++i)
            dec_bn_[i] = BatchNormLayer<S>(dec_[static_cast<std::size_t>(i)].kernel.dim(1));
        proj_ = Conv2dLayer<S>(b, 1, 1, 1, 0);
    }

    UNet(const UNetConfig& cfg, std::uint64_t seed) : UNet(cfg) {
        init_weights(parameters(), seed);
    }

    Tensor<S> forward(const Tensor<S>& x, const ForwardOptions& opt) {
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
            throw ShapeMismatch("unet: expected [b," + std::to_string(cfg_.in_channels) +
                                ",h,w], got " + shape_str(x.shape()));
        const Extent div = Extent(1) << cfg_.depth;
        if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
            throw ShapeMismatch("unet: spatial extents must be divisible by " +
                                std::to_string(div) + ", got " + shape_str(x.shape()));

        const S slope = S(0.2);
        const S rate = static_cast<S>(cfg_.dropout_rate);

        Tensor<S> e1 = leaky_relu(enc_[0].forward(x), slope);
        Tensor<S> e2 = leaky_relu(enc_bn_[0].forward(enc_[1].forward(e1), opt.mode), slope);
        Tensor<S> e3 = leaky_relu(enc_bn_[1].forward(enc_[2].forward(e2), opt.mode), slope);
        Tensor<S> e4 = leaky_relu(enc_bn_[2].forward(enc_[3].forward(e3), opt.mode), slope);

        auto skip = [&](const Tensor<S>& e, int stage) {
            return opt.ablate_skip == stage ? Tensor<S>::zeros(e.shape()) : e;
        };

        Tensor<S> bottleneck = e4;  // passthrough
        Tensor<S> d1 = relu(dec_bn_[0].forward(
            dec_[0].forward(concat_channels(bottleneck, skip(e4, 4))), opt.mode));
        Tensor<S> d2 =
            relu(dec_bn_[1].forward(dec_[1].forward(concat_channels(d1, skip(e3, 3))), opt.mode));
        d2 = dropout(d2, rate, mix_seed(opt.dropout_seed, 2), true);
        Tensor<S> d3 =
            relu(dec_bn_[2].forward(dec_[2].forward(concat_channels(d2, skip(e2, 2))), opt.mode));
        d3 = dropout(d3, rate, mix_seed(opt.dropout_seed, 3), true);
        Tensor<S> d4 =
            relu(dec_bn_[3].forward(dec_[3].forward(concat_channels(d3, skip(e1, 1))), opt.mode));

        return tanh(proj_.forward(d4));
    }

    std::vector<NamedTensor<S>> parameters() const {
        std::vector<NamedTensor<S>> out;
        for (int i = 0; i < 4; ++i) {
            const auto& e = enc_[static_cast<std::size_t>(i)];
            out.push_back({"enc" + std::to_string(i + 1) + ".kernel", e.kernel});
            out.push_back({"enc" + std::to_string(i + 1) + ".bias", e.bias});
        }
        for (int i = 0; i < 3; ++i) {
            const auto& bn = enc_bn_[static_cast<std::size_t>(i)];
            out.push_back({"enc_bn" + std::to_string(i + 2) + ".gamma", bn.gamma});
            out.push_back({"enc_bn" + std::to_string(i + 2) + ".beta", bn.beta});
        }
        for (int i = 0; i < 4; ++i) {
            const auto& d = dec_[static_cast<std::size_t>(i)];
            out.push_back({"dec" + std::to_string(i + 1) + ".kernel", d.kernel});
            out.push_back({"dec" + std::to_string(i + 1) + ".bias", d.bias});
            const auto& bn = dec_bn_[static_cast<std::size_t>(i)];
            out.push_back({"dec_bn" + std::to_string(i + 1) + ".gamma", bn.gamma});
            out.push_back({"dec_bn" + std::to_string(i + 1) + ".beta", bn.beta});
        }
        out.push_back({"proj.kernel", proj_.kernel});
        out.push_back({"proj.bias", proj_.bias});
        return out;
    }

    std::vector<NamedTensor<S>> buffers() const {
        std::vector<NamedTensor<S>> out;
        for (int i = 0; i < 3; ++i) {
            const auto& bn = enc_bn_[static_cast<std::size_t>(i)];
            out.push_back({"enc_bn" + std::to_string(i + 2) + ".running_mean", bn.running.mean});
            out.push_back({"enc_bn" + std::to_string(i + 2) + ".running_var", bn.running.var});
        }
        for (int i = 0; i < 4; ++i) {
            const auto& bn = dec_bn_[static_cast<std::size_t>(i)];
            out.push_back({"dec_bn" + std::to_string(i + 1) + ".running_mean", bn.running.mean});
            out.push_back({"dec_bn" + std::to_string(i + 1) + ".running_var", bn.running.var});
        }
        return out;
    }

    // Input channel count of decoder stage d (1-based), split as path + skip.
    Extent decoder_input_channels(int d) const {
        return dec_[static_cast<std::size_t>(d - 1)].kernel.dim(0);
    }
    Extent decoder_path_channels(int d) const { return decoder_input_channels(d) / 2; }
    Extent skipped_encoder_channels(int d) const { return decoder_input_channels(d) / 2; }

    const UNetConfig& config() const { return cfg_; }

private:
    UNetConfig cfg_;
    std::array<Conv2dLayer<S>, 4> enc_;
    std::array<BatchNormLayer<S>, 3> enc_bn_;
    std::array<ConvTranspose2dLayer<S>, 4> dec_;
    std::array<BatchNormLayer<S>, 4> dec_bn_;
    Conv2dLayer<S> proj_;
};

// ---------------------------------------------------------------------------
// generator: 3D feature extractor feeding the U-Net
// ---------------------------------------------------------------------------

template <typename S>
class Generator {
public:
    Generator() = default;
    Generator(const GeneratorConfig& cfg, std::uint64_t seed)
        : cfg_(cfg), encoder_(cfg.encoder), unet_(cfg.unet) {
        cfg.validate();
        init_weights(parameters(), seed);
    }

    // frames [b,1,T,h,w] -> prediction [b,1,h,w] in (-1,1). Dropout stays
    // active and batch statistics are recomputed in both modes; `mode` only
    // gates the running-average bookkeeping.
    Tensor<S> forward(const Tensor<S>& frames, Mode mode, std::uint64_t dropout_seed,
                      int ablate_skip = 0) {
        Tensor<S> feat = encoder_.forward(frames);
        typename UNet<S>::ForwardOptions opt;
        opt.mode = mode;
        opt.dropout_seed = dropout_seed;
        opt.ablate_skip = ablate_skip;
        return unet_.forward(feat, opt);
    }

    std::vector<NamedTensor<S>> parameters() const {
        std::vector<NamedTensor<S>> out = encoder_.parameters();
        for (auto& p : unet_.parameters()) out.push_back(std::move(p));
        return out;
    }

    std::vector<NamedTensor<S>> buffers() const { return unet_.buffers(); }

    const GeneratorConfig& config() const { return cfg_; }
    UNet<S>& unet() { return unet_; }
    SpatioTemporalEncoder<S>& encoder() { return encoder_; }

private:
    GeneratorConfig cfg_;
    SpatioTemporalEncoder<S> encoder_;
    UNet<S> unet_;
};

// ---------------------------------------------------------------------------
// PatchGAN discriminator: five stages, stride plan {2,2,2,1,1}
// ---------------------------------------------------------------------------

template <typename S>
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const PatchGANConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        const auto w = cfg.widths();
        Extent cin = cfg.in_channels;
        for (int i = 0; i < 5; ++i) {
            conv_[static_cast<std::size_t>(i)] =
                Conv2dLayer<S>(cin, w[static_cast<std::size_t>(i)], PatchGANConfig::kernel,
                               PatchGANConfig::strides[static_cast<std::size_t>(i)], 1);
            cin = w[static_cast<std::size_t>(i)];
        }
        for (int i = 0; i < 3; ++i)
            bn_[static_cast<std::size_t>(i)] = BatchNormLayer<S>(w[static_cast<std::size_t>(i) + 1]);
        init_weights(parameters(), seed);
    }

    // frames [b,1,T,h,w] + candidate [b,1,h,w] -> raw score map [b,1,h',w'].
    // The frames flatten to T conditioning channels; squashing is left to
    // the loss so the same net serves BCE and MSE.
    Tensor<S> forward(const Tensor<S>& frames, const Tensor<S>& candidate,
                      Mode mode = Mode::train) {
        if (frames.rank() != 5 || frames.dim(1) != 1)
            throw ShapeMismatch("discriminator: frames must be [b,1,T,h,w], got " +
                                shape_str(frames.shape()));
        if (candidate.rank() != 4 || candidate.dim(1) != 1)
            throw ShapeMismatch("discriminator: candidate must be [b,1,h,w], got " +
                                shape_str(candidate.shape()));
        if (frames.dim(0) != candidate.dim(0) || frames.dim(3) != candidate.dim(2) ||
            frames.dim(4) != candidate.dim(3))
            throw ShapeMismatch("discriminator: frames/candidate extents disagree");
        if (frames.dim(2) + 1 != cfg_.in_channels)
            throw ShapeMismatch("discriminator: built for " +
                                std::to_string(cfg_.in_channels - 1) + " conditioning frames, got " +
                                std::to_string(frames.dim(2)));

        Tensor<S> cond =
            reshape(frames, {frames.dim(0), frames.dim(2), frames.dim(3), frames.dim(4)});
        Tensor<S> x = concat_channels(cond, candidate);
        x = leaky_relu(conv_[0].forward(x), S(0.2));
        x = leaky_relu(bn_[0].forward(conv_[1].forward(x), mode), S(0.2));
        x = leaky_relu(bn_[1].forward(conv_[2].forward(x), mode), S(0.2));
        x = leaky_relu(bn_[2].forward(conv_[3].forward(x), mode), S(0.2));
        return conv_[4].forward(x);
    }

    std::vector<NamedTensor<S>> parameters() const {
        std::vector<NamedTensor<S>> out;
        for (int i = 0; i < 5; ++i) {
            const auto& c = conv_[static_cast<std::size_t>(i)];
            out.push_back({"conv" + std::to_string(i + 1) + ".kernel", c.kernel});
            out.push_back({"conv" + std::to_string(i + 1) + ".bias", c.bias});
        }
        for (int i = 0; i < 3; ++i) {
            const auto& bn = bn_[static_cast<std::size_t>(i)];
            out.push_back({"bn" + std::to_string(i + 2) + ".gamma", bn.gamma});
            out.push_back({"bn" + std::to_string(i + 2) + ".beta", bn.beta});
        }
        return out;
    }

    std::vector<NamedTensor<S>> buffers() const {
        std::vector<NamedTensor<S>> out;
        for (int i = 0; i < 3; ++i) {
            const auto& bn = bn_[static_cast<std::size_t>(i)];
            out.push_back({"bn" + std::to_string(i + 2) + ".running_mean", bn.running.mean});
            out.push_back({"bn" + std::to_string(i + 2) + ".running_var", bn.running.var});
        }
        return out;
    }

    static std::vector<int> stride_plan() { return {2, 2, 2, 1, 1}; }
    static std::vector<int> kernel_plan() { return {4, 4, 4, 4, 4}; }

    const PatchGANConfig& config() const { return cfg_; }

private:
    PatchGANConfig cfg_;
    std::array<Conv2dLayer<S>, 5> conv_;
    std::array<BatchNormLayer<S>, 3> bn_;
};

template <typename S>
Tensor<S> generator_forward(Generator<S>& g, const Tensor<S>& frames, Mode mode,
                            std::uint64_t dropout_seed) {
    return g.forward(frames, mode, dropout_seed);
}

template <typename S>
Tensor<S> discriminator_forward(Discriminator<S>& d, const Tensor<S>& frames,
                                const Tensor<S>& candidate, Mode mode = Mode::train) {
    return d.forward(frames, candidate, mode);
}

}  // namespace octgan

#endif
