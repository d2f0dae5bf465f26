#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "fn2en/autodiff.hpp"
#include "fn2en/rng.hpp"
#include "fn2en/tensor.hpp"

namespace fn2en {

// Training precision. Verification-mode (double) checks run on the op layer
// directly, so the network stack is single-precision.
using real = float;

enum class LayerKind { Conv, ReLU, MaxPool, Deconv, Flatten, Dropout, Linear };

struct LayerSpec {
    LayerKind kind{};
    std::string name;
    std::size_t in_channels = 0, out_channels = 0;  // conv / deconv
    std::size_t kernel = 0, stride = 1, pad = 0;    // conv / deconv / maxpool
    std::size_t in_dim = 0, out_dim = 0;            // linear
    double rate = 0.0;                              // dropout
};

// Student expression-net shape: a stack of conv3x3 -> relu -> maxpool3x3/2 blocks,
// a 1x1 adapter conv bridging to the teacher's tap channels, and (after
// attach_head) one hidden FC layer plus the logits layer.
struct ExpNetSpec {
    std::vector<std::size_t> conv_channels = {64, 128, 256, 512, 512};
    std::size_t adapter_channels = 512;  // match the teacher tap
    std::size_t fc_dim = 256;
    std::size_t num_classes = 8;
    std::size_t input_size = 224;
    std::size_t input_channels = 3;
    double scale = 1.0;        // desk-scale shrink factor; 1.0 means the full net
    double dropout_rate = 0.5;
    // Teacher tap spatial extent. 0 means "assume it matches"; a nonzero value
    // different from the adapter's spatial size makes build_expnet insert a
    // deconv upsampler after the adapter.
    std::size_t teacher_tap_spatial = 0;

    void validate() const;
    ExpNetSpec scaled(double factor) const;
};

enum class Mode { Train, Eval };

// Ordered layer list plus a named parameter store. forward() builds a fresh
// autodiff graph over the stored parameter nodes and captures every layer output
// as a named tap.
class Network {
public:
    struct ForwardResult {
        Value<real> output;
        std::map<std::string, Value<real>> taps;

        const Value<real>& tap(const std::string& name) const;
    };

    Network() = default;
    Network(std::vector<LayerSpec> layers, std::size_t input_channels, Rng& rng);

    // dropout_rate < 0 keeps each dropout layer's own rate. rng may be null in
    // Eval mode or when the net has no dropout layer.
    ForwardResult forward(const Tensor<real>& input, Mode mode, Rng* rng = nullptr,
                          double dropout_rate = -1.0) const;

    std::vector<std::size_t> infer_shape(std::vector<std::size_t> chw) const;
    bool has_layer(const std::string& name) const;
    const LayerSpec& layer(const std::string& name) const;

    void freeze();
    bool frozen() const { return frozen_; }

    std::size_t param_count() const;
    std::vector<std::string> param_names() const;
    const Value<real>& param(const std::string& name) const;
    void zero_grads();

    const std::vector<LayerSpec>& layers() const { return layers_; }
    std::map<std::string, Value<real>>& params() { return params_; }
    const std::map<std::string, Value<real>>& params() const { return params_; }

    // Used by the builders and checkpoint loader.
    void append_layer(const LayerSpec& spec, Rng& rng);
    void remove_layers_from(std::size_t index);
    void set_param(const std::string& name, Tensor<real> value);

    std::size_t input_channels() const { return input_channels_; }
    void set_input_channels(std::size_t c) { input_channels_ = c; }

private:
    std::vector<LayerSpec> layers_;
    std::map<std::string, Value<real>> params_;
    std::size_t input_channels_ = 0;
    bool frozen_ = false;

    void init_layer_params(const LayerSpec& spec, Rng& rng);
};

// Convolutional trunk only: conv blocks plus the 1x1 adapter (and the deconv
// upsampler when the spec's teacher tap size demands one). The FC head is added
// separately by attach_head.
Network build_expnet(const ExpNetSpec& spec, Rng& rng);

// Appends flatten -> dropout -> fc_hidden -> relu -> fc_out with freshly sampled
// Gaussian FC weights. Conv parameters are untouched and stay trainable.
void attach_head(Network& net, const ExpNetSpec& spec, Rng& rng);

// Removes the FC head (everything from the flatten layer on) so a differently
// sized head can be attached, e.g. when repurposing an identity-trained teacher.
void strip_head(Network& net);

bool has_head(const Network& net);

// Static shape inference over a layer list (no parameters are materialized).
std::vector<std::size_t> infer_layer_shape(const std::vector<LayerSpec>& layers,
                                           std::vector<std::size_t> chw);
std::vector<std::size_t> tap_shape_of(const std::vector<LayerSpec>& layers,
                                      std::vector<std::size_t> chw, const std::string& tap);

// A VGG-16 shaped layer list (2x2/2 floor pooling, fc6/fc7/fc8) used as a
// full-scale stand-in teacher for shape checks.
std::vector<LayerSpec> vgg16_layers(std::size_t num_classes = 2622);

// Frozen feature function G: tap extraction is a pure function of the image.
class TeacherNet {
public:
    explicit TeacherNet(Network net);

    // Activation at the named tap for a single C x H x W image (gradient-free).
    Tensor<real> features(const Tensor<real>& image, const std::string& tap) const;
    // Batched variant, N x C x H x W in.
    Tensor<real> features_batch(const Tensor<real>& batch, const std::string& tap) const;

    std::vector<std::size_t> tap_shape(std::vector<std::size_t> chw, const std::string& tap) const;
    const Network& network() const { return net_; }

private:
    Network net_;
    void require_tap(const std::string& tap) const;
};

inline Tensor<real> teacher_features(const TeacherNet& teacher, const Tensor<real>& image,
                                     const std::string& tap) {
    return teacher.features(image, tap);
}

}  // namespace fn2en
