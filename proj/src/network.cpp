#include "fn2en/network.hpp"

#include <algorithm>
#include <cmath>

#include "fn2en/errors.hpp"

namespace fn2en {

void ExpNetSpec::validate() const {
    if (conv_channels.empty()) throw ConfigError("expnet: need at least one conv block");
    if (scale == 1.0 && conv_channels.size() != 5) {
        throw ConfigError("expnet: the full-scale net has exactly five conv blocks; set scale "
                          "below 1 for desk-scale variants");
    }
    if (scale <= 0.0) throw ConfigError("expnet: scale must be positive");
    for (std::size_t c : conv_channels) {
        if (c == 0) throw ConfigError("expnet: conv channel count must be positive");
    }
    if (adapter_channels == 0 || fc_dim == 0 || num_classes == 0) {
        throw ConfigError("expnet: adapter_channels, fc_dim and num_classes must be positive");
    }
    if (input_size == 0 || input_channels == 0) {
        throw ConfigError("expnet: input_size and input_channels must be positive");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ConfigError("expnet: dropout_rate must be in [0,1)");
    }
}

ExpNetSpec ExpNetSpec::scaled(double factor) const {
    if (factor <= 0.0) throw ConfigError("expnet: scale factor must be positive");
    ExpNetSpec s = *this;
    s.scale = scale * factor;
    for (auto& c : s.conv_channels) {
        c = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(c * factor)));
    }
    s.adapter_channels =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(adapter_channels * factor)));
    s.fc_dim = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fc_dim * factor)));
    return s;
}

const Value<real>& Network::ForwardResult::tap(const std::string& name) const {
    auto it = taps.find(name);
    if (it == taps.end()) throw ConfigError("unknown tap '" + name + "'");
    return it->second;
}

Network::Network(std::vector<LayerSpec> layers, std::size_t input_channels, Rng& rng)
    : input_channels_(input_channels) {
    for (const auto& l : layers) append_layer(l, rng);
}

void Network::init_layer_params(const LayerSpec& spec, Rng& rng) {
    switch (spec.kind) {
        case LayerKind::Conv: {
            // Fan-in scaled Gaussian for conv weights, zero bias.
            const double fan_in = static_cast<double>(spec.in_channels * spec.kernel * spec.kernel);
            const real std = static_cast<real>(std::sqrt(2.0 / fan_in));
            params_[spec.name + ".w"] = parameter(
                Tensor<real>::gaussian({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel},
                                       std, rng),
                spec.name + ".w");
            params_[spec.name + ".b"] =
                parameter(Tensor<real>({spec.out_channels}), spec.name + ".b");
            break;
        }
        case LayerKind::Deconv: {
            const double fan_in = static_cast<double>(spec.in_channels * spec.kernel * spec.kernel);
            const real std = static_cast<real>(std::sqrt(2.0 / fan_in));
            params_[spec.name + ".w"] = parameter(
                Tensor<real>::gaussian({spec.in_channels, spec.out_channels, spec.kernel, spec.kernel},
                                       std, rng),
                spec.name + ".w");
            break;
        }
        case LayerKind::Linear: {
            // FC layers use a fixed-std Gaussian, zero bias.
            params_[spec.name + ".w"] = parameter(
                Tensor<real>::gaussian({spec.out_dim, spec.in_dim}, real(0.01), rng),
                spec.name + ".w");
            params_[spec.name + ".b"] = parameter(Tensor<real>({spec.out_dim}), spec.name + ".b");
            break;
        }
        default:
            break;
    }
}

void Network::append_layer(const LayerSpec& spec, Rng& rng) {
    if (has_layer(spec.name)) throw ConfigError("duplicate layer name '" + spec.name + "'");
    layers_.push_back(spec);
    init_layer_params(spec, rng);
}

void Network::remove_layers_from(std::size_t index) {
    for (std::size_t i = index; i < layers_.size(); ++i) {
        params_.erase(layers_[i].name + ".w");
        params_.erase(layers_[i].name + ".b");
    }
    layers_.erase(layers_.begin() + static_cast<std::ptrdiff_t>(index), layers_.end());
}

void Network::set_param(const std::string& name, Tensor<real> value) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    require_same_shape(it->second->value, value, "set_param");
    it->second->value = std::move(value);
}

bool Network::has_layer(const std::string& name) const {
    return std::any_of(layers_.begin(), layers_.end(),
                       [&](const LayerSpec& l) { return l.name == name; });
}

const LayerSpec& Network::layer(const std::string& name) const {
    for (const auto& l : layers_) {
        if (l.name == name) return l;
    }
    throw ConfigError("unknown layer '" + name + "'");
}

void Network::freeze() {
    for (auto& [name, p] : params_) {
        p->requires_grad = false;
        p->trainable = false;
        p->grad = Tensor<real>();
    }
    frozen_ = true;
}

std::size_t Network::param_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p->value.numel();
    return n;
}

std::vector<std::string> Network::param_names() const {
    std::vector<std::string> names;
    names.reserve(params_.size());
    for (const auto& [name, p] : params_) names.push_back(name);
    return names;
}

const Value<real>& Network::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

void Network::zero_grads() {
    for (auto& [name, p] : params_) p->zero_grad();
}

Network::ForwardResult Network::forward(const Tensor<real>& input, Mode mode, Rng* rng,
                                        double dropout_rate) const {
    if (input.rank() != 4) {
        throw ShapeError("network forward: need NCHW input, got " + input.shape_str());
    }
    if (input.dims[1] != input_channels_) {
        throw ShapeError("network forward: expected " + std::to_string(input_channels_) +
                         " input channels, got " + std::to_string(input.dims[1]));
    }
    ForwardResult res;
    Value<real> x = constant(input, "input");
    for (const auto& l : layers_) {
        switch (l.kind) {
            case LayerKind::Conv:
                x = conv2d(x, param(l.name + ".w"), param(l.name + ".b"), l.stride, l.pad);
                break;
            case LayerKind::Deconv:
                x = deconv2d(x, param(l.name + ".w"), l.stride);
                break;
            case LayerKind::ReLU:
                x = relu(x);
                break;
            case LayerKind::MaxPool:
                x = maxpool2d(x, l.kernel, l.stride);
                break;
            case LayerKind::Flatten:
                x = flatten(x);
                break;
            case LayerKind::Dropout: {
                const double rate = dropout_rate >= 0.0 ? dropout_rate : l.rate;
                if (mode == Mode::Train && rate > 0.0) {
                    if (!rng) throw ContractError("network forward: dropout needs an RNG in train mode");
                    x = dropout(x, rate, *rng, true);
                }
                // Eval (or rate 0) is an identity; skip the node entirely.
                break;
            }
            case LayerKind::Linear:
                x = linear(x, param(l.name + ".w"), param(l.name + ".b"));
                break;
        }
        res.taps[l.name] = x;
    }
    res.output = x;
    return res;
}

std::vector<std::size_t> infer_layer_shape(const std::vector<LayerSpec>& layers,
                                           std::vector<std::size_t> chw) {
    for (const auto& l : layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                if (chw.size() != 3 || chw[0] != l.in_channels) {
                    throw ShapeError("infer_shape: layer '" + l.name + "' expects " +
                                     std::to_string(l.in_channels) + " channels");
                }
                chw = {l.out_channels, conv_out_extent(chw[1], l.kernel, l.stride, l.pad),
                       conv_out_extent(chw[2], l.kernel, l.stride, l.pad)};
                break;
            case LayerKind::Deconv:
                chw = {l.out_channels, (chw[1] - 1) * l.stride + l.kernel,
                       (chw[2] - 1) * l.stride + l.kernel};
                break;
            case LayerKind::MaxPool:
                chw = {chw[0], detail::ceil_pool_extent(chw[1], l.kernel, l.stride),
                       detail::ceil_pool_extent(chw[2], l.kernel, l.stride)};
                break;
            case LayerKind::Flatten:
                chw = {chw[0] * chw[1] * chw[2]};
                break;
            case LayerKind::Linear:
                if (chw.size() != 1 || chw[0] != l.in_dim) {
                    throw ShapeError("infer_shape: layer '" + l.name + "' expects input dim " +
                                     std::to_string(l.in_dim));
                }
                chw = {l.out_dim};
                break;
            case LayerKind::ReLU:
            case LayerKind::Dropout:
                break;
        }
    }
    return chw;
}

std::vector<std::size_t> Network::infer_shape(std::vector<std::size_t> chw) const {
    return infer_layer_shape(layers_, std::move(chw));
}

Network build_expnet(const ExpNetSpec& spec, Rng& rng) {
    spec.validate();
    std::vector<LayerSpec> layers;
    std::size_t in_c = spec.input_channels;
    std::size_t spatial = spec.input_size;
    for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
        const std::string idx = std::to_string(i + 1);
        // 3x3 convs with padding 1 preserve the spatial size; only the pools shrink it.
        layers.push_back({LayerKind::Conv, "conv" + idx, in_c, spec.conv_channels[i], 3, 1, 1});
        layers.push_back({LayerKind::ReLU, "relu" + idx});
        layers.push_back({LayerKind::MaxPool, "pool" + idx, 0, 0, 3, 2, 0});
        in_c = spec.conv_channels[i];
        spatial = detail::ceil_pool_extent(spatial, 3, 2);
    }
    layers.push_back({LayerKind::Conv, "adapter", in_c, spec.adapter_channels, 1, 1, 0});
    if (spec.teacher_tap_spatial != 0 && spec.teacher_tap_spatial != spatial) {
        if (spec.teacher_tap_spatial < spatial || spec.teacher_tap_spatial % spatial != 0) {
            throw ConfigError("expnet: teacher tap spatial size " +
                              std::to_string(spec.teacher_tap_spatial) +
                              " is not an integer upsampling of the adapter output " +
                              std::to_string(spatial));
        }
        const std::size_t factor = spec.teacher_tap_spatial / spatial;
        layers.push_back({LayerKind::Deconv, "upsample", spec.adapter_channels,
                          spec.adapter_channels, factor, factor, 0});
    }
    return Network(std::move(layers), spec.input_channels, rng);
}

bool has_head(const Network& net) { return net.has_layer("flatten"); }

void attach_head(Network& net, const ExpNetSpec& spec, Rng& rng) {
    if (has_head(net)) throw ContractError("attach_head: head already attached");
    auto shape = net.infer_shape({spec.input_channels, spec.input_size, spec.input_size});
    if (shape.size() != 3) throw ContractError("attach_head: trunk must end in a feature map");
    const std::size_t flat_dim = shape[0] * shape[1] * shape[2];
    net.append_layer({LayerKind::Flatten, "flatten"}, rng);
    LayerSpec drop{LayerKind::Dropout, "dropout"};
    drop.rate = spec.dropout_rate;
    net.append_layer(drop, rng);
    LayerSpec fc1{LayerKind::Linear, "fc_hidden"};
    fc1.in_dim = flat_dim;
    fc1.out_dim = spec.fc_dim;
    net.append_layer(fc1, rng);
    net.append_layer({LayerKind::ReLU, "fc_hidden_relu"}, rng);
    LayerSpec fc2{LayerKind::Linear, "fc_out"};
    fc2.in_dim = spec.fc_dim;
    fc2.out_dim = spec.num_classes;
    net.append_layer(fc2, rng);
}

void strip_head(Network& net) {
    const auto& layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].name == "flatten") {
            net.remove_layers_from(i);
            return;
        }
    }
    throw ContractError("strip_head: no head attached");
}

std::vector<LayerSpec> vgg16_layers(std::size_t num_classes) {
    const std::vector<std::vector<std::size_t>> blocks = {
        {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
    std::vector<LayerSpec> layers;
    std::size_t in_c = 3;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        for (std::size_t j = 0; j < blocks[b].size(); ++j) {
            const std::string name = "conv" + std::to_string(b + 1) + "_" + std::to_string(j + 1);
            layers.push_back({LayerKind::Conv, name, in_c, blocks[b][j], 3, 1, 1});
            layers.push_back({LayerKind::ReLU, "relu" + std::to_string(b + 1) + "_" + std::to_string(j + 1)});
            in_c = blocks[b][j];
        }
        layers.push_back({LayerKind::MaxPool, "pool" + std::to_string(b + 1), 0, 0, 2, 2, 0});
    }
    layers.push_back({LayerKind::Flatten, "flatten"});
    LayerSpec fc6{LayerKind::Linear, "fc6"};
    fc6.in_dim = 512 * 7 * 7;
    fc6.out_dim = 4096;
    layers.push_back(fc6);
    layers.push_back({LayerKind::ReLU, "relu6"});
    LayerSpec fc7{LayerKind::Linear, "fc7"};
    fc7.in_dim = 4096;
    fc7.out_dim = 4096;
    layers.push_back(fc7);
    layers.push_back({LayerKind::ReLU, "relu7"});
    LayerSpec fc8{LayerKind::Linear, "fc8"};
    fc8.in_dim = 4096;
    fc8.out_dim = num_classes;
    layers.push_back(fc8);
    return layers;
}

TeacherNet::TeacherNet(Network net) : net_(std::move(net)) { net_.freeze(); }

void TeacherNet::require_tap(const std::string& tap) const {
    if (!net_.has_layer(tap)) throw ConfigError("teacher: unknown tap '" + tap + "'");
}

Tensor<real> TeacherNet::features(const Tensor<real>& image, const std::string& tap) const {
    if (image.rank() != 3) {
        throw ShapeError("teacher features: need CHW image, got " + image.shape_str());
    }
    Tensor<real> batch({1, image.dims[0], image.dims[1], image.dims[2]}, image.v);
    Tensor<real> out = features_batch(batch, tap);
    std::vector<std::size_t> dims(out.dims.begin() + 1, out.dims.end());
    return Tensor<real>(std::move(dims), std::move(out.v));
}

Tensor<real> TeacherNet::features_batch(const Tensor<real>& batch, const std::string& tap) const {
    require_tap(tap);
    auto res = net_.forward(batch, Mode::Eval);
    return res.tap(tap)->value;
}

std::vector<std::size_t> TeacherNet::tap_shape(std::vector<std::size_t> chw,
                                               const std::string& tap) const {
    require_tap(tap);
    std::vector<LayerSpec> prefix;
    for (const auto& l : net_.layers()) {
        prefix.push_back(l);
        if (l.name == tap) break;
    }
    return infer_layer_shape(prefix, std::move(chw));
}

std::vector<std::size_t> tap_shape_of(const std::vector<LayerSpec>& layers,
                                      std::vector<std::size_t> chw, const std::string& tap) {
    std::vector<LayerSpec> prefix;
    bool found = false;
    for (const auto& l : layers) {
        prefix.push_back(l);
        if (l.name == tap) {
            found = true;
            break;
        }
    }
    if (!found) throw ConfigError("unknown tap '" + tap + "'");
    return infer_layer_shape(prefix, std::move(chw));
}

}  // namespace fn2en
