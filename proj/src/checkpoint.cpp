#include "fn2en/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iostream>
#include <vector>

#include <json.hpp>

#include "fn2en/errors.hpp"

namespace fn2en {

namespace {

using nlohmann::json;

void put_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t get_u16(std::istream& is, const char* what) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) {
        throw FormatError(std::string("checkpoint: truncated while reading ") + what);
    }
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("checkpoint: truncated while reading ") + what);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor<real>& t) {
    if (name.size() > 0xFFFF) throw ContractError("checkpoint: tensor name too long");
    if (t.rank() > 0xFF) throw ContractError("checkpoint: tensor rank too large");
    put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.rank()));
    for (std::size_t d : t.dims) {
        if (d > 0xFFFFFFFFull) throw ContractError("checkpoint: dim overflow");
        put_u32(os, static_cast<std::uint32_t>(d));
    }
    for (real x : t.v) {
        std::uint32_t bits;
        const float f = static_cast<float>(x);
        std::memcpy(&bits, &f, 4);
        put_u32(os, bits);
    }
}

std::pair<std::string, Tensor<real>> get_tensor(std::istream& is) {
    const std::uint16_t name_len = get_u16(is, "tensor name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw FormatError("checkpoint: truncated tensor name");
    const int rank = is.get();
    if (rank < 0) throw FormatError("checkpoint: truncated tensor rank");
    std::vector<std::size_t> dims;
    std::uint64_t count = 1;
    for (int d = 0; d < rank; ++d) {
        const std::uint32_t e = get_u32(is, "tensor dim");
        if (e == 0) throw FormatError("checkpoint: zero tensor dim");
        dims.push_back(e);
        count *= e;
        if (count > (1ull << 33)) throw FormatError("checkpoint: tensor dim overflow");
    }
    Tensor<real> t(dims);
    for (auto& x : t.v) {
        const std::uint32_t bits = get_u32(is, "tensor payload");
        float f;
        std::memcpy(&f, &bits, 4);
        x = static_cast<real>(f);
    }
    return {std::move(name), std::move(t)};
}

json layer_to_json(const LayerSpec& l) {
    json j;
    switch (l.kind) {
        case LayerKind::Conv: j["kind"] = "conv"; break;
        case LayerKind::ReLU: j["kind"] = "relu"; break;
        case LayerKind::MaxPool: j["kind"] = "maxpool"; break;
        case LayerKind::Deconv: j["kind"] = "deconv"; break;
        case LayerKind::Flatten: j["kind"] = "flatten"; break;
        case LayerKind::Dropout: j["kind"] = "dropout"; break;
        case LayerKind::Linear: j["kind"] = "linear"; break;
    }
    j["name"] = l.name;
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Deconv) {
        j["in"] = l.in_channels;
        j["out"] = l.out_channels;
        j["k"] = l.kernel;
        j["s"] = l.stride;
        j["p"] = l.pad;
    } else if (l.kind == LayerKind::MaxPool) {
        j["k"] = l.kernel;
        j["s"] = l.stride;
    } else if (l.kind == LayerKind::Linear) {
        j["in"] = l.in_dim;
        j["out"] = l.out_dim;
    } else if (l.kind == LayerKind::Dropout) {
        j["rate"] = l.rate;
    }
    return j;
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec l;
    const std::string kind = j.at("kind").get<std::string>();
    l.name = j.at("name").get<std::string>();
    if (kind == "conv" || kind == "deconv") {
        l.kind = kind == "conv" ? LayerKind::Conv : LayerKind::Deconv;
        l.in_channels = j.at("in").get<std::size_t>();
        l.out_channels = j.at("out").get<std::size_t>();
        l.kernel = j.at("k").get<std::size_t>();
        l.stride = j.at("s").get<std::size_t>();
        l.pad = j.value("p", 0);
    } else if (kind == "relu") {
        l.kind = LayerKind::ReLU;
    } else if (kind == "maxpool") {
        l.kind = LayerKind::MaxPool;
        l.kernel = j.at("k").get<std::size_t>();
        l.stride = j.at("s").get<std::size_t>();
    } else if (kind == "flatten") {
        l.kind = LayerKind::Flatten;
    } else if (kind == "dropout") {
        l.kind = LayerKind::Dropout;
        l.rate = j.at("rate").get<double>();
    } else if (kind == "linear") {
        l.kind = LayerKind::Linear;
        l.in_dim = j.at("in").get<std::size_t>();
        l.out_dim = j.at("out").get<std::size_t>();
    } else {
        throw FormatError("checkpoint: unknown layer kind '" + kind + "'");
    }
    return l;
}

json structural_json(const Network& net) {
    json j;
    j["input_channels"] = net.input_channels();
    j["layers"] = json::array();
    for (const auto& l : net.layers()) j["layers"].push_back(layer_to_json(l));
    return j;
}

}  // namespace

std::string architecture_descriptor(const Network& net) { return structural_json(net).dump(); }

std::string architecture_hash(const Network& net) {
    const std::string s = architecture_descriptor(net);
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_network(const Network& net, const std::string& path, const CheckpointMeta& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    os.write("FN2E", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(net.params().size()));
    for (const auto& [name, p] : net.params()) put_tensor(os, name, p->value);
    json j = structural_json(net);
    j["meta"] = {{"stage", meta.stage},
                 {"epoch", meta.epoch},
                 {"config_hash", meta.config_hash.empty() ? architecture_hash(net) : meta.config_hash}};
    const std::string desc = j.dump();
    put_u32(os, static_cast<std::uint32_t>(desc.size()));
    os.write(desc.data(), static_cast<std::streamsize>(desc.size()));
    if (!os) throw DataError("checkpoint: write failed for '" + path + "'");
}

Network load_network(const std::string& path, CheckpointMeta* meta) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FN2E", 4) != 0) {
        throw FormatError("checkpoint: bad magic in '" + path + "'");
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != 1) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = get_u32(is, "tensor count");
    std::map<std::string, Tensor<real>> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = get_tensor(is);
        if (!tensors.emplace(std::move(name), std::move(t)).second) {
            throw FormatError("checkpoint: duplicate tensor in '" + path + "'");
        }
    }
    const std::uint32_t desc_len = get_u32(is, "descriptor length");
    std::string desc(desc_len, '\0');
    if (!is.read(desc.data(), desc_len)) throw FormatError("checkpoint: truncated descriptor");

    json j;
    try {
        j = json::parse(desc);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad descriptor JSON: ") + e.what());
    }
    std::vector<LayerSpec> layers;
    for (const auto& lj : j.at("layers")) layers.push_back(layer_from_json(lj));
    Rng init_rng(0);
    Network net(std::move(layers), j.at("input_channels").get<std::size_t>(), init_rng);

    for (const auto& name : net.param_names()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw FormatError("checkpoint: missing parameter '" + name + "' in '" + path + "'");
        }
        net.set_param(name, std::move(it->second));
        tensors.erase(it);
    }
    for (const auto& [name, t] : tensors) {
        std::cerr << "warning: checkpoint '" << path << "' carries unknown tensor '" << name
                  << "' (" << t.shape_str() << "), ignored\n";
    }
    if (meta) {
        const auto& m = j.value("meta", json::object());
        meta->stage = m.value("stage", 0);
        meta->epoch = m.value("epoch", 0ull);
        meta->config_hash = m.value("config_hash", "");
    }
    return net;
}

TeacherNet load_teacher(const std::string& path) { return TeacherNet(load_network(path)); }

void save_train_state(const TrainState& state, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("train state: cannot open '" + path + "' for writing");
    os.write("FNTS", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(state.stage));
    put_u32(os, static_cast<std::uint32_t>(state.epoch));
    put_u32(os, static_cast<std::uint32_t>(state.step));
    put_u32(os, static_cast<std::uint32_t>(state.seed & 0xFFFFFFFFull));
    put_u32(os, static_cast<std::uint32_t>(state.seed >> 32));
    put_u32(os, static_cast<std::uint32_t>(state.velocity.size()));
    for (const auto& [name, t] : state.velocity) put_tensor(os, name, t);
    if (!os) throw DataError("train state: write failed for '" + path + "'");
}

TrainState load_train_state(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("train state: cannot open '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FNTS", 4) != 0) {
        throw FormatError("train state: bad magic in '" + path + "'");
    }
    if (get_u32(is, "version") != 1) throw FormatError("train state: unsupported version");
    TrainState state;
    state.stage = static_cast<int>(get_u32(is, "stage"));
    state.epoch = get_u32(is, "epoch");
    state.step = get_u32(is, "step");
    const std::uint64_t lo = get_u32(is, "seed lo");
    const std::uint64_t hi = get_u32(is, "seed hi");
    state.seed = lo | (hi << 32);
    const std::uint32_t count = get_u32(is, "velocity count");
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = get_tensor(is);
        state.velocity.emplace(std::move(name), std::move(t));
    }
    return state;
}

}  // namespace fn2en
