#include "fn2en/config.hpp"

#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fn2en/errors.hpp"

namespace fn2en {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

class KeyReader {
public:
    explicit KeyReader(const std::string& origin) : origin_(origin) {}

    void set(const std::string& key, const std::string& value, std::size_t lineno) {
        if (!values_.emplace(key, value).second) {
            throw ConfigError(origin_ + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                              "'");
        }
    }

    bool has(const std::string& key) {
        used_.insert(key);
        return values_.count(key) != 0;
    }

    std::string str(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double num(const std::string& key, double fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing junk");
            return v;
        } catch (const std::exception&) {
            throw ConfigError(origin_ + ": key '" + key + "': expected a number, got '" +
                              it->second + "'");
        }
    }

    std::uint64_t uint(const std::string& key, std::uint64_t fallback) {
        const double v = num(key, static_cast<double>(fallback));
        if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v))) {
            throw ConfigError(origin_ + ": key '" + key + "': expected a non-negative integer");
        }
        return static_cast<std::uint64_t>(v);
    }

    bool flag(const std::string& key, bool fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true") return true;
        if (it->second == "false") return false;
        throw ConfigError(origin_ + ": key '" + key + "': expected true or false, got '" +
                          it->second + "'");
    }

    std::vector<std::string> list(const std::string& key) {
        used_.insert(key);
        std::vector<std::string> out;
        auto it = values_.find(key);
        if (it == values_.end()) return out;
        std::string field;
        for (char ch : it->second) {
            if (ch == ',') {
                out.push_back(trim(field));
                field.clear();
            } else {
                field.push_back(ch);
            }
        }
        const std::string last = trim(field);
        if (!last.empty() || !out.empty()) out.push_back(last);
        return out;
    }

    void reject_unknown() const {
        std::string unknown;
        for (const auto& [key, value] : values_) {
            if (!used_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
        }
        if (!unknown.empty()) {
            throw ConfigError(origin_ + ": unknown key(s): " + unknown);
        }
    }

private:
    std::string origin_;
    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

void read_schedule(KeyReader& keys, const std::string& prefix, TrainSchedule& sched) {
    sched.base_lr = keys.num(prefix + ".baseLr", sched.base_lr);
    sched.lr_decay_factor = keys.num(prefix + ".lrDecayFactor", sched.lr_decay_factor);
    sched.total_epochs = keys.uint(prefix + ".totalEpochs", sched.total_epochs);
    sched.batch_size = keys.uint(prefix + ".batchSize", sched.batch_size);
    sched.momentum = keys.num(prefix + ".momentum", sched.momentum);
    sched.dropout_rate = keys.num(prefix + ".dropoutRate", sched.dropout_rate);
    if (keys.has(prefix + ".lrDecaySteps")) {
        sched.lr_decay_steps.clear();
        for (const auto& s : keys.list(prefix + ".lrDecaySteps")) {
            sched.lr_decay_steps.push_back(std::stoul(s));
        }
    }
    if (sched.base_lr <= 0) throw ConfigError(prefix + ".baseLr must be positive");
    if (sched.batch_size == 0) throw ConfigError(prefix + ".batchSize must be positive");
    if (sched.total_epochs == 0) throw ConfigError(prefix + ".totalEpochs must be positive");
}

}  // namespace

ExperimentConfig parse_config_string(const std::string& text, const std::string& origin) {
    KeyReader keys(origin);
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        keys.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)), lineno);
    }

    ExperimentConfig cfg;
    cfg.run_id = keys.str("run", cfg.run_id);
    cfg.seed = keys.uint("seed", cfg.seed);
    cfg.out_dir = keys.str("out", cfg.out_dir);
    cfg.dataset_manifest = keys.str("dataset.manifest", cfg.dataset_manifest);
    cfg.teacher_checkpoint = keys.str("teacher.checkpoint", cfg.teacher_checkpoint);
    cfg.teacher_tap = keys.str("teacher.tap", cfg.teacher_tap);

    if (keys.has("net.convChannels")) {
        cfg.net.conv_channels.clear();
        for (const auto& c : keys.list("net.convChannels")) {
            cfg.net.conv_channels.push_back(std::stoul(c));
        }
    }
    const std::string adapter = keys.str("net.adapterChannels", "auto");
    if (adapter != "auto") {
        cfg.adapter_auto = false;
        cfg.net.adapter_channels = std::stoul(adapter);
    }
    cfg.net.fc_dim = keys.uint("net.fcDim", cfg.net.fc_dim);
    cfg.net.num_classes = keys.uint("net.numClasses", cfg.net.num_classes);
    cfg.net.input_size = keys.uint("net.inputSize", cfg.net.input_size);
    cfg.net.input_channels = keys.uint("net.inputChannels", cfg.net.input_channels);
    cfg.net.scale = keys.num("net.scale", cfg.net.scale);
    cfg.net.dropout_rate = keys.num("net.dropoutRate", cfg.net.dropout_rate);

    cfg.loss.p = keys.num("loss.p", cfg.loss.p);
    const std::string mode = keys.str("loss.mode", "full-map");
    if (mode == "full-map") {
        cfg.loss.mode = FeatureMode::FullMap;
    } else if (mode == "channel-average") {
        cfg.loss.mode = FeatureMode::ChannelAverage;
    } else {
        throw ConfigError("loss.mode must be full-map or channel-average, got '" + mode + "'");
    }
    const std::string reduction = keys.str("loss.reduction", "mean");
    if (reduction == "mean") {
        cfg.loss.reduction = Reduction::Mean;
    } else if (reduction == "sum") {
        cfg.loss.reduction = Reduction::Sum;
    } else {
        throw ConfigError("loss.reduction must be mean or sum, got '" + reduction + "'");
    }

    read_schedule(keys, "stage1", cfg.stage1);
    read_schedule(keys, "stage2", cfg.stage2);
    cfg.stage1.stage = 1;
    cfg.stage2.stage = 2;
    cfg.stage1.seed = cfg.seed;
    cfg.stage2.seed = cfg.seed;

    cfg.folds_k = keys.uint("folds.k", cfg.folds_k);
    cfg.eval_fold = keys.uint("eval.fold", cfg.eval_fold);

    cfg.augment.canonical_size = keys.uint("augment.canonicalSize", cfg.augment.canonical_size);
    cfg.augment.crop_size = keys.uint("augment.cropSize", cfg.augment.crop_size);
    cfg.augment.random_crop = keys.flag("augment.randomCrop", cfg.augment.random_crop);
    cfg.augment.horizontal_flip = keys.flag("augment.horizontalFlip", cfg.augment.horizontal_flip);

    cfg.analyze_layers = keys.list("analyze.layers");
    cfg.analyze_k = keys.uint("analyze.K", cfg.analyze_k);
    cfg.analyze_bins = keys.uint("analyze.bins", cfg.analyze_bins);
    cfg.visualize_k = keys.uint("visualize.K", cfg.visualize_k);

    cfg.snapshot_every = keys.uint("snapshotEvery", cfg.snapshot_every);
    cfg.wall_time = keys.flag("wallTime", cfg.wall_time);

    keys.reject_unknown();

    if (cfg.augment.crop_size != cfg.net.input_size) {
        throw ConfigError("augment.cropSize (" + std::to_string(cfg.augment.crop_size) +
                          ") must equal net.inputSize (" + std::to_string(cfg.net.input_size) + ")");
    }
    cfg.augment.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config_string(ss.str(), path);
}

}  // namespace fn2en
