#include "fn2en/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

#include "fn2en/errors.hpp"

namespace fn2en {

namespace {

std::string format_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(field);
            field.clear();
        } else if (ch != '\r') {
            field.push_back(ch);
        }
    }
    fields.push_back(field);
    return fields;
}

// Response-descending order with ties broken by ascending image id.
std::vector<std::size_t> ranking(const std::vector<real>& responses,
                                 const std::vector<std::size_t>& image_ids) {
    std::vector<std::size_t> order(responses.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (responses[a] != responses[b]) return responses[a] > responses[b];
        return image_ids[a] < image_ids[b];
    });
    return order;
}

}  // namespace

NeuronEntropyRecord neuron_entropy(const std::vector<real>& responses,
                                   const std::vector<std::size_t>& image_ids,
                                   const std::vector<int>& labels, std::size_t K, std::size_t n) {
    if (responses.empty()) throw DataError("neuron_entropy: empty dataset");
    if (responses.size() != image_ids.size() || responses.size() != labels.size()) {
        throw ShapeError("neuron_entropy: responses/ids/labels size mismatch");
    }
    if (n == 0) throw ConfigError("neuron_entropy: need at least one label bin");
    std::size_t k = K;
    if (k > responses.size()) {
        std::cerr << "warning: neuron_entropy: K=" << K << " clamped to dataset size "
                  << responses.size() << "\n";
        k = responses.size();
    }
    if (k == 0) throw ConfigError("neuron_entropy: K must be positive");

    const auto order = ranking(responses, image_ids);
    NeuronEntropyRecord rec;
    std::vector<std::size_t> counts(n, 0);
    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t i = order[r];
        rec.top_ids.push_back(image_ids[i]);
        const int label = labels[i];
        if (label < 0 || static_cast<std::size_t>(label) >= n) {
            throw DataError("neuron_entropy: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(n) + ")");
        }
        ++counts[label];
    }
    rec.histogram.resize(n);
    double h = 0.0;
    std::size_t best = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const double p = static_cast<double>(counts[b]) / static_cast<double>(k);
        rec.histogram[b] = p;
        if (p > 0.0) h -= p * std::log(p);  // zero-count bins contribute 0
        if (counts[b] > counts[best]) best = b;
    }
    rec.entropy = h;
    rec.top_label = static_cast<int>(best);
    return rec;
}

LesSummary les_count(const std::vector<std::string>& layers,
                     const std::vector<std::vector<double>>& entropies) {
    if (layers.size() != entropies.size()) throw ShapeError("les_count: layers/entropies mismatch");
    LesSummary summary;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (entropies[i].empty()) {
            std::cerr << "warning: les_count: layer '" << layers[i] << "' has no neurons, excluded\n";
            continue;
        }
        summary.layers.push_back(layers[i]);
    }
    if (summary.layers.empty()) throw DataError("les_count: no non-empty layer");
    double threshold = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (entropies[i].empty()) continue;
        const double mean = std::accumulate(entropies[i].begin(), entropies[i].end(), 0.0) /
                            static_cast<double>(entropies[i].size());
        threshold = std::min(threshold, mean);
    }
    summary.threshold = threshold;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (entropies[i].empty()) continue;
        std::size_t count = 0;
        for (double h : entropies[i]) {
            if (h < threshold) ++count;
        }
        summary.counts.push_back(count);
    }
    return summary;
}

std::vector<LayerResponses> collect_responses(const Network& net, const Dataset& data,
                                              const std::vector<std::size_t>& indices,
                                              const std::vector<std::string>& taps,
                                              const AugmentPolicy& policy) {
    if (indices.empty()) throw DataError("collect_responses: empty index list");
    for (const auto& tap : taps) {
        if (!net.has_layer(tap)) throw ConfigError("collect_responses: unknown tap '" + tap + "'");
    }
    std::vector<LayerResponses> out(taps.size());
    for (std::size_t t = 0; t < taps.size(); ++t) out[t].layer = taps[t];

    Rng unused(0);
    for (std::size_t i : indices) {
        Tensor<real> batch = batch_images(data, {i}, policy, unused, false);
        auto fwd = net.forward(batch, Mode::Eval);
        for (std::size_t t = 0; t < taps.size(); ++t) {
            const Tensor<real>& act = fwd.tap(taps[t])->value;
            LayerResponses& lr = out[t];
            if (act.rank() == 4) {
                // Channel-as-neuron: per-image response is the spatial max.
                const std::size_t c = act.dims[1], plane = act.dims[2] * act.dims[3];
                if (lr.neurons == 0) lr.neurons = c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const real* p = &act.v[ch * plane];
                    real best = p[0];
                    for (std::size_t j = 1; j < plane; ++j) best = std::max(best, p[j]);
                    lr.values.push_back(best);
                }
            } else if (act.rank() == 2) {
                if (lr.neurons == 0) lr.neurons = act.dims[1];
                for (std::size_t j = 0; j < act.dims[1]; ++j) lr.values.push_back(act.v[j]);
            } else {
                throw ShapeError("collect_responses: tap '" + taps[t] + "' has unsupported rank");
            }
            lr.image_ids.push_back(data.id(i));
        }
    }
    return out;
}

EntropyReport build_entropy_report(const Network& net, const std::string& tag, const Dataset& data,
                                   const std::vector<std::size_t>& indices,
                                   const std::vector<std::string>& taps, std::size_t K,
                                   std::size_t hist_bins, const AugmentPolicy& policy) {
    const std::size_t n = data.num_classes();
    if (n == 0) throw DataError("entropy report: dataset has no classes");
    if (hist_bins == 0) throw ConfigError("entropy report: need at least one histogram bin");

    std::vector<int> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) labels.push_back(data.label(i));

    auto responses = collect_responses(net, data, indices, taps, policy);

    EntropyReport report;
    report.tag = tag;
    report.K = K;
    report.n = n;
    report.hist_bins = hist_bins;
    const double h_max = std::log(static_cast<double>(n));
    std::vector<std::vector<double>> per_layer_entropy;
    for (const auto& lr : responses) {
        LayerEntropyReport layer;
        layer.layer = lr.layer;
        layer.entropy_histogram.assign(hist_bins, 0);
        std::vector<double> entropies;
        std::vector<real> column(lr.image_ids.size());
        for (std::size_t j = 0; j < lr.neurons; ++j) {
            for (std::size_t img = 0; img < lr.image_ids.size(); ++img) {
                column[img] = lr.at(img, j);
            }
            NeuronEntropyRecord rec = neuron_entropy(column, lr.image_ids, labels, K, n);
            rec.layer = lr.layer;
            rec.neuron = j;
            entropies.push_back(rec.entropy);
            std::size_t bin = h_max > 0.0 ? static_cast<std::size_t>(rec.entropy / h_max *
                                                                     static_cast<double>(hist_bins))
                                          : 0;
            if (bin >= hist_bins) bin = hist_bins - 1;  // H == ln n lands in the last bin
            ++layer.entropy_histogram[bin];
            layer.records.push_back(std::move(rec));
        }
        layer.mean_entropy = entropies.empty()
                                 ? 0.0
                                 : std::accumulate(entropies.begin(), entropies.end(), 0.0) /
                                       static_cast<double>(entropies.size());
        per_layer_entropy.push_back(std::move(entropies));
        report.layers.push_back(std::move(layer));
    }
    report.les = les_count(taps, per_layer_entropy);
    return report;
}

NetworkComparison compare_networks(const Network& net_a, const std::string& tag_a,
                                   const Network& net_b, const std::string& tag_b,
                                   const Dataset& data, const std::vector<std::size_t>& indices,
                                   const std::vector<std::string>& taps, std::size_t K,
                                   std::size_t hist_bins, const AugmentPolicy& policy) {
    NetworkComparison cmp;
    cmp.a = build_entropy_report(net_a, tag_a, data, indices, taps, K, hist_bins, policy);
    cmp.b = build_entropy_report(net_b, tag_b, data, indices, taps, K, hist_bins, policy);
    if (cmp.a.les.layers != cmp.b.les.layers) {
        throw ConfigError("compare_networks: the two networks expose different tap sets");
    }
    for (std::size_t i = 0; i < cmp.a.les.counts.size(); ++i) {
        cmp.les_delta.push_back(static_cast<long long>(cmp.b.les.counts[i]) -
                                static_cast<long long>(cmp.a.les.counts[i]));
    }
    return cmp;
}

Tensor<real> visualize_neuron(const Dataset& data, const LayerResponses& responses,
                              std::size_t neuron, std::size_t K,
                              std::vector<std::size_t>* top_ids) {
    if (K == 0) throw ConfigError("visualize_neuron: K must be positive");
    if (neuron >= responses.neurons) {
        throw ConfigError("visualize_neuron: neuron " + std::to_string(neuron) +
                          " out of range (layer has " + std::to_string(responses.neurons) + ")");
    }
    std::vector<real> column(responses.image_ids.size());
    for (std::size_t img = 0; img < column.size(); ++img) column[img] = responses.at(img, neuron);
    const auto order = ranking(column, responses.image_ids);
    const std::size_t k = std::min(K, order.size());

    Tensor<real> mean(data.image(responses.image_ids[order[0]]).dims);
    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t id = responses.image_ids[order[r]];
        if (top_ids) top_ids->push_back(id);
        const Tensor<real>& img = data.image(id);
        require_same_shape(mean, img, "visualize_neuron");
        for (std::size_t j = 0; j < mean.v.size(); ++j) mean.v[j] += img.v[j];
    }
    for (auto& x : mean.v) x /= static_cast<real>(k);
    return mean;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> names)
    : class_names(std::move(names)), counts(class_names.size() * class_names.size(), 0) {}

std::size_t ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), static_cast<std::size_t>(0));
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < m(); ++i) t += at(i, i);
    return t;
}

std::vector<double> ConfusionMatrix::normalized_rows() const {
    std::vector<double> out(counts.size(), 0.0);
    for (std::size_t i = 0; i < m(); ++i) {
        std::size_t row_sum = 0;
        for (std::size_t j = 0; j < m(); ++j) row_sum += at(i, j);
        if (row_sum == 0) continue;
        for (std::size_t j = 0; j < m(); ++j) {
            out[i * m() + j] = static_cast<double>(at(i, j)) / static_cast<double>(row_sum);
        }
    }
    return out;
}

EvalResult evaluate(const Network& net, const Dataset& data,
                    const std::vector<std::size_t>& indices, const AugmentPolicy& policy) {
    if (!has_head(net)) throw ContractError("evaluate: model has no classification head");
    if (indices.empty()) throw DataError("evaluate: empty fold");
    EvalResult res;
    res.confusion = ConfusionMatrix(data.class_names);
    const std::size_t m = data.num_classes();
    Rng unused(0);
    std::size_t correct = 0;
    const std::size_t eval_batch = 32;
    for (std::size_t at = 0; at < indices.size(); at += eval_batch) {
        const std::size_t end = std::min(indices.size(), at + eval_batch);
        const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(at),
                                             indices.begin() + static_cast<std::ptrdiff_t>(end));
        Tensor<real> images = batch_images(data, chunk, policy, unused, false);
        auto fwd = net.forward(images, Mode::Eval);
        const Tensor<real>& logits = fwd.output->value;
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            std::size_t pred = 0;
            for (std::size_t j = 1; j < m; ++j) {
                if (logits.at2(i, j) > logits.at2(i, pred)) pred = j;
            }
            const int truth = data.label(chunk[i]);
            if (truth < 0 || static_cast<std::size_t>(truth) >= m) {
                throw DataError("evaluate: label out of range");
            }
            res.confusion.at(static_cast<std::size_t>(truth), pred) += 1;
            if (pred == static_cast<std::size_t>(truth)) ++correct;
        }
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
    return res;
}

KFoldResult kfold_evaluate(const Network& net, const Dataset& data, const FoldSplit& split,
                           const AugmentPolicy& policy) {
    KFoldResult res;
    res.confusion = ConfusionMatrix(data.class_names);
    for (const auto& fold : split.fold_images) {
        EvalResult r = evaluate(net, data, fold, policy);
        res.fold_accuracy.push_back(r.accuracy);
        for (std::size_t i = 0; i < r.confusion.counts.size(); ++i) {
            res.confusion.counts[i] += r.confusion.counts[i];
        }
    }
    res.mean_accuracy = std::accumulate(res.fold_accuracy.begin(), res.fold_accuracy.end(), 0.0) /
                        static_cast<double>(res.fold_accuracy.size());
    return res;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

std::string neuron_csv(const EntropyReport& report, const std::vector<std::string>& class_names) {
    std::string out = "layer,neuron,entropy,top1_label\n";
    for (const auto& layer : report.layers) {
        for (const auto& rec : layer.records) {
            const std::string label = rec.top_label >= 0 &&
                                              static_cast<std::size_t>(rec.top_label) <
                                                  class_names.size()
                                          ? class_names[rec.top_label]
                                          : std::to_string(rec.top_label);
            out += layer.layer + "," + std::to_string(rec.neuron) + "," +
                   format_double(rec.entropy) + "," + label + "\n";
        }
    }
    return out;
}

namespace {

void histogram_rows(std::string& out, const EntropyReport& a, const EntropyReport* b) {
    const double h_max = std::log(static_cast<double>(a.n));
    for (std::size_t li = 0; li < a.layers.size(); ++li) {
        const auto& layer = a.layers[li];
        for (std::size_t bin = 0; bin < a.hist_bins; ++bin) {
            const double lo = h_max * static_cast<double>(bin) / static_cast<double>(a.hist_bins);
            const double hi =
                h_max * static_cast<double>(bin + 1) / static_cast<double>(a.hist_bins);
            out += layer.layer + "," + format_double(lo) + "," + format_double(hi) + "," +
                   std::to_string(layer.entropy_histogram[bin]);
            if (b) out += "," + std::to_string(b->layers[li].entropy_histogram[bin]);
            out += "\n";
        }
    }
}

}  // namespace

std::string entropy_histogram_csv(const EntropyReport& report) {
    std::string out = "layer,bin_lo,bin_hi,count\n";
    histogram_rows(out, report, nullptr);
    return out;
}

std::string entropy_histogram_csv(const NetworkComparison& cmp) {
    std::string out = "layer,bin_lo,bin_hi,count_" + cmp.a.tag + ",count_" + cmp.b.tag + "\n";
    histogram_rows(out, cmp.a, &cmp.b);
    return out;
}

namespace {

std::string les_header(const LesSummary& les) {
    std::string out = "model";
    for (const auto& layer : les.layers) out += "," + layer;
    return out + "\n";
}

}  // namespace

std::string les_summary_csv(const EntropyReport& report) {
    std::string out = les_header(report.les);
    out += report.tag;
    for (std::size_t c : report.les.counts) out += "," + std::to_string(c);
    return out + "\n";
}

std::string les_summary_csv(const NetworkComparison& cmp) {
    std::string out = les_header(cmp.a.les);
    out += cmp.a.tag;
    for (std::size_t c : cmp.a.les.counts) out += "," + std::to_string(c);
    out += "\n" + cmp.b.tag;
    for (long long d : cmp.les_delta) {
        out += ",";
        if (d >= 0) out += "+";
        out += std::to_string(d);
    }
    return out + "\n";
}

LesTable parse_les_summary_csv(const std::string& csv) {
    LesTable table;
    std::istringstream is(csv);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto fields = split_line(line);
        if (header) {
            table.layers.assign(fields.begin() + 1, fields.end());
            header = false;
            continue;
        }
        std::vector<long long> values;
        for (std::size_t i = 1; i < fields.size(); ++i) values.push_back(std::stoll(fields[i]));
        table.rows.emplace_back(fields[0], std::move(values));
    }
    if (header) throw FormatError("les summary: empty table");
    return table;
}

std::string confusion_csv(const ConfusionMatrix& cm, bool normalized) {
    std::string out = "true_class";
    for (const auto& name : cm.class_names) out += "," + name;
    out += "\n";
    const auto norm = normalized ? cm.normalized_rows() : std::vector<double>{};
    for (std::size_t i = 0; i < cm.m(); ++i) {
        out += cm.class_names[i];
        for (std::size_t j = 0; j < cm.m(); ++j) {
            out += ",";
            out += normalized ? format_double(norm[i * cm.m() + j]) : std::to_string(cm.at(i, j));
        }
        out += "\n";
    }
    return out;
}

ConfusionMatrix parse_confusion_csv(const std::string& csv) {
    std::istringstream is(csv);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("confusion: empty file");
    std::vector<std::string> names;
    {
        const auto fields = split_line(line);
        names.assign(fields.begin() + 1, fields.end());
    }
    ConfusionMatrix cm(names);
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (row >= cm.m()) throw FormatError("confusion: too many rows");
        const auto fields = split_line(line);
        if (fields.size() != cm.m() + 1) throw FormatError("confusion: bad row width");
        for (std::size_t j = 0; j < cm.m(); ++j) {
            cm.at(row, j) = static_cast<std::size_t>(std::stoull(fields[j + 1]));
        }
        ++row;
    }
    if (row != cm.m()) throw FormatError("confusion: missing rows");
    return cm;
}

}  // namespace fn2en
