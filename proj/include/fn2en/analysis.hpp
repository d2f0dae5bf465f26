#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fn2en/data.hpp"
#include "fn2en/network.hpp"
#include "fn2en/tensor.hpp"

namespace fn2en {

// ---------------------------------------------------------------------------
// Neuron entropy
// ---------------------------------------------------------------------------

struct NeuronEntropyRecord {
    std::string layer;
    std::size_t neuron = 0;
    double entropy = 0.0;            // nats, over the normalized top-K label histogram
    std::vector<std::size_t> top_ids;  // image ids, response-descending (ties: ascending id)
    std::vector<double> histogram;   // n bins, sums to 1
    int top_label = -1;              // most frequent label among the top K
};

// Per-image neuron responses for one tap: conv taps use the spatial max per
// channel, FC taps the raw unit value.
struct LayerResponses {
    std::string layer;
    std::vector<std::size_t> image_ids;
    std::size_t neurons = 0;
    std::vector<real> values;  // image-major: values[img * neurons + j]

    real at(std::size_t img, std::size_t j) const { return values[img * neurons + j]; }
};

// Ranks images by response (descending, id-ascending on ties), takes the top K
// (clamped to the dataset size with a warning), bins their labels into n bins and
// returns the entropy of the normalized histogram. Empty input is a data error.
NeuronEntropyRecord neuron_entropy(const std::vector<real>& responses,
                                   const std::vector<std::size_t>& image_ids,
                                   const std::vector<int>& labels, std::size_t K, std::size_t n);

struct LesSummary {
    double threshold = 0.0;  // min over layers of that layer's mean entropy
    std::vector<std::string> layers;
    std::vector<std::size_t> counts;  // neurons with entropy strictly below threshold
};

// Layers with no neurons are excluded with a warning.
LesSummary les_count(const std::vector<std::string>& layers,
                     const std::vector<std::vector<double>>& entropies);

struct LayerEntropyReport {
    std::string layer;
    std::vector<NeuronEntropyRecord> records;
    std::vector<std::size_t> entropy_histogram;  // fixed bins over [0, ln n]
    double mean_entropy = 0.0;
};

struct EntropyReport {
    std::string tag;  // e.g. "pre-trained" | "fine-tuned"
    std::size_t K = 0;
    std::size_t n = 0;          // label bins
    std::size_t hist_bins = 0;  // entropy histogram bins over [0, ln n]
    std::vector<LayerEntropyReport> layers;
    LesSummary les;
};

// Eval-mode responses at the requested taps (center crop, mean-subtracted).
std::vector<LayerResponses> collect_responses(const Network& net, const Dataset& data,
                                              const std::vector<std::size_t>& indices,
                                              const std::vector<std::string>& taps,
                                              const AugmentPolicy& policy);

EntropyReport build_entropy_report(const Network& net, const std::string& tag, const Dataset& data,
                                   const std::vector<std::size_t>& indices,
                                   const std::vector<std::string>& taps, std::size_t K,
                                   std::size_t hist_bins, const AugmentPolicy& policy);

struct NetworkComparison {
    EntropyReport a;
    EntropyReport b;
    std::vector<long long> les_delta;  // per layer: b - a
};

// Shared binning for both reports; deltas follow the base-plus-signed-delta table
// layout.
NetworkComparison compare_networks(const Network& net_a, const std::string& tag_a,
                                   const Network& net_b, const std::string& tag_b,
                                   const Dataset& data, const std::vector<std::size_t>& indices,
                                   const std::vector<std::string>& taps, std::size_t K,
                                   std::size_t hist_bins, const AugmentPolicy& policy);

// Pixelwise mean of the K images that most activate the neuron.
Tensor<real> visualize_neuron(const Dataset& data, const LayerResponses& responses,
                              std::size_t neuron, std::size_t K,
                              std::vector<std::size_t>* top_ids = nullptr);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ConfusionMatrix {
    std::vector<std::string> class_names;
    std::vector<std::size_t> counts;  // m x m, row = true class

    explicit ConfusionMatrix(std::vector<std::string> names = {});
    std::size_t m() const { return class_names.size(); }
    std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * m() + pred]; }
    std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * m() + pred]; }
    std::size_t total() const;
    std::size_t trace() const;
    std::vector<double> normalized_rows() const;  // rows sum to 1 (0 rows stay 0)
};

struct EvalResult {
    double accuracy = 0.0;
    ConfusionMatrix confusion;
};

// Center-crop (eval-mode) accuracy and confusion counts over the given fold.
EvalResult evaluate(const Network& net, const Dataset& data,
                    const std::vector<std::size_t>& indices, const AugmentPolicy& policy);

struct KFoldResult {
    std::vector<double> fold_accuracy;
    double mean_accuracy = 0.0;
    ConfusionMatrix confusion;  // pooled over all folds
};

KFoldResult kfold_evaluate(const Network& net, const Dataset& data, const FoldSplit& split,
                           const AugmentPolicy& policy);

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

// One row per neuron: layer,neuron,entropy,top1_label.
std::string neuron_csv(const EntropyReport& report, const std::vector<std::string>& class_names);
// layer,bin_lo,bin_hi,count (one report) or ...,count_a,count_b (comparison).
std::string entropy_histogram_csv(const EntropyReport& report);
std::string entropy_histogram_csv(const NetworkComparison& cmp);
// Base-plus-delta summary table; parse_les_summary_csv inverts it.
std::string les_summary_csv(const EntropyReport& report);
std::string les_summary_csv(const NetworkComparison& cmp);
struct LesTable {
    std::vector<std::string> layers;
    std::vector<std::pair<std::string, std::vector<long long>>> rows;  // tag -> values
};
LesTable parse_les_summary_csv(const std::string& csv);

std::string confusion_csv(const ConfusionMatrix& cm, bool normalized);
ConfusionMatrix parse_confusion_csv(const std::string& csv);

}  // namespace fn2en
