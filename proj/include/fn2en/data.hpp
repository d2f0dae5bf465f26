#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fn2en/network.hpp"
#include "fn2en/rng.hpp"
#include "fn2en/tensor.hpp"

namespace fn2en {

struct LabeledImage {
    std::size_t id = 0;
    std::string subject;
    int label = -1;
    Tensor<real> pixels;  // C x H x W in [0,1]
};

// Immutable after load. Label reads are instrumented: label(i) bumps a counter,
// which is how the "stage 1 never touches labels" contract is verified.
class Dataset {
public:
    void add(LabeledImage item);

    std::size_t size() const { return items_.size(); }
    const Tensor<real>& image(std::size_t i) const { return items_.at(i).pixels; }
    const std::string& subject(std::size_t i) const { return items_.at(i).subject; }
    std::size_t id(std::size_t i) const { return items_.at(i).id; }

    int label(std::size_t i) const {
        ++label_reads_;
        return items_.at(i).label;
    }

    std::uint64_t label_reads() const { return label_reads_; }
    void reset_label_reads() const { label_reads_ = 0; }

    std::size_t num_classes() const { return class_names.size(); }
    // Per-class image counts, tallied by the loader itself (not via label()).
    std::vector<std::size_t> class_counts() const;
    std::vector<std::string> subjects_sorted() const;

    std::vector<std::string> class_names;
    std::vector<real> channel_mean;  // subtracted at batch assembly; empty = none

private:
    std::vector<LabeledImage> items_;
    mutable std::uint64_t label_reads_ = 0;
};

// Subject-independent partition: subjects sorted ascending (numerically when every
// id parses as an integer), dealt into k contiguous groups as evenly as possible.
struct FoldSplit {
    std::size_t k = 0;
    std::vector<std::vector<std::string>> fold_subjects;
    std::vector<std::vector<std::size_t>> fold_images;
};

FoldSplit make_folds(const Dataset& data, std::size_t k);
std::vector<std::size_t> train_indices(const FoldSplit& split, std::size_t test_fold);

struct AugmentPolicy {
    std::size_t canonical_size = 256;
    std::size_t crop_size = 224;
    bool random_crop = true;
    bool horizontal_flip = true;

    void validate() const;
};

// Train mode: uniform random top-left crop then a fair-coin horizontal flip.
// Eval mode: deterministic center crop, no flip. Never reads or alters the label.
Tensor<real> augment(const Tensor<real>& image, const AugmentPolicy& policy, Rng& rng, bool train);

// Batch assembly. Applies augment() per image and subtracts the dataset channel
// mean. Keeps label access out of the image path so stage 1 can run label-free.
Tensor<real> batch_images(const Dataset& data, const std::vector<std::size_t>& indices,
                          const AugmentPolicy& policy, Rng& rng, bool train);
std::vector<int> batch_labels(const Dataset& data, const std::vector<std::size_t>& indices);

// Raw tensor image file: magic FNIM, u32 LE version=1, u32 C, u32 H, u32 W, then
// C*H*W LE f32, row-major, channel-major.
void write_fnim(const std::string& path, const Tensor<real>& image);
Tensor<real> read_fnim(const std::string& path);

// Manifest: UTF-8 CSV with header `path,subject,label`; optional leading comment
// lines `# labels: a,b,...` (fixes the label vocabulary/order) and `# mean: ...`
// (scalar or per-channel). Images are FNIM or binary PGM/PPM, resolved relative
// to the manifest.
Dataset load_dataset(const std::string& manifest_path);
void save_dataset(const Dataset& data, const std::string& dir);

// Synthetic desk-scale dataset: each class has a distinctive stroke pattern (flip
// tolerant), each subject a smooth appearance field shared across its images, plus
// per-image jitter and noise. Supports both a subject-identity task and the class
// task on the same images.
Dataset synth_toy_dataset(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                          std::size_t subject_count, std::uint64_t seed);

// Same images, relabeled by subject index (for teacher identity pre-training).
Dataset with_subject_labels(const Dataset& data);

}  // namespace fn2en
