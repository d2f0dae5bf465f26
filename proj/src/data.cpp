#include "fn2en/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "fn2en/errors.hpp"

namespace fs = std::filesystem;

namespace fn2en {

void Dataset::add(LabeledImage item) {
    item.id = items_.size();
    items_.push_back(std::move(item));
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(class_names.size(), 0);
    for (const auto& it : items_) {
        if (it.label >= 0 && static_cast<std::size_t>(it.label) < counts.size()) ++counts[it.label];
    }
    return counts;
}

namespace {

bool all_integer_ids(const std::vector<std::string>& ids) {
    for (const auto& s : ids) {
        if (s.empty()) return false;
        std::size_t i = s[0] == '-' ? 1 : 0;
        if (i == s.size()) return false;
        for (; i < s.size(); ++i) {
            if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
        }
    }
    return true;
}

}  // namespace

std::vector<std::string> Dataset::subjects_sorted() const {
    std::set<std::string> uniq;
    for (const auto& it : items_) uniq.insert(it.subject);
    std::vector<std::string> out(uniq.begin(), uniq.end());
    if (all_integer_ids(out)) {
        std::sort(out.begin(), out.end(), [](const std::string& a, const std::string& b) {
            return std::stoll(a) < std::stoll(b);
        });
    }
    return out;  // lexicographic otherwise (std::set order)
}

FoldSplit make_folds(const Dataset& data, std::size_t k) {
    const auto subjects = data.subjects_sorted();
    if (k == 0 || k > subjects.size()) {
        throw ConfigError("make_folds: k=" + std::to_string(k) + " invalid for " +
                          std::to_string(subjects.size()) + " subjects");
    }
    FoldSplit split;
    split.k = k;
    split.fold_subjects.resize(k);
    split.fold_images.resize(k);
    // Contiguous deal: the first (n mod k) folds take ceil(n/k) subjects.
    const std::size_t n = subjects.size();
    const std::size_t base = n / k, extra = n % k;
    std::size_t pos = 0;
    std::map<std::string, std::size_t> fold_of;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t take = base + (f < extra ? 1 : 0);
        for (std::size_t j = 0; j < take; ++j, ++pos) {
            split.fold_subjects[f].push_back(subjects[pos]);
            fold_of[subjects[pos]] = f;
        }
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        split.fold_images[fold_of.at(data.subject(i))].push_back(i);
    }
    return split;
}

std::vector<std::size_t> train_indices(const FoldSplit& split, std::size_t test_fold) {
    if (test_fold >= split.k) throw ConfigError("train_indices: fold out of range");
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < split.k; ++f) {
        if (f == test_fold) continue;
        out.insert(out.end(), split.fold_images[f].begin(), split.fold_images[f].end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void AugmentPolicy::validate() const {
    if (crop_size == 0 || canonical_size == 0) {
        throw ConfigError("augment: sizes must be positive");
    }
    if (crop_size > canonical_size) {
        throw ConfigError("augment: crop size " + std::to_string(crop_size) +
                          " exceeds canonical size " + std::to_string(canonical_size));
    }
}

namespace {

Tensor<real> crop_image(const Tensor<real>& img, std::size_t y0, std::size_t x0, std::size_t sz,
                        bool flip) {
    const std::size_t c = img.dims[0], h = img.dims[1], w = img.dims[2];
    (void)h;
    Tensor<real> out({c, sz, sz});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < sz; ++y) {
            const real* src = &img.v[(ch * img.dims[1] + (y0 + y)) * w + x0];
            real* dst = &out.v[(ch * sz + y) * sz];
            if (!flip) {
                std::memcpy(dst, src, sz * sizeof(real));
            } else {
                for (std::size_t x = 0; x < sz; ++x) dst[x] = src[sz - 1 - x];
            }
        }
    }
    return out;
}

}  // namespace

Tensor<real> augment(const Tensor<real>& image, const AugmentPolicy& policy, Rng& rng, bool train) {
    policy.validate();
    if (image.rank() != 3) throw ShapeError("augment: need CHW image, got " + image.shape_str());
    if (image.dims[1] < policy.crop_size || image.dims[2] < policy.crop_size) {
        throw ConfigError("augment: crop size " + std::to_string(policy.crop_size) +
                          " exceeds image " + image.shape_str());
    }
    const std::size_t max_y = image.dims[1] - policy.crop_size;
    const std::size_t max_x = image.dims[2] - policy.crop_size;
    std::size_t y0 = max_y / 2, x0 = max_x / 2;
    bool flip = false;
    if (train) {
        if (policy.random_crop) {
            y0 = rng.uniform_int(max_y + 1);
            x0 = rng.uniform_int(max_x + 1);
        }
        if (policy.horizontal_flip) flip = rng.bernoulli(0.5);
    }
    return crop_image(image, y0, x0, policy.crop_size, flip);
}

Tensor<real> batch_images(const Dataset& data, const std::vector<std::size_t>& indices,
                          const AugmentPolicy& policy, Rng& rng, bool train) {
    if (indices.empty()) throw DataError("batch_images: empty index list");
    const std::size_t c = data.image(indices[0]).dims[0];
    const std::size_t sz = policy.crop_size;
    Tensor<real> batch({indices.size(), c, sz, sz});
    const std::size_t per = c * sz * sz;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        Tensor<real> img = augment(data.image(indices[i]), policy, rng, train);
        std::copy(img.v.begin(), img.v.end(), batch.v.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    if (!data.channel_mean.empty()) {
        const bool scalar_mean = data.channel_mean.size() == 1;
        if (!scalar_mean && data.channel_mean.size() != c) {
            throw ConfigError("batch_images: channel mean size mismatch");
        }
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const real m = scalar_mean ? data.channel_mean[0] : data.channel_mean[ch];
                real* p = &batch.v[(i * c + ch) * sz * sz];
                for (std::size_t j = 0; j < sz * sz; ++j) p[j] -= m;
            }
    }
    return batch;
}

std::vector<int> batch_labels(const Dataset& data, const std::vector<std::size_t>& indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(data.label(i));
    return out;
}

// ---------------------------------------------------------------------------
// FNIM / PGM / PPM
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("truncated file while reading ") + what);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

float get_f32(std::istream& is, const char* what) {
    const std::uint32_t bits = get_u32(is, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void write_fnim(const std::string& path, const Tensor<real>& image) {
    if (image.rank() != 3) throw ShapeError("fnim: need CHW image, got " + image.shape_str());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("fnim: cannot open '" + path + "' for writing");
    os.write("FNIM", 4);
    put_u32(os, 1);
    for (int d = 0; d < 3; ++d) put_u32(os, static_cast<std::uint32_t>(image.dims[d]));
    for (real x : image.v) put_f32(os, static_cast<float>(x));
    if (!os) throw DataError("fnim: write failed for '" + path + "'");
}

namespace {

Tensor<real> read_fnim_stream(std::istream& is, const std::string& path) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FNIM", 4) != 0) {
        throw FormatError("fnim: bad magic in '" + path + "'");
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != 1) {
        throw FormatError("fnim: unsupported version " + std::to_string(version) + " in '" + path +
                          "'");
    }
    const std::uint32_t c = get_u32(is, "channels");
    const std::uint32_t h = get_u32(is, "height");
    const std::uint32_t w = get_u32(is, "width");
    if (c == 0 || h == 0 || w == 0 || static_cast<std::uint64_t>(c) * h * w > (1ull << 31)) {
        throw FormatError("fnim: implausible dims in '" + path + "'");
    }
    Tensor<real> img({c, h, w});
    for (auto& x : img.v) x = static_cast<real>(get_f32(is, "pixels"));
    return img;
}

Tensor<real> read_pnm(std::istream& is, const std::string& path, bool color) {
    auto next_token = [&]() -> std::string {
        std::string tok;
        char ch;
        while (is.get(ch)) {
            if (ch == '#') {
                std::string line;
                std::getline(is, line);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(ch);
        }
        if (tok.empty()) throw FormatError("pnm: truncated header in '" + path + "'");
        return tok;
    };
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    const std::size_t maxval = std::stoul(next_token());
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
        throw FormatError("pnm: unsupported header in '" + path + "'");
    }
    const std::size_t c = color ? 3 : 1;
    std::vector<unsigned char> raw(w * h * c);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw FormatError("pnm: truncated pixel data in '" + path + "'");
    }
    Tensor<real> img({c, h, w});
    // PNM interleaves channels; we store channel-major.
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
                img.v[(ch * h + y) * w + x] =
                    static_cast<real>(raw[(y * w + x) * c + ch]) / static_cast<real>(maxval);
            }
    return img;
}

Tensor<real> read_image_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image '" + path + "'");
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    is.seekg(0);
    if (m0 == 'F') return read_fnim_stream(is, path);
    if (m0 == 'P' && (m1 == '5' || m1 == '6')) {
        is.ignore(2);
        return read_pnm(is, path, m1 == '6');
    }
    throw FormatError("unsupported image format in '" + path + "' (expect FNIM, P5 or P6)");
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(field);
            field.clear();
        } else if (ch != '\r') {
            field.push_back(ch);
        }
    }
    out.push_back(field);
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace

Tensor<real> read_fnim(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("fnim: cannot open '" + path + "'");
    return read_fnim_stream(is, path);
}

Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw DataError("cannot open manifest '" + manifest_path + "'");
    const fs::path root = fs::path(manifest_path).parent_path();

    Dataset data;
    std::vector<std::string> vocab;
    std::string line;
    bool saw_header = false;
    std::vector<std::string> errors;
    std::set<std::string> seen_paths;
    std::map<std::string, int> label_of;
    struct Row {
        std::string path, subject, label;
        std::size_t lineno;
    };
    std::vector<Row> rows;
    std::size_t lineno = 0;

    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] == '#') {
            if (saw_header) continue;  // trailing comments are just comments
            const auto colon = t.find(':');
            if (colon == std::string::npos) continue;
            const std::string key = trim(t.substr(1, colon - 1));
            const std::string val = trim(t.substr(colon + 1));
            if (key == "labels") {
                for (const auto& name : split_csv_line(val)) vocab.push_back(trim(name));
            } else if (key == "mean") {
                for (const auto& m : split_csv_line(val)) {
                    data.channel_mean.push_back(static_cast<real>(std::stod(trim(m))));
                }
            }
            continue;
        }
        if (!saw_header) {
            if (t != "path,subject,label") {
                throw FormatError("manifest: expected header 'path,subject,label', got '" + t + "'");
            }
            saw_header = true;
            continue;
        }
        auto fields = split_csv_line(t);
        if (fields.size() != 3) {
            errors.push_back("line " + std::to_string(lineno) + ": expected 3 fields, got " +
                             std::to_string(fields.size()));
            continue;
        }
        Row row{trim(fields[0]), trim(fields[1]), trim(fields[2]), lineno};
        if (!seen_paths.insert(row.path).second) {
            throw DataError("manifest: duplicate entry '" + row.path + "' at line " +
                            std::to_string(lineno));
        }
        rows.push_back(std::move(row));
    }
    if (!saw_header) throw FormatError("manifest: missing header 'path,subject,label'");

    if (vocab.empty()) {
        std::set<std::string> names;
        for (const auto& r : rows) names.insert(r.label);
        vocab.assign(names.begin(), names.end());
    }
    for (std::size_t i = 0; i < vocab.size(); ++i) label_of[vocab[i]] = static_cast<int>(i);
    data.class_names = vocab;

    std::vector<std::size_t> dims;
    for (const auto& r : rows) {
        const auto it = label_of.find(r.label);
        if (it == label_of.end()) {
            errors.push_back("line " + std::to_string(r.lineno) + ": unknown label '" + r.label + "'");
            continue;
        }
        try {
            LabeledImage item;
            item.subject = r.subject;
            item.label = it->second;
            item.pixels = read_image_file((root / r.path).string());
            if (dims.empty()) {
                dims = item.pixels.dims;
            } else if (item.pixels.dims != dims) {
                errors.push_back("line " + std::to_string(r.lineno) + ": image dims " +
                                 item.pixels.shape_str() + " differ from dataset dims");
                continue;
            }
            data.add(std::move(item));
        } catch (const Error& e) {
            errors.push_back("line " + std::to_string(r.lineno) + ": " + e.what());
        }
    }
    if (!errors.empty()) {
        std::string msg = "manifest '" + manifest_path + "' has " + std::to_string(errors.size()) +
                          " bad row(s):";
        for (const auto& e : errors) msg += "\n  " + e;
        throw DataError(msg);
    }
    return data;
}

void save_dataset(const Dataset& data, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream os(fs::path(dir) / "manifest.csv");
    if (!os) throw DataError("cannot write manifest under '" + dir + "'");
    os << "# labels: ";
    for (std::size_t i = 0; i < data.class_names.size(); ++i) {
        os << (i ? "," : "") << data.class_names[i];
    }
    os << "\n";
    if (!data.channel_mean.empty()) {
        os << "# mean: ";
        for (std::size_t i = 0; i < data.channel_mean.size(); ++i) {
            os << (i ? "," : "") << data.channel_mean[i];
        }
        os << "\n";
    }
    os << "path,subject,label\n";
    char name[64];
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::snprintf(name, sizeof(name), "images/img_%05zu.fnim", i);
        write_fnim((fs::path(dir) / name).string(), data.image(i));
        const int label = data.label(i);
        os << name << "," << data.subject(i) << "," << data.class_names.at(label) << "\n";
    }
}

// ---------------------------------------------------------------------------
// Synthetic toy dataset
// ---------------------------------------------------------------------------

namespace {

// Smooth per-subject appearance: a few Gaussian bumps over the canvas.
void add_subject_field(Tensor<real>& img, std::uint64_t seed, std::size_t subject_idx) {
    Rng rng = derive_rng(seed, {static_cast<std::uint64_t>(RngUse::Data), 1, subject_idx});
    const std::size_t h = img.dims[1], w = img.dims[2];
    for (int bump = 0; bump < 3; ++bump) {
        const double cx = rng.uniform() * w;
        const double cy = rng.uniform() * h;
        const double sigma = w * (0.15 + 0.2 * rng.uniform());
        const double amp = (rng.uniform() - 0.5) * 0.5;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                img.v[y * w + x] += static_cast<real>(amp * std::exp(-d2 / (2 * sigma * sigma)));
            }
    }
}

// Class-distinctive strokes, designed to survive a horizontal flip: horizontal
// bars at distinct heights, a centered vertical bar, and a mirror-symmetric pair.
void add_class_stroke(Tensor<real>& img, std::size_t cls, long jy, long jx) {
    const long h = static_cast<long>(img.dims[1]);
    const long w = static_cast<long>(img.dims[2]);
    const long t = std::max<long>(1, h / 16);  // half thickness
    const real amp = real(0.4);
    auto paint = [&](long y0, long y1, long x0, long x1) {
        for (long y = std::max<long>(0, y0); y <= std::min(h - 1, y1); ++y)
            for (long x = std::max<long>(0, x0); x <= std::min(w - 1, x1); ++x) {
                img.v[static_cast<std::size_t>(y) * w + x] += amp;
            }
    };
    const long variant = static_cast<long>(cls / 4);  // widen the menu past 4 classes
    const long margin = 2 + 2 * variant;
    switch (cls % 4) {
        case 0:  // high horizontal bar
            paint(h / 4 - t + jy, h / 4 + t + jy, margin + jx, w - 1 - margin + jx);
            break;
        case 1:  // low horizontal bar
            paint(3 * h / 4 - t + jy, 3 * h / 4 + t + jy, margin + jx, w - 1 - margin + jx);
            break;
        case 2:  // centered vertical bar
            paint(margin + jy, h - 1 - margin + jy, w / 2 - t + jx, w / 2 + t + jx);
            break;
        default:  // symmetric pair of vertical bars
            paint(margin + jy, h - 1 - margin + jy, w / 4 - t + jx, w / 4 + t + jx);
            paint(margin + jy, h - 1 - margin + jy, 3 * w / 4 - t + jx, 3 * w / 4 + t + jx);
            break;
    }
}

}  // namespace

Dataset synth_toy_dataset(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                          std::size_t subject_count, std::uint64_t seed) {
    if (num_classes == 0 || per_class == 0 || image_size == 0 || subject_count == 0) {
        throw ConfigError("synth_toy_dataset: all counts must be positive");
    }
    Dataset data;
    for (std::size_t c = 0; c < num_classes; ++c) data.class_names.push_back("c" + std::to_string(c));
    data.channel_mean = {real(0.5)};
    char subj[16];
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t j = 0; j < per_class; ++j) {
            const std::size_t subject_idx = j % subject_count;
            const std::size_t g = c * per_class + j;  // global image index
            Rng rng = derive_rng(seed, {static_cast<std::uint64_t>(RngUse::Data), 2, g});
            Tensor<real> img({1, image_size, image_size}, real(0.45));
            add_subject_field(img, seed, subject_idx);
            const long jy = static_cast<long>(rng.uniform_int(3)) - 1;
            const long jx = static_cast<long>(rng.uniform_int(3)) - 1;
            add_class_stroke(img, c, jy, jx);
            for (auto& x : img.v) {
                x += static_cast<real>((rng.uniform() - 0.5) * 0.1);
                x = std::clamp(x, real(0), real(1));
            }
            std::snprintf(subj, sizeof(subj), "s%03zu", subject_idx);
            LabeledImage item;
            item.subject = subj;
            item.label = static_cast<int>(c);
            item.pixels = std::move(img);
            data.add(std::move(item));
        }
    }
    return data;
}

Dataset with_subject_labels(const Dataset& data) {
    const auto subjects = data.subjects_sorted();
    std::map<std::string, int> index_of;
    for (std::size_t i = 0; i < subjects.size(); ++i) index_of[subjects[i]] = static_cast<int>(i);
    Dataset out;
    out.class_names = subjects;
    out.channel_mean = data.channel_mean;
    for (std::size_t i = 0; i < data.size(); ++i) {
        LabeledImage item;
        item.subject = data.subject(i);
        item.label = index_of.at(item.subject);
        item.pixels = data.image(i);
        out.add(std::move(item));
    }
    return out;
}

}  // namespace fn2en
