#ifndef LNL_DATA_HPP
#define LNL_DATA_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "lnl/rng.hpp"
#include "lnl/tensor.hpp"

namespace lnl {

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A mini-batch: images [B, 3, H, W] in [0, 1] and their labels.
struct BatchPair {
    Tensor images;
    std::vector<int> labels;
};

/**
 * In-memory labeled image set, stored as 8-bit channel-major planes and
 * converted to doubles only when a batch is taken.
 */
struct Dataset {
    std::string name;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t num_classes = 0;
    std::vector<std::uint8_t> pixels;  // size() * 3 * height * width
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    std::size_t image_bytes() const { return 3 * height * width; }

    void append(std::span<const std::uint8_t> image, int label) {
        if (image.size() != image_bytes()) throw DataError("image has the wrong byte count");
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
            throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes) + ")");
        }
        pixels.insert(pixels.end(), image.begin(), image.end());
        labels.push_back(label);
    }

    std::span<const std::uint8_t> image(std::size_t i) const {
        return std::span<const std::uint8_t>(pixels).subspan(i * image_bytes(), image_bytes());
    }

    BatchPair batch(std::span<const std::size_t> indices) const {
        if (indices.empty()) throw DataError("empty batch");
        std::vector<double> data;
        data.reserve(indices.size() * image_bytes());
        BatchPair out;
        for (auto i : indices) {
            if (i >= size()) throw DataError("sample index out of range");
            for (auto px : image(i)) data.push_back(static_cast<double>(px) / 255.0);
            out.labels.push_back(labels[i]);
        }
        out.images = Tensor({indices.size(), 3, height, width}, std::move(data));
        return out;
    }

    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset out{name, height, width, num_classes, {}, {}};
        out.pixels.reserve(indices.size() * image_bytes());
        for (auto i : indices) out.append(image(i), labels.at(i));
        return out;
    }
};

struct DatasetSplits {
    Dataset train;
    Dataset val;   // may be empty (CIFAR-10 ships no validation split)
    Dataset test;  // may be empty (GTSRB test archive is optional)
};

/// Deterministic per-epoch order: a permutation seeded by hash(seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    Rng rng(mix_seed(seed, epoch));
    return rng.permutation(n);
}

// ---------------------------------------------------------------------------
// Resizing

/// Bilinear resize of a [3, H, W] float image, align-corners=false convention.
inline std::vector<double> resize_bilinear(std::span<const double> image, std::size_t height, std::size_t width,
                                           std::size_t out_h, std::size_t out_w, std::size_t channels = 3) {
    if (out_h == 0 || out_w == 0 || height == 0 || width == 0) throw std::invalid_argument("resize: empty extent");
    if (image.size() != channels * height * width) throw std::invalid_argument("resize: buffer size mismatch");
    std::vector<double> out(channels * out_h * out_w);
    const double sy = static_cast<double>(height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(width) / static_cast<double>(out_w);
    auto source = [](std::size_t dst, double scale_, std::size_t extent) {
        double src = (static_cast<double>(dst) + 0.5) * scale_ - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
        auto i0 = static_cast<std::size_t>(std::floor(src));
        std::size_t i1 = std::min(i0 + 1, extent - 1);
        return std::tuple<std::size_t, std::size_t, double>{i0, i1, src - static_cast<double>(i0)};
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        auto [y0, y1, fy] = source(y, sy, height);
        for (std::size_t x = 0; x < out_w; ++x) {
            auto [x0, x1, fx] = source(x, sx, width);
            for (std::size_t c = 0; c < channels; ++c) {
                const double* plane = image.data() + c * height * width;
                double top = plane[y0 * width + x0] * (1.0 - fx) + plane[y0 * width + x1] * fx;
                double bottom = plane[y1 * width + x0] * (1.0 - fx) + plane[y1 * width + x1] * fx;
                out[(c * out_h + y) * out_w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Raw record files (CIFAR-10 binary layout)

/**
 * Parses a file of fixed-size records: one label byte followed by
 * 3 * height * width channel-major pixel bytes.
 */
inline void read_record_file(const std::filesystem::path& path, Dataset& into) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("missing file " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const std::size_t record = 1 + into.image_bytes();
    if (bytes.size() % record != 0) {
        throw DataError(path.string() + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                        std::to_string(record) + "-byte records");
    }
    const std::size_t count = bytes.size() / record;
    into.pixels.reserve(into.pixels.size() + count * into.image_bytes());
    for (std::size_t r = 0; r < count; ++r) {
        const auto* rec = reinterpret_cast<const std::uint8_t*>(bytes.data() + r * record);
        if (rec[0] >= into.num_classes) {
            throw DataError(path.string() + ": record " + std::to_string(r) + " has label " +
                            std::to_string(rec[0]) + " > " + std::to_string(into.num_classes - 1));
        }
        into.append(std::span<const std::uint8_t>(rec + 1, into.image_bytes()), rec[0]);
    }
}

inline void write_record_file(const std::filesystem::path& path, const Dataset& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    for (std::size_t i = 0; i < data.size(); ++i) {
        os.put(static_cast<char>(data.labels[i]));
        auto img = data.image(i);
        os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    }
}

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarSide * kCifarSide;  // 3073

/// Reads data_batch_{1..5}.bin and test_batch.bin (directly or under cifar-10-batches-bin/).
inline DatasetSplits load_cifar10(const std::filesystem::path& dir) {
    std::filesystem::path root = dir;
    if (!std::filesystem::exists(root / "data_batch_1.bin") &&
        std::filesystem::exists(root / "cifar-10-batches-bin" / "data_batch_1.bin")) {
        root /= "cifar-10-batches-bin";
    }
    DatasetSplits splits;
    for (Dataset* d : {&splits.train, &splits.test}) {
        d->name = "cifar10";
        d->height = d->width = kCifarSide;
        d->num_classes = 10;
    }
    for (int i = 1; i <= 5; ++i) read_record_file(root / ("data_batch_" + std::to_string(i) + ".bin"), splits.train);
    read_record_file(root / "test_batch.bin", splits.test);
    return splits;
}

// ---------------------------------------------------------------------------
// GTSRB

struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> planes;  // channel-major
};

/// Binary PPM (P6, maxval 255).
inline RgbImage read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("missing image " + path.string());
    auto token = [&] {
        std::string t;
        char ch;
        while (is.get(ch)) {
            if (ch == '#') {
                std::string skip;
                std::getline(is, skip);
            } else if (!std::isspace(static_cast<unsigned char>(ch))) {
                t.push_back(ch);
                break;
            }
        }
        while (is.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) t.push_back(ch);
        return t;
    };
    if (token() != "P6") throw DataError(path.string() + ": not a binary PPM");
    RgbImage img;
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw DataError(path.string() + ": only maxval 255 is supported");
    std::vector<std::uint8_t> interleaved(3 * img.width * img.height);
    if (!is.read(reinterpret_cast<char*>(interleaved.data()), static_cast<std::streamsize>(interleaved.size()))) {
        throw DataError(path.string() + ": truncated pixel data");
    }
    const std::size_t plane = img.width * img.height;
    img.planes.resize(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) img.planes[c * plane + p] = interleaved[3 * p + c];
    return img;
}

inline void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height,
                      std::size_t width) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << "P5\n" << width << ' ' << height << "\n255\n";
    for (double v : values) os.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
}

struct GtsrbAnnotation {
    std::string filename;
    std::size_t width = 0, height = 0;
    std::size_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // inclusive ROI corners
    int class_id = 0;
};

inline constexpr int kGtsrbClasses = 43;

/// One row of Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId.
inline GtsrbAnnotation parse_gtsrb_row(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ';')) fields.push_back(field);
    if (fields.size() != 8) throw DataError("malformed GTSRB row (expected 8 fields): " + line);
    GtsrbAnnotation a;
    try {
        a.filename = fields[0];
        a.width = std::stoul(fields[1]);
        a.height = std::stoul(fields[2]);
        a.x1 = std::stoul(fields[3]);
        a.y1 = std::stoul(fields[4]);
        a.x2 = std::stoul(fields[5]);
        a.y2 = std::stoul(fields[6]);
        a.class_id = std::stoi(fields[7]);
    } catch (const std::logic_error&) {
        throw DataError("malformed GTSRB row: " + line);
    }
    if (a.class_id < 0 || a.class_id >= kGtsrbClasses) {
        throw DataError("unknown GTSRB class id " + std::to_string(a.class_id) + " (valid 0..42)");
    }
    if (a.x2 < a.x1 || a.y2 < a.y1) throw DataError("GTSRB ROI is inverted: " + line);
    return a;
}

inline std::vector<GtsrbAnnotation> read_gtsrb_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("missing annotation file " + path.string());
    std::vector<GtsrbAnnotation> rows;
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("Filename", 0) == 0) continue;
        }
        rows.push_back(parse_gtsrb_row(line));
    }
    return rows;
}

/// Crops the inclusive ROI and resizes to side x side.
inline std::vector<std::uint8_t> crop_and_resize(const RgbImage& img, const GtsrbAnnotation& a, std::size_t side) {
    const std::size_t x2 = std::min(a.x2, img.width - 1);
    const std::size_t y2 = std::min(a.y2, img.height - 1);
    if (a.x1 > x2 || a.y1 > y2) throw DataError("GTSRB ROI outside image: " + a.filename);
    const std::size_t ch = y2 - a.y1 + 1;
    const std::size_t cw = x2 - a.x1 + 1;
    std::vector<double> crop(3 * ch * cw);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < ch; ++y)
            for (std::size_t x = 0; x < cw; ++x)
                crop[(c * ch + y) * cw + x] =
                    img.planes[(c * img.height + a.y1 + y) * img.width + a.x1 + x] / 255.0;
    auto resized = resize_bilinear(crop, ch, cw, side, side);
    std::vector<std::uint8_t> out(resized.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(resized[i], 0.0, 1.0) * 255.0));
    return out;
}

inline constexpr std::size_t kGtsrbValidation = 4000;

/**
 * Loads Final_Training/Images/<class>/GT-<class>.csv (+ .ppm images) and, when
 * present, Final_Test/Images/GT-final_test.csv. Train/val split: the last
 * 4,000 of a seed-0 shuffle are validation.
 */
inline DatasetSplits load_gtsrb(const std::filesystem::path& dir, std::size_t image_size) {
    namespace fs = std::filesystem;
    fs::path root = dir;
    if (!fs::exists(root / "Final_Training") && fs::exists(root / "GTSRB" / "Final_Training")) root /= "GTSRB";
    fs::path train_dir = root / "Final_Training" / "Images";
    if (!fs::is_directory(train_dir)) throw DataError("GTSRB training images not found under " + dir.string());

    Dataset all{"gtsrb", image_size, image_size, kGtsrbClasses, {}, {}};
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(train_dir))
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& cdir : class_dirs) {
        fs::path csv = cdir / ("GT-" + cdir.filename().string() + ".csv");
        for (const auto& a : read_gtsrb_csv(csv)) {
            all.append(crop_and_resize(read_ppm(cdir / a.filename), a, image_size), a.class_id);
        }
    }

    DatasetSplits splits;
    Rng rng(0);
    auto order = rng.permutation(all.size());
    const std::size_t n_val = std::min(kGtsrbValidation, all.size());
    std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> val_idx(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
    splits.train = all.subset(train_idx);
    splits.val = all.subset(val_idx);
    splits.test = Dataset{"gtsrb", image_size, image_size, kGtsrbClasses, {}, {}};

    fs::path test_dir = root / "Final_Test" / "Images";
    fs::path test_csv = test_dir / "GT-final_test.csv";
    if (fs::exists(test_csv)) {
        for (const auto& a : read_gtsrb_csv(test_csv)) {
            splits.test.append(crop_and_resize(read_ppm(test_dir / a.filename), a, image_size), a.class_id);
        }
    }
    return splits;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class Glyph { disc, ring, triangle, square, hbar, vbar, cross, diamond };
inline constexpr std::size_t kGlyphKinds = 8;

namespace detail {

/// Is point (u, v), in glyph-local units of [-1, 1], inside the glyph?
inline bool glyph_contains(Glyph g, double u, double v) {
    const double r = std::sqrt(u * u + v * v);
    switch (g) {
        case Glyph::disc: return r <= 0.9;
        case Glyph::ring: return r <= 0.95 && r >= 0.55;
        case Glyph::triangle: return v >= -0.9 && v <= 0.8 && std::abs(u) <= 0.95 * (v + 0.9) / 1.7;
        case Glyph::square: return std::abs(u) <= 0.75 && std::abs(v) <= 0.75;
        case Glyph::hbar: return std::abs(u) <= 0.95 && std::abs(v) <= 0.3;
        case Glyph::vbar: return std::abs(u) <= 0.3 && std::abs(v) <= 0.95;
        case Glyph::cross: return (std::abs(u) <= 0.25 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.25 && std::abs(u) <= 0.95);
        case Glyph::diamond: return std::abs(u) + std::abs(v) <= 0.95;
    }
    return false;
}

}  // namespace detail

struct SynthOptions {
    double noise = 0.15;        // background noise amplitude
    double min_scale = 0.30;    // glyph half-size as a fraction of the image side
    double max_scale = 0.42;
};

/**
 * Deterministic shape classification set: class c draws glyph c % 8 (larger
 * size band for c >= 8) in a random bright color over a noisy background.
 * Labels are assigned round-robin.
 */
inline Dataset synth_shapes(std::size_t n, std::size_t classes, std::size_t size, std::uint64_t seed,
                            const SynthOptions& opt = {}) {
    if (classes < 2 || classes > 2 * kGlyphKinds) throw std::invalid_argument("synth_shapes supports 2..16 classes");
    if (size < 4) throw std::invalid_argument("synth_shapes: image too small");
    Dataset data{"synth", size, size, classes, {}, {}};
    data.pixels.reserve(n * data.image_bytes());
    Rng rng(seed);
    const double side = static_cast<double>(size);
    std::vector<std::uint8_t> img(data.image_bytes());
    std::vector<double> buf(data.image_bytes());
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % classes);
        const auto glyph = static_cast<Glyph>(static_cast<std::size_t>(label) % kGlyphKinds);
        const bool large = static_cast<std::size_t>(label) >= kGlyphKinds;

        std::array<double, 3> bg{};
        for (auto& b : bg) b = rng.uniform(0.1, 0.45);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < size * size; ++p)
                buf[c * size * size + p] = std::clamp(bg[c] + rng.uniform(-opt.noise, opt.noise), 0.0, 1.0);

        std::array<double, 3> color{};
        for (auto& cval : color) cval = rng.uniform(0.55, 1.0);
        color[rng.index(3)] = rng.uniform(0.0, 0.3);  // keep hues saturated
        double half = side * rng.uniform(opt.min_scale, opt.max_scale) * (large ? 1.25 : 0.8);
        double cx = side / 2.0 + rng.uniform(-0.15, 0.15) * side;
        double cy = side / 2.0 + rng.uniform(-0.15, 0.15) * side;

        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                // 2x2 supersampled coverage
                int hits = 0;
                for (int sy = 0; sy < 2; ++sy)
                    for (int sx = 0; sx < 2; ++sx) {
                        double u = (static_cast<double>(x) + 0.25 + 0.5 * sx - cx) / half;
                        double v = (static_cast<double>(y) + 0.25 + 0.5 * sy - cy) / half;
                        hits += detail::glyph_contains(glyph, u, v);
                    }
                if (hits == 0) continue;
                double cover = hits / 4.0;
                for (std::size_t c = 0; c < 3; ++c) {
                    double& px = buf[(c * size + y) * size + x];
                    px = (1.0 - cover) * px + cover * color[c];
                }
            }
        }
        for (std::size_t k = 0; k < img.size(); ++k) img[k] = static_cast<std::uint8_t>(std::lround(buf[k] * 255.0));
        data.append(img, label);
    }
    return data;
}

}  // namespace lnl

#endif
