#include "medmamba/data.hpp"

#include "medmamba/errors.hpp"
#include "medmamba/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>

namespace medmamba {

namespace {

constexpr char kPackedMagic[5] = {'M', 'M', 'P', 'K', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError("truncated packed dataset while reading " + what);
    }
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

} // namespace

std::vector<std::int64_t> SampleSet::labels() const {
    std::vector<std::int64_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(s.label);
    }
    return out;
}

std::vector<std::int64_t> SampleSet::indices_of(Split split) const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == split) {
            out.push_back(static_cast<std::int64_t>(i));
        }
    }
    return out;
}

SampleSet load_image_folder(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) {
        throw ConfigError("image folder does not exist: " + root.string());
    }
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) {
            class_dirs.push_back(entry.path());
        }
    }
    if (class_dirs.empty()) {
        throw ConfigError("no class subdirectories under " + root.string());
    }
    std::sort(class_dirs.begin(), class_dirs.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

    SampleSet set;
    for (std::size_t label = 0; label < class_dirs.size(); ++label) {
        set.class_names.push_back(class_dirs[label].filename().string());
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
            if (entry.is_regular_file()) {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        std::size_t loaded = 0;
        for (const auto& file : files) {
            try {
                Sample s;
                s.image = read_image(file);
                s.label = static_cast<std::int64_t>(label);
                s.source = fs::relative(file, root).generic_string();
                set.samples.push_back(std::move(s));
                ++loaded;
            } catch (const FormatError& e) {
                std::cerr << "warning: skipping " << file.string() << ": " << e.what() << '\n';
                ++set.warnings;
            }
        }
        if (loaded == 0) {
            throw ConfigError("class directory has no readable images: " + class_dirs[label].string());
        }
    }
    return set;
}

PackedDataset read_packed(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open packed dataset " + path.string());
    }
    char magic[5] = {};
    if (!is.read(magic, 5) || std::memcmp(magic, kPackedMagic, 5) != 0) {
        throw FormatError("not a packed dataset (bad magic/version): " + path.string());
    }
    PackedDataset d;
    const auto n = get_u32(is, "header");
    d.height = get_u32(is, "header");
    d.width = get_u32(is, "header");
    d.channels = get_u32(is, "header");
    d.num_classes = get_u32(is, "header");
    if (d.height == 0 || d.width == 0 || (d.channels != 1 && d.channels != 3) || d.num_classes < 1 ||
        d.num_classes > 256) {
        throw FormatError("packed dataset header is invalid: " + path.string());
    }
    d.splits.resize(n);
    d.labels.resize(n);
    d.pixels.resize(static_cast<std::size_t>(n) * d.sample_bytes());
    for (std::uint32_t i = 0; i < n; ++i) {
        char tag[2];
        if (!is.read(tag, 2) ||
            !is.read(reinterpret_cast<char*>(d.pixels.data() + i * d.sample_bytes()),
                     static_cast<std::streamsize>(d.sample_bytes()))) {
            throw FormatError("truncated packed dataset at sample " + std::to_string(i) + ": " + path.string());
        }
        d.splits[i] = static_cast<std::uint8_t>(tag[0]);
        d.labels[i] = static_cast<std::uint8_t>(tag[1]);
        if (d.splits[i] > 2 || d.labels[i] >= d.num_classes) {
            throw FormatError("packed dataset sample " + std::to_string(i) + " has an invalid split or label");
        }
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailing bytes after packed dataset payload: " + path.string());
    }
    return d;
}

void write_packed(const PackedDataset& d, const std::filesystem::path& path) {
    if (d.splits.size() != d.size() || d.pixels.size() != d.size() * d.sample_bytes()) {
        throw DimensionError("write_packed: inconsistent packed dataset");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw FormatError("cannot write packed dataset " + path.string());
    }
    os.write(kPackedMagic, 5);
    put_u32(os, static_cast<std::uint32_t>(d.size()));
    put_u32(os, d.height);
    put_u32(os, d.width);
    put_u32(os, d.channels);
    put_u32(os, d.num_classes);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const char tag[2] = {static_cast<char>(d.splits[i]), static_cast<char>(d.labels[i])};
        os.write(tag, 2);
        os.write(reinterpret_cast<const char*>(d.pixels.data() + i * d.sample_bytes()),
                 static_cast<std::streamsize>(d.sample_bytes()));
    }
    if (!os) {
        throw FormatError("failed writing packed dataset " + path.string());
    }
}

SampleSet unpack(const PackedDataset& d) {
    SampleSet set;
    for (std::uint32_t k = 0; k < d.num_classes; ++k) {
        set.class_names.push_back("class" + std::to_string(k));
    }
    const std::int64_t h = d.height;
    const std::int64_t w = d.width;
    const std::int64_t plane = h * w;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const std::uint8_t* px = d.pixels.data() + i * d.sample_bytes();
        std::vector<float> chw(static_cast<std::size_t>(3 * plane));
        for (std::int64_t p = 0; p < plane; ++p) {
            for (std::int64_t c = 0; c < 3; ++c) {
                const std::int64_t src = d.channels == 1 ? p : p * 3 + c;
                chw[static_cast<std::size_t>(c * plane + p)] = static_cast<float>(px[src]) / 255.0f;
            }
        }
        Sample s;
        s.image = Tensor<float>::from({3, h, w}, std::move(chw));
        s.label = d.labels[i];
        s.split = static_cast<Split>(d.splits[i]);
        s.source = "#" + std::to_string(i);
        set.samples.push_back(std::move(s));
    }
    return set;
}

SampleSet load_packed(const std::filesystem::path& path) {
    return unpack(read_packed(path));
}

PackedDataset pack(const SampleSet& set, std::uint32_t channels) {
    if (set.samples.empty()) {
        throw ConfigError("pack: empty sample set");
    }
    if (channels != 1 && channels != 3) {
        throw ConfigError("pack: channels must be 1 or 3");
    }
    PackedDataset d;
    d.height = static_cast<std::uint32_t>(set.samples[0].image.dim(1));
    d.width = static_cast<std::uint32_t>(set.samples[0].image.dim(2));
    d.channels = channels;
    d.num_classes = static_cast<std::uint32_t>(set.num_classes());
    const std::int64_t plane = static_cast<std::int64_t>(d.height) * d.width;
    for (const auto& s : set.samples) {
        if (s.image.dim(1) != d.height || s.image.dim(2) != d.width) {
            throw DimensionError("pack: samples differ in size; resize first");
        }
        d.splits.push_back(static_cast<std::uint8_t>(s.split));
        d.labels.push_back(static_cast<std::uint8_t>(s.label));
        const auto v = s.image.data();
        for (std::int64_t p = 0; p < plane; ++p) {
            for (std::uint32_t c = 0; c < channels; ++c) {
                const float x = std::clamp(v[static_cast<std::size_t>(c * plane + p)], 0.0f, 1.0f);
                d.pixels.push_back(static_cast<std::uint8_t>(std::lround(x * 255.0f)));
            }
        }
    }
    return d;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::int64_t size) {
    if (image.rank() != 3 || size < 1) {
        throw DimensionError("resize_bilinear: expects [C,H,W] and a positive size, got " + shape_str(image.shape()));
    }
    const auto c = image.dim(0);
    const auto h = image.dim(1);
    const auto w = image.dim(2);
    // source coordinate, lower index and weight per output row/column
    struct Tap {
        std::int64_t lo, hi;
        T frac;
    };
    auto taps = [size](std::int64_t extent) {
        std::vector<Tap> t(static_cast<std::size_t>(size));
        const double ratio = static_cast<double>(extent) / static_cast<double>(size);
        for (std::int64_t o = 0; o < size; ++o) {
            double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
            src = std::max(src, 0.0);
            auto lo = static_cast<std::int64_t>(std::floor(src));
            lo = std::min(lo, extent - 1);
            const std::int64_t hi = std::min(lo + 1, extent - 1);
            t[static_cast<std::size_t>(o)] = {lo, hi, static_cast<T>(src - static_cast<double>(lo))};
        }
        return t;
    };
    const auto ty = taps(h);
    const auto tx = taps(w);
    std::vector<T> out(static_cast<std::size_t>(c * size * size));
    const auto v = image.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* plane = v.data() + ch * h * w;
        for (std::int64_t y = 0; y < size; ++y) {
            const auto& a = ty[static_cast<std::size_t>(y)];
            for (std::int64_t x = 0; x < size; ++x) {
                const auto& b = tx[static_cast<std::size_t>(x)];
                const T top = plane[a.lo * w + b.lo] * (T(1) - b.frac) + plane[a.lo * w + b.hi] * b.frac;
                const T bottom = plane[a.hi * w + b.lo] * (T(1) - b.frac) + plane[a.hi * w + b.hi] * b.frac;
                out[static_cast<std::size_t>((ch * size + y) * size + x)] =
                    std::clamp(top * (T(1) - a.frac) + bottom * a.frac, T(0), T(1));
            }
        }
    }
    return Tensor<T>::from({c, size, size}, std::move(out));
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& image) {
    std::vector<T> out(image.data().begin(), image.data().end());
    for (auto& v : out) {
        v = (v - T(0.5)) / T(0.5);
    }
    return Tensor<T>::from(image.shape(), std::move(out));
}

std::vector<std::vector<std::int64_t>> stratified_folds(std::span<const std::int64_t> labels, int k,
                                                        std::uint64_t seed) {
    if (k < 2) {
        throw ConfigError("stratified_folds: need at least 2 folds");
    }
    std::map<std::int64_t, std::vector<std::int64_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        by_class[labels[i]].push_back(static_cast<std::int64_t>(i));
    }
    if (by_class.empty()) {
        throw ConfigError("stratified_folds: no samples");
    }
    Rng rng(seed);
    std::vector<std::vector<std::int64_t>> folds(static_cast<std::size_t>(k));
    std::size_t offset = 0;
    for (auto& [label, members] : by_class) {
        if (members.size() < static_cast<std::size_t>(k)) {
            throw ConfigError("stratified_folds: class " + std::to_string(label) + " has " +
                              std::to_string(members.size()) + " samples, fewer than " + std::to_string(k) +
                              " folds");
        }
        rng.shuffle(members.begin(), members.end());
        for (std::size_t j = 0; j < members.size(); ++j) {
            folds[(offset + j) % static_cast<std::size_t>(k)].push_back(members[j]);
        }
        // Rotate the starting fold so remainders spread across folds.
        offset = (offset + members.size()) % static_cast<std::size_t>(k);
    }
    for (auto& f : folds) {
        std::sort(f.begin(), f.end());
    }
    return folds;
}

template Tensor<float> resize_bilinear(const Tensor<float>&, std::int64_t);
template Tensor<double> resize_bilinear(const Tensor<double>&, std::int64_t);
template Tensor<float> normalize(const Tensor<float>&);
template Tensor<double> normalize(const Tensor<double>&);

} // namespace medmamba
