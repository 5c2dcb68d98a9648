#include "medmamba/checkpoint.hpp"

#include "medmamba/errors.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace medmamba {

namespace {

using nlohmann::json;

constexpr char kMagic[5] = {'M', 'M', 'C', 'K', '1'};
constexpr std::uint32_t kMaxString = 1u << 24;

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
    Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

    void bytes(char* dst, std::size_t n, const char* what) {
        if (!is_.read(dst, static_cast<std::streamsize>(n))) {
            throw FormatError("truncated checkpoint " + path_ + " while reading " + what);
        }
    }
    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        bytes(reinterpret_cast<char*>(b), 4, what);
        return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
               static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
    }
    std::string string(const char* what) {
        const auto n = u32(what);
        if (n > kMaxString) {
            throw FormatError("checkpoint " + path_ + ": implausible " + what + " length " + std::to_string(n));
        }
        std::string s(n, '\0');
        bytes(s.data(), n, what);
        return s;
    }
    const std::string& path() const { return path_; }

private:
    std::istream& is_;
    std::string path_;
};

CheckpointMeta read_header(Reader& r) {
    char magic[5];
    r.bytes(magic, 5, "magic");
    if (std::memcmp(magic, kMagic, 5) != 0) {
        throw FormatError("not a checkpoint (bad magic): " + r.path());
    }
    const auto version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + r.path());
    }
    const auto text = r.string("header");
    CheckpointMeta meta;
    try {
        const auto j = json::parse(text);
        meta.config = ModelConfig::from_json(j.at("model").dump());
        meta.seed = j.at("seed").get<std::uint64_t>();
        meta.metrics = j.at("metrics").get<std::map<std::string, double>>();
        meta.class_names = j.at("class_names").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw FormatError("checkpoint header is malformed in " + r.path() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError("checkpoint header holds an invalid config in " + r.path() + ": " + e.what());
    }
    return meta;
}

} // namespace

template <typename T>
void save_checkpoint(MedMamba<T>& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
    json header;
    header["model"] = json::parse(model.config().to_json());
    header["seed"] = meta.seed;
    header["metrics"] = meta.metrics;
    header["class_names"] = meta.class_names;
    header["library_version"] = MEDMAMBA_VERSION;

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw FormatError("cannot write checkpoint " + path.string());
    }
    os.write(kMagic, 5);
    put_u32(os, kCheckpointVersion);
    put_string(os, header.dump());
    const auto state = model.state();
    put_u32(os, static_cast<std::uint32_t>(state.size()));
    for (const auto& [name, tensor] : state) {
        put_string(os, name);
        put_u32(os, static_cast<std::uint32_t>(tensor->rank()));
        for (auto e : tensor->shape()) {
            put_u32(os, static_cast<std::uint32_t>(e));
        }
        for (T v : tensor->data()) {
            put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    if (!os) {
        throw FormatError("failed writing checkpoint " + path.string());
    }
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open checkpoint " + path.string());
    }
    Reader r(is, path.string());
    auto meta = read_header(r);
    if (expected && !(*expected == meta.config)) {
        throw ConfigError("checkpoint config does not match the expected config\n  checkpoint: " +
                          meta.config.to_json() + "\n  expected:   " + expected->to_json());
    }
    LoadedCheckpoint<T> out{meta, MedMamba<T>(meta.config, meta.seed)};
    auto state = out.model.state();
    const auto count = r.u32("tensor count");
    if (count != state.size()) {
        throw FormatError("checkpoint " + path.string() + " holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(state.size()));
    }
    for (auto& [name, tensor] : state) {
        const auto stored = r.string("tensor name");
        if (stored != name) {
            throw FormatError("checkpoint tensor name mismatch: found '" + stored + "', expected '" + name + "'");
        }
        const auto rank = r.u32("rank");
        Shape shape;
        for (std::uint32_t i = 0; i < rank && i < 8; ++i) {
            shape.push_back(r.u32("extent"));
        }
        if (shape != tensor->shape()) {
            throw FormatError("checkpoint tensor '" + name + "' has extents " + shape_str(shape) + ", expected " +
                              shape_str(tensor->shape()));
        }
        auto values = tensor->mutable_data();
        std::vector<char> raw(values.size() * 4);
        r.bytes(raw.data(), raw.size(), "tensor values");
        for (std::size_t i = 0; i < values.size(); ++i) {
            const auto* b = reinterpret_cast<const unsigned char*>(raw.data() + 4 * i);
            const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
                                       static_cast<std::uint32_t>(b[2]) << 16 |
                                       static_cast<std::uint32_t>(b[3]) << 24;
            values[i] = static_cast<T>(std::bit_cast<float>(bits));
        }
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailing bytes after checkpoint payload: " + path.string());
    }
    return out;
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open checkpoint " + path.string());
    }
    Reader r(is, path.string());
    return read_header(r);
}

template void save_checkpoint(MedMamba<float>&, const CheckpointMeta&, const std::filesystem::path&);
template void save_checkpoint(MedMamba<double>&, const CheckpointMeta&, const std::filesystem::path&);
template LoadedCheckpoint<float> load_checkpoint(const std::filesystem::path&, const ModelConfig*);
template LoadedCheckpoint<double> load_checkpoint(const std::filesystem::path&, const ModelConfig*);

} // namespace medmamba
