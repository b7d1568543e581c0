#include "pymx/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <zlib.h>

#include "pymx/error.hpp"

namespace pymx {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'Y', 'M', 'X'};

class Writer {
public:
    template <typename V>
    void put(V v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(V));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
    template <typename V>
    V get() {
        V v;
        std::memcpy(&v, take(sizeof(V)), sizeof(V));
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated");
        const auto* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in bounded chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw FormatError("checkpoint has no tensor '" + name + "'");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.put_bytes(kMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    const auto meta = ckpt.meta.dump();
    w.put<std::uint64_t>(meta.size());
    w.put_bytes(meta.data(), meta.size());
    w.put<std::uint64_t>(ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
        w.put<std::uint64_t>(name.size());
        w.put_bytes(name.data(), name.size());
        w.put<std::uint64_t>(static_cast<std::uint64_t>(t.rank()));
        for (auto d : t.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    }
    for (const auto& [name, t] : ckpt.tensors) w.put_bytes(t.values().data(), t.values().size() * sizeof(float));
    w.put<std::uint32_t>(crc32_of(w.bytes));
    return std::move(w.bytes);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 4 + 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("not a checkpoint (bad magic)");
    }
    Reader header(bytes.subspan(4));
    const auto version = header.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError(fmt::format("checkpoint version {} is not supported (expected {})", version,
                                      kCheckpointVersion));
    }
    const auto body = bytes.first(bytes.size() - 4);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body.size(), 4);
    if (crc32_of(body) != stored) throw FormatError("checkpoint CRC mismatch (corrupt or truncated file)");

    Reader r(body.subspan(8));
    Checkpoint ckpt;
    const auto meta_len = r.get<std::uint64_t>();
    const auto* meta = r.take(meta_len);
    try {
        ckpt.meta = nlohmann::json::parse(meta, meta + meta_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    const auto count = r.get<std::uint64_t>();
    std::vector<std::pair<std::string, Shape>> manifest;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint64_t>();
        const auto* name = r.take(name_len);
        const auto rank = r.get<std::uint64_t>();
        if (rank > 8) throw FormatError(fmt::format("checkpoint tensor {} has implausible rank {}", i, rank));
        Shape shape;
        for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
        manifest.emplace_back(std::string(reinterpret_cast<const char*>(name), name_len), std::move(shape));
    }
    for (auto& [name, shape] : manifest) {
        const auto n = static_cast<std::size_t>(numel(shape));
        std::vector<float> values(n);
        std::memcpy(values.data(), r.take(n * sizeof(float)), n * sizeof(float));
        ckpt.tensors.emplace_back(name, Tensor<float>::from(shape, std::move(values)));
    }
    if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes after tensor data");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StateError("cannot write checkpoint " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw StateError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

ModelConfig checkpoint_model_config(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("model")) throw FormatError("checkpoint metadata lacks a model config");
    return ModelConfig::from_json(ckpt.meta.at("model"));
}

PyramidMixer<float> model_from_checkpoint(const Checkpoint& ckpt) {
    PyramidMixer<float> model(checkpoint_model_config(ckpt), 0);
    load_model_parameters(model, ckpt);
    return model;
}

void load_model_parameters(PyramidMixer<float>& model, const Checkpoint& ckpt) {
    const auto stored = checkpoint_model_config(ckpt);
    if (auto field = first_difference(model.config(), stored)) {
        throw ConfigError(fmt::format("checkpoint was written for a different model: model.{} differs ({} vs {})",
                                      *field, stored.to_json().at(*field).dump(),
                                      model.config().to_json().at(*field).dump()));
    }
    std::vector<NamedTensor<float>> values;
    for (const auto& [name, t] : model.parameters()) values.emplace_back(name, ckpt.tensor(name));
    model.load_parameters(values);
}

}  // namespace pymx
