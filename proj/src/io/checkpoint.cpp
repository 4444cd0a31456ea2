#include "dcv/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dcv/error.hpp"

namespace dcv {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ArgumentError("cannot write " + path.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw ArgumentError("write failed for " + path.string());
    }
    fs::rename(tmp, path);
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArgumentError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string json_hash(const json& j) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_bundle(const TensorBundle& bundle, const fs::path& manifest, const fs::path& blob) {
    json index = json::array();
    std::string bytes;
    for (const auto& [name, t] : bundle.tensors) {
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", bytes.size()}});
        auto d = t.data();
        const std::size_t at = bytes.size();
        bytes.resize(at + d.size() * sizeof(double));
        std::memcpy(bytes.data() + at, d.data(), d.size() * sizeof(double));
    }
    json m = {{"format", bundle.format}, {"meta", bundle.meta}, {"tensors", index}};
    write_text_file(blob, bytes);
    write_text_file(manifest, m.dump(2) + "\n");
}

TensorBundle load_bundle(const fs::path& manifest, const fs::path& blob, const std::string& expected_format) {
    json m;
    try {
        m = json::parse(read_text_file(manifest));
    } catch (const json::parse_error& e) {
        throw FormatError(manifest.string() + ": " + e.what());
    }
    const std::string bytes = read_text_file(blob);
    TensorBundle out;
    try {
        out.format = m.at("format").get<std::string>();
        if (out.format != expected_format) {
            throw FormatError("expected format " + expected_format + ", found " + out.format);
        }
        out.meta = m.value("meta", json::object());
        std::size_t expected_offset = 0;
        for (const auto& entry : m.at("tensors")) {
            auto name = entry.at("name").get<std::string>();
            auto shape = entry.at("shape").get<Shape>();
            auto offset = entry.at("offset").get<std::size_t>();
            if (offset != expected_offset) {
                throw FormatError("tensor " + name + " offset " + std::to_string(offset) + ", expected " +
                                  std::to_string(expected_offset));
            }
            for (auto e : shape) {
                if (e == 0) throw FormatError("tensor " + name + " has a zero extent");
            }
            const std::size_t n = shape_size(shape);
            if (offset + n * sizeof(double) > bytes.size()) {
                throw FormatError("blob too short for tensor " + name + ": need " +
                                  std::to_string(offset + n * sizeof(double)) + " bytes, have " +
                                  std::to_string(bytes.size()));
            }
            std::vector<double> values(n);
            std::memcpy(values.data(), bytes.data() + offset, n * sizeof(double));
            out.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
            expected_offset = offset + n * sizeof(double);
        }
        if (expected_offset != bytes.size()) {
            throw FormatError("blob has " + std::to_string(bytes.size()) + " bytes, index covers " +
                              std::to_string(expected_offset));
        }
    } catch (const json::exception& e) {
        throw FormatError(manifest.string() + ": " + e.what());
    }
    return out;
}

json config_to_json(const EncoderConfig& c) {
    return {{"layers", c.layers},         {"heads", c.heads},
            {"width", c.width},           {"patch_size", c.patch_size},
            {"image_side", c.image_side}, {"channels", c.channels},
            {"joint_dim", c.joint_dim},   {"mlp_ratio", c.mlp_ratio},
            {"vocab_size", c.vocab_size}, {"text_len", c.text_len},
            {"text_layers", c.text_layers}, {"ln_eps", c.ln_eps}};
}

EncoderConfig config_from_json(const json& j) {
    EncoderConfig c;
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.width = j.value("width", c.width);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.image_side = j.value("image_side", c.image_side);
    c.channels = j.value("channels", c.channels);
    c.joint_dim = j.value("joint_dim", c.joint_dim);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.text_len = j.value("text_len", c.text_len);
    c.text_layers = j.value("text_layers", c.text_layers);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
    c.validate();
    return c;
}

namespace {
constexpr const char* kCheckpointFormat = "dcv-checkpoint-v1";
}

void save_checkpoint(const ModelParams& params, const Vocabulary& vocab, const fs::path& dir) {
    TensorBundle b;
    b.format = kCheckpointFormat;
    b.meta = {{"config", config_to_json(params.config())}, {"vocab", vocab.tokens()}};
    for (std::size_t i = 0; i < params.size(); ++i) b.tensors.emplace_back(params.name(i), params.at(i).detach());
    save_bundle(b, dir / "model.json", dir / "model.bin");
}

Checkpoint load_checkpoint(const fs::path& dir) {
    TensorBundle b = load_bundle(dir / "model.json", dir / "model.bin", kCheckpointFormat);
    EncoderConfig config;
    Vocabulary vocab;
    try {
        config = config_from_json(b.meta.at("config"));
        vocab = Vocabulary::from_tokens(b.meta.at("vocab").get<std::vector<std::string>>());
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    if (vocab.size() != config.vocab_size) {
        throw FormatError("vocabulary has " + std::to_string(vocab.size()) + " entries, config says " +
                          std::to_string(config.vocab_size));
    }
    const auto layout = parameter_layout(config);
    if (layout.size() != b.tensors.size()) {
        throw FormatError("checkpoint has " + std::to_string(b.tensors.size()) + " tensors, config implies " +
                          std::to_string(layout.size()));
    }
    ModelParams params(config);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        auto& [name, t] = b.tensors[i];
        if (name != layout[i].first || t.shape() != layout[i].second) {
            throw FormatError("tensor " + name + " " + shape_string(t.shape()) + " does not match expected " +
                              layout[i].first + " " + shape_string(layout[i].second));
        }
        params.add(name, std::move(t));
    }
    return Checkpoint{std::move(params), std::move(vocab)};
}

} // namespace dcv
