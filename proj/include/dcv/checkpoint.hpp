#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcv/encoder.hpp"
#include "dcv/tokenizer.hpp"

namespace dcv {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// A JSON manifest plus a raw blob of little-endian doubles. The manifest
/// carries `format`, caller metadata under `meta`, and a `tensors` index of
/// {name, shape, offset} where offset counts bytes into the blob.
struct TensorBundle {
    std::string format;
    nlohmann::json meta;
    NamedTensors tensors;
};

void save_bundle(const TensorBundle& bundle, const std::filesystem::path& manifest,
                 const std::filesystem::path& blob);
/// Throws FormatError on a malformed manifest, wrong format tag, or a blob
/// whose length disagrees with the index.
TensorBundle load_bundle(const std::filesystem::path& manifest, const std::filesystem::path& blob,
                         const std::string& expected_format);

nlohmann::json config_to_json(const EncoderConfig& config);
EncoderConfig config_from_json(const nlohmann::json& j);

struct Checkpoint {
    ModelParams params;
    Vocabulary vocab;
};

/// Writes `model.json` and `model.bin` into `dir` (created if missing).
void save_checkpoint(const ModelParams& params, const Vocabulary& vocab, const std::filesystem::path& dir);
/// Throws FormatError when the manifest and blob disagree or shapes differ
/// from what the stored config implies.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Stable 64-bit FNV-1a hash of a JSON value's compact dump, as hex.
std::string json_hash(const nlohmann::json& j);

/// Writes text atomically enough for our purposes: temp file then rename.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

} // namespace dcv
