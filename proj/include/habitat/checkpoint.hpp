#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "habitat/common.hpp"
#include "habitat/model.hpp"

namespace habitat {

inline constexpr int kCheckpointFormatVersion = 1;

// Checkpoint container:
//   line 1: "HABCKPT <version>"
//   line 2: decimal byte length of the JSON header
//   JSON header: encoder spec, class order, tensor directory (name + shape)
//   blob: tensors as little-endian float32 in directory order
// Parameters are kept in double in memory and round through float32 here, so
// save → load → save is byte-stable.

namespace detail {

inline std::string encoder_kind_name(EncoderKind k) {
    return k == EncoderKind::reference_tiny ? "reference_tiny" : "external";
}

inline EncoderKind parse_encoder_kind(const std::string& s) {
    if (s == "reference_tiny") return EncoderKind::reference_tiny;
    if (s == "external") return EncoderKind::external;
    fail("checkpoint: unknown encoder kind '" + s + "'");
}

inline void write_f32_le(std::ostream& out, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, sizeof(bits));
    unsigned char bytes[4] = {static_cast<unsigned char>(bits & 0xff), static_cast<unsigned char>((bits >> 8) & 0xff),
                              static_cast<unsigned char>((bits >> 16) & 0xff),
                              static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

inline double read_f32_le(std::istream& in) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    if (!in) fail("checkpoint: truncated tensor data");
    const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                               (static_cast<std::uint32_t>(bytes[2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[3]) << 24);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return static_cast<double>(f);
}

} // namespace detail

inline nlohmann::ordered_json encoder_spec_to_json(const EncoderSpec& spec) {
    nlohmann::ordered_json j;
    j["kind"] = detail::encoder_kind_name(spec.kind);
    j["input_size"] = spec.input_size;
    j["embed_dim"] = spec.embed_dim;
    j["patch_size"] = spec.patch_size;
    j["external_ref"] = spec.external_ref;
    return j;
}

inline EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
    EncoderSpec spec;
    spec.kind = detail::parse_encoder_kind(j.at("kind").get<std::string>());
    spec.input_size = j.at("input_size").get<int>();
    spec.embed_dim = j.at("embed_dim").get<std::size_t>();
    spec.patch_size = j.value("patch_size", 8);
    spec.external_ref = j.value("external_ref", std::string{});
    return spec;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    nlohmann::ordered_json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["encoder_spec"] = encoder_spec_to_json(model.spec);
    header["class_order"] = model.class_order;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const auto& [name, m] : model.params) {
        nlohmann::ordered_json t;
        t["name"] = name;
        t["rows"] = m.rows;
        t["cols"] = m.cols;
        tensors.push_back(t);
    }
    header["tensors"] = tensors;
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) fail("checkpoint: cannot write " + path.string());
    out << "HABCKPT " << kCheckpointFormatVersion << "\n" << header_text.size() << "\n" << header_text;
    for (const auto& [name, m] : model.params)
        for (double v : m.data) detail::write_f32_le(out, v);
    if (!out) fail("checkpoint: write failed for " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("checkpoint: cannot open " + path.string());
    std::string magic_line;
    std::getline(in, magic_line);
    if (magic_line.rfind("HABCKPT ", 0) != 0) fail("checkpoint: " + path.string() + " is not a checkpoint file");
    long long version = 0;
    if (!parse_int(magic_line.substr(8), version) || version != kCheckpointFormatVersion)
        fail("checkpoint: unsupported format version in " + path.string());
    std::string len_line;
    std::getline(in, len_line);
    long long header_len = 0;
    if (!parse_int(len_line, header_len) || header_len <= 0) fail("checkpoint: malformed header length");
    std::string header_text(static_cast<std::size_t>(header_len), '\0');
    in.read(header_text.data(), header_len);
    if (!in) fail("checkpoint: truncated header in " + path.string());

    nlohmann::json header = nlohmann::json::parse(header_text);
    Model model;
    model.spec = encoder_spec_from_json(header.at("encoder_spec"));
    model.class_order = header.at("class_order").get<std::vector<std::string>>();
    for (const auto& t : header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        Matrix m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
        for (double& v : m.data) v = detail::read_f32_le(in);
        model.params.emplace(name, std::move(m));
    }
    return model;
}

/// Order-independent fingerprint of a parameter subset. Hashes the float32
/// serialization, i.e. exactly what a checkpoint would store.
inline std::uint64_t params_hash(const ParamMap& params, const std::string& prefix = "") {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [name, m] : params) {
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        h = fnv1a(name.data(), name.size(), h);
        for (double v : m.data) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, sizeof(bits));
            h = fnv1a(&bits, sizeof(bits), h);
        }
    }
    return h;
}

} // namespace habitat
