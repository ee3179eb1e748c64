#pragma once

// Checkpoint container: magic "SUPL1", a UTF-8 JSON manifest (tensor names,
// shapes, dtypes, config hash, seed), then the tensor payload concatenated
// in manifest order with every tensor start 64-byte aligned.
//
// Tensors default to little-endian 32-bit floats. Tensors whose consumers
// check tight orthogonality invariants (adapter down-projections and
// supertype bases) are stored as 64-bit floats so a round trip preserves
// them bitwise; the manifest records the dtype per tensor.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "suplora/adapter.hpp"
#include "suplora/denoiser.hpp"
#include "suplora/matrix.hpp"

namespace suplora {

struct TensorRecord {
    std::string name;
    std::string dtype;  // "f32" or "f64"
    Matrix value;
};

struct Checkpoint {
    std::string kind;         // "denoiser", "adapter", "fused"
    std::uint64_t seed{0};
    std::string config_hash;  // hex digest of the run configuration
    nlohmann::json meta = nlohmann::json::object();
    std::vector<TensorRecord> tensors;

    const TensorRecord& tensor(const std::string& name) const {
        for (const TensorRecord& t : tensors)
            if (t.name == name) return t;
        throw std::invalid_argument("checkpoint: no tensor named '" + name + "'");
    }
    bool has_tensor(const std::string& name) const {
        for (const TensorRecord& t : tensors)
            if (t.name == name) return true;
        return false;
    }
};

namespace detail {

constexpr std::size_t kAlign = 64;
constexpr char kMagic[5] = {'S', 'U', 'P', 'L', '1'};

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& s, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= std::uint64_t(static_cast<unsigned char>(s[at + std::size_t(i)])) << (8 * i);
    return v;
}

inline void pad_to(std::string& out, std::size_t align) {
    while (out.size() % align != 0) out.push_back('\0');
}

inline std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    throw std::runtime_error("checkpoint: unknown dtype '" + dtype + "'");
}

}  // namespace detail

inline std::string checkpoint_bytes(const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["kind"] = ckpt.kind;
    manifest["seed"] = ckpt.seed;
    manifest["config_hash"] = ckpt.config_hash;
    manifest["meta"] = ckpt.meta;
    nlohmann::json tensors = nlohmann::json::array();
    for (const TensorRecord& t : ckpt.tensors) {
        detail::dtype_size(t.dtype);  // reject unknown dtypes before writing
        tensors.push_back({{"name", t.name},
                           {"dtype", t.dtype},
                           {"shape", {t.value.rows, t.value.cols}}});
    }
    manifest["tensors"] = std::move(tensors);
    const std::string mbytes = manifest.dump();

    std::string out(detail::kMagic, sizeof(detail::kMagic));
    out.append(3, '\0');  // 8-byte alignment for the length field
    detail::put_u64(out, mbytes.size());
    out += mbytes;
    for (const TensorRecord& t : ckpt.tensors) {
        detail::pad_to(out, detail::kAlign);
        if (t.dtype == "f32") {
            for (double x : t.value.data)
                detail::put_u32(out, std::bit_cast<std::uint32_t>(float(x)));
        } else {
            for (double x : t.value.data)
                detail::put_u64(out, std::bit_cast<std::uint64_t>(x));
        }
    }
    return out;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
    if (bytes.size() < 16 ||
        bytes.compare(0, sizeof(detail::kMagic), detail::kMagic,
                      sizeof(detail::kMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    const std::uint64_t mlen = detail::get_u64(bytes, 8);
    if (16 + mlen > bytes.size())
        throw std::runtime_error("checkpoint: truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(16, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: manifest parse error: ") +
                                 e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.kind = manifest.at("kind").get<std::string>();
        ckpt.seed = manifest.at("seed").get<std::uint64_t>();
        ckpt.config_hash = manifest.at("config_hash").get<std::string>();
        ckpt.meta = manifest.value("meta", nlohmann::json::object());

        std::size_t offset = 16 + mlen;
        for (const auto& t : manifest.at("tensors")) {
            TensorRecord rec;
            rec.name = t.at("name").get<std::string>();
            rec.dtype = t.at("dtype").get<std::string>();
            const auto shape = t.at("shape");
            const std::size_t rows = shape.at(0).get<std::size_t>();
            const std::size_t cols = shape.at(1).get<std::size_t>();
            const std::size_t esz = detail::dtype_size(rec.dtype);

            offset = (offset + detail::kAlign - 1) / detail::kAlign * detail::kAlign;
            const std::size_t need = rows * cols * esz;
            if (offset + need > bytes.size())
                throw std::runtime_error("checkpoint: payload length mismatch for '" +
                                         rec.name + "'");
            rec.value = Matrix(rows, cols);
            for (std::size_t i = 0; i < rows * cols; ++i) {
                if (esz == 4) {
                    std::uint32_t v = 0;
                    for (int b = 0; b < 4; ++b)
                        v |= std::uint32_t(static_cast<unsigned char>(
                                 bytes[offset + 4 * i + std::size_t(b)]))
                             << (8 * b);
                    rec.value.data[i] = double(std::bit_cast<float>(v));
                } else {
                    rec.value.data[i] =
                        std::bit_cast<double>(detail::get_u64(bytes, offset + 8 * i));
                }
            }
            offset += need;
            ckpt.tensors.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: malformed manifest: ") +
                                 e.what());
    }
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = checkpoint_bytes(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::invalid_argument("load_checkpoint: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

// --- domain adapters ------------------------------------------------------

inline Checkpoint denoiser_checkpoint(const DenoiserParams& params,
                                      const std::string& config_hash,
                                      std::uint64_t seed,
                                      const std::string& kind = "denoiser") {
    Checkpoint c;
    c.kind = kind;
    c.seed = seed;
    c.config_hash = config_hash;
    c.meta = {{"d_model", params.d_model},
              {"image_side", params.image_side},
              {"d_text", params.d_text},
              {"timesteps", params.timesteps}};
    Matrix lift(1, params.lift.size());
    lift.data = params.lift;
    c.tensors = {{"lift", "f32", std::move(lift)}, {"pos", "f32", params.pos},
                 {"temb", "f32", params.temb},     {"W_q", "f32", params.W_q},
                 {"W_k", "f32", params.W_k},       {"W_v", "f32", params.W_v},
                 {"W_out", "f32", params.W_out}};
    return c;
}

inline DenoiserParams denoiser_from_checkpoint(const Checkpoint& c) {
    DenoiserParams p;
    try {
        p.d_model = c.meta.at("d_model").get<std::size_t>();
        p.image_side = c.meta.at("image_side").get<std::size_t>();
        p.d_text = c.meta.at("d_text").get<std::size_t>();
        p.timesteps = c.meta.at("timesteps").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: denoiser meta missing: ") +
                                 e.what());
    }
    p.lift = c.tensor("lift").value.data;
    p.pos = c.tensor("pos").value;
    p.temb = c.tensor("temb").value;
    p.W_q = c.tensor("W_q").value;
    p.W_k = c.tensor("W_k").value;
    p.W_v = c.tensor("W_v").value;
    p.W_out = c.tensor("W_out").value;
    p.check_shapes();
    return p;
}

inline Checkpoint adapter_checkpoint(const SuPLoRAAdapter& ad,
                                     const std::string& config_hash,
                                     std::uint64_t seed) {
    Checkpoint c;
    c.kind = "adapter";
    c.seed = seed;
    c.config_hash = config_hash;
    c.meta = {{"group_id", ad.group_id},
              {"layer", to_string(ad.layer)},
              {"rank", ad.rank},
              {"r_s", ad.subspace_meta.r_s},
              {"capture_ratio", ad.subspace_meta.capture_ratio},
              {"supertype_id", ad.subspace_meta.supertype_id}};
    // A carries trained values and tolerates narrowing; B and the supertype
    // basis guard 1e-9 orthogonality invariants, so they keep full precision.
    c.tensors = {{"A", "f32", ad.A},
                 {"B", "f64", ad.B},
                 {"supertype_basis", "f64", ad.supertype_basis}};
    return c;
}

inline SuPLoRAAdapter adapter_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "adapter")
        throw std::runtime_error("checkpoint: expected kind 'adapter', got '" +
                                 c.kind + "'");
    SuPLoRAAdapter ad;
    try {
        ad.group_id = c.meta.at("group_id").get<std::size_t>();
        ad.layer = adapter_layer_from_string(c.meta.at("layer").get<std::string>());
        ad.rank = c.meta.at("rank").get<std::size_t>();
        ad.subspace_meta.r_s = c.meta.at("r_s").get<std::size_t>();
        ad.subspace_meta.capture_ratio = c.meta.at("capture_ratio").get<double>();
        ad.subspace_meta.supertype_id = c.meta.at("supertype_id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: adapter meta missing: ") +
                                 e.what());
    }
    ad.A = c.tensor("A").value;
    ad.B = c.tensor("B").value;
    ad.supertype_basis = c.tensor("supertype_basis").value;
    return ad;
}

}  // namespace suplora
