#include "bnfair/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace bnfair {

namespace {

using OrderedJson = nlohmann::ordered_json;

void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

void append_f64_le(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
    }
}

double read_f64_le(const std::uint8_t* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

OrderedJson spec_to_json(const BackboneSpec& spec) {
    OrderedJson j;
    j["input_dim"] = spec.input_dim;
    j["width"] = spec.width;
    j["embedding_dim"] = spec.embedding_dim;
    j["blocks"] = OrderedJson::array();
    for (const auto& b : spec.blocks) {
        OrderedJson jb;
        jb["width"] = b.width;
        jb["skip"] = b.skip_kind == SkipKind::Projection ? "projection" : "identity";
        j["blocks"].push_back(jb);
    }
    return j;
}

BackboneSpec spec_from_json(const OrderedJson& j) {
    BackboneSpec spec;
    spec.input_dim = j.at("input_dim").get<std::size_t>();
    spec.width = j.at("width").get<std::size_t>();
    spec.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    spec.blocks.clear();
    for (const auto& jb : j.at("blocks")) {
        ResidualBlockSpec b;
        b.width = jb.at("width").get<std::size_t>();
        const std::string skip = jb.at("skip").get<std::string>();
        if (skip == "projection") {
            b.skip_kind = SkipKind::Projection;
        } else if (skip == "identity") {
            b.skip_kind = SkipKind::Identity;
        } else {
            throw std::runtime_error("checkpoint: unknown skip kind " + skip);
        }
        spec.blocks.push_back(b);
    }
    return spec;
}

std::string header_json(const Checkpoint& ckpt) {
    OrderedJson j;
    j["format"] = "bnfair-checkpoint";
    j["version"] = 1;
    j["backbone"] = spec_to_json(ckpt.backbone_spec);
    j["head_outputs"] = ckpt.head_outputs;
    j["entries"] = OrderedJson::array();
    for (const auto& e : ckpt.entries) {
        OrderedJson je;
        je["name"] = e.name;
        je["kind"] = e.kind;
        je["shape"] = e.shape;
        j["entries"].push_back(je);
    }
    j["batchnorm"] = OrderedJson::array();
    for (const auto& m : ckpt.bn_meta) {
        OrderedJson jm;
        jm["layer"] = m.layer_path;
        jm["momentum"] = m.momentum;
        jm["eps"] = m.eps;
        jm["stats_mode"] = m.update_stats ? "update" : "frozen";
        jm["affine_trainable"] = m.affine_trainable;
        j["batchnorm"].push_back(jm);
    }
    return j.dump();
}

}  // namespace

namespace {

void snapshot_tensors(Checkpoint& ckpt, std::vector<NamedParam> params,
                      std::vector<NamedBuffer> buffers, std::vector<NamedBatchNorm> bns) {
    for (const auto& p : params) {
        ckpt.entries.push_back({p.path, "param", p.tensor.shape()});
        ckpt.payload.insert(ckpt.payload.end(), p.tensor.values().begin(),
                            p.tensor.values().end());
    }
    for (const auto& b : buffers) {
        ckpt.entries.push_back({b.path, "buffer", {b.data->size()}});
        ckpt.payload.insert(ckpt.payload.end(), b.data->begin(), b.data->end());
    }
    for (const auto& bn : bns) {
        ckpt.bn_meta.push_back({bn.layer_path, bn.bn->state.momentum, bn.bn->state.eps,
                                bn.bn->state.stats_mode == StatsMode::UpdateStats,
                                bn.bn->state.affine_trainable});
    }
}

}  // namespace

Checkpoint checkpoint_from_model(Model& model) {
    Checkpoint ckpt;
    ckpt.backbone_spec = model.backbone_spec();
    ckpt.head_outputs = model.head_outputs();
    snapshot_tensors(ckpt, model.named_parameters(), model.named_buffers(),
                     model.batchnorm_layers());
    return ckpt;
}

Checkpoint backbone_checkpoint(Backbone& backbone) {
    Checkpoint ckpt;
    ckpt.backbone_spec = backbone.spec();
    ckpt.head_outputs = 0;
    snapshot_tensors(ckpt, backbone.named_parameters(), backbone.named_buffers(),
                     backbone.batchnorm_layers());
    return ckpt;
}

void load_backbone_into_model(const Checkpoint& ckpt, Model& model) {
    auto params = model.backbone().named_parameters();
    auto buffers = model.backbone().named_buffers();
    std::size_t offset = 0;
    for (const auto& e : ckpt.entries) {
        std::size_t n = 1;
        for (std::size_t d : e.shape) {
            n *= d;
        }
        if (offset + n > ckpt.payload.size()) {
            throw std::runtime_error("checkpoint: payload shorter than declared entries");
        }
        bool found = false;
        if (e.kind == "param") {
            for (auto& p : params) {
                if (p.path == e.name) {
                    if (p.tensor.size() != n) {
                        throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
                    }
                    std::copy(ckpt.payload.begin() + offset, ckpt.payload.begin() + offset + n,
                              p.tensor.values().begin());
                    found = true;
                    break;
                }
            }
        } else {
            for (auto& b : buffers) {
                if (b.path == e.name) {
                    if (b.data->size() != n) {
                        throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
                    }
                    std::copy(ckpt.payload.begin() + offset, ckpt.payload.begin() + offset + n,
                              b.data->begin());
                    found = true;
                    break;
                }
            }
        }
        if (!found) {
            throw std::runtime_error("checkpoint: entry " + e.name +
                                     " does not match the model backbone");
        }
        offset += n;
    }
    if (offset != ckpt.payload.size()) {
        throw std::runtime_error("checkpoint: payload longer than declared entries");
    }
    for (const auto& m : ckpt.bn_meta) {
        bool found = false;
        for (auto& bn : model.backbone().batchnorm_layers()) {
            if (bn.layer_path == m.layer_path) {
                bn.bn->state.momentum = m.momentum;
                bn.bn->state.eps = m.eps;
                bn.bn->state.stats_mode =
                    m.update_stats ? StatsMode::UpdateStats : StatsMode::FrozenStats;
                bn.bn->state.affine_trainable = m.affine_trainable;
                found = true;
                break;
            }
        }
        if (!found) {
            throw std::runtime_error("checkpoint: unknown batchnorm layer " + m.layer_path);
        }
    }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.head_outputs == 0) {
        throw std::runtime_error(
            "checkpoint is backbone-only; use load_backbone_into_model with a fresh head");
    }
    Model model(ckpt.backbone_spec, ckpt.head_outputs, /*init_seed=*/0);

    std::size_t offset = 0;
    auto params = model.named_parameters();
    auto buffers = model.named_buffers();
    for (const auto& e : ckpt.entries) {
        std::size_t n = 1;
        for (std::size_t d : e.shape) {
            n *= d;
        }
        if (offset + n > ckpt.payload.size()) {
            throw std::runtime_error("checkpoint: payload shorter than declared entries");
        }
        bool found = false;
        if (e.kind == "param") {
            for (auto& p : params) {
                if (p.path == e.name) {
                    if (p.tensor.size() != n) {
                        throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
                    }
                    std::copy(ckpt.payload.begin() + offset, ckpt.payload.begin() + offset + n,
                              p.tensor.values().begin());
                    found = true;
                    break;
                }
            }
        } else {
            for (auto& b : buffers) {
                if (b.path == e.name) {
                    if (b.data->size() != n) {
                        throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
                    }
                    std::copy(ckpt.payload.begin() + offset, ckpt.payload.begin() + offset + n,
                              b.data->begin());
                    found = true;
                    break;
                }
            }
        }
        if (!found) {
            throw std::runtime_error("checkpoint: unknown entry " + e.name);
        }
        offset += n;
    }
    if (offset != ckpt.payload.size()) {
        throw std::runtime_error("checkpoint: payload longer than declared entries");
    }

    for (const auto& m : ckpt.bn_meta) {
        bool found = false;
        for (auto& bn : model.batchnorm_layers()) {
            if (bn.layer_path == m.layer_path) {
                bn.bn->state.momentum = m.momentum;
                bn.bn->state.eps = m.eps;
                bn.bn->state.stats_mode =
                    m.update_stats ? StatsMode::UpdateStats : StatsMode::FrozenStats;
                bn.bn->state.affine_trainable = m.affine_trainable;
                found = true;
                break;
            }
        }
        if (!found) {
            throw std::runtime_error("checkpoint: unknown batchnorm layer " + m.layer_path);
        }
    }
    return model;
}

std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt) {
    const std::string header = header_json(ckpt);
    std::vector<std::uint8_t> out;
    out.reserve(4 + header.size() + 8 * ckpt.payload.size());
    append_u32_le(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    for (double v : ckpt.payload) {
        append_f64_le(out, v);
    }
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const auto bytes = checkpoint_bytes(ckpt);
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open checkpoint file for writing: " + path);
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw std::runtime_error("failed writing checkpoint: " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open checkpoint file: " + path);
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 4) {
        throw std::runtime_error("checkpoint file truncated: " + path);
    }
    const std::uint32_t header_len = static_cast<std::uint32_t>(bytes[0]) |
                                     (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                     (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                     (static_cast<std::uint32_t>(bytes[3]) << 24);
    if (bytes.size() < 4 + static_cast<std::size_t>(header_len)) {
        throw std::runtime_error("checkpoint header truncated: " + path);
    }
    const std::string header(bytes.begin() + 4, bytes.begin() + 4 + header_len);
    OrderedJson j = OrderedJson::parse(header);
    if (j.at("format").get<std::string>() != "bnfair-checkpoint") {
        throw std::runtime_error("not a checkpoint file: " + path);
    }

    Checkpoint ckpt;
    ckpt.backbone_spec = spec_from_json(j.at("backbone"));
    ckpt.head_outputs = j.at("head_outputs").get<std::size_t>();
    for (const auto& je : j.at("entries")) {
        Checkpoint::Entry e;
        e.name = je.at("name").get<std::string>();
        e.kind = je.at("kind").get<std::string>();
        e.shape = je.at("shape").get<std::vector<std::size_t>>();
        ckpt.entries.push_back(std::move(e));
    }
    for (const auto& jm : j.at("batchnorm")) {
        Checkpoint::BnMeta m;
        m.layer_path = jm.at("layer").get<std::string>();
        m.momentum = jm.at("momentum").get<double>();
        m.eps = jm.at("eps").get<double>();
        m.update_stats = jm.at("stats_mode").get<std::string>() == "update";
        m.affine_trainable = jm.at("affine_trainable").get<bool>();
        ckpt.bn_meta.push_back(std::move(m));
    }

    const std::size_t payload_bytes = bytes.size() - 4 - header_len;
    if (payload_bytes % 8 != 0) {
        throw std::runtime_error("checkpoint payload not a multiple of 8 bytes: " + path);
    }
    ckpt.payload.resize(payload_bytes / 8);
    const std::uint8_t* p = bytes.data() + 4 + header_len;
    for (std::size_t i = 0; i < ckpt.payload.size(); ++i) {
        ckpt.payload[i] = read_f64_le(p + 8 * i);
    }
    return ckpt;
}

bool checkpoint_equal(const Checkpoint& a, const Checkpoint& b) {
    return checkpoint_bytes(a) == checkpoint_bytes(b);
}

}  // namespace bnfair
