#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnfair/layers.hpp"

namespace bnfair {

/// Bit-exact model snapshot. On disk: a little-endian u32 header length,
/// a JSON header (specs, tensor names, shapes, BN mode flags), then the
/// concatenated little-endian 64-bit float payload in header order.
struct Checkpoint {
    struct Entry {
        std::string name;
        std::string kind;  // "param" | "buffer"
        std::vector<std::size_t> shape;
    };
    struct BnMeta {
        std::string layer_path;
        double momentum = 0.1;
        double eps = 1e-5;
        bool update_stats = true;
        bool affine_trainable = true;
    };

    BackboneSpec backbone_spec;
    std::size_t head_outputs = 0;
    std::vector<Entry> entries;
    std::vector<BnMeta> bn_meta;
    std::vector<double> payload;
};

Checkpoint checkpoint_from_model(Model& model);
Model model_from_checkpoint(const Checkpoint& ckpt);

/// Backbone-only snapshot (head_outputs = 0), e.g. a pretraining artifact.
Checkpoint backbone_checkpoint(Backbone& backbone);

/// Copies the backbone entries of a checkpoint into an existing model; the
/// model's (fresh) head is left untouched.
void load_backbone_into_model(const Checkpoint& ckpt, Model& model);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Exact byte equality (header and payload).
bool checkpoint_equal(const Checkpoint& a, const Checkpoint& b);

std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt);

}  // namespace bnfair
