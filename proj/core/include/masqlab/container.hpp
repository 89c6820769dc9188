#pragma once

#include <map>
#include <string>
#include <vector>

#include "masqlab/tensor.hpp"

namespace masqlab {

// Tensor container file:
//   8-byte magic "MSQLORA1"
//   u64 little-endian header length
//   UTF-8 JSON header (space-padded so the payload starts 64-byte
//   aligned): "__metadata__" object of string values, plus one entry per
//   tensor: {"dtype":"f32","shape":[...],"offset":N,"length":N}. Offsets
//   are relative to the payload base and 64-byte aligned.
//   Raw little-endian float32 payloads.
//
// Serialization is canonical (sorted keys, offsets assigned in name
// order), so save -> load -> save is byte-identical.

struct TensorFileContents {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
    std::vector<std::string> warnings;  // unknown keys etc., load only
};

// canonical byte serialization (what save_tensor_file writes)
std::string serialize_tensor_file(const std::map<std::string, Tensor>& tensors,
                                  const std::map<std::string, std::string>& metadata);

void save_tensor_file(const std::string& path,
                      const std::map<std::string, Tensor>& tensors,
                      const std::map<std::string, std::string>& metadata);

TensorFileContents load_tensor_file(const std::string& path);

}  // namespace masqlab
