#pragma once

// Checkpoint container. All integers and floats are little-endian.
//
//   bytes 0..7   magic "SAMEDIFF"
//   u32          format version (currently 1)
//   u32 + bytes  metadata, UTF-8 JSON text
//   u32          tensor count
//   per tensor:
//     u32 + bytes  name
//     u32          rank
//     i32 * rank   dims
//     f32 * numel  values, row-major
//
// Optimizer state is stored as ordinary tensors named "adam.m.<param>" and
// "adam.v.<param>", with the step counter in the metadata key "adam_t".

#include <map>
#include <string>

#include "samediff/nn/optim.hpp"

namespace samediff::nn {

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'M', 'E', 'D', 'I', 'F', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string metadata = "{}";
  std::map<std::string, Tensor> tensors;
  bool operator==(const Checkpoint& o) const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::string& bytes);  // throws std::runtime_error
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Packs parameters (prefixed) and optionally Adam state into ck.
void store_parameters(Checkpoint& ck, const std::string& prefix, const NamedParams& params);
void load_parameters(const Checkpoint& ck, const std::string& prefix, const NamedParams& params);
void store_optimizer(Checkpoint& ck, const std::string& prefix, const Adam& adam);
void load_optimizer(const Checkpoint& ck, const std::string& prefix, Adam& adam);

}  // namespace samediff::nn
