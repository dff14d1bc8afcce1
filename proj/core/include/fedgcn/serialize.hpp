#pragma once

#include <iosfwd>
#include <optional>
#include <string>

#include "fedgcn/federated.hpp"

namespace fedgcn {

/// Binary ParamVector encoding: a layout table (64-bit little-endian segment
/// count, then offset/length pairs) followed by the values as little-endian
/// 64-bit floats.
void serialize_params(const ParamVector& params, std::ostream& out);
ParamVector deserialize_params(std::istream& in);

struct Checkpoint {
  std::uint64_t round = 0;
  ParamVector params;
  std::optional<ParamVector> student;
  std::optional<ParamVector> teacher;
  Matrix adjacency;  // 0x0 when the model is not specialized
  std::vector<double> lambdas;
};

void save_checkpoint(const std::string& path, const ServerState& state);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fedgcn
