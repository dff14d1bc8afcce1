#include "fedgcn/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fedgcn {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace {

constexpr std::uint64_t kCheckpointMagic = 0x31544b4347444546ull;  // "FEDGCKT1"

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw IoError("unexpected end of stream");
  return v;
}

void write_doubles(std::ostream& out, const double* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::istream& in, double* p, std::size_t n) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("unexpected end of stream");
}

}  // namespace

void serialize_params(const ParamVector& params, std::ostream& out) {
  write_u64(out, params.layout.size());
  for (const auto& seg : params.layout) {
    write_u64(out, seg.offset);
    write_u64(out, seg.length);
  }
  write_doubles(out, params.values.data(), params.values.size());
  if (!out) throw IoError("failed writing parameter vector");
}

ParamVector deserialize_params(std::istream& in) {
  ParamVector p;
  const std::uint64_t segments = read_u64(in);
  p.layout.resize(segments);
  std::size_t total = 0;
  for (auto& seg : p.layout) {
    seg.offset = read_u64(in);
    seg.length = read_u64(in);
    total += seg.length;
  }
  p.values.resize(total);
  read_doubles(in, p.values.data(), total);
  p.validate();
  return p;
}

void save_checkpoint(const std::string& path, const ServerState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  write_u64(out, kCheckpointMagic);
  write_u64(out, state.round);
  write_u64(out, state.clustering.has_value() ? 1 : 0);
  serialize_params(state.params, out);
  if (state.clustering.has_value()) {
    serialize_params(state.clustering->state.student, out);
    serialize_params(state.clustering->state.teacher, out);
  }
  const auto d = static_cast<std::uint64_t>(state.adjacency.rows());
  write_u64(out, d);
  if (d > 0) write_doubles(out, state.adjacency.data(), d * d);
  const auto lambdas = state.model.specialized()
                           ? state.model.lambdas(state.params)
                           : std::vector<double>{};
  write_u64(out, lambdas.size());
  if (!lambdas.empty()) write_doubles(out, lambdas.data(), lambdas.size());
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  if (read_u64(in) != kCheckpointMagic) {
    throw IoError("not a checkpoint file: " + path);
  }
  Checkpoint ck;
  ck.round = read_u64(in);
  const bool has_clustering = read_u64(in) != 0;
  ck.params = deserialize_params(in);
  if (has_clustering) {
    ck.student = deserialize_params(in);
    ck.teacher = deserialize_params(in);
  }
  const std::uint64_t d = read_u64(in);
  ck.adjacency = Matrix::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  if (d > 0) read_doubles(in, ck.adjacency.data(), d * d);
  const std::uint64_t l = read_u64(in);
  ck.lambdas.resize(l);
  if (l > 0) read_doubles(in, ck.lambdas.data(), l);
  return ck;
}

}  // namespace fedgcn
