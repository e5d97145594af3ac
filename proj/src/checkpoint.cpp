#include "cast/checkpoint.hpp"

#include "cast/binary_io.hpp"
#include "cast/hashing.hpp"

#include <unordered_set>

namespace cast {

namespace {
constexpr std::string_view kMagic("CASTCKPT\x01", 9);
}

template <class Scalar>
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore<Scalar>& store, std::uint64_t config_hash) {
  ByteWriter w;
  w.text(kMagic);
  w.put<std::uint64_t>(config_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p->name.size()));
    w.text(p->name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p->value.rank()));
    for (Index d : p->value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<std::uint8_t>(p->frozen ? 1 : 0);
    for (Index i = 0; i < p->value.size(); ++i) w.put<float>(static_cast<float>(p->value[i]));
  }
  w.seal();
  return w.buffer();
}

template <class Scalar>
void save_checkpoint(const ParameterStore<Scalar>& store, std::uint64_t config_hash, const std::string& path) {
  ByteWriter::write_file(path, encode_checkpoint(store, config_hash));
}

template <class Scalar>
std::uint64_t load_checkpoint(ParameterStore<Scalar>& store, const std::string& path) {
  ByteReader r(ByteReader::load(path), "checkpoint '" + path + "'");
  r.open(kMagic);
  const auto hash = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  std::unordered_set<std::string> seen;
  // Values are staged so a failed load leaves the store untouched.
  std::vector<std::pair<Parameter<Scalar>*, Vector<Scalar>>> staged;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t at = r.offset();
    const auto len = r.get<std::uint32_t>();
    if (len > r.remaining()) r.fail("name length out of range", at);
    const std::string name = r.text(len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) r.fail("rank out of range for '" + name + "'", at);
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const bool frozen = r.get<std::uint8_t>() != 0;
    if (seen.count(name)) r.fail("duplicate record '" + name + "'", at);
    auto* p = store.find(name);
    if (!p) throw ConfigError("checkpoint parameter '" + name + "' does not exist in the model");
    if (p->value.shape() != shape)
      throw DimensionError("checkpoint parameter '" + name + "' has shape " + shape_string(shape) +
                           ", model expects " + shape_string(p->value.shape()));
    if (p->frozen != frozen)
      throw DimensionError("checkpoint parameter '" + name + "' frozen flag differs from the model");
    Vector<Scalar> values(numel(shape));
    for (Index i = 0; i < values.size(); ++i) values[i] = static_cast<Scalar>(r.get<float>());
    seen.insert(name);
    staged.emplace_back(p, std::move(values));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after last record", r.offset());
  for (const auto& p : store)
    if (!seen.count(p->name)) throw ConfigError("checkpoint lacks model parameter '" + p->name + "'");
  for (auto& [p, values] : staged) p->value.data() = std::move(values);
  return hash;
}

template <class Scalar>
std::string frozen_digest(const ParameterStore<Scalar>& store) {
  Sha256 sha;
  for (const auto& p : store) {
    if (!p->frozen) continue;
    sha.update(p->name);
    sha.update(shape_string(p->value.shape()));
    sha.update(p->value.ptr(), sizeof(Scalar) * static_cast<std::size_t>(p->value.size()));
  }
  return sha.hex_digest();
}

#define CAST_INSTANTIATE_CHECKPOINT(S)                                                                    \
  template std::vector<std::uint8_t> encode_checkpoint<S>(const ParameterStore<S>&, std::uint64_t);      \
  template void save_checkpoint<S>(const ParameterStore<S>&, std::uint64_t, const std::string&);        \
  template std::uint64_t load_checkpoint<S>(ParameterStore<S>&, const std::string&);                 \
  template std::string frozen_digest<S>(const ParameterStore<S>&);

CAST_INSTANTIATE_CHECKPOINT(float)
CAST_INSTANTIATE_CHECKPOINT(double)

}  // namespace cast
