#include "cast/checkpoint.hpp"
#include "cast/hashing.hpp"
#include "support.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace cast;
using namespace cast::test;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cast_test_" + name)).string();
}

template <class Scalar>
bool same_values(const ParameterStore<Scalar>& a, const ParameterStore<Scalar>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].name != b[i].name || !bitwise_equal(a[i].value.data(), b[i].value.data())) return false;
  return true;
}

}  // namespace

TEST_CASE("hash primitives") {
  const std::string abc = "abc";
  CHECK(sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::string digits = "123456789";
  CHECK(crc32({reinterpret_cast<const std::uint8_t*>(digits.data()), digits.size()}) == 0xCBF43926u);
  CHECK(hex64(0xabcull) == "0000000000000abc");
}

TEST_CASE("checkpoint round trip") {
  CastModel<float> a(toy_config());
  randomize_learnable(a, 1);
  const std::string path = temp_path("ckpt.bin");
  save_checkpoint(a.params(), 0x1234, path);
  CastModel<float> b(toy_config());
  CHECK_FALSE(same_values(a.params(), b.params()));
  CHECK(load_checkpoint(b.params(), path) == 0x1234);
  CHECK(same_values(a.params(), b.params()));
  auto clip = random_clip<float>(a.config(), 2, 3);
  CHECK(bitwise_equal(logits(a, clip), logits(b, clip)));

  // A double model stores and restores values rounded to f32.
  CastModel<double> d(toy_config());
  CHECK(load_checkpoint(d.params(), path) == 0x1234);
  for (std::size_t i = 0; i < d.params().size(); ++i)
    for (Index k = 0; k < d.params()[i].value.size(); ++k)
      REQUIRE(d.params()[i].value[k] == static_cast<double>(a.params()[i].value[k]));
  std::remove(path.c_str());
}

TEST_CASE("encoding is byte-identical across equal builds") {
  CastModel<float> a(toy_config()), b(toy_config());
  CHECK(encode_checkpoint(a.params(), 7) == encode_checkpoint(b.params(), 7));
  CHECK(encode_checkpoint(a.params(), 7) != encode_checkpoint(a.params(), 8));
}

TEST_CASE("mismatched checkpoints name the parameter and leave the model untouched") {
  const std::string path = temp_path("ckpt_mismatch.bin");
  CastModel<float> src(toy_config("cast"));
  save_checkpoint(src.params(), 1, path);

  CastModel<float> other(toy_config("no_adapter"));
  randomize_learnable(other, 2);
  CastModel<float> before(toy_config("no_adapter"));
  randomize_learnable(before, 2);
  CHECK_THROWS_WITH_AS(load_checkpoint(other.params(), path), doctest::Contains(".bcast."), ConfigError);
  CHECK(same_values(other.params(), before.params()));

  CastConfig wide = toy_config("cast");
  wide.dim = 64;
  CastModel<float> w(wide);
  CHECK_THROWS_WITH_AS(load_checkpoint(w.params(), path), doctest::Contains("spatial.patch_embed.weight"), DimensionError);

  CastConfig deeper = toy_config("cast");
  deeper.depth = 3;
  CastModel<float> deep(deeper);
  CHECK_THROWS_WITH_AS(load_checkpoint(deep.params(), path), doctest::Contains("block3"), ConfigError);

  std::vector<char> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  bytes[bytes.size() / 2] ^= 0x10;
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CastModel<float> same(toy_config("cast"));
  CHECK_THROWS_WITH_AS(load_checkpoint(same.params(), path), doctest::Contains("CRC mismatch at offset"), FormatError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(same.params(), path), IoError);
}

TEST_CASE("frozen digest covers frozen parameters only") {
  CastModel<float> a(toy_config()), b(toy_config());
  const std::string d = frozen_digest(a.params());
  CHECK(d.size() == 64);
  CHECK(d == frozen_digest(b.params()));
  randomize_learnable(b, 4);
  CHECK(d == frozen_digest(b.params()));
  b.params().at("temporal.block2.mlp.fc1.weight").value[5] += 1e-3f;
  CHECK(d != frozen_digest(b.params()));

  CastModel<double> wide(toy_config());
  CHECK(frozen_digest(wide.params()).size() == 64);
}
