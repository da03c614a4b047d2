#include <doctest.h>

#include <filesystem>

#include "refsum/checkpoint.hpp"
#include "refsum/error.hpp"
#include "support.hpp"

using namespace refsum;
using namespace refsum::testing;

namespace {

AdamState some_adam(ModelParams& params) {
  std::mt19937_64 rng(3);
  for (Param* p : params.all()) p->grad = random_matrix(rng, p->value.rows(), p->value.cols());
  AdamState adam;
  adam_step(params.all(), adam, 1e-3);
  params.zero_grad();
  return adam;
}

}  // namespace

TEST_CASE("checkpoint round trip is byte exact") {
  auto params = init_params(tiny_config(), 1);
  const AdamState adam = some_adam(params);
  const std::string bytes = serialize_checkpoint(params, &adam, 17);
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back.step == 17);
  CHECK(back.params.config == params.config);
  CHECK(serialize_checkpoint(back.params, &back.adam, back.step) == bytes);

  std::vector<const Param*> a, b;
  params.for_each([&](const std::string&, const Param& p) { a.push_back(&p); });
  back.params.for_each([&](const std::string&, const Param& p) { b.push_back(&p); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
  REQUIRE(back.adam.m.size() == adam.m.size());
  CHECK(back.adam.step == adam.step);
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    CHECK(back.adam.m[i] == adam.m[i]);
    CHECK(back.adam.v[i] == adam.v[i]);
  }
}

TEST_CASE("checkpoint without optimizer state") {
  const auto params = init_params(tiny_config(), 2);
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(params, nullptr, 0));
  CHECK(back.adam.empty());
}

TEST_CASE("raw container round trip") {
  CheckpointFile f;
  f.config = tiny_config();
  f.step = 5;
  f.arrays.push_back({"x", {2, 3}, {1, 2, 3, 4, 5, -0.0}});
  f.arrays.push_back({"empty", {0}, {}});
  const std::string bytes = serialize(f);
  CHECK(bytes.substr(0, 8) == "REFSUMCK");
  const CheckpointFile g = parse(bytes);
  CHECK(g.step == 5);
  REQUIRE(g.arrays.size() == 2);
  CHECK(g.arrays[0].dims == std::vector<std::uint64_t>{2, 3});
  CHECK(std::signbit(g.arrays[0].data[5]));
  CHECK(serialize(g) == bytes);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto params = init_params(tiny_config(), 3);
  const std::string bytes = serialize_checkpoint(params, nullptr, 1);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(bad_magic), DataError);

  std::string bad_version = bytes;
  bad_version[8] = 9;
  CHECK_THROWS_AS(parse_checkpoint(bad_version), DataError);

  for (std::size_t cut : {std::size_t{0}, std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, cut)), DataError);
  }
  CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), DataError);
}

TEST_CASE("missing or misshapen arrays are rejected") {
  const auto params = init_params(tiny_config(), 4);
  CheckpointFile f = parse(serialize_checkpoint(params, nullptr, 1));
  CheckpointFile missing = f;
  missing.arrays.pop_back();
  CHECK_THROWS_AS(parse_checkpoint(serialize(missing)), DataError);
  CheckpointFile shape = f;
  shape.arrays.front().dims = {shape.arrays.front().dims[1], shape.arrays.front().dims[0]};
  if (shape.arrays.front().dims != f.arrays.front().dims) CHECK_THROWS_AS(parse_checkpoint(serialize(shape)), DataError);
}

TEST_CASE("checkpoint files on disk") {
  auto params = init_params(tiny_config(), 5);
  const AdamState adam = some_adam(params);
  const auto path = std::filesystem::temp_directory_path() / "refsum_ck_test.bin";
  save_checkpoint(path, params, &adam, 9);
  const Checkpoint back = load_checkpoint(path);
  CHECK(serialize_checkpoint(back.params, &back.adam, back.step) == serialize_checkpoint(params, &adam, 9));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
}

TEST_CASE("array checksums track content") {
  NamedArray a{"a", {2}, {1.0, 2.0}}, b = a;
  CHECK(array_checksum(a) == array_checksum(b));
  b.data[1] = 2.0000001;
  CHECK(array_checksum(a) != array_checksum(b));
  // FNV-1a offset basis for an empty payload
  CHECK(array_checksum(NamedArray{"e", {0}, {}}) == 0xcbf29ce484222325ull);
}
