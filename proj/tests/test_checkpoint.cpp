#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pasr/checkpoint.hpp"

#include <filesystem>
#include <fstream>

using namespace pasr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const char* name) {
  fs::path p = fs::temp_directory_path() / "pasr_ckpt_tests" / name;
  fs::remove_all(p);
  return p;
}

std::vector<ad::Parameter<float>> make_params(unsigned seed) {
  Rng rng(seed);
  std::vector<ad::Parameter<float>> ps;
  ps.emplace_back("enc.w1", random_normal<float>(4, 6, rng, 1.0));
  ps.emplace_back("enc.b1", random_normal<float>(1, 6, rng, 1.0));
  ps.emplace_back("dec.embed", random_normal<float>(9, 4, rng, 1.0));
  return ps;
}

std::vector<ad::Parameter<float>*> ptrs(std::vector<ad::Parameter<float>>& ps) {
  std::vector<ad::Parameter<float>*> out;
  for (auto& p : ps) out.push_back(&p);
  return out;
}

}  // namespace

TEST_CASE("checkpoint round-trips values and metadata bit-exactly") {
  fs::path dir = scratch("roundtrip");
  auto saved = make_params(1);
  nlohmann::json meta = {{"stage", "pretrain"}, {"dim", 6}};
  save_checkpoint(dir, ptrs(saved), meta);

  auto loaded = make_params(2);
  nlohmann::json got = load_checkpoint(dir, ptrs(loaded));
  CHECK(got == meta);
  for (size_t i = 0; i < saved.size(); ++i)
    CHECK(std::memcmp(saved[i].value.data(), loaded[i].value.data(),
                      saved[i].value.size() * sizeof(float)) == 0);
  CHECK(read_checkpoint_meta(dir) == meta);
}

TEST_CASE("missing parameter and shape mismatch are data errors") {
  fs::path dir = scratch("mismatch");
  auto saved = make_params(1);
  save_checkpoint(dir, ptrs(saved), {});

  auto extra = make_params(1);
  extra.emplace_back("new.layer", MatF::Zero(2, 2));
  CHECK_THROWS_AS(load_checkpoint(dir, ptrs(extra)), DataError);

  auto reshaped = make_params(1);
  reshaped[0].value.resize(6, 4);
  CHECK_THROWS_AS(load_checkpoint(dir, ptrs(reshaped)), DataError);
}

TEST_CASE("truncated blob is a format error") {
  fs::path dir = scratch("truncated");
  auto saved = make_params(1);
  save_checkpoint(dir, ptrs(saved), {});
  fs::resize_file(dir / "params.bin", 8);
  auto loaded = make_params(2);
  CHECK_THROWS_AS(load_checkpoint(dir, ptrs(loaded)), FormatError);
}

TEST_CASE("malformed manifest is a format error") {
  fs::path dir = scratch("badjson");
  fs::create_directories(dir);
  std::ofstream(dir / "manifest.json") << "{oops";
  std::ofstream(dir / "params.bin").put(0);
  auto loaded = make_params(1);
  CHECK_THROWS_AS(load_checkpoint(dir, ptrs(loaded)), FormatError);
  CHECK_THROWS_AS(read_checkpoint_meta(dir), FormatError);
}
