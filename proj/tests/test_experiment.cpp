#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pasr/experiment.hpp"
#include "pasr/jsonschema.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

using namespace pasr;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig mc;
  mc.encoder.input_dim = 6;
  mc.encoder.d_model = 8;
  mc.encoder.n_layers = 1;
  mc.encoder.heads = 2;
  mc.encoder.d_ff = 16;
  mc.encoder.block_len = 2;
  mc.decoder.d_model = 8;
  mc.decoder.n_layers = 1;
  mc.decoder.heads = 2;
  mc.decoder.d_ff = 16;
  mc.decoder.max_prompts = 64;
  mc.decoder.max_tokens = 16;
  return mc;
}

// a saved corpus plus two full-scope checkpoints, enough for a grid run
struct Workspace {
  fs::path root;
  std::string corpus_dir, prefix_dir, full_dir;

  explicit Workspace(const std::string& name) {
    root = fs::temp_directory_path() / "pasr_experiment_tests" / name;
    fs::remove_all(root);
    fs::create_directories(root);

    CorpusConfig cc;
    cc.vocab_size = 4;
    cc.feature_dim = 6;
    cc.dur_min = 4;
    cc.dur_max = 8;
    cc.len_min = 2;
    cc.len_max = 4;
    cc.train_utterances = 4;
    cc.dev_utterances = 2;
    cc.test_utterances = 6;
    cc.lm_train_sentences = 4;
    cc.lm_dev_sentences = 2;
    auto gen = generate_corpus(cc, 11);
    corpus_dir = (root / "corpus").string();
    save_corpus(gen.corpus, corpus_dir);

    prefix_dir = save_random_model("prefix", 21);
    full_dir = save_random_model("full", 22);
  }

  std::string save_random_model(const std::string& name, unsigned seed) {
    AsrModel<float> model;
    model.init(tiny_cfg(), 4, seed);
    const std::string dir = (root / name).string();
    save_model(dir, model, "all");
    return dir;
  }
};

nlohmann::json base_manifest(const Workspace& ws) {
  return {{"corpus", ws.corpus_dir},
          {"models", {{"prefix", ws.prefix_dir}, {"full", ws.full_dir}}},
          {"variants", {"both", "ctc"}},
          {"modes", {"stream", "batch"}},
          {"beam", 2},
          {"prefilter", 2},
          {"limit", 4},
          {"threads", 2},
          {"seed", 3}};
}

const CellResult* find_cell(const ExperimentReport& rep,
                            const std::string& scheme,
                            const std::string& variant,
                            const std::string& mode) {
  for (const auto& c : rep.cells)
    if (c.scheme == scheme && c.variant == variant && c.mode == mode)
      return &c;
  return nullptr;
}

}  // namespace

TEST_CASE("manifest parsing rejects malformed requests") {
  nlohmann::json good = {{"corpus", "c"},
                         {"models", {{"prefix", "m"}}},
                         {"modes", {"stream"}}};
  auto m = ExperimentManifest::from_json(good);
  CHECK(m.corpus == "c");
  CHECK(m.models.at("prefix") == "m");
  CHECK(m.variants == std::vector<std::string>{"both"});
  CHECK(m.modes == std::vector<std::string>{"stream"});

  auto bad = good;
  bad["schemme"] = 1;
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
  bad = good;
  bad["variants"] = {"bothh"};
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
  bad = good;
  bad["modes"] = {"streaming"};
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
  bad = good;
  bad["models"] = 4;
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
  bad = good;
  bad["models"] = nlohmann::json::object();
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
  bad = good;
  bad["threads"] = 0;
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
  bad = good;
  bad["limit"] = -1;
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
  bad = good;
  bad["beam"] = 0;
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);

  CHECK_THROWS_AS(ExperimentManifest::from_file("/nonexistent/mani.json"),
                  DataError);
}

TEST_CASE("grid runs every requested cell and reproduces itself") {
  Workspace ws("grid");
  auto m = ExperimentManifest::from_json(base_manifest(ws));
  auto rep = run_experiment(m);

  CHECK(rep.cells.size() == 8);
  CHECK(rep.utterances == 4);
  REQUIRE(find_cell(rep, "prefix", "both", "stream") != nullptr);
  REQUIRE(find_cell(rep, "full", "ctc", "batch") != nullptr);
  for (const auto& c : rep.cells) {
    CHECK(c.utterances == 4);
    CHECK(c.wer.ref_len > 0);
    CHECK(c.rtf_p50 > 0);
    CHECK(c.ep50_s >= 0);
  }

  SUBCASE("same request, same error counts") {
    auto again = run_experiment(m);
    REQUIRE(again.cells.size() == rep.cells.size());
    for (size_t i = 0; i < rep.cells.size(); ++i) {
      CHECK(again.cells[i].scheme == rep.cells[i].scheme);
      CHECK(again.cells[i].variant == rep.cells[i].variant);
      CHECK(again.cells[i].mode == rep.cells[i].mode);
      CHECK(again.cells[i].wer.substitutions == rep.cells[i].wer.substitutions);
      CHECK(again.cells[i].wer.deletions == rep.cells[i].wer.deletions);
      CHECK(again.cells[i].wer.insertions == rep.cells[i].wer.insertions);
      CHECK(again.cells[i].wer.ref_len == rep.cells[i].wer.ref_len);
      CHECK(again.cells[i].wer.rate() == rep.cells[i].wer.rate());
    }
  }

  SUBCASE("worker count does not change the merged counts") {
    auto serial = m;
    serial.threads = 1;
    auto rep1 = run_experiment(serial);
    REQUIRE(rep1.cells.size() == rep.cells.size());
    for (size_t i = 0; i < rep.cells.size(); ++i) {
      CHECK(rep1.cells[i].wer.substitutions == rep.cells[i].wer.substitutions);
      CHECK(rep1.cells[i].wer.deletions == rep.cells[i].wer.deletions);
      CHECK(rep1.cells[i].wer.insertions == rep.cells[i].wer.insertions);
    }
  }

  SUBCASE("report validates against the published schema file") {
    const std::string path =
        std::string(PASR_SCHEMA_DIR) + "/experiment_report.schema.json";
    std::ifstream f(path);
    REQUIRE(f.good());
    nlohmann::json published;
    f >> published;
    CHECK(published == experiment_report_schema());
    CHECK_NOTHROW(check_schema(published, rep.to_json()));
  }

  SUBCASE("the table lists one row per cell") {
    const std::string t = rep.table();
    CHECK(t.find("WER") != std::string::npos);
    CHECK(t.find("prefix") != std::string::npos);
    CHECK(t.find("batch") != std::string::npos);
  }
}

TEST_CASE("missing artifacts raise errors naming the path") {
  Workspace ws("missing");
  auto mani = base_manifest(ws);
  mani["models"]["prefix"] = (ws.root / "nope").string();
  auto m = ExperimentManifest::from_json(mani);
  CHECK_THROWS_WITH_AS(run_experiment(m), doctest::Contains("nope"),
                       DataError);

  mani = base_manifest(ws);
  mani["corpus"] = (ws.root / "nocorpus").string();
  m = ExperimentManifest::from_json(mani);
  CHECK_THROWS_WITH_AS(run_experiment(m), doctest::Contains("nocorpus"),
                       DataError);

  AsrModel<float> enc_only;
  enc_only.init(tiny_cfg(), 4, 9);
  const std::string enc_dir = (ws.root / "enc_only").string();
  save_model(enc_dir, enc_only, "encoder");
  CHECK_THROWS_WITH_AS(load_full_model(enc_dir), doctest::Contains("scope"),
                       DataError);
}

TEST_CASE("schema checker pinpoints violations") {
  auto schema = nlohmann::json::parse(R"({
    "type": "object",
    "required": ["a"],
    "additionalProperties": false,
    "properties": {
      "a": {"type": "array", "minItems": 2,
            "items": {"type": "integer", "minimum": 0}},
      "tag": {"type": "string", "enum": ["x", "y"]}
    }
  })");
  using nlohmann::json;
  CHECK_NOTHROW(check_schema(schema, json::parse(R"({"a": [1, 2]})")));
  CHECK_NOTHROW(check_schema(schema, json::parse(R"({"a": [0, 3], "tag": "y"})")));
  CHECK_THROWS_WITH_AS(check_schema(schema, json::parse(R"({})")),
                       doctest::Contains("required"), FormatError);
  CHECK_THROWS_WITH_AS(check_schema(schema, json::parse(R"({"a": [1]})")),
                       doctest::Contains("$.a"), FormatError);
  CHECK_THROWS_WITH_AS(check_schema(schema, json::parse(R"({"a": [1, -2]})")),
                       doctest::Contains("$.a[1]"), FormatError);
  CHECK_THROWS_WITH_AS(check_schema(schema, json::parse(R"({"a": [1, 2.5]})")),
                       doctest::Contains("integer"), FormatError);
  CHECK_THROWS_WITH_AS(
      check_schema(schema, json::parse(R"({"a": [1, 2], "b": 3})")),
      doctest::Contains("unexpected key 'b'"), FormatError);
  CHECK_THROWS_WITH_AS(
      check_schema(schema, json::parse(R"({"a": [1, 2], "tag": "z"})")),
      doctest::Contains("allowed"), FormatError);
  CHECK_THROWS_WITH_AS(check_schema(schema, json::parse("[]")),
                       doctest::Contains("expected object"), FormatError);
}

TEST_CASE("median interpolates even-sized samples") {
  CHECK(median({3.0}) == 3.0);
  CHECK(median({5.0, 1.0, 3.0}) == 3.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == doctest::Approx(2.5));
  CHECK_THROWS_AS(median({}), ContractError);
}
