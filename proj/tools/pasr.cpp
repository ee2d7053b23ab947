// Command-line entry point: corpus generation, the three training stages,
// decoding, scoring, the latency/compression bench, and the experiment
// grid. A JSON config file supplies section-scoped settings:
//   corpus: synthesis parameters
//   model:  encoder/decoder extents
//   train:  optimization settings
//   search: decode fusion settings
// Flags given on the command line win over the config file. Exit codes:
// 0 success, 2 configuration error, 3 data or artifact error.
//
// Reported "WER" numbers are token error rates: every synthetic token
// counts as one word.

#include "pasr/experiment.hpp"
#include "pasr/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

using nlohmann::json;
using namespace pasr;

struct Global {
  unsigned seed = 1;
  int threads = 1;
  std::string config_path;

  json section(const std::string& name) const {
    if (config_path.empty()) return json::object();
    std::ifstream f(config_path);
    if (!f) throw DataError("config file '" + config_path + "' not found");
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + config_path + "': " + e.what());
    }
    if (!j.is_object())
      throw ConfigError("config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
      (void)value;
      if (key != "corpus" && key != "model" && key != "train" &&
          key != "search")
        throw ConfigError("unknown config section '" + key + "'");
    }
    return j.value(name, json::object());
  }
};

json names_of(const Vocabulary& vocab, const std::vector<int>& ids) {
  json arr = json::array();
  for (int id : ids) arr.push_back(vocab.content_name(id));
  return arr;
}

std::vector<const Utterance*> pick_split(const Corpus& corpus,
                                         const std::string& corpus_dir,
                                         const std::string& split, int limit) {
  const auto& all = corpus.split(split);
  std::vector<const Utterance*> utts;
  for (const auto& u : all) {
    if (limit > 0 && static_cast<int>(utts.size()) >= limit) break;
    utts.push_back(&u);
  }
  if (utts.empty())
    throw DataError("split '" + split + "' of '" + corpus_dir + "' is empty");
  return utts;
}

void require_matching_vocab(const AsrModel<float>& model, const Corpus& corpus,
                            const std::string& model_dir) {
  if (model.vocab != corpus.vocab.content_size())
    throw DataError("model at '" + model_dir + "' was trained with " +
                    std::to_string(model.vocab) + " tokens, corpus has " +
                    std::to_string(corpus.vocab.content_size()));
}

json train_summary(const std::string& checkpoint, const TrainReport& rep) {
  return {{"checkpoint", checkpoint},
          {"steps", rep.steps},
          {"skipped", rep.skipped_total},
          {"final_train_loss", rep.final_train_loss},
          {"final_dev_metric", rep.final_dev_metric}};
}

void cmd_gen_data(const Global& g, const std::string& out) {
  CorpusConfig cc = CorpusConfig::from_json(g.section("corpus"));
  auto gen = generate_corpus(cc, g.seed);
  save_corpus(gen.corpus, out);
  json summary = {{"corpus", out},
                  {"vocab", gen.corpus.vocab.content_size()},
                  {"train", gen.corpus.train.size()},
                  {"dev", gen.corpus.dev.size()},
                  {"test", gen.corpus.test.size()},
                  {"lm_train", gen.corpus.lm_train.size()},
                  {"lm_dev", gen.corpus.lm_dev.size()}};
  std::cout << summary.dump(2) << "\n";
}

void cmd_pretrain_encoder(const Global& g, const std::string& corpus_dir,
                          const std::string& out, const std::string& metrics,
                          bool seed_given) {
  Corpus corpus = load_corpus(corpus_dir);
  ModelConfig mc = ModelConfig::from_json(g.section("model"));
  const int feat_dim = static_cast<int>(
      corpus.split("train").empty() ? mc.encoder.input_dim
                                    : corpus.train[0].features.cols());
  if (mc.encoder.input_dim != feat_dim)
    throw ConfigError("model.encoder.input_dim " +
                      std::to_string(mc.encoder.input_dim) +
                      " does not match corpus feature dimension " +
                      std::to_string(feat_dim));
  TrainConfig tc;
  tc.apply_json(g.section("train"));
  if (seed_given) tc.seed = g.seed;
  AsrModel<float> model;
  model.init(mc, corpus.vocab.content_size(), tc.seed);
  TrainReport rep = pretrain_encoder(model, corpus, tc, MetricsLog(metrics));
  save_model(out, model, "encoder");
  std::cout << train_summary(out, rep).dump(2) << "\n";
}

void cmd_pretrain_lm(const Global& g, const std::string& corpus_dir,
                     const std::string& out, const std::string& metrics,
                     bool seed_given) {
  Corpus corpus = load_corpus(corpus_dir);
  TextCorpus text{corpus.lm_train, corpus.lm_dev, MatD(), MatD()};
  if (text.train.empty())
    throw DataError("corpus at '" + corpus_dir + "' has no lm sentences");
  ModelConfig mc = ModelConfig::from_json(g.section("model"));
  TrainConfig tc;
  tc.apply_json(g.section("train"));
  if (seed_given) tc.seed = g.seed;
  AsrModel<float> model;
  model.init(mc, corpus.vocab.content_size(), tc.seed);
  TrainReport rep = pretrain_lm(model, text, tc, MetricsLog(metrics));
  save_model(out, model, "decoder");
  std::cout << train_summary(out, rep).dump(2) << "\n";
}

void cmd_finetune(const Global& g, const std::string& corpus_dir,
                  const std::string& enc_ckpt, const std::string& lm_ckpt,
                  const std::string& out, const std::string& scheme,
                  const std::string& variant, const std::string& metrics,
                  bool seed_given) {
  Corpus corpus = load_corpus(corpus_dir);
  ModelConfig mc;
  const json model_section = g.section("model");
  if (!model_section.empty()) {
    mc = ModelConfig::from_json(model_section);
  } else {
    // architecture comes from the stage checkpoints: encoder extents from
    // the encoder stage, decoder extents from the LM stage
    json emeta = read_checkpoint_meta(enc_ckpt);
    if (!emeta.contains("model"))
      throw FormatError("checkpoint at '" + enc_ckpt + "' lacks model metadata");
    mc = ModelConfig::from_json(emeta["model"]);
    json lmeta = read_checkpoint_meta(lm_ckpt);
    if (lmeta.contains("model"))
      mc.decoder = ModelConfig::from_json(lmeta["model"]).decoder;
  }
  TrainConfig tc;
  tc.apply_json(g.section("train"));
  if (!scheme.empty()) tc.scheme = train_scheme_from_string(scheme);
  if (!variant.empty()) tc.variant = prompt_variant_from_string(variant);
  if (seed_given) tc.seed = g.seed;
  AsrModel<float> model;
  model.init(mc, corpus.vocab.content_size(), tc.seed);
  load_model(enc_ckpt, model);
  load_model(lm_ckpt, model);
  TrainReport rep = finetune(model, corpus, tc, MetricsLog(metrics));
  save_model(out, model, "all");
  std::cout << train_summary(out, rep).dump(2) << "\n";
}

void cmd_decode(const Global& g, const std::string& model_dir,
                const std::string& corpus_dir, const std::string& out,
                const std::string& mode, const std::string& variant,
                const std::string& split, int limit, const SearchConfig& scfg) {
  AsrModel<float> model = load_full_model(model_dir);
  Corpus corpus = load_corpus(corpus_dir);
  require_matching_vocab(model, corpus, model_dir);
  model.prompt.variant = prompt_variant_from_string(variant);
  auto utts = pick_split(corpus, corpus_dir, split, limit);
  auto results = decode_split(model, utts, mode, scfg, g.threads);

  std::ofstream file;
  if (!out.empty()) {
    file.open(out);
    if (!file) throw DataError("cannot write decode output to '" + out + "'");
  }
  std::ostream& os = out.empty() ? std::cout : file;

  std::vector<std::vector<int>> refs, hyps;
  std::vector<double> rtf, ep;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& r = results[i];
    json emissions = json::array();
    for (const auto& em : r.timeline)
      emissions.push_back({{"token", corpus.vocab.content_name(em.token)},
                           {"block", em.block},
                           {"time_s", em.time_s}});
    json line = {{"utterance_id", utts[i]->utterance_id},
                 {"hypothesis", names_of(corpus.vocab, r.hypothesis)},
                 {"reference", names_of(corpus.vocab, utts[i]->transcript)},
                 {"emissions", emissions},
                 {"rtf", r.rtf},
                 {"ep_latency_s", r.ep_latency_s}};
    os << line.dump() << "\n";
    refs.push_back(utts[i]->transcript);
    hyps.push_back(r.hypothesis);
    rtf.push_back(r.rtf);
    ep.push_back(r.ep_latency_s);
  }
  auto wer = error_rate(refs, hyps);
  std::cerr << "decoded " << utts.size() << " utterances (" << mode
            << "): token error rate " << wer.rate() << ", rtf_p50 "
            << median(rtf) << ", ep50_s " << median(ep) << "\n";
}

void cmd_eval(const std::string& hyp_file) {
  std::ifstream f(hyp_file);
  if (!f) throw DataError("decode output '" + hyp_file + "' not found");
  std::map<std::string, int> intern;
  auto to_ids = [&](const json& arr, int lineno) {
    if (!arr.is_array())
      throw FormatError(hyp_file + ":" + std::to_string(lineno) +
                        ": token list must be an array of strings");
    std::vector<int> ids;
    for (const auto& t : arr) {
      if (!t.is_string())
        throw FormatError(hyp_file + ":" + std::to_string(lineno) +
                          ": token list must be an array of strings");
      ids.push_back(
          intern.emplace(t.get<std::string>(), static_cast<int>(intern.size()))
              .first->second);
    }
    return ids;
  };
  std::vector<std::vector<int>> refs, hyps;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(hyp_file + ":" + std::to_string(lineno) + ": " +
                        e.what());
    }
    if (!j.contains("hypothesis") || !j.contains("reference"))
      throw FormatError(hyp_file + ":" + std::to_string(lineno) +
                        ": needs hypothesis and reference fields");
    hyps.push_back(to_ids(j["hypothesis"], lineno));
    refs.push_back(to_ids(j["reference"], lineno));
  }
  if (refs.empty()) throw DataError("no utterances in '" + hyp_file + "'");
  auto rep = error_rate(refs, hyps);
  json out = {{"metric", "token_error_rate"},
              {"utterances", refs.size()},
              {"substitutions", rep.substitutions},
              {"deletions", rep.deletions},
              {"insertions", rep.insertions},
              {"reference_length", rep.ref_len},
              {"rate", rep.rate()}};
  std::cout << out.dump(2) << "\n";
}

void cmd_bench(const Global& g, const std::string& model_dir,
               const std::string& corpus_dir, const std::string& split,
               int limit, const std::string& variant,
               const SearchConfig& scfg, const std::string& out) {
  AsrModel<float> model = load_full_model(model_dir);
  Corpus corpus = load_corpus(corpus_dir);
  require_matching_vocab(model, corpus, model_dir);
  model.prompt.variant = prompt_variant_from_string(variant);
  auto utts = pick_split(corpus, corpus_dir, split, limit);

  std::vector<Utterance> subset;
  subset.reserve(utts.size());
  for (const auto* u : utts) subset.push_back(*u);
  LatencyReport lat = measure(model, subset, scfg);

  // prompt compression: how many grid frames survive the greedy CTC filter
  double kept_sum = 0, frame_sum = 0;
  for (const auto* u : utts) {
    ad::Tape<float> tape(false);
    const auto plan = model.plan_for(static_cast<int>(u->features.rows()));
    auto enc = model.encoder.encode_utterance(tape, u->features, plan);
    auto grid = model.posterior_grid(enc.h.value());
    for (int z : ctc::greedy_decode(grid).z)
      if (z != ctc::kBlank) kept_sum += 1;
    frame_sum += plan.total_sub;
  }
  const double n = static_cast<double>(utts.size());
  json report = {{"utterances", utts.size()},
                 {"rtf_p50", lat.rtf_p50},
                 {"rtf_p90", lat.rtf_p90},
                 {"ep50_s", lat.ep50_s},
                 {"ep90_s", lat.ep90_s},
                 {"mean_ctc_prompts", kept_sum / n},
                 {"mean_grid_frames", frame_sum / n},
                 {"prompt_to_frame_ratio",
                  frame_sum > 0 ? kept_sum / frame_sum : 0.0}};
  if (!out.empty()) {
    std::ofstream file(out);
    if (!file) throw DataError("cannot write bench report to '" + out + "'");
    file << report.dump(2) << "\n";
  }
  std::cout << report.dump(2) << "\n";
}

void cmd_run_experiment(const Global& g, const std::string& manifest,
                        const std::string& out, bool seed_given,
                        bool threads_given) {
  auto m = ExperimentManifest::from_file(manifest);
  if (seed_given) m.seed = g.seed;
  if (threads_given) m.threads = g.threads;
  auto rep = run_experiment(m);
  const json j = rep.to_json();
  if (!out.empty()) {
    std::ofstream file(out);
    if (!file)
      throw DataError("cannot write experiment report to '" + out + "'");
    file << j.dump(2) << "\n";
  } else {
    std::cout << j.dump(2) << "\n";
  }
  std::cout << rep.table();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blockwise streaming speech recognition with prompted decoding"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "global random seed")
      ->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads for decoding")
      ->capture_default_str();
  app.add_option("--config", g.config_path, "JSON configuration file");

  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->fallthrough();
    return s;
  };

  auto* gen = sub("gen-data", "generate and save the synthetic corpus");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output corpus directory")->required();

  auto* pe = sub("pretrain-encoder", "train the blockwise encoder with CTC");
  std::string pe_corpus, pe_out, pe_metrics;
  pe->add_option("--corpus", pe_corpus, "corpus directory")->required();
  pe->add_option("--out", pe_out, "checkpoint directory")->required();
  pe->add_option("--metrics", pe_metrics, "JSONL metrics log");

  auto* pl = sub("pretrain-lm", "train the decoder on text alone");
  std::string pl_corpus, pl_out, pl_metrics;
  pl->add_option("--corpus", pl_corpus, "corpus directory")->required();
  pl->add_option("--out", pl_out, "checkpoint directory")->required();
  pl->add_option("--metrics", pl_metrics, "JSONL metrics log");

  auto* ft = sub("finetune", "joint training from the two stage checkpoints");
  std::string ft_corpus, ft_enc, ft_lm, ft_out, ft_scheme, ft_variant,
      ft_metrics;
  ft->add_option("--corpus", ft_corpus, "corpus directory")->required();
  ft->add_option("--encoder", ft_enc, "encoder stage checkpoint")->required();
  ft->add_option("--lm", ft_lm, "LM stage checkpoint")->required();
  ft->add_option("--out", ft_out, "checkpoint directory")->required();
  ft->add_option("--scheme", ft_scheme, "prompt masking scheme")
      ->check(CLI::IsMember({"full", "forced-align", "forced_align", "prefix"}));
  ft->add_option("--variant", ft_variant, "prompt variant")
      ->check(CLI::IsMember({"ctc", "context", "both"}));
  ft->add_option("--metrics", ft_metrics, "JSONL metrics log");

  auto* de = sub("decode", "decode a corpus split to JSON lines");
  std::string de_model, de_corpus, de_out, de_mode = "stream",
                                           de_variant = "both",
                                           de_split = "test";
  int de_limit = 0, de_beam = 0, de_prefilter = 0;
  double de_lctc = 0, de_ldec = 0, de_llm = 0, de_lp = 0, de_sleep = 0,
         de_period = 0;
  de->add_option("--model", de_model, "fine-tuned checkpoint")->required();
  de->add_option("--corpus", de_corpus, "corpus directory")->required();
  de->add_option("--out", de_out, "output JSONL file (stdout when omitted)");
  de->add_option("--mode", de_mode, "stream or batch")
      ->check(CLI::IsMember({"stream", "batch"}))
      ->capture_default_str();
  de->add_option("--variant", de_variant, "prompt variant")
      ->check(CLI::IsMember({"ctc", "context", "both"}))
      ->capture_default_str();
  de->add_option("--split", de_split, "corpus split")->capture_default_str();
  de->add_option("--limit", de_limit, "max utterances, 0 for all");
  de->add_option("--beam", de_beam, "beam width");
  de->add_option("--prefilter", de_prefilter, "extensions kept per frame");
  de->add_option("--lambda-ctc", de_lctc, "prefix score weight");
  de->add_option("--lambda-dec", de_ldec, "decoder score weight");
  de->add_option("--lambda-lm", de_llm, "external LM weight");
  de->add_option("--length-penalty", de_lp, "per-token score bonus");
  de->add_option("--block-sleep-ms", de_sleep, "simulated cost per block");
  de->add_option("--frame-period-ms", de_period, "audio frame period");

  auto* ev = sub("eval", "score a decode output file");
  std::string ev_hyp;
  ev->add_option("--hyp", ev_hyp, "decode JSONL file")->required();

  auto* be = sub("bench", "latency and prompt-compression report");
  std::string be_model, be_corpus, be_split = "test", be_variant = "both",
                                   be_out;
  int be_limit = 0;
  double be_sleep = 0;
  be->add_option("--model", be_model, "fine-tuned checkpoint")->required();
  be->add_option("--corpus", be_corpus, "corpus directory")->required();
  be->add_option("--split", be_split, "corpus split")->capture_default_str();
  be->add_option("--limit", be_limit, "max utterances, 0 for all");
  be->add_option("--variant", be_variant, "prompt variant")
      ->check(CLI::IsMember({"ctc", "context", "both"}))
      ->capture_default_str();
  be->add_option("--block-sleep-ms", be_sleep, "simulated cost per block");
  be->add_option("--out", be_out, "also write the JSON report here");

  auto* re = sub("run-experiment", "decode the scheme x variant x mode grid");
  std::string re_manifest, re_out;
  re->add_option("--manifest", re_manifest, "experiment manifest JSON")
      ->required();
  re->add_option("--out", re_out, "report JSON file (stdout when omitted)");

  auto search_config = [&](CLI::App* s, int beam, int prefilter, double lctc,
                           double ldec, double llm, double lp, double sleep,
                           double period) {
    auto given = [&](const char* name) {
      const CLI::Option* o = s->get_option_no_throw(name);
      return o != nullptr && o->count() > 0;
    };
    SearchConfig scfg;
    scfg.apply_json(g.section("search"));
    if (given("--beam")) scfg.beam = beam;
    if (given("--prefilter")) scfg.prefilter = prefilter;
    if (given("--lambda-ctc")) scfg.lambda_ctc = lctc;
    if (given("--lambda-dec")) scfg.lambda_dec = ldec;
    if (given("--lambda-lm")) scfg.lambda_lm = llm;
    if (given("--length-penalty")) scfg.length_penalty = lp;
    if (given("--block-sleep-ms")) scfg.block_sleep_ms = sleep;
    if (given("--frame-period-ms")) scfg.frame_period_ms = period;
    scfg.validate();
    return scfg;
  };

  gen->callback([&] { cmd_gen_data(g, gen_out); });
  pe->callback([&] {
    cmd_pretrain_encoder(g, pe_corpus, pe_out, pe_metrics,
                         app.count("--seed") > 0);
  });
  pl->callback([&] {
    cmd_pretrain_lm(g, pl_corpus, pl_out, pl_metrics,
                    app.count("--seed") > 0);
  });
  ft->callback([&] {
    cmd_finetune(g, ft_corpus, ft_enc, ft_lm, ft_out, ft_scheme, ft_variant,
                 ft_metrics, app.count("--seed") > 0);
  });
  de->callback([&] {
    cmd_decode(g, de_model, de_corpus, de_out, de_mode, de_variant, de_split,
               de_limit,
               search_config(de, de_beam, de_prefilter, de_lctc, de_ldec,
                             de_llm, de_lp, de_sleep, de_period));
  });
  ev->callback([&] { cmd_eval(ev_hyp); });
  be->callback([&] {
    SearchConfig scfg = search_config(be, 0, 0, 0, 0, 0, 0, be_sleep, 0);
    cmd_bench(g, be_model, be_corpus, be_split, be_limit, be_variant, scfg,
              be_out);
  });
  re->callback([&] {
    cmd_run_experiment(g, re_manifest, re_out, app.count("--seed") > 0,
                       app.count("--threads") > 0);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
