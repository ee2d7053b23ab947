#pragma once

// Bundles the blockwise encoder, CTC head, prompt projections, and decoder
// into one parameter namespace, with checkpoint save/load by scope. Stage
// checkpoints carry only their own parameters: the encoder stage owns the
// encoder and CTC head, the LM stage owns the decoder, fine-tuning owns
// everything including the prompt projections.

#include "pasr/checkpoint.hpp"
#include "pasr/ctc.hpp"
#include "pasr/decoder.hpp"
#include "pasr/encoder.hpp"
#include "pasr/prompt.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace pasr {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  void validate() const {
    encoder.validate();
    decoder.validate();
  }

  nlohmann::json to_json() const {
    return {{"encoder",
             {{"input_dim", encoder.input_dim},
              {"d_model", encoder.d_model},
              {"n_layers", encoder.n_layers},
              {"heads", encoder.heads},
              {"d_ff", encoder.d_ff},
              {"block_len", encoder.block_len},
              {"conv_kernel", encoder.conv_kernel}}},
            {"decoder",
             {{"d_model", decoder.d_model},
              {"n_layers", decoder.n_layers},
              {"heads", decoder.heads},
              {"d_ff", decoder.d_ff},
              {"max_prompts", decoder.max_prompts},
              {"max_tokens", decoder.max_tokens}}}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    auto read = [](const nlohmann::json& src, const char* section,
                   std::initializer_list<std::pair<const char*, int*>> fields) {
      if (!src.is_object())
        throw ConfigError(std::string(section) + " must be an object");
      for (auto& [key, value] : src.items()) {
        bool known = false;
        for (auto& [name, dst] : fields)
          if (key == name) {
            if (!value.is_number_integer())
              throw ConfigError(std::string(section) + "." + key +
                                " must be an integer");
            *dst = value.get<int>();
            known = true;
            break;
          }
        if (!known)
          throw ConfigError("unknown key " + std::string(section) + "." + key);
      }
    };
    for (auto& [key, value] : j.items()) {
      if (key == "encoder") {
        read(value, "encoder",
             {{"input_dim", &cfg.encoder.input_dim},
              {"d_model", &cfg.encoder.d_model},
              {"n_layers", &cfg.encoder.n_layers},
              {"heads", &cfg.encoder.heads},
              {"d_ff", &cfg.encoder.d_ff},
              {"block_len", &cfg.encoder.block_len},
              {"conv_kernel", &cfg.encoder.conv_kernel}});
      } else if (key == "decoder") {
        read(value, "decoder",
             {{"d_model", &cfg.decoder.d_model},
              {"n_layers", &cfg.decoder.n_layers},
              {"heads", &cfg.decoder.heads},
              {"d_ff", &cfg.decoder.d_ff},
              {"max_prompts", &cfg.decoder.max_prompts},
              {"max_tokens", &cfg.decoder.max_tokens}});
      } else {
        throw ConfigError("unknown key model." + key);
      }
    }
    cfg.validate();
    return cfg;
  }
};

template <class S>
struct AsrModel {
  ModelConfig cfg;
  int vocab = 0;  // content tokens
  Encoder<S> encoder;
  ad::Parameter<S> ctc_w, ctc_b;  // projects h_t to blank + content logits
  PromptBuilder<S> prompt;
  Decoder<S> decoder;

  void init(const ModelConfig& c, int vocab_size, unsigned seed) {
    c.validate();
    if (vocab_size < 1) throw ConfigError("vocabulary must be non-empty");
    cfg = c;
    vocab = vocab_size;
    Rng rng(seed);
    encoder.init(cfg.encoder, rng);
    ctc_w = ad::Parameter<S>(
        "ctc.w", random_normal<S>(cfg.encoder.d_model, vocab + 1, rng,
                                  1.0 / std::sqrt(double(cfg.encoder.d_model))));
    ctc_b = ad::Parameter<S>("ctc.b", Mat<S>::Zero(1, vocab + 1));
    prompt.init(cfg.encoder.d_model, cfg.decoder.d_model, rng);
    decoder.init(cfg.decoder, vocab_size, rng);
  }

  std::vector<ad::Parameter<S>*> encoder_params() {
    auto out = encoder.params();
    out.push_back(&ctc_w);
    out.push_back(&ctc_b);
    return out;
  }

  std::vector<ad::Parameter<S>*> decoder_params() { return decoder.params(); }

  std::vector<ad::Parameter<S>*> prompt_params() { return prompt.params(); }

  std::vector<ad::Parameter<S>*> params() {
    auto out = encoder_params();
    for (auto* p : prompt_params()) out.push_back(p);
    for (auto* p : decoder_params()) out.push_back(p);
    return out;
  }

  ad::Var<S> ctc_logits(ad::Tape<S>& tape, const ad::Var<S>& h) {
    return ad::linear(h, tape.use(ctc_w), tape.use(ctc_b));
  }

  // value-domain posterior grid for inference paths
  ctc::PosteriorGrid<S> posterior_grid(const Mat<S>& h) const {
    Mat<S> logits = h * ctc_w.value;
    logits.rowwise() += ctc_b.value.row(0);
    return ctc::PosteriorGrid<S>::from_logits(logits);
  }

  BlockPlan plan_for(int frames) const {
    return BlockPlan::make(frames, cfg.encoder.block_len);
  }
};

inline void save_model(const std::string& dir, AsrModel<float>& model,
                       const std::string& scope) {
  std::vector<ad::Parameter<float>*> ps;
  if (scope == "encoder")
    ps = model.encoder_params();
  else if (scope == "decoder")
    ps = model.decoder_params();
  else if (scope == "all")
    ps = model.params();
  else
    throw ConfigError("unknown checkpoint scope " + scope);
  nlohmann::json meta = {{"scope", scope},
                         {"vocab", model.vocab},
                         {"model", model.cfg.to_json()}};
  save_checkpoint(dir, ps, meta);
}

// Loads a stage checkpoint into the matching subset of the model's
// parameters. Shape or dimension mismatches surface as data errors.
inline nlohmann::json load_model(const std::string& dir,
                                 AsrModel<float>& model) {
  nlohmann::json meta = read_checkpoint_meta(dir);
  if (!meta.contains("scope") || !meta["scope"].is_string())
    throw FormatError("checkpoint meta lacks a scope");
  const std::string scope = meta["scope"].get<std::string>();
  if (meta.contains("vocab") && meta["vocab"].get<int>() != model.vocab)
    throw DataError("checkpoint vocabulary " +
                    std::to_string(meta["vocab"].get<int>()) +
                    " does not match model vocabulary " +
                    std::to_string(model.vocab));
  std::vector<ad::Parameter<float>*> ps;
  if (scope == "encoder")
    ps = model.encoder_params();
  else if (scope == "decoder")
    ps = model.decoder_params();
  else if (scope == "all")
    ps = model.params();
  else
    throw FormatError("unknown checkpoint scope " + scope);
  load_checkpoint(dir, ps);
  return meta;
}

}  // namespace pasr
