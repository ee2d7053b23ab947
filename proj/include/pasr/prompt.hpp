#pragma once

// Turns blockwise encoder outputs into decoder prompts. CTC prompts keep
// only the frames whose greedy CTC label is non-blank and project them into
// the decoder embedding space; the context prompt projects the block's
// top-layer context vector. A chunk is the per-block concatenation, CTC
// prompts first by default.

#include "pasr/autodiff.hpp"
#include "pasr/common.hpp"
#include "pasr/ctc.hpp"

#include <optional>
#include <string>
#include <vector>

namespace pasr {

enum class PromptVariant { kCtc, kContext, kBoth };

inline PromptVariant prompt_variant_from_string(const std::string& s) {
  if (s == "ctc") return PromptVariant::kCtc;
  if (s == "context") return PromptVariant::kContext;
  if (s == "both") return PromptVariant::kBoth;
  throw ConfigError("unknown prompt variant '" + s + "'");
}

inline const char* to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::kCtc: return "ctc";
    case PromptVariant::kContext: return "context";
    case PromptVariant::kBoth: return "both";
  }
  return "?";
}

template <class S>
struct PromptChunk {
  int block = 0;
  ad::Var<S> prompts;            // size() x d_emb in assembled order
  std::vector<int> kept_frames;  // global subsampled frame per CTC prompt
  bool has_context = false;
  bool context_first = false;

  int ctc_count() const { return static_cast<int>(kept_frames.size()); }
  int size() const { return ctc_count() + (has_context ? 1 : 0); }

  bool is_context_pos(int i) const {
    if (!has_context) return false;
    return context_first ? i == 0 : i == ctc_count();
  }
  // global frame index feeding prompt position i, -1 for the context prompt
  int frame_of_pos(int i) const {
    if (is_context_pos(i)) return -1;
    return kept_frames[context_first && has_context ? i - 1 : i];
  }
};

template <class S>
struct PromptBuilder {
  PromptVariant variant = PromptVariant::kBoth;
  bool context_first = false;
  ad::Parameter<S> ctc_w, ctc_b, cxt_w, cxt_b;

  void init(int d_model, int d_emb, Rng& rng) {
    const double ws = 1.0 / std::sqrt(double(d_model));
    ctc_w = ad::Parameter<S>("prompt.ctc.w", random_normal<S>(d_model, d_emb, rng, ws));
    ctc_b = ad::Parameter<S>("prompt.ctc.b", Mat<S>::Zero(1, d_emb));
    cxt_w = ad::Parameter<S>("prompt.cxt.w", random_normal<S>(d_model, d_emb, rng, ws));
    cxt_b = ad::Parameter<S>("prompt.cxt.b", Mat<S>::Zero(1, d_emb));
  }

  std::vector<ad::Parameter<S>*> params() {
    return {&ctc_w, &ctc_b, &cxt_w, &cxt_b};
  }

  // Kept-frame projection. greedy_z is the block's per-frame greedy CTC
  // label in grid coordinates; returns (kept x d_emb) and the kept local
  // frame indices.
  std::pair<ad::Var<S>, std::vector<int>> make_ctc_prompts(
      ad::Tape<S>& tape, const ad::Var<S>& h_block,
      const std::vector<int>& greedy_z) {
    if (static_cast<int>(greedy_z.size()) != h_block.rows())
      throw ContractError("greedy labels cover " +
                          std::to_string(greedy_z.size()) + " frames, block has " +
                          std::to_string(h_block.rows()));
    std::vector<int> kept;
    for (int t = 0; t < static_cast<int>(greedy_z.size()); ++t)
      if (greedy_z[t] != ctc::kBlank) kept.push_back(t);
    auto rows = ad::embedding_lookup(h_block, kept);
    return {ad::linear(rows, tape.use(ctc_w), tape.use(ctc_b)), kept};
  }

  ad::Var<S> make_context_prompt(ad::Tape<S>& tape, const ad::Var<S>& c_top) {
    if (c_top.rows() != 1)
      throw ShapeError("context embedding must be a single row, got " +
                       shape_str(c_top.rows(), c_top.cols()));
    return ad::linear(c_top, tape.use(cxt_w), tape.use(cxt_b));
  }

  // One block's chunk. frame_offset is the global index of the block's
  // first subsampled frame.
  PromptChunk<S> assemble_chunk(ad::Tape<S>& tape, int block,
                                const ad::Var<S>& h_block,
                                const std::vector<int>& greedy_z,
                                const ad::Var<S>& c_top, int frame_offset) {
    PromptChunk<S> chunk;
    chunk.block = block;
    chunk.context_first = context_first;
    chunk.has_context = variant != PromptVariant::kCtc;

    ad::Var<S> ctc_part;
    if (variant != PromptVariant::kContext) {
      auto [p, kept] = make_ctc_prompts(tape, h_block, greedy_z);
      ctc_part = p;
      chunk.kept_frames = std::move(kept);
      for (int& f : chunk.kept_frames) f += frame_offset;
    } else {
      ctc_part = tape.constant(Mat<S>(0, static_cast<int>(ctc_w.value.cols())));
    }

    if (!chunk.has_context) {
      chunk.prompts = ctc_part;
      return chunk;
    }
    auto cxt = make_context_prompt(tape, c_top);
    if (chunk.ctc_count() == 0) {
      chunk.prompts = cxt;
    } else if (context_first) {
      chunk.prompts = ad::concat_rows<S>({cxt, ctc_part});
    } else {
      chunk.prompts = ad::concat_rows<S>({ctc_part, cxt});
    }
    return chunk;
  }
};

template <class S>
struct PromptStream {
  std::vector<PromptChunk<S>> chunks;
  int total = 0;  // J_b after the last appended chunk

  void append(PromptChunk<S> chunk) {
    if (chunk.block != static_cast<int>(chunks.size()))
      throw SequencingError("expected chunk for block " +
                            std::to_string(chunks.size()) + ", got " +
                            std::to_string(chunk.block));
    total += chunk.size();
    chunks.push_back(std::move(chunk));
  }

  std::vector<int> chunk_sizes() const {
    std::vector<int> s;
    s.reserve(chunks.size());
    for (const auto& c : chunks) s.push_back(c.size());
    return s;
  }

  // Flattened prompt matrix across all chunks (may have zero rows).
  ad::Var<S> flat(ad::Tape<S>& tape, int d_emb) const {
    std::vector<ad::Var<S>> parts;
    for (const auto& c : chunks)
      if (c.size() > 0) parts.push_back(c.prompts);
    if (parts.empty()) return tape.constant(Mat<S>(0, d_emb));
    return ad::concat_rows<S>(parts);
  }

  // Provenance of flattened prompt position j: (block, frame, is_context).
  struct Origin {
    int block = 0;
    int frame = -1;
    bool is_context = false;
  };
  std::vector<Origin> origins() const {
    std::vector<Origin> out;
    out.reserve(total);
    for (const auto& c : chunks)
      for (int i = 0; i < c.size(); ++i)
        out.push_back({c.block, c.frame_of_pos(i), c.is_context_pos(i)});
    return out;
  }
};

}  // namespace pasr
