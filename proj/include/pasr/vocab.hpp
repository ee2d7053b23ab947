#pragma once

// Token inventory shared by every stage: ordered content tokens plus the
// three reserved symbols (blank, start, end). Content ids are dense
// [0, V). Decoder-side coordinates place sos at V and eos at V+1; the
// CTC grid instead reserves column 0 for blank (content c at column c+1).

#include "pasr/common.hpp"

#include <json.hpp>

#include <string>
#include <unordered_map>
#include <vector>

namespace pasr {

class Vocabulary {
 public:
  Vocabulary() = default;

  Vocabulary(std::vector<std::string> content, std::string blank = "<blk>",
             std::string sos = "<sos>", std::string eos = "<eos>")
      : content_(std::move(content)), blank_(std::move(blank)),
        sos_(std::move(sos)), eos_(std::move(eos)) {
    validate();
  }

  static Vocabulary numbered(int n) {
    std::vector<std::string> toks;
    toks.reserve(n);
    for (int i = 0; i < n; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "tok%02d", i);
      toks.emplace_back(buf);
    }
    return Vocabulary(std::move(toks));
  }

  int content_size() const { return static_cast<int>(content_.size()); }

  const std::string& content_name(int id) const {
    if (id < 0 || id >= content_size())
      throw TargetError("content id " + std::to_string(id) +
                        " outside vocabulary of " + std::to_string(content_size()));
    return content_[id];
  }

  int content_id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw DataError("unknown token '" + name + "'");
    return it->second;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  // decoder coordinates
  int sos_id() const { return content_size(); }
  int eos_id() const { return content_size() + 1; }
  int decoder_vocab() const { return content_size() + 2; }  // embeddings
  int decoder_outputs() const { return content_size() + 1; }  // content + eos

  const std::string& blank_name() const { return blank_; }
  const std::string& sos_name() const { return sos_; }
  const std::string& eos_name() const { return eos_; }

  std::string decode(const std::vector<int>& ids, const char* sep = " ") const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out += sep;
      out += content_name(ids[i]);
    }
    return out;
  }

  nlohmann::json to_json() const {
    return {{"content", content_},
            {"special", {{"blank", blank_}, {"sos", sos_}, {"eos", eos_}}}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    try {
      return Vocabulary(j.at("content").get<std::vector<std::string>>(),
                        j.at("special").at("blank").get<std::string>(),
                        j.at("special").at("sos").get<std::string>(),
                        j.at("special").at("eos").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("vocabulary json: ") + e.what());
    }
  }

  bool operator==(const Vocabulary& o) const {
    return content_ == o.content_ && blank_ == o.blank_ && sos_ == o.sos_ &&
           eos_ == o.eos_;
  }

 private:
  void validate() {
    if (blank_ == sos_ || blank_ == eos_ || sos_ == eos_)
      throw DataError("reserved tokens must be distinct");
    index_.clear();
    for (size_t i = 0; i < content_.size(); ++i) {
      const std::string& s = content_[i];
      if (s == blank_ || s == sos_ || s == eos_)
        throw DataError("content token '" + s + "' collides with a reserved token");
      if (!index_.emplace(s, static_cast<int>(i)).second)
        throw DataError("duplicate token '" + s + "'");
    }
  }

  std::vector<std::string> content_;
  std::string blank_, sos_, eos_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace pasr
