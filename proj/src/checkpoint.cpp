#include "pasr/checkpoint.hpp"

#include <fstream>
#include <unordered_map>

namespace pasr {

using nlohmann::json;

void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<ad::Parameter<float>*>& params,
                     const json& meta) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());

  json manifest = {{"params", json::array()}, {"meta", meta}};
  std::ofstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) throw DataError("cannot write params.bin");
  std::int64_t offset = 0;
  for (const auto* p : params) {
    manifest["params"].push_back(
        {{"name", p->name},
         {"rows", static_cast<int>(p->value.rows())},
         {"cols", static_cast<int>(p->value.cols())},
         {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    offset += std::int64_t(p->value.size()) * sizeof(float);
  }
  blob.close();
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw DataError("cannot write manifest.json");
  mf << manifest.dump(2) << '\n';
}

static json read_manifest(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("'" + dir.string() + "' has no manifest.json");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (!manifest.contains("params") || !manifest["params"].is_array())
    throw FormatError("manifest.json: missing params array");
  return manifest;
}

json read_checkpoint_meta(const std::filesystem::path& dir) {
  return read_manifest(dir).value("meta", json::object());
}

json load_checkpoint(const std::filesystem::path& dir,
                     const std::vector<ad::Parameter<float>*>& params) {
  json manifest = read_manifest(dir);

  struct Slot {
    int rows, cols;
    std::int64_t offset;
  };
  std::unordered_map<std::string, Slot> stored;
  for (const auto& e : manifest["params"]) {
    try {
      stored[e.at("name").get<std::string>()] = {e.at("rows").get<int>(),
                                                 e.at("cols").get<int>(),
                                                 e.at("offset").get<std::int64_t>()};
    } catch (const json::exception& ex) {
      throw FormatError(std::string("manifest.json params entry: ") + ex.what());
    }
  }

  std::ifstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) throw DataError("'" + dir.string() + "' has no params.bin");
  blob.seekg(0, std::ios::end);
  const std::int64_t blob_size = blob.tellg();

  for (auto* p : params) {
    auto it = stored.find(p->name);
    if (it == stored.end())
      throw DataError("checkpoint lacks parameter '" + p->name + "'");
    const Slot& s = it->second;
    if (s.rows != p->value.rows() || s.cols != p->value.cols())
      throw DataError("parameter '" + p->name + "' stored as " +
                      shape_str(s.rows, s.cols) + ", model expects " +
                      shape_str(p->value.rows(), p->value.cols()));
    const std::int64_t bytes = std::int64_t(s.rows) * s.cols * sizeof(float);
    if (s.offset < 0 || s.offset + bytes > blob_size)
      throw FormatError("params.bin truncated: '" + p->name + "' needs bytes [" +
                        std::to_string(s.offset) + ", " +
                        std::to_string(s.offset + bytes) + ") of " +
                        std::to_string(blob_size));
    blob.seekg(s.offset);
    blob.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(bytes));
    if (!blob) throw FormatError("params.bin: short read for '" + p->name + "'");
  }
  return manifest.value("meta", json::object());
}

}  // namespace pasr
