#pragma once

// Small JSON Schema checker covering the subset the report schemas use:
// type, properties, required, boolean additionalProperties, items,
// minItems, enum, and minimum. Violations throw FormatError naming the
// offending location as a dotted path from $.

#include "pasr/common.hpp"

#include <json.hpp>

#include <string>

namespace pasr {

inline void check_schema(const nlohmann::json& schema,
                         const nlohmann::json& doc,
                         const std::string& where = "$") {
  using nlohmann::json;
  if (schema.contains("type")) {
    const std::string t = schema["type"].get<std::string>();
    const bool ok = (t == "object" && doc.is_object()) ||
                    (t == "array" && doc.is_array()) ||
                    (t == "string" && doc.is_string()) ||
                    (t == "boolean" && doc.is_boolean()) ||
                    (t == "integer" && doc.is_number_integer()) ||
                    (t == "number" && doc.is_number());
    if (!ok)
      throw FormatError(where + ": expected " + t + ", got " +
                        std::string(doc.type_name()));
  }
  if (schema.contains("enum")) {
    bool hit = false;
    for (const auto& v : schema["enum"])
      if (v == doc) {
        hit = true;
        break;
      }
    if (!hit)
      throw FormatError(where + ": value " + doc.dump() +
                        " is not one of the allowed choices");
  }
  if (schema.contains("minimum") && doc.is_number() &&
      doc.get<double>() < schema["minimum"].get<double>())
    throw FormatError(where + ": value " + doc.dump() + " is below " +
                      schema["minimum"].dump());
  if (doc.is_object()) {
    if (schema.contains("required"))
      for (const auto& k : schema["required"])
        if (!doc.contains(k.get<std::string>()))
          throw FormatError(where + ": missing required key '" +
                            k.get<std::string>() + "'");
    const json props = schema.value("properties", json::object());
    const bool extra_ok = !schema.contains("additionalProperties") ||
                          !schema["additionalProperties"].is_boolean() ||
                          schema["additionalProperties"].get<bool>();
    for (const auto& [k, v] : doc.items()) {
      if (props.contains(k))
        check_schema(props[k], v, where + "." + k);
      else if (!extra_ok)
        throw FormatError(where + ": unexpected key '" + k + "'");
    }
  }
  if (doc.is_array()) {
    if (schema.contains("minItems") &&
        doc.size() < schema["minItems"].get<std::size_t>())
      throw FormatError(where + ": needs at least " +
                        schema["minItems"].dump() + " entries, has " +
                        std::to_string(doc.size()));
    if (schema.contains("items"))
      for (std::size_t i = 0; i < doc.size(); ++i)
        check_schema(schema["items"], doc[i],
                     where + "[" + std::to_string(i) + "]");
  }
}

}  // namespace pasr
