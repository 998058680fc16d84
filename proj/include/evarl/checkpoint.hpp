#pragma once

// Parameter checkpoints: ordered (name, shape, data) records as JSON.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "evarl/tensor.hpp"

namespace evarl {

inline nlohmann::json to_json(const ParameterSet& params) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& e : params) {
    records.push_back({{"name", e.name},
                       {"shape", e.value.shape()},
                       {"data", e.value.data()}});
  }
  return {{"format", "evarl-parameters"}, {"version", 1},
          {"parameters", records}};
}

inline ParameterSet parameters_from_json(const nlohmann::json& j) {
  try {
    ParameterSet out;
    for (const auto& r : j.at("parameters")) {
      out.add(r.at("name").get<std::string>(),
              Tensor(r.at("shape").get<Shape>(),
                     r.at("data").get<std::vector<double>>()));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("parameters_from_json: ") + e.what());
  }
}

// Writes to a sibling temp file then renames over the target.
inline void write_text_atomic(const std::filesystem::path& path,
                              const std::string& text) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_parameters(const std::filesystem::path& path,
                            const ParameterSet& params) {
  write_text_atomic(path, to_json(params).dump());
}

inline ParameterSet load_parameters(const std::filesystem::path& path) {
  try {
    return parameters_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput("load_parameters: " + path.string() + ": " + e.what());
  }
}

}  // namespace evarl
