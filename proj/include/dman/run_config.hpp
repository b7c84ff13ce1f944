#pragma once

// Flat key=value run configuration. Blank lines and lines starting with '#'
// are ignored; unknown keys and malformed values are rejected with their line.

#include <charconv>
#include <fstream>
#include <istream>
#include <string>
#include <utility>
#include <vector>

#include "dman/model.hpp"

namespace dman {

struct RunConfig {
  ModelConfig model;
  std::string data_path;
  std::string out_path;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ParseError("invalid value '" + value + "' for " + key);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ParseError("invalid value '" + value + "' for " + key + " (expected true or false)");
}

}  // namespace detail

// Sets one model key. Returns false if the key is not a model key.
inline bool set_model_key(ModelConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "embed_dim") {
    cfg.embed_dim = parse_number<Index>(key, value);
  } else if (key == "window_t") {
    cfg.window = parse_number<Index>(key, value);
  } else if (key == "memory_slots") {
    cfg.memory_slots = parse_number<Index>(key, value);
  } else if (key == "layers") {
    cfg.layers = parse_number<Index>(key, value);
  } else if (key == "neg_samples") {
    cfg.neg_samples = parse_number<Index>(key, value);
  } else if (key == "routing_iters") {
    cfg.routing_iters = parse_number<int>(key, value);
  } else if (key == "attention_scale") {
    cfg.attention_scale = detail::parse_bool(key, value);
  } else if (key == "variant") {
    cfg.variant = parse_variant(value);
  } else if (key == "lr") {
    cfg.lr = parse_number<double>(key, value);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_number<Index>(key, value);
  } else if (key == "epochs") {
    cfg.epochs = parse_number<int>(key, value);
  } else if (key == "seed") {
    cfg.seed = parse_number<std::uint64_t>(key, value);
  } else {
    return false;
  }
  return true;
}

// Model keys in a fixed order, with values that parse back exactly.
inline std::vector<std::pair<std::string, std::string>> model_entries(const ModelConfig& cfg) {
  char lr[32];
  const auto res = std::to_chars(lr, lr + sizeof lr, cfg.lr);
  return {{"embed_dim", std::to_string(cfg.embed_dim)},
          {"window_t", std::to_string(cfg.window)},
          {"memory_slots", std::to_string(cfg.memory_slots)},
          {"layers", std::to_string(cfg.layers)},
          {"neg_samples", std::to_string(cfg.neg_samples)},
          {"routing_iters", std::to_string(cfg.routing_iters)},
          {"attention_scale", cfg.attention_scale ? "true" : "false"},
          {"variant", to_string(cfg.variant)},
          {"lr", std::string(lr, res.ptr)},
          {"batch_size", std::to_string(cfg.batch_size)},
          {"epochs", std::to_string(cfg.epochs)},
          {"seed", std::to_string(cfg.seed)}};
}

inline RunConfig parse_run_config(std::istream& in) {
  RunConfig rc;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto at = "line " + std::to_string(number) + ": ";
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError(at + "expected key=value");
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string value = detail::trim(s.substr(eq + 1));
    try {
      if (key == "data_path") {
        rc.data_path = value;
      } else if (key == "out_path") {
        rc.out_path = value;
      } else if (!set_model_key(rc.model, key, value)) {
        throw ParseError("unknown key '" + key + "'");
      }
    } catch (const ValidationError& e) {
      throw ParseError(at + e.what());
    }
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path);
  try {
    return parse_run_config(in);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace dman
