#pragma once

// Single-file checkpoint: a readable text header (version, config, matrix
// names and shapes, digest) followed by the matrices as raw little-endian
// doubles in header order.

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dman/run_config.hpp"
#include "dman/train.hpp"

namespace dman {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "DMAN-CHECKPOINT";

struct OptimizerState {
  std::int64_t steps = 0;
  std::vector<Matrix> first;
  std::vector<Matrix> second;

  static OptimizerState of(const Adam& a) { return {a.steps, a.first, a.second}; }
  void restore(Adam& a) const {
    a.steps = steps;
    a.first = first;
    a.second = second;
  }
};

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::optional<OptimizerState> main_opt;
  std::optional<OptimizerState> routing_opt;
  std::map<UserId, UserState> users;

  static Checkpoint of(const Trainer& tr) {
    Checkpoint c{tr.config(), tr.params(), {}, {}, {}};
    if (tr.main_optimizer().steps > 0) c.main_opt = OptimizerState::of(tr.main_optimizer());
    if (tr.routing_optimizer().steps > 0) {
      c.routing_opt = OptimizerState::of(tr.routing_optimizer());
    }
    return c;
  }
};

namespace detail {

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void put_double(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xffU));
    bits >>= 8;
  }
}

inline double get_double(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(p[i]);
  return std::bit_cast<double>(bits);
}

// Ordered (name, matrix) slots of a checkpoint; used for both directions.
template <class C, class F>
void visit_slots(C& c, F&& f) {
  c.params.visit([&](const std::string& name, auto& m, ParamGroup) { f("param." + name, m); });
  auto opt = [&](auto& o, const std::string& pre) {
    if (!o) return;
    for (std::size_t k = 0; k < o->first.size(); ++k) {
      f(pre + ".first." + std::to_string(k), o->first[k]);
      f(pre + ".second." + std::to_string(k), o->second[k]);
    }
  };
  opt(c.main_opt, "adam.main");
  opt(c.routing_opt, "adam.routing");
  for (auto& [id, st] : c.users) {
    const std::string pre = "user." + std::to_string(id);
    for (std::size_t l = 0; l < st.memory.levels.size(); ++l) {
      f(pre + ".memory." + std::to_string(l), st.memory.levels[l]);
    }
    for (std::size_t l = 0; l < st.cache.hidden.size(); ++l) {
      f(pre + ".cache." + std::to_string(l), st.cache.hidden[l]);
    }
  }
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, std::ostream& out) {
  std::ostringstream head;
  head << kCheckpointMagic << " " << kCheckpointVersion << "\n";
  for (const auto& [k, v] : model_entries(c.config)) head << "config " << k << "=" << v << "\n";
  head << "config vocab_size=" << c.config.vocab_size << "\n";
  auto opt_line = [&](const char* name, const std::optional<OptimizerState>& o) {
    if (o) head << "optimizer " << name << " " << o->steps << " " << o->first.size() << "\n";
  };
  opt_line("main", c.main_opt);
  opt_line("routing", c.routing_opt);
  for (const auto& [id, st] : c.users) {
    head << "user " << id << " " << st.memory.levels.size() << " " << st.memory.fused << " "
         << st.cache.hidden.size() << " " << st.cache.segment_index << " " << st.last_segment
         << "\n";
  }
  std::string payload;
  detail::visit_slots(c, [&](const std::string& name, const Matrix& m) {
    head << "matrix " << name << " " << m.rows() << " " << m.cols() << "\n";
    for (Index i = 0; i < m.size(); ++i) detail::put_double(payload, m.data()[i]);
  });
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(payload)));
  head << "digest " << digest << "\n";
  head << "payload " << payload.size() << "\n";
  out << head.str();
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw RuntimeFailure("save_checkpoint: write failed");
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("save_checkpoint: cannot open " + path);
  save_checkpoint(c, out);
}

inline Checkpoint load_checkpoint(std::istream& in) {
  auto corrupt = [](const std::string& why) {
    return RuntimeFailure("load_checkpoint: " + why);
  };
  std::string line;
  if (!std::getline(in, line)) throw corrupt("empty input");
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    if (!(ls >> magic >> version) || magic != kCheckpointMagic) throw corrupt("not a checkpoint");
    if (version != kCheckpointVersion) {
      throw corrupt("unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
    }
  }
  Checkpoint c;
  std::map<std::string, std::pair<Index, Index>> shapes;
  std::string digest;
  std::size_t payload_size = 0;
  bool have_payload = false;
  while (!have_payload && std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config") {
      std::string kv;
      ls >> kv;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw corrupt("bad config line '" + line + "'");
      const std::string key = kv.substr(0, eq);
      const std::string value = kv.substr(eq + 1);
      if (key == "vocab_size") {
        c.config.vocab_size = detail::parse_number<Index>(key, value);
      } else if (!set_model_key(c.config, key, value)) {
        throw corrupt("unknown config key '" + key + "'");
      }
    } else if (kind == "optimizer") {
      std::string name;
      OptimizerState o;
      std::size_t n = 0;
      if (!(ls >> name >> o.steps >> n)) throw corrupt("bad optimizer line");
      o.first.resize(n);
      o.second.resize(n);
      (name == "main" ? c.main_opt : c.routing_opt) = std::move(o);
    } else if (kind == "user") {
      UserId id = 0;
      std::size_t levels = 0;
      std::size_t cached = 0;
      UserState st;
      if (!(ls >> id >> levels >> st.memory.fused >> cached >> st.cache.segment_index >>
            st.last_segment)) {
        throw corrupt("bad user line");
      }
      st.memory.levels.resize(levels);
      st.cache.hidden.resize(cached);
      c.users.emplace(id, std::move(st));
    } else if (kind == "matrix") {
      std::string name;
      Index r = 0;
      Index k = 0;
      if (!(ls >> name >> r >> k) || r < 0 || k < 0) throw corrupt("bad matrix line");
      shapes[name] = {r, k};
    } else if (kind == "digest") {
      ls >> digest;
    } else if (kind == "payload") {
      if (!(ls >> payload_size)) throw corrupt("bad payload line");
      have_payload = true;
    } else {
      throw corrupt("unexpected header line '" + line + "'");
    }
  }
  if (!have_payload) throw corrupt("missing payload");
  std::string payload(payload_size, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload_size));
  if (static_cast<std::size_t>(in.gcount()) != payload_size) throw corrupt("truncated payload");
  char actual[17];
  std::snprintf(actual, sizeof actual, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(payload)));
  if (digest != actual) {
    throw corrupt("digest mismatch (header " + digest + ", payload " + actual + ")");
  }
  c.config.validate();
  Rng rng(c.config.seed, 1);
  c.params = ModelParams::init(c.config, rng);
  std::size_t offset = 0;
  std::size_t used = 0;
  detail::visit_slots(c, [&](const std::string& name, Matrix& m) {
    const auto it = shapes.find(name);
    if (it == shapes.end()) throw corrupt("missing matrix " + name);
    const auto [r, k] = it->second;
    const auto bytes = static_cast<std::size_t>(r * k) * 8;
    if (offset + bytes > payload.size()) throw corrupt("payload too short for " + name);
    if (name.starts_with("param.") && (m.rows() != r || m.cols() != k)) {
      throw corrupt(name + " is " + shape_str(r, k) + ", config implies " + shape_str(m));
    }
    m.resize(r, k);
    for (Index i = 0; i < m.size(); ++i) {
      m.data()[i] = detail::get_double(payload.data() + offset + static_cast<std::size_t>(i) * 8);
    }
    offset += bytes;
    ++used;
  });
  if (used != shapes.size() || offset != payload.size()) {
    throw corrupt("header and payload disagree");
  }
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("load_checkpoint: cannot open " + path);
  return load_checkpoint(in);
}

// Trainer resumed from a checkpoint, optimiser moments included.
inline Trainer restore_trainer(const Checkpoint& c) {
  Trainer tr(c.config, c.params);
  if (c.main_opt) c.main_opt->restore(tr.main_optimizer());
  if (c.routing_opt) c.routing_opt->restore(tr.routing_optimizer());
  return tr;
}

}  // namespace dman
