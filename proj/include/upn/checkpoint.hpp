#pragma once

// Checkpoint files: a plain-text header followed by a flat little-endian
// float64 payload.
//
//   upn-checkpoint v1
//   meta <key>=<value>            (any number, in insertion order)
//   net <name>
//   layer_dims=3,64,2
//   activations=tanh,identity
//   seed=7
//   param_count=386
//   vector <name> <length>
//   ---
//   <payload: every net's flattened parameters, then every vector, in header order>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "upn/errors.hpp"
#include "upn/io.hpp"
#include "upn/net.hpp"

namespace upn {

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, MlpNet>> nets;
  std::vector<std::pair<std::string, Vec>> vectors;

  void set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta)
      if (k == key) {
        v = value;
        return;
      }
    meta.emplace_back(key, value);
  }

  const std::string& get_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    throw ConfigError("checkpoint: missing meta key '" + key + "'");
  }

  bool has_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return true;
    return false;
  }

  const MlpNet& net(const std::string& name) const {
    for (const auto& [k, n] : nets)
      if (k == name) return n;
    throw ConfigError("checkpoint: missing net '" + name + "'");
  }

  const Vec& vector(const std::string& name) const {
    for (const auto& [k, v] : vectors)
      if (k == name) return v;
    throw ConfigError("checkpoint: missing vector '" + name + "'");
  }
};

namespace detail {

inline void write_le_doubles(std::ostream& os, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(v(i));
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    os.write(bytes, 8);
  }
}

inline Vec read_le_doubles(std::istream& is, std::size_t count) {
  Vec v(static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw IoError("checkpoint: truncated payload");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    v(static_cast<Eigen::Index>(i)) = std::bit_cast<double>(bits);
  }
  return v;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += fmt(xs[i]);
  }
  return out;
}

inline std::string strip_prefix(const std::string& line, const std::string& key) {
  if (line.rfind(key + "=", 0) != 0) throw ParseError("checkpoint: expected '" + key + "='", 0);
  return line.substr(key.size() + 1);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os << "upn-checkpoint v1\n";
  for (const auto& [k, v] : ckpt.meta) os << "meta " << k << '=' << v << '\n';
  for (const auto& [name, net] : ckpt.nets) {
    os << "net " << name << '\n';
    os << "layer_dims=" << detail::join(net.layer_dims(), [](int d) { return std::to_string(d); }) << '\n';
    os << "activations=" << detail::join(net.activations(), [](Activation a) { return to_string(a); }) << '\n';
    os << "seed=" << net.seed() << '\n';
    os << "param_count=" << net.param_count() << '\n';
  }
  for (const auto& [name, v] : ckpt.vectors) os << "vector " << name << ' ' << v.size() << '\n';
  os << "---\n";
  for (const auto& [name, net] : ckpt.nets) detail::write_le_doubles(os, net.flatten());
  for (const auto& [name, v] : ckpt.vectors) detail::write_le_doubles(os, v);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  Checkpoint ckpt;
  std::string line;
  if (!std::getline(is, line) || line != "upn-checkpoint v1") throw ParseError("checkpoint: bad magic line", 1);
  std::size_t lineno = 1;
  std::vector<std::size_t> vector_lengths;
  auto next = [&]() {
    if (!std::getline(is, line)) throw ParseError("checkpoint: unexpected end of header", lineno);
    ++lineno;
    return line;
  };
  while (true) {
    next();
    if (line == "---") break;
    if (line.rfind("meta ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("checkpoint: meta line without '='", lineno);
      ckpt.meta.emplace_back(line.substr(5, eq - 5), line.substr(eq + 1));
    } else if (line.rfind("net ", 0) == 0) {
      const std::string name = line.substr(4);
      try {
        const auto dims_s = detail::strip_prefix(next(), "layer_dims");
        const auto acts_s = detail::strip_prefix(next(), "activations");
        const auto seed_s = detail::strip_prefix(next(), "seed");
        const auto count_s = detail::strip_prefix(next(), "param_count");
        std::vector<int> dims;
        for (const auto& tok : split(dims_s, ',')) dims.push_back(parse_int(tok));
        std::vector<Activation> acts;
        for (const auto& tok : split(acts_s, ',')) acts.push_back(activation_from_string(tok));
        MlpNet net(dims, acts, std::stoull(seed_s));
        if (net.param_count() != static_cast<std::size_t>(std::stoull(count_s)))
          throw ParseError("checkpoint: param_count disagrees with layer_dims", lineno);
        ckpt.nets.emplace_back(name, std::move(net));
      } catch (const ParseError&) {
        throw;
      } catch (const std::exception& e) {
        throw ParseError(std::string("checkpoint: malformed net block: ") + e.what(), lineno);
      }
    } else if (line.rfind("vector ", 0) == 0) {
      std::istringstream ss(line.substr(7));
      std::string name;
      std::size_t len = 0;
      if (!(ss >> name >> len)) throw ParseError("checkpoint: malformed vector line", lineno);
      ckpt.vectors.emplace_back(name, Vec());
      vector_lengths.push_back(len);
    } else {
      throw ParseError("checkpoint: unrecognized header line '" + line + "'", lineno);
    }
  }
  for (auto& [name, net] : ckpt.nets) net.unflatten(detail::read_le_doubles(is, net.param_count()));
  for (std::size_t i = 0; i < ckpt.vectors.size(); ++i)
    ckpt.vectors[i].second = detail::read_le_doubles(is, vector_lengths[i]);
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, ckpt);
  write_file_atomic(path, os.str());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace upn
