// Network checkpoint file.
//
//   dsc-checkpoint 1
//   config <key>=<value>          one line per architecture setting
//   tensors <count>
//   <name> <d0> <d1> <d2> <d3> f32   one line per tensor, in parameter order
//   data
//   <raw float32 little-endian values, tensors concatenated in manifest order>
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dsc/config.hpp"
#include "dsc/network.hpp"
#include "dsc/params.hpp"

namespace dsc {

inline constexpr const char* kCheckpointMagic = "dsc-checkpoint 1";

inline void write_checkpoint(std::ostream& os, const NetworkParams<float>& net) {
  KeyValues kv;
  write_network_config(kv, net.config);
  os << kCheckpointMagic << '\n';
  for (const auto& [k, v] : kv.values()) os << "config " << k << '=' << v << '\n';
  os << "tensors " << net.tensors.size() << '\n';
  for (const auto& [name, t] : net.tensors) {
    const Shape& s = t.shape();
    os << name << ' ' << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << " f32\n";
  }
  os << "data\n";
  std::vector<char> buf;
  for (const auto& [name, t] : net.tensors) {
    buf.resize(t.size() * 4);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(t[i]);
      for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) throw IoError("checkpoint write failed");
}

/// Writes to a temporary file and renames, so a crash never leaves a torn file.
inline void save_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& net) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot create " + tmp.string());
    write_checkpoint(os, net);
  }
  std::filesystem::rename(tmp, path);
}

/// Parses a checkpoint and validates every tensor name and shape against the
/// parameter layout its architecture implies.
inline NetworkParams<float> read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) throw IoError("not a dsc checkpoint");
  KeyValues kv;
  std::size_t count = 0;
  while (std::getline(is, line)) {
    if (line.rfind("config ", 0) == 0) {
      kv.set(line.substr(7));
    } else if (line.rfind("tensors ", 0) == 0) {
      count = std::stoul(line.substr(8));
      break;
    } else {
      throw IoError("unexpected checkpoint header line: " + line);
    }
  }
  NetworkConfig cfg;
  try {
    cfg = read_network_config(kv);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config: ") + e.what());
  }
  NetworkParams<float> net = init_network<float>(cfg, 0);

  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> manifest;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw IoError("truncated checkpoint manifest");
    std::istringstream ls(line);
    Entry e;
    std::string type;
    if (!(ls >> e.name >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w >> type) ||
        type != "f32") {
      throw IoError("bad manifest line: " + line);
    }
    manifest.push_back(e);
  }
  if (!std::getline(is, line) || line != "data") throw IoError("missing checkpoint data marker");

  for (const auto& e : manifest) {
    if (!net.tensors.contains(e.name)) throw IoError("checkpoint has unexpected tensor " + e.name);
    if (net.tensors.at(e.name).shape() != e.shape) {
      throw IoError("checkpoint tensor " + e.name + " has shape " + e.shape.str() + ", expected " +
                    net.tensors.at(e.name).shape().str());
    }
  }
  for (const auto& name : net.tensors.names()) {
    bool found = false;
    for (const auto& e : manifest) found = found || e.name == name;
    if (!found) throw IoError("checkpoint lacks tensor " + name);
  }
  if (manifest.size() != net.tensors.size()) throw IoError("checkpoint has duplicate tensors");

  std::vector<unsigned char> buf;
  for (const auto& e : manifest) {
    Tensor<float>& t = net.tensors.at(e.name);
    buf.resize(t.size() * 4);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw IoError("truncated checkpoint data at " + e.name);
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
      t[i] = std::bit_cast<float>(bits);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after checkpoint data");
  return net;
}

inline NetworkParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

/// Loads and additionally requires the stored architecture to equal `expected`.
inline NetworkParams<float> load_checkpoint(const std::filesystem::path& path,
                                            const NetworkConfig& expected) {
  NetworkParams<float> net = load_checkpoint(path);
  if (!(net.config == expected)) {
    throw IoError(path.string() + ": architecture differs from the requested configuration");
  }
  return net;
}

}  // namespace dsc
