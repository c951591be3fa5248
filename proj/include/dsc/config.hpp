// Flat key=value configuration files with command-line overrides.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsc/dsc_module.hpp"
#include "dsc/network.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

class KeyValues {
 public:
  /// "key=value"; blank lines and '#' comments are skipped by parse().
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected KEY=VALUE, got '" + assignment + "'");
    const std::string key = trim(assignment.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key in '" + assignment + "'");
    values_[key] = trim(assignment.substr(eq + 1));
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  void parse(std::istream& in, const std::string& origin = "config") {
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      try {
        set(line);
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
      }
    }
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    parse(in, path.string());
  }

  [[nodiscard]] bool has(const std::string& key) const { return values_.contains(key); }

  [[nodiscard]] std::string get(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  [[nodiscard]] std::string require(const std::string& key) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required setting '" + key + "'");
    return it->second;
  }

  template <typename N>
  [[nodiscard]] N number(const std::string& key, N fallback) const {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    return parse_number<N>(key, get(key, ""));
  }

  [[nodiscard]] bool flag(const std::string& key, bool fallback) const {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const std::string v = get(key, "");
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("setting '" + key + "' expects a boolean, got '" + v + "'");
  }

  template <typename N>
  [[nodiscard]] std::vector<N> list(const std::string& key, std::vector<N> fallback) const {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    std::vector<N> out;
    std::stringstream ss(get(key, ""));
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<N>(key, trim(item)));
    return out;
  }

  /// Keys that were set but never read.
  [[nodiscard]] std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
      if (!used_.contains(k)) out.push_back(k);
    }
    return out;
  }

  [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

 private:
  template <typename N>
  static N parse_number(const std::string& key, const std::string& text) {
    N value{};
    if constexpr (std::is_floating_point_v<N>) {
      try {
        std::size_t used = 0;
        const double d = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing");
        value = static_cast<N>(d);
      } catch (const std::exception&) {
        throw ConfigError("setting '" + key + "' expects a number, got '" + text + "'");
      }
    } else {
      const auto* end = text.data() + text.size();
      auto [ptr, ec] = std::from_chars(text.data(), end, value);
      if (ec != std::errc() || ptr != end) {
        throw ConfigError("setting '" + key + "' expects an integer, got '" + text + "'");
      }
    }
    return value;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

inline std::string to_string(AttentionLayout l) {
  return l == AttentionLayout::per_channel ? "per_channel" : "broadcast";
}

inline AttentionLayout parse_layout(const std::string& s) {
  if (s == "per_channel") return AttentionLayout::per_channel;
  if (s == "broadcast") return AttentionLayout::broadcast;
  throw ConfigError("unknown attention layout '" + s + "'");
}

inline DscConfig read_dsc_config(const KeyValues& kv, DscConfig d = {}) {
  d.rounds = kv.number<int>("dsc.rounds", d.rounds);
  d.share_attention = kv.flag("dsc.share_attention", d.share_attention);
  d.attention_enabled = kv.flag("dsc.attention", d.attention_enabled);
  d.layout = parse_layout(kv.get("dsc.layout", to_string(d.layout)));
  d.validate();
  return d;
}

inline NetworkConfig read_network_config(const KeyValues& kv, NetworkConfig n = {}) {
  n.in_channels = kv.number<std::size_t>("network.in_channels", n.in_channels);
  n.stage_channels = kv.list<std::size_t>("network.channels", n.stage_channels);
  n.use_dsc = kv.flag("network.dsc", n.use_dsc);
  n.mlif_channels = kv.number<std::size_t>("network.mlif_channels", n.mlif_channels);
  n.dsc = read_dsc_config(kv, n.dsc);
  n.validate();
  return n;
}

inline void write_network_config(KeyValues& kv, const NetworkConfig& n) {
  std::string channels;
  for (std::size_t i = 0; i < n.stage_channels.size(); ++i) {
    channels += (i ? "," : "") + std::to_string(n.stage_channels[i]);
  }
  kv.set("network.in_channels", std::to_string(n.in_channels));
  kv.set("network.channels", channels);
  kv.set("network.dsc", n.use_dsc ? "1" : "0");
  kv.set("network.mlif_channels", std::to_string(n.mlif_channels));
  kv.set("dsc.rounds", std::to_string(n.dsc.rounds));
  kv.set("dsc.share_attention", n.dsc.share_attention ? "1" : "0");
  kv.set("dsc.attention", n.dsc.attention_enabled ? "1" : "0");
  kv.set("dsc.layout", to_string(n.dsc.layout));
}

}  // namespace dsc
