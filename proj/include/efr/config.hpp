#pragma once

// Flat `key = value` config files for LossConfig. Blank lines and text after
// '#' are ignored; unknown keys and malformed values are errors.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "efr/adaptation.hpp"
#include "efr/error.hpp"

namespace efr {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw ConfigError("bad value '" + std::string(text) + "' for key " + std::string(key), std::string(key));
  return value;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad boolean '" + std::string(text) + "' for key " + std::string(key) + " (use true/false)",
                    std::string(key));
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

using Setter = std::function<void(LossConfig&, std::string_view key, std::string_view value)>;
using Getter = std::function<std::string(const LossConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

template <typename T>
Field number_field(T LossConfig::*member) {
  return {[member](LossConfig& c, std::string_view k, std::string_view v) { c.*member = parse_number<T>(k, v); },
          [member](const LossConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*member);
            else
              return std::to_string(c.*member);
          }};
}

inline Field bool_field(bool LossConfig::*member) {
  return {[member](LossConfig& c, std::string_view k, std::string_view v) { c.*member = parse_bool(k, v); },
          [member](const LossConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

/// Ordered so that rendering is stable.
inline const std::map<std::string, Field, std::less<>>& config_fields() {
  static const std::map<std::string, Field, std::less<>> fields = {
      {"preset", {[](LossConfig& c, std::string_view, std::string_view v) { c.preset = std::string(v); },
                  [](const LossConfig& c) { return c.preset; }}},
      {"lambda1", number_field(&LossConfig::lambda1)},
      {"lambda2", number_field(&LossConfig::lambda2)},
      {"tau", number_field(&LossConfig::tau)},
      {"t_slices", number_field(&LossConfig::t_slices)},
      {"epsilon", number_field(&LossConfig::epsilon)},
      {"outer_iters", number_field(&LossConfig::outer_iters)},
      {"inner_iters", number_field(&LossConfig::inner_iters)},
      {"coupling_restarts", number_field(&LossConfig::coupling_restarts)},
      {"per_slice_coupling", bool_field(&LossConfig::per_slice_coupling)},
      {"batch_size", number_field(&LossConfig::batch_size)},
      {"iterations", number_field(&LossConfig::iterations)},
      {"lr", number_field(&LossConfig::lr)},
      {"beta1", number_field(&LossConfig::beta1)},
      {"beta2", number_field(&LossConfig::beta2)},
      {"seed", number_field(&LossConfig::seed)},
      {"n_shot", number_field(&LossConfig::n_shot)},
      {"rotate", bool_field(&LossConfig::rotate)},
      {"literal_gan_loss",
       {[](LossConfig& c, std::string_view k, std::string_view v) {
          c.gan_loss = parse_bool(k, v) ? GanLossForm::Literal : GanLossForm::NonSaturating;
        },
        [](const LossConfig& c) { return std::string(c.gan_loss == GanLossForm::Literal ? "true" : "false"); }}},
  };
  return fields;
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`.
inline LossConfig parse_config(std::string_view text, LossConfig base = {}) {
  const auto& fields = detail::config_fields();
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value", std::string(line));
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key '" + std::string(key) + "'", std::string(key));
    it->second.set(base, key, value);
  }
  return base;
}

inline LossConfig load_config(const std::filesystem::path& path, LossConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Every field as `key = value`; parse_config(render_config(c)) == c.
inline std::string render_config(const LossConfig& c) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(c) + "\n";
  return out;
}

inline std::map<std::string, std::string> config_snapshot(const LossConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : detail::config_fields()) out[key] = field.get(c);
  return out;
}

}  // namespace efr
