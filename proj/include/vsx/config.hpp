#pragma once

// Run configuration and its file form: flat key=value text with sectioned
// keys (model.kind=resunet). Zero-dependency parsing, lossless round-trip.

#include <charconv>
#include <string>
#include <system_error>
#include <vector>

#include "vsx/models.hpp"
#include "vsx/serialize.hpp"
#include "vsx/train.hpp"

namespace vsx {

struct RunConfig {
  std::string model_kind = "unet";  // unet | resunet | attunet
  i64 base_width = 8;
  std::string preset = "desk";  // desk | paper; baseline for trainer fields
  TrainerConfig trainer = desk_preset();
  std::string manifest;  // dataset manifest path; empty until configured
  u64 seed = 7;
  std::string out_dir = "runs";

  bool operator==(const RunConfig&) const = default;
};

inline TrainerConfig preset_trainer(const std::string& preset) {
  if (preset == "desk") return desk_preset();
  if (preset == "paper") return paper_preset();
  throw ArgumentError("unknown preset '" + preset + "' (expected desk|paper)");
}

namespace detail {

// Shortest text that parses back to the identical double.
inline std::string num_str(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string num_str(i64 v) { return std::to_string(v); }
inline std::string num_str(int v) { return std::to_string(v); }
inline std::string num_str(u64 v) { return std::to_string(v); }

template <typename T>
T parse_num(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  std::from_chars_result res;
  if constexpr (std::is_floating_point_v<T>) {
    res = std::from_chars(first, last, v);
  } else {
    res = std::from_chars(first, last, v, 10);
  }
  if (res.ec != std::errc() || res.ptr != last) {
    throw ArgumentError("config: key '" + key + "' has a malformed number '" + text + "'");
  }
  return v;
}

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string write_config(const RunConfig& cfg) {
  using detail::num_str;
  std::string text;
  auto put = [&](const std::string& key, const std::string& value) {
    text += key + "=" + value + "\n";
  };
  put("model.kind", cfg.model_kind);
  put("model.base_width", num_str(cfg.base_width));
  put("run.preset", cfg.preset);
  put("run.seed", num_str(cfg.seed));
  put("run.out_dir", cfg.out_dir);
  put("data.manifest", cfg.manifest);
  put("train.batch_size", num_str(cfg.trainer.batch_size));
  put("train.grad_accum_steps", num_str(cfg.trainer.grad_accum_steps));
  put("train.learning_rate", num_str(cfg.trainer.learning_rate));
  put("train.plateau_factor", num_str(cfg.trainer.plateau_factor));
  put("train.plateau_patience", num_str(cfg.trainer.plateau_patience));
  put("train.early_stop_patience", num_str(cfg.trainer.early_stop_patience));
  put("train.min_delta", num_str(cfg.trainer.min_delta));
  put("train.max_epochs", num_str(cfg.trainer.max_epochs));
  return text;
}

// Lines are key=value; '#' starts a comment, blank lines are skipped, later
// duplicates win. run.preset is applied before train.* keys, so a file may
// state a preset and override individual knobs regardless of line order.
inline RunConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos
                                                                 : eol - pos);
    pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
    line_no++;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ArgumentError("config line " + std::to_string(line_no) +
                          ": expected key=value, got '" + line + "'");
    }
    pairs.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }

  RunConfig cfg;
  for (const auto& [key, value] : pairs) {
    if (key == "run.preset") {
      cfg.preset = value;
      cfg.trainer = preset_trainer(value);
    }
  }
  for (const auto& [key, value] : pairs) {
    if (key == "model.kind") {
      parse_model_kind(value);  // validate early with its own message
      cfg.model_kind = value;
    } else if (key == "model.base_width") {
      cfg.base_width = detail::parse_num<i64>(key, value);
    } else if (key == "run.preset") {
      // handled above
    } else if (key == "run.seed") {
      cfg.seed = detail::parse_num<u64>(key, value);
    } else if (key == "run.out_dir") {
      cfg.out_dir = value;
    } else if (key == "data.manifest") {
      cfg.manifest = value;
    } else if (key == "train.batch_size") {
      cfg.trainer.batch_size = detail::parse_num<i64>(key, value);
    } else if (key == "train.grad_accum_steps") {
      cfg.trainer.grad_accum_steps = detail::parse_num<i64>(key, value);
    } else if (key == "train.learning_rate") {
      cfg.trainer.learning_rate = detail::parse_num<double>(key, value);
    } else if (key == "train.plateau_factor") {
      cfg.trainer.plateau_factor = detail::parse_num<double>(key, value);
    } else if (key == "train.plateau_patience") {
      cfg.trainer.plateau_patience = detail::parse_num<int>(key, value);
    } else if (key == "train.early_stop_patience") {
      cfg.trainer.early_stop_patience = detail::parse_num<int>(key, value);
    } else if (key == "train.min_delta") {
      cfg.trainer.min_delta = detail::parse_num<double>(key, value);
    } else if (key == "train.max_epochs") {
      cfg.trainer.max_epochs = detail::parse_num<int>(key, value);
    } else {
      throw ArgumentError("config: unknown key '" + key + "'");
    }
  }
  return cfg;
}

inline void save_config(const RunConfig& cfg, const std::string& path) {
  io::atomic_write_file(path, [&](std::ostream& os) { os << write_config(cfg); });
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is = io::open_input(path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

}  // namespace vsx
