#pragma once

// Command layer: phantom generation, training, evaluation, and explanation
// as plain functions, plus the flag parser the vsx binary dispatches through.
// Every command writes its outputs atomically and reports failures as
// single-line errors so scripted callers can parse them.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "vsx/config.hpp"
#include "vsx/data.hpp"
#include "vsx/train.hpp"
#include "vsx/xai.hpp"

namespace vsx {

// ---------------------------------------------------------------------------
// phantom: synthesize cases and a split manifest

struct PhantomOutputs {
  std::string manifest_path;
  std::vector<ManifestEntry> entries;
};

inline PhantomOutputs cmd_phantom(i64 count, const std::array<i64, 3>& dims, u64 seed,
                                  const std::string& out_dir) {
  require(count >= 0, "phantom: count must be nonnegative");
  std::filesystem::create_directories(out_dir);
  std::vector<Split> splits = split_dataset(count, seed);
  std::vector<ManifestEntry> entries;
  entries.reserve(static_cast<size_t>(count));
  for (i64 i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%04lld", static_cast<long long>(i));
    CaseRecord rec = make_phantom(dims[0], dims[1], dims[2], seed + static_cast<u64>(i));
    ManifestEntry e;
    e.id = id;
    e.image_path = std::string(id) + "_img.vsxv";
    e.mask_path = std::string(id) + "_msk.vsxv";
    e.split = split_name(splits[static_cast<size_t>(i)]);
    write_volume(join_path(out_dir, e.image_path), rec.image);
    write_volume(join_path(out_dir, e.mask_path), rec.mask.channels);
    entries.push_back(std::move(e));
  }
  std::string manifest_path = join_path(out_dir, "manifest.tsv");
  write_manifest(manifest_path, entries);
  return {manifest_path, std::move(entries)};
}

// ---------------------------------------------------------------------------
// train: manifest -> best-validation checkpoint + epoch log

struct TrainOutputs {
  std::string checkpoint_path;
  std::string log_path;
  std::string config_path;
  TrainResult result;
  i64 train_cases = 0;
  i64 val_cases = 0;
};

namespace detail {

inline std::string dims_str(const Shape& s) {
  std::string t;
  for (size_t i = 1; i < s.size(); ++i) {
    if (!t.empty()) t += "x";
    t += std::to_string(s[i]);
  }
  return t;
}

// The four pooling stages halve each axis, so inputs must be multiples of 16.
inline void require_pool_compatible(const std::string& cmd, const std::string& id,
                                    const Shape& image_shape) {
  for (size_t a = 1; a < image_shape.size(); ++a) {
    if (image_shape[a] % 16 != 0) {
      throw DataError(cmd + ": case '" + id + "' has dims " + dims_str(image_shape) +
                      "; every axis must be a multiple of 16");
    }
  }
}

}  // namespace detail

inline TrainOutputs cmd_train(const RunConfig& cfg, bool resume = false,
                              const std::function<void(const EpochRow&)>& on_epoch = {}) {
  require(!cfg.manifest.empty(),
          "train: no manifest configured (set --manifest or data.manifest)");
  std::vector<ManifestEntry> entries = read_manifest(cfg.manifest);
  std::string base = parent_dir(cfg.manifest);

  std::vector<TrainCase> train_cases, val_cases;
  i64 channels = -1;
  for (const auto& e : entries) {
    Split tag = parse_split(e.split);
    if (tag == Split::test) continue;
    CaseRecord rec = load_case(e, base);
    detail::require_pool_compatible("train", e.id, rec.image.shape());
    if (channels < 0) channels = rec.image.shape()[0];
    if (rec.image.shape()[0] != channels) {
      throw DataError("train: case '" + e.id + "' has " +
                      std::to_string(rec.image.shape()[0]) + " channels; expected " +
                      std::to_string(channels));
    }
    TrainCase tc{e.id, normalize_intensities(rec.image), rec.mask.channels};
    (tag == Split::train ? train_cases : val_cases).push_back(std::move(tc));
  }
  require(!train_cases.empty(), "train: manifest has no train-split cases");

  std::filesystem::create_directories(cfg.out_dir);
  std::string checkpoint_path = join_path(cfg.out_dir, "model.vsxc");

  ModelGraphT<float> model =
      resume ? load_checkpoint(checkpoint_path)
             : build<float>(parse_model_kind(cfg.model_kind), channels, cfg.base_width,
                            cfg.seed);
  if (resume) {
    if (cfg.model_kind != model_kind_name(model.kind)) {
      throw ArgumentError(std::string("resume: checkpoint holds a ") +
                          model_kind_name(model.kind) + " but the run is configured for " +
                          cfg.model_kind);
    }
    if (model.in_channels != channels) {
      throw DataError("resume: checkpoint expects " + std::to_string(model.in_channels) +
                      "-channel input but the manifest cases have " +
                      std::to_string(channels) + " channels");
    }
  }

  TrainResult result =
      fit(model, train_cases, val_cases, cfg.trainer, cfg.seed, checkpoint_path, on_epoch);

  std::string log_path = join_path(cfg.out_dir, "training_log.csv");
  io::atomic_write_file(log_path, [&](std::ostream& os) {
    os << epoch_csv_header() << "\n";
    for (const auto& r : result.rows) os << epoch_csv_row(r) << "\n";
  });
  std::string config_path = join_path(cfg.out_dir, "run_config.cfg");
  save_config(cfg, config_path);

  return {checkpoint_path,
          log_path,
          config_path,
          std::move(result),
          static_cast<i64>(train_cases.size()),
          static_cast<i64>(val_cases.size())};
}

// ---------------------------------------------------------------------------
// eval: per-volume, per-class scores plus mean and standard-error rows

struct EvalOutputs {
  std::string csv_path;
  i64 volumes = 0;
  std::vector<std::string> rows;  // data rows exactly as written (header excluded)
};

inline EvalOutputs cmd_eval(const std::string& checkpoint_path,
                            const std::string& manifest_path, const std::string& split,
                            const std::string& out_dir, std::ostream& warn) {
  Split want = parse_split(split);
  ModelGraphT<float> model = load_checkpoint(checkpoint_path);
  std::vector<ManifestEntry> entries = read_manifest(manifest_path);
  std::string base = parent_dir(manifest_path);
  std::filesystem::create_directories(out_dir);

  const std::string model_name = model_kind_name(model.kind);
  const auto& class_names = tumor_class_names();
  std::vector<std::string> rows;
  // per class, per metric, one value per volume
  std::vector<std::array<std::vector<double>, 6>> samples(class_names.size());

  i64 volumes = 0;
  for (const auto& e : entries) {
    if (parse_split(e.split) != want) continue;
    CaseRecord rec = load_case(e, base);
    detail::require_pool_compatible("eval", e.id, rec.image.shape());
    if (rec.image.shape()[0] != model.in_channels) {
      throw DataError("eval: case '" + e.id + "' has " +
                      std::to_string(rec.image.shape()[0]) +
                      " channels but the checkpoint expects " +
                      std::to_string(model.in_channels));
    }
    TensorF image = normalize_intensities(rec.image);
    const Shape& s = image.shape();
    NoGradGuard inference;
    TensorF batch = reshape(image, {1, s[0], s[1], s[2], s[3]});
    PredictionT<float> pred = predict(model, batch);
    TensorF truth = reshape(rec.mask.channels, {1, 3, s[1], s[2], s[3]});
    ScoreReport report = per_class_report(pred.binary_mask, truth);
    for (size_t c = 0; c < report.per_class.size(); ++c) {
      const ScoreEntry& sc = report.per_class[c];
      rows.push_back(score_csv_row(model_name, split, e.id, sc));
      samples[c][0].push_back(sc.dice);
      samples[c][1].push_back(sc.jaccard);
      samples[c][2].push_back(sc.accuracy);
      samples[c][3].push_back(sc.precision);
      samples[c][4].push_back(sc.recall);
      samples[c][5].push_back(sc.f1);
    }
    volumes++;
  }

  if (volumes == 0) {
    warn << "warning: split '" << split << "' has no cases in " << manifest_path
         << "; writing a header-only report\n";
  } else {
    for (size_t c = 0; c < class_names.size(); ++c) {
      ScoreEntry mean_e, se_e;
      mean_e.class_name = se_e.class_name = class_names[c];
      std::array<double ScoreEntry::*, 6> fields = {
          &ScoreEntry::dice,      &ScoreEntry::jaccard, &ScoreEntry::accuracy,
          &ScoreEntry::precision, &ScoreEntry::recall,  &ScoreEntry::f1};
      for (size_t m = 0; m < fields.size(); ++m) {
        MeanSE stat = mean_se(samples[c][m]);
        mean_e.*fields[m] = stat.mean;
        se_e.*fields[m] = stat.se;
      }
      rows.push_back(score_csv_row(model_name, split, "mean", mean_e));
      rows.push_back(score_csv_row(model_name, split, "se", se_e));
    }
  }

  std::string csv_path = join_path(out_dir, "scores_" + split + ".csv");
  io::atomic_write_file(csv_path, [&](std::ostream& os) {
    os << score_csv_header() << "\n";
    for (const auto& r : rows) os << r << "\n";
  });
  return {csv_path, volumes, std::move(rows)};
}

// ---------------------------------------------------------------------------
// explain: heatmap volume + mid-slice renderings for one case

struct ExplainOutputs {
  std::vector<std::string> files;  // heatmap volume first, then the mid-slice images
  Heatmap heatmap;
};

inline ExplainOutputs cmd_explain(const std::string& checkpoint_path,
                                  const std::string& case_path,
                                  const std::string& class_name, const std::string& method,
                                  const std::string& out_dir) {
  i64 class_index = -1;
  const auto& names = tumor_class_names();
  for (size_t i = 0; i < names.size(); ++i) {
    if (names[i] == class_name) class_index = static_cast<i64>(i);
  }
  if (class_index < 0) {
    throw ArgumentError("explain: unknown class '" + class_name + "' (expected WT|TC|ET)");
  }
  if (method != "gradcam" && method != "attention") {
    throw ArgumentError("explain: unknown method '" + method +
                        "' (expected gradcam|attention)");
  }

  ModelGraphT<float> model = load_checkpoint(checkpoint_path);
  TensorF image = case_path.ends_with(".nii") ? read_nifti(case_path)
                                              : read_volume(case_path);
  detail::require_pool_compatible("explain", case_path, image.shape());
  if (image.shape()[0] != model.in_channels) {
    throw DataError("explain: volume has " + std::to_string(image.shape()[0]) +
                    " channels but the checkpoint expects " +
                    std::to_string(model.in_channels));
  }
  image = normalize_intensities(image);

  Heatmap heat = method == "gradcam" ? grad_cam(model, image, class_index)
                                     : attention_map(model, image);

  std::filesystem::create_directories(out_dir);
  std::string tag = method == "attention" ? "attention" : "gradcam_" + class_name;
  std::string stem = join_path(out_dir, "heatmap_" + tag);
  std::vector<std::string> files = export_heatmap(heat, stem + ".vsxv");
  for (int axis = 0; axis < 3; ++axis) {
    i64 mid = heat.grid.shape()[static_cast<size_t>(axis)] / 2;
    std::string path = stem + "_mid_axis" + std::to_string(axis) + ".pgm";
    write_heatmap_slice(heat, axis, mid, path);
    files.push_back(path);
  }
  return {std::move(files), std::move(heat)};
}

// ---------------------------------------------------------------------------
// Flag parsing and dispatch

namespace detail {

struct FlagSet {
  std::map<std::string, std::string> values;
  std::vector<std::string> switches;  // value-less flags like --resume

  bool has(const std::string& name) const {
    if (values.count(name)) return true;
    for (const auto& s : switches) {
      if (s == name) return true;
    }
    return false;
  }

  std::string get(const std::string& name, const std::string& fallback) const {
    auto it = values.find(name);
    return it == values.end() ? fallback : it->second;
  }

  std::string need(const std::string& name, const std::string& cmd) const {
    auto it = values.find(name);
    if (it == values.end()) {
      throw ArgumentError(cmd + ": missing required flag --" + name);
    }
    return it->second;
  }
};

inline FlagSet parse_flags(const std::vector<std::string>& args, size_t start,
                           const std::vector<std::string>& valued,
                           const std::vector<std::string>& boolean,
                           const std::string& cmd) {
  FlagSet fs;
  for (size_t i = start; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.size() < 3 || a.rfind("--", 0) != 0) {
      throw ArgumentError(cmd + ": unexpected argument '" + a + "'");
    }
    std::string name = a.substr(2);
    std::string inline_value;
    bool has_inline = false;
    size_t eq = name.find('=');
    if (eq != std::string::npos) {
      inline_value = name.substr(eq + 1);
      name = name.substr(0, eq);
      has_inline = true;
    }
    bool is_valued = std::find(valued.begin(), valued.end(), name) != valued.end();
    bool is_bool = std::find(boolean.begin(), boolean.end(), name) != boolean.end();
    if (!is_valued && !is_bool) {
      throw ArgumentError(cmd + ": unknown flag --" + name);
    }
    if (is_bool) {
      if (has_inline) throw ArgumentError(cmd + ": flag --" + name + " takes no value");
      fs.switches.push_back(name);
      continue;
    }
    if (has_inline) {
      fs.values[name] = inline_value;
    } else {
      if (i + 1 >= args.size()) {
        throw ArgumentError(cmd + ": flag --" + name + " expects a value");
      }
      fs.values[name] = args[++i];
    }
  }
  return fs;
}

inline std::array<i64, 3> parse_dims(const std::string& text) {
  std::array<i64, 3> dims{};
  std::vector<std::string> parts;
  size_t pos = 0;
  while (true) {
    size_t x = text.find('x', pos);
    parts.push_back(text.substr(pos, x == std::string::npos ? std::string::npos : x - pos));
    if (x == std::string::npos) break;
    pos = x + 1;
  }
  if (parts.size() == 1) {
    i64 n = parse_num<i64>("--dims", parts[0]);
    dims = {n, n, n};
  } else if (parts.size() == 3) {
    for (size_t i = 0; i < 3; ++i) dims[i] = parse_num<i64>("--dims", parts[i]);
  } else {
    throw ArgumentError("phantom: bad --dims '" + text + "' (expected N or DxHxW)");
  }
  return dims;
}

inline const char* usage_text() {
  return
      "usage: vsx <command> [flags]\n"
      "\n"
      "commands:\n"
      "  phantom   synthesize nested-ellipsoid cases and a split manifest\n"
      "            --count N [--dims N|DxHxW] [--seed S] [--out DIR]\n"
      "  train     fit a model and keep the best-validation checkpoint\n"
      "            [--config FILE] [--preset desk|paper] [--model unet|resunet|attunet]\n"
      "            [--width W] [--manifest FILE] [--seed S] [--out DIR] [--resume]\n"
      "  eval      score a checkpoint on one manifest split\n"
      "            --checkpoint FILE --manifest FILE [--split train|val|test] [--out DIR]\n"
      "  explain   write heatmap volume + mid-slice images for one case\n"
      "            --checkpoint FILE --case FILE [--class WT|TC|ET]\n"
      "            [--method gradcam|attention] [--out DIR]\n"
      "\n"
      "Flags may be --name value or --name=value. The config file is flat\n"
      "key=value text (model.kind=resunet); flags override file settings.\n"
      "VSX_THREADS caps kernel parallelism. Errors print one machine-parsable\n"
      "line to stderr and exit nonzero.\n";
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out,
                    std::ostream& err) {
  if (args.empty()) {
    err << usage_text();
    return 2;
  }
  const std::string& cmd = args[0];
  if (cmd == "help" || cmd == "--help" || cmd == "-h") {
    out << usage_text();
    return 0;
  }

  if (cmd == "phantom") {
    FlagSet fs = parse_flags(args, 1, {"count", "dims", "seed", "out"}, {}, cmd);
    i64 count = parse_num<i64>("--count", fs.need("count", cmd));
    std::array<i64, 3> dims = parse_dims(fs.get("dims", "32"));
    u64 seed = parse_num<u64>("--seed", fs.get("seed", "7"));
    PhantomOutputs res = cmd_phantom(count, dims, seed, fs.get("out", "phantom_data"));
    out << "wrote " << res.entries.size() << " case(s); manifest " << res.manifest_path
        << "\n";
    return 0;
  }

  if (cmd == "train") {
    FlagSet fs = parse_flags(
        args, 1, {"config", "preset", "model", "width", "manifest", "seed", "out"},
        {"resume"}, cmd);
    RunConfig cfg;
    if (fs.has("config")) cfg = load_config(fs.values.at("config"));
    if (fs.has("preset")) {
      cfg.preset = fs.values.at("preset");
      cfg.trainer = preset_trainer(cfg.preset);
    }
    if (fs.has("model")) {
      parse_model_kind(fs.values.at("model"));
      cfg.model_kind = fs.values.at("model");
    }
    if (fs.has("width")) cfg.base_width = parse_num<i64>("--width", fs.values.at("width"));
    if (fs.has("manifest")) cfg.manifest = fs.values.at("manifest");
    if (fs.has("seed")) cfg.seed = parse_num<u64>("--seed", fs.values.at("seed"));
    if (fs.has("out")) cfg.out_dir = fs.values.at("out");

    TrainOutputs res = cmd_train(cfg, fs.has("resume"), [&](const EpochRow& r) {
      out << "epoch " << r.epoch << "  train " << r.train_loss << "  val " << r.val_loss
          << "  dice " << r.val_dice << "  lr " << r.lr << "\n";
    });
    out << "trained " << cfg.model_kind << " for " << res.result.rows.size()
        << " epoch(s); best val loss " << res.result.best_val_loss << " at epoch "
        << res.result.best_epoch << (res.result.stopped_early ? " (early stop)" : "")
        << "\ncheckpoint " << res.checkpoint_path << "\nlog " << res.log_path << "\n";
    return 0;
  }

  if (cmd == "eval") {
    FlagSet fs = parse_flags(args, 1, {"checkpoint", "manifest", "split", "out"}, {}, cmd);
    EvalOutputs res =
        cmd_eval(fs.need("checkpoint", cmd), fs.need("manifest", cmd),
                 fs.get("split", "test"), fs.get("out", "."), err);
    out << "scored " << res.volumes << " volume(s); report " << res.csv_path << "\n";
    return 0;
  }

  if (cmd == "explain") {
    FlagSet fs = parse_flags(args, 1, {"checkpoint", "case", "class", "method", "out"},
                             {}, cmd);
    ExplainOutputs res =
        cmd_explain(fs.need("checkpoint", cmd), fs.need("case", cmd),
                    fs.get("class", "WT"), fs.get("method", "gradcam"), fs.get("out", "."));
    for (const auto& f : res.files) out << f << "\n";
    return 0;
  }

  err << "error: unknown command '" << cmd << "' (expected phantom|train|eval|explain)\n";
  return 2;
}

}  // namespace detail

/// Runs one CLI invocation. Success returns 0; failures print a single
/// "error: ..." line to err and return a category-specific nonzero code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out,
                   std::ostream& err) {
  try {
    return detail::dispatch(args, out, err);
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const StateError& e) {
    err << "error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace vsx
