// Config round-trips, phantom generation, the train/eval/explain commands,
// and the flag-parsing envelope with its exit codes.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "catch_amalgamated.hpp"
#include "vsx/cli.hpp"

using namespace vsx;

namespace {

std::string fresh_dir(const char* name) {
  std::string dir = std::string("/tmp/vsx_cli_") + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) {
      lines.push_back(text.substr(pos));
      break;
    }
    lines.push_back(text.substr(pos, eol - pos));
    pos = eol + 1;
  }
  return lines;
}

std::vector<std::string> split_fields(const std::string& row) {
  std::vector<std::string> fields;
  size_t pos = 0;
  while (true) {
    size_t c = row.find(',', pos);
    fields.push_back(row.substr(pos, c == std::string::npos ? std::string::npos : c - pos));
    if (c == std::string::npos) break;
    pos = c + 1;
  }
  return fields;
}

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("run config: defaults and lossless file round-trip") {
  RunConfig def;
  CHECK(def.model_kind == "unet");
  CHECK(def.base_width == 8);
  CHECK(def.preset == "desk");
  CHECK(def.trainer == desk_preset());
  CHECK(def.manifest.empty());
  CHECK(def.out_dir == "runs");

  CHECK(parse_config("") == RunConfig{});
  CHECK(parse_config(write_config(def)) == def);

  RunConfig cfg;
  cfg.model_kind = "resunet";
  cfg.base_width = 16;
  cfg.preset = "paper";
  cfg.trainer = paper_preset();
  cfg.trainer.batch_size = 3;  // preset field overridden by hand
  cfg.trainer.learning_rate = 1.2345678901234567e-4;
  cfg.trainer.min_delta = 3e-7;
  cfg.trainer.max_epochs = 55;
  cfg.manifest = "data/manifest.tsv";
  cfg.seed = 123456789012345ULL;
  cfg.out_dir = "runs/paper a";
  CHECK(parse_config(write_config(cfg)) == cfg);

  std::string dir = fresh_dir("config");
  std::string path = dir + "/run.cfg";
  save_config(cfg, path);
  CHECK(load_config(path) == cfg);
  CHECK_FALSE(std::ifstream(path + ".tmp").good());

  CHECK(preset_trainer("desk") == desk_preset());
  CHECK(preset_trainer("paper") == paper_preset());
  CHECK(preset_trainer("paper").batch_size == 64);
}

TEST_CASE("run config: parsing rules and malformed input") {
  // preset applies before train.* keys regardless of line order
  RunConfig c1 = parse_config("train.batch_size=5\nrun.preset=paper\n");
  CHECK(c1.preset == "paper");
  CHECK(c1.trainer.batch_size == 5);
  CHECK(c1.trainer.max_epochs == paper_preset().max_epochs);

  // comments, blank lines, whitespace, duplicate keys (last wins)
  RunConfig c2 = parse_config(
      "# a comment\n"
      "\n"
      "  model.kind = attunet  # trailing comment\n"
      "run.seed=1\n"
      "run.seed=2\n");
  CHECK(c2.model_kind == "attunet");
  CHECK(c2.seed == 2);

  CHECK(parse_config("data.manifest=\n").manifest.empty());

  CHECK_THROWS_AS(parse_config("nonsense line\n"), ArgumentError);
  CHECK_THROWS_WITH(parse_config("run.seed=1\nnonsense line\n"),
                    Catch::Matchers::ContainsSubstring("line 2"));
  CHECK_THROWS_WITH(parse_config("model.flavor=unet\n"),
                    Catch::Matchers::ContainsSubstring("unknown key 'model.flavor'"));
  CHECK_THROWS_AS(parse_config("model.kind=vgg\n"), ArgumentError);
  CHECK_THROWS_AS(parse_config("run.preset=cluster\n"), ArgumentError);
  CHECK_THROWS_WITH(parse_config("train.batch_size=two\n"),
                    Catch::Matchers::ContainsSubstring("malformed number"));
  CHECK_THROWS_AS(parse_config("train.learning_rate=1e\n"), ArgumentError);
  CHECK_THROWS_AS(parse_config("run.seed=-3\n"), ArgumentError);
  CHECK_THROWS_AS(preset_trainer("fast"), ArgumentError);
}

TEST_CASE("phantom command: split tags, determinism, empty set") {
  std::string dir = fresh_dir("phantom");
  PhantomOutputs first = cmd_phantom(10, {16, 16, 16}, 21, dir);
  CHECK(first.entries.size() == 10);
  CHECK(first.manifest_path == dir + "/manifest.tsv");

  std::map<std::string, int> tags;
  for (const auto& e : first.entries) tags[e.split]++;
  CHECK(tags["train"] == 7);
  CHECK(tags["val"] == 2);
  CHECK(tags["test"] == 1);

  // every referenced file loads and matches the generator output exactly
  std::vector<ManifestEntry> read_back = read_manifest(first.manifest_path);
  REQUIRE(read_back.size() == 10);
  CHECK(read_back[3].id == "phantom_0003");
  CaseRecord third = load_case(read_back[3], dir);
  CaseRecord expect = make_phantom(16, 16, 16, 21 + 3);
  CHECK(third.image.vals() == expect.image.vals());
  CHECK(third.mask.channels.vals() == expect.mask.channels.vals());

  // rerun with identical arguments reproduces identical bytes
  std::string manifest_before = slurp(first.manifest_path);
  std::string case_before = slurp(dir + "/phantom_0007_img.vsxv");
  PhantomOutputs second = cmd_phantom(10, {16, 16, 16}, 21, dir);
  CHECK(slurp(second.manifest_path) == manifest_before);
  CHECK(slurp(dir + "/phantom_0007_img.vsxv") == case_before);

  // empty set still writes a (header-less, zero-line) manifest and succeeds
  std::string empty_dir = fresh_dir("phantom_empty");
  PhantomOutputs none = cmd_phantom(0, {16, 16, 16}, 3, empty_dir);
  CHECK(none.entries.empty());
  CHECK(slurp(none.manifest_path).empty());
  CHECK(read_manifest(none.manifest_path).empty());

  CHECK_THROWS_AS(cmd_phantom(-1, {16, 16, 16}, 3, empty_dir), ArgumentError);
  CHECK_THROWS_AS(cmd_phantom(1, {8, 16, 16}, 3, empty_dir), ArgumentError);
}

TEST_CASE("train command: outputs, single-epoch log, determinism") {
  std::string data_dir = fresh_dir("train_data");
  cmd_phantom(5, {16, 16, 16}, 33, data_dir);

  RunConfig cfg;
  cfg.model_kind = "unet";
  cfg.base_width = 4;
  cfg.manifest = data_dir + "/manifest.tsv";
  cfg.seed = 9;
  cfg.out_dir = fresh_dir("train_run");
  cfg.trainer.max_epochs = 2;
  cfg.trainer.batch_size = 2;

  int callback_rows = 0;
  TrainOutputs res = cmd_train(cfg, false, [&](const EpochRow&) { callback_rows++; });
  CHECK(res.train_cases == 3);
  CHECK(res.val_cases == 1);
  CHECK(res.result.rows.size() == 2);
  CHECK(callback_rows == 2);

  ModelGraphT<float> restored = load_checkpoint(res.checkpoint_path);
  CHECK(restored.kind == ModelKind::unet);
  CHECK(restored.base_width == 4);
  CHECK(load_config(res.config_path) == cfg);

  std::vector<std::string> log = split_lines(slurp(res.log_path));
  REQUIRE(log.size() == 3);
  CHECK(log[0] == epoch_csv_header());
  CHECK(log[1].substr(0, 2) == "0,");

  // max_epochs=1 writes exactly one data row
  RunConfig one = cfg;
  one.out_dir = fresh_dir("train_one");
  one.trainer.max_epochs = 1;
  TrainOutputs res_one = cmd_train(one);
  CHECK(split_lines(slurp(res_one.log_path)).size() == 2);
  CHECK(res_one.result.rows.size() == 1);

  // fixed seed + preset => identical epoch-0 losses across runs
  RunConfig again = one;
  again.out_dir = fresh_dir("train_one_repeat");
  TrainOutputs res_again = cmd_train(again);
  CHECK(res_again.result.rows[0].train_loss == res_one.result.rows[0].train_loss);
  CHECK(res_again.result.rows[0].val_loss == res_one.result.rows[0].val_loss);
  std::string row_a = split_lines(slurp(res_one.log_path))[1];
  std::string row_b = split_lines(slurp(res_again.log_path))[1];
  CHECK(row_a.substr(0, row_a.rfind(',')) == row_b.substr(0, row_b.rfind(',')));

  // a different seed changes the first-epoch loss
  RunConfig other = one;
  other.out_dir = fresh_dir("train_other_seed");
  other.seed = 10;
  CHECK(cmd_train(other).result.rows[0].train_loss != res_one.result.rows[0].train_loss);
}

TEST_CASE("train command: resume continuity and failure modes") {
  std::string data_dir = fresh_dir("resume_data");
  cmd_phantom(5, {16, 16, 16}, 44, data_dir);

  RunConfig cfg;
  cfg.model_kind = "unet";
  cfg.base_width = 4;
  cfg.manifest = data_dir + "/manifest.tsv";
  cfg.seed = 5;
  cfg.out_dir = fresh_dir("resume_run");
  cfg.trainer.max_epochs = 4;
  TrainOutputs first = cmd_train(cfg);
  double saved_val = first.result.best_val_loss;

  // resuming at a negligible rate re-measures the saved model: the first
  // resumed epoch's validation loss stays within 5% of the stored one
  RunConfig cont = cfg;
  cont.trainer.learning_rate = 1e-12;
  cont.trainer.max_epochs = 1;
  TrainOutputs resumed = cmd_train(cont, true);
  CHECK(resumed.result.rows[0].val_loss ==
        Catch::Approx(saved_val).epsilon(0.05).margin(1e-9));

  // architecture mismatch on resume is refused
  RunConfig wrong = cont;
  wrong.model_kind = "resunet";
  CHECK_THROWS_AS(cmd_train(wrong, true), ArgumentError);

  // missing manifest file -> IO error; unset manifest -> argument error
  RunConfig missing = cfg;
  missing.manifest = data_dir + "/nope.tsv";
  CHECK_THROWS_AS(cmd_train(missing), IoError);
  RunConfig unset = cfg;
  unset.manifest = "";
  CHECK_THROWS_AS(cmd_train(unset), ArgumentError);

  // a case whose dims the pooling ladder cannot halve is named in the error
  std::string odd_dir = fresh_dir("odd_dims");
  CaseRecord odd = make_phantom(24, 16, 16, 2);
  write_volume(odd_dir + "/odd_img.vsxv", odd.image);
  write_volume(odd_dir + "/odd_msk.vsxv", odd.mask.channels);
  write_manifest(odd_dir + "/manifest.tsv",
                 {{"odd_case", "odd_img.vsxv", "odd_msk.vsxv", "train"}});
  RunConfig odd_cfg = cfg;
  odd_cfg.manifest = odd_dir + "/manifest.tsv";
  odd_cfg.out_dir = fresh_dir("odd_run");
  CHECK_THROWS_WITH(cmd_train(odd_cfg),
                    Catch::Matchers::ContainsSubstring("odd_case") &&
                        Catch::Matchers::ContainsSubstring("24x16x16"));
}

TEST_CASE("eval command: per-volume rows, aggregate statistics, empty split") {
  CHECK(mean_se({0.90, 0.92, 0.94}).mean == Catch::Approx(0.92).margin(1e-12));
  CHECK(mean_se({0.90, 0.92, 0.94}).se == Catch::Approx(0.02 / std::sqrt(3.0)).margin(1e-12));
  CHECK(mean_se({0.5}).se == 0.0);
  CHECK(mean_se({}).n == 0);

  std::string data_dir = fresh_dir("eval_data");
  cmd_phantom(5, {16, 16, 16}, 55, data_dir);  // 3 train / 1 val / 1 test

  std::string ckpt = data_dir + "/model.vsxc";
  save_checkpoint(build<float>(ModelKind::unet, 4, 4, 11), ckpt);

  std::ostringstream warn;
  std::string out_dir = fresh_dir("eval_out");
  EvalOutputs res = cmd_eval(ckpt, data_dir + "/manifest.tsv", "train", out_dir, warn);
  CHECK(res.volumes == 3);
  CHECK(warn.str().empty());
  CHECK(res.csv_path == out_dir + "/scores_train.csv");

  std::vector<std::string> lines = split_lines(slurp(res.csv_path));
  REQUIRE(lines.size() == 1 + 3 * 3 + 3 * 2);  // header + volume rows + mean/se rows
  CHECK(lines[0] == score_csv_header());
  CHECK(res.rows.size() == lines.size() - 1);
  for (size_t i = 0; i < res.rows.size(); ++i) CHECK(res.rows[i] == lines[i + 1]);

  // volume rows come first, then per-class mean and se rows
  auto f0 = split_fields(lines[1]);
  REQUIRE(f0.size() == 10);
  CHECK(f0[0] == "unet");
  CHECK(f0[1] == "train");
  CHECK(f0[2].rfind("phantom_", 0) == 0);
  CHECK(f0[3] == "WT");

  std::map<std::string, std::map<std::string, std::vector<double>>> dice;  // kind->class
  for (size_t i = 1; i < lines.size(); ++i) {
    auto f = split_fields(lines[i]);
    REQUIRE(f.size() == 10);
    std::string kind = (f[2] == "mean" || f[2] == "se") ? f[2] : "volume";
    dice[kind][f[3]].push_back(std::stod(f[4]));
  }
  REQUIRE(dice["volume"]["WT"].size() == 3);
  REQUIRE(dice["mean"]["WT"].size() == 1);
  REQUIRE(dice["se"]["ET"].size() == 1);

  for (const char* cls : {"WT", "TC", "ET"}) {
    MeanSE stat = mean_se(dice["volume"][cls]);
    CHECK(dice["mean"][cls][0] == Catch::Approx(stat.mean).margin(2e-6));
    CHECK(dice["se"][cls][0] == Catch::Approx(stat.se).margin(2e-6));
  }

  // empty split: header-only file plus a warning, still a success
  std::ostringstream warn2;
  std::string manifest2 = data_dir + "/no_test.tsv";
  write_manifest(manifest2, {{"a", "phantom_0000_img.vsxv", "phantom_0000_msk.vsxv",
                              "train"}});
  EvalOutputs empty = cmd_eval(ckpt, manifest2, "test", fresh_dir("eval_empty"), warn2);
  CHECK(empty.volumes == 0);
  CHECK(empty.rows.empty());
  CHECK(split_lines(slurp(empty.csv_path)) == std::vector<std::string>{score_csv_header()});
  CHECK(warn2.str().find("warning:") == 0);
  CHECK(warn2.str().find("'test'") != std::string::npos);

  CHECK_THROWS_AS(cmd_eval(ckpt, data_dir + "/manifest.tsv", "holdout", out_dir, warn),
                  ArgumentError);
  CHECK_THROWS_AS(cmd_eval(data_dir + "/missing.vsxc", data_dir + "/manifest.tsv", "train",
                           out_dir, warn),
                  IoError);
}

TEST_CASE("explain command: heatmap files, methods, validation") {
  std::string dir = fresh_dir("explain");
  CaseRecord rec = make_phantom(16, 16, 16, 66);
  std::string case_path = dir + "/case_img.vsxv";
  write_volume(case_path, rec.image);

  std::string unet_ckpt = dir + "/unet.vsxc";
  save_checkpoint(build<float>(ModelKind::unet, 4, 4, 1), unet_ckpt);
  std::string att_ckpt = dir + "/att.vsxc";
  save_checkpoint(build<float>(ModelKind::attunet, 4, 4, 1), att_ckpt);

  ExplainOutputs cam = cmd_explain(unet_ckpt, case_path, "TC", "gradcam", dir);
  REQUIRE(cam.files.size() == 4);
  CHECK(cam.files[0] == dir + "/heatmap_gradcam_TC.vsxv");
  CHECK(cam.files[1] == dir + "/heatmap_gradcam_TC_mid_axis0.pgm");
  CHECK(cam.files[3] == dir + "/heatmap_gradcam_TC_mid_axis2.pgm");

  // heatmap volume matches the case grid and stays inside [0,1]
  TensorF vol = read_volume(cam.files[0]);
  CHECK(vol.shape() == Shape{1, 16, 16, 16});
  CHECK(cam.heatmap.grid.shape() == Shape{16, 16, 16});
  for (float v : vol.vals()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  for (const auto& f : cam.files) CHECK(std::filesystem::exists(f));
  CHECK(slurp(cam.files[1]).substr(0, 3) == "P5\n");

  ExplainOutputs att = cmd_explain(att_ckpt, case_path, "WT", "attention", dir);
  CHECK(att.files[0] == dir + "/heatmap_attention.vsxv");
  CHECK(read_volume(att.files[0]).shape() == Shape{1, 16, 16, 16});
  CHECK(att.heatmap.source == HeatmapSource::attention);

  CHECK_THROWS_AS(cmd_explain(unet_ckpt, case_path, "WT", "attention", dir),
                  ArgumentError);
  CHECK_THROWS_WITH(cmd_explain(unet_ckpt, case_path, "GT", "gradcam", dir),
                    Catch::Matchers::ContainsSubstring("expected WT|TC|ET"));
  CHECK_THROWS_AS(cmd_explain(unet_ckpt, case_path, "WT", "saliency", dir),
                  ArgumentError);
  CHECK_THROWS_AS(cmd_explain(dir + "/missing.vsxc", case_path, "WT", "gradcam", dir),
                  IoError);

  // channel mismatch between checkpoint and volume is a data error
  std::string narrow_ckpt = dir + "/narrow.vsxc";
  save_checkpoint(build<float>(ModelKind::unet, 3, 4, 1), narrow_ckpt);
  CHECK_THROWS_AS(cmd_explain(narrow_ckpt, case_path, "WT", "gradcam", dir), DataError);
}

TEST_CASE("cli dispatch: usage, flag forms, exit codes, end-to-end run") {
  std::string out, err;

  CHECK(run({}, &out, &err) == 2);
  CHECK(err.find("usage:") == 0);
  CHECK(run({"help"}, &out, &err) == 0);
  CHECK(out.find("commands:") != std::string::npos);
  CHECK(run({"--help"}, &out, &err) == 0);

  CHECK(run({"zap"}, &out, &err) == 2);
  CHECK(err == "error: unknown command 'zap' (expected phantom|train|eval|explain)\n");

  CHECK(run({"phantom"}, &out, &err) == 2);
  CHECK(err == "error: argument error: phantom: missing required flag --count\n");
  CHECK(run({"phantom", "--count", "1", "--turbo", "9"}, &out, &err) == 2);
  CHECK(err.find("unknown flag --turbo") != std::string::npos);
  CHECK(run({"phantom", "--count"}, &out, &err) == 2);
  CHECK(err.find("expects a value") != std::string::npos);
  CHECK(run({"phantom", "--count", "1", "--dims", "8x9"}, &out, &err) == 2);
  CHECK(run({"train", "--resume=yes"}, &out, &err) == 2);
  CHECK(err.find("takes no value") != std::string::npos);

  // every error is a single machine-parsable line
  CHECK(run({"eval", "--checkpoint", "/tmp/vsx_cli_nothere.vsxc", "--manifest",
             "/tmp/vsx_cli_nothere.tsv"},
            &out, &err) == 4);
  CHECK(err.rfind("error: ", 0) == 0);
  CHECK(err.find('\n') == err.size() - 1);

  // pipeline: phantom -> train -> eval -> explain through the dispatcher
  std::string root = fresh_dir("pipeline");
  CHECK(run({"phantom", "--count=5", "--dims=16", "--seed=77", "--out", root + "/data"},
            &out, &err) == 0);
  CHECK(out.find("wrote 5 case(s)") != std::string::npos);

  RunConfig base;
  base.base_width = 4;
  base.trainer.max_epochs = 1;
  save_config(base, root + "/base.cfg");
  CHECK(run({"train", "--config", root + "/base.cfg", "--manifest",
             root + "/data/manifest.tsv", "--seed", "3", "--out", root + "/run"},
            &out, &err) == 0);
  CHECK(out.find("trained unet for 1 epoch(s)") != std::string::npos);
  CHECK(std::filesystem::exists(root + "/run/model.vsxc"));
  CHECK(std::filesystem::exists(root + "/run/training_log.csv"));

  // the saved resolved config reflects the flag overrides
  RunConfig saved = load_config(root + "/run/run_config.cfg");
  CHECK(saved.base_width == 4);
  CHECK(saved.seed == 3);
  CHECK(saved.manifest == root + "/data/manifest.tsv");

  CHECK(run({"eval", "--checkpoint", root + "/run/model.vsxc", "--manifest",
             root + "/data/manifest.tsv", "--split", "val", "--out", root + "/eval"},
            &out, &err) == 0);
  CHECK(out.find("scored 1 volume(s)") != std::string::npos);
  CHECK(std::filesystem::exists(root + "/eval/scores_val.csv"));

  CHECK(run({"explain", "--checkpoint", root + "/run/model.vsxc", "--case",
             root + "/data/phantom_0000_img.vsxv", "--class=ET", "--out", root + "/xai"},
            &out, &err) == 0);
  CHECK(std::filesystem::exists(root + "/xai/heatmap_gradcam_ET.vsxv"));
  CHECK(std::filesystem::exists(root + "/xai/heatmap_gradcam_ET_mid_axis1.pgm"));

  // data errors surface with exit code 3; bad flag values with 2
  std::string odd_dir = fresh_dir("pipeline_odd");
  CaseRecord odd = make_phantom(24, 16, 16, 2);
  write_volume(odd_dir + "/img.vsxv", odd.image);
  write_volume(odd_dir + "/msk.vsxv", odd.mask.channels);
  write_manifest(odd_dir + "/manifest.tsv", {{"oddball", "img.vsxv", "msk.vsxv", "train"}});
  CHECK(run({"train", "--config", root + "/base.cfg", "--manifest",
             odd_dir + "/manifest.tsv", "--out", odd_dir + "/run"},
            &out, &err) == 3);
  CHECK(err.find("oddball") != std::string::npos);
  CHECK(run({"train", "--preset", "warp"}, &out, &err) == 2);
  CHECK(run({"explain", "--checkpoint", root + "/run/model.vsxc", "--case",
             root + "/data/phantom_0000_img.vsxv", "--method", "attention"},
            &out, &err) == 2);
}
