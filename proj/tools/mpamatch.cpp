// Command-line front end: data preparation, training, evaluation and ablations.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mpamatch/config.hpp"
#include "mpamatch/datasets.hpp"
#include "mpamatch/errors.hpp"
#include "mpamatch/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mpamatch;

namespace {

constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;
constexpr int kNumericExit = 4;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  auto j = read_json(path);
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

datasets::ShapeFamily parse_family(const std::string& s) {
  if (s == "ellipses") return datasets::ShapeFamily::ellipses;
  if (s == "blobs") return datasets::ShapeFamily::blobs;
  throw ConfigError("unknown shape family '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised segmentation with multimodal prototypes"};
  app.require_subcommand(1);

  // data
  auto* data = app.add_subcommand("data", "Dataset manifests and synthetic data");
  data->require_subcommand(1);

  std::string scan_root, scan_out, scan_palette, scan_name;
  int scan_classes = 0;
  bool scan_instances = false;
  auto* scan = data->add_subcommand("scan", "Pair images/ with masks/ and write a manifest");
  scan->add_option("--root", scan_root, "Dataset root")->required();
  scan->add_option("--out", scan_out, "Manifest path (default <root>/manifest.json)");
  scan->add_option("--palette", scan_palette, "Palette JSON {\"values\": {...}, \"other_nonzero\": c}");
  scan->add_option("--classes", scan_classes, "Identity palette over N classes");
  scan->add_flag("--instances", scan_instances, "Binary palette: 0 background, any nonzero value foreground");
  scan->add_option("--name", scan_name, "Dataset name");

  std::string split_in, split_out;
  double split_fraction = datasets::kDefaultLabeledFraction, split_test = 0.1;
  std::uint64_t split_seed = 0;
  auto* split = data->add_subcommand("split", "Assign labeled / unlabeled / test pools");
  split->add_option("--manifest", split_in, "Input manifest")->required();
  split->add_option("--out", split_out, "Output manifest (default: overwrite input)");
  split->add_option("--labeled-fraction", split_fraction, "Labeled share of the training set");
  split->add_option("--test-fraction", split_test, "Held-out share when no test split exists");
  split->add_option("--seed", split_seed, "Split seed");

  datasets::SyntheticSpec synth_spec;
  std::string synth_out, synth_family = "ellipses";
  auto* synth = data->add_subcommand("synth", "Generate a synthetic shapes dataset");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--count", synth_spec.count, "Number of images");
  synth->add_option("--size", synth_spec.size, "Image side in pixels");
  synth->add_option("--classes", synth_spec.classes, "Classes including background");
  synth->add_option("--family", synth_family, "ellipses | blobs");
  synth->add_option("--noise", synth_spec.noise, "Gaussian pixel noise");
  synth->add_option("--appearance-jitter", synth_spec.appearance_jitter, "Per-image color shift amplitude");
  synth->add_option("--illumination", synth_spec.illumination, "Per-image log-gain amplitude");
  synth->add_option("--color-shift", synth_spec.color_shift, "Per-image tint amplitude shared by all classes");
  synth->add_option("--seed", synth_spec.seed, "Generator seed");
  synth->add_option("--name", synth_spec.name, "Dataset name");

  // train
  std::string train_config, train_resume;
  std::vector<std::string> train_overrides;
  bool verbose = false;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", train_config, "Run configuration (JSON)")->required();
  train->add_option("--set", train_overrides, "Override, e.g. loss.tau=0.9");
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  train->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");

  // eval
  std::string eval_ckpt, eval_split = "test", eval_manifest, eval_export, eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--split", eval_split, "test | train | train_labeled | train_unlabeled");
  eval->add_option("--manifest", eval_manifest, "Evaluate against another manifest");
  eval->add_option("--export", eval_export, "Write predicted masks and overlays here");
  eval->add_option("--out", eval_out, "Metric report path (JSON)");

  // ablate
  std::string ablate_config, ablate_axis;
  std::vector<std::string> ablate_values, ablate_overrides;
  auto* ablate = app.add_subcommand("ablate", "Sweep one axis with a shared seed");
  ablate->add_option("--config", ablate_config, "Base configuration (JSON)")->required();
  ablate->add_option("--axis", ablate_axis, "prompt_tag | tokens | unlabeled | tau")->required();
  ablate->add_option("--values", ablate_values, "Values to sweep")->required();
  ablate->add_option("--set", ablate_overrides, "Override applied to every run");
  ablate->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (scan->parsed()) {
      datasets::Palette palette;
      if (!scan_palette.empty()) {
        palette = datasets::Palette::from_json(read_json(scan_palette));
      } else if (scan_classes > 0) {
        palette = datasets::Palette::identity(scan_classes);
      } else if (scan_instances) {
        palette.values = {{0, 0}};
        palette.other_nonzero = 1;
      }
      auto manifest = datasets::scan(scan_root, palette, scan_name);
      const fs::path out = scan_out.empty() ? fs::path(scan_root) / "manifest.json" : fs::path(scan_out);
      manifest.save(out);
      std::cout << "scanned " << manifest.entries.size() << " images -> " << out.string() << "\n";
    } else if (split->parsed()) {
      auto manifest = datasets::split(datasets::DatasetManifest::load(split_in), split_fraction, split_seed, split_test);
      const fs::path out = split_out.empty() ? fs::path(split_in) : fs::path(split_out);
      manifest.save(out);
      std::cout << "labeled " << manifest.count(datasets::Split::train_labeled) << ", unlabeled "
                << manifest.count(datasets::Split::train_unlabeled) << ", test "
                << manifest.count(datasets::Split::test) << " -> " << out.string() << "\n";
    } else if (synth->parsed()) {
      synth_spec.family = parse_family(synth_family);
      auto manifest = datasets::make_synthetic(synth_spec, synth_out);
      std::cout << "wrote " << manifest.entries.size() << " images to " << synth_out << "\n";
    } else if (train->parsed()) {
      auto config = load_config(train_config, train_overrides);
      pipeline::FitOptions options;
      if (!train_resume.empty()) options.resume = train_resume;
      options.verbose = verbose;
      auto result = pipeline::fit(config, options);
      if (result.final_report) std::cout << result.final_report->to_table(config.eval.split);
      std::cout << "run written to " << config.output_dir << "\n";
    } else if (eval->parsed()) {
      std::optional<std::string> manifest;
      if (!eval_manifest.empty()) manifest = eval_manifest;
      std::optional<fs::path> export_dir;
      if (!eval_export.empty()) export_dir = eval_export;
      auto result = pipeline::evaluate(eval_ckpt, eval_split, manifest, export_dir);
      std::cout << result.report.to_table(eval_split);
      json report = result.report.to_json();
      report["split"] = eval_split;
      report["checkpoint"] = eval_ckpt;
      report["confusion"] = result.cm.to_json();
      if (!eval_out.empty()) {
        std::ofstream(eval_out) << report.dump(2) << "\n";
      } else {
        std::cout << report.dump(2) << "\n";
      }
    } else if (ablate->parsed()) {
      auto config = load_config(ablate_config, ablate_overrides);
      pipeline::ablate(config, pipeline::parse_axis(ablate_axis), ablate_values, verbose);
      std::ifstream table(fs::path(config.output_dir) / "results.txt");
      std::cout << table.rdbuf();
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const NumericAbort& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumericExit;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
