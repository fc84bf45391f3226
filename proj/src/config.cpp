#include "mpamatch/config.hpp"

#include <fstream>

#include "mpamatch/errors.hpp"
#include "mpamatch/hashing.hpp"

namespace mpamatch {

using nlohmann::json;

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // integers may not silently take fractional values
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

void merge_checked(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const auto where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_checked(slot, value, where);
    } else if (!same_kind(slot, value)) {
      throw ConfigError("config key '" + where + "' expects " + std::string(slot.type_name()) + ", got " +
                        value.type_name());
    } else {
      slot = value;
    }
  }
}

template <typename T>
T get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + section + "." + key + "': " + e.what());
  }
}

}  // namespace

const json& default_config() {
  static const json defaults = json::parse(R"({
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
      "manifest": "",
      "labeled_fraction": 0.7777777777777778,
      "test_fraction": 0.1,
      "use_manifest_split": false,
      "split_seed": 0,
      "class_names": []
    },
    "model": {
      "dtype": "float32",
      "embed_dim": 256,
      "encoder": {
        "variant": "stand_in",
        "weights_path": "",
        "input_size": 256,
        "patch_size": 16,
        "token_dim": 1024,
        "depth": 2,
        "heads": 8
      },
      "decoder": {
        "reduced_dim": 512,
        "block_channels": [256, 128, 64, 16],
        "num_classes": 2
      }
    },
    "prototypes": {
      "per_class": 4,
      "similarity": "cosine",
      "momentum": 0.99,
      "warmup_epochs": 1,
      "init_pixels_per_class": 2000,
      "visual": true
    },
    "text": {
      "enabled": true,
      "prompts_root": "data/prompts",
      "tag": "P-nonsim",
      "tokens": 1,
      "dim": 256,
      "encoder": "stub",
      "table_path": "",
      "train_base": false
    },
    "loss": {
      "lambda": 0.5,
      "mu": 0.5,
      "tau": 0.95,
      "alpha1": 0.5,
      "alpha2": 0.5,
      "alpha": 0.25,
      "beta": 0.5,
      "gamma": 0.25,
      "epsilon": 1e-6,
      "temperature": 0.1,
      "soft_pseudo": false
    },
    "augment": {
      "flip_prob": 0.5,
      "jitter_prob": 0.8,
      "jitter_min": 0.6,
      "jitter_max": 1.4,
      "cutmix_prob": 1.0,
      "cutmix_area_min": 0.1,
      "cutmix_area_max": 0.5,
      "cutmix_aspect_min": 0.5,
      "cutmix_aspect_max": 2.0,
      "feature_dropout": 0.5
    },
    "optim": {
      "lr": 0.01,
      "momentum": 0.9,
      "weight_decay": 0.0001,
      "schedule": "poly",
      "power": 0.9
    },
    "train": {
      "epochs": 40,
      "batch_size": 1,
      "max_steps": 0,
      "eval_every": 1,
      "dump_augment": false
    },
    "eval": {
      "head": "main",
      "include_background": true,
      "split": "test"
    }
  })");
  return defaults;
}

json resolve_config(const json& user) {
  json resolved = default_config();
  merge_checked(resolved, user, "");
  return resolved;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig RunConfig::from_json(const json& user) try {
  RunConfig c;
  c.resolved = resolve_config(user);
  const auto& j = c.resolved;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.output_dir = j.at("output_dir").get<std::string>();

  const auto& m = j.at("model");
  const auto dtype = m.at("dtype").get<std::string>();
  if (dtype != "float32" && dtype != "float64") throw ConfigError("model.dtype must be float32 or float64");
  c.double_precision = dtype == "float64";
  const auto& e = m.at("encoder");
  c.model.encoder.variant = segmodel::parse_encoder_variant(e.at("variant").get<std::string>());
  c.model.encoder.weights_path = e.at("weights_path").get<std::string>();
  c.model.encoder.input_size = e.at("input_size").get<int>();
  c.model.encoder.patch_size = e.at("patch_size").get<int>();
  c.model.encoder.token_dim = e.at("token_dim").get<int>();
  c.model.encoder.depth = e.at("depth").get<int>();
  c.model.encoder.heads = e.at("heads").get<int>();
  const auto& d = m.at("decoder");
  c.model.decoder.reduced_dim = d.at("reduced_dim").get<int>();
  c.model.decoder.block_channels = d.at("block_channels").get<std::vector<int>>();
  c.model.decoder.num_classes = d.at("num_classes").get<int>();
  c.model.embed_dim = m.at("embed_dim").get<int>();
  c.model.seed = c.seed;
  c.model.encoder.validate();
  c.model.decoder.validate();

  c.prototypes.per_class = get<int>(j, "prototypes", "per_class");
  c.prototypes.similarity = protovis::parse_similarity(get<std::string>(j, "prototypes", "similarity"));
  c.prototypes.momentum = get<double>(j, "prototypes", "momentum");
  c.prototypes.warmup_epochs = get<int>(j, "prototypes", "warmup_epochs");
  c.prototypes.init_pixels_per_class = get<int>(j, "prototypes", "init_pixels_per_class");
  c.prototypes.visual = get<bool>(j, "prototypes", "visual");
  if (c.prototypes.per_class < 1) throw ConfigError("prototypes.per_class must be >= 1");
  if (!(c.prototypes.momentum >= 0.0 && c.prototypes.momentum < 1.0))
    throw ConfigError("prototypes.momentum must lie in [0,1)");
  if (c.prototypes.warmup_epochs < 0) throw ConfigError("prototypes.warmup_epochs must be >= 0");
  if (c.prototypes.init_pixels_per_class < 1) throw ConfigError("prototypes.init_pixels_per_class must be >= 1");

  c.text.enabled = get<bool>(j, "text", "enabled");
  c.text.prompts_root = get<std::string>(j, "text", "prompts_root");
  c.text.tag = get<std::string>(j, "text", "tag");
  c.text.tokens = get<int>(j, "text", "tokens");
  c.text.dim = get<int>(j, "text", "dim");
  c.text.encoder = get<std::string>(j, "text", "encoder");
  c.text.table_path = get<std::string>(j, "text", "table_path");
  c.text.train_base = get<bool>(j, "text", "train_base");
  if (c.text.tokens < 0 || c.text.tokens > 6) throw ConfigError("text.tokens must lie in 0..6");
  if (c.text.dim < 1) throw ConfigError("text.dim must be >= 1");
  if (c.text.encoder != "stub" && c.text.encoder != "table") throw ConfigError("text.encoder must be stub or table");

  c.loss = losses::LossWeights::from_json(j.at("loss"));
  c.augment = augment::AugmentConfig::from_json(j.at("augment"), c.model.encoder.input_size);

  c.optim.lr = get<double>(j, "optim", "lr");
  c.optim.momentum = get<double>(j, "optim", "momentum");
  c.optim.weight_decay = get<double>(j, "optim", "weight_decay");
  const auto schedule = get<std::string>(j, "optim", "schedule");
  if (schedule != "poly" && schedule != "constant") throw ConfigError("optim.schedule must be poly or constant");
  c.optim.poly = schedule == "poly";
  c.optim.power = get<double>(j, "optim", "power");
  if (!(c.optim.lr > 0.0) || c.optim.momentum < 0.0 || c.optim.weight_decay < 0.0 || c.optim.power < 0.0)
    throw ConfigError("optimizer settings must be non-negative with a positive learning rate");

  c.data.manifest = get<std::string>(j, "data", "manifest");
  c.data.labeled_fraction = get<double>(j, "data", "labeled_fraction");
  c.data.test_fraction = get<double>(j, "data", "test_fraction");
  c.data.use_manifest_split = get<bool>(j, "data", "use_manifest_split");
  c.data.split_seed = get<std::uint64_t>(j, "data", "split_seed");
  c.data.class_names = get<std::vector<std::string>>(j, "data", "class_names");
  if (!(c.data.labeled_fraction > 0.0 && c.data.labeled_fraction <= 1.0))
    throw ConfigError("data.labeled_fraction must lie in (0,1]");
  if (!c.data.class_names.empty() &&
      static_cast<int>(c.data.class_names.size()) != c.model.decoder.num_classes)
    throw ConfigError("data.class_names must name every class");
  if (c.data.class_names.empty()) {
    for (int k = 0; k < c.model.decoder.num_classes; ++k) c.data.class_names.push_back("class" + std::to_string(k));
  }

  c.train.epochs = get<int>(j, "train", "epochs");
  c.train.batch_size = get<int>(j, "train", "batch_size");
  c.train.max_steps = get<long>(j, "train", "max_steps");
  c.train.eval_every = get<int>(j, "train", "eval_every");
  c.train.dump_augment = get<bool>(j, "train", "dump_augment");
  if (c.train.epochs < 0 || c.train.batch_size < 1 || c.train.max_steps < 0 || c.train.eval_every < 0)
    throw ConfigError("train settings out of range");

  c.eval.head = get<std::string>(j, "eval", "head");
  c.eval.include_background = get<bool>(j, "eval", "include_background");
  c.eval.split = get<std::string>(j, "eval", "split");
  if (c.eval.head != "main" && c.eval.head != "average") throw ConfigError("eval.head must be main or average");
  return c;
} catch (const json::exception& e) {
  throw ConfigError(std::string("invalid config value: ") + e.what());
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::string RunConfig::hash() const { return sha256_hex(resolved.dump()); }

}  // namespace mpamatch
