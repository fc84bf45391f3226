#include "mpamatch/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mpamatch/augment.hpp"
#include "mpamatch/errors.hpp"
#include "mpamatch/hashing.hpp"
#include "mpamatch/random.hpp"

namespace mpamatch::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// seed streams
constexpr std::uint64_t kLabeledStream = 1;
constexpr std::uint64_t kUnlabeledStream = 2;
constexpr std::uint64_t kShuffle = 3;
constexpr std::uint64_t kUnlabeledOrder = 4;
constexpr std::uint64_t kPartner = 5;
constexpr std::uint64_t kBankInit = 6;
constexpr std::uint64_t kHeads = 7;
constexpr std::uint64_t kText = 8;

torch::Tensor onehot(const torch::Tensor& mask, int classes, torch::Dtype dtype) {
  return torch::one_hot(mask, classes).permute({0, 3, 1, 2}).to(dtype);
}

torch::Tensor pixels_to_map(const torch::Tensor& probs, std::int64_t b, std::int64_t h, std::int64_t w) {
  return probs.reshape({b, h, w, -1}).permute({0, 3, 1, 2});
}

// Mean of the active branches on autograd scalars.
torch::Tensor branch_mean(const torch::Tensor& visual, const torch::Tensor& text, bool v, bool t) {
  if (v && t) return 0.5 * (visual + text);
  if (v) return visual;
  return text;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::int64_t uniform_index(std::uint64_t seed, std::int64_t n) { return static_cast<std::int64_t>(mix_seed(seed) % n); }

}  // namespace

std::vector<const Sample*> DataBundle::split(const std::string& name) const {
  std::vector<const Sample*> out;
  auto add = [&](const std::vector<Sample>& v) {
    for (const auto& s : v) out.push_back(&s);
  };
  switch (datasets::parse_split(name)) {
    case datasets::Split::test: add(test); break;
    case datasets::Split::train_labeled: add(labeled); break;
    case datasets::Split::train_unlabeled: add(unlabeled); break;
    case datasets::Split::train: add(labeled); add(unlabeled); break;
  }
  return out;
}

Sample load_sample(const datasets::DatasetManifest& manifest, const datasets::ManifestEntry& entry, int input_size) {
  Sample s;
  s.id = entry.id;
  s.original_image = datasets::load_image(manifest.root / entry.image);
  s.image = augment::resize_image(s.original_image, input_size);
  if (entry.has_mask()) {
    s.original_mask = datasets::load_mask(manifest.root / entry.mask, manifest.palette);
    s.mask = augment::resize_mask(s.original_mask, input_size);
  }
  return s;
}

DataBundle load_data(const RunConfig& config) {
  if (config.data.manifest.empty()) throw ConfigError("data.manifest is not set");
  DataBundle data;
  auto manifest = datasets::DatasetManifest::load(config.data.manifest);
  if (manifest.palette.num_classes() != config.model.decoder.num_classes)
    throw ConfigError("dataset palette has " + std::to_string(manifest.palette.num_classes()) +
                      " classes, model.decoder.num_classes is " + std::to_string(config.model.decoder.num_classes));
  if (!config.data.use_manifest_split || manifest.count(datasets::Split::train_labeled) == 0)
    manifest = datasets::split(manifest, config.data.labeled_fraction, config.data.split_seed, config.data.test_fraction);
  const int S = config.model.encoder.input_size;
  for (const auto& e : manifest.entries) {
    auto s = load_sample(manifest, e, S);
    switch (e.split) {
      case datasets::Split::train_labeled:
        if (!s.labeled()) throw DataError("labeled entry " + e.id + " has no mask");
        data.labeled.push_back(std::move(s));
        break;
      case datasets::Split::train_unlabeled:
      case datasets::Split::train:
        s.mask = torch::Tensor();
        data.unlabeled.push_back(std::move(s));
        break;
      case datasets::Split::test:
        data.test.push_back(std::move(s));
        break;
    }
  }
  if (data.labeled.empty()) throw DataError("dataset " + manifest.name + " has no labeled training images");
  data.manifest = std::move(manifest);
  return data;
}

double learning_rate(const OptimConfig& optim, long step, long total_steps) {
  if (!optim.poly || total_steps <= 0) return optim.lr;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return optim.lr * std::pow(1.0 - progress, optim.power);
}

json StepRecord::to_json() const {
  auto j = report.to_json();
  j["step"] = step;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["L_head"] = head_loss;
  j["prototypes_active"] = prototypes_active;
  return j;
}

Trainer::Trainer(RunConfig config)
    : config_(std::move(config)),
      dtype_(config_.double_precision ? torch::kDouble : torch::kFloat),
      num_classes_(config_.model.decoder.num_classes) {
  const int M = config_.model.embed_dim;
  const int K = config_.prototypes.per_class;
  const int P = num_classes_ * K;
  model_ = segmodel::SegmentationModel(config_.model);
  model_->to(dtype_);

  visual_head_ = protovis::ProtoHead(M, P, num_classes_);
  segmodel::initialize_parameters(*visual_head_, derive_seed(config_.seed, {kHeads, 0}));
  visual_head_->to(dtype_);

  std::vector<torch::Tensor> params;
  for (auto& p : model_->parameters())
    if (p.requires_grad()) params.push_back(p);
  for (auto& p : visual_head_->parameters()) params.push_back(p);

  if (config_.text.enabled) {
    auto sets = prototext::load_prompt_sets(config_.text.prompts_root, config_.text.tag, config_.data.class_names, K);
    prompt_metadata_ = prototext::prompt_metadata(sets);
    prompt_metadata_["L"] = config_.text.tokens;
    std::unique_ptr<prototext::TextEncoder> encoder;
    if (config_.text.encoder == "table") {
      encoder = std::make_unique<prototext::TableTextEncoder>(config_.text.table_path);
    } else {
      encoder = std::make_unique<prototext::StubTextEncoder>(config_.text.dim, 0);
    }
    prototext::TextPrototypeOptions opts;
    opts.tokens = config_.text.tokens;
    opts.visual_dim = M;
    opts.train_base = config_.text.train_base;
    opts.seed = derive_seed(config_.seed, {kText});
    opts.mode = config_.prototypes.similarity;
    text_.emplace(prototext::embed_descriptions(sets, *encoder), opts);
    (*text_)->to(dtype_);
    text_head_ = protovis::ProtoHead(M, P, num_classes_);
    segmodel::initialize_parameters(*text_head_, derive_seed(config_.seed, {kHeads, 1}));
    text_head_->to(dtype_);
    for (auto& p : (*text_)->parameters())
      if (p.requires_grad()) params.push_back(p);
    for (auto& p : text_head_->parameters()) params.push_back(p);
  }

  optimizer_ = std::make_unique<torch::optim::SGD>(
      params, torch::optim::SGDOptions(config_.optim.lr)
                  .momentum(config_.optim.momentum)
                  .weight_decay(config_.optim.weight_decay));
}

torch::Tensor Trainer::to_model(const torch::Tensor& t) const { return t.to(dtype_); }

torch::Tensor Trainer::pixel_embeddings(const torch::Tensor& embeddings) const {
  auto flat = embeddings.permute({0, 2, 3, 1}).reshape({-1, embeddings.size(1)});
  return torch::nn::functional::normalize(flat, torch::nn::functional::NormalizeFuncOptions().dim(1));
}

bool Trainer::prototypes_active() const {
  if (config_.loss.alpha <= 0.0 || epoch_ < config_.prototypes.warmup_epochs) return false;
  return (config_.prototypes.visual && bank_.defined()) || text_.has_value();
}

void Trainer::init_bank(const std::vector<Sample>& labeled) {
  torch::NoGradGuard no_grad;
  model_->eval();
  std::vector<std::vector<torch::Tensor>> per_class(num_classes_);
  for (const auto& s : labeled) {
    auto out = model_->forward(to_model(s.image).unsqueeze(0));
    auto emb = pixel_embeddings(out.embeddings);
    auto labels = s.mask.reshape({-1});
    for (int c = 0; c < num_classes_; ++c) {
      auto rows = emb.index({labels == c});
      if (rows.size(0) > 0) per_class[c].push_back(rows);
    }
  }
  std::vector<torch::Tensor> pools;
  const auto limit = static_cast<std::int64_t>(config_.prototypes.init_pixels_per_class);
  for (int c = 0; c < num_classes_; ++c) {
    if (per_class[c].empty()) throw DataError("class " + std::to_string(c) + " is absent from the labeled pool");
    auto all = torch::cat(per_class[c], 0);
    if (all.size(0) > limit) {
      auto gen = make_generator(derive_seed(config_.seed, {kBankInit, static_cast<std::uint64_t>(c)}));
      all = all.index({torch::randperm(all.size(0), gen, torch::kLong).slice(0, 0, limit)});
    }
    pools.push_back(all);
  }
  bank_ = protovis::init_prototypes(pools, config_.prototypes.per_class, derive_seed(config_.seed, {kBankInit}),
                                    config_.prototypes.similarity, config_.prototypes.momentum);
  model_->train();
}

StepRecord Trainer::train_step(const std::vector<const Sample*>& labeled, const std::vector<UnlabeledPair>& unlabeled) {
  if (labeled.empty()) throw ValidationError("train_step needs at least one labeled sample");
  model_->train();
  const auto& w = config_.loss;
  const auto& aug = config_.augment;
  const int C = num_classes_;
  const int K = config_.prototypes.per_class;

  StepRecord rec;
  rec.step = step_;
  rec.epoch = epoch_;
  rec.lr = learning_rate(config_.optim, step_, total_steps_);
  rec.prototypes_active = prototypes_active();
  for (auto& group : optimizer_->param_groups())
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(rec.lr);

  // labeled stream
  std::vector<torch::Tensor> imgs, masks;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto seed = derive_seed(config_.seed, {kLabeledStream, static_cast<std::uint64_t>(step_), i});
    auto view = augment::weak_augment(labeled[i]->image, aug, seed);
    imgs.push_back(view.image);
    masks.push_back(view.geometry.apply(labeled[i]->mask));
  }
  auto x = to_model(torch::stack(imgs));
  auto y = torch::stack(masks);
  auto out = model_->forward(x);
  auto sup = losses::supervised_loss_from_logits(out.logits, onehot(y, C, dtype_), w.epsilon);

  // unlabeled streams
  const bool use_unlabeled = !unlabeled.empty() && (w.gamma > 0.0 || rec.prototypes_active);
  torch::Tensor unl = torch::zeros({}, x.options());
  double retention = 0.0;
  torch::Tensor p_weak;
  segmodel::SegmentationOutput weak_out;
  if (use_unlabeled) {
    std::vector<torch::Tensor> weak_imgs, partner_imgs, s1_imgs, s2_imgs;
    std::vector<augment::CutMixBox> box1, box2;
    for (std::size_t j = 0; j < unlabeled.size(); ++j) {
      const auto seed = derive_seed(config_.seed, {kUnlabeledStream, static_cast<std::uint64_t>(step_), j});
      auto weak = augment::weak_augment(unlabeled[j].sample->image, aug, derive_seed(seed, {0}));
      auto partner = augment::weak_augment(unlabeled[j].partner->image, aug, derive_seed(seed, {1}));
      auto s1 = augment::strong_augment(weak.image, partner.image, aug, derive_seed(seed, {2}));
      auto s2 = augment::strong_augment(weak.image, partner.image, aug, derive_seed(seed, {3}));
      if (config_.train.dump_augment) {
        auto r = augment::record(weak, s1, s2, seed);
        r["step"] = step_;
        r["id"] = unlabeled[j].sample->id;
        r["partner"] = unlabeled[j].partner->id;
        augment_records_.push_back(std::move(r));
      }
      weak_imgs.push_back(weak.image);
      partner_imgs.push_back(partner.image);
      s1_imgs.push_back(s1.image);
      s2_imgs.push_back(s2.image);
      box1.push_back(s1.box);
      box2.push_back(s2.box);
    }
    auto xw = to_model(torch::stack(weak_imgs));
    auto grid = model_->encode_grid(xw);
    weak_out = model_->decode(grid);
    p_weak = torch::softmax(weak_out.logits, 1).detach();

    if (w.gamma > 0.0) {
      torch::Tensor p_partner;
      {
        torch::NoGradGuard no_grad;
        p_partner = torch::softmax(model_->forward(to_model(torch::stack(partner_imgs))).logits, 1);
      }
      std::vector<torch::Tensor> t1, t2;
      for (std::size_t j = 0; j < unlabeled.size(); ++j) {
        t1.push_back(augment::apply_cutmix(p_weak[j], p_partner[j], box1[j]));
        t2.push_back(augment::apply_cutmix(p_weak[j], p_partner[j], box2[j]));
      }
      const auto fp_seed = derive_seed(config_.seed, {kUnlabeledStream, static_cast<std::uint64_t>(step_), 0xfeed});
      const double rate = aug.feature_dropout;
      auto fp = model_->decode(grid, [rate, fp_seed](const torch::Tensor& g) {
        return augment::feature_perturb(g, rate, fp_seed);
      });
      auto logp_s1 = torch::log_softmax(model_->forward(to_model(torch::stack(s1_imgs))).logits, 1);
      auto logp_s2 = torch::log_softmax(model_->forward(to_model(torch::stack(s2_imgs))).logits, 1);
      auto terms = losses::unlabeled_loss_log({p_weak}, torch::log_softmax(fp.logits, 1), {torch::stack(t1)}, logp_s1,
                                              {torch::stack(t2)}, logp_s2, w);
      unl = terms.total;
      retention = terms.retention;
    } else {
      retention = (std::get<0>(p_weak.max(1)) >= w.tau).to(torch::kDouble).mean().item<double>();
    }
  }

  // prototype terms
  losses::LossComponents comp;
  torch::Tensor proto = torch::zeros({}, x.options());
  torch::Tensor head_loss = torch::zeros({}, x.options());
  if (rec.prototypes_active) {
    auto feats = pixel_embeddings(out.embeddings);
    auto labels = y.reshape({-1});
    auto labeled_feats = feats;
    auto labeled_labels = labels;
    if (use_unlabeled) {
      auto [confidence, pseudo] = p_weak.max(1);
      auto pl = torch::where(confidence >= w.tau, pseudo, torch::full_like(pseudo, -1)).reshape({-1});
      feats = torch::cat({feats, pixel_embeddings(weak_out.embeddings)}, 0);
      labels = torch::cat({labels, pl}, 0);
    }
    const auto mode = config_.prototypes.similarity;
    const double T = w.temperature;
    torch::Tensor pal_v = torch::zeros({}, x.options()), pcl_v = pal_v, pal_t = pal_v, pcl_t = pal_v;
    comp.visual_active = config_.prototypes.visual && bank_.defined();
    comp.text_active = text_.has_value();
    if (comp.visual_active) {
      auto bank_flat = bank_.flat().to(dtype_);
      auto assignment = protovis::assign(feats.detach(), labels, bank_flat, K, mode);
      auto scores = protovis::similarity(feats, bank_flat, mode);
      pal_v = losses::pal_loss(scores, assignment.flat, T).value;
      pcl_v = losses::pcl_loss(scores, assignment.flat, K, T).value;
      protovis::update_bank(bank_, feats.detach(), assignment);

      auto lf = labeled_feats.detach();
      auto head = visual_head_->forward(protovis::fuse(lf, bank_flat), protovis::similarity(lf, bank_flat, mode));
      head_loss = head_loss + torch::nn::functional::cross_entropy(head.logits, labeled_labels);
    }
    if (comp.text_active) {
      auto text_flat = (*text_)->flat();
      auto assignment = protovis::assign(feats.detach(), labels, text_flat.detach(), K, mode);
      auto scores = protovis::similarity(feats, text_flat, mode);
      pal_t = losses::pal_loss(scores, assignment.flat, T).value;
      pcl_t = losses::pcl_loss(scores, assignment.flat, K, T).value;

      auto lf = labeled_feats.detach();
      auto tf = text_flat.detach();
      auto head = text_head_->forward(protovis::fuse(lf, tf), protovis::similarity(lf, tf, mode));
      head_loss = head_loss + torch::nn::functional::cross_entropy(head.logits, labeled_labels);
    }
    proto = w.alpha1 * branch_mean(pal_v, pal_t, comp.visual_active, comp.text_active) +
            w.alpha2 * branch_mean(pcl_v, pcl_t, comp.visual_active, comp.text_active);
    comp.pal_visual = pal_v.item<double>();
    comp.pcl_visual = pcl_v.item<double>();
    comp.pal_text = pal_t.item<double>();
    comp.pcl_text = pcl_t.item<double>();
  }

  comp.ce = sup.ce.item<double>();
  comp.dice = sup.dice.item<double>();
  comp.label = sup.total.item<double>();
  comp.unlabel = unl.item<double>();
  comp.retention = retention;
  rec.report = losses::total_loss(comp, w, step_);
  rec.head_loss = head_loss.item<double>();
  if (!std::isfinite(rec.head_loss)) throw NumericAbort("L_head", step_);

  auto objective = losses::combine(proto, sup.total, unl, w) + head_loss;
  optimizer_->zero_grad();
  objective.backward();
  optimizer_->step();
  ++step_;
  return rec;
}

torch::Tensor Trainer::predict(const torch::Tensor& images, bool average_heads) {
  torch::NoGradGuard no_grad;
  model_->eval();
  auto out = model_->forward(to_model(images));
  auto probs = torch::softmax(out.logits, 1);
  if (!average_heads) return probs;
  const auto B = images.size(0), H = out.logits.size(2), W = out.logits.size(3);
  const auto mode = config_.prototypes.similarity;
  auto emb = pixel_embeddings(out.embeddings);
  std::vector<torch::Tensor> maps{probs};
  if (config_.prototypes.visual && bank_.defined()) {
    auto flat = bank_.flat().to(dtype_);
    auto head = visual_head_->forward(protovis::fuse(emb, flat), protovis::similarity(emb, flat, mode));
    maps.push_back(pixels_to_map(head.probabilities, B, H, W));
  }
  if (text_) {
    auto flat = (*text_)->flat();
    auto head = text_head_->forward(protovis::fuse(emb, flat), protovis::similarity(emb, flat, mode));
    maps.push_back(pixels_to_map(head.probabilities, B, H, W));
  }
  return torch::stack(maps, 0).mean(0);
}

EvalResult Trainer::evaluate(const std::vector<const Sample*>& samples, const EvalOptions& options) {
  if (options.head != "main" && options.head != "average") throw ConfigError("eval head must be main or average");
  torch::NoGradGuard no_grad;
  EvalResult result;
  result.cm = metrics::ConfusionMatrix(num_classes_);
  if (options.export_dir) {
    fs::create_directories(*options.export_dir / "masks");
    fs::create_directories(*options.export_dir / "overlays");
  }
  std::size_t scored = 0;
  for (const auto* s : samples) {
    if (!s->original_mask.defined()) continue;
    auto probs = predict(s->image.unsqueeze(0), options.head == "average");
    const auto H = s->original_mask.size(0), W = s->original_mask.size(1);
    if (probs.size(2) != H || probs.size(3) != W) {
      probs = torch::nn::functional::interpolate(
          probs, torch::nn::functional::InterpolateFuncOptions()
                     .size(std::vector<std::int64_t>{H, W})
                     .mode(torch::kBilinear)
                     .align_corners(false));
    }
    auto pred = num_classes_ == 2 ? protovis::binarize(probs[0][1]) : probs[0].argmax(0);
    result.cm.accumulate(pred, s->original_mask);
    if (options.export_dir) {
      datasets::save_mask(*options.export_dir / "masks" / (s->id + ".png"), pred);
      datasets::save_overlay(*options.export_dir / "overlays" / (s->id + ".png"), s->original_image, pred);
    }
    ++scored;
  }
  if (scored == 0) throw DataError("no annotated images to evaluate");
  result.report = metrics::summarize(result.cm, options.include_background);
  if (options.head == "average" && !bank_.defined() && !text_)
    result.report.notes.push_back("no prototype head available; main head only");
  model_->train();
  return result;
}

void Trainer::save(const fs::path& path, const json& history) const {
  torch::serialize::OutputArchive ar;
  torch::serialize::OutputArchive model_ar, vhead_ar, optim_ar;
  model_->save(model_ar);
  ar.write("model", model_ar);
  visual_head_->save(vhead_ar);
  ar.write("visual_head", vhead_ar);
  if (text_) {
    torch::serialize::OutputArchive text_ar, thead_ar;
    (*text_)->save(text_ar);
    ar.write("text", text_ar);
    text_head_->save(thead_ar);
    ar.write("text_head", thead_ar);
  }
  optimizer_->save(optim_ar);
  ar.write("optimizer", optim_ar);
  ar.write("bank_defined", c10::IValue(bank_.defined()));
  if (bank_.defined()) {
    ar.write("bank_centroids", bank_.centroids(), true);
    ar.write("bank_counts", bank_.counts(), true);
    ar.write("bank_mode", c10::IValue(static_cast<std::int64_t>(bank_.mode())));
    ar.write("bank_momentum", c10::IValue(bank_.momentum()));
  }
  ar.write("step", c10::IValue(static_cast<std::int64_t>(step_)));
  ar.write("epoch", c10::IValue(static_cast<std::int64_t>(epoch_)));
  ar.write("total_steps", c10::IValue(static_cast<std::int64_t>(total_steps_)));
  ar.write("config", c10::IValue(config_.resolved.dump()));
  ar.write("config_hash", c10::IValue(config_.hash()));
  ar.write("history", c10::IValue(history.dump()));
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  ar.save_to(path.string());
}

json Trainer::load(const fs::path& path) {
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(path.string());
  } catch (const c10::Error& e) {
    throw DataError("cannot read checkpoint " + path.string());
  }
  try {
    torch::serialize::InputArchive model_ar, vhead_ar, optim_ar;
    ar.read("model", model_ar);
    model_->load(model_ar);
    ar.read("visual_head", vhead_ar);
    visual_head_->load(vhead_ar);
    if (text_) {
      torch::serialize::InputArchive text_ar, thead_ar;
      ar.read("text", text_ar);
      (*text_)->load(text_ar);
      ar.read("text_head", thead_ar);
      text_head_->load(thead_ar);
    }
    ar.read("optimizer", optim_ar);
    optimizer_->load(optim_ar);
    c10::IValue v;
    ar.read("bank_defined", v);
    if (v.toBool()) {
      torch::Tensor centroids, counts;
      ar.read("bank_centroids", centroids, true);
      ar.read("bank_counts", counts, true);
      c10::IValue mode, momentum;
      ar.read("bank_mode", mode);
      ar.read("bank_momentum", momentum);
      bank_ = protovis::PrototypeBank(centroids, static_cast<protovis::SimilarityMode>(mode.toInt()),
                                      momentum.toDouble());
      bank_.set_counts(counts);
    } else {
      bank_ = {};
    }
    ar.read("step", v);
    step_ = static_cast<long>(v.toInt());
    ar.read("epoch", v);
    epoch_ = static_cast<int>(v.toInt());
    ar.read("total_steps", v);
    total_steps_ = static_cast<long>(v.toInt());
    ar.read("history", v);
    return json::parse(v.toStringRef());
  } catch (const c10::Error& e) {
    throw DataError("checkpoint " + path.string() + " does not match the configured model: " + e.what_without_backtrace());
  }
}

RunConfig Trainer::checkpoint_config(const fs::path& path) {
  torch::serialize::InputArchive ar;
  c10::IValue v;
  try {
    ar.load_from(path.string());
    ar.read("config", v);
  } catch (const c10::Error&) {
    throw DataError("cannot read checkpoint " + path.string());
  }
  return RunConfig::from_json(json::parse(v.toStringRef()));
}

FitResult fit(const RunConfig& config, const FitOptions& options) {
  FitResult result;
  const fs::path out_dir = config.output_dir;
  fs::create_directories(out_dir / "checkpoints");

  auto data = load_data(config);
  Trainer trainer(config);

  const auto n_l = static_cast<std::int64_t>(data.labeled.size());
  const auto n_u = static_cast<std::int64_t>(data.unlabeled.size());
  const int B = config.train.batch_size;
  const long steps_per_epoch = static_cast<long>((n_l + B - 1) / B);
  long total_steps = static_cast<long>(config.train.epochs) * steps_per_epoch;
  int epochs = config.train.epochs;
  if (config.train.max_steps > 0) {
    total_steps = config.train.max_steps;
    epochs = static_cast<int>((total_steps + steps_per_epoch - 1) / steps_per_epoch);
  }
  trainer.set_total_steps(std::max<long>(total_steps, 1));

  json history = json::array();
  if (options.resume) history = trainer.load(*options.resume);

  json run = {{"config", config.resolved},
              {"config_hash", config.hash()},
              {"dataset", data.manifest.name},
              {"manifest_hash", sha256_hex(data.manifest.to_json().dump())},
              {"prompts", trainer.prompt_metadata()},
              {"counts", {{"labeled", n_l}, {"unlabeled", n_u}, {"test", data.test.size()}}},
              {"total_steps", total_steps},
              {"resumed_from", options.resume ? options.resume->string() : ""}};
  write_text(out_dir / "run.json", run.dump(2) + "\n");

  std::ofstream log(out_dir / "log.jsonl", options.resume ? std::ios::app : std::ios::trunc);
  std::ofstream aug_log;
  if (config.train.dump_augment) aug_log.open(out_dir / "augment.jsonl", options.resume ? std::ios::app : std::ios::trunc);

  const auto eval_samples = [&](const std::string& split) { return data.split(split); };
  EvalOptions eval_opts{config.eval.head, config.eval.include_background, std::nullopt};
  double best = -1.0;
  for (const auto& h : history) best = std::max(best, h.value("mDice", -1.0));

  double retention_sum = 0.0;
  long retention_steps = 0;
  for (int epoch = trainer.epoch(); epoch < epochs && trainer.step() < total_steps; ++epoch) {
    trainer.set_epoch(epoch);
    if (!trainer.bank().defined() && config.prototypes.visual && config.loss.alpha > 0.0 &&
        epoch >= config.prototypes.warmup_epochs)
      trainer.init_bank(data.labeled);

    auto order = torch::randperm(n_l, make_generator(derive_seed(config.seed, {kShuffle, static_cast<std::uint64_t>(epoch)})),
                                 torch::kLong);
    auto order_acc = order.accessor<std::int64_t, 1>();
    for (long b = 0; b < steps_per_epoch && trainer.step() < total_steps; ++b) {
      std::vector<const Sample*> batch;
      for (std::int64_t i = b * B; i < std::min<std::int64_t>((b + 1) * B, n_l); ++i)
        batch.push_back(&data.labeled[order_acc[i]]);
      std::vector<UnlabeledPair> ubatch;
      if (n_u > 0) {
        for (int j = 0; j < B; ++j) {
          const auto g = static_cast<std::uint64_t>(trainer.step()) * B + j;
          auto cycle_perm = torch::randperm(
              n_u, make_generator(derive_seed(config.seed, {kUnlabeledOrder, g / static_cast<std::uint64_t>(n_u)})),
              torch::kLong);
          const auto idx = cycle_perm[static_cast<std::int64_t>(g % n_u)].item<std::int64_t>();
          auto partner = idx;
          if (n_u > 1) partner = (idx + 1 + uniform_index(derive_seed(config.seed, {kPartner, g}), n_u - 1)) % n_u;
          ubatch.push_back({&data.unlabeled[idx], &data.unlabeled[partner]});
        }
      }
      auto rec = trainer.train_step(batch, ubatch);
      log << rec.to_json().dump() << "\n";
      for (auto& r : trainer.augment_records()) aug_log << r.dump() << "\n";
      trainer.augment_records().clear();
      if (!ubatch.empty() && config.loss.gamma > 0.0) {
        retention_sum += rec.report.retention;
        ++retention_steps;
      }
      result.steps.push_back(std::move(rec));
    }
    log.flush();
    trainer.set_epoch(epoch + 1);

    const bool last = epoch + 1 == epochs || trainer.step() >= total_steps;
    if (config.train.eval_every > 0 && ((epoch + 1) % config.train.eval_every == 0 || last)) {
      auto samples = eval_samples(config.eval.split);
      if (!samples.empty()) {
        auto ev = trainer.evaluate(samples, eval_opts);
        json entry = {{"epoch", epoch + 1},       {"step", trainer.step()},  {"mIoU", ev.report.miou},
                      {"mDice", ev.report.mdice}, {"mCPA", ev.report.mcpa}};
        history.push_back(entry);
        if (options.verbose) std::cerr << "epoch " << epoch + 1 << " " << entry.dump() << "\n";
        if (ev.report.mdice > best) {
          best = ev.report.mdice;
          result.best_checkpoint = out_dir / "checkpoints" / "best.pt";
          trainer.save(result.best_checkpoint, history);
        }
      }
    } else if (options.verbose && !result.steps.empty()) {
      std::cerr << "epoch " << epoch + 1 << " " << result.steps.back().to_json().dump() << "\n";
    }
    result.last_checkpoint = out_dir / "checkpoints" / "last.pt";
    trainer.save(result.last_checkpoint, history);
    if (trainer.bank().defined()) trainer.bank().save(out_dir / "checkpoints" / "bank.bin");
    if (options.stop_after_epoch && epoch + 1 >= *options.stop_after_epoch) {
      result.history = history;
      result.mean_retention = retention_steps ? retention_sum / retention_steps : 0.0;
      return result;
    }
  }
  if (result.last_checkpoint.empty()) {
    result.last_checkpoint = out_dir / "checkpoints" / "last.pt";
    trainer.save(result.last_checkpoint, history);
  }

  auto samples = eval_samples(config.eval.split);
  json metrics_json = {{"split", config.eval.split}, {"head", config.eval.head}, {"history", history},
                       {"steps", trainer.step()}};
  if (!samples.empty()) {
    auto ev = trainer.evaluate(samples, eval_opts);
    result.final_report = ev.report;
    metrics_json["report"] = ev.report.to_json();
    metrics_json["confusion"] = ev.cm.to_json();
    write_text(out_dir / "metrics.txt", ev.report.to_table(data.manifest.name));
  }
  result.mean_retention = retention_steps ? retention_sum / retention_steps : 0.0;
  metrics_json["mean_retention"] = result.mean_retention;
  write_text(out_dir / "metrics.json", metrics_json.dump(2) + "\n");
  result.history = history;
  return result;
}

EvalResult evaluate(const fs::path& checkpoint, const std::string& split,
                    const std::optional<std::string>& manifest_override, const std::optional<fs::path>& export_dir) {
  auto config = Trainer::checkpoint_config(checkpoint);
  if (manifest_override) {
    auto j = config.resolved;
    j["data"]["manifest"] = *manifest_override;
    config = RunConfig::from_json(j);
  }
  Trainer trainer(config);
  trainer.load(checkpoint);
  auto data = load_data(config);
  auto samples = data.split(split);
  if (samples.empty()) throw DataError("split '" + split + "' is empty");
  return trainer.evaluate(samples, {config.eval.head, config.eval.include_background, export_dir});
}

AblationAxis parse_axis(const std::string& name) {
  if (name == "prompt_tag" || name == "prompts") return AblationAxis::prompt_tag;
  if (name == "tokens") return AblationAxis::tokens;
  if (name == "unlabeled" || name == "unlabeled_percent") return AblationAxis::unlabeled_percent;
  if (name == "tau") return AblationAxis::tau;
  throw ConfigError("unknown ablation axis '" + name + "' (expected prompt_tag, tokens, unlabeled or tau)");
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::prompt_tag: return "prompt_tag";
    case AblationAxis::tokens: return "tokens";
    case AblationAxis::unlabeled_percent: return "unlabeled";
    case AblationAxis::tau: return "tau";
  }
  return "?";
}

std::vector<AblationRow> ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                                bool verbose) {
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  const fs::path root = base.output_dir;
  std::vector<AblationRow> rows;
  for (const auto& value : values) {
    auto j = base.resolved;
    try {
      switch (axis) {
        case AblationAxis::prompt_tag: j["text"]["tag"] = value; break;
        case AblationAxis::tokens: j["text"]["tokens"] = std::stoi(value); break;
        case AblationAxis::unlabeled_percent: j["data"]["labeled_fraction"] = 1.0 - std::stod(value) / 100.0; break;
        case AblationAxis::tau: j["loss"]["tau"] = std::stod(value); break;
      }
    } catch (const std::logic_error&) {
      throw ConfigError("ablation value '" + value + "' is not valid for axis " + to_string(axis));
    }
    const auto run_dir = root / (to_string(axis) + "-" + value);
    j["output_dir"] = run_dir.string();
    auto config = RunConfig::from_json(j);
    if (verbose) std::cerr << "ablation " << to_string(axis) << "=" << value << "\n";
    auto fitted = fit(config, {std::nullopt, std::nullopt, verbose});
    AblationRow row;
    row.value = value;
    row.run_dir = run_dir;
    row.mean_retention = fitted.mean_retention;
    if (fitted.final_report) row.metrics = *fitted.final_report;
    rows.push_back(std::move(row));
  }

  fs::create_directories(root);
  json results = json::array();
  std::ostringstream csv, table;
  csv << to_string(axis) << ",mDICE,mIOU,mCPA,retention\n";
  table << std::left << std::setw(14) << to_string(axis) << std::right << std::setw(9) << "mDICE" << std::setw(9)
        << "mIOU" << std::setw(9) << "mCPA" << std::setw(11) << "retention" << "\n";
  table << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    results.push_back({{"value", r.value},
                       {"metrics", r.metrics.to_json()},
                       {"mean_retention", r.mean_retention},
                       {"run_dir", r.run_dir.string()}});
    csv << r.value << "," << r.metrics.mdice << "," << r.metrics.miou << "," << r.metrics.mcpa << ","
        << r.mean_retention << "\n";
    table << std::left << std::setw(14) << r.value << std::right << std::setw(9) << 100.0 * r.metrics.mdice
          << std::setw(9) << 100.0 * r.metrics.miou << std::setw(9) << 100.0 * r.metrics.mcpa << std::setw(11)
          << std::setprecision(4) << r.mean_retention << std::setprecision(2) << "\n";
  }
  write_text(root / "results.json", json{{"axis", to_string(axis)}, {"rows", results}}.dump(2) + "\n");
  write_text(root / "results.csv", csv.str());
  write_text(root / "results.txt", table.str());
  return rows;
}

}  // namespace mpamatch::pipeline
