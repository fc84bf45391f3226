#include "mpamatch/losses.hpp"

#include <cmath>
#include <limits>

#include "mpamatch/errors.hpp"

namespace mpamatch::losses {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": tensors differ in shape");
}

void require_nchw(const torch::Tensor& t, const char* what) {
  if (t.dim() != 4) throw ShapeError(std::string(what) + ": expected an N x C x H x W tensor");
}

SupervisedTerms supervised_core(const torch::Tensor& ce_map, const torch::Tensor& probabilities,
                                const torch::Tensor& onehot, double epsilon) {
  // ce_map is the per-pixel negative log-likelihood [N,H,W]
  auto ce = ce_map.mean();
  auto intersection = (probabilities * onehot).sum({2, 3});
  auto denom = probabilities.sum({2, 3}) + onehot.sum({2, 3});
  auto dice = (1.0 - (2.0 * intersection + epsilon) / (denom + epsilon)).mean();
  return {0.5 * (ce + dice), ce, dice};
}

// Per-pixel cross-entropy of one stream against its target; retained pixels only.
std::pair<torch::Tensor, torch::Tensor> consistency_term(const torch::Tensor& source, const torch::Tensor& logp,
                                                          const LossWeights& w) {
  auto target = source.detach();
  auto [confidence, pseudo] = target.max(1);
  auto keep = confidence >= w.tau;
  torch::Tensor per_pixel;
  if (w.soft_pseudo) {
    per_pixel = -torch::xlogy(target, logp.exp()).sum(1);
  } else {
    per_pixel = -logp.gather(1, pseudo.unsqueeze(1)).squeeze(1);
  }
  auto kept = keep.sum();
  auto masked = torch::where(keep, per_pixel, torch::zeros_like(per_pixel));
  auto term = masked.sum() / kept.clamp_min(1).to(masked.scalar_type());
  return {term, keep};
}

torch::Tensor valid_rows(const torch::Tensor& assigned) { return assigned >= 0; }

}  // namespace

void LossWeights::validate() const {
  const std::pair<const char*, double> nonneg[] = {{"lambda", lambda}, {"mu", mu},       {"alpha1", alpha1},
                                                   {"alpha2", alpha2}, {"alpha", alpha}, {"beta", beta},
                                                   {"gamma", gamma},   {"epsilon", epsilon}};
  for (const auto& [name, v] : nonneg) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string("loss weight '") + name + "' must be >= 0");
  }
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("loss weight 'tau' must lie in (0,1)");
  if (!(temperature > 0.0)) throw ConfigError("loss weight 'temperature' must be > 0");
}

nlohmann::json LossWeights::to_json() const {
  return {{"lambda", lambda}, {"mu", mu},         {"tau", tau},         {"alpha1", alpha1},
          {"alpha2", alpha2}, {"alpha", alpha},   {"beta", beta},       {"gamma", gamma},
          {"epsilon", epsilon}, {"temperature", temperature}, {"soft_pseudo", soft_pseudo}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda = j.value("lambda", w.lambda);
  w.mu = j.value("mu", w.mu);
  w.tau = j.value("tau", w.tau);
  w.alpha1 = j.value("alpha1", w.alpha1);
  w.alpha2 = j.value("alpha2", w.alpha2);
  w.alpha = j.value("alpha", w.alpha);
  w.beta = j.value("beta", w.beta);
  w.gamma = j.value("gamma", w.gamma);
  w.epsilon = j.value("epsilon", w.epsilon);
  w.temperature = j.value("temperature", w.temperature);
  w.soft_pseudo = j.value("soft_pseudo", w.soft_pseudo);
  w.validate();
  return w;
}

SupervisedTerms supervised_loss(const torch::Tensor& probabilities, const torch::Tensor& onehot, double epsilon) {
  require_nchw(probabilities, "supervised_loss");
  require_same_shape(probabilities, onehot, "supervised_loss");
  auto target = onehot.to(probabilities.scalar_type());
  auto ce_map = -torch::xlogy(target, probabilities).sum(1);
  return supervised_core(ce_map, probabilities, target, epsilon);
}

SupervisedTerms supervised_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& onehot,
                                            double epsilon) {
  require_nchw(logits, "supervised_loss");
  require_same_shape(logits, onehot, "supervised_loss");
  auto target = onehot.to(logits.scalar_type());
  auto logp = torch::log_softmax(logits, 1);
  auto ce_map = -(target * logp).sum(1);
  return supervised_core(ce_map, logp.exp(), target, epsilon);
}

UnlabeledTerms unlabeled_loss(const torch::Tensor& p_weak, const torch::Tensor& p_fp, const torch::Tensor& p_s1,
                              const torch::Tensor& p_s2, const LossWeights& weights) {
  require_nchw(p_weak, "unlabeled_loss");
  require_same_shape(p_weak, p_fp, "unlabeled_loss");
  require_same_shape(p_weak, p_s1, "unlabeled_loss");
  require_same_shape(p_weak, p_s2, "unlabeled_loss");
  ConsistencyTarget target{p_weak};
  return unlabeled_loss_log(target, torch::log(p_fp), target, torch::log(p_s1), target, torch::log(p_s2), weights);
}

UnlabeledTerms unlabeled_loss_log(const ConsistencyTarget& fp_target, const torch::Tensor& logp_fp,
                                  const ConsistencyTarget& s1_target, const torch::Tensor& logp_s1,
                                  const ConsistencyTarget& s2_target, const torch::Tensor& logp_s2,
                                  const LossWeights& weights) {
  require_same_shape(fp_target.source, logp_fp, "unlabeled_loss");
  require_same_shape(s1_target.source, logp_s1, "unlabeled_loss");
  require_same_shape(s2_target.source, logp_s2, "unlabeled_loss");
  auto [fp, keep] = consistency_term(fp_target.source, logp_fp, weights);
  auto [s1, keep1] = consistency_term(s1_target.source, logp_s1, weights);
  auto [s2, keep2] = consistency_term(s2_target.source, logp_s2, weights);
  UnlabeledTerms out;
  out.total = weights.lambda * fp + 0.5 * weights.mu * (s1 + s2);
  out.retention = keep.to(torch::kDouble).mean().item<double>();
  return out;
}

PrototypeTerm pal_loss(const torch::Tensor& scores, const torch::Tensor& assigned, double temperature) {
  if (scores.dim() != 2 || assigned.dim() != 1 || scores.size(0) != assigned.size(0))
    throw ShapeError("pal_loss: expected scores [N,P] and assignments [N]");
  auto valid = valid_rows(assigned);
  if (!valid.any().item<bool>()) return {torch::zeros({}, scores.options()), true};
  auto y = assigned.index({valid});
  if (y.max().item<std::int64_t>() >= scores.size(1)) throw ValidationError("pal_loss: prototype index out of range");
  auto logp = torch::log_softmax(scores.index({valid}) / temperature, 1);
  return {-logp.gather(1, y.unsqueeze(1)).mean(), false};
}

PrototypeTerm pcl_loss(const torch::Tensor& scores, const torch::Tensor& assigned, int per_class,
                       double temperature) {
  if (scores.dim() != 2 || assigned.dim() != 1 || scores.size(0) != assigned.size(0))
    throw ShapeError("pcl_loss: expected scores [N,P] and assignments [N]");
  if (per_class < 1 || scores.size(1) % per_class != 0)
    throw ShapeError("pcl_loss: prototype count must be divisible by prototypes-per-class");
  auto valid = valid_rows(assigned);
  if (!valid.any().item<bool>()) return {torch::zeros({}, scores.options()), true};
  auto y = assigned.index({valid});
  if (y.max().item<std::int64_t>() >= scores.size(1)) throw ValidationError("pcl_loss: prototype index out of range");

  const auto P = scores.size(1);
  auto j = torch::arange(P, y.options());
  auto same_class = (j.div(per_class, "floor").unsqueeze(0) == y.div(per_class, "floor").unsqueeze(1));
  auto sibling = same_class & (j.unsqueeze(0) != y.unsqueeze(1));
  auto z = (scores.index({valid}) / temperature).masked_fill(sibling, -std::numeric_limits<double>::infinity());
  auto logp = torch::log_softmax(z, 1);
  return {-logp.gather(1, y.unsqueeze(1)).mean(), false};
}

double branch_average(double visual, double text, bool visual_active, bool text_active) {
  if (visual_active && text_active) return 0.5 * (visual + text);
  if (visual_active) return visual;
  if (text_active) return text;
  return 0.0;
}

LossReport total_loss(const LossComponents& c, const LossWeights& w, long step) {
  const std::pair<const char*, double> parts[] = {
      {"L_CE", c.ce},           {"L_Dice", c.dice},           {"L_label", c.label},
      {"L_unlabel", c.unlabel}, {"L_PAL_visual", c.pal_visual}, {"L_PAL_text", c.pal_text},
      {"L_PCL_visual", c.pcl_visual}, {"L_PCL_text", c.pcl_text}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NumericAbort(name, step);
  }
  LossReport r;
  r.L_CE = c.ce;
  r.L_Dice = c.dice;
  r.L_label = c.label;
  r.L_unlabel = c.unlabel;
  r.retention = c.retention;
  r.L_PAL_visual = c.pal_visual;
  r.L_PAL_text = c.pal_text;
  r.L_PCL_visual = c.pcl_visual;
  r.L_PCL_text = c.pcl_text;
  const double pal = branch_average(c.pal_visual, c.pal_text, c.visual_active, c.text_active);
  const double pcl = branch_average(c.pcl_visual, c.pcl_text, c.visual_active, c.text_active);
  r.L_proto = w.alpha1 * pal + w.alpha2 * pcl;
  r.L_total = w.alpha * r.L_proto + w.beta * r.L_label + w.gamma * r.L_unlabel;
  if (!std::isfinite(r.L_total)) throw NumericAbort("L_total", step);
  return r;
}

torch::Tensor combine(const torch::Tensor& proto, const torch::Tensor& label, const torch::Tensor& unlabel,
                      const LossWeights& w) {
  return w.alpha * proto + w.beta * label + w.gamma * unlabel;
}

nlohmann::json LossReport::to_json() const {
  return {{"L_label", L_label},           {"L_CE", L_CE},
          {"L_Dice", L_Dice},             {"L_unlabel", L_unlabel},
          {"L_PAL_visual", L_PAL_visual}, {"L_PAL_text", L_PAL_text},
          {"L_PCL_visual", L_PCL_visual}, {"L_PCL_text", L_PCL_text},
          {"L_proto", L_proto},           {"L_total", L_total},
          {"retention", retention}};
}

LossReport LossReport::from_json(const nlohmann::json& j) {
  LossReport r;
  r.L_label = j.at("L_label");
  r.L_CE = j.at("L_CE");
  r.L_Dice = j.at("L_Dice");
  r.L_unlabel = j.at("L_unlabel");
  r.L_PAL_visual = j.at("L_PAL_visual");
  r.L_PAL_text = j.at("L_PAL_text");
  r.L_PCL_visual = j.at("L_PCL_visual");
  r.L_PCL_text = j.at("L_PCL_text");
  r.L_proto = j.at("L_proto");
  r.L_total = j.at("L_total");
  r.retention = j.at("retention");
  return r;
}

}  // namespace mpamatch::losses
