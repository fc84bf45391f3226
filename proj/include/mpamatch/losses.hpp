#pragma once

#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mpamatch::losses {

/// Every scalar coefficient of the training objective.
struct LossWeights {
  double lambda = 0.5;  // feature-perturbed stream weight
  double mu = 0.5;      // strong streams weight, split over the two views
  double tau = 0.95;    // pseudo-label confidence threshold, in (0,1)
  double alpha1 = 0.5;  // PAL
  double alpha2 = 0.5;  // PCL
  double alpha = 0.25;  // prototype term
  double beta = 0.5;    // supervised term
  double gamma = 0.25;  // unlabeled term
  double epsilon = 1e-6;
  double temperature = 0.1;  // applied to similarity scores before PAL/PCL
  bool soft_pseudo = false;

  /// Throws ConfigError on a negative weight, tau outside (0,1) or non-positive temperature.
  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

struct SupervisedTerms {
  torch::Tensor total;  // 0.5 * (ce + dice)
  torch::Tensor ce;
  torch::Tensor dice;
};

/// Hybrid cross-entropy + Dice on probability maps [N,C,H,W] against one-hot targets.
/// Dice is taken per (image, class) over flattened pixels and averaged.
SupervisedTerms supervised_loss(const torch::Tensor& probabilities, const torch::Tensor& onehot,
                                double epsilon = 1e-6);

/// Same objective computed from logits; log-softmax keeps the CE gradient alive when
/// probabilities underflow.
SupervisedTerms supervised_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& onehot,
                                            double epsilon = 1e-6);

/// Pseudo-label targets for one prediction stream. `source` is the detached weak-view
/// distribution [N,C,H,W] (already CutMix-mixed for strong streams).
struct ConsistencyTarget {
  torch::Tensor source;
};

struct UnlabeledTerms {
  torch::Tensor total;
  double retention = 0.0;  // share of weak-view pixels whose confidence passes tau
};

/// Dual-stream consistency on probability maps. The weak map is the pseudo-label source
/// for all three streams (geometrically aligned case).
UnlabeledTerms unlabeled_loss(const torch::Tensor& p_weak, const torch::Tensor& p_fp, const torch::Tensor& p_s1,
                              const torch::Tensor& p_s2, const LossWeights& weights);

/// General form used by training: each stream has its own (mixed) target and predictions
/// are given as log-probabilities. Every term is averaged over its retained pixels.
UnlabeledTerms unlabeled_loss_log(const ConsistencyTarget& fp_target, const torch::Tensor& logp_fp,
                                  const ConsistencyTarget& s1_target, const torch::Tensor& logp_s1,
                                  const ConsistencyTarget& s2_target, const torch::Tensor& logp_s2,
                                  const LossWeights& weights);

struct PrototypeTerm {
  torch::Tensor value;
  bool empty = false;  // no valid pixel; value is 0
};

/// Prototype alignment: cross-entropy of scores/temperature [N,P] against flat indices y [N].
/// Pixels with y < 0 are ignored.
PrototypeTerm pal_loss(const torch::Tensor& scores, const torch::Tensor& assigned, double temperature = 1.0);

/// Prototype contrast: like PAL, but the other prototypes of the assigned class are
/// removed from the denominator. P must be divisible by `per_class`.
PrototypeTerm pcl_loss(const torch::Tensor& scores, const torch::Tensor& assigned, int per_class,
                       double temperature = 1.0);

/// Scalar inputs to the total objective.
struct LossComponents {
  double ce = 0.0;
  double dice = 0.0;
  double label = 0.0;
  double unlabel = 0.0;
  double retention = 0.0;
  double pal_visual = 0.0;
  double pal_text = 0.0;
  double pcl_visual = 0.0;
  double pcl_text = 0.0;
  bool visual_active = false;
  bool text_active = false;
};

struct LossReport {
  double L_label = 0.0;
  double L_CE = 0.0;
  double L_Dice = 0.0;
  double L_unlabel = 0.0;
  double L_PAL_visual = 0.0;
  double L_PAL_text = 0.0;
  double L_PCL_visual = 0.0;
  double L_PCL_text = 0.0;
  double L_proto = 0.0;
  double L_total = 0.0;
  double retention = 0.0;

  nlohmann::json to_json() const;
  static LossReport from_json(const nlohmann::json& j);
};

/// PAL and PCL of the enabled branches, averaged when both are active.
double branch_average(double visual, double text, bool visual_active, bool text_active);

/// Combines components into the report. Throws NumericAbort naming the first non-finite
/// component; `step` is carried into the error.
LossReport total_loss(const LossComponents& c, const LossWeights& w, long step = -1);

/// Same combination on autograd tensors; used to build the optimized objective.
torch::Tensor combine(const torch::Tensor& proto, const torch::Tensor& label, const torch::Tensor& unlabel,
                      const LossWeights& w);

}  // namespace mpamatch::losses
