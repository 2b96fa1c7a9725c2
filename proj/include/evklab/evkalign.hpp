#ifndef EVKLAB_EVKALIGN_HPP_
#define EVKLAB_EVKALIGN_HPP_

#include <cstddef>
#include <vector>

#include "evklab/corpus.hpp"
#include "evklab/evkbench.hpp"
#include "evklab/model.hpp"

namespace evklab {

struct AlignConfig {
  double lambda = 0.3;
  std::size_t n_instances = 1;
  double sigma = 0.1;
  std::size_t k_early = 10;
  std::size_t k_late = 50;
  // stage switch at floor(frac * v_steps); early k before, late k from there on
  double stage_switch_frac = 0.5;

  void validate(std::size_t vocab_size) const;
};

// Pre-edit next-token distribution on one sampled EVK instance; computed once
// per edit request and frozen for the whole optimization.
struct ReferenceDistribution {
  EVKInstance instance;
  Vector probs;
};

// N instances drawn from the edit prompt with drift type uniform over
// {subject, relation, all} at config.sigma.
std::vector<ReferenceDistribution> sample_align_instances(const EditRequest& request,
                                                          const ToyModel& model_pre,
                                                          const AlignConfig& config,
                                                          RngStream& rng);

// Indices of the k largest entries; ties break toward the lower index.
// Returned sorted ascending.
std::vector<std::size_t> topk_indices(std::span<const double> p, std::size_t k);

// p restricted to idx and rescaled to sum 1. Throws when the restricted mass
// is zero.
Vector renormalize(std::span<const double> p, std::span<const std::size_t> idx);

// D_KL(ref_k || post_k) over the top-k support of the reference; zero-mass
// reference terms drop out, the post side is floored at 1e-12 inside the log.
double kl_topk(std::span<const double> p_ref, std::span<const double> p_post, std::size_t k);

std::size_t schedule_k(const AlignConfig& config, std::size_t step, std::size_t v_steps);

struct EvkLossResult {
  double value = 0.0;
  Vector delta_grad;  // d(L_EVK)/d(delta), d_model
};

// Mean top-k KL between the frozen references and the current model view
// (model + delta injected at the edit site), with the gradient w.r.t. delta.
EvkLossResult evk_loss(const ToyModel& model, const std::vector<ReferenceDistribution>& references,
                       std::size_t layer, std::size_t position, const Vector& delta,
                       std::size_t step, std::size_t v_steps, const AlignConfig& config);

double combined_loss(double nll, double l_evk, double lambda);

}  // namespace evklab

#endif  // EVKLAB_EVKALIGN_HPP_
