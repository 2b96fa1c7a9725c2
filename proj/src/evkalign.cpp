#include "evklab/evkalign.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace evklab {

namespace {

constexpr double kLogFloor = 1e-12;

}  // namespace

void AlignConfig::validate(std::size_t vocab_size) const {
  if (lambda < 0.0 || !std::isfinite(lambda))
    throw std::invalid_argument("AlignConfig: lambda must be finite and >= 0");
  if (sigma < 0.0 || !std::isfinite(sigma))
    throw std::invalid_argument("AlignConfig: sigma must be finite and >= 0");
  if (n_instances < 1) throw std::invalid_argument("AlignConfig: n_instances must be >= 1");
  if (k_early < 1 || k_early > k_late || k_late > vocab_size)
    throw std::invalid_argument("AlignConfig: need 1 <= k_early <= k_late <= vocab_size");
  if (stage_switch_frac < 0.0 || stage_switch_frac > 1.0)
    throw std::invalid_argument("AlignConfig: stage_switch_frac must be in [0, 1]");
}

std::vector<ReferenceDistribution> sample_align_instances(const EditRequest& request,
                                                          const ToyModel& model_pre,
                                                          const AlignConfig& config,
                                                          RngStream& rng) {
  static const DriftType kTypes[3] = {DriftType::subject, DriftType::relation, DriftType::all};
  std::vector<ReferenceDistribution> refs;
  refs.reserve(config.n_instances);
  for (std::size_t i = 0; i < config.n_instances; ++i) {
    const DriftType drift = kTypes[rng.next_below(3)];
    EVKInstance inst = build_evk(request.prompt, model_pre, drift, config.sigma, rng);
    Vector probs = next_token_distribution(forward(model_pre, inst.perturbed_embedding));
    refs.push_back({std::move(inst), std::move(probs)});
  }
  return refs;
}

std::vector<std::size_t> topk_indices(std::span<const double> p, std::size_t k) {
  if (k < 1 || k > p.size())
    throw std::invalid_argument("topk_indices: k must be in [1, dim]");
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (p[a] != p[b]) return p[a] > p[b];
                      return a < b;  // ties toward the lower index
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Vector renormalize(std::span<const double> p, std::span<const std::size_t> idx) {
  double mass = 0.0;
  for (std::size_t i : idx) {
    if (i >= p.size()) throw std::out_of_range("renormalize: index out of range");
    mass += p[i];
  }
  if (!(mass > 0.0))
    throw std::runtime_error("renormalize: zero restricted mass (disjoint top-k support)");
  Vector out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(p[i] / mass);
  return out;
}

double kl_topk(std::span<const double> p_ref, std::span<const double> p_post, std::size_t k) {
  if (p_ref.size() != p_post.size())
    throw std::invalid_argument("kl_topk: dimension mismatch");
  const auto idx = topk_indices(p_ref, k);
  const Vector r = renormalize(p_ref, idx);
  const Vector q = renormalize(p_post, idx);
  double kl = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (r[i] <= 0.0) continue;
    kl += r[i] * (std::log(r[i]) - std::log(std::max(q[i], kLogFloor)));
  }
  return kl;
}

std::size_t schedule_k(const AlignConfig& config, std::size_t step, std::size_t v_steps) {
  const auto switch_step =
      static_cast<std::size_t>(config.stage_switch_frac * static_cast<double>(v_steps));
  return step < switch_step ? config.k_early : config.k_late;
}

EvkLossResult evk_loss(const ToyModel& model, const std::vector<ReferenceDistribution>& references,
                       std::size_t layer, std::size_t position, const Vector& delta,
                       std::size_t step, std::size_t v_steps, const AlignConfig& config) {
  if (references.empty()) throw std::invalid_argument("evk_loss: no references");
  const std::size_t k = schedule_k(config, step, v_steps);
  const std::size_t vocab = model.config.vocab_size;
  const double inv_n = 1.0 / static_cast<double>(references.size());

  EvkLossResult result;
  result.delta_grad.assign(model.config.d_model, 0.0);

  std::vector<InjectionSpec> injections = {{layer, position, delta}};
  for (const ReferenceDistribution& ref : references) {
    ForwardTrace tr = forward(model, ref.instance.perturbed_embedding, injections);
    const std::size_t last = tr.seq_len - 1;
    const Vector p = softmax(tr.logits.row(last));

    const auto idx = topk_indices(ref.probs, k);
    const Vector r = renormalize(ref.probs, idx);
    double mass = 0.0;
    for (std::size_t i : idx) mass += p[i];
    if (!(mass > 0.0))
      throw std::runtime_error("evk_loss: zero restricted mass in post distribution");

    // value and d(KL)/dp over the restricted support; terms floored inside
    // the log are constants there and drop out of the gradient
    double kl = 0.0;
    double active_ref_mass = 0.0;
    Vector g(vocab, 0.0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (r[i] <= 0.0) continue;
      const double q = p[idx[i]] / mass;
      kl += r[i] * (std::log(r[i]) - std::log(std::max(q, kLogFloor)));
      if (q > kLogFloor) {
        g[idx[i]] -= r[i] / p[idx[i]];
        active_ref_mass += r[i];
      }
    }
    for (std::size_t i : idx) g[i] += active_ref_mass / mass;

    // softmax backward into the logits row
    double gdotp = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) gdotp += g[j] * p[j];
    Matrix dlogits(tr.seq_len, vocab);
    double* row = dlogits.row_ptr(last);
    for (std::size_t j = 0; j < vocab; ++j) row[j] = inv_n * p[j] * (g[j] - gdotp);

    BackwardResult br =
        backward(model, tr, dlogits, injections, GradRequest{.injection_deltas = true});
    for (std::size_t j = 0; j < result.delta_grad.size(); ++j)
      result.delta_grad[j] += br.injection_deltas[0][j];
    result.value += inv_n * kl;
  }
  if (!std::isfinite(result.value)) throw std::runtime_error("evk_loss: non-finite loss");
  return result;
}

double combined_loss(double nll, double l_evk, double lambda) {
  if (!std::isfinite(nll) || !std::isfinite(l_evk))
    throw std::invalid_argument("combined_loss: non-finite inputs");
  return nll + lambda * l_evk;
}

}  // namespace evklab
