#include "evklab/evkbench.hpp"

#include <stdexcept>

namespace evklab {

namespace {

// stream id for regenerating an instance's offsets from its stored seed
const std::uint64_t kEvkStreamId = fnv1a64("evk-instance");

Span drift_span(const TokenizedPrompt& prompt, DriftType drift) {
  switch (drift) {
    case DriftType::subject:
      return prompt.subject_span;
    case DriftType::relation:
      return prompt.relation_span;
    case DriftType::all:
      return Span{0, prompt.tokens.size()};
  }
  throw std::logic_error("drift_span: unreachable");
}

}  // namespace

const char* drift_name(DriftType d) {
  switch (d) {
    case DriftType::subject:
      return "subject";
    case DriftType::relation:
      return "relation";
    case DriftType::all:
      return "all";
  }
  throw std::logic_error("drift_name: unreachable");
}

DriftType drift_from_name(const std::string& name) {
  if (name == "subject") return DriftType::subject;
  if (name == "relation") return DriftType::relation;
  if (name == "all") return DriftType::all;
  throw std::invalid_argument("unknown drift type '" + name + "'");
}

EVKInstance rebuild_evk(const TokenizedPrompt& prompt, const ToyModel& model_pre, DriftType drift,
                        double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("build_evk: sigma must be >= 0");
  const Span span = drift_span(prompt, drift);
  if (span.empty())
    throw std::invalid_argument(std::string("build_evk: empty ") + drift_name(drift) +
                                " span for requested drift");

  EVKInstance inst;
  inst.source_prompt = prompt;
  inst.drift = drift;
  inst.sigma = sigma;
  inst.seed = seed;
  inst.perturbed_embedding = embed(model_pre, prompt.tokens);

  RngStream g(seed, kEvkStreamId);
  for (std::size_t i = span.begin; i < span.end; ++i) {
    double* row = inst.perturbed_embedding.row_ptr(i);
    for (std::size_t j = 0; j < inst.perturbed_embedding.cols(); ++j)
      row[j] += sigma * g.next_gaussian();
  }
  return inst;
}

EVKInstance build_evk(const TokenizedPrompt& prompt, const ToyModel& model_pre, DriftType drift,
                      double sigma, RngStream& rng) {
  return rebuild_evk(prompt, model_pre, drift, sigma, rng.next_u64());
}

std::vector<EVKInstance> build_bench(const std::vector<TokenizedPrompt>& prompts,
                                     const ToyModel& model_pre, double sigma,
                                     std::size_t samples_per_prompt, RngStream& rng) {
  if (samples_per_prompt < 1)
    throw std::invalid_argument("build_bench: samples_per_prompt must be >= 1");
  static const DriftType kCycle[3] = {DriftType::subject, DriftType::relation, DriftType::all};
  std::vector<EVKInstance> out;
  out.reserve(prompts.size() * samples_per_prompt);
  std::size_t g = 0;
  for (const auto& prompt : prompts) {
    for (std::size_t s = 0; s < samples_per_prompt; ++s, ++g) {
      RngStream inst_rng = rng.derive(g);
      out.push_back(build_evk(prompt, model_pre, kCycle[g % 3], sigma, inst_rng));
    }
  }
  return out;
}

double embedding_stability(const ToyModel& model_pre, const ToyModel& model_post,
                           const EVKInstance& instance) {
  if (model_pre.config != model_post.config)
    throw std::invalid_argument("embedding_stability: model configs differ");
  const Vector h_pre = forward(model_pre, instance.perturbed_embedding).final_token_hidden;
  const Vector h_post = forward(model_post, instance.perturbed_embedding).final_token_hidden;
  return cosine(h_pre, h_post);
}

double text_stability(const ToyModel& model_pre, const ToyModel& model_post,
                      const TokenizedPrompt& prompt) {
  if (model_pre.config != model_post.config)
    throw std::invalid_argument("text_stability: model configs differ");
  const Vector h_pre = forward(model_pre, prompt.tokens).final_token_hidden;
  const Vector h_post = forward(model_post, prompt.tokens).final_token_hidden;
  return cosine(h_pre, h_post);
}

StabilityReport run_bench(const ToyModel& model_pre, const ToyModel& model_post,
                          const std::vector<EVKInstance>& instances,
                          const std::vector<TokenizedPrompt>& attribution_prompts) {
  if (instances.empty()) throw std::invalid_argument("run_bench: no instances");
  StabilityReport report;
  report.per_instance_es.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    try {
      report.per_instance_es.push_back(embedding_stability(model_pre, model_post, instances[i]));
    } catch (const std::exception& e) {
      throw std::runtime_error("run_bench: instance " + std::to_string(i) + ": " + e.what());
    }
    switch (instances[i].drift) {
      case DriftType::subject:
        ++report.count_subject;
        break;
      case DriftType::relation:
        ++report.count_relation;
        break;
      case DriftType::all:
        ++report.count_all;
        break;
    }
  }
  for (std::size_t i = 0; i < attribution_prompts.size(); ++i) {
    try {
      report.per_prompt_ts.push_back(text_stability(model_pre, model_post, attribution_prompts[i]));
    } catch (const std::exception& e) {
      throw std::runtime_error("run_bench: attribution prompt " + std::to_string(i) + ": " +
                               e.what());
    }
  }

  double es = 0.0;
  for (double x : report.per_instance_es) es += x;
  report.mean_es = es / static_cast<double>(report.per_instance_es.size());
  if (!report.per_prompt_ts.empty()) {
    double ts = 0.0;
    for (double x : report.per_prompt_ts) ts += x;
    report.mean_ts = ts / static_cast<double>(report.per_prompt_ts.size());
  }
  return report;
}

}  // namespace evklab
