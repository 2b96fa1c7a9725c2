#ifndef EVKLAB_EVKBENCH_HPP_
#define EVKLAB_EVKBENCH_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evklab/corpus.hpp"
#include "evklab/model.hpp"

namespace evklab {

enum class DriftType { subject, relation, all };

const char* drift_name(DriftType d);
DriftType drift_from_name(const std::string& name);

// One virtual knowledge point: the prompt embedding with an isotropic
// Gaussian offset on the drifted span. The offset regenerates exactly from
// (prompt, drift, sigma, seed); rows outside the span stay bit-equal to the
// clean embedding.
struct EVKInstance {
  TokenizedPrompt source_prompt;
  DriftType drift = DriftType::all;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  Matrix perturbed_embedding;
};

EVKInstance build_evk(const TokenizedPrompt& prompt, const ToyModel& model_pre, DriftType drift,
                      double sigma, RngStream& rng);
// Rebuild from stored metadata; bit-identical to the original instance.
EVKInstance rebuild_evk(const TokenizedPrompt& prompt, const ToyModel& model_pre, DriftType drift,
                        double sigma, std::uint64_t seed);

// samples_per_prompt instances per prompt, drift types cycled globally so the
// three types stay balanced (counts differ by at most one overall).
std::vector<EVKInstance> build_bench(const std::vector<TokenizedPrompt>& prompts,
                                     const ToyModel& model_pre, double sigma,
                                     std::size_t samples_per_prompt, RngStream& rng);

// Cosine similarity of the two models' final-token hidden states on the same
// perturbed embedding input.
double embedding_stability(const ToyModel& model_pre, const ToyModel& model_post,
                           const EVKInstance& instance);
// Same measure on an unperturbed token sequence.
double text_stability(const ToyModel& model_pre, const ToyModel& model_post,
                      const TokenizedPrompt& prompt);

struct StabilityReport {
  double mean_es = 0.0;                // in [-1, 1]
  std::optional<double> mean_ts;       // absent when no attribution prompts
  std::vector<double> per_instance_es;
  std::vector<double> per_prompt_ts;
  std::size_t count_subject = 0;
  std::size_t count_relation = 0;
  std::size_t count_all = 0;
  // config echo
  double sigma = 0.0;
  std::size_t samples_per_prompt = 0;
  std::uint64_t seed = 0;
};

StabilityReport run_bench(const ToyModel& model_pre, const ToyModel& model_post,
                          const std::vector<EVKInstance>& instances,
                          const std::vector<TokenizedPrompt>& attribution_prompts);

}  // namespace evklab

#endif  // EVKLAB_EVKBENCH_HPP_
