#ifndef EVKLAB_MODEL_HPP_
#define EVKLAB_MODEL_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "evklab/linalg.hpp"

namespace evklab {

enum class Activation : std::uint32_t { gelu_tanh = 0, relu = 1 };

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;  // set by the corpus
  std::size_t max_seq = 32;
  Activation activation = Activation::gelu_tanh;
  double ln_eps = 1e-5;

  void validate() const;  // throws on invalid combinations
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
  Vector ln1_g, ln1_b;        // attention pre-norm
  Vector ln2_g, ln2_b;        // FFN pre-norm
  Matrix w_in;                // d_ff x d_model
  Matrix w_out;               // d_model x d_ff
  bool operator==(const LayerParams&) const = default;
};

// Shared tensor layout for parameters and their gradients.
struct TensorBundle {
  Matrix tok_emb;  // vocab x d_model
  Matrix pos_emb;  // max_seq x d_model
  std::vector<LayerParams> layers;
  Vector lnf_g, lnf_b;
  Matrix unembed;  // vocab x d_model
  bool operator==(const TensorBundle&) const = default;
};

struct ToyModel : TensorBundle {
  ModelConfig config;
  bool operator==(const ToyModel&) const = default;
};

using ModelGrads = TensorBundle;

struct TensorRef {
  std::string name;
  double* data;
  std::size_t rows, cols;
  std::size_t size() const { return rows * cols; }
};

// Fixed-order view over every tensor in the bundle; the order defines the
// checkpoint layout and the optimizer update order.
std::vector<TensorRef> tensor_refs(TensorBundle& b);
ModelGrads zeros_like(const ToyModel& m);

ToyModel init_model(const ModelConfig& config, RngStream& rng, double init_std = 0.08);

// Adds `delta` to the FFN output m^l at (layer, position) before the residual
// sum (the only supported injection site).
struct InjectionSpec {
  std::size_t layer = 0;
  std::size_t position = 0;
  Vector delta;
};

// Replaces the post-residual hidden state h^l at (layer, position); used by
// causal tracing. Gradients are not defined through overrides.
struct StateOverride {
  std::size_t layer = 0;
  std::size_t position = 0;
  Vector value;
};

struct LayerTrace {
  Matrix ln1_out;
  Vector ln1_mean, ln1_rstd;
  Matrix q, k, v;                 // n x d_model, heads packed
  std::vector<Matrix> att_probs;  // one n x n lower-triangular matrix per head
  Matrix att_ctx;
  Matrix att_out;    // a^l
  Matrix resid_mid;  // h^{l-1} + a^l
  Matrix ln2_out;
  Vector ln2_mean, ln2_rstd;
  Matrix ffn_pre;  // n x d_ff
  Matrix ffn_key;  // sigma(W_in ln2), the FFN key
  Matrix ffn_out;  // W_out * key, before any injection
  Matrix hidden;   // h^l after residual sum, injections and overrides
};

struct ForwardTrace {
  std::vector<int> tokens;  // empty when the input was an embedding matrix
  Matrix input_emb;         // n x d_model
  std::vector<LayerTrace> layers;
  Matrix lnf_out;
  Vector lnf_mean, lnf_rstd;
  Matrix logits;  // n x vocab
  Vector final_token_hidden;
  std::size_t seq_len = 0;
  bool has_override = false;
};

Matrix embed(const ToyModel& m, std::span<const int> tokens);

ForwardTrace forward(const ToyModel& m, std::span<const int> tokens,
                     const std::vector<InjectionSpec>& injections = {},
                     const std::vector<StateOverride>& overrides = {});
ForwardTrace forward(const ToyModel& m, const Matrix& embeddings,
                     const std::vector<InjectionSpec>& injections = {},
                     const std::vector<StateOverride>& overrides = {});

Vector softmax(std::span<const double> logits);
Vector next_token_distribution(const ForwardTrace& trace);
std::size_t argmax(std::span<const double> v);  // ties break to the lower index
std::vector<int> greedy_decode(const ToyModel& m, std::vector<int> tokens, std::size_t n_new);

// ---- reverse-mode gradients ----

struct GradRequest {
  bool params = false;
  bool injection_deltas = false;
  bool input_embeddings = false;
};

struct BackwardResult {
  double loss = 0.0;  // filled by the loss wrappers
  ModelGrads params;
  std::vector<Vector> injection_deltas;  // aligned with the injections list
  Matrix input_embeddings;               // n x d_model
};

// Pulls d(loss)/d(logits) back through the whole network. The trace must come
// from a forward pass without state overrides.
BackwardResult backward(const ToyModel& m, const ForwardTrace& trace, const Matrix& dlogits,
                        const std::vector<InjectionSpec>& injections, const GradRequest& req);

struct TokenLossSpec {
  std::size_t position = 0;  // logits row supervised
  int target = 0;
  double weight = 1.0;
};

double nll_loss(const ForwardTrace& trace, std::span<const TokenLossSpec> specs);
Matrix nll_dlogits(const ForwardTrace& trace, std::span<const TokenLossSpec> specs);

// Convenience: forward + NLL backward in one call. Throws if the loss is
// non-finite.
BackwardResult nll_backward(const ToyModel& m, std::span<const int> tokens,
                            std::span<const TokenLossSpec> specs,
                            const std::vector<InjectionSpec>& injections, const GradRequest& req);

// ---- training ----

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double target_accuracy = 0.98;
  std::size_t eval_every = 25;
};

struct TrainExample {
  std::vector<int> prompt;
  int object = 0;
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::size_t steps_run = 0;
  double final_accuracy = 0.0;
};

// Teacher-forced NLL on the object token only; accuracy is greedy top-1 over
// `eval_examples`. Deterministic given the rng stream.
TrainLog train(ToyModel& m, const std::vector<TrainExample>& examples,
               const std::vector<TrainExample>& eval_examples, const TrainConfig& config,
               RngStream& rng);

double top1_accuracy(const ToyModel& m, const std::vector<TrainExample>& eval_examples);

// ---- checkpoint io ----

// Binary format documented byte-exactly in docs/checkpoint_format.md.
void save_model(const ToyModel& m, const std::filesystem::path& path);
ToyModel load_model(const std::filesystem::path& path);

}  // namespace evklab

#endif  // EVKLAB_MODEL_HPP_
