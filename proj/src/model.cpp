#include "evklab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace evklab {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_tanh(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_tanh_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double activate(Activation a, double x) {
  return a == Activation::gelu_tanh ? gelu_tanh(x) : (x > 0.0 ? x : 0.0);
}

double activate_grad(Activation a, double x) {
  return a == Activation::gelu_tanh ? gelu_tanh_grad(x) : (x > 0.0 ? 1.0 : 0.0);
}

// y_i = (x_i - mu) * rstd * g_i + b_i, per row
Matrix layer_norm(const Matrix& x, const Vector& g, const Vector& b, double eps, Vector& means,
                  Vector& rstds) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  Matrix y(n, d);
  means.assign(n, 0.0);
  rstds.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.row_ptr(i);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    means[i] = mu;
    rstds[i] = rstd;
    double* yi = y.row_ptr(i);
    for (std::size_t j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * rstd * g[j] + b[j];
  }
  return y;
}

// Backward of layer_norm; accumulates into dg/db when given, returns dx.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& x, const Vector& means,
                           const Vector& rstds, const Vector& g, Vector* dg, Vector* db) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  Matrix dx(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.row_ptr(i);
    const double* dyi = dy.row_ptr(i);
    double* dxi = dx.row_ptr(i);
    const double mu = means[i];
    const double rstd = rstds[i];
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (xi[j] - mu) * rstd;
      const double dxhat = dyi[j] * g[j];
      m1 += dxhat;
      m2 += dxhat * xhat;
      if (dg) (*dg)[j] += dyi[j] * xhat;
      if (db) (*db)[j] += dyi[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (xi[j] - mu) * rstd;
      const double dxhat = dyi[j] * g[j];
      dxi[j] = rstd * (dxhat - m1 - xhat * m2);
    }
  }
  return dx;
}

}  // namespace

// ----------------------------- config / params -----------------------------

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || d_ff < 1 || n_heads < 1 || max_seq < 1 || vocab_size < 1)
    throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  if (!(ln_eps > 0.0)) throw std::invalid_argument("ModelConfig: ln_eps must be positive");
}

std::vector<TensorRef> tensor_refs(TensorBundle& b) {
  std::vector<TensorRef> refs;
  auto push_m = [&](const std::string& name, Matrix& m) {
    refs.push_back({name, m.data().data(), m.rows(), m.cols()});
  };
  auto push_v = [&](const std::string& name, Vector& v) {
    refs.push_back({name, v.data(), 1, v.size()});
  };
  push_m("tok_emb", b.tok_emb);
  push_m("pos_emb", b.pos_emb);
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams& lp = b.layers[l];
    push_m(p + "w_q", lp.w_q);
    push_m(p + "w_k", lp.w_k);
    push_m(p + "w_v", lp.w_v);
    push_m(p + "w_o", lp.w_o);
    push_v(p + "ln1_g", lp.ln1_g);
    push_v(p + "ln1_b", lp.ln1_b);
    push_v(p + "ln2_g", lp.ln2_g);
    push_v(p + "ln2_b", lp.ln2_b);
    push_m(p + "w_in", lp.w_in);
    push_m(p + "w_out", lp.w_out);
  }
  push_v("lnf_g", b.lnf_g);
  push_v("lnf_b", b.lnf_b);
  push_m("unembed", b.unembed);
  return refs;
}

namespace {

TensorBundle bundle_like(const ModelConfig& c, bool ones_for_ln) {
  TensorBundle b;
  b.tok_emb = Matrix(c.vocab_size, c.d_model);
  b.pos_emb = Matrix(c.max_seq, c.d_model);
  b.layers.resize(c.n_layers);
  for (auto& lp : b.layers) {
    lp.w_q = Matrix(c.d_model, c.d_model);
    lp.w_k = Matrix(c.d_model, c.d_model);
    lp.w_v = Matrix(c.d_model, c.d_model);
    lp.w_o = Matrix(c.d_model, c.d_model);
    lp.ln1_g.assign(c.d_model, ones_for_ln ? 1.0 : 0.0);
    lp.ln1_b.assign(c.d_model, 0.0);
    lp.ln2_g.assign(c.d_model, ones_for_ln ? 1.0 : 0.0);
    lp.ln2_b.assign(c.d_model, 0.0);
    lp.w_in = Matrix(c.d_ff, c.d_model);
    lp.w_out = Matrix(c.d_model, c.d_ff);
  }
  b.lnf_g.assign(c.d_model, ones_for_ln ? 1.0 : 0.0);
  b.lnf_b.assign(c.d_model, 0.0);
  b.unembed = Matrix(c.vocab_size, c.d_model);
  return b;
}

}  // namespace

ModelGrads zeros_like(const ToyModel& m) { return bundle_like(m.config, false); }

ToyModel init_model(const ModelConfig& config, RngStream& rng, double init_std) {
  config.validate();
  ToyModel m;
  static_cast<TensorBundle&>(m) = bundle_like(config, true);
  m.config = config;
  for (TensorRef& t : tensor_refs(m)) {
    if (t.name.find("ln") != std::string::npos) continue;  // norms keep 1/0 init
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = init_std * rng.next_gaussian();
  }
  return m;
}

// ----------------------------- forward -----------------------------

Matrix embed(const ToyModel& m, std::span<const int> tokens) {
  if (tokens.size() > m.config.max_seq)
    throw std::invalid_argument("embed: sequence longer than max_seq");
  Matrix e(tokens.size(), m.config.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= m.config.vocab_size)
      throw std::out_of_range("embed: token id " + std::to_string(t) + " out of range");
    const double* te = m.tok_emb.row_ptr(static_cast<std::size_t>(t));
    const double* pe = m.pos_emb.row_ptr(i);
    double* ei = e.row_ptr(i);
    for (std::size_t j = 0; j < m.config.d_model; ++j) ei[j] = te[j] + pe[j];
  }
  return e;
}

namespace {

void check_hooks(const ModelConfig& c, std::size_t n, const std::vector<InjectionSpec>& injections,
                 const std::vector<StateOverride>& overrides) {
  for (const auto& inj : injections) {
    if (inj.layer >= c.n_layers || inj.position >= n)
      throw std::out_of_range("forward: injection index out of range");
    if (inj.delta.size() != c.d_model)
      throw std::invalid_argument("forward: injection delta must have d_model entries");
  }
  for (const auto& ov : overrides) {
    if (ov.layer >= c.n_layers || ov.position >= n)
      throw std::out_of_range("forward: override index out of range");
    if (ov.value.size() != c.d_model)
      throw std::invalid_argument("forward: override value must have d_model entries");
  }
}

ForwardTrace forward_impl(const ToyModel& m, Matrix input_emb, std::vector<int> tokens,
                          const std::vector<InjectionSpec>& injections,
                          const std::vector<StateOverride>& overrides) {
  const ModelConfig& c = m.config;
  const std::size_t n = input_emb.rows();
  if (n > c.max_seq) throw std::invalid_argument("forward: sequence longer than max_seq");
  check_hooks(c, n, injections, overrides);

  const std::size_t d = c.d_model;
  const std::size_t hd = d / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardTrace tr;
  tr.tokens = std::move(tokens);
  tr.input_emb = std::move(input_emb);
  tr.seq_len = n;
  tr.has_override = !overrides.empty();
  tr.layers.resize(c.n_layers);

  const Matrix* h_prev = &tr.input_emb;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerParams& lp = m.layers[l];
    LayerTrace& lt = tr.layers[l];

    lt.ln1_out = layer_norm(*h_prev, lp.ln1_g, lp.ln1_b, c.ln_eps, lt.ln1_mean, lt.ln1_rstd);
    lt.q = matmul_nt(lt.ln1_out, lp.w_q);
    lt.k = matmul_nt(lt.ln1_out, lp.w_k);
    lt.v = matmul_nt(lt.ln1_out, lp.w_v);

    lt.att_probs.assign(c.n_heads, Matrix(n, n));
    lt.att_ctx = Matrix(n, d);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const std::size_t off = h * hd;
      Matrix& probs = lt.att_probs[h];
      for (std::size_t i = 0; i < n; ++i) {
        // causal: attend to j <= i only
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          const double* qi = lt.q.row_ptr(i) + off;
          const double* kj = lt.k.row_ptr(j) + off;
          for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
          s *= scale;
          probs(i, j) = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          probs(i, j) = std::exp(probs(i, j) - mx);
          z += probs(i, j);
        }
        double* ctx = lt.att_ctx.row_ptr(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          probs(i, j) /= z;
          const double* vj = lt.v.row_ptr(j) + off;
          const double p = probs(i, j);
          for (std::size_t e = 0; e < hd; ++e) ctx[e] += p * vj[e];
        }
      }
    }
    lt.att_out = matmul_nt(lt.att_ctx, lp.w_o);

    lt.resid_mid = *h_prev;
    add_inplace(lt.resid_mid, lt.att_out);

    lt.ln2_out = layer_norm(lt.resid_mid, lp.ln2_g, lp.ln2_b, c.ln_eps, lt.ln2_mean, lt.ln2_rstd);
    lt.ffn_pre = matmul_nt(lt.ln2_out, lp.w_in);
    lt.ffn_key = lt.ffn_pre;
    for (double& x : lt.ffn_key.data()) x = activate(c.activation, x);
    lt.ffn_out = matmul_nt(lt.ffn_key, lp.w_out);

    lt.hidden = lt.resid_mid;
    add_inplace(lt.hidden, lt.ffn_out);
    for (const auto& inj : injections) {
      if (inj.layer != l) continue;
      double* row = lt.hidden.row_ptr(inj.position);
      for (std::size_t j = 0; j < d; ++j) row[j] += inj.delta[j];
    }
    for (const auto& ov : overrides) {
      if (ov.layer != l) continue;
      lt.hidden.set_row(ov.position, ov.value);
    }
    h_prev = &lt.hidden;
  }

  tr.lnf_out = layer_norm(*h_prev, m.lnf_g, m.lnf_b, c.ln_eps, tr.lnf_mean, tr.lnf_rstd);
  tr.logits = matmul_nt(tr.lnf_out, m.unembed);
  if (n > 0) tr.final_token_hidden = tr.lnf_out.row_vector(n - 1);
  return tr;
}

}  // namespace

ForwardTrace forward(const ToyModel& m, std::span<const int> tokens,
                     const std::vector<InjectionSpec>& injections,
                     const std::vector<StateOverride>& overrides) {
  return forward_impl(m, embed(m, tokens), std::vector<int>(tokens.begin(), tokens.end()),
                      injections, overrides);
}

ForwardTrace forward(const ToyModel& m, const Matrix& embeddings,
                     const std::vector<InjectionSpec>& injections,
                     const std::vector<StateOverride>& overrides) {
  if (embeddings.cols() != m.config.d_model)
    throw std::invalid_argument("forward: embedding input must have d_model columns");
  return forward_impl(m, embeddings, {}, injections, overrides);
}

Vector softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  Vector p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

Vector next_token_distribution(const ForwardTrace& trace) {
  if (trace.seq_len == 0) throw std::invalid_argument("next_token_distribution: empty input");
  return softmax(trace.logits.row(trace.seq_len - 1));
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

std::vector<int> greedy_decode(const ToyModel& m, std::vector<int> tokens, std::size_t n_new) {
  if (tokens.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  for (std::size_t i = 0; i < n_new && tokens.size() < m.config.max_seq; ++i) {
    ForwardTrace tr = forward(m, tokens);
    tokens.push_back(static_cast<int>(argmax(tr.logits.row(tr.seq_len - 1))));
  }
  return tokens;
}

// ----------------------------- backward -----------------------------

BackwardResult backward(const ToyModel& m, const ForwardTrace& trace, const Matrix& dlogits,
                        const std::vector<InjectionSpec>& injections, const GradRequest& req) {
  if (trace.has_override)
    throw std::invalid_argument("backward: gradients through state overrides are not defined");
  const ModelConfig& c = m.config;
  const std::size_t n = trace.seq_len;
  const std::size_t d = c.d_model;
  const std::size_t hd = d / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (dlogits.rows() != n || dlogits.cols() != c.vocab_size)
    throw std::invalid_argument("backward: dlogits shape mismatch");

  BackwardResult out;
  const bool want_params = req.params;
  if (want_params) out.params = zeros_like(m);
  if (req.injection_deltas) out.injection_deltas.assign(injections.size(), Vector(d, 0.0));

  // readout
  Matrix d_lnf_out = matmul(dlogits, m.unembed);
  if (want_params) out.params.unembed = matmul_tn(dlogits, trace.lnf_out);

  const Matrix& h_last = trace.layers.back().hidden;
  Matrix dh = layer_norm_backward(d_lnf_out, h_last, trace.lnf_mean, trace.lnf_rstd, m.lnf_g,
                                  want_params ? &out.params.lnf_g : nullptr,
                                  want_params ? &out.params.lnf_b : nullptr);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const LayerParams& lp = m.layers[li];
    const LayerTrace& lt = trace.layers[li];
    const Matrix& x_prev = li == 0 ? trace.input_emb : trace.layers[li - 1].hidden;
    LayerParams* gp = want_params ? &out.params.layers[li] : nullptr;

    // h^l = resid_mid + ffn_out + deltas; the delta gradient is dh at its row
    if (req.injection_deltas) {
      for (std::size_t ii = 0; ii < injections.size(); ++ii) {
        if (injections[ii].layer != li) continue;
        const double* row = dh.row_ptr(injections[ii].position);
        for (std::size_t j = 0; j < d; ++j) out.injection_deltas[ii][j] += row[j];
      }
    }

    // FFN backward
    Matrix d_key = matmul(dh, lp.w_out);
    if (gp) gp->w_out = matmul_tn(dh, lt.ffn_key);
    Matrix d_pre = std::move(d_key);
    for (std::size_t i = 0; i < d_pre.size(); ++i)
      d_pre.data()[i] *= activate_grad(c.activation, lt.ffn_pre.data()[i]);
    Matrix d_ln2 = matmul(d_pre, lp.w_in);
    if (gp) gp->w_in = matmul_tn(d_pre, lt.ln2_out);

    Matrix dr = layer_norm_backward(d_ln2, lt.resid_mid, lt.ln2_mean, lt.ln2_rstd, lp.ln2_g,
                                    gp ? &gp->ln2_g : nullptr, gp ? &gp->ln2_b : nullptr);
    add_inplace(dr, dh);  // residual path around the FFN

    // resid_mid = x_prev + att_out; attention backward from da = dr
    Matrix d_ctx = matmul(dr, lp.w_o);
    if (gp) gp->w_o = matmul_tn(dr, lt.att_ctx);

    Matrix dq(n, d), dk(n, d), dv(n, d);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const std::size_t off = h * hd;
      const Matrix& probs = lt.att_probs[h];
      for (std::size_t i = 0; i < n; ++i) {
        const double* dctx_i = d_ctx.row_ptr(i) + off;
        double dp_dot_p = 0.0;
        Vector dp(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lt.v.row_ptr(j) + off;
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += dctx_i[e] * vj[e];
          dp[j] = s;
          dp_dot_p += s * probs(i, j);
          double* dvj = dv.row_ptr(j) + off;
          const double p = probs(i, j);
          for (std::size_t e = 0; e < hd; ++e) dvj[e] += p * dctx_i[e];
        }
        double* dqi = dq.row_ptr(i) + off;
        const double* qi = lt.q.row_ptr(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = probs(i, j) * (dp[j] - dp_dot_p) * scale;
          const double* kj = lt.k.row_ptr(j) + off;
          double* dkj = dk.row_ptr(j) + off;
          for (std::size_t e = 0; e < hd; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }

    Matrix d_ln1 = matmul(dq, lp.w_q);
    add_inplace(d_ln1, matmul(dk, lp.w_k));
    add_inplace(d_ln1, matmul(dv, lp.w_v));
    if (gp) {
      gp->w_q = matmul_tn(dq, lt.ln1_out);
      gp->w_k = matmul_tn(dk, lt.ln1_out);
      gp->w_v = matmul_tn(dv, lt.ln1_out);
    }

    Matrix dx_prev = layer_norm_backward(d_ln1, x_prev, lt.ln1_mean, lt.ln1_rstd, lp.ln1_g,
                                         gp ? &gp->ln1_g : nullptr, gp ? &gp->ln1_b : nullptr);
    add_inplace(dx_prev, dr);  // identity branch into x_prev
    dh = std::move(dx_prev);
  }

  if (req.input_embeddings) out.input_embeddings = dh;
  if (want_params && !trace.tokens.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* g = dh.row_ptr(i);
      double* te = out.params.tok_emb.row_ptr(static_cast<std::size_t>(trace.tokens[i]));
      double* pe = out.params.pos_emb.row_ptr(i);
      for (std::size_t j = 0; j < d; ++j) {
        te[j] += g[j];
        pe[j] += g[j];
      }
    }
  }
  return out;
}

// ----------------------------- losses -----------------------------

namespace {

double log_sum_exp(std::span<const double> row) {
  double mx = row[0];
  for (double x : row) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : row) z += std::exp(x - mx);
  return mx + std::log(z);
}

void check_specs(const ForwardTrace& trace, std::span<const TokenLossSpec> specs) {
  for (const auto& s : specs) {
    if (s.position >= trace.seq_len) throw std::out_of_range("loss: position out of range");
    if (s.target < 0 || static_cast<std::size_t>(s.target) >= trace.logits.cols())
      throw std::out_of_range("loss: target id out of range");
  }
}

}  // namespace

double nll_loss(const ForwardTrace& trace, std::span<const TokenLossSpec> specs) {
  check_specs(trace, specs);
  double loss = 0.0;
  for (const auto& s : specs) {
    const auto row = trace.logits.row(s.position);
    loss += s.weight * (log_sum_exp(row) - row[static_cast<std::size_t>(s.target)]);
  }
  return loss;
}

Matrix nll_dlogits(const ForwardTrace& trace, std::span<const TokenLossSpec> specs) {
  check_specs(trace, specs);
  Matrix d(trace.seq_len, trace.logits.cols());
  for (const auto& s : specs) {
    Vector p = softmax(trace.logits.row(s.position));
    double* row = d.row_ptr(s.position);
    for (std::size_t j = 0; j < p.size(); ++j) row[j] += s.weight * p[j];
    row[static_cast<std::size_t>(s.target)] -= s.weight;
  }
  return d;
}

BackwardResult nll_backward(const ToyModel& m, std::span<const int> tokens,
                            std::span<const TokenLossSpec> specs,
                            const std::vector<InjectionSpec>& injections, const GradRequest& req) {
  ForwardTrace tr = forward(m, tokens, injections);
  const double loss = nll_loss(tr, specs);
  if (!std::isfinite(loss)) throw std::runtime_error("nll_backward: non-finite loss");
  BackwardResult out = backward(m, tr, nll_dlogits(tr, specs), injections, req);
  out.loss = loss;
  return out;
}

// ----------------------------- training -----------------------------

double top1_accuracy(const ToyModel& m, const std::vector<TrainExample>& eval_examples) {
  if (eval_examples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : eval_examples) {
    ForwardTrace tr = forward(m, ex.prompt);
    if (static_cast<int>(argmax(tr.logits.row(tr.seq_len - 1))) == ex.object) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eval_examples.size());
}

TrainLog train(ToyModel& m, const std::vector<TrainExample>& examples,
               const std::vector<TrainExample>& eval_examples, const TrainConfig& config,
               RngStream& rng) {
  if (examples.empty()) throw std::invalid_argument("train: no examples");
  TrainLog log;
  if (config.steps == 0) {
    log.final_accuracy = top1_accuracy(m, eval_examples);
    return log;
  }

  ModelGrads grads = zeros_like(m);
  ModelGrads adam_m = zeros_like(m);
  ModelGrads adam_v = zeros_like(m);
  auto p_refs = tensor_refs(m);
  auto g_refs = tensor_refs(grads);
  auto m_refs = tensor_refs(adam_m);
  auto v_refs = tensor_refs(adam_v);

  for (std::size_t step = 1; step <= config.steps; ++step) {
    for (auto& t : g_refs) std::fill(t.data, t.data + t.size(), 0.0);

    double batch_loss = 0.0;
    const double w = 1.0 / static_cast<double>(config.batch_size);
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto& ex = examples[rng.next_below(examples.size())];
      ForwardTrace tr = forward(m, ex.prompt);
      const TokenLossSpec spec{tr.seq_len - 1, ex.object, w};
      batch_loss += nll_loss(tr, std::span(&spec, 1));
      BackwardResult br =
          backward(m, tr, nll_dlogits(tr, std::span(&spec, 1)), {}, GradRequest{.params = true});
      auto br_refs = tensor_refs(br.params);
      for (std::size_t t = 0; t < g_refs.size(); ++t)
        for (std::size_t i = 0; i < g_refs[t].size(); ++i) g_refs[t].data[i] += br_refs[t].data[i];
    }
    if (!std::isfinite(batch_loss))
      throw std::runtime_error("train: diverged (non-finite loss) at step " +
                               std::to_string(step));

    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    for (std::size_t t = 0; t < p_refs.size(); ++t) {
      for (std::size_t i = 0; i < p_refs[t].size(); ++i) {
        const double g = g_refs[t].data[i];
        double& mm = m_refs[t].data[i];
        double& vv = v_refs[t].data[i];
        mm = config.beta1 * mm + (1.0 - config.beta1) * g;
        vv = config.beta2 * vv + (1.0 - config.beta2) * g * g;
        p_refs[t].data[i] -= config.lr * (mm / bc1) / (std::sqrt(vv / bc2) + config.adam_eps);
      }
    }

    if (step % config.eval_every == 0 || step == config.steps) {
      const double acc = top1_accuracy(m, eval_examples);
      log.rows.push_back({step, batch_loss, acc});
      log.steps_run = step;
      log.final_accuracy = acc;
      if (acc >= config.target_accuracy) break;
    }
  }
  return log;
}

// ----------------------------- checkpoint io -----------------------------

namespace {

constexpr char kMagic[4] = {'E', 'V', 'K', 'M'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  std::string buf;
  std::size_t pos = 0;
  void need(std::size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_model(const ToyModel& m, const std::filesystem::path& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(m.config.n_layers));
  put_u32(out, static_cast<std::uint32_t>(m.config.d_model));
  put_u32(out, static_cast<std::uint32_t>(m.config.d_ff));
  put_u32(out, static_cast<std::uint32_t>(m.config.n_heads));
  put_u32(out, static_cast<std::uint32_t>(m.config.vocab_size));
  put_u32(out, static_cast<std::uint32_t>(m.config.max_seq));
  put_u32(out, static_cast<std::uint32_t>(m.config.activation));
  put_f64(out, m.config.ln_eps);

  ToyModel& mutable_m = const_cast<ToyModel&>(m);  // refs are read here
  auto refs = tensor_refs(mutable_m);
  put_u32(out, static_cast<std::uint32_t>(refs.size()));
  for (const TensorRef& t : refs) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.append(t.name);
    put_u64(out, t.rows);
    put_u64(out, t.cols);
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(out, t.data[i]);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_model: cannot open " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_model: write failed for " + path.string());
}

ToyModel load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_model: cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  Reader r{ss.str()};

  if (r.str(4) != std::string(kMagic, 4)) throw std::runtime_error("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  ModelConfig c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.d_ff = r.u32();
  c.n_heads = r.u32();
  c.vocab_size = r.u32();
  c.max_seq = r.u32();
  const std::uint32_t act = r.u32();
  if (act > 1) throw std::runtime_error("checkpoint: unknown activation code");
  c.activation = static_cast<Activation>(act);
  c.ln_eps = r.f64();
  c.validate();

  ToyModel m;
  static_cast<TensorBundle&>(m) = bundle_like(c, true);
  m.config = c;
  auto refs = tensor_refs(m);
  const std::uint32_t count = r.u32();
  if (count != refs.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (TensorRef& t : refs) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    if (name != t.name) throw std::runtime_error("checkpoint: unexpected tensor '" + name + "'");
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (rows != t.rows || cols != t.cols)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = r.f64();
    if (!all_finite(std::span<const double>(t.data, t.size())))
      throw std::runtime_error("checkpoint: non-finite values in '" + name + "'");
  }
  if (r.pos != r.buf.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return m;
}

}  // namespace evklab
