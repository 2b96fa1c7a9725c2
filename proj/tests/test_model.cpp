#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "evklab/model.hpp"

using namespace evklab;
namespace fs = std::filesystem;

namespace {

ToyModel small_model(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.n_heads = 2;
  c.vocab_size = 23;
  c.max_seq = 8;
  RngStream rng(seed, 0);
  return init_model(c, rng);
}

}  // namespace

TEST_CASE("embed: definition and positional offsets") {
  ToyModel m = small_model();

  Matrix e0 = embed(m, std::vector<int>{});
  CHECK(e0.rows() == 0);
  CHECK(e0.cols() == 16);

  Matrix e1 = embed(m, std::vector<int>{5});
  for (std::size_t j = 0; j < 16; ++j)
    CHECK(e1(0, j) == m.tok_emb(5, j) + m.pos_emb(0, j));

  // same token twice: rows differ exactly by the positional rows
  Matrix e2 = embed(m, std::vector<int>{3, 3});
  for (std::size_t j = 0; j < 16; ++j)
    CHECK(e2(1, j) - e2(0, j) ==
          doctest::Approx(m.pos_emb(1, j) - m.pos_emb(0, j)).epsilon(1e-15));

  CHECK_THROWS_AS(embed(m, std::vector<int>{23}), std::out_of_range);
  CHECK_THROWS_AS(embed(m, std::vector<int>{-1}), std::out_of_range);
  CHECK_THROWS_AS(embed(m, std::vector<int>(9, 0)), std::invalid_argument);
}

TEST_CASE("forward: token path and embedding path are bit-identical") {
  ToyModel m = small_model();
  std::vector<int> toks = {1, 7, 2, 19, 4};
  ForwardTrace a = forward(m, toks);
  ForwardTrace b = forward(m, embed(m, toks));
  CHECK(a.logits == b.logits);
  CHECK(a.lnf_out == b.lnf_out);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(a.layers[l].hidden == b.layers[l].hidden);
    CHECK(a.layers[l].ffn_key == b.layers[l].ffn_key);
  }
  CHECK(a.final_token_hidden == b.final_token_hidden);
}

TEST_CASE("forward: FFN output equals W_out applied to the recorded key") {
  ToyModel m = small_model(9);
  std::vector<int> toks = {0, 12, 3, 3, 8, 21};
  ForwardTrace tr = forward(m, toks);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    Matrix replay = matmul_nt(tr.layers[l].ffn_key, m.layers[l].w_out);
    for (std::size_t i = 0; i < replay.size(); ++i)
      CHECK(std::fabs(replay.data()[i] - tr.layers[l].ffn_out.data()[i]) < 1e-12);
  }
}

TEST_CASE("forward: zero-delta injection leaves the trace unchanged") {
  ToyModel m = small_model();
  std::vector<int> toks = {4, 9, 1};
  ForwardTrace base = forward(m, toks);
  InjectionSpec inj{1, 2, Vector(16, 0.0)};
  ForwardTrace with = forward(m, toks, {inj});
  CHECK(base.logits == with.logits);
  CHECK(base.layers[1].hidden == with.layers[1].hidden);

  InjectionSpec bad_layer{2, 0, Vector(16, 0.0)};
  CHECK_THROWS_AS(forward(m, toks, {bad_layer}), std::out_of_range);
  InjectionSpec bad_pos{0, 3, Vector(16, 0.0)};
  CHECK_THROWS_AS(forward(m, toks, {bad_pos}), std::out_of_range);
}

TEST_CASE("forward: nonzero injection shifts the hidden state at its site only") {
  ToyModel m = small_model();
  std::vector<int> toks = {4, 9, 1, 6};
  Vector delta(16, 0.0);
  delta[3] = 0.7;
  ForwardTrace base = forward(m, toks);
  ForwardTrace with = forward(m, toks, {InjectionSpec{0, 1, delta}});
  for (std::size_t j = 0; j < 16; ++j)
    CHECK(with.layers[0].hidden(1, j) ==
          doctest::Approx(base.layers[0].hidden(1, j) + delta[j]).epsilon(1e-15));
  // positions before the site are causally unaffected
  CHECK(with.layers[1].hidden.row_vector(0) == base.layers[1].hidden.row_vector(0));
}

TEST_CASE("state override: replaces the hidden state and reaches the readout") {
  ToyModel m = small_model();
  std::vector<int> toks = {2, 5, 11};
  ForwardTrace clean = forward(m, toks);
  // overriding the final layer's last position with its own clean state is a
  // no-op for the readout
  StateOverride ov{1, 2, clean.layers[1].hidden.row_vector(2)};
  std::vector<int> other = {2, 5, 12};
  ForwardTrace patched = forward(m, other, {}, {ov});
  Vector p_clean = next_token_distribution(clean);
  Vector p_patched = next_token_distribution(patched);
  for (std::size_t i = 0; i < p_clean.size(); ++i)
    CHECK(p_patched[i] == doctest::Approx(p_clean[i]).epsilon(1e-15));
  CHECK(patched.has_override);
}

TEST_CASE("softmax: uniform, shift invariance, argmax, normalization") {
  Vector u(7, 1.25);
  Vector p = softmax(u);
  for (double x : p) CHECK(x == doctest::Approx(1.0 / 7).epsilon(1e-15));

  Vector logits = {0.3, -2.0, 1.7, 0.1};
  Vector shifted = logits;
  for (double& x : shifted) x += 42.0;
  Vector p1 = softmax(logits);
  Vector p2 = softmax(shifted);
  double sum = 0.0;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-14));
    CHECK(p1[i] > 0.0);
    sum += p1[i];
  }
  CHECK(std::fabs(sum - 1.0) <= 1e-12);
  CHECK(argmax(p1) == argmax(std::span<const double>(logits)));
}

TEST_CASE("next_token_distribution: normalized, errors on empty input") {
  ToyModel m = small_model();
  ForwardTrace tr = forward(m, std::vector<int>{1, 2, 3});
  Vector p = next_token_distribution(tr);
  double sum = 0.0;
  for (double x : p) {
    CHECK(x > 0.0);
    sum += x;
  }
  CHECK(std::fabs(sum - 1.0) <= 1e-12);

  ForwardTrace empty = forward(m, std::vector<int>{});
  CHECK_THROWS_AS(next_token_distribution(empty), std::invalid_argument);
}

TEST_CASE("forward: deterministic across repeated calls") {
  ToyModel m = small_model(77);
  std::vector<int> toks = {9, 9, 1, 0, 14};
  ForwardTrace a = forward(m, toks);
  ForwardTrace b = forward(m, toks);
  CHECK(a.logits == b.logits);
  CHECK(a.final_token_hidden == b.final_token_hidden);
}

TEST_CASE("checkpoint: round trip is exact; corruption and truncation are caught") {
  ToyModel m = small_model(123);
  const fs::path path = fs::temp_directory_path() / "evklab_test_model.ckpt";
  save_model(m, path);
  ToyModel back = load_model(path);
  CHECK(back == m);

  // trace equality through the round trip
  std::vector<int> toks = {3, 1, 4, 1, 5};
  CHECK(forward(m, toks).logits == forward(back, toks).logits);

  // corrupt one header byte
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(1);
    f.put('X');
  }
  CHECK_THROWS_AS(load_model(path), std::runtime_error);

  // truncate
  save_model(m, path);
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 17);
  CHECK_THROWS_AS(load_model(path), std::runtime_error);

  fs::remove(path);
}

TEST_CASE("train: zero steps leaves the model unchanged; same seed reproduces") {
  ToyModel m = small_model(5);
  std::vector<TrainExample> ex = {{{1, 2, 3}, 4}, {{2, 5}, 7}, {{0, 9, 9, 3}, 11}};
  TrainConfig tc;
  tc.steps = 0;
  ToyModel before = m;
  RngStream rng(1, 1);
  train(m, ex, ex, tc, rng);
  CHECK(m == before);

  tc.steps = 12;
  tc.batch_size = 4;
  tc.eval_every = 6;
  tc.target_accuracy = 2.0;  // never triggers
  ToyModel m1 = small_model(5);
  ToyModel m2 = small_model(5);
  RngStream r1(9, 2), r2(9, 2);
  TrainLog l1 = train(m1, ex, ex, tc, r1);
  TrainLog l2 = train(m2, ex, ex, tc, r2);
  CHECK(m1 == m2);
  REQUIRE(l1.rows.size() == l2.rows.size());
  for (std::size_t i = 1; i < l1.rows.size(); ++i)
    CHECK(l1.rows[i].step > l1.rows[i - 1].step);
}

TEST_CASE("greedy_decode: appends argmax tokens and caps at max_seq") {
  ToyModel m = small_model();
  std::vector<int> toks = {1, 2};
  std::vector<int> out = greedy_decode(m, toks, 3);
  REQUIRE(out.size() == 5);
  ForwardTrace tr = forward(m, std::vector<int>(out.begin(), out.begin() + 2));
  CHECK(out[2] == static_cast<int>(argmax(tr.logits.row(1))));

  std::vector<int> capped = greedy_decode(m, toks, 100);
  CHECK(capped.size() == m.config.max_seq);
}
