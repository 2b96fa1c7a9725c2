#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "evklab/corpus.hpp"

using namespace evklab;
namespace fs = std::filesystem;

namespace {

Vocabulary demo_vocab() {
  return Vocabulary({"berlin", "capital", "for", "france", "germany", "is", "language", "latin",
                     "of", "paris", "people", "discuss", "rome", "spain", "spanish", "the"});
}

fs::path fixture_path() {
  return fs::path(__FILE__).parent_path() / "fixtures" / "counterfact_small.json";
}

}  // namespace

TEST_CASE("generate_corpus: fact map is functional and prompts round-trip") {
  RngStream rng(42, 0);
  SyntheticCorpus corpus = generate_corpus({10, 5, 8, 3}, rng);
  CHECK(corpus.facts.size() == 50);
  CHECK(corpus.subjects.size() == 10);
  CHECK(corpus.relations.size() == 5);

  std::map<std::pair<std::string, std::string>, std::string> map;
  for (const auto& f : corpus.facts) {
    auto [it, inserted] = map.insert({{f.subject, f.relation}, f.object});
    if (!inserted) CHECK(it->second == f.object);
  }
  CHECK(map.size() == 50);

  for (const auto& f : corpus.facts) {
    for (std::size_t t = 0; t < 3; ++t) {
      TokenizedPrompt p = prompt_for_fact(corpus, f, t);
      CHECK(corpus.vocab.decode(p.tokens) == p.text);
      // span extraction recovers the surface forms
      std::vector<int> subj(p.tokens.begin() + p.subject_span.begin,
                            p.tokens.begin() + p.subject_span.end);
      std::vector<int> rel(p.tokens.begin() + p.relation_span.begin,
                           p.tokens.begin() + p.relation_span.end);
      CHECK(corpus.vocab.decode(subj) == f.subject);
      CHECK(corpus.vocab.decode(rel) == f.relation);
    }
  }
}

TEST_CASE("generate_corpus: rejects degenerate parameter combinations") {
  RngStream rng(1, 0);
  CHECK_THROWS_AS(generate_corpus({0, 5, 8, 3}, rng), std::invalid_argument);
  CHECK_THROWS_AS(generate_corpus({5, 5, 8, 1}, rng), std::invalid_argument);
  CHECK_THROWS_AS(generate_corpus({5, 5, 8, 9}, rng), std::invalid_argument);
}

TEST_CASE("tokenize: span location on the worked example") {
  Vocabulary vocab = demo_vocab();
  TokenizedPrompt p = tokenize("the capital of france is", "france", "capital of", vocab);
  CHECK(p.subject_span == Span{3, 4});
  CHECK(p.relation_span == Span{1, 3});
  CHECK(p.tokens.size() == 5);

  CHECK_THROWS_AS(tokenize("the capital of germany is", "france", "capital", vocab),
                  std::invalid_argument);
  // ambiguous subject occurrence
  CHECK_THROWS_AS(tokenize("france the capital of france is", "france", "capital", vocab),
                  std::invalid_argument);
  // overlapping spans
  CHECK_THROWS_AS(tokenize("the capital of france is", "france", "of france", vocab),
                  std::invalid_argument);
  // unknown word
  CHECK_THROWS_AS(tokenize("the metro of france is", "france", "metro", vocab),
                  std::invalid_argument);
}

TEST_CASE("generate_requests: counterfactual targets and neighborhood structure") {
  RngStream rng(7, 0);
  SyntheticCorpus corpus = generate_corpus({12, 4, 6, 3}, rng);
  RngStream req_rng = rng.derive("requests");
  auto requests = generate_requests(corpus, {10, 4}, req_rng);
  REQUIRE(requests.size() == 10);

  std::set<std::string> prompts_seen;
  for (const auto& r : requests) {
    CHECK(r.target_new != r.target_true);
    CHECK(r.paraphrase_prompts.size() == 2);
    CHECK(!r.attribution_prompts.empty());
    CHECK(prompts_seen.insert(r.prompt.text).second);  // distinct facts
    for (const auto& n : r.neighborhood_prompts) {
      CHECK(n.text != r.prompt.text);
      // same relation surface appears, subject differs
      CHECK(n.text.find(r.relation) != std::string::npos);
      std::vector<int> subj(n.tokens.begin() + n.subject_span.begin,
                            n.tokens.begin() + n.subject_span.end);
      CHECK(corpus.vocab.decode(subj) != r.subject);
    }
  }

  RngStream again = rng.derive("requests");
  auto requests2 = generate_requests(corpus, {10, 4}, again);
  for (std::size_t i = 0; i < requests.size(); ++i) {
    CHECK(requests2[i].prompt.text == requests[i].prompt.text);
    CHECK(requests2[i].target_new == requests[i].target_new);
  }
}

TEST_CASE("corpus json: round trip preserves structure and re-tokenizes cleanly") {
  RngStream rng(99, 0);
  SyntheticCorpus corpus = generate_corpus({6, 3, 4, 2}, rng);
  const std::string text = corpus_to_json(corpus);
  SyntheticCorpus back = corpus_from_json(text);
  CHECK(back.subjects == corpus.subjects);
  CHECK(back.objects == corpus.objects);
  CHECK(back.facts.size() == corpus.facts.size());
  CHECK(back.vocab.words() == corpus.vocab.words());
  CHECK(corpus_to_json(back) == text);

  for (const auto& f : back.facts) {
    TokenizedPrompt p = prompt_for_fact(back, f, 0);
    for (int id : p.tokens) CHECK(id != Vocabulary::kOovId);
  }
}

TEST_CASE("ingest_counterfact: fixture file yields three requests with correct spans") {
  Vocabulary vocab = demo_vocab();
  IngestResult res = ingest_counterfact(fixture_path(), vocab);
  REQUIRE(res.requests.size() == 3);
  CHECK(res.errors.empty());

  const EditRequest& r0 = res.requests[0];
  CHECK(r0.prompt.text == "the capital of france is");
  CHECK(r0.prompt.subject_span == Span{3, 4});
  CHECK(r0.prompt.relation_span == Span{1, 2});
  CHECK(r0.target_new == vocab.lookup("rome"));
  CHECK(r0.target_true == vocab.lookup("paris"));
  CHECK(r0.paraphrase_prompts.size() == 1);
  CHECK(r0.neighborhood_prompts.size() == 1);
  CHECK_FALSE(r0.oov_flagged);

  // record 1 has no relation string: longest non-subject run stands in
  const EditRequest& r1 = res.requests[1];
  CHECK(r1.prompt.subject_span == Span{3, 4});
  CHECK(r1.prompt.relation_span == Span{0, 3});

  // record 2 contains an out-of-vocabulary subject
  const EditRequest& r2 = res.requests[2];
  CHECK(r2.oov_flagged);
  CHECK(r2.prompt.tokens[r2.prompt.subject_span.begin] == Vocabulary::kOovId);
}

TEST_CASE("ingest_counterfact: per-record errors and file-level failures") {
  Vocabulary vocab = demo_vocab();
  const fs::path dir = fs::temp_directory_path();

  {
    std::ofstream f(dir / "evklab_empty.json");
    f << "[]";
  }
  IngestResult empty = ingest_counterfact(dir / "evklab_empty.json", vocab);
  CHECK(empty.requests.empty());
  CHECK(empty.errors.empty());

  {
    std::ofstream f(dir / "evklab_missing.json");
    f << R"([{"requested_rewrite": {"prompt": "the capital of {} is", "subject": "france",
               "target_true": {"str": "paris"}}}])";
  }
  IngestResult missing = ingest_counterfact(dir / "evklab_missing.json", vocab);
  CHECK(missing.requests.empty());
  REQUIRE(missing.errors.size() == 1);
  CHECK(missing.errors[0].record_index == 0);
  CHECK(missing.errors[0].message.find("target_new") != std::string::npos);

  {
    std::ofstream f(dir / "evklab_bad.json");
    f << "{not json";
  }
  CHECK_THROWS_AS(ingest_counterfact(dir / "evklab_bad.json", vocab), std::runtime_error);

  fs::remove(dir / "evklab_empty.json");
  fs::remove(dir / "evklab_missing.json");
  fs::remove(dir / "evklab_bad.json");
}

TEST_CASE("requests_to_counterfact_json: emitted records re-ingest losslessly") {
  RngStream rng(5, 0);
  SyntheticCorpus corpus = generate_corpus({9, 3, 5, 3}, rng);
  RngStream req_rng = rng.derive("requests");
  auto requests = generate_requests(corpus, {6, 3}, req_rng);

  const fs::path path = fs::temp_directory_path() / "evklab_requests.json";
  {
    std::ofstream f(path);
    f << requests_to_counterfact_json(requests);
  }
  IngestResult res = ingest_counterfact(path, corpus.vocab);
  CHECK(res.errors.empty());
  REQUIRE(res.requests.size() == requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    CHECK(res.requests[i].prompt.text == requests[i].prompt.text);
    CHECK(res.requests[i].prompt.tokens == requests[i].prompt.tokens);
    CHECK(res.requests[i].prompt.subject_span == requests[i].prompt.subject_span);
    CHECK(res.requests[i].prompt.relation_span == requests[i].prompt.relation_span);
    CHECK(res.requests[i].target_new == requests[i].target_new);
    CHECK(res.requests[i].target_true == requests[i].target_true);
    CHECK(res.requests[i].paraphrase_prompts.size() == requests[i].paraphrase_prompts.size());
    CHECK_FALSE(res.requests[i].oov_flagged);
  }
  fs::remove(path);
}
