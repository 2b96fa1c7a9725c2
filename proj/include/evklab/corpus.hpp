#ifndef EVKLAB_CORPUS_HPP_
#define EVKLAB_CORPUS_HPP_

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "evklab/linalg.hpp"
#include "evklab/model.hpp"

namespace evklab {

// Contiguous half-open token index range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool operator==(const Span&) const = default;
};

struct FactTriple {
  std::string subject, relation, object;
  bool operator==(const FactTriple&) const = default;
};

struct TokenizedPrompt {
  std::string text;
  std::vector<int> tokens;
  Span subject_span;
  Span relation_span;
};

struct EditRequest {
  TokenizedPrompt prompt;
  int target_new = 0;
  int target_true = 0;
  std::string subject, relation;
  std::string target_new_str, target_true_str;
  std::vector<TokenizedPrompt> paraphrase_prompts;
  std::vector<TokenizedPrompt> neighborhood_prompts;
  std::vector<TokenizedPrompt> attribution_prompts;
  bool oov_flagged = false;
};

// Closed whitespace vocabulary; id 0 is the out-of-vocabulary token.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> sorted_words);

  static constexpr int kOovId = 0;
  static constexpr const char* kOovWord = "<oov>";

  std::size_t size() const { return words_.size(); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& words() const { return words_; }
  int lookup(const std::string& w) const;  // -1 when absent
  bool contains(const std::string& w) const { return lookup(w) >= 0; }

  // Strict encoding throws on unknown words; lenient maps them to <oov> and
  // reports whether any were hit.
  std::vector<int> encode(const std::vector<std::string>& ws) const;
  std::vector<int> encode_lenient(const std::vector<std::string>& ws, bool* had_oov) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_words(const std::string& text);

struct RelationInfo {
  std::string name;  // surface phrase substituted for {R}
  std::vector<std::string> prompt_templates;       // [0] canonical, rest paraphrases
  std::vector<std::string> attribution_templates;  // held out of training
};

struct CorpusParams {
  std::size_t n_subjects = 20;
  std::size_t n_relations = 10;
  std::size_t n_objects = 8;
  std::size_t templates_per_relation = 3;
};

struct SyntheticCorpus {
  CorpusParams params;
  Vocabulary vocab;
  std::vector<std::string> subjects;  // may be multi-word phrases
  std::vector<std::string> objects;   // always single words
  std::vector<RelationInfo> relations;
  std::vector<FactTriple> facts;  // one per (subject, relation) pair

  const FactTriple& fact(std::size_t subject_idx, std::size_t relation_idx) const;
};

// A controlled (s, r, o) world: every (subject, relation) pair maps to exactly
// one object, each relation carries one canonical template plus paraphrases,
// and attribution templates are held out of the training prompts.
SyntheticCorpus generate_corpus(const CorpusParams& params, RngStream& rng);

// Fills {S}/{R} placeholders.
std::string instantiate_template(const std::string& templ, const std::string& subject,
                                 const std::string& relation);

// Whitespace tokenization over the closed vocabulary with exact span location.
// Both `subject` and `relation` must occur exactly once in `text`.
TokenizedPrompt tokenize(const std::string& text, const std::string& subject,
                         const std::string& relation, const Vocabulary& vocab);

TokenizedPrompt prompt_for_fact(const SyntheticCorpus& corpus, const FactTriple& fact,
                                std::size_t template_idx);

// All (template, fact) pairs; the model is trained on prompt -> object.
std::vector<TrainExample> training_examples(const SyntheticCorpus& corpus);
// Canonical prompts only; the fact-accuracy evaluation set.
std::vector<TrainExample> canonical_examples(const SyntheticCorpus& corpus);
// Full sentences "prompt + object", used for key sampling and as the IDF
// document set.
std::vector<std::string> corpus_documents(const SyntheticCorpus& corpus);

struct RequestParams {
  std::size_t n_requests = 50;
  std::size_t neighborhood_per_request = 5;
};

// Counterfactual rewrites over distinct facts: target_new is drawn among the
// other objects, neighborhood prompts reuse the relation with a different
// subject (preferring subjects that share the true object), attribution
// prompts use the held-out templates.
std::vector<EditRequest> generate_requests(const SyntheticCorpus& corpus,
                                           const RequestParams& params, RngStream& rng);

// ---- serialization ----

std::string corpus_to_json(const SyntheticCorpus& corpus);
SyntheticCorpus corpus_from_json(const std::string& text);

std::string requests_to_counterfact_json(const std::vector<EditRequest>& requests);

struct IngestError {
  std::size_t record_index = 0;
  std::string message;
};

struct IngestResult {
  std::vector<EditRequest> requests;
  std::vector<IngestError> errors;  // per-record failures, total over the file
};

// Reads a JSON array of Counterfact-style records. Unknown words map to the
// OOV token and flag the request; structurally bad records produce per-record
// errors instead of aborting the file.
IngestResult ingest_counterfact(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace evklab

#endif  // EVKLAB_CORPUS_HPP_
