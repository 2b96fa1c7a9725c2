#include "evklab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace evklab {

using nlohmann::json;

// ----------------------------- Vocabulary -----------------------------

Vocabulary::Vocabulary(std::vector<std::string> sorted_words) {
  words_.push_back(kOovWord);
  for (auto& w : sorted_words) words_.push_back(std::move(w));
  for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
  if (index_.size() != words_.size())
    throw std::invalid_argument("Vocabulary: duplicate words");
}

int Vocabulary::lookup(const std::string& w) const {
  auto it = index_.find(w);
  return it == index_.end() ? -1 : it->second;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& ws) const {
  std::vector<int> ids;
  ids.reserve(ws.size());
  for (const auto& w : ws) {
    const int id = lookup(w);
    if (id < 0) throw std::invalid_argument("Vocabulary: unknown word '" + w + "'");
    ids.push_back(id);
  }
  return ids;
}

std::vector<int> Vocabulary::encode_lenient(const std::vector<std::string>& ws,
                                            bool* had_oov) const {
  std::vector<int> ids;
  ids.reserve(ws.size());
  bool oov = false;
  for (const auto& w : ws) {
    const int id = lookup(w);
    if (id < 0) oov = true;
    ids.push_back(id < 0 ? kOovId : id);
  }
  if (had_oov) *had_oov = oov;
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(std::move(w));
  return out;
}

// ----------------------------- corpus generation -----------------------------

namespace {

const char* kConsonants[] = {"b", "d", "f", "g", "k", "l", "m",
                             "n", "p", "r", "s", "t", "v", "z"};
const char* kVowels[] = {"a", "e", "i", "o", "u"};

// Template skeletons. The canonical form comes first; paraphrases rotate per
// relation; attribution skeletons never enter the training prompts.
const char* kCanonicalTemplate = "the {R} of {S} is";
const char* kParaphraseTemplates[] = {
    "for {S} the {R} is",
    "regarding {S} the {R} is",
    "when asked about {S} the {R} is",
};
const char* kAttributionTemplates[] = {
    "people discuss the {R} of {S}",
    "a report about the {R} of {S}",
};

const char* kFunctionWords[] = {"the", "of", "is", "for", "regarding", "when",
                                "asked", "about", "people", "discuss", "a", "report"};

std::string make_word(RngStream& rng, std::set<std::string>& used) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const std::size_t syllables = 2 + rng.next_below(2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += kConsonants[rng.next_below(std::size(kConsonants))];
      w += kVowels[rng.next_below(std::size(kVowels))];
    }
    if (used.insert(w).second) return w;
  }
  throw std::runtime_error("generate_corpus: word space exhausted");
}

std::string make_phrase(RngStream& rng, std::set<std::string>& used, std::size_t n_words) {
  std::string p;
  for (std::size_t i = 0; i < n_words; ++i) {
    if (i) p += ' ';
    p += make_word(rng, used);
  }
  return p;
}

}  // namespace

const FactTriple& SyntheticCorpus::fact(std::size_t subject_idx, std::size_t relation_idx) const {
  return facts.at(subject_idx * relations.size() + relation_idx);
}

std::string instantiate_template(const std::string& templ, const std::string& subject,
                                 const std::string& relation) {
  std::string out = templ;
  auto replace_one = [&](const std::string& key, const std::string& value) {
    const auto pos = out.find(key);
    if (pos == std::string::npos)
      throw std::invalid_argument("instantiate_template: missing placeholder " + key);
    out.replace(pos, key.size(), value);
  };
  replace_one("{R}", relation);
  replace_one("{S}", subject);
  return out;
}

SyntheticCorpus generate_corpus(const CorpusParams& params, RngStream& rng) {
  if (params.n_subjects < 1 || params.n_relations < 1 || params.n_objects < 1)
    throw std::invalid_argument("generate_corpus: counts must be >= 1");
  if (params.templates_per_relation < 2 ||
      params.templates_per_relation > 1 + std::size(kParaphraseTemplates))
    throw std::invalid_argument("generate_corpus: templates_per_relation must be in [2, " +
                                std::to_string(1 + std::size(kParaphraseTemplates)) + "]");

  SyntheticCorpus corpus;
  corpus.params = params;

  std::set<std::string> used;
  for (const char* w : kFunctionWords) used.insert(w);

  for (std::size_t i = 0; i < params.n_subjects; ++i)
    corpus.subjects.push_back(make_phrase(rng, used, i % 3 == 2 ? 2 : 1));
  for (std::size_t i = 0; i < params.n_relations; ++i) {
    RelationInfo rel;
    rel.name = make_phrase(rng, used, i % 2 == 1 ? 2 : 1);
    rel.prompt_templates.push_back(kCanonicalTemplate);
    for (std::size_t t = 0; t + 1 < params.templates_per_relation; ++t)
      rel.prompt_templates.push_back(
          kParaphraseTemplates[(i + t) % std::size(kParaphraseTemplates)]);
    for (const char* a : kAttributionTemplates) rel.attribution_templates.push_back(a);
    corpus.relations.push_back(std::move(rel));
  }
  for (std::size_t i = 0; i < params.n_objects; ++i)
    corpus.objects.push_back(make_word(rng, used));

  for (const auto& s : corpus.subjects)
    for (const auto& r : corpus.relations)
      corpus.facts.push_back({s, r.name, corpus.objects[rng.next_below(params.n_objects)]});

  // closed vocabulary: everything that can appear, sorted for determinism
  corpus.vocab = Vocabulary(std::vector<std::string>(used.begin(), used.end()));
  return corpus;
}

// ----------------------------- tokenization -----------------------------

namespace {

// Occurrences of `needle` as a contiguous word subsequence of `words`.
std::vector<std::size_t> find_occurrences(const std::vector<std::string>& words,
                                          const std::vector<std::string>& needle) {
  std::vector<std::size_t> hits;
  if (needle.empty() || needle.size() > words.size()) return hits;
  for (std::size_t i = 0; i + needle.size() <= words.size(); ++i) {
    bool match = true;
    for (std::size_t j = 0; j < needle.size(); ++j)
      if (words[i + j] != needle[j]) {
        match = false;
        break;
      }
    if (match) hits.push_back(i);
  }
  return hits;
}

Span locate_unique(const std::vector<std::string>& words, const std::string& phrase,
                   const char* what) {
  const auto needle = split_words(phrase);
  const auto hits = find_occurrences(words, needle);
  if (hits.empty())
    throw std::invalid_argument(std::string("tokenize: ") + what + " '" + phrase +
                                "' not found in text");
  if (hits.size() > 1)
    throw std::invalid_argument(std::string("tokenize: ") + what + " '" + phrase +
                                "' occurs more than once (ambiguous span)");
  return Span{hits[0], hits[0] + needle.size()};
}

bool overlaps(const Span& a, const Span& b) { return a.begin < b.end && b.begin < a.end; }

}  // namespace

TokenizedPrompt tokenize(const std::string& text, const std::string& subject,
                         const std::string& relation, const Vocabulary& vocab) {
  if (subject.empty() || relation.empty())
    throw std::invalid_argument("tokenize: subject and relation must be nonempty");
  const auto words = split_words(text);
  TokenizedPrompt tp;
  tp.text = text;
  tp.tokens = vocab.encode(words);
  tp.subject_span = locate_unique(words, subject, "subject");
  tp.relation_span = locate_unique(words, relation, "relation");
  if (overlaps(tp.subject_span, tp.relation_span))
    throw std::invalid_argument("tokenize: subject and relation spans overlap");
  return tp;
}

TokenizedPrompt prompt_for_fact(const SyntheticCorpus& corpus, const FactTriple& fact,
                                std::size_t template_idx) {
  const auto rel_it =
      std::find_if(corpus.relations.begin(), corpus.relations.end(),
                   [&](const RelationInfo& r) { return r.name == fact.relation; });
  if (rel_it == corpus.relations.end())
    throw std::invalid_argument("prompt_for_fact: unknown relation " + fact.relation);
  const std::string text = instantiate_template(rel_it->prompt_templates.at(template_idx),
                                                fact.subject, fact.relation);
  return tokenize(text, fact.subject, fact.relation, corpus.vocab);
}

std::vector<TrainExample> training_examples(const SyntheticCorpus& corpus) {
  std::vector<TrainExample> out;
  for (const auto& fact : corpus.facts) {
    const int obj = corpus.vocab.lookup(fact.object);
    for (const auto& rel : corpus.relations) {
      if (rel.name != fact.relation) continue;
      for (std::size_t t = 0; t < rel.prompt_templates.size(); ++t)
        out.push_back({prompt_for_fact(corpus, fact, t).tokens, obj});
    }
  }
  return out;
}

std::vector<TrainExample> canonical_examples(const SyntheticCorpus& corpus) {
  std::vector<TrainExample> out;
  for (const auto& fact : corpus.facts)
    out.push_back({prompt_for_fact(corpus, fact, 0).tokens, corpus.vocab.lookup(fact.object)});
  return out;
}

std::vector<std::string> corpus_documents(const SyntheticCorpus& corpus) {
  std::vector<std::string> out;
  for (const auto& fact : corpus.facts)
    for (const auto& rel : corpus.relations) {
      if (rel.name != fact.relation) continue;
      for (const auto& templ : rel.prompt_templates)
        out.push_back(instantiate_template(templ, fact.subject, fact.relation) + " " +
                      fact.object);
    }
  return out;
}

// ----------------------------- edit requests -----------------------------

std::vector<EditRequest> generate_requests(const SyntheticCorpus& corpus,
                                           const RequestParams& params, RngStream& rng) {
  if (params.n_requests > corpus.facts.size())
    throw std::invalid_argument("generate_requests: more requests than facts");
  if (corpus.objects.size() < 2)
    throw std::invalid_argument("generate_requests: need at least two objects");

  std::vector<std::size_t> order(corpus.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i-- > 1;)
    std::swap(order[i], order[rng.next_below(i + 1)]);

  std::vector<EditRequest> requests;
  for (std::size_t n = 0; n < params.n_requests; ++n) {
    const FactTriple& fact = corpus.facts[order[n]];
    const auto rel_it =
        std::find_if(corpus.relations.begin(), corpus.relations.end(),
                     [&](const RelationInfo& r) { return r.name == fact.relation; });

    EditRequest req;
    req.subject = fact.subject;
    req.relation = fact.relation;
    req.target_true_str = fact.object;
    std::size_t new_idx = rng.next_below(corpus.objects.size());
    while (corpus.objects[new_idx] == fact.object) new_idx = rng.next_below(corpus.objects.size());
    req.target_new_str = corpus.objects[new_idx];
    req.target_true = corpus.vocab.lookup(fact.object);
    req.target_new = corpus.vocab.lookup(req.target_new_str);

    req.prompt = prompt_for_fact(corpus, fact, 0);
    for (std::size_t t = 1; t < rel_it->prompt_templates.size(); ++t)
      req.paraphrase_prompts.push_back(prompt_for_fact(corpus, fact, t));

    // neighborhood: same relation, different subject; subjects sharing the
    // true object come first so the Counterfact-style comparison is faithful
    std::vector<const FactTriple*> same_object, other_object;
    for (const auto& f : corpus.facts) {
      if (f.relation != fact.relation || f.subject == fact.subject) continue;
      (f.object == fact.object ? same_object : other_object).push_back(&f);
    }
    same_object.insert(same_object.end(), other_object.begin(), other_object.end());
    for (std::size_t i = 0; i < same_object.size() && i < params.neighborhood_per_request; ++i)
      req.neighborhood_prompts.push_back(prompt_for_fact(corpus, *same_object[i], 0));

    for (const auto& templ : rel_it->attribution_templates) {
      const std::string text = instantiate_template(templ, fact.subject, fact.relation);
      req.attribution_prompts.push_back(tokenize(text, fact.subject, fact.relation, corpus.vocab));
    }
    requests.push_back(std::move(req));
  }
  return requests;
}

// ----------------------------- serialization -----------------------------

std::string corpus_to_json(const SyntheticCorpus& corpus) {
  json j;
  j["params"] = {{"n_subjects", corpus.params.n_subjects},
                 {"n_relations", corpus.params.n_relations},
                 {"n_objects", corpus.params.n_objects},
                 {"templates_per_relation", corpus.params.templates_per_relation}};
  j["vocabulary"] = corpus.vocab.words();
  j["subjects"] = corpus.subjects;
  j["objects"] = corpus.objects;
  j["relations"] = json::array();
  for (const auto& r : corpus.relations)
    j["relations"].push_back({{"name", r.name},
                              {"prompt_templates", r.prompt_templates},
                              {"attribution_templates", r.attribution_templates}});
  j["facts"] = json::array();
  for (const auto& f : corpus.facts)
    j["facts"].push_back({{"subject", f.subject}, {"relation", f.relation}, {"object", f.object}});
  return j.dump(2) + "\n";
}

SyntheticCorpus corpus_from_json(const std::string& text) {
  const json j = json::parse(text);
  SyntheticCorpus corpus;
  corpus.params.n_subjects = j.at("params").at("n_subjects").get<std::size_t>();
  corpus.params.n_relations = j.at("params").at("n_relations").get<std::size_t>();
  corpus.params.n_objects = j.at("params").at("n_objects").get<std::size_t>();
  corpus.params.templates_per_relation =
      j.at("params").at("templates_per_relation").get<std::size_t>();

  auto words = j.at("vocabulary").get<std::vector<std::string>>();
  if (words.empty() || words.front() != Vocabulary::kOovWord)
    throw std::runtime_error("corpus_from_json: malformed vocabulary");
  corpus.vocab = Vocabulary(std::vector<std::string>(words.begin() + 1, words.end()));

  corpus.subjects = j.at("subjects").get<std::vector<std::string>>();
  corpus.objects = j.at("objects").get<std::vector<std::string>>();
  for (const auto& r : j.at("relations")) {
    RelationInfo rel;
    rel.name = r.at("name").get<std::string>();
    rel.prompt_templates = r.at("prompt_templates").get<std::vector<std::string>>();
    rel.attribution_templates = r.at("attribution_templates").get<std::vector<std::string>>();
    corpus.relations.push_back(std::move(rel));
  }
  for (const auto& f : j.at("facts"))
    corpus.facts.push_back({f.at("subject").get<std::string>(),
                            f.at("relation").get<std::string>(),
                            f.at("object").get<std::string>()});
  return corpus;
}

namespace {

std::string prompt_with_placeholder(const TokenizedPrompt& p, const std::string& subject) {
  const auto pos = p.text.find(subject);
  if (pos == std::string::npos) return p.text;
  std::string out = p.text;
  out.replace(pos, subject.size(), "{}");
  return out;
}

}  // namespace

std::string requests_to_counterfact_json(const std::vector<EditRequest>& requests) {
  json arr = json::array();
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const EditRequest& r = requests[i];
    json rec;
    rec["case_id"] = i;
    rec["requested_rewrite"] = {{"prompt", prompt_with_placeholder(r.prompt, r.subject)},
                                {"subject", r.subject},
                                {"relation", r.relation},
                                {"target_new", {{"str", r.target_new_str}}},
                                {"target_true", {{"str", r.target_true_str}}}};
    auto texts = [](const std::vector<TokenizedPrompt>& ps) {
      json a = json::array();
      for (const auto& p : ps) a.push_back(p.text);
      return a;
    };
    rec["paraphrase_prompts"] = texts(r.paraphrase_prompts);
    rec["neighborhood_prompts"] = texts(r.neighborhood_prompts);
    rec["attribute_prompts"] = texts(r.attribution_prompts);
    arr.push_back(std::move(rec));
  }
  return arr.dump(2) + "\n";
}

// ----------------------------- Counterfact ingestion -----------------------------

namespace {

std::string target_string(const json& j, const char* field) {
  const json& t = j.at(field);
  if (t.is_string()) return t.get<std::string>();
  if (t.is_object() && t.contains("str")) return t.at("str").get<std::string>();
  throw std::runtime_error(std::string("field '") + field + "' must be a string or {str: ...}");
}

// Without an explicit relation string the longest contiguous run of
// non-subject tokens stands in for the relation span; in Counterfact prompts
// the template words are the relation's verbalization.
Span fallback_relation_span(std::size_t n_tokens, const Span& subject) {
  Span before{0, subject.begin};
  Span after{subject.end, n_tokens};
  return before.size() >= after.size() ? before : after;
}

TokenizedPrompt tokenize_lenient(const std::string& text, const std::string& subject,
                                 const std::string& relation, const Vocabulary& vocab,
                                 bool* had_oov) {
  TokenizedPrompt tp;
  tp.text = text;
  const auto words = split_words(text);
  tp.tokens = vocab.encode_lenient(words, had_oov);
  auto locate = [&](const std::string& phrase) -> Span {
    const auto needle = split_words(phrase);
    const auto hits = find_occurrences(words, needle);
    if (hits.size() != 1) return Span{};
    return Span{hits[0], hits[0] + needle.size()};
  };
  if (!subject.empty()) tp.subject_span = locate(subject);
  if (!relation.empty()) {
    tp.relation_span = locate(relation);
    if (overlaps(tp.subject_span, tp.relation_span)) tp.relation_span = Span{};
  }
  return tp;
}

}  // namespace

IngestResult ingest_counterfact(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("ingest_counterfact: cannot open " + path.string());
  json arr;
  try {
    f >> arr;
  } catch (const json::exception& e) {
    throw std::runtime_error("ingest_counterfact: malformed JSON: " + std::string(e.what()));
  }
  if (!arr.is_array()) throw std::runtime_error("ingest_counterfact: top level must be an array");

  IngestResult result;
  for (std::size_t idx = 0; idx < arr.size(); ++idx) {
    try {
      const json& rec = arr[idx];
      if (!rec.contains("requested_rewrite"))
        throw std::runtime_error("missing field 'requested_rewrite'");
      const json& rw = rec.at("requested_rewrite");
      for (const char* field : {"prompt", "subject", "target_new", "target_true"})
        if (!rw.contains(field))
          throw std::runtime_error(std::string("missing field '") + field +
                                   "' in requested_rewrite");

      EditRequest req;
      req.subject = rw.at("subject").get<std::string>();
      req.relation = rw.contains("relation") ? rw.at("relation").get<std::string>() : "";
      req.target_new_str = target_string(rw, "target_new");
      req.target_true_str = target_string(rw, "target_true");
      if (split_words(req.target_new_str).size() != 1 ||
          split_words(req.target_true_str).size() != 1)
        throw std::runtime_error("targets must be single vocabulary tokens");

      std::string prompt_text = rw.at("prompt").get<std::string>();
      const auto ph = prompt_text.find("{}");
      if (ph != std::string::npos) prompt_text.replace(ph, 2, req.subject);

      bool oov = false;
      req.prompt = tokenize_lenient(prompt_text, req.subject, req.relation, vocab, &oov);
      req.oov_flagged |= oov;
      if (req.prompt.subject_span.empty())
        throw std::runtime_error("subject does not occur exactly once in prompt");
      if (!req.relation.empty() && req.prompt.relation_span.empty())
        throw std::runtime_error("relation does not occur exactly once in prompt");
      if (req.relation.empty())
        req.prompt.relation_span =
            fallback_relation_span(req.prompt.tokens.size(), req.prompt.subject_span);

      const int tn = vocab.lookup(req.target_new_str);
      const int tt = vocab.lookup(req.target_true_str);
      req.oov_flagged |= (tn < 0 || tt < 0);
      req.target_new = tn < 0 ? Vocabulary::kOovId : tn;
      req.target_true = tt < 0 ? Vocabulary::kOovId : tt;
      if (req.target_new == req.target_true)
        throw std::runtime_error("target_new equals target_true after vocabulary mapping");

      auto read_prompts = [&](const char* field, std::vector<TokenizedPrompt>& out,
                              bool with_subject) {
        if (!rec.contains(field)) return;
        for (const auto& s : rec.at(field)) {
          bool o = false;
          out.push_back(tokenize_lenient(s.get<std::string>(),
                                         with_subject ? req.subject : std::string(), req.relation,
                                         vocab, &o));
          req.oov_flagged |= o;
        }
      };
      read_prompts("paraphrase_prompts", req.paraphrase_prompts, true);
      read_prompts("neighborhood_prompts", req.neighborhood_prompts, false);
      read_prompts("attribute_prompts", req.attribution_prompts, true);

      result.requests.push_back(std::move(req));
    } catch (const std::exception& e) {
      result.errors.push_back({idx, e.what()});
    }
  }
  return result;
}

}  // namespace evklab
