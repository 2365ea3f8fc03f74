// SPDX-License-Identifier: Apache-2.0
#include "kunbr/corpus/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/rng.hpp"

namespace kunbr::corpus {

namespace {

constexpr std::string_view kSyllables[] = {
    "Ba", "Ko", "Ri", "Mu", "Se", "Ta", "Lo", "Ne", "Vi", "Da", "Fe", "Gu", "Ha", "Ji", "Ka", "Le",
    "Mo", "Na", "Pi", "Ro", "Su", "Te", "Wa", "Xe", "Yo", "Zu", "Bo", "Ci", "Du", "Fa", "Go", "Hi",
    "Ju", "Ke", "Li", "Ma", "Nu", "Po", "Ra", "Si", "Tu", "Ve", "Wi", "Za", "Be", "Co", "Di", "Fu"};

constexpr std::string_view kTemplateWords[] = {"When", "was", "born", "?"};

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    if (c == ' ') {
      flush();
    } else if (c == '?') {
      flush();
      words.emplace_back("?");
    } else {
      current.push_back(c);
    }
  }
  flush();
  return words;
}

bool in_year_range(int y) { return y >= kFirstYear && y <= kLastYear; }

std::size_t floor_fraction(std::size_t n, double fraction) {
  // Guard against 0.29 * 100 = 28.999...
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
}

void check_fraction(const char* what, double f) {
  if (!(f > 0.0 && f < 1.0)) throw ValidationError(fmt::format("{} must lie in (0, 1), got {}", what, f));
}

}  // namespace

std::array<int, kChoices> FactRecord::choices() const {
  std::array<int, kChoices> out{};
  std::size_t d = 0;
  for (std::size_t i = 0; i < kChoices; ++i) {
    out[i] = static_cast<int>(i) == correct_choice ? birth_year : distractor_years[d++ % distractor_years.size()];
  }
  return out;
}

void validate_record(const FactRecord& r) {
  if (r.person_name.empty()) throw ValidationError("fact record has an empty name");
  if (!in_year_range(r.birth_year)) {
    throw ValidationError(fmt::format("'{}': birth year {} outside [{}, {}]", r.person_name, r.birth_year, kFirstYear, kLastYear));
  }
  if (r.correct_choice < 0 || r.correct_choice >= static_cast<int>(kChoices)) {
    throw ValidationError(fmt::format("'{}': correct_choice {} outside [0, 3]", r.person_name, r.correct_choice));
  }
  std::set<int> values{r.birth_year};
  for (int y : r.distractor_years) {
    if (!in_year_range(y)) throw ValidationError(fmt::format("'{}': distractor year {} out of range", r.person_name, y));
    values.insert(y);
  }
  if (values.size() != kChoices) throw ValidationError(fmt::format("'{}': choices are not 4 distinct years", r.person_name));
}

std::span<const std::string_view> syllable_inventory() { return kSyllables; }

std::vector<FactRecord> generate_corpus(std::size_t n_facts, std::uint64_t seed, std::size_t syllables) {
  if (n_facts < 8) throw ValidationError(fmt::format("generate_corpus needs at least 8 facts, got {}", n_facts));
  if (syllables < 2 || syllables > std::size(kSyllables)) {
    throw ValidationError(fmt::format("syllable inventory size must lie in [2, {}], got {}", std::size(kSyllables), syllables));
  }
  const std::size_t capacity = syllables * syllables + syllables * syllables * syllables;
  if (n_facts > capacity) {
    throw ValidationError(fmt::format("name space exhausted: {} syllables give {} names but {} facts were requested; "
                                      "use a larger syllable inventory",
                                      syllables, capacity, n_facts));
  }

  Rng rng(derive_seed(seed, "generate_corpus"));
  std::unordered_set<std::string> used;
  std::vector<FactRecord> out;
  out.reserve(n_facts);
  const std::size_t max_attempts = std::max<std::size_t>(10000, 200 * n_facts);
  std::size_t attempts = 0;
  while (out.size() < n_facts) {
    if (++attempts > max_attempts) {
      throw ValidationError(fmt::format("name space exhausted after {} attempts ({} of {} names drawn); "
                                        "use a larger syllable inventory",
                                        max_attempts, out.size(), n_facts));
    }
    const std::size_t parts = 2 + uniform_index(rng, 2);
    std::string name;
    for (std::size_t i = 0; i < parts; ++i) {
      if (i) name.push_back(' ');
      name.append(kSyllables[uniform_index(rng, syllables)]);
    }
    if (!used.insert(name).second) continue;

    const int span = kLastYear - kFirstYear + 1;
    FactRecord r;
    r.person_name = std::move(name);
    r.birth_year = kFirstYear + static_cast<int>(uniform_index(rng, span));
    std::set<int> taken{r.birth_year};
    for (auto& d : r.distractor_years) {
      int y;
      do {
        y = kFirstYear + static_cast<int>(uniform_index(rng, span));
      } while (!taken.insert(y).second);
      d = y;
    }
    r.correct_choice = static_cast<int>(uniform_index(rng, kChoices));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<FactRecord> DatasetSplits::forget() const {
  std::vector<FactRecord> out = forget_T;
  out.insert(out.end(), forget_V.begin(), forget_V.end());
  return out;
}

void DatasetSplits::validate() const {
  std::unordered_map<std::string, std::string_view> owner;
  auto check = [&](const std::vector<FactRecord>& records, std::string_view label) {
    for (const auto& r : records) {
      validate_record(r);
      auto [it, fresh] = owner.emplace(r.person_name, label);
      if (!fresh) {
        throw ValidationError(fmt::format("'{}' appears in both {} and {}", r.person_name, it->second, label));
      }
    }
  };
  check(retain, "retain");
  check(forget_T, "T");
  check(forget_V, "V");
}

ForgetPartition partition_forget(const std::vector<FactRecord>& records, double forget_fraction, std::uint64_t seed) {
  check_fraction("forget_fraction", forget_fraction);
  const std::size_t n = records.size();
  const std::size_t n_forget = floor_fraction(n, forget_fraction);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split.forget"));
  shuffle(std::span<std::size_t>(order), rng);
  std::vector<char> is_forget(n, 0);
  for (std::size_t i = 0; i < n_forget; ++i) is_forget[order[i]] = 1;

  ForgetPartition out;
  for (std::size_t i = 0; i < n; ++i) (is_forget[i] ? out.forget : out.retain).push_back(records[i]);
  return out;
}

DatasetSplits split(const std::vector<FactRecord>& records, double forget_fraction, double t_fraction,
                    std::uint64_t seed) {
  check_fraction("t_fraction", t_fraction);
  ForgetPartition part = partition_forget(records, forget_fraction, seed);
  const std::size_t n_t = floor_fraction(part.forget.size(), t_fraction);

  std::vector<std::size_t> order(part.forget.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split.tv"));
  shuffle(std::span<std::size_t>(order), rng);
  std::vector<char> is_t(part.forget.size(), 0);
  for (std::size_t i = 0; i < n_t; ++i) is_t[order[i]] = 1;

  DatasetSplits out;
  out.retain = std::move(part.retain);
  for (std::size_t i = 0; i < part.forget.size(); ++i) (is_t[i] ? out.forget_T : out.forget_V).push_back(part.forget[i]);
  if (out.retain.empty() || out.forget_T.empty() || out.forget_V.empty()) {
    throw ValidationError(fmt::format("split of {} records gives an empty split (retain {}, T {}, V {})", records.size(),
                                      out.retain.size(), out.forget_T.size(), out.forget_V.size()));
  }
  out.validate();
  return out;
}

// Tokenizer

void Tokenizer::add(std::string word) {
  if (ids_.contains(word)) return;
  ids_.emplace(word, static_cast<int>(words_.size()));
  words_.push_back(std::move(word));
}

Tokenizer Tokenizer::build(std::span<const FactRecord> records) {
  Tokenizer t;
  t.add("<pad>");
  t.add("<q>");
  t.add("<a>");
  for (auto w : kTemplateWords) t.add(std::string(w));
  for (int y = kFirstYear; y <= kLastYear; ++y) t.add(std::to_string(y));
  std::set<std::string> names;
  for (const auto& r : records) {
    for (auto& w : split_words(r.person_name)) names.insert(std::move(w));
  }
  for (const auto& w : names) t.add(w);
  return t;
}

int Tokenizer::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) throw ValidationError(fmt::format("word '{}' is not in the vocabulary", word));
  return it->second;
}

const std::string& Tokenizer::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw ValidationError(fmt::format("token id {} outside vocabulary of size {}", id, words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

int Tokenizer::year_token(int year) const {
  if (!in_year_range(year)) throw ValidationError(fmt::format("year {} outside [{}, {}]", year, kFirstYear, kLastYear));
  return id(std::to_string(year));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    const std::string& w = word(id);
    if (!out.empty() && w != "?") out.push_back(' ');
    out += w;
  }
  return out;
}

std::string question_text(const FactRecord& record) { return fmt::format("When was {} born?", record.person_name); }

McqItem render_mcq(const FactRecord& record, const Tokenizer& tokenizer, std::string tag) {
  validate_record(record);
  McqItem item;
  item.prompt.push_back(Tokenizer::kQuestion);
  for (int id : tokenizer.encode(question_text(record))) item.prompt.push_back(id);
  item.prompt.push_back(Tokenizer::kAnswer);
  const auto years = record.choices();
  for (std::size_t i = 0; i < kChoices; ++i) item.choices[i] = {tokenizer.year_token(years[i])};
  item.correct = record.correct_choice;
  item.tag = std::move(tag);
  return item;
}

std::vector<McqItem> render_all(std::span<const FactRecord> records, const Tokenizer& tokenizer, std::string_view tag) {
  std::vector<McqItem> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(render_mcq(r, tokenizer, std::string(tag)));
  return out;
}

Example to_example(const FactRecord& record, const Tokenizer& tokenizer, std::string tag) {
  McqItem item = render_mcq(record, tokenizer);
  Example ex;
  ex.prompt = std::move(item.prompt);
  ex.target = item.choices[static_cast<std::size_t>(item.correct)];
  for (std::size_t i = 0; i < kChoices; ++i) {
    if (static_cast<int>(i) != item.correct) ex.incorrect.push_back(item.choices[i]);
  }
  ex.tag = std::move(tag);
  return ex;
}

std::string_view split_tag(SplitName which) {
  switch (which) {
    case SplitName::kRetain: return "retain";
    case SplitName::kForget: return "forget";
    case SplitName::kT: return "T";
    case SplitName::kV: return "V";
  }
  return "?";
}

std::vector<FactRecord> select_split(const DatasetSplits& splits, SplitName which) {
  switch (which) {
    case SplitName::kRetain: return splits.retain;
    case SplitName::kForget: return splits.forget();
    case SplitName::kT: return splits.forget_T;
    case SplitName::kV: return splits.forget_V;
  }
  return {};
}

// Batching

BatchStream::BatchStream(std::vector<Example> examples, std::size_t batch_size, std::uint64_t seed)
    : examples_(std::move(examples)), batch_size_(batch_size), seed_(seed) {
  if (examples_.empty()) throw ValidationError("batch stream over an empty split");
  if (batch_size_ == 0) throw ValidationError("batch_size must be positive");
}

std::size_t BatchStream::batches_per_epoch() const { return (examples_.size() + batch_size_ - 1) / batch_size_; }

std::vector<Batch> BatchStream::epoch(std::size_t index) const {
  std::vector<std::size_t> order(examples_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed_ ^ splitmix64(index), "batch_epoch"));
  shuffle(std::span<std::size_t>(order), rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size_) {
    Batch b;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size_); ++i) b.push_back(examples_[order[i]]);
    out.push_back(std::move(b));
  }
  return out;
}

Batch BatchStream::next() {
  if (cursor_ >= current_.size()) {
    if (!current_.empty()) ++epoch_;
    current_ = epoch(epoch_);
    cursor_ = 0;
  }
  return current_[cursor_++];
}

BatchStream training_batches(const DatasetSplits& splits, SplitName which, const Tokenizer& tokenizer,
                             std::size_t batch_size, std::uint64_t seed) {
  splits.validate();
  std::vector<Example> examples;
  const std::string tag(split_tag(which));
  for (const auto& r : select_split(splits, which)) examples.push_back(to_example(r, tokenizer, tag));
  return BatchStream(std::move(examples), batch_size, derive_seed(seed, tag));
}

// JSONL

std::string export_jsonl(const DatasetSplits& splits) {
  std::string out;
  auto emit = [&](const std::vector<FactRecord>& records, const char* label) {
    for (const auto& r : records) {
      nlohmann::ordered_json j;
      j["name"] = r.person_name;
      j["year"] = r.birth_year;
      j["distractors"] = r.distractor_years;
      j["correct_choice"] = r.correct_choice;
      j["split"] = label;
      out += j.dump();
      out.push_back('\n');
    }
  };
  emit(splits.retain, "retain");
  emit(splits.forget_T, "T");
  emit(splits.forget_V, "V");
  return out;
}

DatasetSplits import_jsonl(std::string_view text) {
  DatasetSplits out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      FactRecord r;
      r.person_name = j.at("name").get<std::string>();
      r.birth_year = j.at("year").get<int>();
      const auto d = j.at("distractors").get<std::vector<int>>();
      if (d.size() != r.distractor_years.size()) throw ValidationError("expected 3 distractors");
      std::copy(d.begin(), d.end(), r.distractor_years.begin());
      r.correct_choice = j.at("correct_choice").get<int>();
      validate_record(r);
      const auto label = j.at("split").get<std::string>();
      if (label == "retain") {
        out.retain.push_back(std::move(r));
      } else if (label == "T") {
        out.forget_T.push_back(std::move(r));
      } else if (label == "V") {
        out.forget_V.push_back(std::move(r));
      } else {
        throw ValidationError(fmt::format("unknown split '{}'", label));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("corpus line {}: {}", line_no, e.what()));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("corpus line {}: {}", line_no, e.what()));
    }
  }
  out.validate();
  return out;
}

}  // namespace kunbr::corpus
