// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kunbr/lm/batch.hpp"

namespace kunbr::corpus {

inline constexpr int kFirstYear = 1900;
inline constexpr int kLastYear = 1999;
inline constexpr std::size_t kChoices = 4;

// A synthetic person -> birth-year fact with its multiple-choice options.
struct FactRecord {
  std::string person_name;
  int birth_year = kFirstYear;
  // Wrong options in the order they appear among the choices.
  std::array<int, kChoices - 1> distractor_years{};
  // Position of birth_year among the four rendered choices.
  int correct_choice = 0;

  std::array<int, kChoices> choices() const;
  bool operator==(const FactRecord&) const = default;
};

// Throws ValidationError unless the record has four distinct in-range
// choices with correct_choice pointing at birth_year.
void validate_record(const FactRecord& record);

inline constexpr std::size_t kDefaultSyllables = 20;
std::span<const std::string_view> syllable_inventory();

// Unique 2-3 syllable names with uniform birth years. Deterministic in
// (n_facts, seed, syllables).
std::vector<FactRecord> generate_corpus(std::size_t n_facts, std::uint64_t seed,
                                        std::size_t syllables = kDefaultSyllables);

struct DatasetSplits {
  std::vector<FactRecord> retain;
  std::vector<FactRecord> forget_T;
  std::vector<FactRecord> forget_V;

  std::size_t n_forget() const { return forget_T.size() + forget_V.size(); }
  // T followed by V.
  std::vector<FactRecord> forget() const;
  // Throws ValidationError if any two splits share a person name.
  void validate() const;
};

struct ForgetPartition {
  std::vector<FactRecord> retain;
  std::vector<FactRecord> forget;
};

// floor(n * forget_fraction) records go to the forget set. Both sides keep
// corpus order.
ForgetPartition partition_forget(const std::vector<FactRecord>& records, double forget_fraction, std::uint64_t seed);

// Forget/retain partition followed by floor(|forget| * t_fraction) records
// to T and the rest to V. Throws if any split ends up empty.
DatasetSplits split(const std::vector<FactRecord>& records, double forget_fraction, double t_fraction,
                    std::uint64_t seed);

// Word-level vocabulary over the closed synthetic language.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kQuestion = 1;
  static constexpr int kAnswer = 2;

  // Specials, template words, the years, then every name word of `records`
  // in sorted order.
  static Tokenizer build(std::span<const FactRecord> records);

  std::size_t size() const { return words_.size(); }
  int id(std::string_view word) const;
  const std::string& word(int id) const;
  int year_token(int year) const;

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

 private:
  void add(std::string word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

std::string question_text(const FactRecord& record);

struct McqItem {
  std::vector<int> prompt;
  std::array<std::vector<int>, kChoices> choices;
  int correct = 0;
  std::string tag;
};

// Prompt is <q> + question + <a>; each choice is a single year token.
McqItem render_mcq(const FactRecord& record, const Tokenizer& tokenizer, std::string tag = {});
std::vector<McqItem> render_all(std::span<const FactRecord> records, const Tokenizer& tokenizer,
                                std::string_view tag = {});

// (x, y) pair for a record: prompt -> correct year, with the three wrong
// years as incorrect options.
Example to_example(const FactRecord& record, const Tokenizer& tokenizer, std::string tag);

enum class SplitName { kRetain, kForget, kT, kV };
std::string_view split_tag(SplitName which);
std::vector<FactRecord> select_split(const DatasetSplits& splits, SplitName which);

// Epoch-shuffled batches. Every example appears exactly once per epoch;
// the final batch of an epoch may be short.
class BatchStream {
 public:
  BatchStream(std::vector<Example> examples, std::size_t batch_size, std::uint64_t seed);

  std::vector<Batch> epoch(std::size_t index) const;
  std::size_t batches_per_epoch() const;
  std::size_t example_count() const { return examples_.size(); }

  // Walks epochs 0, 1, 2, ... one batch at a time.
  Batch next();

 private:
  std::vector<Example> examples_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<Batch> current_;
};

BatchStream training_batches(const DatasetSplits& splits, SplitName which, const Tokenizer& tokenizer,
                             std::size_t batch_size, std::uint64_t seed);

// Line-delimited JSON, one record per line:
// {"name", "year", "distractors", "correct_choice", "split"}; retain, T, V.
std::string export_jsonl(const DatasetSplits& splits);
DatasetSplits import_jsonl(std::string_view text);

}  // namespace kunbr::corpus
