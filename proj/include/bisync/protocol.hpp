#pragma once

#include <bisync/common.hpp>
#include <bisync/subword.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bisync {

enum class TaskKind { kTrn, kIns, kDel, kSub, kBti };

inline constexpr TaskKind kAllTasks[] = {TaskKind::kTrn, TaskKind::kIns, TaskKind::kDel, TaskKind::kSub,
                                         TaskKind::kBti};

const char* to_string(TaskKind task);
TaskKind parse_task(std::string_view name);
bool is_update(TaskKind task);
TokenId update_tag(TaskKind task);

inline constexpr std::string_view kGapMarker = "<gap>";

struct EncodedExample {
  TokenIds source_ids;
  TokenIds target_ids;  // without BOS/EOS; empty at inference time
  TaskKind task = TaskKind::kTrn;
};

// One training record. For update tasks `y` is the stale target. For BTI,
// `x_prime` is the conditioning source, `y_gapped` the target with `<gap>`
// words, and `y_prime` the filler(s), multiple fillers joined by " <sep> ".
struct Triplet {
  TaskKind task = TaskKind::kTrn;
  std::string x_prime;
  std::optional<std::string> y;
  std::string y_prime;
  std::optional<std::string> y_gapped;
  std::string src_lang;
  std::string tgt_lang;

  bool operator==(const Triplet&) const = default;
};

EncodedExample encode_trn(const BpeModel& bpe, std::string_view x_prime, std::string_view tgt_lang,
                          std::string_view y_prime = {});
EncodedExample encode_update(const BpeModel& bpe, std::string_view x_prime, std::string_view y, TaskKind kind,
                             std::string_view tgt_lang, std::string_view y_prime = {});
// `y_gapped` marks each gap with a standalone `<gap>` word. `fillers` is
// either empty (inference) or holds one filler per gap.
EncodedExample encode_bti(const BpeModel& bpe, std::string_view x, std::string_view y_gapped,
                          std::string_view tgt_lang, const std::vector<std::string>& fillers = {});

EncodedExample encode_triplet(const BpeModel& bpe, const Triplet& t, bool with_target = true);

// Throws Error describing the first structural violation.
void validate_example(const BpeModel& bpe, const EncodedExample& example);
bool is_valid_example(const BpeModel& bpe, const EncodedExample& example);

// Token-level LCS diff of two texts. nullopt means the texts are identical.
std::optional<TaskKind> classify_update(std::string_view old_text, std::string_view new_text);

// Splits a BTI target (decoded filler text) at `<sep>` words.
std::vector<std::string> split_fillers(std::string_view filler_text);

// JSON-lines triplet files.
std::string triplet_to_json(const Triplet& t);
Triplet triplet_from_json(std::string_view line);
void write_triplets(const std::filesystem::path& path, const std::vector<Triplet>& triplets);
std::vector<Triplet> read_triplets(const std::filesystem::path& path);

}  // namespace bisync
