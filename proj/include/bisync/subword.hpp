#pragma once

#include <bisync/common.hpp>

#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace bisync {

// Reserved ids. Language tags follow kFirstLanguageTag in the order of the
// configured LanguagePair; subword pieces come after all special tokens.
enum SpecialToken : TokenId {
  kPad = 0,
  kUnk = 1,
  kBos = 2,
  kEos = 3,
  kIns = 4,
  kDel = 5,
  kSub = 6,
  kGap = 7,
  kGapSep = 8,
  kFirstLanguageTag = 9,
  kNumSpecialTokens = 11,  // two language tags
};

inline constexpr std::string_view kEndOfWord = "</w>";

// Joint byte-pair encoding over both languages. Words are split into UTF-8
// characters, the last one carrying the `</w>` suffix.
//
// Special tokens live in their own id range: a piece whose text happens to
// equal "<gap>" is an ordinary piece with a different id, so literal control
// strings in user text are carried through as text.
class BpeModel {
 public:
  using Merge = std::pair<std::string, std::string>;

  BpeModel() = default;
  BpeModel(const BpeModel& other);
  BpeModel& operator=(const BpeModel& other);

  static BpeModel learn(const std::vector<std::string>& corpus, std::size_t num_merges,
                        const LanguagePair& languages);

  TokenIds encode(std::string_view text) const;
  std::vector<std::string> tokenize(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const { return specials_.size() + pieces_.size(); }
  const std::vector<Merge>& merges() const { return merges_; }
  const LanguagePair& languages() const { return languages_; }

  TokenId language_tag(std::string_view lang) const;
  bool is_special(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < specials_.size(); }
  bool is_language_tag(TokenId id) const {
    return id >= kFirstLanguageTag && static_cast<std::size_t>(id) < specials_.size();
  }
  // Piece or special-token surface string.
  const std::string& token(TokenId id) const;
  // Id of a subword piece (not a special token); throws when absent.
  TokenId piece_id(std::string_view piece) const;

  std::string serialize() const;
  static BpeModel deserialize(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

 private:
  void build_vocab(const std::vector<std::string>& alphabet);
  std::vector<std::string> apply_merges(std::string_view word) const;

  LanguagePair languages_;
  std::vector<std::string> specials_;
  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::map<Merge, std::size_t> merge_rank_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> piece_ids_;

  mutable std::mutex cache_mutex_;
  mutable std::unordered_map<std::string, std::vector<TokenId>> word_cache_;
};

// Splits a word into UTF-8 characters.
std::vector<std::string> utf8_chars(std::string_view word);

}  // namespace bisync
