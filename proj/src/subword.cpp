#include <bisync/subword.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace bisync {

namespace {

constexpr std::string_view kHeader = "#bisync-bpe v1";

std::vector<std::string> special_surfaces(const LanguagePair& languages) {
  return {"<pad>", "<unk>", "<s>", "</s>", "<ins>", "<del>", "<sub>", "<gap>", "<sep>",
          "<" + languages.first + ">", "<" + languages.second + ">"};
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto chars = utf8_chars(word);
  if (!chars.empty()) chars.back() += kEndOfWord;
  return chars;
}

}  // namespace

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

BpeModel::BpeModel(const BpeModel& other)
    : languages_(other.languages_),
      specials_(other.specials_),
      alphabet_(other.alphabet_),
      merges_(other.merges_),
      merge_rank_(other.merge_rank_),
      pieces_(other.pieces_),
      piece_ids_(other.piece_ids_) {}

BpeModel& BpeModel::operator=(const BpeModel& other) {
  if (this != &other) {
    languages_ = other.languages_;
    specials_ = other.specials_;
    alphabet_ = other.alphabet_;
    merges_ = other.merges_;
    merge_rank_ = other.merge_rank_;
    pieces_ = other.pieces_;
    piece_ids_ = other.piece_ids_;
    std::lock_guard lock(cache_mutex_);
    word_cache_.clear();
  }
  return *this;
}

void BpeModel::build_vocab(const std::vector<std::string>& alphabet) {
  specials_ = special_surfaces(languages_);
  alphabet_ = alphabet;
  pieces_.clear();
  piece_ids_.clear();
  merge_rank_.clear();
  const auto add = [&](const std::string& piece) {
    if (piece_ids_.count(piece)) return;
    piece_ids_.emplace(piece, static_cast<TokenId>(specials_.size() + pieces_.size()));
    pieces_.push_back(piece);
  };
  for (const auto& c : alphabet_) add(c);
  for (const auto& c : alphabet_) add(c + std::string(kEndOfWord));
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    merge_rank_.emplace(merges_[r], r);
    add(merges_[r].first + merges_[r].second);
  }
}

BpeModel BpeModel::learn(const std::vector<std::string>& corpus, std::size_t num_merges,
                         const LanguagePair& languages) {
  if (corpus.empty()) throw Error("empty training corpus");
  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus)
    for (auto& w : split_words(line)) ++word_freq[w];
  if (word_freq.empty()) throw Error("empty training corpus");

  std::set<std::string> alphabet;
  std::vector<std::vector<std::string>> words;
  std::vector<std::size_t> freqs;
  for (const auto& [w, f] : word_freq) {
    for (auto& c : utf8_chars(w)) alphabet.insert(c);
    words.push_back(initial_symbols(w));
    freqs.push_back(f);
  }

  BpeModel model;
  model.languages_ = languages;
  for (std::size_t step = 0; step < num_merges; ++step) {
    std::map<Merge, std::size_t> counts;
    for (std::size_t i = 0; i < words.size(); ++i)
      for (std::size_t j = 0; j + 1 < words[i].size(); ++j) counts[{words[i][j], words[i][j + 1]}] += freqs[i];
    if (counts.empty()) break;
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    const Merge merge = best->first;
    const std::string joined = merge.first + merge.second;
    for (auto& symbols : words) {
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t j = 0; j < symbols.size(); ++j) {
        if (j + 1 < symbols.size() && symbols[j] == merge.first && symbols[j + 1] == merge.second) {
          next.push_back(joined);
          ++j;
        } else {
          next.push_back(symbols[j]);
        }
      }
      symbols = std::move(next);
    }
    model.merges_.push_back(merge);
  }
  model.build_vocab({alphabet.begin(), alphabet.end()});
  return model;
}

std::vector<std::string> BpeModel::apply_merges(std::string_view word) const {
  auto symbols = initial_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    Merge best;
    for (std::size_t j = 0; j + 1 < symbols.size(); ++j) {
      const auto it = merge_rank_.find({symbols[j], symbols[j + 1]});
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = it->first;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t j = 0; j < symbols.size(); ++j) {
      if (j + 1 < symbols.size() && symbols[j] == best.first && symbols[j + 1] == best.second) {
        next.push_back(best.first + best.second);
        ++j;
      } else {
        next.push_back(symbols[j]);
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

std::vector<std::string> BpeModel::tokenize(std::string_view text) const {
  std::vector<std::string> out;
  for (const auto& w : split_words(text))
    for (auto& s : apply_merges(w)) out.push_back(std::move(s));
  return out;
}

TokenIds BpeModel::encode(std::string_view text) const {
  TokenIds ids;
  for (const auto& w : split_words(text)) {
    {
      std::lock_guard lock(cache_mutex_);
      const auto it = word_cache_.find(w);
      if (it != word_cache_.end()) {
        ids.insert(ids.end(), it->second.begin(), it->second.end());
        continue;
      }
    }
    TokenIds word_ids;
    for (const auto& s : apply_merges(w)) {
      const auto it = piece_ids_.find(s);
      word_ids.push_back(it == piece_ids_.end() ? kUnk : it->second);
    }
    ids.insert(ids.end(), word_ids.begin(), word_ids.end());
    std::lock_guard lock(cache_mutex_);
    word_cache_.emplace(w, std::move(word_ids));
  }
  return ids;
}

std::string BpeModel::decode(std::span<const TokenId> ids) const {
  std::string out;
  const auto space = [&] {
    if (!out.empty() && out.back() != ' ') out += ' ';
  };
  for (const auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) throw Error("unknown token id");
    if (id == kPad || id == kBos || id == kEos) continue;
    if (is_special(id)) {
      space();
      out += specials_[static_cast<std::size_t>(id)];
      out += ' ';
      continue;
    }
    const auto& piece = pieces_[static_cast<std::size_t>(id) - specials_.size()];
    if (piece.size() >= kEndOfWord.size() &&
        piece.compare(piece.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
      out.append(piece, 0, piece.size() - kEndOfWord.size());
      out += ' ';
    } else {
      out += piece;
    }
  }
  return trim(out);
}

TokenId BpeModel::language_tag(std::string_view lang) const {
  if (lang == languages_.first) return kFirstLanguageTag;
  if (lang == languages_.second) return kFirstLanguageTag + 1;
  throw Error("unknown language tag '" + std::string(lang) + "'");
}

const std::string& BpeModel::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) throw Error("unknown token id");
  if (is_special(id)) return specials_[static_cast<std::size_t>(id)];
  return pieces_[static_cast<std::size_t>(id) - specials_.size()];
}

TokenId BpeModel::piece_id(std::string_view piece) const {
  const auto it = piece_ids_.find(std::string(piece));
  if (it == piece_ids_.end()) throw Error("unknown piece '" + std::string(piece) + "'");
  return it->second;
}

std::string BpeModel::serialize() const {
  std::ostringstream out;
  out << kHeader << " languages=" << languages_.first << ',' << languages_.second << " specials=";
  for (std::size_t i = 0; i < specials_.size(); ++i) out << (i ? "," : "") << specials_[i];
  out << "\n#alphabet";
  for (const auto& c : alphabet_) out << ' ' << c;
  out << '\n';
  for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
  return out.str();
}

BpeModel BpeModel::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.rfind(kHeader, 0) != 0) throw Error("not a bisync BPE model");
  const auto lp = line.find("languages=");
  if (lp == std::string::npos) throw Error("BPE model header lacks languages");
  const auto lend = line.find(' ', lp);
  const auto langs = line.substr(lp + 10, lend - lp - 10);
  const auto comma = langs.find(',');
  if (comma == std::string::npos) throw Error("BPE model header: bad languages");

  BpeModel model;
  model.languages_ = {langs.substr(0, comma), langs.substr(comma + 1)};
  if (!std::getline(in, line) || line.rfind("#alphabet", 0) != 0) throw Error("BPE model lacks alphabet");
  std::vector<std::string> alphabet = split_words(line.substr(9));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto parts = split_words(line);
    if (parts.size() != 2) throw Error("BPE model: malformed merge line");
    model.merges_.emplace_back(parts[0], parts[1]);
  }
  model.build_vocab(alphabet);
  return model;
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << serialize();
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace bisync
