#include <bisync/protocol.hpp>

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace bisync {

const char* to_string(TaskKind task) {
  switch (task) {
    case TaskKind::kTrn: return "TRN";
    case TaskKind::kIns: return "INS";
    case TaskKind::kDel: return "DEL";
    case TaskKind::kSub: return "SUB";
    case TaskKind::kBti: return "BTI";
  }
  return "?";
}

TaskKind parse_task(std::string_view name) {
  for (auto t : kAllTasks)
    if (name == to_string(t)) return t;
  throw Error("unknown task '" + std::string(name) + "'");
}

bool is_update(TaskKind task) {
  return task == TaskKind::kIns || task == TaskKind::kDel || task == TaskKind::kSub;
}

TokenId update_tag(TaskKind task) {
  switch (task) {
    case TaskKind::kIns: return kIns;
    case TaskKind::kDel: return kDel;
    case TaskKind::kSub: return kSub;
    default: throw Error("not an update kind");
  }
}

namespace {

void append(TokenIds& out, const TokenIds& ids) { out.insert(out.end(), ids.begin(), ids.end()); }

void require_text(std::string_view text, const char* what) {
  if (trim(text).empty()) throw Error(std::string(what) + " must be non-empty");
}

}  // namespace

EncodedExample encode_trn(const BpeModel& bpe, std::string_view x_prime, std::string_view tgt_lang,
                          std::string_view y_prime) {
  require_text(x_prime, "source text");
  EncodedExample ex;
  ex.task = TaskKind::kTrn;
  ex.source_ids = bpe.encode(x_prime);
  ex.source_ids.push_back(bpe.language_tag(tgt_lang));
  ex.target_ids = bpe.encode(y_prime);
  return ex;
}

EncodedExample encode_update(const BpeModel& bpe, std::string_view x_prime, std::string_view y, TaskKind kind,
                             std::string_view tgt_lang, std::string_view y_prime) {
  const TokenId tag = update_tag(kind);
  require_text(x_prime, "source text");
  require_text(y, "initial target");
  EncodedExample ex;
  ex.task = kind;
  ex.source_ids = bpe.encode(x_prime);
  ex.source_ids.push_back(bpe.language_tag(tgt_lang));
  append(ex.source_ids, bpe.encode(y));
  ex.source_ids.push_back(tag);
  ex.target_ids = bpe.encode(y_prime);
  return ex;
}

EncodedExample encode_bti(const BpeModel& bpe, std::string_view x, std::string_view y_gapped,
                          std::string_view tgt_lang, const std::vector<std::string>& fillers) {
  require_text(x, "source text");
  const auto words = split_words(y_gapped);
  const auto gaps = static_cast<std::size_t>(std::count(words.begin(), words.end(), kGapMarker));
  if (gaps == 0) throw Error("BTI target has no gap marker");
  if (!fillers.empty() && fillers.size() != gaps) throw Error("BTI filler count does not match gap count");

  EncodedExample ex;
  ex.task = TaskKind::kBti;
  ex.source_ids = bpe.encode(x);
  ex.source_ids.push_back(bpe.language_tag(tgt_lang));
  std::vector<std::string> run;
  for (const auto& w : words) {
    if (w == kGapMarker) {
      append(ex.source_ids, bpe.encode(join_words(run)));
      run.clear();
      ex.source_ids.push_back(kGap);
    } else {
      run.push_back(w);
    }
  }
  append(ex.source_ids, bpe.encode(join_words(run)));
  for (std::size_t i = 0; i < fillers.size(); ++i) {
    if (i) ex.target_ids.push_back(kGapSep);
    append(ex.target_ids, bpe.encode(fillers[i]));
  }
  return ex;
}

EncodedExample encode_triplet(const BpeModel& bpe, const Triplet& t, bool with_target) {
  const std::string_view target = with_target ? std::string_view(t.y_prime) : std::string_view();
  switch (t.task) {
    case TaskKind::kTrn: return encode_trn(bpe, t.x_prime, t.tgt_lang, target);
    case TaskKind::kBti: {
      if (!t.y_gapped) throw Error("BTI triplet without gapped target");
      return encode_bti(bpe, t.x_prime, *t.y_gapped, t.tgt_lang,
                        with_target ? split_fillers(t.y_prime) : std::vector<std::string>{});
    }
    default:
      if (!t.y) throw Error(std::string(to_string(t.task)) + " triplet without initial target");
      return encode_update(bpe, t.x_prime, *t.y, t.task, t.tgt_lang, target);
  }
}

void validate_example(const BpeModel& bpe, const EncodedExample& ex) {
  const auto& src = ex.source_ids;
  for (auto id : src)
    if (id < 0 || static_cast<std::size_t>(id) >= bpe.vocab_size()) throw Error("source id out of range");
  for (auto id : ex.target_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= bpe.vocab_size()) throw Error("target id out of range");
  const auto count = [&](auto pred) { return std::count_if(src.begin(), src.end(), pred); };
  const auto n_lang = count([&](TokenId id) { return bpe.is_language_tag(id); });
  const auto n_update = count([](TokenId id) { return id == kIns || id == kDel || id == kSub; });
  const auto n_gap = count([](TokenId id) { return id == kGap; });
  const auto n_other_special = count([&](TokenId id) {
    return bpe.is_special(id) && id != kUnk && !bpe.is_language_tag(id) && id != kIns && id != kDel && id != kSub &&
           id != kGap;
  });
  if (n_lang != 1) throw Error("source must contain exactly one language tag");
  if (n_other_special != 0) throw Error("source contains structural tokens");
  const auto lang_pos = static_cast<std::size_t>(
      std::find_if(src.begin(), src.end(), [&](TokenId id) { return bpe.is_language_tag(id); }) - src.begin());
  if (lang_pos == 0) throw Error("source text before the language tag is empty");

  const auto target_specials = std::count_if(ex.target_ids.begin(), ex.target_ids.end(),
                                             [&](TokenId id) { return bpe.is_special(id) && id != kGapSep && id != kUnk; });
  if (target_specials != 0) throw Error("target contains control tokens");

  switch (ex.task) {
    case TaskKind::kTrn:
      if (lang_pos + 1 != src.size()) throw Error("TRN source must end with the language tag");
      if (n_update != 0 || n_gap != 0) throw Error("TRN source contains update or gap tokens");
      if (std::count(ex.target_ids.begin(), ex.target_ids.end(), kGapSep) != 0)
        throw Error("TRN target contains a gap separator");
      break;
    case TaskKind::kIns:
    case TaskKind::kDel:
    case TaskKind::kSub:
      if (n_update != 1 || src.back() != update_tag(ex.task))
        throw Error("update source must end with its single update tag");
      if (n_gap != 0) throw Error("update source contains a gap token");
      if (lang_pos + 2 > src.size() - 1) throw Error("update source has an empty initial target");
      if (std::count(ex.target_ids.begin(), ex.target_ids.end(), kGapSep) != 0)
        throw Error("update target contains a gap separator");
      break;
    case TaskKind::kBti: {
      if (n_update != 0) throw Error("BTI source contains an update tag");
      if (n_gap < 1) throw Error("BTI source has no gap token");
      const auto first_gap = static_cast<std::size_t>(std::find(src.begin(), src.end(), kGap) - src.begin());
      if (first_gap < lang_pos) throw Error("BTI gap before the language tag");
      if (!ex.target_ids.empty()) {
        const auto seps = std::count(ex.target_ids.begin(), ex.target_ids.end(), kGapSep);
        if (seps != n_gap - 1) throw Error("BTI target filler count does not match gaps");
      }
      break;
    }
  }
}

bool is_valid_example(const BpeModel& bpe, const EncodedExample& example) {
  try {
    validate_example(bpe, example);
    return true;
  } catch (const Error&) {
    return false;
  }
}

std::optional<TaskKind> classify_update(std::string_view old_text, std::string_view new_text) {
  const auto a = split_words(old_text);
  const auto b = split_words(new_text);
  if (a == b) return std::nullopt;
  if (a.empty()) return TaskKind::kTrn;
  // LCS length table.
  std::vector<std::vector<std::size_t>> lcs(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = a.size(); i-- > 0;)
    for (std::size_t j = b.size(); j-- > 0;)
      lcs[i][j] = a[i] == b[j] ? lcs[i + 1][j + 1] + 1 : std::max(lcs[i + 1][j], lcs[i][j + 1]);
  const std::size_t common = lcs[0][0];
  const bool removed = common < a.size();
  const bool added = common < b.size();
  if (added && !removed) return TaskKind::kIns;
  if (removed && !added) return TaskKind::kDel;
  return TaskKind::kSub;
}

std::vector<std::string> split_fillers(std::string_view filler_text) {
  std::vector<std::string> fillers{{}};
  for (const auto& w : split_words(filler_text)) {
    if (w == "<sep>") {
      fillers.emplace_back();
    } else {
      if (!fillers.back().empty()) fillers.back() += ' ';
      fillers.back() += w;
    }
  }
  return fillers;
}

std::string triplet_to_json(const Triplet& t) {
  nlohmann::json j;
  j["task"] = to_string(t.task);
  j["x_prime"] = t.x_prime;
  j["y"] = t.y ? nlohmann::json(*t.y) : nlohmann::json(nullptr);
  j["y_prime"] = t.y_prime;
  if (t.y_gapped) j["y_gapped"] = *t.y_gapped;
  j["src_lang"] = t.src_lang;
  j["tgt_lang"] = t.tgt_lang;
  return j.dump();
}

Triplet triplet_from_json(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  Triplet t;
  t.task = parse_task(j.at("task").get<std::string>());
  t.x_prime = j.at("x_prime").get<std::string>();
  if (j.contains("y") && !j["y"].is_null()) t.y = j["y"].get<std::string>();
  t.y_prime = j.at("y_prime").get<std::string>();
  if (j.contains("y_gapped") && !j["y_gapped"].is_null()) t.y_gapped = j["y_gapped"].get<std::string>();
  t.src_lang = j.at("src_lang").get<std::string>();
  t.tgt_lang = j.at("tgt_lang").get<std::string>();
  if (t.y.has_value() != is_update(t.task)) throw Error("triplet: y must be present exactly for update tasks");
  return t;
}

void write_triplets(const std::filesystem::path& path, const std::vector<Triplet>& triplets) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (const auto& t : triplets) out << triplet_to_json(t) << '\n';
}

std::vector<Triplet> read_triplets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<Triplet> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(triplet_from_json(line));
  return out;
}

}  // namespace bisync
