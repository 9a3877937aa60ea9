#include <bisync/eval.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <regex>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace bisync {

// ---------------------------------------------------------------------------
// BLEU

namespace {

bool split_always(unsigned char c) {
  return (c >= '{' && c <= '~') || (c >= '[' && c <= '`') || (c >= ' ' && c <= '&') || (c >= '(' && c <= '+') ||
         (c >= ':' && c <= '@') || c == '/';
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
    s.replace(pos, from.size(), to);
}

}  // namespace

std::vector<std::string> tokenize_13a(std::string_view text) {
  std::string s(text);
  replace_all(s, "<skipped>", "");
  replace_all(s, "-\n", "");
  replace_all(s, "\n", " ");
  if (s.find('&') != std::string::npos) {
    replace_all(s, "&quot;", "\"");
    replace_all(s, "&amp;", "&");
    replace_all(s, "&lt;", "<");
    replace_all(s, "&gt;", ">");
  }
  std::string padded = " ";
  for (char c : s) {
    if (split_always(static_cast<unsigned char>(c))) {
      padded += ' ';
      padded += c;
      padded += ' ';
    } else {
      padded += c;
    }
  }
  padded += ' ';
  static const std::regex period_after_non_digit(R"(([^0-9])([\.,]))");
  static const std::regex period_before_non_digit(R"(([\.,])([^0-9]))");
  static const std::regex dash_after_digit(R"(([0-9])(-))");
  padded = std::regex_replace(padded, period_after_non_digit, "$1 $2 ");
  padded = std::regex_replace(padded, period_before_non_digit, " $1 $2");
  padded = std::regex_replace(padded, dash_after_digit, "$1 $2 ");
  return split_words(padded);
}

double BleuStats::score() const {
  double log_sum = 0.0;
  double smooth = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (totals[n] == 0) return 0.0;  // log(0) in every remaining order
    double p;
    if (matches[n] == 0) {
      smooth *= 2.0;
      p = 100.0 / (smooth * static_cast<double>(totals[n]));
    } else {
      p = 100.0 * static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
    }
    log_sum += std::log(p);
  }
  if (hyp_len == 0) return 0.0;
  const double bp = hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

BleuStats bleu_stats(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size()) throw Error("bleu: hypothesis and reference counts differ");
  if (hypotheses.empty()) throw Error("bleu: no sentences");
  BleuStats st;
  const auto ngrams = [](const std::vector<std::string>& toks, std::size_t n) {
    std::unordered_map<std::string, std::size_t> counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
      std::string key;
      for (std::size_t k = 0; k < n; ++k) {
        key += toks[i + k];
        key += '\x01';
      }
      ++counts[key];
    }
    return counts;
  };
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    if (trim(references[s]).empty()) throw Error("bleu: empty reference");
    const auto h = tokenize_13a(hypotheses[s]);
    const auto r = tokenize_13a(references[s]);
    st.hyp_len += h.size();
    st.ref_len += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hc = ngrams(h, n);
      const auto rc = ngrams(r, n);
      for (const auto& [g, c] : hc) {
        const auto it = rc.find(g);
        st.matches[n - 1] += std::min(c, it == rc.end() ? std::size_t{0} : it->second);
      }
      st.totals[n - 1] += h.size() >= n ? h.size() - n + 1 : 0;
    }
  }
  return st;
}

double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
  return bleu_stats(hypotheses, references).score();
}

// ---------------------------------------------------------------------------
// TER

namespace {

using Words = std::vector<std::string>;

struct Alignment {
  int cost = 0;
  std::vector<std::size_t> ref_to_hyp;  // hyp index aligned to (or inserted before) each ref word
  std::vector<bool> hyp_matched;
};

int edit_distance(const Words& h, const Words& r, Alignment* align) {
  const std::size_t n = h.size(), m = r.size();
  std::vector<int> dp((n + 1) * (m + 1));
  const auto at = [&](std::size_t i, std::size_t j) -> int& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (h[i - 1] == r[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});
  if (align) {
    align->cost = at(n, m);
    align->ref_to_hyp.assign(m, 0);
    align->hyp_matched.assign(n, false);
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
      if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (h[i - 1] == r[j - 1] ? 0 : 1)) {
        align->ref_to_hyp[j - 1] = i - 1;
        align->hyp_matched[i - 1] = h[i - 1] == r[j - 1];
        --i;
        --j;
      } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
        --i;
      } else {
        align->ref_to_hyp[j - 1] = i;
        --j;
      }
    }
  }
  return at(n, m);
}

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

}  // namespace

TerStats ter_stats(std::string_view hypothesis, std::string_view reference, const TerOptions& options) {
  Words ref = split_words(options.lowercase ? lower_ascii(reference) : std::string(reference));
  Words hyp = split_words(options.lowercase ? lower_ascii(hypothesis) : std::string(hypothesis));
  if (ref.empty()) throw Error("ter: empty reference");
  TerStats st;
  st.ref_words = ref.size();
  Alignment align;
  int cost = edit_distance(hyp, ref, &align);
  for (; st.shifts < options.max_shifts; ++st.shifts) {
    int best_gain = 0;
    Words best;
    for (std::size_t i = 0; i < hyp.size(); ++i) {
      for (std::size_t len = 1; len <= static_cast<std::size_t>(options.max_shift_span) && i + len <= hyp.size(); ++len) {
        bool all_matched = true;
        for (std::size_t k = i; k < i + len; ++k) all_matched = all_matched && align.hyp_matched[k];
        if (all_matched) continue;
        for (std::size_t j = 0; j + len <= ref.size(); ++j) {
          if (!std::equal(hyp.begin() + static_cast<long>(i), hyp.begin() + static_cast<long>(i + len),
                          ref.begin() + static_cast<long>(j)))
            continue;
          const std::size_t dest = align.ref_to_hyp[j];
          if (dest >= i && dest <= i + len) continue;
          Words moved(hyp.begin(), hyp.begin() + static_cast<long>(i));
          moved.insert(moved.end(), hyp.begin() + static_cast<long>(i + len), hyp.end());
          const std::size_t insert_at = dest > i ? dest - len : dest;
          moved.insert(moved.begin() + static_cast<long>(insert_at), hyp.begin() + static_cast<long>(i),
                       hyp.begin() + static_cast<long>(i + len));
          const int gain = cost - edit_distance(moved, ref, nullptr);
          if (gain > best_gain) {
            best_gain = gain;
            best = std::move(moved);
          }
        }
      }
    }
    if (best_gain <= 0) break;
    hyp = std::move(best);
    cost = edit_distance(hyp, ref, &align);
  }
  st.edits = cost + st.shifts;
  return st;
}

double ter(std::string_view hypothesis, std::string_view reference, const TerOptions& options) {
  const auto st = ter_stats(hypothesis, reference, options);
  return 100.0 * st.edits / static_cast<double>(st.ref_words);
}

double corpus_ter(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                  const TerOptions& options) {
  if (hypotheses.size() != references.size()) throw Error("ter: hypothesis and reference counts differ");
  if (hypotheses.empty()) throw Error("ter: no sentences");
  double edits = 0;
  std::size_t words = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto st = ter_stats(hypotheses[i], references[i], options);
    edits += st.edits;
    words += st.ref_words;
  }
  return 100.0 * edits / static_cast<double>(words);
}

// ---------------------------------------------------------------------------
// Task evaluation

TaskDecodes decode_tests(const TextDecoder& decoder, const TaskTests& tests, bool retranslation,
                         std::size_t batch_size) {
  TaskDecodes out;
  out.retranslation = retranslation;
  for (const auto& [task, triplets] : tests) {
    if (triplets.empty()) throw Error(std::string("no test data for task ") + to_string(task));
    if (!retranslation) {
      out.outputs[task] = decoder.run_batch(triplets, batch_size);
      continue;
    }
    if (task == TaskKind::kBti) continue;
    std::vector<Triplet> trn;
    for (const auto& t : triplets) {
      Triplet r = t;
      r.task = TaskKind::kTrn;
      r.y.reset();
      r.y_gapped.reset();
      trn.push_back(std::move(r));
    }
    out.outputs[task] = decoder.run_batch(trn, batch_size);
  }
  return out;
}

std::map<std::string, double> evaluate_tasks(const TaskDecodes& decodes, const TaskTests& tests) {
  std::map<std::string, double> out;
  for (const auto& [task, triplets] : tests) {
    if (triplets.empty()) throw Error(std::string("no test data for task ") + to_string(task));
    const auto it = decodes.outputs.find(task);
    if (it == decodes.outputs.end()) continue;
    std::vector<std::string> refs;
    for (const auto& t : triplets) refs.push_back(t.y_prime);
    out[to_string(task)] = bleu(it->second, refs);
  }
  return out;
}

std::map<std::string, double> evaluate_closeness(const TaskDecodes& decodes, const TaskTests& tests) {
  std::map<std::string, double> out;
  for (const auto& [task, triplets] : tests) {
    if (!is_update(task)) continue;
    const auto it = decodes.outputs.find(task);
    if (it == decodes.outputs.end()) throw Error(std::string("no decodes for task ") + to_string(task));
    std::vector<std::string> refs;
    for (const auto& t : triplets) refs.push_back(*t.y);
    out[to_string(task)] = corpus_ter(it->second, refs);
  }
  return out;
}

EvalReport evaluate_model(const TextDecoder& decoder, const TaskTests& tests, bool retranslation,
                          const std::string& name) {
  const auto decodes = decode_tests(decoder, tests, retranslation);
  EvalReport r;
  r.model = name;
  r.bleu = evaluate_tasks(decodes, tests);
  r.closeness = evaluate_closeness(decodes, tests);
  std::vector<std::string> ys;
  for (const auto& [task, triplets] : tests)
    if (is_update(task))
      for (const auto& t : triplets) ys.push_back(*t.y);
  if (!ys.empty()) r.closeness_sanity = corpus_ter(ys, ys);
  r.config = {{"retranslation", retranslation},
              {"beam_size", decoder.options().beam_size},
              {"length_alpha", decoder.options().length_alpha},
              {"model", decoder.model().config().to_json()},
              {"quantized", decoder.model().quantized()}};
  return r;
}

nlohmann::json EvalReport::to_json() const {
  return {{"model", model},           {"bleu", bleu},
          {"ter_closeness", closeness}, {"ter_closeness_sanity", closeness_sanity},
          {"model_bytes", model_bytes}, {"tokens_per_sec", tokens_per_sec},
          {"config", config}};
}

std::string format_reports(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1);
  out << "BLEU by task\n" << std::left << std::setw(16) << "model";
  for (auto t : kAllTasks) out << std::right << std::setw(8) << to_string(t);
  out << '\n';
  for (const auto& r : reports) {
    out << std::left << std::setw(16) << r.model;
    for (auto t : kAllTasks) {
      const auto it = r.bleu.find(to_string(t));
      out << std::right << std::setw(8);
      if (it == r.bleu.end()) out << "-";
      else out << it->second;
    }
    out << '\n';
  }
  out << "\nTER(y, y') by update type\n" << std::left << std::setw(16) << "model";
  for (auto t : {TaskKind::kIns, TaskKind::kDel, TaskKind::kSub}) out << std::right << std::setw(8) << to_string(t);
  out << std::right << std::setw(10) << "TER(y,y)" << '\n';
  for (const auto& r : reports) {
    out << std::left << std::setw(16) << r.model;
    for (auto t : {TaskKind::kIns, TaskKind::kDel, TaskKind::kSub}) {
      const auto it = r.closeness.find(to_string(t));
      out << std::right << std::setw(8);
      if (it == r.closeness.end()) out << "-";
      else out << it->second;
    }
    out << std::right << std::setw(10) << r.closeness_sanity << '\n';
  }
  bool any_speed = false;
  for (const auto& r : reports) any_speed = any_speed || r.model_bytes > 0;
  if (any_speed) {
    out << "\nSpeed and size\n" << std::left << std::setw(16) << "model" << std::right << std::setw(12) << "bytes"
        << std::setw(12) << "tok/s" << '\n';
    for (const auto& r : reports)
      if (r.model_bytes > 0)
        out << std::left << std::setw(16) << r.model << std::right << std::setw(12) << r.model_bytes << std::setw(12)
            << r.tokens_per_sec << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Benchmark

nlohmann::json BenchResult::to_json() const {
  return {{"model_bytes", model_bytes}, {"tokens_per_sec", tokens_per_sec}, {"runs", runs}, {"tokens", tokens}};
}

namespace {

std::size_t decode_range(const InferenceModel& model, const std::vector<TokenIds>& sources, std::size_t begin,
                         std::size_t end, const DecodeOptions& decode, std::size_t batch_size) {
  std::size_t tokens = 0;
  if (batch_size <= 1) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto hyps = beam_search(model, sources[i], decode);
      if (!hyps.empty()) tokens += hyps[0].token_ids.size();
    }
    return tokens;
  }
  for (std::size_t i = begin; i < end; i += batch_size) {
    const std::vector<TokenIds> chunk(sources.begin() + static_cast<long>(i),
                                      sources.begin() + static_cast<long>(std::min(end, i + batch_size)));
    for (const auto& hyps : beam_search_batch(model, chunk, decode))
      if (!hyps.empty()) tokens += hyps[0].token_ids.size();
  }
  return tokens;
}

}  // namespace

BenchResult benchmark(const InferenceModel& model, const std::vector<TokenIds>& sources, const DecodeOptions& decode,
                      const BenchOptions& options, const std::filesystem::path& model_file) {
  if (sources.empty()) throw Error("benchmark: no sources");
  if (options.runs < 1 || options.threads < 1) throw Error("benchmark: runs and threads must be >= 1");
  BenchResult result;
  if (!model_file.empty()) result.model_bytes = std::filesystem::file_size(model_file);
  decode_range(model, sources, 0, std::min(options.warmup_sentences, sources.size()), decode, options.batch_size);
  for (int run = 0; run < options.runs; ++run) {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t tokens = 0;
    if (options.threads == 1) {
      tokens = decode_range(model, sources, 0, sources.size(), decode, options.batch_size);
    } else {
      std::vector<std::size_t> counts(static_cast<std::size_t>(options.threads), 0);
      std::vector<std::thread> workers;
      const std::size_t per = (sources.size() + counts.size() - 1) / counts.size();
      for (std::size_t w = 0; w < counts.size(); ++w) {
        const std::size_t b = std::min(sources.size(), w * per), e = std::min(sources.size(), b + per);
        workers.emplace_back([&, w, b, e] { counts[w] = decode_range(model, sources, b, e, decode, options.batch_size); });
      }
      for (auto& t : workers) t.join();
      for (auto c : counts) tokens += c;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.runs.push_back(static_cast<double>(tokens) / std::max(secs, 1e-9));
    result.tokens = tokens;
  }
  auto sorted = result.runs;
  std::sort(sorted.begin(), sorted.end());
  const auto mid = sorted.size() / 2;
  result.tokens_per_sec = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return result;
}

}  // namespace bisync
