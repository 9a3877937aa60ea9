#include <bisync/service.hpp>

#include <algorithm>
#include <chrono>
#include <set>

#include <httplib.h>

namespace bisync {

namespace {

// Handler-level failure carrying its HTTP status.
struct HttpError {
  int status;
  std::string code;
  std::string message;
};

ServiceResponse error_response(const HttpError& e) {
  return {e.status, {{"status", e.code}, {"error", e.message}}};
}

[[noreturn]] void bad_request(const std::string& message) { throw HttpError{400, "bad_request", message}; }

std::string required_text(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) bad_request(std::string("missing string field '") + key + "'");
  auto text = j[key].get<std::string>();
  if (trim(text).empty()) bad_request(std::string("field '") + key + "' must be non-empty");
  return text;
}

std::optional<std::string> optional_text(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  if (!j[key].is_string()) bad_request(std::string("field '") + key + "' must be a string");
  return j[key].get<std::string>();
}

long required_index(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_integer()) bad_request(std::string("missing integer field '") + key + "'");
  return j[key].get<long>();
}

int count_field(const nlohmann::json& j, const char* key, int fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  if (!j[key].is_number_integer()) bad_request(std::string("field '") + key + "' must be an integer");
  const auto n = j[key].get<long>();
  if (n < 1 || n > 64) bad_request(std::string("field '") + key + "' must be in [1, 64]");
  return static_cast<int>(n);
}

std::string checked_lang(const nlohmann::json& j, const char* key, const LanguagePair& pair) {
  if (!j.contains(key) || !j[key].is_string()) bad_request(std::string("missing language field '") + key + "'");
  auto lang = j[key].get<std::string>();
  if (!pair.contains(lang)) bad_request("language '" + lang + "' is not served");
  return lang;
}

std::string text_of(const BpeModel& bpe, const BeamHypothesis& h) { return bpe.decode(h.token_ids); }

template <typename F>
ServiceResponse guarded(F&& f) {
  try {
    return f();
  } catch (const HttpError& e) {
    return error_response(e);
  } catch (const Error& e) {
    return error_response({400, "bad_request", e.what()});
  } catch (const std::exception& e) {
    return error_response({500, "internal", e.what()});
  }
}

}  // namespace

SyncService::SyncService(const BpeModel* bpe, const InferenceModel* model, ServiceOptions options)
    : bpe_(bpe), model_(model), options_(std::move(options)) {
  if (bpe_) languages_ = bpe_->languages();
  if (options_.n_alternatives_default < 1) throw Error("n_alternatives_default must be >= 1");
}

ServiceResponse SyncService::sync(const nlohmann::json& req) const {
  return guarded([&]() -> ServiceResponse {
    if (!req.is_object()) bad_request("request must be a JSON object");
    const auto changed = required_text(req, "changed_text");
    const auto changed_lang = checked_lang(req, "changed_lang", languages_);
    const auto other_lang = checked_lang(req, "other_lang", languages_);
    if (changed_lang == other_lang) bad_request("changed_lang and other_lang must differ");
    const auto other = optional_text(req, "other_text");
    const auto previous = optional_text(req, "previous_changed_text");
    const int n_alt = count_field(req, "n_alternatives", options_.n_alternatives_default);
    if (req.contains("frozen_other") && !req["frozen_other"].is_boolean()) bad_request("frozen_other must be a flag");
    if (req.value("frozen_other", false))
      throw HttpError{409, "frozen", "the other text is frozen and is not synchronized"};
    if (!model_loaded()) throw HttpError{503, "no_model", "no model is loaded"};

    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::json body;
    EncodedExample ex;
    std::optional<TaskKind> task;
    if (!other || trim(*other).empty()) {
      task = TaskKind::kTrn;
      ex = encode_trn(*bpe_, changed, other_lang, "");
    } else {
      task = classify_update(previous.value_or(""), changed);
      if (task == TaskKind::kTrn) {
        ex = encode_trn(*bpe_, changed, other_lang, "");
      } else if (task) {
        ex = encode_update(*bpe_, changed, *other, *task, other_lang, "");
      }
    }
    if (!task) {
      // Nothing changed since the last sync: the other side stays as is.
      body["synced_text"] = *other;
      body["task_used"] = nullptr;
      body["alternatives"] = nlohmann::json::array();
    } else {
      const auto hyps = beam_search(*model_, ex.source_ids, options_.decode);
      if (hyps.empty()) throw HttpError{500, "internal", "decoder returned no hypothesis"};
      const auto best = text_of(*bpe_, hyps.front());
      if (trim(best).empty()) throw HttpError{500, "internal", "decoder returned an empty text"};
      std::vector<std::string> alternatives;
      for (const auto& h : hyps) {
        auto text = text_of(*bpe_, h);
        if (alternatives.size() < static_cast<std::size_t>(n_alt) && !trim(text).empty() &&
            std::find(alternatives.begin(), alternatives.end(), text) == alternatives.end())
          alternatives.push_back(std::move(text));
      }
      body["synced_text"] = best;
      body["task_used"] = to_string(*task);
      body["alternatives"] = alternatives;
    }
    body["status"] = "ok";
    body["latency_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    return {200, body};
  });
}

ServiceResponse SyncService::prefix_alternatives(const nlohmann::json& req) const {
  return guarded([&]() -> ServiceResponse {
    if (!req.is_object()) bad_request("request must be a JSON object");
    const auto source = required_text(req, "source_text");
    const auto target_lang = checked_lang(req, "target_lang", languages_);
    const auto target = optional_text(req, "target_text").value_or("");
    const auto words = split_words(target);
    const auto index = required_index(req, "cursor_word_index");
    if (index < 0 || index > static_cast<long>(words.size())) bad_request("cursor_word_index out of range");
    const int k = count_field(req, "k", options_.n_alternatives_default);
    if (!model_loaded()) throw HttpError{503, "no_model", "no model is loaded"};

    const TextDecoder decoder(*bpe_, *model_, options_.decode);
    const auto prefix = join_words(words, 0, static_cast<std::size_t>(index));
    return {200, {{"status", "ok"}, {"prefix", prefix}, {"alternatives", decoder.complete(source, target_lang, prefix, k)}}};
  });
}

ServiceResponse SyncService::paraphrase(const nlohmann::json& req) const {
  return guarded([&]() -> ServiceResponse {
    if (!req.is_object()) bad_request("request must be a JSON object");
    const auto source = required_text(req, "source_text");
    const auto target = required_text(req, "target_text");
    const auto target_lang = checked_lang(req, "target_lang", languages_);
    const auto words = split_words(target);
    const auto start = required_index(req, "span_start_word");
    const auto end = required_index(req, "span_end_word");
    if (start < 0 || start > end || end >= static_cast<long>(words.size())) bad_request("bad span");
    const int k = count_field(req, "k", options_.n_alternatives_default);
    if (!model_loaded()) throw HttpError{503, "no_model", "no model is loaded"};

    const auto s = static_cast<std::size_t>(start), e = static_cast<std::size_t>(end) + 1;
    const auto original = join_words(words, s, e);
    std::vector<std::string> gapped(words.begin(), words.begin() + static_cast<long>(s));
    gapped.emplace_back(kGapMarker);
    gapped.insert(gapped.end(), words.begin() + static_cast<long>(e), words.end());

    const TextDecoder decoder(*bpe_, *model_, options_.decode);
    // Extra beam room so that dropping the original still leaves k.
    const auto fillers = decoder.fill(source, join_words(gapped), target_lang, k + 2);
    nlohmann::json alternatives = nlohmann::json::array();
    std::set<std::string> seen{original};
    for (const auto& f : fillers) {
      if (alternatives.size() >= static_cast<std::size_t>(k)) break;
      const auto replacement = trim(f.text);
      if (replacement.empty() || !seen.insert(replacement).second) continue;
      std::vector<std::string> sentence(words.begin(), words.begin() + static_cast<long>(s));
      for (auto& w : split_words(replacement)) sentence.push_back(std::move(w));
      sentence.insert(sentence.end(), words.begin() + static_cast<long>(e), words.end());
      alternatives.push_back({{"replacement", replacement}, {"sentence", join_words(sentence)}, {"score", f.score}});
    }
    return {200, {{"status", "ok"}, {"original", original}, {"alternatives", alternatives}}};
  });
}

ServiceResponse SyncService::config() const {
  nlohmann::json info = options_.model_info;
  info["loaded"] = model_loaded();
  if (model_) {
    const auto& c = model_->config();
    info["quantized"] = model_->quantized();
    info["d_model"] = c.d_model;
    info["layers"] = c.n_layers;
    info["heads"] = c.n_heads;
    info["vocab_size"] = c.vocab_size;
  }
  nlohmann::json langs = nlohmann::json::array();
  if (bpe_) langs = {languages_.first, languages_.second};
  return {200,
          {{"languages", langs},
           {"n_alternatives_default", options_.n_alternatives_default},
           {"beam_size", options_.decode.beam_size},
           {"max_len", options_.decode.max_len},
           {"model_info", info},
           {"version", BISYNC_VERSION}}};
}

ServiceResponse SyncService::handle(const std::string& method, const std::string& path, const std::string& body) const {
  if (method == "GET" && path == "/api/config") return config();
  using Handler = ServiceResponse (SyncService::*)(const nlohmann::json&) const;
  static const std::pair<const char*, Handler> routes[] = {{"/api/sync", &SyncService::sync},
                                                            {"/api/prefix_alternatives", &SyncService::prefix_alternatives},
                                                            {"/api/paraphrase", &SyncService::paraphrase}};
  for (const auto& [route, handler] : routes) {
    if (path != route) continue;
    if (method != "POST") return {405, {{"status", "method_not_allowed"}, {"error", "use POST"}}};
    const auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) return {400, {{"status", "bad_request"}, {"error", "body is not valid JSON"}}};
    return (this->*handler)(j);
  }
  return {404, {{"status", "not_found"}, {"error", "no route " + path}}};
}

std::unique_ptr<httplib::Server> make_http_server(const SyncService& service) {
  auto server = std::make_unique<httplib::Server>();
  const auto origin = service.options().cors_origin;
  server->set_default_headers({{"Access-Control-Allow-Origin", origin},
                               {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                               {"Access-Control-Allow-Headers", "Content-Type"}});
  const auto reply = [&service](const httplib::Request& req, httplib::Response& res) {
    const auto r = service.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server->Get("/api/config", reply);
  for (const char* route : {"/api/sync", "/api/prefix_alternatives", "/api/paraphrase"}) server->Post(route, reply);
  server->Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  return server;
}

}  // namespace bisync
