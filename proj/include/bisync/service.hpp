#pragma once

#include <bisync/decode.hpp>
#include <bisync/subword.hpp>

#include <memory>
#include <string>

#include <json.hpp>

namespace httplib {
class Server;
}

namespace bisync {

struct ServiceOptions {
  DecodeOptions decode;
  int n_alternatives_default = 5;
  std::string cors_origin = "*";
  nlohmann::json model_info = nlohmann::json::object();
};

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

// Request handlers independent of the transport. The service holds no
// per-client state: a response depends only on the request payload and the
// loaded model. Without a model, model-backed endpoints answer 503.
class SyncService {
 public:
  SyncService(const BpeModel* bpe, const InferenceModel* model, ServiceOptions options = {});

  ServiceResponse sync(const nlohmann::json& request) const;
  ServiceResponse prefix_alternatives(const nlohmann::json& request) const;
  ServiceResponse paraphrase(const nlohmann::json& request) const;
  ServiceResponse config() const;

  // Dispatches a raw body by route; malformed JSON yields 400.
  ServiceResponse handle(const std::string& method, const std::string& path, const std::string& body) const;

  const ServiceOptions& options() const { return options_; }
  bool model_loaded() const { return bpe_ != nullptr && model_ != nullptr; }

 private:
  const BpeModel* bpe_;
  const InferenceModel* model_;
  ServiceOptions options_;
  LanguagePair languages_;
};

// An httplib server with all routes and CORS headers installed; the caller
// binds and listens.
std::unique_ptr<httplib::Server> make_http_server(const SyncService& service);

}  // namespace bisync
