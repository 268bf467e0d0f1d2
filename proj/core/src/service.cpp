#include "qac/service.hpp"

#include <charconv>

#include <httplib.h>
#include <json.hpp>

#include "qac/errors.hpp"

namespace qac {

using nlohmann::json;

struct CompletionService::State {
    explicit State(ModelArchive a)
        : archive(std::move(a)), cache(archive.model), sessions(archive.users) {}

    ModelArchive archive;
    WeightCache<float> cache;
    SessionStore sessions;
};

CompletionService::CompletionService(ServiceConfig config) : config_(std::move(config)) {}
CompletionService::~CompletionService() = default;

void CompletionService::load(ModelArchive archive) {
    config_.beam.validate(archive.model.config.vocab_size);
    auto next = std::make_shared<State>(std::move(archive));
    std::lock_guard lock(mu_);
    state_ = std::move(next);
}

bool CompletionService::loaded() const { return state() != nullptr; }

std::shared_ptr<CompletionService::State> CompletionService::state() const {
    std::lock_guard lock(mu_);
    return state_;
}

namespace {

template <typename S>
std::shared_ptr<S> require(std::shared_ptr<S> s) {
    if (!s) throw UnavailableError("no model loaded");
    return s;
}

}  // namespace

UserId CompletionService::create_user() { return require(state())->sessions.create_user(); }

std::vector<Completion> CompletionService::complete(UserId user, std::string_view prefix, std::size_t top_n) {
    auto s = require(state());
    const auto normalized = normalize_prefix(prefix);
    if (normalized.empty()) throw ArgumentError("prefix must be non-empty");
    if (top_n < 1 || top_n > config_.beam.top_n) {
        throw ArgumentError("top_n must be between 1 and " + std::to_string(config_.beam.top_n));
    }
    const auto snap = s->sessions.snapshot(user);
    const auto weights = s->cache.precompute_user_weights(user, snap.version, snap.embedding);
    auto cfg = config_.beam;
    cfg.top_n = top_n;
    return beam_search(s->archive.model, s->archive.vocab, *weights, normalized, cfg);
}

void CompletionService::select(UserId user, std::string_view query) {
    auto s = require(state());
    auto normalized = normalize_query(query);
    if (normalized.empty()) throw ArgumentError("query must be non-empty");
    if (!s->sessions.contains(user)) throw LookupError("unknown user id " + std::to_string(user));
    std::vector<std::string> batch;
    if (config_.defer_updates > 1) {
        batch = s->sessions.enqueue(user, std::move(normalized), config_.defer_updates);
    } else {
        batch.push_back(std::move(normalized));
    }
    for (const auto& q : batch) {
        const auto tokens = encode_query(s->archive.vocab, q);
        s->sessions.update(user, [&](Vector<float>& u, AdadeltaRow<float>& acc) {
            online_update(s->archive.model, u, acc, config_.online, tokens);
        });
        s->cache.invalidate(user);
    }
}

double CompletionService::nll(UserId user, std::string_view query) {
    auto s = require(state());
    const auto normalized = normalize_query(query);
    if (normalized.empty()) throw ArgumentError("query must be non-empty");
    const auto snap = s->sessions.snapshot(user);
    const auto weights = s->cache.precompute_user_weights(user, snap.version, snap.embedding);
    return sequence_nll(s->archive.model, *weights, encode_query(s->archive.vocab, normalized));
}

std::uint64_t CompletionService::adaptation_computations() const {
    auto s = state();
    return s ? s->cache.computations() : 0;
}

std::uint64_t CompletionService::embedding_version(UserId user) const {
    return require(state())->sessions.snapshot(user).version;
}

ModelArchive CompletionService::snapshot() const {
    auto s = require(state());
    return ModelArchive{s->archive.model, s->sessions.export_embeddings(), s->archive.vocab};
}

namespace {

HttpResponse error_response(int status, std::string_view code, std::string_view detail) {
    return {status, json{{"error", code}, {"detail", detail}}.dump()};
}

template <typename Fn>
HttpResponse guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const UnavailableError& e) {
        return error_response(503, "unavailable", e.what());
    } catch (const LookupError& e) {
        return error_response(404, "not_found", e.what());
    } catch (const ArgumentError& e) {
        return error_response(400, "bad_request", e.what());
    } catch (const json::exception& e) {
        return error_response(400, "bad_request", e.what());
    } catch (const std::exception& e) {
        return error_response(500, "internal", e.what());
    }
}

std::uint64_t parse_unsigned(const std::map<std::string, std::string>& params, const std::string& key,
                             std::optional<std::uint64_t> fallback = std::nullopt) {
    const auto it = params.find(key);
    if (it == params.end() || it->second.empty()) {
        if (fallback) return *fallback;
        throw ArgumentError("missing parameter '" + key + "'");
    }
    std::uint64_t value = 0;
    const auto& text = it->second;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size()) {
        throw ArgumentError("parameter '" + key + "' must be a non-negative integer");
    }
    return value;
}

UserId to_user_id(std::uint64_t v) {
    if (v == 0 || v > std::numeric_limits<UserId>::max()) throw LookupError("unknown user id " + std::to_string(v));
    return static_cast<UserId>(v);
}

}  // namespace

HttpResponse CompletionService::handle_create_user() {
    return guarded([&] { return HttpResponse{201, json{{"user_id", create_user()}}.dump()}; });
}

HttpResponse CompletionService::handle_complete(const std::map<std::string, std::string>& params) {
    return guarded([&] {
        require(state());
        const auto user = to_user_id(parse_unsigned(params, "user_id"));
        const auto it = params.find("prefix");
        const auto top_n = parse_unsigned(params, "top_n", config_.beam.top_n);
        const auto completions = complete(user, it == params.end() ? "" : it->second, top_n);
        json list = json::array();
        for (std::size_t i = 0; i < completions.size(); ++i) {
            list.push_back({{"text", completions[i].text}, {"logprob", completions[i].logprob}, {"rank", i + 1}});
        }
        return HttpResponse{200, json{{"completions", list}}.dump()};
    });
}

HttpResponse CompletionService::handle_select(std::string_view body) {
    return guarded([&] {
        require(state());
        const auto doc = json::parse(body);
        if (!doc.is_object() || !doc.contains("user_id") || !doc.contains("query") ||
            !doc["user_id"].is_number_unsigned() || !doc["query"].is_string()) {
            throw ArgumentError("body must be {\"user_id\": <int>, \"query\": <string>}");
        }
        select(to_user_id(doc["user_id"].get<std::uint64_t>()), doc["query"].get<std::string>());
        return HttpResponse{204, "", "text/plain"};
    });
}

HttpResponse CompletionService::handle_nll(const std::map<std::string, std::string>& params) {
    return guarded([&] {
        require(state());
        const auto user = to_user_id(parse_unsigned(params, "user_id"));
        const auto it = params.find("query");
        return HttpResponse{200, json{{"nll", nll(user, it == params.end() ? "" : it->second)}}.dump()};
    });
}

HttpResponse CompletionService::handle_health() const {
    return HttpResponse{200, json{{"status", "ok"}, {"model_loaded", loaded()}}.dump()};
}

struct HttpServer::Impl {
    explicit Impl(CompletionService& s) : service(s) {}
    CompletionService& service;
    httplib::Server server;
};

namespace {

std::map<std::string, std::string> query_params(const httplib::Request& req) {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : req.params) out.emplace(k, v);
    return out;
}

void reply(httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    if (!r.body.empty()) res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(CompletionService& service, std::optional<std::filesystem::path> ui_dir)
    : impl_(std::make_unique<Impl>(service)) {
    auto& srv = impl_->server;
    srv.Post("/users", [this](const httplib::Request&, httplib::Response& res) {
        reply(res, impl_->service.handle_create_user());
    });
    srv.Get("/complete", [this](const httplib::Request& req, httplib::Response& res) {
        reply(res, impl_->service.handle_complete(query_params(req)));
    });
    srv.Post("/select", [this](const httplib::Request& req, httplib::Response& res) {
        reply(res, impl_->service.handle_select(req.body));
    });
    srv.Get("/nll", [this](const httplib::Request& req, httplib::Response& res) {
        reply(res, impl_->service.handle_nll(query_params(req)));
    });
    srv.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
        reply(res, impl_->service.handle_health());
    });
    if (ui_dir) srv.set_mount_point("/ui", ui_dir->string());
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) return impl_->server.bind_to_any_port(host);
    if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_) impl_->server.stop();
}

void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace qac
