#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qac/archive.hpp"
#include "qac/beam_search.hpp"
#include "qac/session.hpp"
#include "qac/train.hpp"

namespace qac {

struct ServiceConfig {
    BeamConfig beam;
    OnlineConfig online;
    // 0 or 1: update on every selection. k > 1: apply updates once k selections are queued.
    std::size_t defer_updates = 0;
};

struct HttpResponse {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

// Transport-independent completion service. All methods are thread-safe.
class CompletionService {
public:
    explicit CompletionService(ServiceConfig config = {});
    ~CompletionService();

    void load(ModelArchive archive);
    bool loaded() const;

    UserId create_user();
    std::vector<Completion> complete(UserId user, std::string_view prefix, std::size_t top_n = 10);
    void select(UserId user, std::string_view query);
    double nll(UserId user, std::string_view query);

    // Adapted-weight computations so far (per-user weight cache).
    std::uint64_t adaptation_computations() const;
    std::uint64_t embedding_version(UserId user) const;
    // Current model with every live user embedding, ready for save_model.
    ModelArchive snapshot() const;

    HttpResponse handle_create_user();
    HttpResponse handle_complete(const std::map<std::string, std::string>& params);
    HttpResponse handle_select(std::string_view body);
    HttpResponse handle_nll(const std::map<std::string, std::string>& params);
    HttpResponse handle_health() const;

private:
    struct State;
    std::shared_ptr<State> state() const;

    ServiceConfig config_;
    mutable std::mutex mu_;
    std::shared_ptr<State> state_;
};

// Binds the service's JSON API (and optional static UI under /ui/) to HTTP.
class HttpServer {
public:
    explicit HttpServer(CompletionService& service, std::optional<std::filesystem::path> ui_dir = std::nullopt);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Returns the bound port (an ephemeral one when `port` is 0).
    int bind(const std::string& host, int port);
    // Blocks until stop().
    void listen();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace qac
