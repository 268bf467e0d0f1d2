#include <gtest/gtest.h>

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include "oracles.hpp"
#include "qac/errors.hpp"
#include "qac/service.hpp"
#include "synthetic.hpp"

#include <httplib.h>
#include <json.hpp>

namespace qac {
namespace {

using nlohmann::json;

ModelArchive micro_archive() {
    auto cfg = testing::micro_config(Variant::kFactor, 6, 3, 4, 2, 2);
    cfg.float_width = 32;
    auto [model, users] = testing::random_micro_model<float>(cfg, 3, 11);
    return {std::move(model), std::move(users), testing::letters(3)};
}

ServiceConfig micro_service_config() {
    ServiceConfig c;
    c.beam = BeamConfig{30, 3, 6, 10};
    c.online.online_lr = 1.0;
    return c;
}

const testing::TrainedSynthetic& trained() {
    static const auto model = [] {
        testing::SyntheticTraining setup;
        setup.model.variant = Variant::kFactor;
        setup.model.hidden = 32;
        setup.model.user_embedding = 4;
        setup.model.rank = 2;
        setup.model.float_width = 32;
        setup.train.epochs = 2;
        setup.train.batch_size = 8;
        testing::SyntheticOptions opt;
        opt.train_users = 20;
        return testing::train_synthetic(setup, opt);
    }();
    return model;
}

bool same_parameters(const Parameters<float>& a, const Parameters<float>& b) {
    const auto ta = tensors(a);
    const auto tb = tensors(b);
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].data.size() != tb[i].data.size()) return false;
        if (std::memcmp(ta[i].data.data(), tb[i].data.data(), ta[i].data.size_bytes()) != 0) return false;
    }
    return true;
}

TEST(Service, UnloadedRepliesUnavailable) {
    CompletionService svc;
    EXPECT_FALSE(svc.loaded());
    EXPECT_EQ(svc.handle_create_user().status, 503);
    EXPECT_EQ(svc.handle_complete({{"user_id", "1"}, {"prefix", "ab"}}).status, 503);
    EXPECT_EQ(svc.handle_select(R"({"user_id":1,"query":"ab"})").status, 503);
    EXPECT_EQ(svc.handle_nll({{"user_id", "1"}, {"query", "ab"}}).status, 503);
    const auto health = json::parse(svc.handle_health().body);
    EXPECT_EQ(health["status"], "ok");
    EXPECT_EQ(health["model_loaded"], false);
    EXPECT_THROW(svc.snapshot(), UnavailableError);
}

TEST(Service, CreateUserReturnsFreshIdsStartingFromRareUserRow) {
    CompletionService svc(micro_service_config());
    svc.load(micro_archive());
    EXPECT_EQ(json::parse(svc.handle_health().body)["model_loaded"], true);
    const auto first = svc.handle_create_user();
    ASSERT_EQ(first.status, 201);
    const auto a = json::parse(first.body)["user_id"].get<UserId>();
    const auto b = json::parse(svc.handle_create_user().body)["user_id"].get<UserId>();
    EXPECT_GT(a, 3u);
    EXPECT_NE(a, b);
    // A new user starts from u_1 and so completes exactly like user 1.
    EXPECT_EQ(svc.complete(a, "ab"), svc.complete(kRareUser, "ab"));
}

TEST(Service, CompleteMatchesDirectBeamSearch) {
    const auto archive = micro_archive();
    CompletionService svc(micro_service_config());
    svc.load(archive);
    auto cfg = micro_service_config().beam;
    for (UserId u = 1; u <= 3; ++u) {
        EXPECT_EQ(svc.complete(u, "ca"), beam_search(archive.model, archive.vocab, archive.users, u, "ca", cfg));
    }
}

TEST(Service, CompleteHandlerShapesResponse) {
    CompletionService svc(micro_service_config());
    svc.load(micro_archive());
    const auto r = svc.handle_complete({{"user_id", "2"}, {"prefix", "  AB"}});
    ASSERT_EQ(r.status, 200) << r.body;
    const auto body = json::parse(r.body);
    const auto& list = body["completions"];
    ASSERT_FALSE(list.empty());
    ASSERT_LE(list.size(), 10u);
    double last = 0.0;
    for (std::size_t i = 0; i < list.size(); ++i) {
        EXPECT_EQ(list[i]["rank"], i + 1);
        EXPECT_EQ(list[i]["text"].get<std::string>().rfind("ab", 0), 0u);
        const double lp = list[i]["logprob"];
        EXPECT_LE(lp, 0.0);
        if (i > 0) EXPECT_LE(lp, last);
        last = lp;
    }
    EXPECT_EQ(r.body, svc.handle_complete({{"user_id", "2"}, {"prefix", "ab"}}).body);

    const auto one = json::parse(svc.handle_complete({{"user_id", "2"}, {"prefix", "ab"}, {"top_n", "1"}}).body);
    ASSERT_EQ(one["completions"].size(), 1u);
    EXPECT_EQ(one["completions"][0], list[0]);
}

TEST(Service, CompleteHandlerErrors) {
    CompletionService svc(micro_service_config());
    svc.load(micro_archive());
    auto status = [&](std::map<std::string, std::string> p) { return svc.handle_complete(p).status; };
    EXPECT_EQ(status({{"user_id", "99"}, {"prefix", "ab"}}), 404);
    EXPECT_EQ(status({{"user_id", "0"}, {"prefix", "ab"}}), 404);
    EXPECT_EQ(status({{"user_id", "1"}, {"prefix", "   "}}), 400);
    EXPECT_EQ(status({{"user_id", "1"}}), 400);
    EXPECT_EQ(status({{"prefix", "ab"}}), 400);
    EXPECT_EQ(status({{"user_id", "x"}, {"prefix", "ab"}}), 400);
    EXPECT_EQ(status({{"user_id", "1"}, {"prefix", "ab"}, {"top_n", "0"}}), 400);
    EXPECT_EQ(status({{"user_id", "1"}, {"prefix", "ab"}, {"top_n", "11"}}), 400);
    const auto body = json::parse(svc.handle_complete({{"user_id", "99"}, {"prefix", "ab"}}).body);
    EXPECT_TRUE(body.contains("error"));
    EXPECT_TRUE(body.contains("detail"));
}

TEST(Service, SelectHandlerValidatesBody) {
    CompletionService svc(micro_service_config());
    svc.load(micro_archive());
    for (const auto* bad : {"", "{", "[]", R"({"query":"ab"})", R"({"user_id":1})", R"({"user_id":-1,"query":"ab"})",
                            R"({"user_id":"1","query":"ab"})", R"({"user_id":1,"query":5})",
                            R"({"user_id":1,"query":"   "})"}) {
        const auto r = svc.handle_select(bad);
        EXPECT_EQ(r.status, 400) << bad;
        const auto body = json::parse(r.body);
        EXPECT_EQ(body["error"], "bad_request");
        EXPECT_TRUE(body["detail"].is_string());
    }
    EXPECT_EQ(svc.handle_select(R"({"user_id":42,"query":"ab"})").status, 404);
    EXPECT_EQ(svc.embedding_version(1), 0u);
}

TEST(Service, SelectBumpsVersionAndForcesOneRecompute) {
    CompletionService svc(micro_service_config());
    svc.load(micro_archive());
    const auto user = svc.create_user();
    const auto before = svc.complete(user, "ab");
    const auto computed = svc.adaptation_computations();
    EXPECT_EQ(svc.complete(user, "ab"), before);
    EXPECT_EQ(svc.complete(user, "ba"), svc.complete(user, "ba"));
    EXPECT_EQ(svc.adaptation_computations(), computed);

    const auto r = svc.handle_select(json{{"user_id", user}, {"query", "abc"}}.dump());
    EXPECT_EQ(r.status, 204);
    EXPECT_TRUE(r.body.empty());
    EXPECT_EQ(svc.embedding_version(user), 1u);
    svc.complete(user, "ab");
    svc.complete(user, "ab");
    svc.nll(user, "abc");
    EXPECT_EQ(svc.adaptation_computations(), computed + 1);
}

TEST(Service, DeferredUpdatesApplyInBatches) {
    auto cfg = micro_service_config();
    cfg.defer_updates = 3;
    CompletionService svc(cfg);
    svc.load(micro_archive());
    const auto user = svc.create_user();
    svc.select(user, "abc");
    svc.select(user, "bca");
    EXPECT_EQ(svc.embedding_version(user), 0u);
    svc.select(user, "cab");
    EXPECT_EQ(svc.embedding_version(user), 3u);

    // Same queries applied immediately reach the same embedding.
    CompletionService eager(micro_service_config());
    eager.load(micro_archive());
    const auto other = eager.create_user();
    for (const auto* q : {"abc", "bca", "cab"}) eager.select(other, q);
    EXPECT_EQ(svc.snapshot().users.row(user), eager.snapshot().users.row(other));
}

TEST(Service, SelectionsRaiseLikelihoodOnTrainedModel) {
    const auto& t = trained();
    ServiceConfig cfg;
    cfg.online.online_lr = 10.0;
    CompletionService svc(cfg);
    svc.load(t.archive());
    const auto user = svc.create_user();
    const std::string query = "cheap hockey";
    double last = svc.nll(user, query);
    for (int i = 0; i < 3; ++i) {
        svc.select(user, query);
        const double now = svc.nll(user, query);
        EXPECT_LT(now, last) << "selection " << i + 1;
        last = now;
    }
    EXPECT_TRUE(same_parameters(svc.snapshot().model.params, t.result.model.params));
}

TEST(Service, ConcurrentTrafficKeepsGlobalParametersIntact) {
    const auto archive = micro_archive();
    CompletionService svc(micro_service_config());
    svc.load(archive);
    std::vector<UserId> users;
    for (int i = 0; i < 4; ++i) users.push_back(svc.create_user());
    std::atomic<int> failures{0};
    {
        std::vector<std::jthread> workers;
        for (std::size_t w = 0; w < 4; ++w) {
            workers.emplace_back([&, w] {
                const auto user = users[w % users.size()];
                for (int i = 0; i < 15; ++i) {
                    try {
                        if (i % 3 == 0) svc.select(user, "abc");
                        const auto c = svc.complete(user, w % 2 ? "ab" : "ca", 5);
                        if (c.empty() || c.size() > 5) ++failures;
                    } catch (...) {
                        ++failures;
                    }
                }
            });
        }
    }
    EXPECT_EQ(failures.load(), 0);
    const auto snap = svc.snapshot();
    EXPECT_TRUE(same_parameters(snap.model.params, archive.model.params));
    for (const auto u : users) EXPECT_EQ(svc.embedding_version(u), 5u);
    for (UserId u = 1; u <= 3; ++u) EXPECT_EQ(snap.users.row(u), archive.users.row(u));
}

TEST(Service, SnapshotPersistsLiveUsers) {
    CompletionService svc(micro_service_config());
    svc.load(micro_archive());
    const auto user = svc.create_user();
    svc.select(user, "cab");
    const auto expected = svc.complete(user, "ca");

    std::stringstream buf;
    const auto snap = svc.snapshot();
    save_model(buf, snap.model, snap.users, snap.vocab);
    CompletionService reloaded(micro_service_config());
    reloaded.load(load_model(buf));
    EXPECT_EQ(reloaded.complete(user, "ca"), expected);
}

TEST(Service, HttpEndToEnd) {
    const auto ui = std::filesystem::temp_directory_path() / "qac_service_test_ui";
    std::filesystem::create_directories(ui);
    std::ofstream(ui / "index.html") << "<html>qac</html>";

    CompletionService svc(micro_service_config());
    HttpServer server(svc, ui);
    const int port = server.bind("127.0.0.1", 0);
    ASSERT_GT(port, 0);
    std::jthread loop([&] { server.listen(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    auto health = client.Get("/health");
    ASSERT_TRUE(health);
    EXPECT_EQ(json::parse(health->body)["model_loaded"], false);
    auto unavailable = client.Post("/users", "", "application/json");
    ASSERT_TRUE(unavailable);
    EXPECT_EQ(unavailable->status, 503);

    svc.load(micro_archive());
    auto created = client.Post("/users", "", "application/json");
    ASSERT_TRUE(created);
    EXPECT_EQ(created->status, 201);
    const auto user = json::parse(created->body)["user_id"].get<UserId>();

    auto completions = client.Get("/complete?user_id=" + std::to_string(user) + "&prefix=ab&top_n=3");
    ASSERT_TRUE(completions);
    EXPECT_EQ(completions->status, 200);
    EXPECT_EQ(json::parse(completions->body)["completions"].size(), 3u);

    auto selected = client.Post("/select", json{{"user_id", user}, {"query", "abc"}}.dump(), "application/json");
    ASSERT_TRUE(selected);
    EXPECT_EQ(selected->status, 204);
    auto bad = client.Post("/select", "not json", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);

    auto nll = client.Get("/nll?user_id=" + std::to_string(user) + "&query=abc");
    ASSERT_TRUE(nll);
    EXPECT_GT(json::parse(nll->body)["nll"].get<double>(), 0.0);
    auto missing = client.Get("/complete?user_id=77&prefix=ab");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 404);

    auto page = client.Get("/ui/index.html");
    ASSERT_TRUE(page);
    EXPECT_EQ(page->status, 200);
    EXPECT_EQ(page->body, "<html>qac</html>");

    server.stop();
    loop.join();
    std::filesystem::remove_all(ui);
}

}  // namespace
}  // namespace qac
