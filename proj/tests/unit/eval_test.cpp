#include <gtest/gtest.h>

#include <map>
#include <random>

#include "oracles.hpp"
#include "qac/errors.hpp"
#include "qac/eval.hpp"

namespace qac {
namespace {

using testing::micro_config;
using testing::random_micro_model;

TEST(ReciprocalRank, Definition) {
    const std::vector<std::string> c{"a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"};
    EXPECT_EQ(reciprocal_rank(c, "a"), 1.0);
    EXPECT_EQ(reciprocal_rank(c, "b"), 0.5);
    EXPECT_EQ(reciprocal_rank(c, "j"), 0.1);
    EXPECT_EQ(reciprocal_rank(c, "k"), 0.0);  // beyond the top ten
    EXPECT_EQ(reciprocal_rank(c, "zz"), 0.0);
    EXPECT_EQ(reciprocal_rank({}, "a"), 0.0);
}

TEST(Summarize, MeanReciprocalRankArithmetic) {
    std::vector<EvalEvent> trace(3);
    trace[0].rr = 0.5;
    trace[1].rr = 0.0;
    trace[2].rr = 0.2;
    for (auto& e : trace) e.seen = true;
    const auto r = summarize(trace);
    EXPECT_NEAR(r.mrr_seen, 0.7 / 3.0, 1e-15);
    EXPECT_NEAR(r.mrr_all, 0.7 / 3.0, 1e-15);
    EXPECT_EQ(r.n_unseen, 0u);
    EXPECT_EQ(r.mrr_unseen, 0.0);
}

TEST(Summarize, AllIsWeightedMeanOfBuckets) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> rank(0, 12);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<EvalEvent> trace(1 + rng() % 40);
        double total = 0.0;
        for (auto& e : trace) {
            const int k = rank(rng);
            e.rr = k == 0 || k > 10 ? 0.0 : 1.0 / k;
            e.seen = rng() % 2;
            total += e.rr;
        }
        const auto r = summarize(trace);
        EXPECT_EQ(r.n_seen + r.n_unseen, trace.size());
        const double weighted = (static_cast<double>(r.n_seen) * r.mrr_seen +
                                 static_cast<double>(r.n_unseen) * r.mrr_unseen) /
                                static_cast<double>(trace.size());
        EXPECT_DOUBLE_EQ(r.mrr_all, weighted);
        EXPECT_NEAR(r.mrr_all, total / static_cast<double>(trace.size()), 1e-12);
        for (double v : {r.mrr_all, r.mrr_seen, r.mrr_unseen}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(SeenPrefix, UsesFilteredIndex) {
    std::vector<std::string> q{"bank", "bank", "bank", "base", "base"};
    const auto index = MpcIndex::build(q, 3);
    EXPECT_TRUE(is_seen_prefix(index, "ban"));
    EXPECT_FALSE(is_seen_prefix(index, "bas"));  // count-2 query is below the filter
    EXPECT_FALSE(is_seen_prefix(MpcIndex::build({}), "b"));
}

// Shared fixture: a random micro-model over {a, b, c} and a small test split.
struct EvalFixture {
    Vocabulary vocab = testing::letters(3);
    Model<double> model;
    UserEmbeddings<double> users;
    std::vector<QueryRecord> train;
    std::vector<QueryRecord> test;
    MpcIndex index;
    UserTable table;
    EvalOptions options;

    explicit EvalFixture(Variant variant = Variant::kFactor, std::uint64_t seed = 1) {
        std::tie(model, users) = random_micro_model<double>(micro_config(variant, 6), 2, seed, 1.0);
        const std::vector<std::string> pool{"abc", "abca", "bca", "cab", "aab", "ba", "ccab", "abcc"};
        std::mt19937_64 rng(seed);
        for (int i = 0; i < 30; ++i) train.push_back({"train", pool[rng() % pool.size()], i, train.size()});
        for (const std::string user : {"t1", "t2", "t3"}) {
            for (int i = 0; i < 6; ++i) test.push_back({user, pool[rng() % pool.size()], i, test.size()});
        }
        index = build_mpc_index(train, 3);
        table = assign_user_ids(train, 15);
        options.beam = BeamConfig{30, 4, 5, 10};
        options.online.online_lr = 2.0;
        options.seed = 7;
    }

    EvalRun run(const Model<double>& m, const EvalOptions& o) const {
        return evaluate_model(m, vocab, users, test, index, table, o);
    }
};

TEST(EvaluateModel, TraceShapeAndBounds) {
    EvalFixture f;
    const auto run = f.run(f.model, f.options);
    std::size_t expected = 0;
    for (const auto& q : f.test) expected += q.text.size() >= 3 ? 1 : 0;
    EXPECT_EQ(run.trace.size(), expected);
    for (const auto& e : run.trace) {
        EXPECT_GE(e.prefix_length, 2u);
        EXPECT_LT(e.prefix_length, e.query_length);
        EXPECT_GE(e.rr, 0.0);
        EXPECT_LE(e.rr, 1.0);
        EXPECT_EQ(e.seen, f.index.has_prefix(e.prefix));
    }
    EXPECT_EQ(run.result.n_seen + run.result.n_unseen, run.trace.size());
}

TEST(EvaluateModel, RejectsTrainUsers) {
    EvalFixture f;
    auto test = f.test;
    test.push_back({"train", "abc", 99, 99});
    EXPECT_THROW(evaluate_model(f.model, f.vocab, f.users, test, f.index, f.table, f.options), ProtocolError);
}

TEST(EvaluateModel, ZeroLearningRateEqualsFrozenColdStart) {
    EvalFixture f;
    auto frozen = f.options;
    frozen.online.online_lr = 0.0;
    const auto run = f.run(f.model, frozen);
    std::map<std::pair<std::string, std::size_t>, std::string> truth;
    for (const auto& g : group_by_user(f.test)) {
        for (std::size_t i = 0; i < g.queries.size(); ++i) truth[{g.user_key, i}] = g.queries[i].text;
    }
    for (const auto& e : run.trace) {
        std::vector<std::string> texts;
        for (const auto& c : beam_search(f.model, f.vocab, f.users, kRareUser, e.prefix, f.options.beam)) {
            texts.push_back(c.text);
        }
        EXPECT_EQ(reciprocal_rank(texts, truth.at({e.user_key, e.query_index})), e.rr);
    }
}

TEST(EvaluateModel, ZeroedAdaptationEqualsUnadaptedBitForBit) {
    EvalFixture f;
    auto factor = f.model;
    factor.params.bias_adaptation.setZero();
    factor.params.left_bases.setZero();
    factor.params.right_bases.setZero();
    auto plain = factor;
    plain.config.variant = Variant::kUnadapted;
    auto opts = f.options;
    opts.online.online_lr = 0.0;
    const auto a = f.run(factor, opts);
    const auto b = f.run(plain, opts);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].prefix, b.trace[i].prefix);
        EXPECT_EQ(a.trace[i].rr, b.trace[i].rr);
    }
    EXPECT_EQ(a.result.mrr_all, b.result.mrr_all);
}

TEST(EvaluateModel, PredictThenUpdateReplay) {
    EvalFixture f;
    const auto run = f.run(f.model, f.options);
    const auto groups = group_by_user(f.test);
    for (const auto& g : groups) {
        Vector<double> u = f.users.row(kRareUser);
        auto acc = AdadeltaRow<double>::zeros(f.users.dim());
        for (std::size_t qi = 0; qi < g.queries.size(); ++qi) {
            const auto& query = g.queries[qi].text;
            auto rng = prefix_rng(f.options.seed, g.user_key, qi);
            if (const auto sample = sample_prefix(rng, query)) {
                // Only updates from queries 0..qi-1 have been applied here.
                const auto weights = adapted_recurrent_weights(f.model, u);
                std::vector<std::string> texts;
                for (const auto& c : beam_search(f.model, f.vocab, weights, sample->prefix, f.options.beam)) {
                    texts.push_back(c.text);
                }
                const auto it = std::find_if(run.trace.begin(), run.trace.end(), [&](const EvalEvent& e) {
                    return e.user_key == g.user_key && e.query_index == qi;
                });
                ASSERT_NE(it, run.trace.end());
                EXPECT_EQ(it->rr, reciprocal_rank(texts, query));
                EXPECT_EQ(it->prefix, sample->prefix);
            }
            online_update(f.model, u, acc, f.options.online, encode_query(f.vocab, query));
        }
    }
}

TEST(EvaluateModel, ThreadCountDoesNotChangeResults) {
    EvalFixture f;
    auto threaded = f.options;
    threaded.threads = 3;
    const auto a = f.run(f.model, f.options);
    const auto b = f.run(f.model, threaded);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].user_key, b.trace[i].user_key);
        EXPECT_EQ(a.trace[i].rr, b.trace[i].rr);
    }
}

TEST(EvaluateMpc, PairedPrefixesAndUnseenZero) {
    EvalFixture f;
    const auto model_run = f.run(f.model, f.options);
    const auto mpc_run = evaluate_mpc(f.index, f.test, f.options.seed);
    ASSERT_EQ(model_run.trace.size(), mpc_run.trace.size());
    for (std::size_t i = 0; i < mpc_run.trace.size(); ++i) {
        EXPECT_EQ(model_run.trace[i].user_key, mpc_run.trace[i].user_key);
        EXPECT_EQ(model_run.trace[i].query_index, mpc_run.trace[i].query_index);
        EXPECT_EQ(model_run.trace[i].prefix, mpc_run.trace[i].prefix);
        if (!mpc_run.trace[i].seen) EXPECT_EQ(mpc_run.trace[i].rr, 0.0);
    }
    EXPECT_EQ(mpc_run.result.mrr_unseen, 0.0);
}

TEST(EvaluateMpc, TopQueryScoresOne) {
    std::vector<QueryRecord> train;
    for (int i = 0; i < 5; ++i) train.push_back({"a", "bank of america", i, train.size()});
    for (int i = 0; i < 3; ++i) train.push_back({"a", "baseball", i, train.size()});
    const auto index = build_mpc_index(train, 3);
    const std::vector<QueryRecord> test{{"t", "bank of america", 0, 0}, {"t", "zzz top", 1, 1}};
    const auto run = evaluate_mpc(index, test, 0);
    ASSERT_EQ(run.trace.size(), 2u);
    EXPECT_EQ(run.trace[0].rr, 1.0);
    EXPECT_FALSE(run.trace[1].seen);
    EXPECT_EQ(run.trace[1].rr, 0.0);
}

EvalEvent event(const std::string& user, std::size_t idx, double rr) {
    EvalEvent e;
    e.user_key = user;
    e.query_index = idx;
    e.rr = rr;
    return e;
}

TEST(ImprovementCurve, HandComputedMovingAverage) {
    // Two users x ten indices; index 4 has a zero baseline and must be dropped.
    std::vector<EvalEvent> adapted, baseline;
    for (std::size_t i = 0; i < 10; ++i) {
        const double b1 = i == 4 ? 0.0 : 0.5, b2 = i == 4 ? 0.0 : 0.25;
        baseline.push_back(event("u1", i, b1));
        baseline.push_back(event("u2", i, b2));
        adapted.push_back(event("u1", i, 0.5 + 0.05 * static_cast<double>(i)));
        adapted.push_back(event("u2", i, 0.25));
    }
    std::vector<std::size_t> xs;
    std::vector<double> raw;
    for (std::size_t i = 0; i < 10; ++i) {
        if (i == 4) continue;
        const double base = (0.5 + 0.25) / 2.0;
        const double adapt = (0.5 + 0.05 * static_cast<double>(i) + 0.25) / 2.0;
        xs.push_back(i);
        raw.push_back((adapt - base) / base);
    }
    for (std::size_t window : {1u, 3u, 4u, 9u}) {
        const auto curve = improvement_curve(adapted, baseline, window);
        ASSERT_EQ(curve.raw.size(), raw.size());
        ASSERT_EQ(curve.smoothed.size(), raw.size());
        const std::ptrdiff_t left = static_cast<std::ptrdiff_t>((window - 1) / 2);
        const std::ptrdiff_t right = static_cast<std::ptrdiff_t>(window / 2);
        for (std::size_t k = 0; k < raw.size(); ++k) {
            EXPECT_EQ(curve.raw[k].x, xs[k]);
            EXPECT_NEAR(curve.raw[k].y, raw[k], 1e-15);
            EXPECT_EQ(curve.raw[k].samples, 2u);
            double sum = 0.0;
            int n = 0;
            for (std::ptrdiff_t j = static_cast<std::ptrdiff_t>(k) - left; j <= static_cast<std::ptrdiff_t>(k) + right; ++j) {
                if (j < 0 || j >= static_cast<std::ptrdiff_t>(raw.size())) continue;
                sum += raw[static_cast<std::size_t>(j)];
                ++n;
            }
            EXPECT_NEAR(curve.smoothed[k].y, sum / n, 1e-15) << "window " << window << " k " << k;
        }
    }
}

TEST(ImprovementCurve, SelfComparisonIsFlatZero) {
    std::vector<EvalEvent> trace;
    for (std::size_t i = 0; i < 12; ++i) trace.push_back(event("u", i, 1.0 / static_cast<double>(1 + i % 4)));
    const auto curve = improvement_curve(trace, trace);
    EXPECT_EQ(curve.window, 9u);
    for (const auto& p : curve.smoothed) EXPECT_EQ(p.y, 0.0);
    EXPECT_THROW(improvement_curve(trace, trace, 0), ArgumentError);
}

TEST(ImprovementCurve, UnpairedEventsIgnored) {
    const std::vector<EvalEvent> adapted{event("u", 0, 1.0), event("v", 0, 1.0)};
    const std::vector<EvalEvent> baseline{event("u", 0, 0.5)};
    const auto curve = improvement_curve(adapted, baseline, 1);
    ASSERT_EQ(curve.raw.size(), 1u);
    EXPECT_DOUBLE_EQ(curve.raw[0].y, 1.0);
    EXPECT_EQ(curve.raw[0].samples, 1u);
}

TEST(LengthTable, GroupByOracle) {
    std::mt19937_64 rng(4);
    std::vector<EvalEvent> trace;
    for (int i = 0; i < 200; ++i) {
        EvalEvent e;
        e.query_length = 3 + rng() % 10;
        e.prefix_length = 2 + rng() % (e.query_length - 2);
        e.rr = (rng() % 3 == 0) ? 0.0 : 1.0 / static_cast<double>(1 + rng() % 10);
        trace.push_back(e);
    }
    std::map<std::size_t, std::vector<double>> by_prefix, by_query;
    for (const auto& e : trace) {
        by_prefix[e.prefix_length].push_back(e.rr);
        by_query[e.query_length].push_back(e.rr);
    }
    const auto table = mrr_by_length(trace);
    auto check = [](const std::map<std::size_t, LengthBucket>& got, const std::map<std::size_t, std::vector<double>>& want) {
        ASSERT_EQ(got.size(), want.size());
        for (const auto& [len, values] : want) {
            double sum = 0.0;
            for (double v : values) sum += v;
            EXPECT_EQ(got.at(len).count, values.size());
            EXPECT_NEAR(got.at(len).mrr, sum / static_cast<double>(values.size()), 1e-15);
        }
    };
    check(table.by_prefix, by_prefix);
    check(table.by_query, by_query);

    std::vector<EvalEvent> twos(5);
    for (auto& e : twos) e.prefix_length = 2;
    EXPECT_EQ(mrr_by_length(twos).by_prefix.size(), 1u);
    EXPECT_THROW(mrr_by_length(std::vector<EvalEvent>{}), ArgumentError);
}

TEST(CaseStudy, ZeroRateGivesUnitRatios) {
    EvalFixture f;
    const std::vector<std::string> probes{"abc", "cab"};
    const std::vector<std::string> pool{"abc", "bca", "cab", "aab"};
    OnlineConfig frozen;
    frozen.online_lr = 0.0;
    const auto report = likelihood_ratio_case_study(f.model, f.vocab, f.users, probes, pool, frozen);
    ASSERT_EQ(report.ranked.size(), pool.size());
    for (const auto& r : report.ranked) EXPECT_EQ(r.ratio, 1.0);
    EXPECT_EQ(report.ranked[0].query, "aab");  // ties sort by text
}

TEST(CaseStudy, ProbesGainLikelihoodAndPoolTruncates) {
    EvalFixture f;
    const std::vector<std::string> probes{"ccab", "ccab"};
    const std::vector<std::string> pool{"abc", "bca", "cab", "aab", "ccab"};
    OnlineConfig online;
    online.online_lr = 5.0;
    const auto report = likelihood_ratio_case_study(f.model, f.vocab, f.users, probes, pool, online);
    for (std::size_t i = 1; i < report.ranked.size(); ++i) EXPECT_GE(report.ranked[i - 1].ratio, report.ranked[i].ratio);
    for (const auto& r : report.ranked) {
        EXPECT_GT(r.ratio, 0.0);
        if (r.query == "ccab") EXPECT_GT(r.ratio, 1.0);
    }
    EXPECT_EQ(likelihood_ratio_case_study(f.model, f.vocab, f.users, probes, pool, online, 3).ranked.size(), 3u);
    EXPECT_THROW(likelihood_ratio_case_study(f.model, f.vocab, f.users, probes, std::vector<std::string>{}, online),
                 ArgumentError);
}

}  // namespace
}  // namespace qac
