#include "qac/eval.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <cmath>
#include <thread>
#include <unordered_map>

#include "qac/errors.hpp"
#include "qac/utf8.hpp"

namespace qac {

double reciprocal_rank(std::span<const std::string> candidates, std::string_view truth) {
    const auto n = std::min(candidates.size(), kMrrCutoff);
    for (std::size_t i = 0; i < n; ++i) {
        if (candidates[i] == truth) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

bool is_seen_prefix(const MpcIndex& index, std::string_view prefix) { return index.has_prefix(prefix); }

EvalResult summarize(std::span<const EvalEvent> trace) {
    EvalResult r;
    double seen = 0.0;
    double unseen = 0.0;
    for (const auto& e : trace) {
        if (e.seen) {
            seen += e.rr;
            ++r.n_seen;
        } else {
            unseen += e.rr;
            ++r.n_unseen;
        }
    }
    const auto n = r.n_seen + r.n_unseen;
    r.mrr_seen = r.n_seen ? seen / static_cast<double>(r.n_seen) : 0.0;
    r.mrr_unseen = r.n_unseen ? unseen / static_cast<double>(r.n_unseen) : 0.0;
    r.mrr_all = n ? (static_cast<double>(r.n_seen) * r.mrr_seen + static_cast<double>(r.n_unseen) * r.mrr_unseen) /
                        static_cast<double>(n)
                  : 0.0;
    return r;
}

namespace {

// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < threads; ++t) {
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mu);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    workers.clear();
    if (failure) std::rethrow_exception(failure);
}

EvalEvent make_event(const std::string& user_key, std::size_t index, const PrefixSample& sample, double rr,
                     bool seen) {
    return EvalEvent{user_key,
                     index,
                     sample.prefix,
                     rr,
                     utf8::length(sample.prefix),
                     utf8::length(sample.source_query),
                     seen};
}

}  // namespace

template <typename T>
EvalRun evaluate_model(const Model<T>& model, const Vocabulary& vocab, const UserEmbeddings<T>& users,
                       std::span<const QueryRecord> test, const MpcIndex& seen_index,
                       const UserTable& train_users, const EvalOptions& options) {
    const auto groups = group_by_user(test);
    for (const auto& g : groups) {
        if (train_users.contains(g.user_key)) {
            throw ProtocolError("test user '" + g.user_key + "' also appears in training data");
        }
    }
    std::vector<std::vector<EvalEvent>> per_user(groups.size());
    parallel_for(groups.size(), options.threads, [&](std::size_t gi) {
        const auto& group = groups[gi];
        Vector<T> u = users.row(kRareUser);
        auto acc = AdadeltaRow<T>::zeros(users.dim());
        auto& events = per_user[gi];
        for (std::size_t qi = 0; qi < group.queries.size(); ++qi) {
            const auto& query = group.queries[qi].text;
            auto rng = prefix_rng(options.seed, group.user_key, qi);
            if (const auto sample = sample_prefix(rng, query)) {
                const auto weights = adapted_recurrent_weights(model, u);
                const auto completions = beam_search(model, vocab, weights, sample->prefix, options.beam);
                std::vector<std::string> texts;
                texts.reserve(completions.size());
                for (const auto& c : completions) texts.push_back(c.text);
                events.push_back(make_event(group.user_key, qi, *sample, reciprocal_rank(texts, query),
                                            is_seen_prefix(seen_index, sample->prefix)));
            }
            online_update(model, u, acc, options.online, encode_query(vocab, query));
        }
    });
    EvalRun run;
    for (auto& events : per_user) {
        for (auto& e : events) run.trace.push_back(std::move(e));
    }
    run.result = summarize(run.trace);
    return run;
}

EvalRun evaluate_mpc(const MpcIndex& index, std::span<const QueryRecord> test, std::uint64_t seed) {
    EvalRun run;
    for (const auto& group : group_by_user(test)) {
        for (std::size_t qi = 0; qi < group.queries.size(); ++qi) {
            const auto& query = group.queries[qi].text;
            auto rng = prefix_rng(seed, group.user_key, qi);
            const auto sample = sample_prefix(rng, query);
            if (!sample) continue;
            std::vector<std::string> texts;
            for (auto& [text, _] : index.complete(sample->prefix, kMrrCutoff)) texts.push_back(std::move(text));
            run.trace.push_back(make_event(group.user_key, qi, *sample, reciprocal_rank(texts, query),
                                           is_seen_prefix(index, sample->prefix)));
        }
    }
    run.result = summarize(run.trace);
    return run;
}

ImprovementCurve improvement_curve(std::span<const EvalEvent> adapted, std::span<const EvalEvent> baseline,
                                   std::size_t window) {
    if (window < 1) throw ArgumentError("window must be >= 1");
    std::unordered_map<std::string, std::unordered_map<std::size_t, double>> base_rr;
    for (const auto& e : baseline) base_rr[e.user_key][e.query_index] = e.rr;

    struct Sums {
        double adapted = 0.0;
        double baseline = 0.0;
        std::size_t n = 0;
    };
    std::map<std::size_t, Sums> by_index;
    for (const auto& e : adapted) {
        const auto user = base_rr.find(e.user_key);
        if (user == base_rr.end()) continue;
        const auto hit = user->second.find(e.query_index);
        if (hit == user->second.end()) continue;
        auto& s = by_index[e.query_index];
        s.adapted += e.rr;
        s.baseline += hit->second;
        ++s.n;
    }

    ImprovementCurve curve;
    curve.window = window;
    for (const auto& [x, s] : by_index) {
        if (s.baseline == 0.0) continue;
        // Means share the same count, so the ratio of sums is the ratio of MRRs.
        curve.raw.push_back(CurvePoint{x, (s.adapted - s.baseline) / s.baseline, s.n});
    }
    const auto n = curve.raw.size();
    const std::size_t left = (window - 1) / 2;
    const std::size_t right = window / 2;
    for (std::size_t k = 0; k < n; ++k) {
        const auto lo = k >= left ? k - left : 0;
        const auto hi = std::min(n - 1, k + right);
        double sum = 0.0;
        std::size_t samples = 0;
        for (std::size_t j = lo; j <= hi; ++j) {
            sum += curve.raw[j].y;
            samples += curve.raw[j].samples;
        }
        curve.smoothed.push_back(CurvePoint{curve.raw[k].x, sum / static_cast<double>(hi - lo + 1), samples});
    }
    return curve;
}

LengthTable mrr_by_length(std::span<const EvalEvent> trace) {
    if (trace.empty()) throw ArgumentError("mrr_by_length on an empty trace");
    LengthTable table;
    for (const auto& e : trace) {
        auto& p = table.by_prefix[e.prefix_length];
        p.mrr += e.rr;
        ++p.count;
        auto& q = table.by_query[e.query_length];
        q.mrr += e.rr;
        ++q.count;
    }
    for (auto* buckets : {&table.by_prefix, &table.by_query}) {
        for (auto& [_, b] : *buckets) b.mrr /= static_cast<double>(b.count);
    }
    return table;
}

template <typename T>
CaseStudyReport likelihood_ratio_case_study(const Model<T>& model, const Vocabulary& vocab,
                                            const UserEmbeddings<T>& users,
                                            std::span<const std::string> probe_queries,
                                            std::span<const std::string> candidate_pool,
                                            const OnlineConfig& online, std::size_t limit) {
    if (candidate_pool.empty()) throw ArgumentError("empty candidate pool");
    const auto pool = candidate_pool.first(std::min(limit, candidate_pool.size()));
    std::vector<std::vector<TokenId>> encoded;
    encoded.reserve(pool.size());
    for (const auto& q : pool) encoded.push_back(encode_query(vocab, q));

    Vector<T> u = users.row(kRareUser);
    const auto before_weights = adapted_recurrent_weights(model, u);
    std::vector<double> before;
    before.reserve(pool.size());
    for (const auto& tokens : encoded) before.push_back(sequence_nll(model, before_weights, std::span<const TokenId>(tokens)));

    auto acc = AdadeltaRow<T>::zeros(users.dim());
    for (const auto& probe : probe_queries) online_update(model, u, acc, online, encode_query(vocab, probe));

    const auto after_weights = adapted_recurrent_weights(model, u);
    CaseStudyReport report;
    report.ranked.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const double after = sequence_nll(model, after_weights, std::span<const TokenId>(encoded[i]));
        report.ranked.push_back(LikelihoodRatio{pool[i], std::exp(before[i] - after)});
    }
    std::sort(report.ranked.begin(), report.ranked.end(), [](const auto& a, const auto& b) {
        if (a.ratio != b.ratio) return a.ratio > b.ratio;
        return a.query < b.query;
    });
    return report;
}

#define QAC_INSTANTIATE_EVAL(T)                                                                               \
    template EvalRun evaluate_model(const Model<T>&, const Vocabulary&, const UserEmbeddings<T>&,              \
                                    std::span<const QueryRecord>, const MpcIndex&, const UserTable&,          \
                                    const EvalOptions&);                                                      \
    template CaseStudyReport likelihood_ratio_case_study(const Model<T>&, const Vocabulary&,                  \
                                                         const UserEmbeddings<T>&, std::span<const std::string>, \
                                                         std::span<const std::string>, const OnlineConfig&,   \
                                                         std::size_t);

QAC_INSTANTIATE_EVAL(float)
QAC_INSTANTIATE_EVAL(double)

}  // namespace qac
