#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qac/beam_search.hpp"
#include "qac/corpus.hpp"
#include "qac/model.hpp"
#include "qac/mpc.hpp"
#include "qac/train.hpp"

namespace qac {

inline constexpr std::size_t kMrrCutoff = 10;

struct EvalResult {
    double mrr_seen = 0.0;
    double mrr_unseen = 0.0;
    double mrr_all = 0.0;
    std::size_t n_seen = 0;
    std::size_t n_unseen = 0;
};

// One scored prefix.
struct EvalEvent {
    std::string user_key;
    std::size_t query_index = 0;  // queries of this user seen before this one
    std::string prefix;
    double rr = 0.0;
    std::size_t prefix_length = 0;  // code points
    std::size_t query_length = 0;   // code points
    bool seen = false;
};

struct EvalRun {
    EvalResult result;
    std::vector<EvalEvent> trace;
};

// 1/rank of the exact match within the first ten candidates, else 0.
double reciprocal_rank(std::span<const std::string> candidates, std::string_view truth);

// Seen = some query retained in the MPC index starts with the prefix.
bool is_seen_prefix(const MpcIndex& index, std::string_view prefix);

EvalResult summarize(std::span<const EvalEvent> trace);

struct EvalOptions {
    BeamConfig beam;
    OnlineConfig online;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

// Sequential online protocol per test user: start from u_1, and for each query
// score one sampled prefix, then update the embedding with the true query.
// Throws ProtocolError if a test user also appears in `train_users`.
template <typename T>
EvalRun evaluate_model(const Model<T>& model, const Vocabulary& vocab, const UserEmbeddings<T>& users,
                       std::span<const QueryRecord> test, const MpcIndex& seen_index,
                       const UserTable& train_users, const EvalOptions& options);

EvalRun evaluate_mpc(const MpcIndex& index, std::span<const QueryRecord> test, std::uint64_t seed);

struct CurvePoint {
    std::size_t x = 0;  // queries seen so far
    double y = 0.0;     // relative MRR improvement
    std::size_t samples = 0;
};

struct ImprovementCurve {
    std::size_t window = 9;
    std::vector<CurvePoint> raw;
    std::vector<CurvePoint> smoothed;
};

// Events are paired on (user, query index). Indices where the baseline MRR is
// zero are dropped before the centered moving average.
ImprovementCurve improvement_curve(std::span<const EvalEvent> adapted, std::span<const EvalEvent> baseline,
                                   std::size_t window = 9);

struct LengthBucket {
    double mrr = 0.0;
    std::size_t count = 0;
};

struct LengthTable {
    std::map<std::size_t, LengthBucket> by_prefix;
    std::map<std::size_t, LengthBucket> by_query;
};

LengthTable mrr_by_length(std::span<const EvalEvent> trace);

struct LikelihoodRatio {
    std::string query;
    double ratio = 1.0;  // exp(NLL_before - NLL_after)
};

struct CaseStudyReport {
    std::vector<LikelihoodRatio> ranked;
};

// Fresh user from u_1; candidates scored before and after one online update
// per probe query, ranked by likelihood ratio (desc, then text asc).
template <typename T>
CaseStudyReport likelihood_ratio_case_study(const Model<T>& model, const Vocabulary& vocab,
                                            const UserEmbeddings<T>& users,
                                            std::span<const std::string> probe_queries,
                                            std::span<const std::string> candidate_pool,
                                            const OnlineConfig& online, std::size_t limit = 1500);

}  // namespace qac
