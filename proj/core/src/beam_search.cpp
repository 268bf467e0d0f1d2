#include "qac/beam_search.hpp"

#include <algorithm>
#include <numeric>

#include "qac/errors.hpp"
#include "qac/utf8.hpp"

namespace qac {

void BeamConfig::validate(std::size_t vocab_size) const {
    if (branching < 1 || branching > vocab_size) throw ConfigError("branching must be in [1, vocab_size]");
    if (top_n < 1) throw ConfigError("top_n must be >= 1");
    if (beam_width < top_n) throw ConfigError("beam_width must be >= top_n");
}

template <typename T>
WeightCache<T>::WeightCache(const Model<T>& model) : model_(&model) {
    if (model.config.variant == Variant::kUnadapted) {
        shared_ = std::make_shared<const RecurrentWeights<T>>(
            RecurrentWeights<T>{model.params.recurrent, model.params.recurrent_bias});
    }
}

template <typename T>
std::shared_ptr<const RecurrentWeights<T>> WeightCache<T>::precompute_user_weights(UserId user,
                                                                                  std::uint64_t version,
                                                                                  const Vector<T>& u) {
    if (shared_) return shared_;
    std::lock_guard lock(mu_);
    auto& slot = entries_[user];
    if (slot.weights && slot.version == version) return slot.weights;
    slot = Entry{version, std::make_shared<const RecurrentWeights<T>>(adapted_recurrent_weights(*model_, u))};
    computations_.fetch_add(1);
    return slot.weights;
}

template <typename T>
void WeightCache<T>::invalidate(UserId user) {
    std::lock_guard lock(mu_);
    entries_.erase(user);
}

template <typename T>
void WeightCache<T>::clear() {
    std::lock_guard lock(mu_);
    entries_.clear();
}

template <typename T>
std::size_t WeightCache<T>::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

namespace {

struct Candidate {
    std::int32_t parent;     // row of the live state it extends
    TokenId symbol;          // STOP for finished
    double logprob;
    std::u32string suffix;
};

bool candidate_before(const Candidate& a, const Candidate& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.suffix < b.suffix;
}

}  // namespace

template <typename T>
std::vector<Completion> beam_search(const Model<T>& model, const Vocabulary& vocab,
                                    const RecurrentWeights<T>& weights, std::string_view prefix,
                                    const BeamConfig& config) {
    if (prefix.empty()) throw ArgumentError("empty prefix");
    const auto vocab_size = static_cast<std::size_t>(model.params.output.cols());
    config.validate(vocab_size);
    if (vocab.size() != vocab_size) throw DimensionError("vocabulary does not match the model");

    const auto& p = model.params;
    const auto h = static_cast<Eigen::Index>(model.config.hidden);
    const auto e = static_cast<Eigen::Index>(model.config.char_embedding);

    // Consume START + prefix.
    Matrix<T> hs = Matrix<T>::Zero(1, h);
    Matrix<T> cs = Matrix<T>::Zero(1, h);
    Matrix<T> x(1, e);
    auto feed = [&](TokenId token) {
        x.row(0) = p.char_embedding.row(token);
        lstm_step_batch(model, weights, x, hs, cs);
    };
    feed(Vocabulary::kStart);
    for (char32_t cp : utf8::decode(prefix)) feed(vocab.id(cp));

    std::vector<std::u32string> live_suffix{std::u32string{}};
    std::vector<double> live_logprob{0.0};
    std::vector<Candidate> finished_in_beam;
    std::vector<Candidate> results;

    // Allowed continuations, in tie-break order (STOP first: shorter text sorts first).
    std::vector<TokenId> allowed{Vocabulary::kStop};
    for (TokenId id = static_cast<TokenId>(Vocabulary::kSpecialCount); id < static_cast<TokenId>(vocab_size); ++id) {
        allowed.push_back(id);
    }
    std::sort(allowed.begin() + 1, allowed.end(),
              [&](TokenId a, TokenId b) { return vocab.character(a) < vocab.character(b); });

    std::vector<Candidate> pool;
    std::vector<std::size_t> order(allowed.size());
    for (std::size_t step = 0; !live_suffix.empty(); ++step) {
        Matrix<T> logits = hs * p.output;
        logits.rowwise() += p.output_bias.transpose();

        pool = finished_in_beam;
        for (std::size_t k = 0; k < live_suffix.size(); ++k) {
            const auto lp = log_softmax(logits.row(static_cast<Eigen::Index>(k)).transpose());
            const bool at_limit = live_suffix[k].size() >= config.max_completion_chars;
            const std::size_t take = at_limit ? 1 : std::min(config.branching, allowed.size());
            std::iota(order.begin(), order.end(), 0);
            if (!at_limit) {
                std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                                  [&](std::size_t a, std::size_t b) {
                                      const double la = lp(allowed[a]);
                                      const double lb = lp(allowed[b]);
                                      if (la != lb) return la > lb;
                                      return a < b;
                                  });
            }
            for (std::size_t j = 0; j < take; ++j) {
                const TokenId symbol = allowed[order[j]];
                Candidate c{static_cast<std::int32_t>(k), symbol, live_logprob[k] + lp(symbol), live_suffix[k]};
                if (symbol != Vocabulary::kStop) c.suffix.push_back(vocab.character(symbol));
                pool.push_back(std::move(c));
            }
        }

        const auto keep = std::min(pool.size(), config.beam_width);
        std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(),
                          candidate_before);
        for (auto& c : pool) {
            if (c.symbol == Vocabulary::kStop && c.parent >= 0) {
                results.push_back(c);
                c.parent = -1;  // mark as carried over, already recorded
            }
        }
        pool.resize(keep);

        finished_in_beam.clear();
        std::vector<std::int32_t> parents;
        std::vector<TokenId> symbols;
        std::vector<std::u32string> next_suffix;
        std::vector<double> next_logprob;
        for (auto& c : pool) {
            if (c.symbol == Vocabulary::kStop) {
                finished_in_beam.push_back(std::move(c));
                continue;
            }
            parents.push_back(c.parent);
            symbols.push_back(c.symbol);
            next_suffix.push_back(std::move(c.suffix));
            next_logprob.push_back(c.logprob);
        }

        // Admissible stop: log-probabilities only decrease as hypotheses grow.
        if (results.size() >= config.top_n && !next_logprob.empty()) {
            std::nth_element(results.begin(), results.begin() + static_cast<std::ptrdiff_t>(config.top_n - 1),
                             results.end(), candidate_before);
            const double kth = results[config.top_n - 1].logprob;
            const double best_live = *std::max_element(next_logprob.begin(), next_logprob.end());
            if (kth > best_live) break;
        }
        if (next_suffix.empty()) break;

        const auto n = static_cast<Eigen::Index>(parents.size());
        Matrix<T> next_h(n, h);
        Matrix<T> next_c(n, h);
        Matrix<T> inputs(n, e);
        for (Eigen::Index r = 0; r < n; ++r) {
            next_h.row(r) = hs.row(parents[static_cast<std::size_t>(r)]);
            next_c.row(r) = cs.row(parents[static_cast<std::size_t>(r)]);
            inputs.row(r) = p.char_embedding.row(symbols[static_cast<std::size_t>(r)]);
        }
        lstm_step_batch(model, weights, inputs, next_h, next_c);
        hs = std::move(next_h);
        cs = std::move(next_c);
        live_suffix = std::move(next_suffix);
        live_logprob = std::move(next_logprob);
    }

    std::sort(results.begin(), results.end(), candidate_before);
    if (results.size() > config.top_n) results.resize(config.top_n);
    std::vector<Completion> out;
    out.reserve(results.size());
    const std::string prefix_text(prefix);
    for (const auto& c : results) out.push_back(Completion{prefix_text + utf8::encode(c.suffix), c.logprob});
    return out;
}

template <typename T>
std::vector<Completion> beam_search(const Model<T>& model, const Vocabulary& vocab,
                                    const UserEmbeddings<T>& users, UserId user, std::string_view prefix,
                                    const BeamConfig& config) {
    return beam_search(model, vocab, adapted_recurrent_weights(model, users.row(user)), prefix, config);
}

template class WeightCache<float>;
template class WeightCache<double>;

#define QAC_INSTANTIATE_BEAM(T)                                                                             \
    template std::vector<Completion> beam_search(const Model<T>&, const Vocabulary&,                        \
                                                 const RecurrentWeights<T>&, std::string_view,              \
                                                 const BeamConfig&);                                        \
    template std::vector<Completion> beam_search(const Model<T>&, const Vocabulary&,                        \
                                                 const UserEmbeddings<T>&, UserId, std::string_view,       \
                                                 const BeamConfig&);

QAC_INSTANTIATE_BEAM(float)
QAC_INSTANTIATE_BEAM(double)

}  // namespace qac
