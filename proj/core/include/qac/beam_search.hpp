#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qac/corpus.hpp"
#include "qac/model.hpp"

namespace qac {

struct BeamConfig {
    std::size_t beam_width = 100;
    std::size_t branching = 4;
    std::size_t max_completion_chars = 100;
    std::size_t top_n = 10;

    void validate(std::size_t vocab_size) const;
};

struct Completion {
    std::string text;      // full query: prefix + generated suffix
    double logprob = 0.0;  // log P(suffix, STOP | prefix), nats

    bool operator==(const Completion&) const = default;
};

// Per-user adapted recurrent weights, computed at most once per
// (user, embedding version) and shared by every beam step of a request.
template <typename T>
class WeightCache {
public:
    explicit WeightCache(const Model<T>& model);

    std::shared_ptr<const RecurrentWeights<T>> precompute_user_weights(UserId user, std::uint64_t version,
                                                                       const Vector<T>& u);
    void invalidate(UserId user);
    void clear();

    // Adapted-weight computations performed by this cache (0 for unadapted models).
    std::uint64_t computations() const { return computations_.load(); }
    std::size_t size() const;

private:
    struct Entry {
        std::uint64_t version;
        std::shared_ptr<const RecurrentWeights<T>> weights;
    };

    const Model<T>* model_;
    std::shared_ptr<const RecurrentWeights<T>> shared_;  // unadapted: (W, b) for everyone
    mutable std::mutex mu_;
    std::unordered_map<UserId, Entry> entries_;
    std::atomic<std::uint64_t> computations_{0};
};

// Ranked completions of `prefix`, best first (logprob desc, then text asc).
// START and UNK are never generated.
template <typename T>
std::vector<Completion> beam_search(const Model<T>& model, const Vocabulary& vocab,
                                    const RecurrentWeights<T>& weights, std::string_view prefix,
                                    const BeamConfig& config);

template <typename T>
std::vector<Completion> beam_search(const Model<T>& model, const Vocabulary& vocab,
                                    const UserEmbeddings<T>& users, UserId user, std::string_view prefix,
                                    const BeamConfig& config);

}  // namespace qac
