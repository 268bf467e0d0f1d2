#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "qac/model.hpp"
#include "qac/train.hpp"

namespace qac {

// Live per-user state for the service: embedding row, Adadelta accumulators
// and a version that advances once per applied update. Updates to one user are
// serialized; readers copy the row under the same lock so they never see a
// partially written embedding.
class SessionStore {
public:
    struct Snapshot {
        Vector<float> embedding;
        std::uint64_t version = 0;
    };

    explicit SessionStore(const UserEmbeddings<float>& initial);

    // New row initialized to u_1.
    UserId create_user();
    bool contains(UserId user) const;
    std::size_t size() const;

    Snapshot snapshot(UserId user) const;

    // Runs `mutate` under the user's lock and bumps the version. Returns the new version.
    std::uint64_t update(UserId user, const std::function<void(Vector<float>&, AdadeltaRow<float>&)>& mutate);

    // Appends to the user's pending queue; once `threshold` queries are queued
    // they are handed back (and removed) for the caller to apply.
    std::vector<std::string> enqueue(UserId user, std::string query, std::size_t threshold);

    UserEmbeddings<float> export_embeddings() const;

private:
    struct Slot {
        mutable std::mutex mu;
        Vector<float> embedding;
        AdadeltaRow<float> accumulators;
        std::uint64_t version = 0;
        std::vector<std::string> pending;
    };

    Slot& slot(UserId user) const;

    std::size_t dim_ = 0;
    mutable std::shared_mutex mu_;
    std::deque<std::unique_ptr<Slot>> slots_;
};

}  // namespace qac
