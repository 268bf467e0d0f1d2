#include "qac/session.hpp"

#include "qac/errors.hpp"

namespace qac {

SessionStore::SessionStore(const UserEmbeddings<float>& initial) : dim_(initial.dim()) {
    if (initial.size() < 1) throw ArgumentError("session store needs the rare-user row");
    for (UserId id = 1; id <= initial.size(); ++id) {
        auto s = std::make_unique<Slot>();
        s->embedding = initial.row(id);
        s->accumulators = AdadeltaRow<float>::zeros(dim_);
        slots_.push_back(std::move(s));
    }
}

SessionStore::Slot& SessionStore::slot(UserId user) const {
    std::shared_lock lock(mu_);
    if (user < 1 || user > slots_.size()) throw LookupError("unknown user id " + std::to_string(user));
    return *slots_[user - 1];
}

UserId SessionStore::create_user() {
    auto s = std::make_unique<Slot>();
    s->embedding = snapshot(kRareUser).embedding;
    s->accumulators = AdadeltaRow<float>::zeros(dim_);
    std::unique_lock lock(mu_);
    slots_.push_back(std::move(s));
    return static_cast<UserId>(slots_.size());
}

bool SessionStore::contains(UserId user) const {
    std::shared_lock lock(mu_);
    return user >= 1 && user <= slots_.size();
}

std::size_t SessionStore::size() const {
    std::shared_lock lock(mu_);
    return slots_.size();
}

SessionStore::Snapshot SessionStore::snapshot(UserId user) const {
    auto& s = slot(user);
    std::lock_guard lock(s.mu);
    return Snapshot{s.embedding, s.version};
}

std::uint64_t SessionStore::update(UserId user,
                                   const std::function<void(Vector<float>&, AdadeltaRow<float>&)>& mutate) {
    auto& s = slot(user);
    std::lock_guard lock(s.mu);
    Vector<float> embedding = s.embedding;
    AdadeltaRow<float> acc = s.accumulators;
    mutate(embedding, acc);
    s.embedding = std::move(embedding);
    s.accumulators = std::move(acc);
    return ++s.version;
}

std::vector<std::string> SessionStore::enqueue(UserId user, std::string query, std::size_t threshold) {
    auto& s = slot(user);
    std::lock_guard lock(s.mu);
    s.pending.push_back(std::move(query));
    if (s.pending.size() < threshold) return {};
    return std::exchange(s.pending, {});
}

UserEmbeddings<float> SessionStore::export_embeddings() const {
    std::shared_lock lock(mu_);
    UserEmbeddings<float> out(0, dim_);
    for (const auto& s : slots_) {
        std::lock_guard row_lock(s->mu);
        out.append(s->embedding);
    }
    return out;
}

}  // namespace qac
