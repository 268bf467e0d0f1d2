#include "qac/mpc.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "binary_io.hpp"
#include "qac/errors.hpp"

namespace qac {

namespace {
constexpr std::string_view kMagic = "QACMPCIX";
}

MpcIndex::MpcIndex() : nodes_(1) {}

bool MpcIndex::ranks_before(std::uint32_t a, std::uint32_t b) const {
    if (counts_[a] != counts_[b]) return counts_[a] > counts_[b];
    return queries_[a] < queries_[b];
}

std::uint32_t MpcIndex::child(std::uint32_t node, unsigned char byte) const {
    const auto& kids = nodes_[node].children;
    const auto it = std::lower_bound(kids.begin(), kids.end(), byte,
                                     [](const auto& c, unsigned char b) { return c.first < b; });
    return (it != kids.end() && it->first == byte) ? it->second : 0;
}

std::uint32_t MpcIndex::add_child(std::uint32_t node, unsigned char byte) {
    if (const auto existing = child(node, byte)) return existing;
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.emplace_back();
    auto& kids = nodes_[node].children;
    const auto it = std::lower_bound(kids.begin(), kids.end(), byte,
                                     [](const auto& c, unsigned char b) { return c.first < b; });
    kids.insert(it, {byte, id});
    return id;
}

void MpcIndex::insert(std::uint32_t query_index) {
    std::uint32_t node = 0;
    for (unsigned char c : queries_[query_index]) node = add_child(node, c);
    nodes_[node].query = query_index;
}

void MpcIndex::rebuild_top() {
    // Children always have larger ids than their parent.
    for (auto i = nodes_.size(); i-- > 0;) {
        auto& node = nodes_[i];
        std::vector<std::uint32_t> merged;
        if (node.query >= 0) merged.push_back(static_cast<std::uint32_t>(node.query));
        for (const auto& [_, kid] : node.children) {
            const auto& top = nodes_[kid].top;
            merged.insert(merged.end(), top.begin(), top.end());
        }
        const auto keep = std::min(merged.size(), kCachedTop);
        std::partial_sort(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(keep), merged.end(),
                          [this](std::uint32_t a, std::uint32_t b) { return ranks_before(a, b); });
        merged.resize(keep);
        node.top = std::move(merged);
    }
}

MpcIndex MpcIndex::build(std::span<const std::string> queries, std::size_t min_count) {
    std::map<std::string, std::uint64_t> counts;
    for (const auto& q : queries) {
        if (!q.empty()) ++counts[q];
    }
    MpcIndex index;
    index.min_count_ = min_count;
    for (auto& [query, count] : counts) {
        if (count < min_count) continue;
        index.queries_.push_back(query);
        index.counts_.push_back(count);
        index.insert(static_cast<std::uint32_t>(index.queries_.size() - 1));
    }
    index.rebuild_top();
    return index;
}

std::int64_t MpcIndex::find(std::string_view prefix) const {
    std::uint32_t node = 0;
    for (unsigned char c : prefix) {
        node = child(node, c);
        if (node == 0) return -1;
    }
    return node;
}

bool MpcIndex::has_prefix(std::string_view prefix) const {
    const auto node = find(prefix);
    return node >= 0 && !nodes_[static_cast<std::size_t>(node)].top.empty();
}

std::uint64_t MpcIndex::count(std::string_view query) const {
    const auto node = find(query);
    if (node < 0) return 0;
    const auto q = nodes_[static_cast<std::size_t>(node)].query;
    return q < 0 ? 0 : counts_[static_cast<std::size_t>(q)];
}

std::vector<std::pair<std::string, std::uint64_t>> MpcIndex::complete(std::string_view prefix,
                                                                      std::size_t top_n) const {
    std::vector<std::pair<std::string, std::uint64_t>> out;
    const auto start = find(prefix);
    if (start < 0 || top_n == 0) return out;
    std::vector<std::uint32_t> hits;
    if (top_n <= kCachedTop) {
        hits = nodes_[static_cast<std::size_t>(start)].top;
    } else {
        std::vector<std::uint32_t> stack{static_cast<std::uint32_t>(start)};
        while (!stack.empty()) {
            const auto n = stack.back();
            stack.pop_back();
            if (nodes_[n].query >= 0) hits.push_back(static_cast<std::uint32_t>(nodes_[n].query));
            for (const auto& [_, kid] : nodes_[n].children) stack.push_back(kid);
        }
        std::sort(hits.begin(), hits.end(), [this](std::uint32_t a, std::uint32_t b) { return ranks_before(a, b); });
    }
    if (hits.size() > top_n) hits.resize(top_n);
    out.reserve(hits.size());
    for (auto q : hits) out.emplace_back(queries_[q], counts_[q]);
    return out;
}

void MpcIndex::save(std::ostream& out) const {
    detail::ByteWriter w;
    w.bytes(kMagic);
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(min_count_));
    w.u64(queries_.size());
    for (std::size_t i = 0; i < queries_.size(); ++i) {
        w.str(queries_[i]);
        w.u64(counts_[i]);
    }
    w.u64(nodes_.size());
    for (const auto& node : nodes_) {
        w.i64(node.query);
        w.u32(static_cast<std::uint32_t>(node.children.size()));
        for (const auto& [byte, kid] : node.children) {
            w.u8(byte);
            w.u32(kid);
        }
    }
    w.seal();
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw IoError("failed to write MPC index");
}

MpcIndex MpcIndex::load(std::istream& in) {
    const auto raw = detail::read_all(in);
    if (raw.size() < kMagic.size() || std::string_view(raw).substr(0, kMagic.size()) != kMagic) {
        throw FormatError("not an MPC index (bad magic)");
    }
    {
        detail::ByteReader header(std::string_view(raw).substr(kMagic.size()));
        const auto version = header.u32();
        if (version != kFormatVersion) {
            throw VersionError("MPC index format version " + std::to_string(version) +
                               " is not supported (expected " + std::to_string(kFormatVersion) + ")");
        }
    }
    detail::ByteReader r(detail::unseal(raw));
    r.bytes(kMagic.size());
    r.u32();
    MpcIndex index;
    index.min_count_ = r.u32();
    const auto n_queries = r.u64();
    if (n_queries > r.remaining()) throw FormatError("implausible query count");
    for (std::uint64_t i = 0; i < n_queries; ++i) {
        index.queries_.push_back(r.str());
        index.counts_.push_back(r.u64());
    }
    const auto n_nodes = r.u64();
    if (n_nodes == 0 || n_nodes > r.remaining()) throw FormatError("implausible node count");
    index.nodes_.assign(n_nodes, Node{});
    for (std::uint64_t n = 0; n < n_nodes; ++n) {
        auto& node = index.nodes_[n];
        node.query = r.i64();
        if (node.query >= static_cast<std::int64_t>(n_queries)) throw FormatError("node references unknown query");
        const auto n_children = r.u32();
        for (std::uint32_t c = 0; c < n_children; ++c) {
            const auto byte = r.u8();
            const auto kid = r.u32();
            if (kid <= n || kid >= n_nodes) throw FormatError("child index out of range");
            if (!node.children.empty() && node.children.back().first >= byte) {
                throw FormatError("trie children out of order");
            }
            node.children.emplace_back(byte, kid);
        }
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes in MPC index");
    index.rebuild_top();
    return index;
}

void MpcIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    save(out);
}

MpcIndex MpcIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return load(in);
}

MpcIndex build_mpc_index(std::span<const QueryRecord> train, std::size_t min_count) {
    std::vector<std::string> queries;
    queries.reserve(train.size());
    for (const auto& r : train) queries.push_back(r.text);
    return MpcIndex::build(queries, min_count);
}

std::vector<std::pair<std::string, std::uint64_t>> mpc_complete(const MpcIndex& index, std::string_view prefix,
                                                                std::size_t top_n) {
    return index.complete(prefix, top_n);
}

}  // namespace qac
