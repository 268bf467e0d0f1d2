#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qac/corpus.hpp"

namespace qac {

// Most Popular Completion index: a byte trie over training queries seen at
// least `min_count` times. Every node caches its top completions.
//
// Binary layout (little-endian):
//   "QACMPCIX" | u32 version | u32 min_count
//   u64 n_queries, n x (u32 len, bytes, u64 count)        -- count table
//   u64 n_nodes,   n x (i64 query | -1, u32 n_children,
//                       n_children x (u8 byte, u32 node)) -- trie, node 0 is the root
//   u32 crc32 of everything above
class MpcIndex {
public:
    static constexpr std::uint32_t kFormatVersion = 1;
    static constexpr std::size_t kCachedTop = 10;

    MpcIndex();

    static MpcIndex build(std::span<const std::string> queries, std::size_t min_count = 3);

    std::vector<std::pair<std::string, std::uint64_t>> complete(std::string_view prefix,
                                                                std::size_t top_n = 10) const;
    bool has_prefix(std::string_view prefix) const;

    std::size_t size() const { return queries_.size(); }
    std::size_t min_count() const { return min_count_; }
    std::uint64_t count(std::string_view query) const;

    void save(std::ostream& out) const;
    static MpcIndex load(std::istream& in);
    void save(const std::filesystem::path& path) const;
    static MpcIndex load(const std::filesystem::path& path);

private:
    struct Node {
        std::vector<std::pair<unsigned char, std::uint32_t>> children;  // sorted by byte
        std::int64_t query = -1;
        std::vector<std::uint32_t> top;
    };

    std::int64_t find(std::string_view prefix) const;
    std::uint32_t child(std::uint32_t node, unsigned char byte) const;
    std::uint32_t add_child(std::uint32_t node, unsigned char byte);
    void insert(std::uint32_t query_index);
    void rebuild_top();
    bool ranks_before(std::uint32_t a, std::uint32_t b) const;

    std::size_t min_count_ = 3;
    std::vector<std::string> queries_;
    std::vector<std::uint64_t> counts_;
    std::vector<Node> nodes_;
};

MpcIndex build_mpc_index(std::span<const QueryRecord> train, std::size_t min_count = 3);

// Queries with the prefix, count desc then text asc, at most top_n.
std::vector<std::pair<std::string, std::uint64_t>> mpc_complete(const MpcIndex& index, std::string_view prefix,
                                                                std::size_t top_n = 10);

}  // namespace qac
