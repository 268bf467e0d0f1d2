#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include "qac/errors.hpp"
#include "qac/mpc.hpp"
#include "mpc_oracle.hpp"

namespace qac {
namespace {

using testing::brute_force;
using testing::random_corpus;

std::vector<std::string> repeat(const std::vector<std::pair<std::string, int>>& counts) {
    std::vector<std::string> out;
    for (const auto& [q, n] : counts)
        for (int i = 0; i < n; ++i) out.push_back(q);
    return out;
}

TEST(Mpc, HandFixtureOrder) {
    auto index = MpcIndex::build(repeat({{"bank of america", 5}, {"baseball", 3}, {"espn", 4}}));
    const auto got = index.complete("ba");
    ASSERT_EQ(got.size(), 2u);
    EXPECT_EQ(got[0], (std::pair<std::string, std::uint64_t>{"bank of america", 5}));
    EXPECT_EQ(got[1], (std::pair<std::string, std::uint64_t>{"baseball", 3}));
}

TEST(Mpc, MinCountFilter) {
    auto index = MpcIndex::build(repeat({{"q1", 3}, {"q2", 2}}), 3);
    EXPECT_EQ(index.size(), 1u);
    EXPECT_EQ(index.complete("q").size(), 1u);
    EXPECT_EQ(index.count("q1"), 3u);
    EXPECT_EQ(index.count("q2"), 0u);
    EXPECT_FALSE(index.has_prefix("q2"));
}

TEST(Mpc, EmptyAndBoundaryCases) {
    auto empty = MpcIndex::build({});
    EXPECT_EQ(empty.size(), 0u);
    EXPECT_TRUE(empty.complete("a").empty());
    EXPECT_FALSE(empty.has_prefix("a"));

    auto index = MpcIndex::build(repeat({{"espn", 3}, {"espn news", 4}}));
    EXPECT_TRUE(index.complete("xyz").empty());
    const auto full = index.complete("espn");
    ASSERT_EQ(full.size(), 2u);
    EXPECT_EQ(full[1].first, "espn");
    EXPECT_TRUE(index.has_prefix(""));
    EXPECT_EQ(index.complete("espn", 1).size(), 1u);
}

TEST(Mpc, FromRecordsMatchesHashCounts) {
    std::vector<QueryRecord> recs;
    for (const auto& q : repeat({{"a b", 3}, {"a c", 7}, {"b", 1}})) recs.push_back({"u", q, 0, recs.size()});
    auto index = build_mpc_index(recs, 3);
    EXPECT_EQ(index.count("a b"), 3u);
    EXPECT_EQ(index.count("a c"), 7u);
    EXPECT_EQ(mpc_complete(index, "a")[0].first, "a c");
}

TEST(Mpc, MatchesBruteForceOnRandomFixtures) {
    std::mt19937_64 rng(17);
    for (int fixture = 0; fixture < 20; ++fixture) {
        const auto corpus = random_corpus(rng);
        const std::size_t min_count = fixture % 3 == 0 ? 1 : 3;
        const auto index = MpcIndex::build(corpus, min_count);
        for (const std::string prefix : {"", "a", "b", "ab", "a ", "c", "ba", "abc", "cc"}) {
            for (std::size_t top : {1u, 3u, 10u}) {
                EXPECT_EQ(index.complete(prefix, top), brute_force(corpus, prefix, min_count, top))
                    << "fixture " << fixture << " prefix '" << prefix << "'";
            }
            EXPECT_EQ(index.has_prefix(prefix), !brute_force(corpus, prefix, min_count, 1).empty());
        }
    }
}

TEST(Mpc, LongListsBeyondCachedTop) {
    std::vector<std::pair<std::string, int>> counts;
    for (int i = 0; i < 25; ++i) counts.emplace_back("q" + std::to_string(i), 3 + i % 7);
    const auto corpus = repeat(counts);
    const auto index = MpcIndex::build(corpus);
    EXPECT_EQ(index.complete("q", 25), brute_force(corpus, "q", 3, 25));
}

TEST(MpcFormat, RoundTripIsExact) {
    std::mt19937_64 rng(3);
    const auto corpus = random_corpus(rng);
    const auto index = MpcIndex::build(corpus, 2);
    std::stringstream buf;
    index.save(buf);
    const auto bytes = buf.str();
    EXPECT_EQ(bytes.substr(0, 8), "QACMPCIX");
    auto loaded = MpcIndex::load(buf);
    EXPECT_EQ(loaded.size(), index.size());
    EXPECT_EQ(loaded.min_count(), 2u);
    for (const std::string prefix : {"", "a", "b ", "ca"}) {
        EXPECT_EQ(loaded.complete(prefix, 50), index.complete(prefix, 50));
    }
    std::stringstream again;
    loaded.save(again);
    EXPECT_EQ(again.str(), bytes);
}

std::string saved_bytes() {
    std::stringstream buf;
    MpcIndex::build(repeat({{"alpha", 3}, {"beta", 4}})).save(buf);
    return buf.str();
}

MpcIndex load_bytes(const std::string& bytes) {
    std::istringstream in(bytes);
    return MpcIndex::load(in);
}

TEST(MpcFormat, CorruptionDetected) {
    auto bytes = saved_bytes();
    auto flipped = bytes;
    flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x5a);
    EXPECT_THROW(load_bytes(flipped), ChecksumError);
    EXPECT_THROW(load_bytes(bytes.substr(0, bytes.size() - 3)), FormatError);
    EXPECT_THROW(load_bytes(bytes.substr(0, bytes.size() - 1)), ChecksumError);

    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(load_bytes(magic), FormatError);

    auto version = bytes;
    version[8] = static_cast<char>(MpcIndex::kFormatVersion + 1);
    EXPECT_THROW(load_bytes(version), VersionError);
    EXPECT_THROW(MpcIndex::load(std::filesystem::path("/nonexistent/qac.idx")), IoError);
}

}  // namespace
}  // namespace qac
