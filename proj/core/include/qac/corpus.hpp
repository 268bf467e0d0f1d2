#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace qac {

using TokenId = std::int32_t;
using UserId = std::uint32_t;

// Shared entity for every user below the rare threshold; also the cold-start row.
inline constexpr UserId kRareUser = 1;

struct QueryRecord {
    std::string user_key;
    std::string text;
    std::int64_t timestamp = 0;
    std::size_t file_order = 0;  // stable tiebreak for equal timestamps
};

// Column layout of a tab-separated query log. Defaults match AOL dumps
// (AnonID, Query, QueryTime, ...).
struct LogSchema {
    std::size_t user_column = 0;
    std::size_t query_column = 1;
    std::size_t time_column = 2;
    bool has_header = false;
    std::string time_format = "%Y-%m-%d %H:%M:%S";
};

struct LoadedLog {
    std::vector<QueryRecord> records;
    std::size_t skipped = 0;
};

LoadedLog load_query_log(const std::filesystem::path& path, const LogSchema& schema = {});
LoadedLog parse_query_log(std::istream& in, const LogSchema& schema = {});

// Lowercase (ASCII), trim, collapse whitespace runs to one space.
std::string normalize_query(std::string_view raw);
// As normalize_query, but a trailing whitespace run is kept as one space
// (the user may be about to type the next word).
std::string normalize_prefix(std::string_view raw);

class Vocabulary {
public:
    static constexpr TokenId kStart = 0;
    static constexpr TokenId kStop = 1;
    static constexpr TokenId kUnk = 2;
    static constexpr std::size_t kSpecialCount = 3;

    Vocabulary() = default;
    // `characters` are the non-special symbols in id order (ids start at 3).
    explicit Vocabulary(std::vector<char32_t> characters);

    std::size_t size() const { return kSpecialCount + characters_.size(); }
    const std::vector<char32_t>& characters() const { return characters_; }

    TokenId id(char32_t cp) const;
    bool contains(char32_t cp) const { return index_.contains(cp); }
    // Printable form; specials render as <s>, </s>, <unk>.
    std::string symbol(TokenId id) const;
    char32_t character(TokenId id) const;
    static bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kSpecialCount); }

    bool operator==(const Vocabulary& other) const { return characters_ == other.characters_; }

private:
    std::vector<char32_t> characters_;
    std::unordered_map<char32_t, TokenId> index_;
};

Vocabulary build_vocabulary(std::span<const QueryRecord> records, std::size_t max_symbols = 79);

// [START] chars [STOP]; `max_chars` truncates the character portion (training path).
std::vector<TokenId> encode_query(const Vocabulary& vocab, std::string_view text,
                                  std::optional<std::size_t> max_chars = std::nullopt);
// Drops START/STOP; UNK renders as U+FFFD.
std::string decode_tokens(const Vocabulary& vocab, std::span<const TokenId> tokens);

struct UserTable {
    std::unordered_map<std::string, UserId> ids;
    std::unordered_map<std::string, std::size_t> query_count;
    std::size_t rare_threshold = 15;
    std::size_t retained = 0;

    // k: retained users plus the rare-user row.
    std::size_t user_count() const { return retained + 1; }
    UserId id_of(const std::string& user_key) const;
    bool contains(const std::string& user_key) const { return ids.contains(user_key); }
};

UserTable assign_user_ids(std::span<const QueryRecord> records, std::size_t rare_threshold = 15);

struct SplitConfig {
    std::size_t test_users = 1;
    double valid_fraction = 0.02;
    std::uint64_t seed = 0;
};

struct DatasetSplit {
    std::vector<QueryRecord> train;
    std::vector<QueryRecord> valid;
    std::vector<QueryRecord> test;
};

DatasetSplit make_splits(std::span<const QueryRecord> records, const SplitConfig& config);

// Records grouped per user (first-seen user order), each group chronological.
struct UserQueries {
    std::string user_key;
    std::vector<QueryRecord> queries;
};
std::vector<UserQueries> group_by_user(std::span<const QueryRecord> records);

// `user_key \t timestamp \t query` lines.
void write_records(const std::filesystem::path& path, std::span<const QueryRecord> records);
std::vector<QueryRecord> read_records(const std::filesystem::path& path);

struct PrefixSample {
    std::string prefix;
    std::string completion;
    std::string source_query;
};

// Split point uniform over {2, ..., len-1} code points; none when len < 3.
std::optional<PrefixSample> sample_prefix(std::mt19937_64& rng, std::string_view query);

// RNG keyed by (seed, user, query index) so paired evaluations see identical
// prefixes regardless of execution order.
std::mt19937_64 prefix_rng(std::uint64_t seed, std::string_view user_key, std::size_t query_index);

// Most frequent distinct queries, count desc then text asc.
std::vector<std::pair<std::string, std::size_t>> most_frequent_queries(
    std::span<const QueryRecord> records, std::size_t limit);

}  // namespace qac
