#include "qac/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <unordered_set>

#include "qac/errors.hpp"
#include "qac/utf8.hpp"

namespace qac {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

std::optional<std::int64_t> parse_time(std::string_view field, const std::string& format) {
    if (field.empty()) return std::nullopt;
    if (std::all_of(field.begin(), field.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        return std::stoll(std::string(field));
    }
    std::tm tm{};
    std::istringstream in{std::string(field)};
    in >> std::get_time(&tm, format.c_str());
    if (in.fail()) return std::nullopt;
    return static_cast<std::int64_t>(timegm(&tm));
}

// FNV-1a, stable across platforms.
std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

}  // namespace

LoadedLog parse_query_log(std::istream& in, const LogSchema& schema) {
    LoadedLog log;
    std::string line;
    bool first = true;
    std::size_t order = 0;
    const std::size_t needed =
        std::max({schema.user_column, schema.query_column, schema.time_column}) + 1;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first && schema.has_header) {
            first = false;
            continue;
        }
        first = false;
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() < needed || fields[schema.user_column].empty()) {
            ++log.skipped;
            continue;
        }
        auto text = normalize_query(fields[schema.query_column]);
        const auto time = parse_time(fields[schema.time_column], schema.time_format);
        if (text.empty() || !time) {
            ++log.skipped;
            continue;
        }
        log.records.push_back(
            QueryRecord{std::string(fields[schema.user_column]), std::move(text), *time, order++});
    }
    if (log.records.empty()) throw EmptyCorpusError("query log has no parseable rows");
    return log;
}

LoadedLog load_query_log(const std::filesystem::path& path, const LogSchema& schema) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read query log " + path.string());
    return parse_query_log(in, schema);
}

std::string normalize_query(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (char c : raw) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c);
    }
    return out;
}

std::string normalize_prefix(std::string_view raw) {
    auto out = normalize_query(raw);
    if (!out.empty() && !raw.empty() && is_space(raw.back())) out.push_back(' ');
    return out;
}

Vocabulary::Vocabulary(std::vector<char32_t> characters) : characters_(std::move(characters)) {
    for (std::size_t i = 0; i < characters_.size(); ++i) {
        const auto [_, inserted] =
            index_.emplace(characters_[i], static_cast<TokenId>(kSpecialCount + i));
        if (!inserted) throw ArgumentError("duplicate vocabulary character");
    }
}

TokenId Vocabulary::id(char32_t cp) const {
    const auto it = index_.find(cp);
    return it == index_.end() ? kUnk : it->second;
}

std::string Vocabulary::symbol(TokenId id) const {
    switch (id) {
        case kStart: return "<s>";
        case kStop: return "</s>";
        case kUnk: return "<unk>";
        default: return utf8::encode(character(id));
    }
}

char32_t Vocabulary::character(TokenId id) const {
    if (id < static_cast<TokenId>(kSpecialCount) || static_cast<std::size_t>(id) >= size()) {
        throw LookupError("token id has no character: " + std::to_string(id));
    }
    return characters_[static_cast<std::size_t>(id) - kSpecialCount];
}

Vocabulary build_vocabulary(std::span<const QueryRecord> records, std::size_t max_symbols) {
    if (records.empty()) throw EmptyCorpusError("cannot build a vocabulary from no records");
    if (max_symbols <= Vocabulary::kSpecialCount) {
        throw ConfigError("vocabulary needs room for at least one character");
    }
    std::map<char32_t, std::size_t> counts;
    for (const auto& record : records) {
        for (char32_t cp : utf8::decode(record.text)) ++counts[cp];
    }
    std::vector<std::pair<char32_t, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    const std::size_t keep = std::min(ranked.size(), max_symbols - Vocabulary::kSpecialCount);
    std::vector<char32_t> chars;
    chars.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) chars.push_back(ranked[i].first);
    return Vocabulary(std::move(chars));
}

std::vector<TokenId> encode_query(const Vocabulary& vocab, std::string_view text,
                                  std::optional<std::size_t> max_chars) {
    auto cps = utf8::decode(text);
    if (max_chars && cps.size() > *max_chars) cps.resize(*max_chars);
    std::vector<TokenId> ids;
    ids.reserve(cps.size() + 2);
    ids.push_back(Vocabulary::kStart);
    for (char32_t cp : cps) ids.push_back(vocab.id(cp));
    ids.push_back(Vocabulary::kStop);
    return ids;
}

std::string decode_tokens(const Vocabulary& vocab, std::span<const TokenId> tokens) {
    std::u32string out;
    for (TokenId id : tokens) {
        if (id == Vocabulary::kStart || id == Vocabulary::kStop) continue;
        out.push_back(id == Vocabulary::kUnk ? U'�' : vocab.character(id));
    }
    return utf8::encode(out);
}

UserId UserTable::id_of(const std::string& user_key) const {
    const auto it = ids.find(user_key);
    if (it == ids.end()) throw LookupError("unknown user " + user_key);
    return it->second;
}

UserTable assign_user_ids(std::span<const QueryRecord> records, std::size_t rare_threshold) {
    if (rare_threshold < 1) throw ConfigError("rare_threshold must be >= 1");
    UserTable table;
    table.rare_threshold = rare_threshold;
    std::vector<std::string> order;
    for (const auto& record : records) {
        if (table.query_count[record.user_key]++ == 0) order.push_back(record.user_key);
    }
    UserId next = kRareUser + 1;
    for (const auto& key : order) {
        if (table.query_count[key] < rare_threshold) {
            table.ids[key] = kRareUser;
        } else {
            table.ids[key] = next++;
            ++table.retained;
        }
    }
    return table;
}

std::vector<UserQueries> group_by_user(std::span<const QueryRecord> records) {
    std::vector<UserQueries> groups;
    std::unordered_map<std::string, std::size_t> slot;
    for (const auto& record : records) {
        auto [it, inserted] = slot.emplace(record.user_key, groups.size());
        if (inserted) groups.push_back(UserQueries{record.user_key, {}});
        groups[it->second].queries.push_back(record);
    }
    for (auto& group : groups) {
        std::stable_sort(group.queries.begin(), group.queries.end(),
                         [](const QueryRecord& a, const QueryRecord& b) {
                             if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
                             return a.file_order < b.file_order;
                         });
    }
    return groups;
}

DatasetSplit make_splits(std::span<const QueryRecord> records, const SplitConfig& config) {
    if (config.valid_fraction < 0.0 || config.valid_fraction >= 1.0) {
        throw ConfigError("valid_fraction must be in [0, 1)");
    }
    auto groups = group_by_user(records);
    if (groups.size() < 2) throw ArgumentError("splitting needs records from at least two users");
    if (config.test_users >= groups.size()) {
        throw ConfigError("test allocation of " + std::to_string(config.test_users) +
                          " users leaves no training users out of " +
                          std::to_string(groups.size()));
    }
    std::vector<std::string> keys;
    keys.reserve(groups.size());
    for (const auto& group : groups) keys.push_back(group.user_key);
    std::sort(keys.begin(), keys.end());
    std::mt19937_64 rng(config.seed);
    std::shuffle(keys.begin(), keys.end(), rng);
    const std::unordered_set<std::string> test_users(keys.begin(),
                                                     keys.begin() + static_cast<std::ptrdiff_t>(config.test_users));

    DatasetSplit split;
    for (auto& group : groups) {
        if (test_users.contains(group.user_key)) {
            for (auto& q : group.queries) split.test.push_back(std::move(q));
            continue;
        }
        const auto n = group.queries.size();
        const auto n_valid = static_cast<std::size_t>(
            std::floor(config.valid_fraction * static_cast<double>(n) + 1e-9));
        for (std::size_t i = 0; i < n; ++i) {
            auto& target = i + n_valid >= n ? split.valid : split.train;
            target.push_back(std::move(group.queries[i]));
        }
    }
    return split;
}

void write_records(const std::filesystem::path& path, std::span<const QueryRecord> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& r : records) out << r.user_key << '\t' << r.timestamp << '\t' << r.text << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<QueryRecord> read_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    LogSchema schema;
    schema.user_column = 0;
    schema.time_column = 1;
    schema.query_column = 2;
    std::vector<QueryRecord> records;
    std::string line;
    std::size_t order = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto fields = split_tabs(line);
        if (fields.size() < 3) continue;
        auto text = normalize_query(fields[2]);
        if (text.empty()) continue;
        const auto time = parse_time(fields[1], schema.time_format);
        records.push_back(QueryRecord{std::string(fields[0]), std::move(text), time.value_or(0), order++});
    }
    return records;
}

std::optional<PrefixSample> sample_prefix(std::mt19937_64& rng, std::string_view query) {
    const auto cps = utf8::decode(query);
    if (cps.size() < 3) return std::nullopt;
    std::uniform_int_distribution<std::size_t> split(2, cps.size() - 1);
    const auto at = split(rng);
    return PrefixSample{utf8::encode(std::u32string_view(cps).substr(0, at)),
                        utf8::encode(std::u32string_view(cps).substr(at)), std::string(query)};
}

std::mt19937_64 prefix_rng(std::uint64_t seed, std::string_view user_key, std::size_t query_index) {
    const auto user_hash = fnv1a(user_key);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(user_hash), static_cast<std::uint32_t>(user_hash >> 32),
                      static_cast<std::uint32_t>(query_index),
                      static_cast<std::uint32_t>(static_cast<std::uint64_t>(query_index) >> 32)};
    return std::mt19937_64(seq);
}

std::vector<std::pair<std::string, std::size_t>> most_frequent_queries(
    std::span<const QueryRecord> records, std::size_t limit) {
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& r : records) ++counts[r.text];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (ranked.size() > limit) ranked.resize(limit);
    return ranked;
}

}  // namespace qac
