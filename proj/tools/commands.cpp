#include "commands.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>

#include "config_json.hpp"
#include "qac/archive.hpp"
#include "qac/beam_search.hpp"
#include "qac/errors.hpp"
#include "qac/eval.hpp"
#include "qac/mpc.hpp"
#include "qac/service.hpp"
#include "qac/train.hpp"

namespace qac::cli {

using nlohmann::json;

namespace {

std::vector<QueryRecord> read_split(const fs::path& path, bool required) {
    if (!fs::exists(path)) {
        if (required) throw IoError("missing " + path.string());
        return {};
    }
    return read_records(path);
}

json curve_json(const std::vector<CurvePoint>& points) {
    json arr = json::array();
    for (const auto& p : points) arr.push_back({{"x", p.x}, {"y", p.y}, {"samples", p.samples}});
    return arr;
}

json buckets_json(const std::map<std::size_t, LengthBucket>& buckets) {
    json arr = json::array();
    for (const auto& [len, b] : buckets) arr.push_back({{"length", len}, {"mrr", b.mrr}, {"count", b.count}});
    return arr;
}

void write_curve_csv(const fs::path& path, const ImprovementCurve& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "queries_seen,raw,smoothed,samples\n" << std::setprecision(10);
    for (std::size_t i = 0; i < curve.raw.size(); ++i) {
        out << curve.raw[i].x << ',' << curve.raw[i].y << ',' << curve.smoothed[i].y << ','
            << curve.raw[i].samples << '\n';
    }
}

void write_length_csv(const fs::path& path, const std::map<std::size_t, LengthBucket>& buckets) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "length,mrr,count\n" << std::setprecision(10);
    for (const auto& [len, b] : buckets) out << len << ',' << b.mrr << ',' << b.count << '\n';
}

fs::path sibling(const fs::path& report, const std::string& suffix) {
    auto p = report;
    p.replace_filename(report.stem().string() + suffix);
    return p;
}

json trace_summary(const std::vector<EvalEvent>& trace) {
    std::set<std::string> users;
    double prefix_len = 0.0;
    double query_len = 0.0;
    std::size_t hits = 0;
    std::size_t top1 = 0;
    for (const auto& e : trace) {
        users.insert(e.user_key);
        prefix_len += static_cast<double>(e.prefix_length);
        query_len += static_cast<double>(e.query_length);
        if (e.rr > 0.0) ++hits;
        if (e.rr == 1.0) ++top1;
    }
    const double n = trace.empty() ? 1.0 : static_cast<double>(trace.size());
    return {{"events", trace.size()},
            {"users", users.size()},
            {"hit_rate", static_cast<double>(hits) / n},
            {"top1_rate", static_cast<double>(top1) / n},
            {"mean_prefix_length", prefix_len / n},
            {"mean_query_length", query_len / n}};
}

UserId parse_user_id(const std::string& text) {
    UserId id = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, id);
    if (ec != std::errc() || ptr != end) throw ArgumentError("user must be a numeric id or 'new': " + text);
    return id;
}

}  // namespace

int run_split(const SplitOptions& opt, std::ostream& out) {
    auto log = load_query_log(opt.log, opt.schema);
    auto split = make_splits(log.records, opt.split);
    fs::create_directories(opt.out);
    DataDir dir{opt.out};
    write_records(dir.train(), split.train);
    write_records(dir.valid(), split.valid);
    write_records(dir.test(), split.test);
    out << json{{"records", log.records.size()},
                {"skipped", log.skipped},
                {"train", split.train.size()},
                {"valid", split.valid.size()},
                {"test", split.test.size()}}
               .dump()
        << '\n';
    return 0;
}

int run_train(const TrainOptions& opt, std::ostream& out) {
    auto job = load_job_config(opt.config);
    DataDir dir{opt.data};
    const auto train_records = read_split(dir.train(), true);
    const auto valid_records = read_split(dir.valid(), false);
    if (train_records.empty()) throw EmptyCorpusError("no training queries in " + dir.train().string());

    const auto vocab = build_vocabulary(train_records, job.max_vocab);
    job.model.vocab_size = vocab.size();
    job.model.float_width = 32;
    const auto table = assign_user_ids(train_records, job.rare_threshold);
    const auto train_set = encode_records(vocab, table, train_records, job.train.max_train_chars);
    const auto valid_set = encode_records(vocab, table, valid_records, std::nullopt);

    auto result = train<float>(job.train, job.model, train_set, valid_set, table.user_count(),
                               [&](const EpochMetrics& m) { out << to_json(m).dump() << std::endl; });
    save_model(opt.out, result.model, result.users, vocab);
    return 0;
}

int run_complete(const CompleteOptions& opt, std::ostream& out) {
    auto archive = load_model(opt.model);
    UserId user = kRareUser;
    if (opt.user == "new") {
        AdadeltaState<float> ada;
        user = spawn_user(archive.users, ada);
    } else {
        user = parse_user_id(opt.user);
        if (!archive.users.contains(user)) throw LookupError("unknown user id " + opt.user);
    }
    BeamConfig beam{opt.beam_width, opt.branching, opt.max_chars, opt.top};
    beam.beam_width = std::max(beam.beam_width, beam.top_n);
    const auto prefix = normalize_prefix(opt.prefix);
    const auto results = beam_search(archive.model, archive.vocab, archive.users, user, prefix, beam);
    out << std::setprecision(8);
    for (std::size_t i = 0; i < results.size(); ++i) {
        out << (i + 1) << '\t' << results[i].text << '\t' << results[i].logprob << '\n';
    }
    return 0;
}

int run_mpc_build(const MpcBuildOptions& opt, std::ostream& out) {
    DataDir dir{opt.data};
    const auto records = read_split(dir.train(), true);
    const auto index = build_mpc_index(records, opt.min_count);
    index.save(opt.out);
    out << json{{"queries", index.size()}, {"min_count", index.min_count()}}.dump() << '\n';
    return 0;
}

int run_mpc_complete(const MpcCompleteOptions& opt, std::ostream& out) {
    const auto index = MpcIndex::load(opt.index);
    const auto results = mpc_complete(index, normalize_prefix(opt.prefix), opt.top);
    for (std::size_t i = 0; i < results.size(); ++i) {
        out << (i + 1) << '\t' << results[i].first << '\t' << results[i].second << '\n';
    }
    return 0;
}

int run_eval(const EvalCliOptions& opt, std::ostream& out) {
    DataDir dir{opt.data};
    const auto train_records = read_split(dir.train(), true);
    const auto test_records = read_split(dir.test(), true);
    const auto index = build_mpc_index(train_records, 3);

    json report;
    report["variant"] = opt.variant;
    EvalRun run;
    std::optional<EvalRun> baseline;

    if (opt.variant == "mpc") {
        run = evaluate_mpc(index, test_records, opt.seed);
    } else {
        auto archive = load_model(opt.model);
        const auto variant = parse_variant(opt.variant);
        if (archive.model.config.variant != variant) {
            throw ConfigError("model is " + std::string(to_string(archive.model.config.variant)) +
                              ", requested " + opt.variant);
        }
        const auto table = assign_user_ids(train_records, opt.rare_threshold);
        EvalOptions eo;
        eo.beam.beam_width = opt.beam_width;
        eo.beam.branching = opt.branching;
        eo.online.online_lr = opt.online_lr;
        eo.seed = opt.seed;
        eo.threads = opt.threads;
        run = evaluate_model(archive.model, archive.vocab, archive.users, test_records, index, table, eo);

        // The improvement curve compares against an explicit baseline model, or
        // else against this model with online adaptation switched off.
        if (opt.baseline) {
            auto base = load_model(*opt.baseline);
            baseline = evaluate_model(base.model, base.vocab, base.users, test_records, index, table, eo);
        } else {
            auto frozen = eo;
            frozen.online.online_lr = 0.0;
            baseline = evaluate_model(archive.model, archive.vocab, archive.users, test_records, index, table, frozen);
        }

        if (!opt.probes.empty()) {
            std::vector<std::string> pool;
            for (auto& [q, n] : most_frequent_queries(train_records, opt.case_study_pool)) pool.push_back(q);
            const auto study = likelihood_ratio_case_study(archive.model, archive.vocab, archive.users, opt.probes,
                                                           pool, eo.online, opt.case_study_pool);
            json ranked = json::array();
            for (const auto& r : study.ranked) ranked.push_back({{"query", r.query}, {"ratio", r.ratio}});
            report["case_study"] = {{"probes", opt.probes}, {"ranked", ranked}};
        }
    }

    report["result"] = to_json(run.result);
    report["trace_summary"] = trace_summary(run.trace);
    if (!run.trace.empty()) {
        const auto lengths = mrr_by_length(run.trace);
        report["length"] = {{"by_prefix", buckets_json(lengths.by_prefix)},
                            {"by_query", buckets_json(lengths.by_query)}};
        write_length_csv(sibling(opt.out, ".prefix_length.csv"), lengths.by_prefix);
        write_length_csv(sibling(opt.out, ".query_length.csv"), lengths.by_query);
    }
    if (baseline) {
        const auto curve = improvement_curve(run.trace, baseline->trace, opt.curve_window);
        report["baseline_result"] = to_json(baseline->result);
        report["curve"] = {{"window", curve.window}, {"raw", curve_json(curve.raw)},
                           {"smoothed", curve_json(curve.smoothed)}};
        write_curve_csv(sibling(opt.out, ".curve.csv"), curve);
    }

    std::ofstream file(opt.out);
    if (!file) throw IoError("cannot write " + opt.out.string());
    file << report.dump(2) << '\n';
    out << to_json(run.result).dump() << '\n';
    return 0;
}

int run_serve(const ServeOptions& opt, std::ostream& out) {
    ServiceConfig cfg;
    cfg.defer_updates = opt.defer_updates;
    cfg.online.online_lr = opt.online_lr;
    CompletionService service(cfg);
    service.load(load_model(opt.model));
    HttpServer server(service, opt.ui_dir);
    const int port = server.bind(opt.host, opt.port);
    out << "listening on http://" << opt.host << ':' << port << std::endl;
    server.listen();
    return 0;
}

}  // namespace qac::cli
