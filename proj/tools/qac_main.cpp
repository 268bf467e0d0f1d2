#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "qac/errors.hpp"

int main(int argc, char** argv) {
    using namespace qac::cli;
    CLI::App app{"Personalized query auto-completion"};
    app.require_subcommand(1);

    SplitOptions split;
    auto* split_cmd = app.add_subcommand("split", "Split a raw query log into user-disjoint train/valid/test files");
    split_cmd->add_option("--log", split.log, "Tab-separated query log")->required();
    split_cmd->add_option("--out", split.out, "Output data directory")->required();
    split_cmd->add_option("--test-users", split.split.test_users, "Users held out for testing")->required();
    split_cmd->add_option("--valid-fraction", split.split.valid_fraction, "Per-user validation tail fraction");
    split_cmd->add_option("--seed", split.split.seed);
    split_cmd->add_option("--user-col", split.schema.user_column);
    split_cmd->add_option("--query-col", split.schema.query_column);
    split_cmd->add_option("--time-col", split.schema.time_column);
    split_cmd->add_option("--time-format", split.schema.time_format);
    split_cmd->add_flag("--header", split.schema.has_header, "Skip the first line");

    TrainOptions tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model; prints per-epoch metrics as NDJSON");
    train_cmd->add_option("--config", tr.config, "JSON job config")->required();
    train_cmd->add_option("--data", tr.data, "Data directory")->required();
    train_cmd->add_option("--out", tr.out, "Model file")->required();

    CompleteOptions co;
    auto* complete_cmd = app.add_subcommand("complete", "Complete a prefix with the neural model");
    complete_cmd->add_option("--model", co.model)->required();
    complete_cmd->add_option("--user", co.user, "Numeric user id or 'new'")->required();
    complete_cmd->add_option("--prefix", co.prefix)->required();
    complete_cmd->add_option("--top", co.top);
    complete_cmd->add_option("--beam-width", co.beam_width);
    complete_cmd->add_option("--branching", co.branching);
    complete_cmd->add_option("--max-chars", co.max_chars);

    MpcBuildOptions mb;
    auto* mpc_build_cmd = app.add_subcommand("mpc-build", "Build a most-popular-completion index");
    mpc_build_cmd->add_option("--data", mb.data)->required();
    mpc_build_cmd->add_option("--out", mb.out)->required();
    mpc_build_cmd->add_option("--min-count", mb.min_count);

    MpcCompleteOptions mc;
    auto* mpc_complete_cmd = app.add_subcommand("mpc-complete", "Query a most-popular-completion index");
    mpc_complete_cmd->add_option("--index", mc.index)->required();
    mpc_complete_cmd->add_option("--prefix", mc.prefix)->required();
    mpc_complete_cmd->add_option("--top", mc.top);

    EvalCliOptions ev;
    auto* eval_cmd = app.add_subcommand("eval", "Run the online evaluation protocol");
    eval_cmd->add_option("--model", ev.model, "Model file (not needed for mpc)");
    eval_cmd->add_option("--data", ev.data)->required();
    eval_cmd->add_option("--variant", ev.variant, "unadapted, concat, factor or mpc")
        ->required()
        ->check(CLI::IsMember({"unadapted", "concat", "factor", "mpc"}));
    eval_cmd->add_option("--out", ev.out, "Report JSON")->required();
    eval_cmd->add_option("--baseline", ev.baseline, "Model the improvement curve is measured against");
    eval_cmd->add_option("--online-lr", ev.online_lr);
    eval_cmd->add_option("--seed", ev.seed);
    eval_cmd->add_option("--threads", ev.threads);
    eval_cmd->add_option("--beam-width", ev.beam_width);
    eval_cmd->add_option("--branching", ev.branching);
    eval_cmd->add_option("--rare-threshold", ev.rare_threshold);
    eval_cmd->add_option("--curve-window", ev.curve_window);
    eval_cmd->add_option("--probe", ev.probes, "Probe query for the likelihood-ratio case study");
    eval_cmd->add_option("--case-study-pool", ev.case_study_pool);

    ServeOptions sv;
    auto* serve_cmd = app.add_subcommand("serve", "Serve completions over HTTP");
    serve_cmd->add_option("--model", sv.model)->required();
    serve_cmd->add_option("--port", sv.port)->required();
    serve_cmd->add_option("--host", sv.host);
    serve_cmd->add_option("--defer-updates", sv.defer_updates, "Apply selections in batches of k");
    serve_cmd->add_option("--online-lr", sv.online_lr);
    serve_cmd->add_option("--ui", sv.ui_dir, "Static files served under /ui/");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*split_cmd) return run_split(split, std::cout);
        if (*train_cmd) return run_train(tr, std::cout);
        if (*complete_cmd) return run_complete(co, std::cout);
        if (*mpc_build_cmd) return run_mpc_build(mb, std::cout);
        if (*mpc_complete_cmd) return run_mpc_complete(mc, std::cout);
        if (*eval_cmd) {
            if (ev.variant != "mpc" && ev.model.empty()) throw qac::ArgumentError("--model is required");
            return run_eval(ev, std::cout);
        }
        if (*serve_cmd) return run_serve(sv, std::cout);
    } catch (const qac::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
