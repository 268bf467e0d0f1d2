#include <benchmark/benchmark.h>

#include <random>

#include "oracles.hpp"
#include "qac/beam_search.hpp"
#include "qac/mpc.hpp"

namespace {

using namespace qac;

// Model sized like the small config, with random weights so beams do not collapse.
std::pair<Model<float>, UserEmbeddings<float>> bench_model(Variant variant) {
    auto cfg = testing::micro_config(variant, 3 + 26, 24, 64, 8, 4);
    cfg.float_width = 32;
    return testing::random_micro_model<float>(cfg, 4, 1, 0.3);
}

void BM_AdaptedWeights(benchmark::State& state) {
    auto [model, users] = bench_model(static_cast<Variant>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(adapted_recurrent_weights(model, users.row(2)));
}
BENCHMARK(BM_AdaptedWeights)->Arg(0)->Arg(1)->Arg(2);

void BM_LstmStepBatch(benchmark::State& state) {
    auto [model, users] = bench_model(Variant::kFactor);
    const auto w = adapted_recurrent_weights(model, users.row(1));
    const auto rows = state.range(0);
    const Matrix<float> x = Matrix<float>::Random(rows, 24);
    Matrix<float> h = Matrix<float>::Zero(rows, 64);
    Matrix<float> c = Matrix<float>::Zero(rows, 64);
    for (auto _ : state) {
        lstm_step_batch(model, w, x, h, c);
        benchmark::DoNotOptimize(h.data());
    }
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_LstmStepBatch)->Arg(1)->Arg(16)->Arg(100);

// Per-request cost with and without the per-user weight cache.
void BM_BeamSearch(benchmark::State& state) {
    auto [model, users] = bench_model(Variant::kFactor);
    const auto vocab = testing::letters(26);
    const bool cached = state.range(0) != 0;
    const BeamConfig cfg{static_cast<std::size_t>(state.range(1)), 4, 20, 10};
    WeightCache<float> cache(model);
    for (auto _ : state) {
        if (cached) {
            const auto w = cache.precompute_user_weights(2, 0, users.row(2));
            benchmark::DoNotOptimize(beam_search(model, vocab, *w, "ab", cfg));
        } else {
            benchmark::DoNotOptimize(beam_search(model, vocab, users, 2, "ab", cfg));
        }
    }
}
BENCHMARK(BM_BeamSearch)->ArgsProduct({{0, 1}, {10, 100}})->Unit(benchmark::kMillisecond);

void BM_MpcComplete(benchmark::State& state) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> ch('a', 'h'), len(3, 12);
    std::vector<std::string> queries;
    for (int i = 0; i < 200'000; ++i) {
        std::string q;
        for (int n = len(rng); n > 0; --n) q.push_back(static_cast<char>(ch(rng)));
        queries.push_back(q.substr(0, 3 + i % 5));
    }
    const auto index = MpcIndex::build(queries, 3);
    const std::vector<std::string> prefixes{"a", "ab", "abc", "hhg", "cdef"};
    std::size_t i = 0;
    for (auto _ : state) benchmark::DoNotOptimize(index.complete(prefixes[i++ % prefixes.size()], 10));
}
BENCHMARK(BM_MpcComplete);

}  // namespace

BENCHMARK_MAIN();
