#include "shiq/data.hpp"
#include "shiq/losses.hpp"
#include "shiq/oracle.hpp"

#include <benchmark/benchmark.h>

#include <numeric>

namespace {

using namespace shiq;

struct GridBatch {
    MdpPtr mdp = make_gridworld(GridConfig::fine_grained());
    LogitsModel ref = LogitsModel::linear(mdp);
    OracleSolution oracle = backward_induction(mdp, ref, 0.1);
    LossBatch batch;
    LogitTable ref_table = evaluate_logits(ref);

    GridBatch() {
        const Behavior good{"optimal", oracle.pi_star, 1.0};
        const Behavior bad{"uniform", PolicyTable::from_model(ref), 1.0};
        const OfflineDataset ds = generate_paired(mdp, good, bad, 2000, 7);
        batch.store = make_store(ds, mdp);
        batch.beta = 0.1;
        batch.pairs = ds.pairs;
        batch.trajectories.resize(ds.size());
        std::iota(batch.trajectories.begin(), batch.trajectories.end(), std::size_t{0});
    }
};

const GridBatch& grid() {
    static const GridBatch g;
    return g;
}

void loss(benchmark::State& state, LossId id, Execution exec) {
    const GridBatch& g = grid();
    LossOptions opt;
    opt.execution = exec;
    for (auto _ : state) benchmark::DoNotOptimize(evaluate_loss(id, g.ref, g.ref_table, g.batch, opt).value);
}

void induction(benchmark::State& state, Execution exec) {
    const GridBatch& g = grid();
    for (auto _ : state) benchmark::DoNotOptimize(backward_induction(g.mdp, g.ref, 0.1, exec).v_star.data());
}

} // namespace

BENCHMARK_CAPTURE(loss, shiq_serial, LossId::shiq, Execution::serial)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(loss, shiq_parallel, LossId::shiq, Execution::parallel)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(loss, shiq_tk_serial, LossId::shiq_tk, Execution::serial)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(loss, shiq_tk_parallel, LossId::shiq_tk, Execution::parallel)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(loss, copg_serial, LossId::copg, Execution::serial)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(loss, copg_parallel, LossId::copg, Execution::parallel)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(induction, serial, Execution::serial)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(induction, parallel, Execution::parallel)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
