#include "kmig/bench.hpp"
#include "kmig/injector.hpp"
#include "kmig/migration.hpp"

#include <benchmark/benchmark.h>

using namespace kmig;

namespace {

Region make_area(Vm& vm, std::uint64_t pages) {
    SyscallInjector inj;
    ScriptedProcess trigger(vm.state.processes.begin()->first, {ReadReq{0, 1}});
    return Region{inj.allocate_protected_area(vm, trigger, pages * kPageSize), pages * kPageSize};
}

void BM_BuildGuest(benchmark::State& st) {
    const auto n = static_cast<std::uint64_t>(st.range(0));
    for (auto _ : st) {
        Vm vm = build_guest(BuildSpec{.num_files = n, .num_processes = 2});
        benchmark::DoNotOptimize(vm.state.objects.size());
    }
}
BENCHMARK(BM_BuildGuest)->Arg(100)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_ScanPointers(benchmark::State& st) {
    Vm vm = build_guest(BuildSpec{.num_files = static_cast<std::uint64_t>(st.range(0)), .num_processes = 2});
    const GuestAddress src = vm.state.dentry_cache.begin()->second;
    for (auto _ : st) {
        auto hits = scan_pointers(vm.image, vm.state.prof(), vm.state, src, ObjectKind::Dentry);
        benchmark::DoNotOptimize(hits.data());
    }
}
BENCHMARK(BM_ScanPointers)->Arg(100)->Arg(400)->Unit(benchmark::kMicrosecond);

void BM_MigrateBatch(benchmark::State& st) {
    const auto k = static_cast<std::size_t>(st.range(0));
    Vm base = build_guest(BuildSpec{.num_files = 400, .num_processes = 2});
    const Region area = make_area(base, 32);
    std::vector<GuestAddress> sources;
    for (const auto& [p, d] : base.state.dentry_cache) {
        if (sources.size() < k) {
            sources.push_back(d);
        }
    }
    for (auto _ : st) {
        st.PauseTiming();
        Vm vm = base.clone();
        st.ResumeTiming();
        auto reports = migrate_batch(vm.image, vm.state, sources, area);
        benchmark::DoNotOptimize(reports.data());
    }
    st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * k));
}
BENCHMARK(BM_MigrateBatch)->Arg(10)->Arg(100)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_Cell(benchmark::State& st) {
    const Mode mode = static_cast<Mode>(st.range(0));
    ScenarioSpec spec;
    for (auto _ : st) {
        auto c = run_cell(spec, mode, 100, 0);
        benchmark::DoNotOptimize(c.row.events_total);
    }
    st.SetLabel(to_string(mode));
}
BENCHMARK(BM_Cell)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
