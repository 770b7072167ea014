#pragma once

#include "kmig/guest.hpp"
#include "kmig/memory.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace kmig::testing {

// Small seeded generator for property tests.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    std::uint64_t u64() { return rng_(); }
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : rng_() % n; }
    std::uint64_t between(std::uint64_t lo, std::uint64_t hi) { return lo + below(hi - lo + 1); }
    bool coin(double p = 0.5) { return static_cast<double>(rng_() >> 11) * 0x1.0p-53 < p; }
    template <typename T>
    const T& pick(const std::vector<T>& v) {
        return v[below(v.size())];
    }

private:
    std::mt19937_64 rng_;
};

struct Trap {
    std::uint64_t page;
    std::uint16_t offset;
    AccessKind kind;
    Pid pid;
};

// Collects trap notices delivered by an image.
struct TrapLog {
    std::vector<Trap> traps;
    void attach(MemoryImage& image) {
        image.set_trap_handler([this](const TrapNotice& n) { traps.push_back({n.page, n.offset, n.kind, n.pid}); });
    }
};

inline BuildSpec random_build(Gen& g) {
    BuildSpec b;
    b.num_files = g.between(1, 90);
    b.num_processes = static_cast<std::uint32_t>(g.between(1, 4));
    b.interleave = g.coin(0.7);
    b.seed = g.u64();
    b.image_size = 4ull << 20;
    return b;
}

// Drives random opens, reads, writes and closes so the guest has open files,
// shared dentries and freshly created names.
inline void churn(Vm& vm, Gen& g, int steps) {
    std::vector<std::pair<Pid, int>> open;
    std::vector<std::string> names(vm.state.files.begin(), vm.state.files.end());
    std::vector<Pid> pids;
    for (const auto& [pid, task] : vm.state.processes) {
        pids.push_back(pid);
    }
    for (int i = 0; i < steps; ++i) {
        const auto roll = g.below(10);
        if (roll < 4 || open.empty()) {
            const Pid pid = g.pick(pids);
            const std::string path = g.coin(0.15) ? "extra_" + std::to_string(g.below(20)) + ".txt" : g.pick(names);
            const auto r = vm.syscall(pid, OpenReq{path, true});
            if (r.ok()) {
                open.emplace_back(pid, static_cast<int>(r.value));
            }
        } else if (roll < 8) {
            const auto [pid, fd] = g.pick(open);
            vm.syscall(pid, g.coin() ? SyscallRequest{ReadReq{fd, 64}} : SyscallRequest{WriteReq{fd, 64}});
        } else {
            const auto at = g.below(open.size());
            vm.syscall(open[at].first, CloseReq{open[at].second});
            open.erase(open.begin() + static_cast<std::ptrdiff_t>(at));
        }
    }
}

} // namespace kmig::testing
