// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "support.hpp"

#include "kmig/bench.hpp"
#include "kmig/injector.hpp"
#include "kmig/migration.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>

using namespace kmig;
using kmig::testing::Gen;

namespace {

// Time limits, seconds.
constexpr double kScenarioLimit = 1.0;
constexpr double kSweepLimit = 60.0;
constexpr double kScanLimit = 30.0;
constexpr int kRepeats = 10;
constexpr int kScanGuests = 120;
constexpr int kReachGuests = 60;
constexpr int kTransparencyGuests = 40;
constexpr int kLruGuests = 40;
constexpr double kMeanTolerance = 1e-9;

struct Outcome {
    bool pass = true;
    std::string detail;
    void fail(const std::string& why) {
        if (pass) {
            detail = why;
        }
        pass = false;
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

Region make_area(Vm& vm, std::uint64_t pages) {
    SyscallInjector inj;
    ScriptedProcess trigger(vm.state.processes.begin()->first, {ReadReq{0, 1}});
    const std::uint64_t len = pages * kPageSize;
    return Region{inj.allocate_protected_area(vm, trigger, len), len};
}

std::vector<GuestAddress> migratable(const Vm& vm, Gen& g, std::size_t n) {
    std::vector<GuestAddress> v;
    for (const auto& [path, d] : vm.state.dentry_cache) {
        if (!vm.state.is_on_lru(d)) {
            v.push_back(d);
        }
    }
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[g.below(i)]);
    }
    v.resize(std::min(n, v.size()));
    return v;
}

std::uint64_t replay(const AccessTrace& trace, const WatchSet& watched) {
    std::uint64_t n = 0;
    for (const auto& a : trace) {
        for (std::uint64_t p = a.addr.value / kPageSize; p <= (a.addr.value + a.length - 1) / kPageSize; ++p) {
            const auto it = watched.find(p);
            if (it != watched.end() && (a.kind == AccessKind::Read ? it->second.trap_read : it->second.trap_write)) {
                ++n;
            }
        }
    }
    return n;
}

Outcome dentry_effectiveness() {
    Outcome o;
    const auto t0 = Clock::now();
    const ScenarioOutcome s = run_dentry_scenario(ScenarioSpec{});
    const double dt = seconds_since(t0);
    if (!s.pass()) {
        for (const auto& c : s.checks) {
            if (!c.pass) {
                o.fail(c.name + ": " + c.detail);
            }
        }
    }
    const GuestAddress dest{s.values.at("dest")};
    std::uint64_t on_dest = 0;
    for (const auto& e : s.events) {
        on_dest += e.attributed.object && e.attributed.object->addr == dest;
    }
    if (s.values.at("d_count_before") != 1) {
        o.fail("d_count before migration " + std::to_string(s.values.at("d_count_before")));
    }
    if (on_dest < 1) {
        o.fail("no event attributed to the migrated dentry");
    }
    if (s.values.at("d_count_after") != 2) {
        o.fail("d_count after second open " + std::to_string(s.values.at("d_count_after")));
    }
    if (dt >= kScenarioLimit) {
        o.fail("took " + fmt(dt) + " s");
    }
    if (o.pass) {
        o.detail = std::to_string(on_dest) + " events on migrated dentry, d_count=2, " + fmt(dt) + " s";
    }
    return o;
}

Outcome fdt_effectiveness() {
    Outcome o;
    const auto t0 = Clock::now();
    const ScenarioOutcome s = run_fdt_scenario(ScenarioSpec{});
    const double dt = seconds_since(t0);
    if (s.values.at("fd_first") != 3) {
        o.fail("first fd " + std::to_string(s.values.at("fd_first")));
    }
    if (s.values.at("fd_second") != 4) {
        o.fail("second fd " + std::to_string(s.values.at("fd_second")));
    }
    const GuestAddress dest{s.values.at("dest")};
    if (s.events.size() != 1 || s.events[0].kind != AccessKind::Write || s.events[0].page != dest.page()) {
        o.fail(std::to_string(s.events.size()) + " events, want one write on the fdt page");
    }
    if (!s.pass()) {
        o.fail("scenario checks failed");
    }
    if (dt >= kScenarioLimit) {
        o.fail("took " + fmt(dt) + " s");
    }
    if (o.pass) {
        o.detail = "fd 3 then fd 4, one write event, " + fmt(dt) + " s";
    }
    return o;
}

struct Sweep {
    double seconds = 0;
    // (k, mode) -> per-repeat cells
    std::map<std::pair<std::uint64_t, Mode>, std::vector<CellResult>> cells;
    double mean(std::uint64_t k, Mode m) const {
        double sum = 0;
        for (const auto& c : cells.at({k, m})) {
            sum += c.row.events_total;
        }
        return sum / static_cast<double>(cells.at({k, m}).size());
    }
};

const std::vector<std::uint64_t> kKs{10, 50, 100, 150, 200, 250, 300, 350, 400};

Sweep run_sweep(const ScenarioSpec& spec) {
    Sweep s;
    const auto t0 = Clock::now();
    for (int r = 0; r < kRepeats; ++r) {
        for (std::uint64_t k : kKs) {
            for (Mode m : {Mode::Off, Mode::InPlace, Mode::Migrated}) {
                s.cells[{k, m}].push_back(run_cell(spec, m, k, r, true));
            }
        }
    }
    s.seconds = seconds_since(t0);
    return s;
}

Outcome sweep_ordering(const Sweep& sw, const ScenarioSpec& spec) {
    Outcome o;
    double prev_inplace = -1;
    for (std::uint64_t k : kKs) {
        const double off = sw.mean(k, Mode::Off);
        const double in = sw.mean(k, Mode::InPlace);
        const double mig = sw.mean(k, Mode::Migrated);
        if (off != 0) {
            o.fail("off events " + fmt(off) + " at k=" + std::to_string(k));
        }
        if (!(mig < in)) {
            o.fail("migrated " + fmt(mig) + " >= in-place " + fmt(in) + " at k=" + std::to_string(k));
        }
        if (in < prev_inplace) {
            o.fail("in-place drops at k=" + std::to_string(k));
        }
        prev_inplace = in;
        const auto small = monitored_files(spec, kKs.front(), 0);
        const auto big = monitored_files(spec, k, 0);
        if (!std::equal(small.begin(), small.end(), big.begin())) {
            o.fail("monitored sets not nested at k=" + std::to_string(k));
        }
    }
    // the library aggregation agrees with ours
    const SweepResult lib = sweep(spec, SweepOptions{kKs, kRepeats});
    for (const auto& row : lib.rows) {
        if (row.mode == Mode::Off) {
            continue;
        }
        if (std::abs(row.events_total - sw.mean(row.k, row.mode)) > kMeanTolerance) {
            o.fail("sweep mean differs at k=" + std::to_string(row.k) + " " + to_string(row.mode));
        }
    }
    if (sw.seconds >= kSweepLimit) {
        o.fail("sweep took " + fmt(sw.seconds) + " s");
    }
    if (o.pass) {
        o.detail = "k=400: in-place " + fmt(sw.mean(400, Mode::InPlace)) + ", migrated " +
                   fmt(sw.mean(400, Mode::Migrated)) + "; " + fmt(sw.seconds) + " s";
    }
    return o;
}

Outcome false_triggers(const Sweep& sw) {
    Outcome o;
    std::size_t cells = 0;
    for (const auto& [key, v] : sw.cells) {
        for (const auto& c : v) {
            ++cells;
            if (key.second == Mode::Migrated && c.row.events_false != 0) {
                o.fail("migrated false triggers at k=" + std::to_string(key.first));
            }
            if (key.second == Mode::InPlace && !(c.row.events_false > 0)) {
                o.fail("in-place without false triggers at k=" + std::to_string(key.first));
            }
        }
    }
    if (o.pass) {
        o.detail = std::to_string(cells) + " cells";
    }
    return o;
}

Outcome oracle_equivalence(const Sweep& sw) {
    Outcome o;
    std::size_t cells = 0;
    for (const auto& [key, v] : sw.cells) {
        for (const auto& c : v) {
            ++cells;
            const std::uint64_t want = replay(c.trace, c.watched);
            if (static_cast<double>(want) != c.row.events_total) {
                o.fail("k=" + std::to_string(key.first) + " " + to_string(key.second) + " repeat " +
                       std::to_string(c.row.repeat) + ": monitor " + fmt(c.row.events_total) + ", replay " +
                       std::to_string(want));
            }
        }
    }
    if (o.pass) {
        o.detail = std::to_string(cells) + " cells equal";
    }
    return o;
}

Outcome scan_oracle() {
    Outcome o;
    Gen g(1001);
    const auto t0 = Clock::now();
    std::uint64_t decoys_total = 0;
    for (int round = 0; round < kScanGuests && o.pass; ++round) {
        Vm vm = build_guest(kmig::testing::random_build(g));
        kmig::testing::churn(vm, g, 40);
        const auto picks = migratable(vm, g, 1);
        const GuestAddress src = picks.front();
        std::vector<std::pair<GuestAddress, std::uint64_t>> decoys;
        for (std::uint64_t i = 0, n = g.between(1, 4); i < n; ++i) {
            const std::uint64_t v = src.value + 8 * g.below(16);
            decoys.emplace_back(plant_decoy(vm.state, vm.image, v), v);
        }
        decoys_total += decoys.size();

        std::set<std::pair<std::uint64_t, std::uint64_t>> brute;
        for (std::uint64_t a = 0; a + 8 <= vm.image.size(); a += 8) {
            const std::uint64_t v = vm.image.peek_word(GuestAddress{a});
            if (v >= src.value && v < src.value + 128) {
                brute.emplace(a, v);
            }
        }
        std::set<std::pair<std::uint64_t, std::uint64_t>> scanned;
        for (const auto& h : scan_pointers(vm.image, vm.state.prof(), vm.state, src, ObjectKind::Dentry)) {
            scanned.emplace(h.slot.value, h.value.value);
        }
        if (scanned != brute) {
            o.fail("guest " + std::to_string(round) + ": scan " + std::to_string(scanned.size()) + " hits, brute force " +
                   std::to_string(brute.size()));
        }
        const Region area = make_area(vm, 1);
        migrate_dentry(vm.image, vm.state, src, area.start);
        for (const auto& [slot, v] : decoys) {
            if (vm.image.peek_word(slot) != v) {
                o.fail("guest " + std::to_string(round) + ": decoy at " + to_hex(slot) + " rewritten");
            }
        }
    }
    const double dt = seconds_since(t0);
    if (dt >= kScanLimit) {
        o.fail("took " + fmt(dt) + " s");
    }
    if (o.pass) {
        o.detail = std::to_string(kScanGuests) + " guests, " + std::to_string(decoys_total) + " decoys, " + fmt(dt) + " s";
    }
    return o;
}

Outcome reachability() {
    Outcome o;
    Gen g(1002);
    std::uint64_t migrated = 0;
    for (int round = 0; round < kReachGuests && o.pass; ++round) {
        Vm vm = build_guest(kmig::testing::random_build(g));
        kmig::testing::churn(vm, g, 50);
        const auto sources = migratable(vm, g, g.between(1, 32));
        const Region area = make_area(vm, 1);
        const auto pre = ground_truth_pointers(vm.state, vm.image);
        const auto reports = migrate_batch(vm.image, vm.state, sources, area);
        migrated += sources.size();
        auto relocate = [&](GuestAddress a) {
            for (std::size_t i = 0; i < sources.size(); ++i) {
                if (a.within(sources[i], 128)) {
                    return reports[i].dest + (a - sources[i]);
                }
            }
            return a;
        };
        for (const auto& s : pre) {
            const GuestAddress want = relocate(s.value);
            if (want != s.value && vm.image.peek_word(relocate(s.slot)) != want.value) {
                o.fail("guest " + std::to_string(round) + ": path through " + to_hex(s.slot) + " does not reach " +
                       to_hex(want));
            }
        }
        const std::set<GuestAddress> parked(sources.begin(), sources.end());
        for (const auto& s : ground_truth_pointers(vm.state, vm.image)) {
            const auto owner = vm.state.object_at(s.slot);
            const bool lru_structure = owner ? parked.contains(owner->addr)
                                             : (s.slot == vm.state.layout.lru_head || s.slot == vm.state.layout.lru_head + 8);
            if (lru_structure) {
                continue;
            }
            for (auto src : sources) {
                if (s.value.within(src, 128)) {
                    o.fail("guest " + std::to_string(round) + ": live slot " + to_hex(s.slot) + " still holds " +
                           to_hex(s.value));
                }
            }
        }
        for (std::size_t i = 0; i < sources.size(); ++i) {
            const auto it = vm.state.dentry_paths.find(reports[i].dest);
            if (it != vm.state.dentry_paths.end() && lookup_dentry(vm.state, vm.image, it->second) != reports[i].dest) {
                o.fail("lookup of " + it->second + " misses the destination");
            }
        }
        if (const auto broken = check_invariants(vm.state, vm.image); !broken.empty()) {
            o.fail("guest " + std::to_string(round) + ": " + broken.front());
        }
    }
    if (o.pass) {
        o.detail = std::to_string(kReachGuests) + " guests, " + std::to_string(migrated) + " dentries moved";
    }
    return o;
}

std::string diff_outside(const Vm& injected, const Vm& plain, const Region& region) {
    const auto a = injected.image.bytes();
    const auto b = plain.image.bytes();
    for (std::uint64_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i] && !region.contains(GuestAddress{i})) {
            return "byte " + to_hex(GuestAddress{i}) + " differs";
        }
    }
    auto regions = injected.image.regions();
    regions.erase(region.start.value);
    if (regions != plain.image.regions()) {
        return "region map differs";
    }
    for (std::uint64_t p = 0; p < injected.image.page_count(); ++p) {
        if (!(injected.image.flags(p) == plain.image.flags(p))) {
            return "flags differ on page " + std::to_string(p);
        }
    }
    GuestState s = injected.state;
    std::erase_if(s.protected_areas, [&](const Region& r) { return r.start == region.start; });
    if (!(s == plain.state)) {
        return "guest bookkeeping differs";
    }
    return {};
}

Outcome transparency_and_capacity() {
    Outcome o;
    Gen g(1003);
    for (int round = 0; round < kTransparencyGuests && o.pass; ++round) {
        Vm vm = build_guest(kmig::testing::random_build(g));
        kmig::testing::churn(vm, g, 30);
        const Pid pid = 1 + static_cast<Pid>(g.below(vm.state.processes.size()));
        std::vector<SyscallRequest> script;
        switch (g.below(5)) {
        case 0: script.push_back(OpenReq{file_name(g.below(vm.state.files.size()))}); break;
        case 1: script.push_back(OpenReq{"fresh_" + std::to_string(round), true}); break;
        case 2: script.push_back(ReadReq{static_cast<int>(g.below(6)), 32}); break;
        case 3: script.push_back(WriteReq{static_cast<int>(g.below(6)), 32}); break;
        default: script.push_back(CloseReq{static_cast<int>(g.below(6))}); break;
        }
        Vm plain = vm.clone();
        ScriptedProcess plain_guest(pid, script);
        plain_guest.step(plain);
        const std::uint64_t len = g.between(1, 40) * kPageSize;
        SyscallInjector inj;
        ScriptedProcess guest(pid, script);
        const GuestAddress at = inj.allocate_protected_area(vm, guest, len);
        if (guest.results() != plain_guest.results()) {
            o.fail("guest " + std::to_string(round) + ": original syscall result changed");
        }
        if (const auto d = diff_outside(vm, plain, Region{at, len}); !d.empty()) {
            o.fail("guest " + std::to_string(round) + ": " + d);
        }
    }

    Vm vm = build_guest(BuildSpec{.num_files = 400, .num_processes = 2, .seed = 1});
    const Region area = make_area(vm, 32);
    std::vector<GuestAddress> all;
    for (const auto& [p, d] : vm.state.dentry_cache) {
        all.push_back(d);
    }
    const auto reports = migrate_batch(vm.image, vm.state, all, area);
    std::uint64_t top = 0;
    for (const auto& r : reports) {
        top = std::max(top, r.dest.value + 128 - area.start.value);
    }
    const std::uint64_t pages = (top + kPageSize - 1) / kPageSize;
    if (reports.size() != 400 || pages > 32 || top > 128 * 1024 || area.length > 128 * 1024) {
        o.fail("400 dentries need " + std::to_string(pages) + " pages");
    }
    if (o.pass) {
        o.detail = std::to_string(kTransparencyGuests) + " injections clean; 400 dentries use " + std::to_string(top) +
                   " bytes in " + std::to_string(pages) + " of 32 pages";
    }
    return o;
}

Outcome lru_release() {
    Outcome o;
    Gen g(1004);
    std::uint64_t freed = 0;
    for (int round = 0; round < kLruGuests && o.pass; ++round) {
        Vm vm = build_guest(kmig::testing::random_build(g));
        kmig::testing::churn(vm, g, 40);
        const auto sources = migratable(vm, g, g.between(1, 20));
        const Region area = make_area(vm, 1);
        migrate_batch(vm.image, vm.state, sources, area);
        const GuestAddress held = sources[g.below(sources.size())];
        vm.image.write_word(AccessContext::hypervisor(), held, 1);
        const std::uint64_t n = reclaim_lru(vm.state, vm.image);
        freed += n;
        if (n != sources.size() - 1) {
            o.fail("guest " + std::to_string(round) + ": reclaimed " + std::to_string(n));
        }
        for (auto s : sources) {
            const bool live = vm.state.object_starting_at(s).has_value();
            if (s == held) {
                if (!live) {
                    o.fail("object with nonzero count was freed");
                }
                continue;
            }
            if (live) {
                o.fail("zero-count object " + to_hex(s) + " survived");
            }
            for (std::uint64_t off = 0; off < 128; off += 8) {
                if (vm.image.peek_word(s + off) != 0) {
                    o.fail("freed object " + to_hex(s) + " not zeroed");
                }
            }
        }
        const auto lru = lru_entries(vm.state, vm.image);
        if (lru != std::vector<GuestAddress>{held}) {
            o.fail("LRU holds " + std::to_string(lru.size()) + " entries after reclaim");
        }
        if (const auto broken = check_invariants(vm.state, vm.image); !broken.empty()) {
            o.fail(broken.front());
        }
    }
    if (o.pass) {
        o.detail = std::to_string(kLruGuests) + " guests, " + std::to_string(freed) + " objects freed";
    }
    return o;
}

} // namespace

int main() {
    ScenarioSpec spec;
    spec.guest.num_files = 400;
    spec.guest.interleave = true;

    int failures = 0;
    auto report = [&](int n, const char* name, const std::function<Outcome()>& f) {
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o.fail(std::string("exception: ") + e.what());
        }
        failures += !o.pass;
        std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "dentry effectiveness", dentry_effectiveness);
    report(2, "fdt effectiveness", fdt_effectiveness);
    Sweep sw;
    try {
        sw = run_sweep(spec);
    } catch (const std::exception& e) {
        std::printf("sweep aborted: %s\n", e.what());
    }
    report(3, "sweep ordering", [&] { return sweep_ordering(sw, spec); });
    report(4, "false-trigger elimination", [&] { return false_triggers(sw); });
    report(5, "monitor equals replay oracle", [&] { return oracle_equivalence(sw); });
    report(6, "pointer scan equals brute force", scan_oracle);
    report(7, "reachability after batch migration", reachability);
    report(8, "injection transparency and capacity", transparency_and_capacity);
    report(9, "LRU release", lru_release);
    return failures == 0 ? 0 : 1;
}
