#include "kmig/bench.hpp"

#include "kmig/error.hpp"
#include "kmig/injector.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace kmig {

namespace {

using nlohmann::json;

std::string num(double v) {
    if (std::isfinite(v) && v == std::floor(v) && std::fabs(v) < 9e15) {
        return std::to_string(static_cast<long long>(v));
    }
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) {
        throw ConfigError(where + " must be a JSON object");
    }
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.contains(key)) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
void read_key(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) {
        return;
    }
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

std::uint64_t read_address(const json& obj, const char* key, std::uint64_t fallback) {
    if (!obj.contains(key)) {
        return fallback;
    }
    const json& v = obj.at(key);
    if (v.is_number_unsigned()) {
        return v.get<std::uint64_t>();
    }
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        std::uint64_t out = 0;
        const bool hex = s.starts_with("0x") || s.starts_with("0X");
        const char* first = s.data() + (hex ? 2 : 0);
        auto [p, ec] = std::from_chars(first, s.data() + s.size(), out, hex ? 16 : 10);
        if (ec == std::errc{} && p == s.data() + s.size() && first != p) {
            return out;
        }
    }
    throw ConfigError(std::string("bad address for '") + key + "'");
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::set<std::uint64_t> pages_of(GuestAddress addr, std::uint64_t len) {
    std::set<std::uint64_t> out;
    for (std::uint64_t p = addr.page(); p <= (addr + (len - 1)).page(); ++p) {
        out.insert(p);
    }
    return out;
}

Pid first_pid(const GuestState& st) {
    if (st.processes.empty()) {
        throw StateError("guest has no processes");
    }
    return st.processes.begin()->first;
}

void check(ScenarioOutcome& out, std::string name, bool pass, std::string detail) {
    out.checks.push_back({std::move(name), pass, std::move(detail)});
}

BenchRow mean_row(const std::vector<BenchRow>& cells, std::uint64_t k, Mode mode, const CostModel& cost) {
    BenchRow r{k, mode, -1, 0, 0, 0, 0};
    for (const auto& c : cells) {
        r.events_total += c.events_total;
        r.events_false += c.events_false;
        r.protected_pages = std::max(r.protected_pages, c.protected_pages);
    }
    if (!cells.empty()) {
        r.events_total /= static_cast<double>(cells.size());
        r.events_false /= static_cast<double>(cells.size());
    }
    r.modeled_time = cost.t_base + cost.c_event * r.events_total;
    return r;
}

json row_json(const BenchRow& r) {
    json j{{"k", r.k},
           {"mode", to_string(r.mode)},
           {"events_total", r.events_total},
           {"events_false", r.events_false},
           {"modeled_time", r.modeled_time},
           {"pages_used", r.protected_pages}};
    if (r.repeat < 0) {
        j["repeat"] = "mean";
    } else {
        j["repeat"] = r.repeat;
    }
    return j;
}

} // namespace

const char* to_string(Mode m) {
    switch (m) {
    case Mode::Off: return "off";
    case Mode::InPlace: return "in-place";
    case Mode::Migrated: return "migrated";
    }
    return "?";
}

Mode mode_from_string(std::string_view s) {
    if (s == "off") {
        return Mode::Off;
    }
    if (s == "in-place" || s == "inplace" || s == "in_place") {
        return Mode::InPlace;
    }
    if (s == "migrated") {
        return Mode::Migrated;
    }
    throw ConfigError("unknown mode '" + std::string(s) + "' (expected off, in-place or migrated)");
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
    // splitmix64 over the pair
    std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

ScenarioSpec parse_scenario_spec(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("spec is not valid JSON: ") + e.what());
    }
    check_keys(doc,
               {"num_files", "num_processes", "interleave", "seed", "reclaim_period", "image_size", "k", "mode",
                "workload", "cost", "protected_base", "protected_pages", "watch"},
               "spec");
    ScenarioSpec spec;
    read_key(doc, "num_files", spec.guest.num_files);
    read_key(doc, "num_processes", spec.guest.num_processes);
    read_key(doc, "interleave", spec.guest.interleave);
    read_key(doc, "seed", spec.guest.seed);
    read_key(doc, "reclaim_period", spec.guest.reclaim_period);
    read_key(doc, "image_size", spec.guest.image_size);
    read_key(doc, "k", spec.k);
    if (doc.contains("mode")) {
        std::string m;
        read_key(doc, "mode", m);
        spec.mode = mode_from_string(m);
    }
    spec.workload.seed = spec.guest.seed;
    if (doc.contains("workload")) {
        const json& w = doc.at("workload");
        check_keys(w, {"ops_per_file", "passes", "create_ratio", "stdout_writes", "distribution", "zipf_s", "seed"},
                   "workload");
        read_key(w, "ops_per_file", spec.workload.ops_per_file);
        read_key(w, "passes", spec.workload.passes);
        read_key(w, "create_ratio", spec.workload.create_ratio);
        read_key(w, "stdout_writes", spec.workload.stdout_writes);
        read_key(w, "zipf_s", spec.workload.zipf_s);
        read_key(w, "seed", spec.workload.seed);
        if (w.contains("distribution")) {
            std::string d;
            read_key(w, "distribution", d);
            if (d == "uniform") {
                spec.workload.distribution = Distribution::Uniform;
            } else if (d == "zipf") {
                spec.workload.distribution = Distribution::Zipf;
            } else {
                throw ConfigError("unknown distribution '" + d + "' (expected uniform or zipf)");
            }
        }
    }
    if (doc.contains("cost")) {
        const json& c = doc.at("cost");
        check_keys(c, {"t_base", "c_event"}, "cost");
        read_key(c, "t_base", spec.cost.t_base);
        read_key(c, "c_event", spec.cost.c_event);
    }
    spec.protected_base = GuestAddress{read_address(doc, "protected_base", spec.protected_base.value)};
    read_key(doc, "protected_pages", spec.protected_pages);
    if (doc.contains("watch")) {
        std::string w;
        read_key(doc, "watch", w);
        if (w != "r" && w != "w" && w != "rw") {
            throw ConfigError("watch must be r, w or rw");
        }
        spec.watch_read = w.find('r') != std::string::npos;
        spec.watch_write = w.find('w') != std::string::npos;
    }

    if (spec.guest.num_files == 0 || spec.guest.num_processes == 0) {
        throw ConfigError("num_files and num_processes must be positive");
    }
    if (spec.k > spec.guest.num_files) {
        throw ConfigError("k exceeds num_files");
    }
    if (spec.workload.create_ratio < 0 || spec.workload.create_ratio > 1) {
        throw ConfigError("create_ratio must be within [0, 1]");
    }
    if (spec.protected_pages == 0 || !spec.protected_base.page_aligned()) {
        throw ConfigError("protected area needs a page-aligned base and at least one page");
    }
    if (spec.guest.image_size == 0 || spec.guest.image_size % kPageSize != 0) {
        throw ConfigError("image_size must be a positive multiple of the page size");
    }
    return spec;
}

ScenarioSpec load_scenario_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read spec file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scenario_spec(ss.str());
}

std::string to_json(const ScenarioSpec& spec) {
    const std::string watch = std::string(spec.watch_read ? "r" : "") + (spec.watch_write ? "w" : "");
    json doc{{"num_files", spec.guest.num_files},
             {"num_processes", spec.guest.num_processes},
             {"interleave", spec.guest.interleave},
             {"seed", spec.guest.seed},
             {"reclaim_period", spec.guest.reclaim_period},
             {"image_size", spec.guest.image_size},
             {"k", spec.k},
             {"mode", to_string(spec.mode)},
             {"workload",
              {{"ops_per_file", spec.workload.ops_per_file},
               {"passes", spec.workload.passes},
               {"create_ratio", spec.workload.create_ratio},
               {"stdout_writes", spec.workload.stdout_writes},
               {"distribution", spec.workload.distribution == Distribution::Zipf ? "zipf" : "uniform"},
               {"zipf_s", spec.workload.zipf_s},
               {"seed", spec.workload.seed}}},
             {"cost", {{"t_base", spec.cost.t_base}, {"c_event", spec.cost.c_event}}},
             {"protected_base", to_hex(spec.protected_base)},
             {"protected_pages", spec.protected_pages},
             {"watch", watch}};
    return doc.dump(2);
}

void apply_env_overrides(ScenarioSpec& spec) {
    const char* raw = std::getenv("KMIG_SEED");
    if (raw == nullptr || *raw == '\0') {
        return;
    }
    std::uint64_t seed = 0;
    const std::string_view s(raw);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw ConfigError("KMIG_SEED must be an unsigned integer");
    }
    spec.guest.seed = seed;
    spec.workload.seed = seed;
}

WorkloadStats run_extract_workload(Vm& vm, const WorkloadSpec& spec) {
    WorkloadStats stats;
    std::mt19937_64 rng(spec.seed);
    const std::vector<std::string> paths(vm.state.files.begin(), vm.state.files.end());
    std::vector<Pid> pids;
    for (const auto& [pid, task] : vm.state.processes) {
        pids.push_back(pid);
    }
    if (pids.empty() || paths.empty()) {
        return stats;
    }

    std::vector<double> cdf;
    std::vector<std::size_t> rank;
    if (spec.distribution == Distribution::Zipf) {
        rank.resize(paths.size());
        std::iota(rank.begin(), rank.end(), 0);
        for (std::size_t i = rank.size(); i > 1; --i) {
            std::swap(rank[i - 1], rank[rng() % i]);
        }
        double acc = 0;
        for (std::size_t i = 0; i < paths.size(); ++i) {
            acc += 1.0 / std::pow(static_cast<double>(i + 1), spec.zipf_s);
            cdf.push_back(acc);
        }
        for (auto& c : cdf) {
            c /= acc;
        }
    }

    auto call = [&](Pid pid, const SyscallRequest& req) {
        const SyscallResult r = vm.syscall(pid, req);
        ++stats.syscalls;
        if (!r.ok()) {
            ++stats.failed;
        }
        if (stats.syscalls % vm.state.reclaim_period == 0) {
            stats.reclaimed += reclaim_lru(vm.state, vm.image);
        }
        return r;
    };
    auto visit = [&](Pid pid, const std::string& path, std::uint64_t ops) {
        const SyscallResult o = call(pid, OpenReq{path, true});
        if (!o.ok()) {
            return;
        }
        const int fd = static_cast<int>(o.value);
        for (std::uint64_t i = 0; i < ops; ++i) {
            if (rng() & 1) {
                call(pid, ReadReq{fd, 512});
            } else {
                call(pid, WriteReq{fd, 512});
            }
        }
        call(pid, CloseReq{fd});
    };

    std::uint64_t created = 0;
    for (std::uint64_t pass = 0; pass < spec.passes; ++pass) {
        std::vector<std::size_t> order(paths.size());
        if (spec.distribution == Distribution::Uniform) {
            std::iota(order.begin(), order.end(), 0);
            for (std::size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[rng() % i]);
            }
        } else {
            for (auto& o : order) {
                const double u = uniform01(rng);
                const auto at = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
                o = rank[std::min(at, rank.size() - 1)];
            }
        }
        for (std::size_t idx : order) {
            const Pid pid = pids[rng() % pids.size()];
            visit(pid, paths[idx], spec.ops_per_file);
            if (spec.stdout_writes) {
                call(pid, WriteReq{1, 64});
            }
            if (spec.create_ratio > 0 && uniform01(rng) < spec.create_ratio) {
                char name[32];
                std::snprintf(name, sizeof name, "new_%06llu.txt", static_cast<unsigned long long>(created++));
                visit(pid, name, 1);
                ++stats.created;
            }
        }
    }
    return stats;
}

std::uint64_t oracle_count(const AccessTrace& trace, const WatchSet& watched) {
    if (watched.empty()) {
        return 0;
    }
    std::uint64_t n = 0;
    for (const auto& a : trace) {
        if (a.length == 0) {
            continue;
        }
        const std::uint64_t first = a.addr.value / kPageSize;
        const std::uint64_t last = (a.addr.value + a.length - 1) / kPageSize;
        for (std::uint64_t p = first; p <= last; ++p) {
            auto it = watched.find(p);
            if (it != watched.end() && it->second.traps(a.kind)) {
                ++n;
            }
        }
    }
    return n;
}

OverheadReport overhead_report(const Region& area, const std::vector<MigrationReport>& reports) {
    OverheadReport r;
    for (const auto& m : reports) {
        r.bytes_used += default_profile().size(m.kind);
    }
    r.pages_used = pages_for(r.bytes_used);
    r.fits = r.bytes_used <= area.reserved_bytes();
    return r;
}

std::vector<std::string> monitored_files(const ScenarioSpec& spec, std::uint64_t k, int repeat) {
    if (k > spec.guest.num_files) {
        throw ConfigError("k = " + std::to_string(k) + " exceeds num_files = " + std::to_string(spec.guest.num_files));
    }
    std::vector<std::uint64_t> idx(spec.guest.num_files);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(derive_seed(spec.guest.seed, 0x6d6f6e00ull + static_cast<std::uint64_t>(repeat)));
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[rng() % i]);
    }
    std::vector<std::string> out;
    for (std::uint64_t i = 0; i < k; ++i) {
        out.push_back(file_name(idx[i]));
    }
    return out;
}

CellResult run_cell(const ScenarioSpec& spec, Mode mode, std::uint64_t k, int repeat, bool keep_trace) {
    BuildSpec b = spec.guest;
    b.seed = derive_seed(spec.guest.seed, static_cast<std::uint64_t>(repeat));
    Vm vm = build_guest(b);

    CellResult out;
    out.row = BenchRow{k, mode, repeat, 0, 0, 0, 0};
    if (mode != Mode::Off) {
        out.monitored_paths = monitored_files(spec, k, repeat);
    }
    std::vector<GuestAddress> sources;
    for (const auto& p : out.monitored_paths) {
        sources.push_back(*vm.state.dentry_for(p));
    }

    PageMonitor monitor(vm.state);
    std::set<std::uint64_t> pages;
    const std::uint64_t dsize = vm.state.prof().size(ObjectKind::Dentry);
    if (mode == Mode::Migrated) {
        SyscallInjector injector(InjectorConfig{spec.protected_base});
        ScriptedProcess trigger(first_pid(vm.state), {ReadReq{0, 1}});
        const std::uint64_t len = spec.protected_pages * kPageSize;
        const GuestAddress start = injector.allocate_protected_area(vm, trigger, len);
        const Region area{start, len};
        const auto reports = migrate_batch(vm.image, vm.state, sources, area);
        reclaim_lru(vm.state, vm.image);
        for (const auto& r : reports) {
            out.monitored_objects.push_back(r.dest);
        }
        pages = pages_of(area.start, area.length);
        out.row.protected_pages = overhead_report(area, reports).pages_used;
    } else if (mode == Mode::InPlace) {
        out.monitored_objects = sources;
        for (auto s : sources) {
            pages.merge(pages_of(s, dsize));
        }
    }
    monitor.set_monitored({out.monitored_objects.begin(), out.monitored_objects.end()});
    if (!pages.empty()) {
        monitor.register_watch(vm.image, pages, spec.watch_read, spec.watch_write);
    }
    for (auto p : vm.image.trapped_pages()) {
        out.watched[p] = vm.image.flags(p);
    }

    AccessTrace trace;
    vm.image.set_access_tracer([&trace](const AccessRecord& a) { trace.push_back(a); });
    monitor.attach(vm.image);
    WorkloadSpec w = spec.workload;
    w.seed = derive_seed(spec.workload.seed, static_cast<std::uint64_t>(repeat));
    out.workload = run_extract_workload(vm, w);
    monitor.detach(vm.image);
    vm.image.set_access_tracer(nullptr);

    out.counts = monitor.counts();
    out.oracle_events = oracle_count(trace, out.watched);
    out.row.events_total = static_cast<double>(out.counts.total);
    out.row.events_false = static_cast<double>(out.counts.false_triggers());
    out.row.modeled_time = spec.cost.t_base + spec.cost.c_event * out.row.events_total;
    if (keep_trace) {
        out.trace = std::move(trace);
    }
    return out;
}

SweepResult sweep(const ScenarioSpec& spec, const SweepOptions& opts) {
    if (opts.repeats < 1) {
        throw ConfigError("repeats must be at least 1");
    }
    SweepResult res;
    auto run = [&](Mode mode, std::uint64_t k) {
        std::vector<BenchRow> cells;
        for (int r = 0; r < opts.repeats; ++r) {
            CellResult c = run_cell(spec, mode, k, r);
            if (c.oracle_events != c.counts.total) {
                res.oracle_match = false;
                res.mismatches.push_back(std::string(to_string(mode)) + " k=" + std::to_string(k) + " repeat " +
                                         std::to_string(r) + ": monitor " + std::to_string(c.counts.total) +
                                         ", oracle " + std::to_string(c.oracle_events));
            }
            cells.push_back(c.row);
            res.per_repeat.push_back(c.row);
        }
        res.rows.push_back(mean_row(cells, k, mode, spec.cost));
    };
    run(Mode::Off, 0);
    for (auto k : opts.ks) {
        run(Mode::InPlace, k);
        run(Mode::Migrated, k);
    }
    return res;
}

std::string SweepResult::to_csv(bool include_per_repeat) const {
    std::string out = "k,mode,repeat,events_total,events_false,modeled_time,pages_used\n";
    auto line = [&](const BenchRow& r) {
        out += std::to_string(r.k) + ',' + to_string(r.mode) + ',' + (r.repeat < 0 ? "mean" : std::to_string(r.repeat)) +
               ',' + num(r.events_total) + ',' + num(r.events_false) + ',' + num(r.modeled_time) + ',' +
               std::to_string(r.protected_pages) + '\n';
    };
    for (const auto& r : rows) {
        line(r);
    }
    if (include_per_repeat) {
        for (const auto& r : per_repeat) {
            line(r);
        }
    }
    return out;
}

std::string SweepResult::to_json() const {
    json rj = json::array();
    for (const auto& r : rows) {
        rj.push_back(row_json(r));
    }
    json pj = json::array();
    for (const auto& r : per_repeat) {
        pj.push_back(row_json(r));
    }
    return json{{"rows", rj}, {"per_repeat", pj}, {"oracle_match", oracle_match}, {"mismatches", mismatches}}.dump(2);
}

bool ScenarioOutcome::pass() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const ScenarioCheck& c) { return c.pass; });
}

std::string ScenarioOutcome::to_json() const {
    json cj = json::array();
    for (const auto& c : checks) {
        cj.push_back({{"check", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    }
    json ev = json::array();
    for (const auto& e : events) {
        json j{{"seq", e.seq},
               {"page", e.page},
               {"offset", e.offset},
               {"kind", to_string(e.kind)},
               {"pid", e.pid},
               {"class", to_string(e.attributed.cls)}};
        if (e.attributed.object) {
            j["object"] = {{"kind", to_string(e.attributed.object->kind)}, {"addr", to_hex(e.attributed.object->addr)}};
        }
        ev.push_back(j);
    }
    json doc{{"case", name}, {"pass", pass()}, {"checks", cj}, {"events", ev}, {"values", values}};
    if (report) {
        doc["migration"] = json::parse(report->to_json());
    }
    return doc.dump(2);
}

ScenarioOutcome run_dentry_scenario(const ScenarioSpec& spec) {
    ScenarioOutcome out;
    out.name = "dentry";
    BuildSpec b = spec.guest;
    b.num_processes = std::max<std::uint32_t>(b.num_processes, 2);
    Vm vm = build_guest(b);
    auto pid_it = vm.state.processes.begin();
    const Pid p1 = (pid_it++)->first;
    const Pid p2 = pid_it->first;

    const SyscallResult first = vm.syscall(p1, OpenReq{"test.txt", true});
    check(out, "first open succeeds", first.ok(), describe(first));
    const GuestAddress src = vm.state.dentry_for("test.txt").value_or(kNullAddress);
    const std::uint64_t count_before = src.is_null() ? 0 : dentry_count(vm.state, vm.image, src);
    out.values["d_count_before"] = count_before;
    check(out, "reference count is 1 after the first open", count_before == 1, std::to_string(count_before));

    SyscallInjector injector(InjectorConfig{spec.protected_base});
    ScriptedProcess trigger(p1, {ReadReq{static_cast<int>(first.value), 1}});
    const std::uint64_t len = spec.protected_pages * kPageSize;
    const GuestAddress start = injector.allocate_protected_area(vm, trigger, len);
    const Region area{start, len};
    check(out, "triggering read still completed", trigger.results().size() == 1 && trigger.results()[0].ok(),
          trigger.results().empty() ? "no result" : describe(trigger.results()[0]));

    // guest paused from here until the second open
    MigrationReport report = migrate_dentry(vm.image, vm.state, src, area.start);
    const GuestAddress dest = report.dest;
    out.values["dest"] = dest.value;
    out.values["rewritten"] = report.rewritten.size();
    const auto broken = check_invariants(vm.state, vm.image);
    check(out, "kernel structures consistent after migration", broken.empty(), broken.empty() ? "" : broken.front());
    check(out, "hash lookup reaches the migrated copy", lookup_dentry(vm.state, vm.image, "test.txt") == dest,
          to_hex(dest));
    out.report = std::move(report);

    PageMonitor monitor(vm.state);
    monitor.set_monitored({dest});
    monitor.register_watch(vm.image, pages_of(area.start, area.length), spec.watch_read, spec.watch_write);
    monitor.attach(vm.image);
    const SyscallResult second = vm.syscall(p2, OpenReq{"test.txt", true});
    monitor.detach(vm.image);
    check(out, "second open succeeds", second.ok(), describe(second));

    out.events = monitor.events();
    std::uint64_t on_dest = 0;
    bool all_protected = true;
    for (const auto& e : out.events) {
        if (e.attributed.object && e.attributed.object->addr == dest) {
            ++on_dest;
        }
        all_protected = all_protected && area.contains(e.address());
    }
    out.values["events"] = out.events.size();
    out.values["events_on_migrated_dentry"] = on_dest;
    check(out, "second open traps on the migrated dentry", on_dest >= 1, std::to_string(on_dest) + " events");
    check(out, "every event lies in the protected area", all_protected, "");
    const std::uint64_t count_after = dentry_count(vm.state, vm.image, dest);
    out.values["d_count_after"] = count_after;
    check(out, "reference count is 2 after the second open", count_after == 2, std::to_string(count_after));
    return out;
}

ScenarioOutcome run_fdt_scenario(const ScenarioSpec& spec) {
    ScenarioOutcome out;
    out.name = "fdt";
    Vm vm = build_guest(spec.guest);
    const Pid pid = first_pid(vm.state);
    const auto& prof = vm.state.prof();

    const SyscallResult first = vm.syscall(pid, OpenReq{"fdt_1.txt", true});
    out.values["fd_first"] = first.value;
    check(out, "first open returns fd 3", first.ok() && first.value == 3, describe(first));
    const GuestAddress old_fdt = fdt_of(vm.state, vm.image, pid);
    const std::uint64_t file3 = vm.image.peek_word(old_fdt + prof.fdt().slots + 3 * kWordSize);

    SyscallInjector injector(InjectorConfig{spec.protected_base});
    ScriptedProcess trigger(pid, {ReadReq{3, 1}});
    const std::uint64_t len = spec.protected_pages * kPageSize;
    const GuestAddress start = injector.allocate_protected_area(vm, trigger, len);
    const Region area{start, len};

    MigrationReport report = migrate_fdt(vm.image, vm.state, pid, area.start);
    const GuestAddress dest = report.dest;
    out.values["dest"] = dest.value;
    out.values["rewritten"] = report.rewritten.size();
    check(out, "only the files_struct pointer is redirected", report.rewritten.size() == 1,
          std::to_string(report.rewritten.size()) + " pointers");
    check(out, "process now uses the migrated table", fdt_of(vm.state, vm.image, pid) == dest, to_hex(dest));
    out.report = std::move(report);

    PageMonitor monitor(vm.state);
    monitor.set_monitored({dest});
    monitor.register_watch(vm.image, pages_of(area.start, area.length), false, true);
    monitor.attach(vm.image);
    const SyscallResult second = vm.syscall(pid, OpenReq{"fdt_2.txt", true});
    monitor.detach(vm.image);
    out.values["fd_second"] = second.value;
    check(out, "second open returns fd 4", second.ok() && second.value == 4, describe(second));

    out.events = monitor.events();
    const std::uint64_t expect_off = (dest + prof.fdt().slots + 4 * kWordSize).page_offset();
    out.values["events"] = out.events.size();
    const bool one_write = out.events.size() == 1 && out.events[0].kind == AccessKind::Write &&
                           out.events[0].page == dest.page() && out.events[0].offset == expect_off &&
                           out.events[0].attributed.cls == AttributionClass::MonitoredObject;
    if (!out.events.empty()) {
        out.values["event_offset"] = out.events[0].offset;
    }
    check(out, "exactly one write event at the new fd slot", one_write,
          std::to_string(out.events.size()) + " events, slot offset " + std::to_string(expect_off));

    const std::uint64_t file3_after = vm.image.peek_word(dest + prof.fdt().slots + 3 * kWordSize);
    const SyscallResult rd = vm.syscall(pid, ReadReq{3, 16});
    check(out, "fd 3 still resolves the same file", file3_after == file3 && rd.ok(), describe(rd));
    const auto broken = check_invariants(vm.state, vm.image);
    check(out, "kernel structures consistent", broken.empty(), broken.empty() ? "" : broken.front());
    return out;
}

} // namespace kmig
