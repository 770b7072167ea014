#pragma once

#include "kmig/guest.hpp"
#include "kmig/migration.hpp"
#include "kmig/monitor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kmig {

enum class Mode : std::uint8_t { Off, InPlace, Migrated };

const char* to_string(Mode m);
Mode mode_from_string(std::string_view s);

enum class Distribution : std::uint8_t { Uniform, Zipf };

struct WorkloadSpec {
    std::uint64_t ops_per_file = 4;
    std::uint64_t passes = 1;
    double create_ratio = 0.25; // chance of creating a new file after each visit
    bool stdout_writes = true;  // progress line on fd 1 after each file
    Distribution distribution = Distribution::Uniform;
    double zipf_s = 1.0;
    std::uint64_t seed = 1;
    bool operator==(const WorkloadSpec&) const = default;
};

// modeled_time = t_base + c_event * events
struct CostModel {
    double t_base = 100000;
    double c_event = 1;
    bool operator==(const CostModel&) const = default;
};

struct ScenarioSpec {
    BuildSpec guest{.num_files = 400, .num_processes = 2, .seed = 1};
    std::uint64_t k = 10;
    Mode mode = Mode::Migrated;
    WorkloadSpec workload;
    CostModel cost;
    GuestAddress protected_base{0x10000};
    std::uint64_t protected_pages = 32;
    bool watch_read = true;
    bool watch_write = true;
    bool operator==(const ScenarioSpec&) const = default;
};

// Unknown keys and wrong types are ConfigErrors. Missing keys keep defaults.
ScenarioSpec parse_scenario_spec(std::string_view json_text);
ScenarioSpec load_scenario_spec(const std::filesystem::path& path);
std::string to_json(const ScenarioSpec& spec);
// KMIG_SEED, when set, replaces the guest and workload seeds.
void apply_env_overrides(ScenarioSpec& spec);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

struct WorkloadStats {
    std::uint64_t syscalls = 0;
    std::uint64_t failed = 0;
    std::uint64_t created = 0;
    std::uint64_t reclaimed = 0;
};

// Metadata-heavy file churn over every file in the guest namespace.
WorkloadStats run_extract_workload(Vm& vm, const WorkloadSpec& spec);

using WatchSet = std::map<std::uint64_t, PageFlags>;

// Offline replay: one count per (access, touched page) whose page is watched
// for that access kind.
std::uint64_t oracle_count(const AccessTrace& trace, const WatchSet& watched);

struct OverheadReport {
    std::uint64_t bytes_used = 0;
    std::uint64_t pages_used = 0;
    bool fits = true;
};

OverheadReport overhead_report(const Region& area, const std::vector<MigrationReport>& reports);

struct BenchRow {
    std::uint64_t k = 0;
    Mode mode = Mode::Off;
    int repeat = -1; // -1 for the mean over repeats
    double events_total = 0;
    double events_false = 0;
    double modeled_time = 0;
    std::uint64_t protected_pages = 0;
    bool operator==(const BenchRow&) const = default;
};

struct CellResult {
    BenchRow row;
    std::uint64_t oracle_events = 0;
    EventCounts counts;
    WorkloadStats workload;
    std::vector<std::string> monitored_paths;
    std::vector<GuestAddress> monitored_objects; // where they live during the workload
    WatchSet watched;
    AccessTrace trace; // filled when requested
};

// Monitored files are the first k of a permutation seeded by the repeat,
// so sets are nested across k.
std::vector<std::string> monitored_files(const ScenarioSpec& spec, std::uint64_t k, int repeat);

CellResult run_cell(const ScenarioSpec& spec, Mode mode, std::uint64_t k, int repeat, bool keep_trace = false);

struct SweepOptions {
    std::vector<std::uint64_t> ks{10, 50, 100, 150, 200, 250, 300, 350, 400};
    int repeats = 10;
};

struct SweepResult {
    std::vector<BenchRow> rows;       // baseline, then in-place and migrated per k
    std::vector<BenchRow> per_repeat; // one per cell
    bool oracle_match = true;
    std::vector<std::string> mismatches;

    std::string to_csv(bool include_per_repeat = false) const;
    std::string to_json() const;
};

SweepResult sweep(const ScenarioSpec& spec, const SweepOptions& opts = {});

struct ScenarioCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct ScenarioOutcome {
    std::string name;
    std::vector<ScenarioCheck> checks;
    std::optional<MigrationReport> report;
    std::vector<MonitorEvent> events;
    std::map<std::string, std::uint64_t> values;

    bool pass() const;
    std::string to_json() const;
};

// test.txt opened by one process, migrated, then opened by a second one.
ScenarioOutcome run_dentry_scenario(const ScenarioSpec& spec);
// fdt_1.txt opened, the fd table migrated, then fdt_2.txt opened.
ScenarioOutcome run_fdt_scenario(const ScenarioSpec& spec);

} // namespace kmig
