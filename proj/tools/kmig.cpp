// kmig: build guests, run the effectiveness scenarios and the monitoring sweep.
#include "kmig/bench.hpp"
#include "kmig/error.hpp"
#include "kmig/injector.hpp"
#include "kmig/migration.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitAssert = 1;
constexpr int kExitConfig = 2;

kmig::ScenarioSpec load(const std::string& path) {
    kmig::ScenarioSpec spec = path.empty() ? kmig::ScenarioSpec{} : kmig::load_scenario_spec(path);
    kmig::apply_env_overrides(spec);
    return spec;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw kmig::ConfigError("cannot write " + path);
    }
    out << text;
}

int cmd_gen(const std::string& spec_path, const std::string& out) {
    const auto spec = load(spec_path);
    kmig::Vm vm = kmig::build_guest(spec.guest);
    const std::string sidecar = out + ".json";
    vm.image.save_snapshot(out, sidecar);
    std::cout << "wrote " << out << " (" << vm.image.size() << " bytes, " << vm.state.objects.size()
              << " objects) and " << sidecar << '\n';
    return kExitOk;
}

int cmd_scenario(const std::string& spec_path, const std::string& which, bool as_json) {
    const auto spec = load(spec_path);
    const kmig::ScenarioOutcome res = which == "dentry" ? kmig::run_dentry_scenario(spec) : kmig::run_fdt_scenario(spec);
    if (as_json) {
        std::cout << res.to_json() << '\n';
    } else {
        for (const auto& c : res.checks) {
            std::cout << (c.pass ? "ok   " : "FAIL ") << c.name;
            if (!c.detail.empty()) {
                std::cout << "  [" << c.detail << ']';
            }
            std::cout << '\n';
        }
        std::cout << res.name << ": " << (res.pass() ? "pass" : "fail") << '\n';
    }
    return res.pass() ? kExitOk : kExitAssert;
}

int cmd_bench(const std::string& spec_path, const std::vector<std::uint64_t>& ks, int repeats, const std::string& out,
              bool as_json, bool per_repeat) {
    auto spec = load(spec_path);
    kmig::SweepOptions opts;
    if (!ks.empty()) {
        opts.ks = ks;
    }
    opts.repeats = repeats;
    for (auto k : opts.ks) {
        if (k > spec.guest.num_files) {
            throw kmig::ConfigError("k = " + std::to_string(k) + " exceeds num_files");
        }
    }
    const kmig::SweepResult res = kmig::sweep(spec, opts);
    const std::string csv = res.to_csv(per_repeat);
    if (!out.empty()) {
        write_file(out, csv);
    }
    if (as_json) {
        std::cout << res.to_json() << '\n';
    } else if (out.empty()) {
        std::cout << csv;
    }
    for (const auto& m : res.mismatches) {
        std::cerr << "oracle mismatch: " << m << '\n';
    }
    return res.oracle_match ? kExitOk : kExitAssert;
}

int cmd_validate(const std::string& spec_path, bool fault_inject, bool as_json) {
    const auto spec = load(spec_path);
    kmig::Vm vm = kmig::build_guest(spec.guest);
    const auto paths = kmig::monitored_files(spec, spec.k, 0);
    std::vector<kmig::GuestAddress> sources;
    for (const auto& p : paths) {
        sources.push_back(*vm.state.dentry_for(p));
    }
    if (fault_inject && !sources.empty()) {
        kmig::plant_decoy(vm.state, vm.image, sources.front().value);
    }
    kmig::SyscallInjector injector(kmig::InjectorConfig{spec.protected_base});
    kmig::ScriptedProcess trigger(vm.state.processes.begin()->first, {kmig::ReadReq{0, 1}});
    const std::uint64_t len = spec.protected_pages * kmig::kPageSize;
    const auto start = injector.allocate_protected_area(vm, trigger, len);
    const auto verdict = kmig::dry_run_validate(vm.state, vm.image, sources, kmig::Region{start, len}, paths,
                                                kmig::MigrationOptions{!fault_inject});
    if (as_json) {
        std::cout << verdict.to_json() << '\n';
    } else {
        for (const auto& d : verdict.diagnostics) {
            std::cout << "  " << d << '\n';
        }
        std::cout << "dry run over " << sources.size() << " dentries: " << (verdict.pass ? "pass" : "fail") << '\n';
    }
    return verdict.pass ? kExitOk : kExitAssert;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"kernel object migration for page-level monitoring"};
    app.require_subcommand(1);

    std::string spec_path;
    std::string out;
    bool as_json = false;

    auto* gen = app.add_subcommand("gen", "build a guest and snapshot its memory");
    gen->add_option("--spec", spec_path, "scenario spec (JSON)")->check(CLI::ExistingFile);
    gen->add_option("--out", out, "image path; regions and flags go to <out>.json")->required();

    std::string which;
    auto* scenario = app.add_subcommand("scenario", "run an effectiveness scenario");
    scenario->add_option("--spec", spec_path, "scenario spec (JSON)")->check(CLI::ExistingFile);
    scenario->add_option("--case", which, "dentry or fdt")->required()->check(CLI::IsMember({"dentry", "fdt"}));
    scenario->add_flag("--json", as_json, "print the outcome as JSON");

    std::vector<std::uint64_t> ks;
    int repeats = 10;
    bool per_repeat = false;
    auto* bench = app.add_subcommand("bench", "run the monitored-object sweep");
    bench->add_option("--spec", spec_path, "scenario spec (JSON)")->check(CLI::ExistingFile);
    bench->add_option("--ks", ks, "monitored object counts")->delimiter(',');
    bench->add_option("--repeats", repeats, "repeats per cell")->check(CLI::PositiveNumber);
    bench->add_option("--out", out, "CSV output path");
    bench->add_flag("--json", as_json, "print the table as JSON");
    bench->add_flag("--per-repeat", per_repeat, "also write one CSV row per repeat");

    bool dry_run = false;
    bool fault_inject = false;
    auto* validate = app.add_subcommand("validate", "migrate on a cloned guest and probe it");
    validate->add_option("--spec", spec_path, "scenario spec (JSON)")->check(CLI::ExistingFile);
    validate->add_flag("--dry-run", dry_run, "required; validation always runs on a clone")->required();
    validate->add_flag("--fault-inject", fault_inject, "plant a decoy and disable verification");
    validate->add_flag("--json", as_json, "print the verdict as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen(spec_path, out);
        }
        if (scenario->parsed()) {
            return cmd_scenario(spec_path, which, as_json);
        }
        if (bench->parsed()) {
            return cmd_bench(spec_path, ks, repeats, out, as_json, per_repeat);
        }
        return cmd_validate(spec_path, fault_inject, as_json);
    } catch (const kmig::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const kmig::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitAssert;
    }
}
