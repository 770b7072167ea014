#include "kmig/injector.hpp"

#include "kmig/error.hpp"

#include <json.hpp>

namespace kmig {

namespace {

constexpr auto kHyp = AccessContext::hypervisor();

bool legal(InjectorPhase from, InjectorPhase to) {
    using P = InjectorPhase;
    switch (from) {
    case P::Idle: return to == P::Armed;
    case P::Armed: return to == P::EntryTrapped || to == P::Idle; // Armed -> Idle is disarm
    case P::EntryTrapped: return to == P::InjectedExecuting;
    case P::InjectedExecuting: return to == P::ExitTrapped;
    case P::ExitTrapped: return to == P::Restored;
    case P::Restored: return to == P::Idle;
    }
    return false;
}

nlohmann::json request_json(const SyscallRequest& req) {
    const auto args = syscall_args(req);
    return {{"call", to_string(kind_of(req))},
            {"nr", syscall_number(kind_of(req))},
            {"args", std::vector<std::uint64_t>(args.begin(), args.end())},
            {"text", describe(req)}};
}

} // namespace

const char* to_string(InjectorPhase phase) {
    switch (phase) {
    case InjectorPhase::Idle: return "Idle";
    case InjectorPhase::Armed: return "Armed";
    case InjectorPhase::EntryTrapped: return "EntryTrapped";
    case InjectorPhase::InjectedExecuting: return "InjectedExecuting";
    case InjectorPhase::ExitTrapped: return "ExitTrapped";
    case InjectorPhase::Restored: return "Restored";
    }
    return "?";
}

std::string InjectionRecord::to_json_line() const {
    nlohmann::json phases = nlohmann::json::array();
    for (auto p : transitions) {
        phases.push_back(to_string(p));
    }
    nlohmann::json doc{{"phases", phases},
                       {"pid", pid},
                       {"injected", request_json(injected)},
                       {"result", {{"status", to_string(result.status)}, {"value", result.value}}},
                       {"restored", restored}};
    return doc.dump();
}

SyscallInjector::SyscallInjector(InjectorConfig config) : config_(config), next_base_(config.protected_base) {}

void SyscallInjector::transition(InjectorPhase to) {
    if (!legal(phase_, to)) {
        throw StateError(std::string("illegal injector transition ") + to_string(phase_) + " -> " + to_string(to));
    }
    phase_ = to;
    current_.transitions.push_back(to);
}

void SyscallInjector::arm(GuestState& state, MemoryImage& image) {
    if (phase_ != InjectorPhase::Idle) {
        throw StateError(std::string("arm requires Idle, injector is ") + to_string(phase_));
    }
    breakpoints_.clear();
    for (GuestAddress at : {state.layout.syscall_entry, state.layout.syscall_exit}) {
        const auto original = image.read_bytes(kHyp, at, 1);
        breakpoints_.emplace_back(at, original);
        const std::uint8_t int3[] = {kInt3};
        image.write_bytes(kHyp, at, int3);
    }
    current_ = InjectionRecord{};
    transition(InjectorPhase::Armed);
}

void SyscallInjector::restore_breakpoints(MemoryImage& image) {
    for (const auto& [at, original] : breakpoints_) {
        image.write_bytes(kHyp, at, original);
    }
    breakpoints_.clear();
}

void SyscallInjector::disarm(GuestState&, MemoryImage& image) {
    if (phase_ != InjectorPhase::Armed) {
        throw StateError(std::string("disarm requires Armed, injector is ") + to_string(phase_));
    }
    restore_breakpoints(image);
    transition(InjectorPhase::Idle);
}

void SyscallInjector::on_syscall_entry(GuestState&, MemoryImage&, SyscallFrame& frame) {
    if (!pending_) {
        throw StateError("syscall entry trapped with no injection pending");
    }
    transition(InjectorPhase::EntryTrapped);
    saved_ = SavedContext{frame.ip,
                          frame.sp,
                          syscall_number(kind_of(frame.request)),
                          syscall_args(frame.request),
                          frame.request,
                          breakpoints_};
    current_.pid = frame.pid;
    frame.request = *pending_;
    transition(InjectorPhase::InjectedExecuting);
}

ExitAction SyscallInjector::on_syscall_exit(GuestState&, MemoryImage& image, SyscallFrame& frame) {
    transition(InjectorPhase::ExitTrapped);
    current_.result = frame.result;
    frame.request = saved_->request;
    frame.sp = saved_->sp;
    frame.ip = saved_->ip; // back to the syscall entrance
    restore_breakpoints(image);
    transition(InjectorPhase::Restored);
    current_.restored = true;
    return ExitAction::RestartAtEntry;
}

InjectionRecord SyscallInjector::inject(Vm& vm, GuestDriver& driver, const SyscallRequest& injected) {
    if (phase_ != InjectorPhase::Armed) {
        throw StateError(std::string("inject requires Armed, injector is ") + to_string(phase_));
    }
    pending_ = injected;
    current_.injected = injected;
    SyscallTrapHandler* previous = std::exchange(vm.trap_handler, this);
    struct Restore {
        Vm& vm;
        SyscallTrapHandler* previous;
        std::optional<SyscallRequest>& pending;
        ~Restore() {
            vm.trap_handler = previous;
            pending.reset();
        }
    } restore{vm, previous, pending_};

    for (std::size_t step = 0; step < config_.max_driver_steps; ++step) {
        driver.step(vm);
        if (phase_ == InjectorPhase::Restored) {
            transition(InjectorPhase::Idle);
            audit_.push_back(current_);
            current_ = InjectionRecord{};
            return audit_.back();
        }
    }
    throw TimeoutError("no guest syscall to piggyback on after " + std::to_string(config_.max_driver_steps) + " steps");
}

GuestAddress SyscallInjector::allocate_protected_area(Vm& vm, GuestDriver& driver, std::uint64_t len) {
    if (phase_ != InjectorPhase::Idle && phase_ != InjectorPhase::Armed) {
        throw StateError(std::string("cannot allocate while injector is ") + to_string(phase_));
    }
    const bool armed_here = phase_ == InjectorPhase::Idle;
    if (armed_here) {
        arm(vm.state, vm.image);
    }
    const GuestAddress base = next_base_;
    InjectionRecord rec;
    try {
        rec = inject(vm, driver, MmapReq{base, len});
    } catch (const TimeoutError&) {
        if (armed_here) {
            disarm(vm.state, vm.image);
        }
        throw;
    }
    if (!rec.result.ok()) {
        throw InjectionError("injected mmap(" + to_hex(base) + ", " + std::to_string(len) +
                             ") failed: " + to_string(rec.result.status));
    }
    vm.state.protected_areas.push_back(Region{base, len});
    next_base_ = base + pages_for(len) * kPageSize;
    return base;
}

void SyscallInjector::release_protected_area(Vm& vm, GuestDriver& driver, GuestAddress start, std::uint64_t len) {
    if (phase_ == InjectorPhase::Idle) {
        arm(vm.state, vm.image);
    }
    const InjectionRecord rec = inject(vm, driver, MunmapReq{start, len});
    if (!rec.result.ok()) {
        throw InjectionError("injected munmap(" + to_hex(start) + ") failed: " + to_string(rec.result.status));
    }
    std::erase_if(vm.state.protected_areas, [&](const Region& r) { return r.start == start; });
}

std::string SyscallInjector::audit_jsonl() const {
    std::string out;
    for (const auto& rec : audit_) {
        out += rec.to_json_line();
        out += '\n';
    }
    return out;
}

} // namespace kmig
