#pragma once

#include "kmig/guest.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace kmig {

enum class InjectorPhase : std::uint8_t { Idle, Armed, EntryTrapped, InjectedExecuting, ExitTrapped, Restored };

const char* to_string(InjectorPhase phase);

// Register and memory state captured when the guest traps at syscall entry.
struct SavedContext {
    std::uint64_t ip = 0;
    std::uint64_t sp = 0;
    std::uint64_t syscall_number = 0;
    std::array<std::uint64_t, 6> args{};
    SyscallRequest request;
    std::vector<std::pair<GuestAddress, std::vector<std::uint8_t>>> overwritten_bytes;

    bool operator==(const SavedContext&) const = default;
};

struct InjectionRecord {
    Pid pid = 0;
    std::vector<InjectorPhase> transitions;
    SyscallRequest injected;
    SyscallResult result;
    bool restored = false;

    std::string to_json_line() const;
};

struct InjectorConfig {
    GuestAddress protected_base{0x10000};
    std::size_t max_driver_steps = 16;
};

// Hijacks the next guest syscall to run a hypervisor-chosen one:
// INT3 at entry and exit, swap the request in, harvest the result at exit,
// then restore the original request and restart it at the entry point.
class SyscallInjector final : public SyscallTrapHandler {
public:
    explicit SyscallInjector(InjectorConfig config = {});

    void arm(GuestState& state, MemoryImage& image);
    void disarm(GuestState& state, MemoryImage& image);

    // Requires phase Armed. Steps `driver` until some process enters a
    // syscall; throws TimeoutError after config.max_driver_steps steps.
    InjectionRecord inject(Vm& vm, GuestDriver& driver, const SyscallRequest& injected);

    // Arms if needed, injects mmap at the next free protected base and
    // records the area in the guest state.
    GuestAddress allocate_protected_area(Vm& vm, GuestDriver& driver, std::uint64_t len);
    void release_protected_area(Vm& vm, GuestDriver& driver, GuestAddress start, std::uint64_t len);

    InjectorPhase phase() const { return phase_; }
    const std::optional<SavedContext>& saved_context() const { return saved_; }
    const std::vector<InjectionRecord>& audit_log() const { return audit_; }
    std::string audit_jsonl() const;

    void on_syscall_entry(GuestState& state, MemoryImage& image, SyscallFrame& frame) override;
    ExitAction on_syscall_exit(GuestState& state, MemoryImage& image, SyscallFrame& frame) override;

private:
    void transition(InjectorPhase to);
    void restore_breakpoints(MemoryImage& image);

    InjectorConfig config_;
    InjectorPhase phase_ = InjectorPhase::Idle;
    GuestAddress next_base_;
    std::vector<std::pair<GuestAddress, std::vector<std::uint8_t>>> breakpoints_;
    std::optional<SavedContext> saved_;
    std::optional<SyscallRequest> pending_;
    InjectionRecord current_;
    std::vector<InjectionRecord> audit_;
};

} // namespace kmig
