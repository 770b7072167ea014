#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>

namespace kmig {

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kWordSize = 8;

using Pid = std::uint32_t;

// Pid used for accesses performed by the guest kernel on its own behalf
// (LRU reclaim), as opposed to on behalf of a process.
inline constexpr Pid kKernelPid = 0;

struct GuestAddress {
    std::uint64_t value = 0;

    constexpr GuestAddress() = default;
    constexpr explicit GuestAddress(std::uint64_t v) : value(v) {}

    constexpr auto operator<=>(const GuestAddress&) const = default;

    constexpr GuestAddress operator+(std::uint64_t off) const { return GuestAddress{value + off}; }
    constexpr std::uint64_t operator-(GuestAddress other) const { return value - other.value; }

    constexpr bool is_null() const { return value == 0; }
    constexpr std::uint64_t page() const { return value / kPageSize; }
    constexpr std::uint64_t page_offset() const { return value % kPageSize; }
    constexpr bool word_aligned() const { return value % kWordSize == 0; }
    constexpr bool page_aligned() const { return value % kPageSize == 0; }

    // True when this address lies in [base, base + len).
    constexpr bool within(GuestAddress base, std::uint64_t len) const {
        return value >= base.value && value - base.value < len;
    }
};

inline constexpr GuestAddress kNullAddress{};

constexpr GuestAddress page_address(std::uint64_t page) { return GuestAddress{page * kPageSize}; }

constexpr std::uint64_t pages_for(std::uint64_t bytes) { return (bytes + kPageSize - 1) / kPageSize; }

std::string to_hex(GuestAddress addr);
std::string to_hex(std::uint64_t value);

} // namespace kmig

template <>
struct std::hash<kmig::GuestAddress> {
    std::size_t operator()(const kmig::GuestAddress& a) const noexcept { return std::hash<std::uint64_t>{}(a.value); }
};
