#include "support.hpp"

#include "kmig/error.hpp"
#include "kmig/memory.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace kmig;
using kmig::testing::Gen;
using kmig::testing::TrapLog;

namespace {

constexpr auto kHyp = AccessContext::hypervisor();
constexpr auto kG1 = AccessContext::guest(1);

void trap_page(MemoryImage& image, std::uint64_t page, bool r, bool w) { image.set_flags(page, PageFlags{r, w}); }

// Pages in [addr, addr + len) by plain arithmetic.
std::vector<std::uint64_t> touched_pages(std::uint64_t addr, std::uint64_t len) {
    std::vector<std::uint64_t> out;
    if (len == 0) {
        return out;
    }
    for (std::uint64_t p = addr / 4096; p <= (addr + len - 1) / 4096; ++p) {
        out.push_back(p);
    }
    return out;
}

} // namespace

TEST(Memory, ZeroInitialized) {
    MemoryImage image;
    EXPECT_EQ(image.size(), 16u << 20);
    EXPECT_EQ(image.page_count(), 4096u);
    EXPECT_EQ(image.read_bytes(kHyp, GuestAddress{0}, 8), std::vector<std::uint8_t>(8, 0));
    for (std::uint64_t p = 0; p < image.page_count(); p += 97) {
        EXPECT_FALSE(image.flags(p).any());
    }
}

TEST(Memory, SizeMustBeWholePages) {
    EXPECT_THROW(MemoryImage(4095), RangeError);
    EXPECT_THROW(MemoryImage(0), RangeError);
}

TEST(Memory, ReadSpanningTwoTrappedPages) {
    MemoryImage image(64 * 4096);
    trap_page(image, 2, true, false);
    trap_page(image, 3, true, false);
    TrapLog log;
    log.attach(image);
    image.read_bytes(kG1, GuestAddress{0x2FFE}, 4);
    ASSERT_EQ(log.traps.size(), 2u);
    EXPECT_EQ(log.traps[0].page, 2u);
    EXPECT_EQ(log.traps[0].offset, 0xFFE);
    EXPECT_EQ(log.traps[1].page, 3u);
    EXPECT_EQ(log.traps[1].offset, 0);
}

TEST(Memory, HypervisorReadOfTrappedPage) {
    MemoryImage image(64 * 4096);
    trap_page(image, 2, true, true);
    TrapLog log;
    log.attach(image);
    image.read_bytes(kHyp, GuestAddress{0x2000}, 16);
    image.write_word(kHyp, GuestAddress{0x2008}, 7);
    EXPECT_TRUE(log.traps.empty());
}

TEST(Memory, WriteThenRead) {
    MemoryImage image(64 * 4096);
    const std::uint8_t v[] = {0xAB};
    image.write_bytes(kHyp, GuestAddress{0x10}, v);
    EXPECT_EQ(image.read_bytes(kHyp, GuestAddress{0x10}, 1), std::vector<std::uint8_t>{0xAB});
}

TEST(Memory, GuestWriteToTrappedPage) {
    MemoryImage image(64 * 4096);
    trap_page(image, 5, false, true);
    TrapLog log;
    log.attach(image);
    image.write_word(kG1, GuestAddress{5 * 4096 + 8}, 1);
    ASSERT_EQ(log.traps.size(), 1u);
    EXPECT_EQ(log.traps[0].kind, AccessKind::Write);
    EXPECT_EQ(log.traps[0].page, 5u);
    // read-only flags do not catch writes and vice versa
    image.read_word(kG1, GuestAddress{5 * 4096});
    EXPECT_EQ(log.traps.size(), 1u);
}

TEST(Memory, EmptyWrite) {
    MemoryImage image(64 * 4096);
    trap_page(image, 0, true, true);
    TrapLog log;
    log.attach(image);
    image.write_bytes(kG1, GuestAddress{0x10}, {});
    EXPECT_TRUE(log.traps.empty());
    EXPECT_EQ(image.peek_word(GuestAddress{0x10}), 0u);
}

TEST(Memory, OutOfRange) {
    MemoryImage image(4 * 4096);
    EXPECT_THROW(image.read_bytes(kHyp, GuestAddress{4 * 4096 - 2}, 4), RangeError);
    EXPECT_THROW(image.write_word(kHyp, GuestAddress{4 * 4096}, 1), RangeError);
    EXPECT_NO_THROW(image.read_bytes(kHyp, GuestAddress{4 * 4096 - 4}, 4));
}

TEST(Memory, Words) {
    MemoryImage image(4 * 4096);
    image.write_word(kHyp, GuestAddress{0x100}, 0x2040);
    EXPECT_EQ(image.read_word(kHyp, GuestAddress{0x100}), 0x2040u);
    EXPECT_THROW(image.read_word(kHyp, GuestAddress{0x101}), AlignmentError);
    EXPECT_THROW(image.write_word(kHyp, GuestAddress{0x104}, 1), AlignmentError);
    image.write_word(kHyp, GuestAddress{0}, 0x0102);
    EXPECT_EQ(image.bytes()[0], 0x02);
    EXPECT_EQ(image.bytes()[1], 0x01);
}

TEST(Memory, AllocateProtectedAreaSize) {
    MemoryImage image;
    const Region r = image.allocate_region(GuestAddress{0x10000}, 128 * 1024);
    EXPECT_EQ(r.pages(), 32u);
    EXPECT_EQ(image.regions().size(), 1u);
    EXPECT_EQ(image.allocate_region(GuestAddress{0x100000}, 1).pages(), 1u);
}

TEST(Memory, AllocateZeroFills) {
    MemoryImage image(64 * 4096);
    image.write_word(kHyp, GuestAddress{0x3008}, 99);
    image.allocate_region(GuestAddress{0x3000}, 4096);
    EXPECT_EQ(image.peek_word(GuestAddress{0x3008}), 0u);
}

TEST(Memory, AllocateErrors) {
    MemoryImage image(64 * 4096);
    image.allocate_region(GuestAddress{0x10000}, 2 * 4096);
    EXPECT_THROW(image.allocate_region(GuestAddress{0x11000}, 4096), OverlapError);
    EXPECT_THROW(image.allocate_region(GuestAddress{0xF000}, 4097), OverlapError);
    EXPECT_THROW(image.allocate_region(GuestAddress{0x20010}, 4096), AlignmentError);
    EXPECT_NO_THROW(image.allocate_region(GuestAddress{0x12000}, 4096));
}

TEST(Memory, Release) {
    MemoryImage image(64 * 4096);
    image.allocate_region(GuestAddress{0x10000}, 4096);
    image.allocate_region(GuestAddress{0x20000}, 3 * 4096);
    trap_page(image, 0x20, true, true);
    image.release_region(GuestAddress{0x20000}, 3 * 4096);
    EXPECT_EQ(image.regions().size(), 1u);
    EXPECT_THROW(image.release_region(GuestAddress{0x20000}, 3 * 4096), NotFoundError);
    EXPECT_FALSE(image.flags(0x20).any());
    TrapLog log;
    log.attach(image);
    image.read_word(kG1, GuestAddress{0x20000});
    EXPECT_TRUE(log.traps.empty());
}

TEST(Memory, CloneIsIndependent) {
    MemoryImage image(64 * 4096);
    image.allocate_region(GuestAddress{0x1000}, 4096);
    image.write_word(kHyp, GuestAddress{0x1000}, 42);
    trap_page(image, 7, true, false);
    MemoryImage copy = image.clone();
    EXPECT_TRUE(std::equal(image.bytes().begin(), image.bytes().end(), copy.bytes().begin()));
    EXPECT_EQ(copy.flags(7), image.flags(7));
    EXPECT_EQ(copy.regions(), image.regions());
    copy.write_word(kHyp, GuestAddress{0x1000}, 43);
    EXPECT_EQ(image.peek_word(GuestAddress{0x1000}), 42u);
}

TEST(Memory, SnapshotRoundTrip) {
    MemoryImage image(16 * 4096);
    image.allocate_region(GuestAddress{0x2000}, 5000);
    image.write_word(kHyp, GuestAddress{0x2010}, 0xfeedface);
    trap_page(image, 3, false, true);
    const auto dir = std::filesystem::temp_directory_path() / "kmig_snapshot_test";
    std::filesystem::create_directories(dir);
    image.save_snapshot(dir / "g.img", dir / "g.img.json");
    MemoryImage back = MemoryImage::load_snapshot(dir / "g.img", dir / "g.img.json");
    EXPECT_TRUE(std::equal(image.bytes().begin(), image.bytes().end(), back.bytes().begin()));
    EXPECT_EQ(back.regions(), image.regions());
    EXPECT_EQ(back.flags(3), (PageFlags{false, true}));
    EXPECT_NE(image.sidecar_json().find("\"trapped\""), std::string::npos);
    std::filesystem::remove_all(dir);
}

// One event per (guest access, touched trapped page) and nothing else.
TEST(MemoryProperty, TrapCompleteness) {
    Gen g(11);
    for (int round = 0; round < 50; ++round) {
        MemoryImage image(32 * 4096);
        for (std::uint64_t p = 0; p < 32; ++p) {
            trap_page(image, p, g.coin(0.3), g.coin(0.3));
        }
        TrapLog log;
        log.attach(image);
        std::uint64_t expected = 0;
        for (int i = 0; i < 200; ++i) {
            const std::uint64_t len = g.below(3 * 4096);
            const std::uint64_t addr = g.below(32 * 4096 - len);
            const bool write = g.coin();
            const bool guest = g.coin(0.8);
            const auto ctx = guest ? AccessContext::guest(2) : kHyp;
            if (write) {
                image.write_bytes(ctx, GuestAddress{addr}, std::vector<std::uint8_t>(len, 1));
            } else {
                image.read_bytes(ctx, GuestAddress{addr}, len);
            }
            if (guest) {
                for (auto p : touched_pages(addr, len)) {
                    expected += write ? image.flags(p).trap_write : image.flags(p).trap_read;
                }
            }
        }
        EXPECT_EQ(log.traps.size(), expected) << "round " << round;
    }
}

TEST(MemoryProperty, HypervisorTransparency) {
    Gen g(12);
    for (int round = 0; round < 30; ++round) {
        MemoryImage a(16 * 4096);
        for (std::uint64_t p = 0; p < 16; ++p) {
            trap_page(a, p, true, true);
        }
        MemoryImage b = a.clone();
        TrapLog la;
        TrapLog lb;
        la.attach(a);
        lb.attach(b);
        for (int i = 0; i < 100; ++i) {
            const std::uint64_t addr = g.below(16 * 4096 / 8) * 8;
            if (g.coin(0.5)) {
                a.write_word(kHyp, GuestAddress{addr}, g.u64());
                a.read_word(kHyp, GuestAddress{addr});
            }
            if (g.coin(0.3)) {
                a.read_word(AccessContext::guest(1), GuestAddress{addr});
                b.read_word(AccessContext::guest(1), GuestAddress{addr});
            }
        }
        ASSERT_EQ(la.traps.size(), lb.traps.size());
        for (std::size_t i = 0; i < la.traps.size(); ++i) {
            EXPECT_EQ(la.traps[i].page, lb.traps[i].page);
            EXPECT_EQ(la.traps[i].offset, lb.traps[i].offset);
        }
    }
}

TEST(MemoryProperty, RegionExclusivity) {
    Gen g(13);
    for (int round = 0; round < 40; ++round) {
        MemoryImage image(64 * 4096);
        std::vector<Region> live;
        for (int i = 0; i < 60; ++i) {
            if (!live.empty() && g.coin(0.3)) {
                const auto at = g.below(live.size());
                image.release_region(live[at].start, live[at].length);
                live.erase(live.begin() + static_cast<std::ptrdiff_t>(at));
                continue;
            }
            const GuestAddress addr = page_address(g.below(60));
            const std::uint64_t len = g.between(1, 4 * 4096);
            try {
                live.push_back(image.allocate_region(addr, len));
            } catch (const OverlapError&) {
            } catch (const RangeError&) {
            }
            std::uint64_t prev_end = 0;
            for (const auto& [start, r] : image.regions()) {
                EXPECT_GE(start, prev_end);
                EXPECT_TRUE(r.start.page_aligned());
                prev_end = r.end().value;
            }
        }
    }
}
