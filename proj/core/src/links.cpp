#include "kmig/links.hpp"

namespace kmig {

const char* to_string(LinkClass c) {
    switch (c) {
    case LinkClass::ConfirmedFileBackref: return "file-backref";
    case LinkClass::ConfirmedInodeBackref: return "inode-backref";
    case LinkClass::ConfirmedHashNeighbor: return "hash-neighbor";
    case LinkClass::ConfirmedHashHead: return "hash-head";
    case LinkClass::ConfirmedLruNeighbor: return "lru-neighbor";
    case LinkClass::ConfirmedLruHead: return "lru-head";
    case LinkClass::ConfirmedParentBackref: return "parent-backref";
    case LinkClass::ConfirmedFdtSlot: return "fdt-slot";
    case LinkClass::ConfirmedInternal: return "internal";
    case LinkClass::Unverified: return "unverified";
    }
    return "?";
}

bool is_confirmed(LinkClass c) { return c != LinkClass::Unverified; }

bool is_list_link(LinkClass c) {
    return c == LinkClass::ConfirmedHashNeighbor || c == LinkClass::ConfirmedHashHead ||
           c == LinkClass::ConfirmedLruNeighbor || c == LinkClass::ConfirmedLruHead;
}

LinkClass verify_cross_links(const MemoryImage& image, const LayoutProfile& profile, const GuestState& state,
                             GuestAddress candidate, GuestAddress slot) {
    if (!slot.word_aligned() || slot.value + kWordSize > image.size()) {
        return LinkClass::Unverified;
    }
    const auto cand = state.object_starting_at(candidate);
    if (!cand) {
        return LinkClass::Unverified;
    }
    const std::uint64_t value = image.peek_word(slot);
    auto peek = [&](GuestAddress a) { return image.peek_word(a); };

    if (slot.within(candidate, cand->size)) {
        const bool interior = GuestAddress{value}.within(candidate, cand->size);
        return interior && profile.is_pointer_slot(cand->kind, slot - candidate) ? LinkClass::ConfirmedInternal
                                                                                  : LinkClass::Unverified;
    }
    if (value != candidate.value) {
        return LinkClass::Unverified;
    }

    const auto& d = profile.dentry();
    if (cand->kind == ObjectKind::Fdt) {
        const auto owner = state.object_at(slot);
        if (!owner || owner->kind != ObjectKind::FilesStruct || slot != owner->addr + profile.files_struct().fdt) {
            return LinkClass::Unverified;
        }
        for (const auto& [pid, task] : state.processes) {
            if (peek(task + profile.task().files) == owner->addr.value) {
                return LinkClass::ConfirmedFdtSlot;
            }
        }
        return LinkClass::Unverified;
    }
    if (cand->kind != ObjectKind::Dentry) {
        return LinkClass::Unverified;
    }

    // kernel globals: hash bucket heads and the LRU head
    const GuestLayout& lay = state.layout;
    if (slot.within(lay.bucket_table, lay.bucket_count * kWordSize)) {
        auto path = state.dentry_paths.find(candidate);
        if (path != state.dentry_paths.end() && peek(candidate + d.hash_prev) == 0 &&
            bucket_of(path->second, lay.bucket_count) == (slot - lay.bucket_table) / kWordSize) {
            return LinkClass::ConfirmedHashHead;
        }
        return LinkClass::Unverified;
    }
    if (slot == lay.lru_head || slot == lay.lru_head + kWordSize) {
        const std::uint64_t end_link = peek(candidate + (slot == lay.lru_head ? d.lru_prev : d.lru_next));
        return state.is_on_lru(candidate) && end_link == 0 ? LinkClass::ConfirmedLruHead : LinkClass::Unverified;
    }

    const auto owner = state.object_at(slot);
    if (!owner) {
        return LinkClass::Unverified;
    }
    const std::uint64_t off = slot - owner->addr;
    switch (owner->kind) {
    case ObjectKind::File:
        if (off == profile.file().dentry && state.open_files.contains(owner->addr)) {
            const std::uint64_t d_inode = peek(candidate + d.inode);
            if (d_inode != 0 && peek(owner->addr + profile.file().inode) == d_inode) {
                return LinkClass::ConfirmedFileBackref;
            }
        }
        break;
    case ObjectKind::Inode:
        if (off == profile.inode().dentry && peek(candidate + d.inode) == owner->addr.value) {
            return LinkClass::ConfirmedInodeBackref;
        }
        break;
    case ObjectKind::Dentry:
        if (off == d.hash_next && state.is_hashed(owner->addr) && peek(candidate + d.hash_prev) == owner->addr.value) {
            return LinkClass::ConfirmedHashNeighbor;
        }
        if (off == d.hash_prev && state.is_hashed(owner->addr) && peek(candidate + d.hash_next) == owner->addr.value) {
            return LinkClass::ConfirmedHashNeighbor;
        }
        if (off == d.lru_next && state.is_on_lru(owner->addr) && peek(candidate + d.lru_prev) == owner->addr.value) {
            return LinkClass::ConfirmedLruNeighbor;
        }
        if (off == d.lru_prev && state.is_on_lru(owner->addr) && peek(candidate + d.lru_next) == owner->addr.value) {
            return LinkClass::ConfirmedLruNeighbor;
        }
        if (off == d.parent && state.is_live_dentry(owner->addr) && state.is_live_dentry(candidate)) {
            const GuestAddress inode{peek(candidate + d.inode)};
            if (!inode.is_null() && peek(inode + profile.inode().mode) == kInodeModeDir) {
                return LinkClass::ConfirmedParentBackref;
            }
        }
        break;
    default:
        break;
    }
    return LinkClass::Unverified;
}

} // namespace kmig
