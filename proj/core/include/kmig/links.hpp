#pragma once

#include "kmig/guest.hpp"

namespace kmig {

// How a word that holds an object's address was confirmed to be a real
// reference to it, via the opposite link of a known kernel structure.
enum class LinkClass : std::uint8_t {
    ConfirmedFileBackref,   // f_dentry of an open file whose f_inode matches d_inode
    ConfirmedInodeBackref,  // i_dentry of the dentry's own inode
    ConfirmedHashNeighbor,  // d_hash_next/prev of a hashed dentry linked back
    ConfirmedHashHead,      // bucket head of the dentry's bucket, dentry first in chain
    ConfirmedLruNeighbor,   // d_lru_next/prev of an LRU dentry linked back
    ConfirmedLruHead,       // LRU first/last pointer
    ConfirmedParentBackref, // d_parent of a live child, candidate is a directory
    ConfirmedFdtSlot,       // files_struct.fdt of a live process
    ConfirmedInternal,      // pointer field of the candidate itself, aimed inside it
    Unverified,
};

const char* to_string(LinkClass c);
bool is_confirmed(LinkClass c);
bool is_list_link(LinkClass c);

// Classifies the word at `slot` as a reference to the object at `candidate`.
// Reads are hypervisor-side. Anything that cannot be cross-checked is
// Unverified, which is a normal result.
LinkClass verify_cross_links(const MemoryImage& image, const LayoutProfile& profile, const GuestState& state,
                             GuestAddress candidate, GuestAddress slot);

} // namespace kmig
