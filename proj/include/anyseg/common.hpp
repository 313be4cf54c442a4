#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace anyseg {

// Index into a dataset's ordered modality list.
using ModalityId = int;

// Non-empty subset of the modalities 0..M-1, bit i = modality i active.
class ModalitySet {
  public:
    ModalitySet() = default;
    explicit ModalitySet(uint32_t bits) : bits_(bits) {}

    static ModalitySet full(int m) {
        if (m < 1 || m > 31) throw std::invalid_argument("modality set: bad modality count");
        return ModalitySet((1u << m) - 1u);
    }

    static ModalitySet single(ModalityId id) { return ModalitySet(1u << id); }

    uint32_t bits() const { return bits_; }
    bool empty() const { return bits_ == 0; }
    int count() const { return std::popcount(bits_); }
    bool contains(ModalityId id) const { return (bits_ >> id) & 1u; }

    ModalitySet with(ModalityId id) const { return ModalitySet(bits_ | (1u << id)); }

    std::vector<ModalityId> members() const {
        std::vector<ModalityId> out;
        for (int i = 0; i < 32; ++i) {
            if ((bits_ >> i) & 1u) out.push_back(i);
        }
        return out;
    }

    std::string label(const std::vector<std::string>& names) const {
        std::string out;
        for (ModalityId id : members()) out += names.at(static_cast<size_t>(id));
        return out;
    }

    bool operator==(const ModalitySet&) const = default;

  private:
    uint32_t bits_ = 0;
};

// Non-empty subsets ordered by size then lexicographically by member index,
// matching the usual table layout (R, D, E, L, RD, RE, ...).
std::vector<ModalitySet> enumerate_subsets(int modality_count);

// Dense grid of class indices.
struct LabelMap {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> labels;  // row-major, h*w entries

    uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y * w + x)]; }
    uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y * w + x)]; }

    bool operator==(const LabelMap&) const = default;
};

// Majority vote per factor x factor block, ties broken toward the lowest
// class index.
LabelMap downsample_labels(const LabelMap& labels, int factor, int num_classes);

// FNV-1a 64-bit, used for checkpoint/dataset integrity.
class Checksum {
  public:
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const uint8_t*>(data);
        for (size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001B3ull;
        }
    }
    uint64_t value() const { return hash_; }

  private:
    uint64_t hash_ = 0xCBF29CE484222325ull;
};

}  // namespace anyseg
