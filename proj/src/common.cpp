#include "anyseg/common.hpp"

#include <algorithm>

namespace anyseg {

std::vector<ModalitySet> enumerate_subsets(int modality_count) {
    if (modality_count < 1 || modality_count > 31) {
        throw std::invalid_argument("enumerate_subsets: bad modality count");
    }
    std::vector<ModalitySet> out;
    for (uint32_t bits = 1; bits < (1u << modality_count); ++bits) out.emplace_back(bits);
    std::stable_sort(out.begin(), out.end(), [](const ModalitySet& a, const ModalitySet& b) {
        if (a.count() != b.count()) return a.count() < b.count();
        return a.members() < b.members();
    });
    return out;
}

LabelMap downsample_labels(const LabelMap& labels, int factor, int num_classes) {
    if (factor < 1 || labels.h % factor != 0 || labels.w % factor != 0) {
        throw std::invalid_argument("downsample_labels: factor does not divide label grid");
    }
    LabelMap out;
    out.h = labels.h / factor;
    out.w = labels.w / factor;
    out.labels.assign(static_cast<size_t>(out.h * out.w), 0);
    std::vector<int> counts(static_cast<size_t>(num_classes));
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            std::fill(counts.begin(), counts.end(), 0);
            for (int dy = 0; dy < factor; ++dy) {
                for (int dx = 0; dx < factor; ++dx) {
                    const uint8_t c = labels.at(y * factor + dy, x * factor + dx);
                    if (c >= num_classes) throw std::invalid_argument("downsample_labels: class out of range");
                    ++counts[c];
                }
            }
            int best = 0;
            for (int c = 1; c < num_classes; ++c) {
                if (counts[c] > counts[best]) best = c;
            }
            out.at(y, x) = static_cast<uint8_t>(best);
        }
    }
    return out;
}

}  // namespace anyseg
