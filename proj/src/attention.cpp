#include "metatok/attention.hpp"

#include <stdexcept>

namespace metatok {

MaskPair build_masks(std::size_t seq_len, std::span<const std::size_t> meta_positions) {
    MaskPair m;
    m.seq_len = seq_len;
    m.causal.assign(seq_len * seq_len, 0);
    m.meta.assign(seq_len * seq_len, 0);
    for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j <= i; ++j) m.causal[i * seq_len + j] = 1;
    std::vector<std::uint8_t> is_meta(seq_len, 0);
    for (std::size_t p : meta_positions) {
        if (p >= seq_len) throw std::out_of_range("meta position out of range");
        is_meta[p] = 1;
    }
    for (std::size_t i = 0; i < seq_len; ++i) {
        if (!is_meta[i]) continue;
        for (std::size_t j = 0; j < seq_len; ++j)
            if (is_meta[j]) m.meta[i * seq_len + j] = 1;
    }
    return m;
}

double row_entropy(std::span<const double> row) {
    double s = 0, h = 0;
    for (double a : row) {
        if (!(a >= 0.0)) throw std::invalid_argument("row_entropy: negative or NaN weight");
        s += a;
        if (a > 0) h -= a * std::log(a);
    }
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("row_entropy: row does not sum to 1");
    return h;
}

}  // namespace metatok
