// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "clora/numerics.hpp"

namespace clora {

// Labelled examples stored row-wise: x is N × d_in.
struct Dataset {
    Matrix x;
    std::vector<std::size_t> y;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return y.size(); }
    std::size_t dim() const noexcept { return x.cols(); }
    Matrix example(std::size_t i) const { return Matrix::column(x.row(i)); }
    Dataset subset(const std::vector<std::size_t>& indices) const;
};

}  // namespace clora
