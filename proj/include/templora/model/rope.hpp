#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "templora/core/error.hpp"
#include "templora/core/ops.hpp"
#include "templora/core/tensor.hpp"

namespace templora {

/// Rotates query and key rows ([t x width], heads of `head_dim`) by their
/// positions. ntk_scale = 1 is plain rotary; > 1 applies NTK-aware base scaling.
template <class T>
std::pair<Tensor<T>, Tensor<T>> rope_apply(Tensor<T> q, Tensor<T> k, std::span<const std::int64_t> positions, std::size_t head_dim,
                                           double rope_base, double ntk_scale = 1.0) {
    if (head_dim == 0 || head_dim % 2 != 0) throw ConfigError("rope_apply: head dimension must be even");
    if (ntk_scale < 1.0) throw ConfigError("rope_apply: ntk_scale must be >= 1");
    detail::require_shape(q.rows() == positions.size() && k.rows() == positions.size(), "rope_apply: positions/rows mismatch");
    detail::require_shape(q.cols() % head_dim == 0 && k.cols() % head_dim == 0, "rope_apply: width not a multiple of head_dim");
    const double base = kernels::ntk_rope_base(rope_base, ntk_scale, head_dim);
    kernels::rope_rotate(q.data(), q.rows(), q.cols(), head_dim, positions, base, 1);
    kernels::rope_rotate(k.data(), k.rows(), k.cols(), head_dim, positions, base, 1);
    return {std::move(q), std::move(k)};
}

}  // namespace templora
