#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace syncbn {

enum class DType { f64, f32 };

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) throw InvalidArgument("tensor shape must be nonempty");
  std::size_t n = 1;
  for (auto e : shape) {
    if (e < 1) throw InvalidArgument("tensor extent must be >= 1, got shape " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

template <typename T>
void require_finite(std::span<const T> v, const char* where) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NonFiniteError(std::string(where) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

// Dense row-major tensor owning its storage.
template <typename T>
class BasicTensor {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);

 public:
  using value_type = T;
  static constexpr DType dtype = std::is_same_v<T, double> ? DType::f64 : DType::f32;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_str(shape_));
    }
  }

  static BasicTensor filled(Shape shape, T fill) {
    const auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, fill));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::int64_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

// Creates a tensor with every element equal to `fill`.
template <typename T = double>
BasicTensor<T> new_tensor(Shape shape, T fill) {
  return BasicTensor<T>::filled(std::move(shape), fill);
}

// (N, C, S) view of a rank-2 (N,C) or rank-4 (N,C,H,W) tensor, S = H*W.
struct ChannelLayout {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t spatial = 1;

  std::size_t count_per_channel() const noexcept { return batch * spatial; }
  std::size_t index(std::size_t n, std::size_t c, std::size_t s) const noexcept {
    return (n * channels + c) * spatial + s;
  }
};

inline ChannelLayout channel_layout(const Shape& shape) {
  if (shape.size() != 2 && shape.size() != 4) {
    throw InvalidArgument("channel ops need layout (N,C) or (N,C,H,W), got rank " +
                          std::to_string(shape.size()));
  }
  ChannelLayout l;
  l.batch = static_cast<std::size_t>(shape[0]);
  l.channels = static_cast<std::size_t>(shape[1]);
  if (shape.size() == 4) l.spatial = static_cast<std::size_t>(shape[2] * shape[3]);
  return l;
}

template <typename T>
struct ChannelStats {
  std::int64_t count = 0;
  std::vector<T> sum;
  std::optional<std::vector<T>> sum_sq;
};

// Per-channel sums over every non-channel axis. Each channel accumulates in
// ascending flat-index order, so equal inputs give bitwise-equal sums.
template <typename T>
ChannelStats<T> channel_sum(const BasicTensor<T>& x, bool with_sum_sq = false) {
  const auto l = channel_layout(x.shape());
  ChannelStats<T> st;
  st.count = static_cast<std::int64_t>(l.count_per_channel());
  st.sum.assign(l.channels, T{0});
  if (with_sum_sq) st.sum_sq.emplace(l.channels, T{0});
  const auto d = x.data();
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = l.index(n, c, 0);
      T& acc = st.sum[c];
      for (std::size_t s = 0; s < l.spatial; ++s) acc += d[base + s];
      if (with_sum_sq) {
        T& acc2 = (*st.sum_sq)[c];
        for (std::size_t s = 0; s < l.spatial; ++s) acc2 += d[base + s] * d[base + s];
      }
    }
  }
  require_finite<T>(st.sum, "channel_sum");
  return st;
}

// out[n,c,...] = scale[c] * x[n,c,...] + shift[c]
template <typename T>
BasicTensor<T> channel_affine(const BasicTensor<T>& x, std::span<const T> scale, std::span<const T> shift) {
  const auto l = channel_layout(x.shape());
  if (scale.size() != l.channels || shift.size() != l.channels) {
    throw InvalidArgument("channel_affine: scale/shift length (" + std::to_string(scale.size()) + "/" +
                          std::to_string(shift.size()) + ") != channels " + std::to_string(l.channels));
  }
  BasicTensor<T> out = x;
  auto o = out.data();
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = l.index(n, c, 0);
      for (std::size_t s = 0; s < l.spatial; ++s) o[base + s] = scale[c] * o[base + s] + shift[c];
    }
  }
  require_finite<T>(out.data(), "channel_affine");
  return out;
}

template <typename T>
BasicTensor<T> channel_affine(const BasicTensor<T>& x, const std::vector<T>& scale, const std::vector<T>& shift) {
  return channel_affine(x, std::span<const T>(scale), std::span<const T>(shift));
}

// Concatenates tensors along axis 0; trailing extents must agree.
template <typename T>
BasicTensor<T> concat_batch(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) throw InvalidArgument("concat_batch: no parts");
  Shape shape = parts.front().shape();
  std::int64_t n = 0;
  std::vector<T> data;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw InvalidArgument("concat_batch: trailing shape mismatch " + shape_str(p.shape()) + " vs " +
                            shape_str(shape));
    }
    n += p.extent(0);
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  shape[0] = n;
  return BasicTensor<T>(std::move(shape), std::move(data));
}

// Rows [begin, begin + count) of axis 0.
template <typename T>
BasicTensor<T> slice_batch(const BasicTensor<T>& x, std::int64_t begin, std::int64_t count) {
  if (begin < 0 || count < 1 || begin + count > x.extent(0)) {
    throw InvalidArgument("slice_batch: range out of bounds");
  }
  const std::size_t row = x.size() / static_cast<std::size_t>(x.extent(0));
  Shape shape = x.shape();
  shape[0] = count;
  auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * row);
  return BasicTensor<T>(std::move(shape), std::vector<T>(first, first + static_cast<std::ptrdiff_t>(count * row)));
}

}  // namespace syncbn
