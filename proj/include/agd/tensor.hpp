#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <numeric>
#include <span>
#include <type_traits>
#include <vector>

namespace agd {

/// Dense row-major tensor. Rank is 1 or 2 everywhere in this library.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T{0}) : shape(std::move(s)) {
    data.assign(numel(shape), fill);
  }
  Tensor(std::size_t rows, std::size_t cols, T fill = T{0}) : Tensor(std::vector<std::size_t>{rows, cols}, fill) {}

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& operator()(std::size_t r, std::size_t c) {
    assert(shape.size() == 2 && r < shape[0] && c < shape[1]);
    return data[r * shape[1] + c];
  }
  const T& operator()(std::size_t r, std::size_t c) const {
    assert(shape.size() == 2 && r < shape[0] && c < shape[1]);
    return data[r * shape[1] + c];
  }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

// y[n×out] = x[n×in] · w[in×out] (+ bias); rows outside `only_rows` are left zero.
template <typename T>
void matmul_rows(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const std::vector<T>*> bias, Tensor<T>& y,
                 const std::vector<bool>* only_rows = nullptr) {
  const std::size_t n = x.rows(), in = w.shape[0], out = w.shape[1];
  assert(x.cols() == in);
  y = Tensor<T>(n, out);
  for (std::size_t i = 0; i < n; ++i) {
    if (only_rows && !(*only_rows)[i]) continue;
    T* __restrict yi = &y.data[i * out];
    if (bias) std::copy(bias->begin(), bias->end(), yi);
    const T* xi = &x.data[i * in];
    for (std::size_t a = 0; a < in; ++a) {
      const T xa = xi[a];
      if (xa == T{0}) continue;
      const T* __restrict wa = &w.data[a * out];
      for (std::size_t b = 0; b < out; ++b) yi[b] += xa * wa[b];
    }
  }
}

namespace detail {
template <typename T>
bool zero_row(const T* r, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (r[i] != T{0}) return false;
  return true;
}
}  // namespace detail

// dx[n×in] += dy[n×out] · wᵀ
template <typename T>
void matmul_rows_backward_input(const Tensor<T>& dy, const Tensor<T>& w, Tensor<T>& dx) {
  const std::size_t n = dy.rows(), in = w.shape[0], out = w.shape[1];
  constexpr std::size_t lanes = 8;
  for (std::size_t i = 0; i < n; ++i) {
    const T* dyi = &dy.data[i * out];
    if (detail::zero_row(dyi, out)) continue;
    T* dxi = &dx.data[i * in];
    for (std::size_t a = 0; a < in; ++a) {
      const T* wa = &w.data[a * out];
      T part[lanes] = {};
      std::size_t b = 0;
      for (; b + lanes <= out; b += lanes)
        for (std::size_t l = 0; l < lanes; ++l) part[l] += dyi[b + l] * wa[b + l];
      T acc{0};
      for (; b < out; ++b) acc += dyi[b] * wa[b];
      for (std::size_t l = 0; l < lanes; ++l) acc += part[l];
      dxi[a] += acc;
    }
  }
}

// dw[in×out] += xᵀ · dy, db[out] += Σ_rows dy
template <typename T>
void matmul_rows_backward_params(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dw, std::type_identity_t<std::vector<T>*> db) {
  const std::size_t n = dy.rows(), in = dw.shape[0], out = dw.shape[1];
  for (std::size_t i = 0; i < n; ++i) {
    const T* dyi = &dy.data[i * out];
    if (detail::zero_row(dyi, out)) continue;
    const T* xi = &x.data[i * in];
    for (std::size_t a = 0; a < in; ++a) {
      const T xa = xi[a];
      if (xa == T{0}) continue;
      T* dwa = &dw.data[a * out];
      for (std::size_t b = 0; b < out; ++b) dwa[b] += xa * dyi[b];
    }
    if (db)
      for (std::size_t b = 0; b < out; ++b) (*db)[b] += dyi[b];
  }
}

}  // namespace agd
