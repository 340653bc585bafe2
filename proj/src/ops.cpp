#include "lvlm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "lvlm/error.hpp"

namespace lvlm {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

// Upper bound on im2col buffer elements per chunk of samples; sized to stay cache resident.
constexpr std::size_t kColumnBudget = std::size_t{1} << 16;

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t stride, pad;
  std::size_t ho, wo;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Shape& input, const Shape& weight, Conv2dOptions opt) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (input[1] != weight[1]) {
    fail(Errc::shape, "conv2d: input has " + std::to_string(input[1]) + " channels but weight " +
                          shape_to_string(weight) + " expects " + std::to_string(weight[1]));
  }
  if (opt.stride < 1) fail(Errc::shape, "conv2d: stride must be >= 1");
  const std::size_t hp = input[2] + 2 * opt.padding;
  const std::size_t wp = input[3] + 2 * opt.padding;
  if (weight[2] > hp || weight[3] > wp) {
    fail(Errc::shape, "conv2d: kernel " + std::to_string(weight[2]) + "x" + std::to_string(weight[3]) +
                          " exceeds padded input " + std::to_string(hp) + "x" + std::to_string(wp));
  }
  ConvGeometry g{input[0], input[1], input[2], input[3], weight[0], weight[2], weight[3], opt.stride, opt.padding,
                 (hp - weight[2]) / opt.stride + 1, (wp - weight[3]) / opt.stride + 1};
  return g;
}

std::size_t chunk_size(const ConvGeometry& g) {
  const std::size_t per_sample = std::max<std::size_t>(1, std::max(g.k(), g.cout) * g.p());
  return std::clamp<std::size_t>(kColumnBudget / per_sample, 1, std::max<std::size_t>(1, g.n));
}

// Output columns [lo, hi) whose input column ow*stride + kj - pad lies inside [0, w).
struct ValidRange {
  std::size_t lo, hi;
};

ValidRange valid_range(std::size_t kj, const ConvGeometry& g, std::size_t extent, std::size_t out_extent) {
  // ow*s + kj >= pad  and  ow*s + kj < extent + pad
  std::size_t lo = 0;
  if (g.pad > kj) lo = (g.pad - kj + g.stride - 1) / g.stride;
  std::size_t hi = 0;
  if (extent + g.pad > kj) hi = (extent + g.pad - kj - 1) / g.stride + 1;
  hi = std::min(hi, out_extent);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// Column block for output rows [oh0, oh1) of one sample: row k = (ci*kh + ki)*kw + kj,
// column (oh - oh0)*Wo + ow, rows `stride` elements apart.
template <typename T>
void im2col_rows(const T* x, const ConvGeometry& g, std::size_t oh0, std::size_t oh1, T* col, std::size_t stride) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const ValidRange rows = valid_range(ki, g, g.h, g.ho);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const ValidRange cr = valid_range(kj, g, g.w, g.wo);
        T* row = col + ((ci * g.kh + ki) * g.kw + kj) * stride;
        for (std::size_t oh = oh0; oh < oh1; ++oh) {
          T* out = row + (oh - oh0) * g.wo;
          if (oh < rows.lo || oh >= rows.hi) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* src = x + (ci * g.h + (oh * g.stride + ki - g.pad)) * g.w;
          std::fill(out, out + cr.lo, T(0));
          if (g.stride == 1) {
            const T* s0 = src + (cr.lo + kj - g.pad);
            std::copy(s0, s0 + (cr.hi - cr.lo), out + cr.lo);
          } else {
            for (std::size_t ow = cr.lo; ow < cr.hi; ++ow) out[ow] = src[ow * g.stride + kj - g.pad];
          }
          std::fill(out + cr.hi, out + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_rows(const T* col, const ConvGeometry& g, std::size_t oh0, std::size_t oh1, std::size_t stride, T* dx) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const ValidRange rows = valid_range(ki, g, g.h, g.ho);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const ValidRange cr = valid_range(kj, g, g.w, g.wo);
        const T* row = col + ((ci * g.kh + ki) * g.kw + kj) * stride;
        for (std::size_t oh = std::max(oh0, rows.lo); oh < std::min(oh1, rows.hi); ++oh) {
          T* dst = dx + (ci * g.h + (oh * g.stride + ki - g.pad)) * g.w;
          const T* src = row + (oh - oh0) * g.wo;
          if (g.stride == 1) {
            T* d0 = dst + kj - g.pad;
            for (std::size_t ow = cr.lo; ow < cr.hi; ++ow) d0[ow] += src[ow];
          } else {
            for (std::size_t ow = cr.lo; ow < cr.hi; ++ow) dst[ow * g.stride + kj - g.pad] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
void im2col(const T* input, const ConvGeometry& g, std::size_t n0, std::size_t nc, T* col) {
  const std::size_t P = g.p();
  for (std::size_t j = 0; j < nc; ++j) {
    im2col_rows(input + (n0 + j) * g.cin * g.h * g.w, g, 0, g.ho, col + j * P, nc * P);
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, std::size_t n0, std::size_t nc, T* grad_input) {
  const std::size_t P = g.p();
  for (std::size_t j = 0; j < nc; ++j) {
    col2im_rows(col + j * P, g, 0, g.ho, nc * P, grad_input + (n0 + j) * g.cin * g.h * g.w);
  }
}

// [N,C,P] block of samples n0..n0+nc  <->  [C, nc*P]
template <typename T>
void gather_channels(const T* src, std::size_t channels, std::size_t P, std::size_t n0, std::size_t nc, T* dst) {
  for (std::size_t j = 0; j < nc; ++j) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* s = src + ((n0 + j) * channels + c) * P;
      std::copy(s, s + P, dst + c * nc * P + j * P);
    }
  }
}

template <typename T>
void scatter_channels(const T* src, std::size_t channels, std::size_t P, std::size_t n0, std::size_t nc, T* dst) {
  for (std::size_t j = 0; j < nc; ++j) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* s = src + c * nc * P + j * P;
      std::copy(s, s + P, dst + ((n0 + j) * channels + c) * P);
    }
  }
}

// Fixed-order reductions with independent partial sums (keeps the pipeline busy while
// staying bit-reproducible).
template <typename T>
double sum_of(const T* x, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(x[i + l]);
  for (; i < n; ++i) acc[0] += static_cast<double>(x[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double sum_sq_dev(const T* x, std::size_t n, double mean) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) {
      const double d = static_cast<double>(x[i + l]) - mean;
      acc[l] += d * d;
    }
  for (; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    acc[0] += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// Sum of dy and of dy * xhat over one plane.
template <typename T>
void sum_dy_dot(const T* dy, const T* x, std::size_t n, T mean, T inv_std, double& sum_dy, double& sum_dot) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0}, b[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) {
      const double d = static_cast<double>(dy[i + l]);
      a[l] += d;
      b[l] += d * static_cast<double>((x[i + l] - mean) * inv_std);
    }
  for (; i < n; ++i) {
    a[0] += static_cast<double>(dy[i]);
    b[0] += static_cast<double>(dy[i]) * static_cast<double>((x[i] - mean) * inv_std);
  }
  sum_dy += ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
  sum_dot += ((b[0] + b[1]) + (b[2] + b[3])) + ((b[4] + b[5]) + (b[6] + b[7]));
}

// Elementwise kernels kept branch-free and alias-free so they vectorize.
template <typename T>
void normalize_affine(const T* __restrict x, std::size_t n, T mean, T inv_std, T gamma, T beta, T* __restrict y) {
  for (std::size_t p = 0; p < n; ++p) y[p] = gamma * ((x[p] - mean) * inv_std) + beta;
}

template <typename T>
void bn_input_grad(const T* __restrict dy, const T* __restrict x, std::size_t n, T mean, T inv_std, T scale,
                   T mean_dy, T mean_dy_xhat, T* __restrict dx) {
  for (std::size_t p = 0; p < n; ++p) dx[p] = scale * (dy[p] - mean_dy - ((x[p] - mean) * inv_std) * mean_dy_xhat);
}

struct Nchw {
  std::size_t n, c, h, w;
  std::size_t hw() const { return h * w; }
};

Nchw nchw(const Shape& s, const char* what) {
  require_rank(s, 4, what);
  return {s[0], s[1], s[2], s[3]};
}

template <typename T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

// Output rows per spatial tile when a single sample's column matrix exceeds the budget.
std::size_t tile_rows(const ConvGeometry& g) {
  const std::size_t per_row = std::max<std::size_t>(1, std::max(g.k(), g.cout) * g.wo);
  return std::clamp<std::size_t>(kColumnBudget / per_row, 1, g.ho);
}

bool tiled(const ConvGeometry& g) { return std::max(g.k(), g.cout) * g.p() > kColumnBudget; }

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& weight, Conv2dOptions opt) {
  const auto g = conv_geometry(input, weight, opt);
  return {g.n, g.cout, g.ho, g.wo};
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias,
                      Conv2dOptions opt) {
  const auto g = conv_geometry(input.shape(), weight.shape(), opt);
  if (!bias.empty() && bias.size() != g.cout) {
    fail(Errc::shape, "conv2d: bias has " + std::to_string(bias.size()) + " entries, expected " +
                          std::to_string(g.cout));
  }
  auto out = BasicTensor<T>::uninitialized({g.n, g.cout, g.ho, g.wo});
  const std::size_t K = g.k(), P = g.p();
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  ConstMatMap<T> W(weight.data(), ei(g.cout), ei(K));
  std::vector<T> col, result;
  if (tiled(g)) {
    const std::size_t rows = tile_rows(g);
    col.resize(K * rows * g.wo);
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* x = input.data() + n * g.cin * g.h * g.w;
      for (std::size_t oh0 = 0; oh0 < g.ho; oh0 += rows) {
        const std::size_t oh1 = std::min(g.ho, oh0 + rows), cols = (oh1 - oh0) * g.wo;
        im2col_rows(x, g, oh0, oh1, col.data(), cols);
        ConstMatMap<T> C(col.data(), ei(K), ei(cols));
        StridedMap<T> Y(out.data() + n * g.cout * P + oh0 * g.wo, ei(g.cout), ei(cols), Eigen::OuterStride<>(ei(P)));
        Y.noalias() = W * C;
      }
    }
  } else {
    const std::size_t chunk = chunk_size(g);
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t nc = std::min(chunk, g.n - n0);
      const T* col_ptr;
      if (g.pointwise() && nc == 1) {
        col_ptr = input.data() + n0 * K * P;
      } else {
        col.resize(K * nc * P);
        if (g.pointwise()) gather_channels(input.data(), g.cin, P, n0, nc, col.data());
        else im2col(input.data(), g, n0, nc, col.data());
        col_ptr = col.data();
      }
      T* y_ptr = out.data() + n0 * g.cout * P;
      if (nc > 1) {
        result.resize(g.cout * nc * P);
        y_ptr = result.data();
      }
      ConstMatMap<T> C(col_ptr, ei(K), ei(nc * P));
      MatMap<T> Y(y_ptr, ei(g.cout), ei(nc * P));
      Y.noalias() = W * C;
      if (nc > 1) scatter_channels(result.data(), g.cout, P, n0, nc, out.data());
    }
  }
  if (!bias.empty()) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t c = 0; c < g.cout; ++c) {
        T* o = out.data() + (n * g.cout + c) * P;
        for (std::size_t p = 0; p < P; ++p) o[p] += bias[c];
      }
  }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_output, Conv2dOptions opt, bool with_bias,
                               bool need_input_grad) {
  const auto g = conv_geometry(input.shape(), weight.shape(), opt);
  require_shape(grad_output.shape(), {g.n, g.cout, g.ho, g.wo}, "conv2d_backward grad_output");
  const std::size_t K = g.k(), P = g.p();
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Conv2dGrads<T> grads;
  grads.weight = BasicTensor<T>(weight.shape());
  if (need_input_grad) grads.input = BasicTensor<T>(input.shape());
  ConstMatMap<T> W(weight.data(), ei(g.cout), ei(K));
  MatMap<T> dW(grads.weight.data(), ei(g.cout), ei(K));
  std::vector<T> col, dy, dcol;
  if (tiled(g)) {
    const std::size_t rows = tile_rows(g);
    col.resize(K * rows * g.wo);
    if (need_input_grad) dcol.resize(K * rows * g.wo);
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* x = input.data() + n * g.cin * g.h * g.w;
      for (std::size_t oh0 = 0; oh0 < g.ho; oh0 += rows) {
        const std::size_t oh1 = std::min(g.ho, oh0 + rows), cols = (oh1 - oh0) * g.wo;
        im2col_rows(x, g, oh0, oh1, col.data(), cols);
        ConstMatMap<T> C(col.data(), ei(K), ei(cols));
        ConstStridedMap<T> DY(grad_output.data() + n * g.cout * P + oh0 * g.wo, ei(g.cout), ei(cols),
                              Eigen::OuterStride<>(ei(P)));
        dW.noalias() += DY * C.transpose();
        if (need_input_grad) {
          MatMap<T> DC(dcol.data(), ei(K), ei(cols));
          DC.noalias() = W.transpose() * DY;
          col2im_rows(dcol.data(), g, oh0, oh1, cols, grads.input.data() + n * g.cin * g.h * g.w);
        }
      }
    }
  } else {
    const std::size_t chunk = chunk_size(g);
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t nc = std::min(chunk, g.n - n0);
      const auto cols = ei(nc * P);
      const T* col_ptr;
      if (g.pointwise() && nc == 1) {
        col_ptr = input.data() + n0 * K * P;
      } else {
        col.resize(K * nc * P);
        if (g.pointwise()) gather_channels(input.data(), g.cin, P, n0, nc, col.data());
        else im2col(input.data(), g, n0, nc, col.data());
        col_ptr = col.data();
      }
      const T* dy_ptr = grad_output.data() + n0 * g.cout * P;
      if (nc > 1) {
        dy.resize(g.cout * nc * P);
        gather_channels(grad_output.data(), g.cout, P, n0, nc, dy.data());
        dy_ptr = dy.data();
      }
      ConstMatMap<T> C(col_ptr, ei(K), cols);
      ConstMatMap<T> DY(dy_ptr, ei(g.cout), cols);
      dW.noalias() += DY * C.transpose();
      if (need_input_grad) {
        dcol.resize(K * nc * P);
        MatMap<T> DC(dcol.data(), ei(K), cols);
        DC.noalias() = W.transpose() * DY;
        if (g.pointwise()) {
          scatter_channels(dcol.data(), g.cin, P, n0, nc, grads.input.data());
        } else {
          col2im(dcol.data(), g, n0, nc, grads.input.data());
        }
      }
    }
  }
  if (with_bias) {
    grads.bias = BasicTensor<T>({g.cout});
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t c = 0; c < g.cout; ++c) {
        const T* d = grad_output.data() + (n * g.cout + c) * P;
        T acc = 0;
        for (std::size_t p = 0; p < P; ++p) acc += d[p];
        grads.bias[c] += acc;
      }
  }
  return grads;
}

// ---------------------------------------------------------------------------

namespace {

// Everything but the cached input, which the public overloads copy or move in.
template <typename T>
BasicTensor<T> bn_train_core(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                             const BatchNormOptions& opt, RunningStats<T>* update, BatchNormCache<T>* cache) {
  const auto s = nchw(input.shape(), "batchnorm2d input");
  if (gamma.size() != s.c || beta.size() != s.c) fail(Errc::shape, "batchnorm2d: gamma/beta size must equal channel count");
  const std::size_t M = s.n * s.hw();
  if (M < 2) {
    fail(Errc::invalid_argument,
         "batchnorm2d: train mode needs at least 2 values per channel (N*H*W = " + std::to_string(M) + ")");
  }
  auto out = BasicTensor<T>::uninitialized(input.shape());
  std::vector<T> means(s.c), inv_stds(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0;
    for (std::size_t n = 0; n < s.n; ++n) sum += sum_of(input.data() + (n * s.c + c) * s.hw(), s.hw());
    const double mean = sum / static_cast<double>(M);
    double sq = 0;
    for (std::size_t n = 0; n < s.n; ++n) sq += sum_sq_dev(input.data() + (n * s.c + c) * s.hw(), s.hw(), mean);
    const double var = sq / static_cast<double>(M);
    const double inv_std = 1.0 / std::sqrt(var + opt.epsilon);
    const T tm = static_cast<T>(mean), ti = static_cast<T>(inv_std);
    means[c] = tm;
    inv_stds[c] = ti;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * s.hw();
      normalize_affine(input.data() + off, s.hw(), tm, ti, gamma[c], beta[c], out.data() + off);
    }
    if (update) {
      const double unbiased = sq / static_cast<double>(M - 1);
      const double m = opt.momentum;
      update->mean[c] = static_cast<T>((1.0 - m) * update->mean[c] + m * mean);
      update->var[c] = static_cast<T>((1.0 - m) * update->var[c] + m * unbiased);
    }
  }
  if (cache) {
    cache->mode = Mode::train;
    cache->mean = std::move(means);
    cache->inv_std = std::move(inv_stds);
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> batchnorm2d_train(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                                 const BatchNormOptions& opt, RunningStats<T>* update, BatchNormCache<T>* cache) {
  auto out = bn_train_core(input, gamma, beta, opt, update, cache);
  if (cache) cache->input = input;
  return out;
}

template <typename T>
BasicTensor<T> batchnorm2d_train(BasicTensor<T>&& input, std::span<const T> gamma, std::span<const T> beta,
                                 const BatchNormOptions& opt, RunningStats<T>* update, BatchNormCache<T>* cache) {
  auto out = bn_train_core(std::as_const(input), gamma, beta, opt, update, cache);
  if (cache) cache->input = std::move(input);
  return out;
}

template <typename T>
BasicTensor<T> batchnorm2d_eval(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                                std::span<const T> running_mean, std::span<const T> running_var,
                                const BatchNormOptions& opt, BatchNormCache<T>* cache) {
  const auto s = nchw(input.shape(), "batchnorm2d input");
  if (gamma.size() != s.c || beta.size() != s.c || running_mean.size() != s.c || running_var.size() != s.c) {
    fail(Errc::shape, "batchnorm2d: parameter sizes must equal channel count " + std::to_string(s.c));
  }
  auto out = BasicTensor<T>::uninitialized(input.shape());
  std::vector<T> inv_stds(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    const T inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + opt.epsilon));
    inv_stds[c] = inv_std;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * s.hw();
      normalize_affine(input.data() + off, s.hw(), running_mean[c], inv_std, gamma[c], beta[c], out.data() + off);
    }
  }
  if (cache) {
    cache->mode = Mode::eval;
    cache->input = input;
    cache->mean.assign(running_mean.begin(), running_mean.end());
    cache->inv_std = std::move(inv_stds);
  }
  return out;
}

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                           RunningStats<T> stats, Mode mode, const BatchNormOptions& opt, BatchNormCache<T>* cache) {
  if (mode == Mode::train) return batchnorm2d_train(input, gamma, beta, opt, &stats, cache);
  return batchnorm2d_eval<T>(input, gamma, beta, stats.mean, stats.var, opt, cache);
}

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                       const BasicTensor<T>& grad_output) {
  const auto s = nchw(cache.input.shape(), "batchnorm2d cache");
  require_shape(grad_output.shape(), cache.input.shape(), "batchnorm2d_backward grad_output");
  BatchNormGrads<T> g{BasicTensor<T>::uninitialized(grad_output.shape()), BasicTensor<T>({s.c}),
                      BasicTensor<T>({s.c})};
  const double M = static_cast<double>(s.n * s.hw());
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * s.hw();
      sum_dy_dot(grad_output.data() + off, cache.input.data() + off, s.hw(), cache.mean[c], cache.inv_std[c], sum_dy,
                 sum_dy_xhat);
    }
    g.gamma[c] = static_cast<T>(sum_dy_xhat);
    g.beta[c] = static_cast<T>(sum_dy);
    const T scale = gamma[c] * cache.inv_std[c];
    if (cache.mode == Mode::eval) {
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t off = (n * s.c + c) * s.hw();
        for (std::size_t p = 0; p < s.hw(); ++p) g.input[off + p] = scale * grad_output[off + p];
      }
      continue;
    }
    const T mean_dy = static_cast<T>(sum_dy / M);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / M);
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * s.hw();
      bn_input_grad(grad_output.data() + off, cache.input.data() + off, s.hw(), cache.mean[c], cache.inv_std[c], scale,
                    mean_dy, mean_dy_xhat, g.input.data() + off);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  auto out = BasicTensor<T>::uninitialized(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <typename T>
void relu_inplace(BasicTensor<T>& x) {
  T* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) p[i] = p[i] > T(0) ? p[i] : T(0);
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& reference, const BasicTensor<T>& grad_output) {
  BasicTensor<T> out = grad_output;
  relu_backward_inplace(reference, out);
  return out;
}

template <typename T>
void relu_backward_inplace(const BasicTensor<T>& reference, BasicTensor<T>& grad) {
  require_shape(grad.shape(), reference.shape(), "relu_backward grad_output");
  const T* r = reference.data();
  T* g = grad.data();
  for (std::size_t i = 0; i < reference.size(); ++i) g[i] = r[i] > T(0) ? g[i] : T(0);
}

template <typename T>
MaxPoolResult<T> maxpool2d(const BasicTensor<T>& input, Pool2dOptions opt) {
  const auto s = nchw(input.shape(), "maxpool2d input");
  if (opt.kernel < 1 || opt.stride < 1) fail(Errc::shape, "maxpool2d: kernel and stride must be >= 1");
  if (opt.padding >= opt.kernel) fail(Errc::shape, "maxpool2d: padding must be smaller than the kernel");
  const std::size_t hp = s.h + 2 * opt.padding, wp = s.w + 2 * opt.padding;
  if (opt.kernel > hp || opt.kernel > wp) {
    fail(Errc::shape, "maxpool2d: kernel " + std::to_string(opt.kernel) + " exceeds input " +
                          shape_to_string(input.shape()));
  }
  const std::size_t ho = (hp - opt.kernel) / opt.stride + 1, wo = (wp - opt.kernel) / opt.stride + 1;
  MaxPoolResult<T> r{BasicTensor<T>::uninitialized({s.n, s.c, ho, wo}), std::vector<std::size_t>(s.n * s.c * ho * wo)};
  if (opt.kernel == 2 && opt.stride == 2 && opt.padding == 0) {
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
      const std::size_t base = nc * s.hw();
      for (std::size_t oh = 0; oh < ho; ++oh) {
        const std::size_t r0 = base + 2 * oh * s.w, r1 = r0 + s.w;
        for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
          std::size_t idx = r0 + 2 * ow;
          T best = input[idx];
          const std::size_t cand[3] = {r0 + 2 * ow + 1, r1 + 2 * ow, r1 + 2 * ow + 1};
          for (std::size_t c : cand) {
            const T v = input[c];
            idx = v > best ? c : idx;
            best = v > best ? v : best;
          }
          r.output[o] = best;
          r.argmax[o] = idx;
        }
      }
    }
    return r;
  }
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const std::size_t base = nc * s.hw();
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = std::numeric_limits<std::size_t>::max();
        for (std::size_t ki = 0; ki < opt.kernel; ++ki) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * opt.stride + ki) - static_cast<std::ptrdiff_t>(opt.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.h)) continue;
          for (std::size_t kj = 0; kj < opt.kernel; ++kj) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * opt.stride + kj) - static_cast<std::ptrdiff_t>(opt.padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(s.w)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(ih) * s.w + static_cast<std::size_t>(iw);
            if (best_idx == std::numeric_limits<std::size_t>::max() || input[idx] > best) {
              best = input[idx];
              best_idx = idx;
            }
          }
        }
        r.output[o] = best;
        r.argmax[o] = best_idx;
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> maxpool2d_backward(std::span<const std::size_t> argmax, const BasicTensor<T>& grad_output,
                                  const Shape& input_shape) {
  if (argmax.size() != grad_output.size()) fail(Errc::shape, "maxpool2d_backward: argmax/grad size mismatch");
  BasicTensor<T> dx(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += grad_output[o];
  return dx;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  const auto s = nchw(input.shape(), "global_avg_pool input");
  BasicTensor<T> out({s.n, s.c});
  for (std::size_t i = 0; i < s.n * s.c; ++i) {
    const T* x = input.data() + i * s.hw();
    double acc = 0;
    for (std::size_t p = 0; p < s.hw(); ++p) acc += x[p];
    out[i] = static_cast<T>(acc / static_cast<double>(s.hw()));
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_output, const Shape& input_shape) {
  const auto s = nchw(input_shape, "global_avg_pool input");
  require_shape(grad_output.shape(), {s.n, s.c}, "global_avg_pool_backward grad_output");
  BasicTensor<T> dx(input_shape);
  const T inv = static_cast<T>(1.0 / static_cast<double>(s.hw()));
  for (std::size_t i = 0; i < s.n * s.c; ++i) {
    T* d = dx.data() + i * s.hw();
    std::fill(d, d + s.hw(), grad_output[i] * inv);
  }
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias) {
  require_rank(input.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    fail(Errc::shape, "linear: input width " + std::to_string(din) + " does not match weight " +
                          shape_to_string(weight.shape()));
  }
  if (!bias.empty() && bias.size() != dout) {
    fail(Errc::shape, "linear: bias has " + std::to_string(bias.size()) + " entries, expected " + std::to_string(dout));
  }
  BasicTensor<T> out({n, dout});
  ConstMatMap<T> X(input.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(din));
  ConstMatMap<T> W(weight.data(), static_cast<Eigen::Index>(dout), static_cast<Eigen::Index>(din));
  MatMap<T> Y(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dout));
  Y.noalias() = X * W.transpose();
  if (!bias.empty()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dout; ++j) out.at(i, j) += bias[j];
  }
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_output, bool need_input_grad) {
  const std::size_t n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  require_shape(grad_output.shape(), {n, dout}, "linear_backward grad_output");
  LinearGrads<T> g{BasicTensor<T>(), BasicTensor<T>(weight.shape()), BasicTensor<T>({dout})};
  ConstMatMap<T> X(input.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(din));
  ConstMatMap<T> W(weight.data(), static_cast<Eigen::Index>(dout), static_cast<Eigen::Index>(din));
  ConstMatMap<T> DY(grad_output.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dout));
  MatMap<T> DW(g.weight.data(), static_cast<Eigen::Index>(dout), static_cast<Eigen::Index>(din));
  DW.noalias() = DY.transpose() * X;
  if (need_input_grad) {
    g.input = BasicTensor<T>(input.shape());
    MatMap<T> DX(g.input.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(din));
    DX.noalias() = DY * W;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dout; ++j) g.bias[j] += grad_output.at(i, j);
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& input, double epsilon) {
  require_rank(input.shape(), 2, "l2_normalize input");
  const std::size_t n = input.dim(0), d = input.dim(1);
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(input.at(i, j)) * input.at(i, j);
    const T denom = static_cast<T>(std::max(std::sqrt(sq), epsilon));
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = input.at(i, j) / denom;
  }
  return out;
}

template <typename T>
BasicTensor<T> l2_normalize_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output, double epsilon) {
  require_rank(input.shape(), 2, "l2_normalize input");
  require_shape(grad_output.shape(), input.shape(), "l2_normalize_backward grad_output");
  const std::size_t n = input.dim(0), d = input.dim(1);
  BasicTensor<T> dx(input.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(input.at(i, j)) * input.at(i, j);
    const double norm = std::sqrt(sq);
    if (norm <= epsilon) {
      // constant denominator: the map is linear here
      for (std::size_t j = 0; j < d; ++j) dx.at(i, j) = static_cast<T>(grad_output.at(i, j) / epsilon);
      continue;
    }
    double dot = 0;  // <y, dy>
    for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(input.at(i, j)) / norm * grad_output.at(i, j);
    for (std::size_t j = 0; j < d; ++j) {
      const double y = input.at(i, j) / norm;
      dx.at(i, j) = static_cast<T>((grad_output.at(i, j) - y * dot) / norm);
    }
  }
  return dx;
}

template <typename T>
BasicTensor<T> cosine_similarity_matrix(const BasicTensor<T>& img, const BasicTensor<T>& txt, double epsilon) {
  require_rank(img.shape(), 2, "cosine_similarity img");
  require_rank(txt.shape(), 2, "cosine_similarity txt");
  if (img.dim(1) != txt.dim(1)) {
    fail(Errc::shape, "cosine_similarity: embedding widths differ (" + std::to_string(img.dim(1)) + " vs " +
                          std::to_string(txt.dim(1)) + ")");
  }
  return linear<T>(l2_normalize(img, epsilon), l2_normalize(txt, epsilon), {});
}

template <typename T>
CosineGrads<T> cosine_similarity_backward(const BasicTensor<T>& img, const BasicTensor<T>& txt,
                                          const BasicTensor<T>& grad_output, double epsilon) {
  const auto img_n = l2_normalize(img, epsilon);
  const auto txt_n = l2_normalize(txt, epsilon);
  require_shape(grad_output.shape(), {img.dim(0), txt.dim(0)}, "cosine_similarity_backward grad_output");
  // S = In * Tn^T is linear(In, Tn): dIn = dS * Tn, dTn = dS^T * In
  auto g = linear_backward(img_n, txt_n, grad_output, true);
  return {l2_normalize_backward(img, g.input, epsilon), l2_normalize_backward(txt, g.weight, epsilon)};
}

// ---------------------------------------------------------------------------

namespace {
void check_labels(const Shape& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "softmax_cross_entropy logits");
  if (logits[0] == 0) fail(Errc::invalid_argument, "softmax_cross_entropy: empty batch");
  if (labels.size() != logits[0]) {
    fail(Errc::shape, "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(logits[0]) + " rows");
  }
  for (auto l : labels) {
    if (l >= logits[1]) {
      fail(Errc::invalid_argument, "softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " +
                                       std::to_string(logits[1]) + ")");
    }
  }
}
}  // namespace

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  BasicTensor<T> p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T mx = logits.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(logits.at(i, j) - mx));
    for (std::size_t j = 0; j < c; ++j) p.at(i, j) = static_cast<T>(std::exp(static_cast<double>(logits.at(i, j) - mx)) / sum);
  }
  return p;
}

template <typename T>
T softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::size_t> labels) {
  check_labels(logits.shape(), labels);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max<double>(mx, logits.at(i, j));
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(logits.at(i, j) - mx);
    total += (std::log(sum) + mx) - logits.at(i, labels[i]);
  }
  return static_cast<T>(total / static_cast<double>(n));
}

template <typename T>
BasicTensor<T> softmax_cross_entropy_backward(const BasicTensor<T>& logits, std::span<const std::size_t> labels) {
  check_labels(logits.shape(), labels);
  auto g = softmax_rows(logits);
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(logits.dim(0)));
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    g.at(i, labels[i]) -= T(1);
    for (std::size_t j = 0; j < logits.dim(1); ++j) g.at(i, j) *= inv_n;
  }
  return g;
}

#define LVLM_INSTANTIATE_OPS(T)                                                                                   \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>,            \
                                    Conv2dOptions);                                                              \
  template Conv2dGrads<T> conv2d_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                             Conv2dOptions, bool, bool);                                         \
  template BasicTensor<T> batchnorm2d_train<T>(const BasicTensor<T>&, std::span<const T>, std::span<const T>,    \
                                               const BatchNormOptions&, RunningStats<T>*, BatchNormCache<T>*);   \
  template BasicTensor<T> batchnorm2d_train<T>(BasicTensor<T>&&, std::span<const T>, std::span<const T>,         \
                                               const BatchNormOptions&, RunningStats<T>*, BatchNormCache<T>*);   \
  template BasicTensor<T> batchnorm2d_eval<T>(const BasicTensor<T>&, std::span<const T>, std::span<const T>,     \
                                              std::span<const T>, std::span<const T>, const BatchNormOptions&,   \
                                              BatchNormCache<T>*);                                               \
  template BasicTensor<T> batchnorm2d<T>(const BasicTensor<T>&, std::span<const T>, std::span<const T>,          \
                                         RunningStats<T>, Mode, const BatchNormOptions&, BatchNormCache<T>*);    \
  template BatchNormGrads<T> batchnorm2d_backward<T>(const BatchNormCache<T>&, std::span<const T>,              \
                                                     const BasicTensor<T>&);                                     \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> relu_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&);                        \
  template void relu_inplace<T>(BasicTensor<T>&);                                                                \
  template void relu_backward_inplace<T>(const BasicTensor<T>&, BasicTensor<T>&);                                \
  template MaxPoolResult<T> maxpool2d<T>(const BasicTensor<T>&, Pool2dOptions);                                  \
  template BasicTensor<T> maxpool2d_backward<T>(std::span<const std::size_t>, const BasicTensor<T>&,             \
                                                const Shape&);                                                   \
  template BasicTensor<T> global_avg_pool<T>(const BasicTensor<T>&);                                             \
  template BasicTensor<T> global_avg_pool_backward<T>(const BasicTensor<T>&, const Shape&);                      \
  template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>);           \
  template LinearGrads<T> linear_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                             bool);                                                              \
  template BasicTensor<T> l2_normalize<T>(const BasicTensor<T>&, double);                                        \
  template BasicTensor<T> l2_normalize_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&, double);        \
  template BasicTensor<T> cosine_similarity_matrix<T>(const BasicTensor<T>&, const BasicTensor<T>&, double);     \
  template CosineGrads<T> cosine_similarity_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                                        const BasicTensor<T>&, double);                          \
  template BasicTensor<T> softmax_rows<T>(const BasicTensor<T>&);                                                \
  template T softmax_cross_entropy<T>(const BasicTensor<T>&, std::span<const std::size_t>);                      \
  template BasicTensor<T> softmax_cross_entropy_backward<T>(const BasicTensor<T>&, std::span<const std::size_t>);

LVLM_INSTANTIATE_OPS(float)
LVLM_INSTANTIATE_OPS(double)

}  // namespace lvlm
