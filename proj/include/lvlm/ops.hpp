#pragma once

// Differentiable primitives. Every forward op has a matching *_backward that maps the
// gradient of a scalar objective w.r.t. the op output onto its inputs/parameters.
// All reductions run sequentially in a fixed order, so results are bit-reproducible.

#include <cstddef>
#include <span>
#include <vector>

#include "lvlm/tensor.hpp"

namespace lvlm {

enum class Mode { train, eval };

/// Guard for L2 norms: rows are divided by max(norm, kNormEpsilon).
inline constexpr double kNormEpsilon = 1e-12;

// ---------------------------------------------------------------------------
// conv2d: input [N,Cin,H,W], weight [Cout,Cin,kh,kw], optional bias [Cout].

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename T>
struct Conv2dGrads {
  BasicTensor<T> input;   // empty when not requested
  BasicTensor<T> weight;
  BasicTensor<T> bias;    // empty when the conv has no bias
};

Shape conv2d_output_shape(const Shape& input, const Shape& weight, Conv2dOptions opt);

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias,
                      Conv2dOptions opt = {});

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_output, Conv2dOptions opt, bool with_bias,
                               bool need_input_grad = true);

// ---------------------------------------------------------------------------
// batchnorm2d over [N,C,H,W], per-channel statistics.

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Running statistics a train-mode pass updates (exponential moving average).
template <typename T>
struct RunningStats {
  std::span<T> mean;
  std::span<T> var;
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::train;
  BasicTensor<T> input;    // x-hat is recomputed from this in backward
  std::vector<T> mean;     // per channel
  std::vector<T> inv_std;  // per channel
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

/// Train mode normalizes with batch statistics (biased variance) and, if `update` is
/// non-null, blends the unbiased batch variance and the batch mean into it.
template <typename T>
BasicTensor<T> batchnorm2d_train(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                                 const BatchNormOptions& opt, RunningStats<T>* update,
                                 BatchNormCache<T>* cache = nullptr);

/// Same, but the cache takes ownership of `input` instead of copying it.
template <typename T>
BasicTensor<T> batchnorm2d_train(BasicTensor<T>&& input, std::span<const T> gamma, std::span<const T> beta,
                                 const BatchNormOptions& opt, RunningStats<T>* update, BatchNormCache<T>* cache);

template <typename T>
BasicTensor<T> batchnorm2d_eval(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                                std::span<const T> running_mean, std::span<const T> running_var,
                                const BatchNormOptions& opt, BatchNormCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                           RunningStats<T> stats, Mode mode, const BatchNormOptions& opt,
                           BatchNormCache<T>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                       const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// `reference` may be either the relu input or its output: the mask is reference > 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& reference, const BasicTensor<T>& grad_output);
template <typename T>
void relu_inplace(BasicTensor<T>& x);
template <typename T>
void relu_backward_inplace(const BasicTensor<T>& reference, BasicTensor<T>& grad);

struct Pool2dOptions {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;  // padded cells never win
};

template <typename T>
struct MaxPoolResult {
  BasicTensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output cell; first maximum wins ties
};

template <typename T>
MaxPoolResult<T> maxpool2d(const BasicTensor<T>& input, Pool2dOptions opt);

template <typename T>
BasicTensor<T> maxpool2d_backward(std::span<const std::size_t> argmax, const BasicTensor<T>& grad_output,
                                  const Shape& input_shape);

/// [N,C,H,W] -> [N,C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_output, const Shape& input_shape);

// ---------------------------------------------------------------------------
// linear: out = input * weight^T + bias. input [N,Din], weight [Dout,Din].

template <typename T>
struct LinearGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias);

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_output, bool need_input_grad = true);

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& input, double epsilon = kNormEpsilon);

template <typename T>
BasicTensor<T> l2_normalize_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output,
                                     double epsilon = kNormEpsilon);

/// Entry (i, c) = <img_i, txt_c> / (|img_i| |txt_c|). img [N,D], txt [C,D] -> [N,C].
template <typename T>
BasicTensor<T> cosine_similarity_matrix(const BasicTensor<T>& img, const BasicTensor<T>& txt,
                                        double epsilon = kNormEpsilon);

template <typename T>
struct CosineGrads {
  BasicTensor<T> img;
  BasicTensor<T> txt;
};

template <typename T>
CosineGrads<T> cosine_similarity_backward(const BasicTensor<T>& img, const BasicTensor<T>& txt,
                                          const BasicTensor<T>& grad_output, double epsilon = kNormEpsilon);

// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits);

/// Mean over rows of -log softmax(logits)[label].
template <typename T>
T softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::size_t> labels);

/// (softmax(logits) - one_hot(labels)) / N
template <typename T>
BasicTensor<T> softmax_cross_entropy_backward(const BasicTensor<T>& logits, std::span<const std::size_t> labels);

}  // namespace lvlm
