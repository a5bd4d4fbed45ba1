#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fedsim {

struct Segment {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t size() const;
  bool operator==(const Segment&) const = default;
};

// Flat 64-bit parameter storage with a named, shaped layout.
class ParameterVector {
 public:
  ParameterVector() = default;
  explicit ParameterVector(std::vector<Segment> layout);
  ParameterVector(std::vector<Segment> layout, std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  const std::vector<Segment>& layout() const { return layout_; }
  std::size_t segment_offset(std::string_view name) const;
  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;

  bool same_layout(const ParameterVector& other) const { return layout_ == other.layout_; }
  bool all_finite() const;
  // FNV-1a over the raw bytes of the values.
  std::uint64_t fingerprint() const;

  bool operator==(const ParameterVector&) const = default;

 private:
  std::vector<Segment> layout_;
  std::vector<double> values_;
};

// Row-major feature matrix with dense class labels. Also serves as the batch
// type: model operations take a dataset plus a list of row indices.
struct Dataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> features;
  std::vector<int> labels;

  std::size_t rows() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * dim, dim};
  }
  // Throws DataError on broken invariants.
  void validate() const;
};

enum class ModelKind { kLogistic, kMlp, kAdapter, kSoftPrompt };

class ModelSpec {
 public:
  static ModelSpec logistic(std::size_t input_dim, std::size_t classes);
  static ModelSpec mlp(std::size_t input_dim, std::size_t hidden, std::size_t classes);
  // Frozen backbone (logistic or MLP) with a trainable linear head on the
  // backbone's penultimate activations.
  static ModelSpec adapter(const ModelSpec& backbone, std::size_t head_classes);
  // Frozen inner model (logistic or MLP) fed concat(x, prompt). The inner input
  // dimension must exceed prompt_len; the wrapper's input is the remainder.
  static ModelSpec soft_prompt(const ModelSpec& inner, std::size_t prompt_len);

  ModelKind kind() const { return kind_; }
  std::size_t input_dim() const;
  std::size_t classes() const;
  std::size_t hidden() const { return hidden_; }
  std::size_t prompt_len() const { return prompt_len_; }
  // Backbone for adapters, inner model for soft prompts.
  const ModelSpec& child() const;

  std::vector<Segment> layout() const;
  std::vector<bool> trainable_mask() const;
  std::size_t param_count() const;
  std::string describe() const;

 private:
  ModelSpec() = default;

  ModelKind kind_ = ModelKind::kLogistic;
  std::size_t input_dim_ = 0;
  std::size_t hidden_ = 0;
  std::size_t classes_ = 0;
  std::size_t prompt_len_ = 0;
  std::shared_ptr<const ModelSpec> child_;
};

// Glorot-uniform weights, zero biases and prompt. Deterministic in seed.
ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed);

std::vector<double> forward(const ModelSpec& spec, const ParameterVector& params,
                            std::span<const double> features);

// Argmax of the scores, lowest index on ties.
std::size_t predict(const ModelSpec& spec, const ParameterVector& params,
                    std::span<const double> features);

struct LossAndGrad {
  double loss = 0.0;
  ParameterVector grad;
};

// Mean softmax cross-entropy over the selected rows. Gradient entries of
// frozen segments are exactly zero.
LossAndGrad loss_and_grad(const ModelSpec& spec, const ParameterVector& params,
                          const Dataset& data, std::span<const std::size_t> rows);
LossAndGrad loss_and_grad(const ModelSpec& spec, const ParameterVector& params,
                          const Dataset& data);

double mean_loss(const ModelSpec& spec, const ParameterVector& params,
                 const Dataset& data, std::span<const std::size_t> rows);

ParameterVector finite_diff_grad(const ModelSpec& spec, const ParameterVector& params,
                                 const Dataset& data, std::span<const std::size_t> rows,
                                 double h);

// One shuffled pass of minibatch SGD. Throws NumericError if a step leaves
// non-finite parameters.
ParameterVector sgd_epoch(const ModelSpec& spec, ParameterVector params,
                          const Dataset& data, std::span<const std::size_t> rows,
                          double lr, std::size_t batch_size, std::uint64_t seed);

// Throws DimensionError unless params carries the spec's layout.
void check_layout(const ModelSpec& spec, const ParameterVector& params);

}  // namespace fedsim
