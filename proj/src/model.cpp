#include "fedsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fedsim/error.hpp"
#include "fedsim/seed.hpp"

namespace fedsim {

std::size_t Segment::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace {

std::size_t layout_size(const std::vector<Segment>& layout) {
  std::size_t n = 0;
  for (const auto& s : layout) n += s.size();
  return n;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace

ParameterVector::ParameterVector(std::vector<Segment> layout)
    : layout_(std::move(layout)), values_(layout_size(layout_), 0.0) {}

ParameterVector::ParameterVector(std::vector<Segment> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (layout_size(layout_) != values_.size()) {
    throw DimensionError("layout describes " + std::to_string(layout_size(layout_)) +
                         " values but " + std::to_string(values_.size()) + " were given");
  }
}

std::size_t ParameterVector::segment_offset(std::string_view name) const {
  std::size_t offset = 0;
  for (const auto& s : layout_) {
    if (s.name == name) return offset;
    offset += s.size();
  }
  throw std::out_of_range("no parameter segment named '" + std::string(name) + "'");
}

std::span<double> ParameterVector::segment(std::string_view name) {
  const std::size_t offset = segment_offset(name);
  for (const auto& s : layout_) {
    if (s.name == name) return std::span<double>(values_).subspan(offset, s.size());
  }
  return {};
}

std::span<const double> ParameterVector::segment(std::string_view name) const {
  const std::size_t offset = segment_offset(name);
  for (const auto& s : layout_) {
    if (s.name == name) return std::span<const double>(values_).subspan(offset, s.size());
  }
  return {};
}

bool ParameterVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t ParameterVector::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values_) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void Dataset::validate() const {
  if (rows() == 0) throw DataError(DataError::Code::kEmptyBody, "dataset has no rows");
  if (dim == 0) throw DataError(DataError::Code::kInvalidArgument, "dataset has zero feature width");
  if (features.size() != rows() * dim) {
    throw DataError(DataError::Code::kRaggedRow,
                    "feature matrix holds " + std::to_string(features.size()) +
                        " values, expected " + std::to_string(rows()) + "x" +
                        std::to_string(dim));
  }
  for (std::size_t i = 0; i < rows(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError(DataError::Code::kInvalidArgument,
                      "row " + std::to_string(i) + ": label " + std::to_string(labels[i]) +
                          " outside [0, " + std::to_string(classes) + ")");
    }
  }
  for (double v : features) {
    if (!std::isfinite(v)) {
      throw DataError(DataError::Code::kNonNumeric, "dataset contains a non-finite feature");
    }
  }
}

// ---------------------------------------------------------------------------
// ModelSpec

ModelSpec ModelSpec::logistic(std::size_t input_dim, std::size_t classes) {
  if (input_dim < 1) throw std::invalid_argument("logistic model needs input_dim >= 1");
  if (classes < 2) throw std::invalid_argument("model needs classes >= 2");
  ModelSpec s;
  s.kind_ = ModelKind::kLogistic;
  s.input_dim_ = input_dim;
  s.classes_ = classes;
  return s;
}

ModelSpec ModelSpec::mlp(std::size_t input_dim, std::size_t hidden, std::size_t classes) {
  if (input_dim < 1) throw std::invalid_argument("mlp needs input_dim >= 1");
  if (hidden < 1) throw std::invalid_argument("mlp needs hidden >= 1");
  if (classes < 2) throw std::invalid_argument("model needs classes >= 2");
  ModelSpec s;
  s.kind_ = ModelKind::kMlp;
  s.input_dim_ = input_dim;
  s.hidden_ = hidden;
  s.classes_ = classes;
  return s;
}

ModelSpec ModelSpec::adapter(const ModelSpec& backbone, std::size_t head_classes) {
  if (backbone.kind_ != ModelKind::kLogistic && backbone.kind_ != ModelKind::kMlp) {
    throw std::invalid_argument("adapter backbone must be a logistic or mlp model");
  }
  if (head_classes < 2) throw std::invalid_argument("adapter head needs classes >= 2");
  ModelSpec s;
  s.kind_ = ModelKind::kAdapter;
  s.classes_ = head_classes;
  s.child_ = std::make_shared<const ModelSpec>(backbone);
  return s;
}

ModelSpec ModelSpec::soft_prompt(const ModelSpec& inner, std::size_t prompt_len) {
  if (inner.kind_ != ModelKind::kLogistic && inner.kind_ != ModelKind::kMlp) {
    throw std::invalid_argument("soft prompt inner model must be a logistic or mlp model");
  }
  if (prompt_len < 1) throw std::invalid_argument("soft prompt needs prompt_len >= 1");
  if (inner.input_dim_ <= prompt_len) {
    throw std::invalid_argument("soft prompt inner input dimension " +
                                std::to_string(inner.input_dim_) +
                                " leaves no room for features after a prompt of length " +
                                std::to_string(prompt_len));
  }
  ModelSpec s;
  s.kind_ = ModelKind::kSoftPrompt;
  s.prompt_len_ = prompt_len;
  s.child_ = std::make_shared<const ModelSpec>(inner);
  return s;
}

std::size_t ModelSpec::input_dim() const {
  switch (kind_) {
    case ModelKind::kAdapter: return child_->input_dim();
    case ModelKind::kSoftPrompt: return child_->input_dim() - prompt_len_;
    default: return input_dim_;
  }
}

std::size_t ModelSpec::classes() const {
  return kind_ == ModelKind::kSoftPrompt ? child_->classes() : classes_;
}

const ModelSpec& ModelSpec::child() const {
  if (!child_) throw std::logic_error("model kind has no child model");
  return *child_;
}

namespace {

// Width of the activations a backbone exposes to an adapter head.
std::size_t representation_dim(const ModelSpec& backbone) {
  return backbone.kind() == ModelKind::kMlp ? backbone.hidden() : backbone.input_dim();
}

std::vector<Segment> prefixed(std::vector<Segment> segments, const std::string& prefix) {
  for (auto& s : segments) s.name = prefix + s.name;
  return segments;
}

}  // namespace

std::vector<Segment> ModelSpec::layout() const {
  switch (kind_) {
    case ModelKind::kLogistic:
      return {{"W", {classes_, input_dim_}}, {"b", {classes_}}};
    case ModelKind::kMlp:
      return {{"W1", {hidden_, input_dim_}},
              {"b1", {hidden_}},
              {"W2", {classes_, hidden_}},
              {"b2", {classes_}}};
    case ModelKind::kAdapter: {
      auto out = prefixed(child_->layout(), "backbone.");
      out.push_back({"head.W", {classes_, representation_dim(*child_)}});
      out.push_back({"head.b", {classes_}});
      return out;
    }
    case ModelKind::kSoftPrompt: {
      std::vector<Segment> out{{"prompt", {prompt_len_}}};
      for (auto& s : prefixed(child_->layout(), "inner.")) out.push_back(std::move(s));
      return out;
    }
  }
  return {};
}

std::vector<bool> ModelSpec::trainable_mask() const {
  switch (kind_) {
    case ModelKind::kAdapter: {
      std::vector<bool> mask(child_->layout().size(), false);
      mask.push_back(true);
      mask.push_back(true);
      return mask;
    }
    case ModelKind::kSoftPrompt: {
      std::vector<bool> mask{true};
      mask.resize(1 + child_->layout().size(), false);
      return mask;
    }
    default:
      return std::vector<bool>(layout().size(), true);
  }
}

std::size_t ModelSpec::param_count() const { return layout_size(layout()); }

std::string ModelSpec::describe() const {
  std::ostringstream os;
  switch (kind_) {
    case ModelKind::kLogistic: os << "logistic(" << input_dim_ << "," << classes_ << ")"; break;
    case ModelKind::kMlp:
      os << "mlp(" << input_dim_ << "," << hidden_ << "," << classes_ << ")";
      break;
    case ModelKind::kAdapter: os << "adapter(" << child_->describe() << "," << classes_ << ")"; break;
    case ModelKind::kSoftPrompt:
      os << "soft_prompt(" << child_->describe() << "," << prompt_len_ << ")";
      break;
  }
  return os.str();
}

void check_layout(const ModelSpec& spec, const ParameterVector& params) {
  const auto expected = spec.layout();
  if (params.layout() == expected) return;
  std::ostringstream os;
  os << "parameter layout does not match " << spec.describe() << ": expected";
  for (const auto& s : expected) os << ' ' << s.name << shape_string(s.shape);
  os << ", got";
  for (const auto& s : params.layout()) os << ' ' << s.name << shape_string(s.shape);
  throw DimensionError(os.str());
}

// ---------------------------------------------------------------------------
// Initialization

ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParameterVector params(spec.layout());
  Rng rng(seed);
  std::size_t offset = 0;
  for (const auto& seg : params.layout()) {
    if (seg.shape.size() == 2) {
      const double fan_out = static_cast<double>(seg.shape[0]);
      const double fan_in = static_cast<double>(seg.shape[1]);
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-a, a);
      for (std::size_t i = 0; i < seg.size(); ++i) params[offset + i] = dist(rng);
    }
    offset += seg.size();
  }
  return params;
}

// ---------------------------------------------------------------------------
// Evaluation and backpropagation

namespace {

// A logistic (hidden == 0) or one-hidden-layer ReLU network stored
// contiguously at `offset` within the full parameter vector.
struct DenseNet {
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::size_t out = 0;
  std::size_t offset = 0;

  static DenseNet of(const ModelSpec& spec, std::size_t offset) {
    return {spec.input_dim(), spec.kind() == ModelKind::kMlp ? spec.hidden() : 0,
            spec.classes(), offset};
  }

  std::size_t size() const {
    return hidden == 0 ? out * in + out : hidden * in + hidden + out * hidden + out;
  }
};

// y = W x + b with W stored row-major [rows, cols] at p, b directly after.
void affine(const double* p, std::size_t rows, std::size_t cols,
            std::span<const double> x, std::span<double> y) {
  const double* b = p + rows * cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* w = p + r * cols;
    double acc = b[r];
    for (std::size_t c = 0; c < cols; ++c) acc += w[c] * x[c];
    y[r] = acc;
  }
}

// Accumulates dW += dy x^T, db += dy into g (same layout as affine's p), and
// dx += W^T dy when dx is non-empty.
void affine_backward(const double* p, std::size_t rows, std::size_t cols,
                     std::span<const double> x, std::span<const double> dy, double* g,
                     std::span<double> dx) {
  if (g != nullptr) {
    double* gb = g + rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      double* gw = g + r * cols;
      for (std::size_t c = 0; c < cols; ++c) gw[c] += dy[r] * x[c];
      gb[r] += dy[r];
    }
  }
  if (!dx.empty()) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* w = p + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dx[c] += w[c] * dy[r];
    }
  }
}

// Per-example forward/backward workspace for any ModelSpec.
class Evaluator {
 public:
  Evaluator(const ModelSpec& spec, std::span<const double> params)
      : spec_(spec), params_(params) {
    switch (spec.kind()) {
      case ModelKind::kLogistic:
      case ModelKind::kMlp:
        net_ = DenseNet::of(spec, 0);
        break;
      case ModelKind::kAdapter: {
        const auto& backbone = spec.child();
        backbone_ = DenseNet::of(backbone, 0);
        net_ = {representation_dim(backbone), 0, spec.classes(), backbone_.size()};
        break;
      }
      case ModelKind::kSoftPrompt:
        net_ = DenseNet::of(spec.child(), spec.prompt_len());
        break;
    }
    input_.resize(net_.in);
    hidden_pre_.resize(std::max(net_.hidden, backbone_.hidden));
    hidden_.resize(hidden_pre_.size());
    scores_.resize(net_.out);
  }

  std::span<const double> scores(std::span<const double> x) {
    const double* p = params_.data();
    switch (spec_.kind()) {
      case ModelKind::kAdapter:
        if (backbone_.hidden > 0) {
          affine(p, backbone_.hidden, backbone_.in, x, hidden_pre_);
          for (std::size_t j = 0; j < backbone_.hidden; ++j)
            input_[j] = std::max(0.0, hidden_pre_[j]);
        } else {
          std::copy(x.begin(), x.end(), input_.begin());
        }
        break;
      case ModelKind::kSoftPrompt: {
        std::copy(x.begin(), x.end(), input_.begin());
        std::copy(p, p + spec_.prompt_len(), input_.begin() + x.size());
        break;
      }
      default:
        std::copy(x.begin(), x.end(), input_.begin());
        break;
    }
    dense_forward(net_);
    return scores_;
  }

  // Accumulates the gradient of the trainable parameters given dL/dscores for
  // the example last passed to scores(). grad spans the full parameter vector.
  void backward(std::span<const double> dscores, std::span<double> grad) {
    const double* p = params_.data();
    switch (spec_.kind()) {
      case ModelKind::kAdapter:
        // Backbone frozen: only the head receives gradient.
        affine_backward(p + net_.offset, net_.out, net_.in, input_, dscores,
                        grad.data() + net_.offset, {});
        break;
      case ModelKind::kSoftPrompt: {
        dx_.assign(net_.in, 0.0);
        dense_backward(net_, dscores, nullptr, dx_);
        const std::size_t d = net_.in - spec_.prompt_len();
        for (std::size_t i = 0; i < spec_.prompt_len(); ++i) grad[i] += dx_[d + i];
        break;
      }
      default:
        dense_backward(net_, dscores, grad.data(), {});
        break;
    }
  }

 private:
  void dense_forward(const DenseNet& net) {
    const double* p = params_.data() + net.offset;
    if (net.hidden == 0) {
      affine(p, net.out, net.in, input_, scores_);
      return;
    }
    std::span<double> pre(hidden_pre_.data(), net.hidden);
    std::span<double> act(hidden_.data(), net.hidden);
    affine(p, net.hidden, net.in, input_, pre);
    for (std::size_t j = 0; j < net.hidden; ++j) act[j] = std::max(0.0, pre[j]);
    affine(p + net.hidden * net.in + net.hidden, net.out, net.hidden, act, scores_);
  }

  void dense_backward(const DenseNet& net, std::span<const double> dscores, double* grad,
                      std::span<double> dx) {
    const double* p = params_.data() + net.offset;
    double* g = grad ? grad + net.offset : nullptr;
    if (net.hidden == 0) {
      affine_backward(p, net.out, net.in, input_, dscores, g, dx);
      return;
    }
    const std::size_t first = net.hidden * net.in + net.hidden;
    std::span<const double> act(hidden_.data(), net.hidden);
    dhidden_.assign(net.hidden, 0.0);
    affine_backward(p + first, net.out, net.hidden, act, dscores, g ? g + first : nullptr,
                    dhidden_);
    for (std::size_t j = 0; j < net.hidden; ++j) {
      if (hidden_pre_[j] <= 0.0) dhidden_[j] = 0.0;
    }
    affine_backward(p, net.hidden, net.in, input_, dhidden_, g, dx);
  }

  const ModelSpec& spec_;
  std::span<const double> params_;
  DenseNet net_;
  DenseNet backbone_;
  std::vector<double> input_;
  std::vector<double> hidden_pre_;
  std::vector<double> hidden_;
  std::vector<double> scores_;
  std::vector<double> dhidden_;
  std::vector<double> dx_;
};

void check_features(const ModelSpec& spec, std::size_t width) {
  if (width != spec.input_dim()) {
    throw DimensionError("feature width " + std::to_string(width) +
                         " does not match model input dimension " +
                         std::to_string(spec.input_dim()) + " of " + spec.describe());
  }
}

void check_batch(const ModelSpec& spec, const Dataset& data, std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("empty batch");
  check_features(spec, data.dim);
  for (std::size_t r : rows) {
    if (r >= data.rows()) {
      throw DimensionError("row index " + std::to_string(r) + " outside dataset of " +
                           std::to_string(data.rows()) + " rows");
    }
    if (static_cast<std::size_t>(data.labels[r]) >= spec.classes()) {
      throw DimensionError("label " + std::to_string(data.labels[r]) + " at row " +
                           std::to_string(r) + " exceeds model classes " +
                           std::to_string(spec.classes()));
    }
  }
}

// Stable log-sum-exp of the scores.
double log_sum_exp(std::span<const double> s) {
  const double m = *std::max_element(s.begin(), s.end());
  double acc = 0.0;
  for (double v : s) acc += std::exp(v - m);
  return m + std::log(acc);
}

std::vector<std::size_t> all_rows(const Dataset& data) {
  std::vector<std::size_t> rows(data.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

// Running mean: exact when every term is equal.
struct RunningMean {
  double value = 0.0;
  std::size_t n = 0;
  void add(double x) { value += (x - value) / static_cast<double>(++n); }
};

}  // namespace

std::vector<double> forward(const ModelSpec& spec, const ParameterVector& params,
                            std::span<const double> features) {
  check_layout(spec, params);
  check_features(spec, features.size());
  Evaluator eval(spec, params.values());
  auto s = eval.scores(features);
  return {s.begin(), s.end()};
}

std::size_t predict(const ModelSpec& spec, const ParameterVector& params,
                    std::span<const double> features) {
  const auto s = forward(spec, params, features);
  return static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
}

LossAndGrad loss_and_grad(const ModelSpec& spec, const ParameterVector& params,
                          const Dataset& data, std::span<const std::size_t> rows) {
  check_layout(spec, params);
  check_batch(spec, data, rows);
  Evaluator eval(spec, params.values());
  LossAndGrad out{0.0, ParameterVector(params.layout())};
  std::vector<double> dscores(spec.classes());
  const double inv_batch = 1.0 / static_cast<double>(rows.size());
  RunningMean loss;
  for (std::size_t r : rows) {
    const auto s = eval.scores(data.row(r));
    const double lse = log_sum_exp(s);
    const auto y = static_cast<std::size_t>(data.labels[r]);
    loss.add(lse - s[y]);
    for (std::size_t c = 0; c < s.size(); ++c) {
      dscores[c] = (std::exp(s[c] - lse) - (c == y ? 1.0 : 0.0)) * inv_batch;
    }
    eval.backward(dscores, out.grad.values());
  }
  out.loss = loss.value;
  return out;
}

LossAndGrad loss_and_grad(const ModelSpec& spec, const ParameterVector& params,
                          const Dataset& data) {
  const auto rows = all_rows(data);
  return loss_and_grad(spec, params, data, rows);
}

double mean_loss(const ModelSpec& spec, const ParameterVector& params, const Dataset& data,
                 std::span<const std::size_t> rows) {
  check_layout(spec, params);
  check_batch(spec, data, rows);
  Evaluator eval(spec, params.values());
  RunningMean loss;
  for (std::size_t r : rows) {
    const auto s = eval.scores(data.row(r));
    loss.add(log_sum_exp(s) - s[static_cast<std::size_t>(data.labels[r])]);
  }
  return loss.value;
}

namespace {

// [begin, end) ranges of the trainable segments.
std::vector<std::pair<std::size_t, std::size_t>> trainable_ranges(const ModelSpec& spec) {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  const auto layout = spec.layout();
  const auto mask = spec.trainable_mask();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (mask[i]) ranges.emplace_back(offset, offset + layout[i].size());
    offset += layout[i].size();
  }
  return ranges;
}

}  // namespace

ParameterVector finite_diff_grad(const ModelSpec& spec, const ParameterVector& params,
                                 const Dataset& data, std::span<const std::size_t> rows,
                                 double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  ParameterVector grad(params.layout());
  ParameterVector probe = params;
  for (auto [begin, end] : trainable_ranges(spec)) {
    for (std::size_t i = begin; i < end; ++i) {
      const double w = params[i];
      probe[i] = w + h;
      const double up = mean_loss(spec, probe, data, rows);
      probe[i] = w - h;
      const double down = mean_loss(spec, probe, data, rows);
      probe[i] = w;
      grad[i] = (up - down) / (2.0 * h);
    }
  }
  return grad;
}

ParameterVector sgd_epoch(const ModelSpec& spec, ParameterVector params, const Dataset& data,
                          std::span<const std::size_t> rows, double lr,
                          std::size_t batch_size, std::uint64_t seed) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (rows.empty()) throw std::invalid_argument("cannot run an SGD epoch on an empty shard");
  check_layout(spec, params);

  std::vector<std::size_t> order(rows.begin(), rows.end());
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto ranges = trainable_ranges(spec);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    const std::span<const std::size_t> batch(order.data() + start, stop - start);
    const auto step = loss_and_grad(spec, params, data, batch);
    for (auto [begin, end] : ranges) {
      for (std::size_t i = begin; i < end; ++i) {
        params[i] -= lr * step.grad[i];
        if (!std::isfinite(params[i])) {
          throw NumericError("SGD step produced a non-finite parameter at index " +
                             std::to_string(i));
        }
      }
    }
  }
  return params;
}

}  // namespace fedsim
