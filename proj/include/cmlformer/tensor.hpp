#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Dense row-major tensors with reverse-mode differentiation on a recording
// tape. One forward/backward pass runs on one thread; tensors with no pending
// gradients are immutable and safely shareable read-only.

namespace cml {

class EngineError : public std::runtime_error {
 public:
  explicit EngineError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public EngineError {
 public:
  explicit ShapeError(const std::string& msg) : EngineError(msg) {}
};

// Global value precision. Float64 is the default and is required for gradient
// checks; Float32 rounds every op result to single precision for training
// runs (storage stays 8-byte, values are float-representable).
enum class Precision { kFloat32, kFloat64 };

void set_precision(Precision p);
Precision current_precision();

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Deterministic random source. Transforms are hand-rolled on top of
// mt19937_64 bits so that identical seeds give bit-identical streams on any
// platform, independent of the standard library's distribution code.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Box-Muller; consumes exactly two uniforms per call.
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [lo, hi], inclusive, via rejection sampling.
  int64_t uniform_int(int64_t lo, int64_t hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<size_t>(i)],
                v[static_cast<size_t>(uniform_int(0, i))]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  int64_t id = 0;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_values(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t id() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;

  // Value of a rank-0/1-element tensor.
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool rg);

  bool has_grad() const;
  // Allocates a zero gradient buffer on first use.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();
  double grad_l2_norm() const;  // 0 when no gradient present

  std::shared_ptr<TensorData> data() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;

  friend class Tape;
  friend Tensor make_op_output(const char* op, Shape shape,
                               std::vector<double> values,
                               const std::vector<Tensor>& inputs,
                               std::function<void()> backward_builder);
};

struct TapeEntry {
  const char* op;
  std::vector<int64_t> input_ids;
  int64_t output_id;
  std::shared_ptr<TensorData> output;
  std::function<void()> backward;
};

// Recording of executed differentiable ops in execution (topological) order.
// Construction activates the tape for the current thread; destruction
// restores the previously active one.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return entries_.size(); }
  const std::vector<TapeEntry>& entries() const { return entries_; }

  // Seeds d(loss)=1 and sweeps entries in exact reverse order, accumulating
  // gradients into every reachable tensor that requires them.
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  std::vector<TapeEntry> entries_;
  Tape* prev_ = nullptr;

  friend Tensor make_op_output(const char* op, Shape shape,
                               std::vector<double> values,
                               const std::vector<Tensor>& inputs,
                               std::function<void()> backward_builder);
};

// ---- differentiable ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor select(const Tensor& x, int axis, int64_t index);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// Mean negative log-likelihood over rows whose target is not ignore_index.
// All rows ignored -> exact 0 with zero gradient.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_index);
// Stable elementwise binary cross-entropy from logits; targets in {0,1} or
// ignore_index. All ignored -> exact 0 with zero gradient.
Tensor bce_with_logits(const Tensor& logits, const std::vector<int>& targets,
                       int ignore_index);
Tensor mse(const Tensor& pred, const Tensor& target);

// Backward through the currently active tape.
void backward(const Tensor& loss);

constexpr double kLayerNormEps = 1e-5;

}  // namespace cml
