#include "cmlformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace cml {

namespace {

Precision g_precision = Precision::kFloat64;
std::atomic<int64_t> g_next_id{1};

thread_local Tape* g_active_tape = nullptr;

void round_to_precision(std::vector<double>& v) {
  if (g_precision == Precision::kFloat32) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw EngineError(std::string("op '") + op +
                        "' produced a non-finite value");
    }
  }
}

std::vector<double>& ensure_grad(TensorData& d) {
  if (d.grad.empty()) d.grad.assign(d.values.size(), 0.0);
  return d.grad;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " +
                       shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` when indexed by out_shape coordinates; broadcast dims
// get stride 0.
std::vector<int64_t> broadcast_strides(const Shape& shape,
                                       const Shape& out_shape) {
  std::vector<int64_t> strides(out_shape.size(), 0);
  int64_t s = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    const size_t oi = i + (out_shape.size() - shape.size());
    strides[oi] = (shape[i] == 1 && out_shape[oi] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

}  // namespace

void set_precision(Precision p) { g_precision = p; }
Precision current_precision() { return g_precision; }

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Rng ----

Rng::Rng(uint64_t seed) : gen_(seed) {}

uint64_t Rng::next_u64() { return gen_(); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
  const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
  const double u2 = uniform();
  const double z = std::sqrt(-2.0 * std::log(u1)) *
                   std::cos(2.0 * 3.14159265358979323846 * u2);
  return mean + stddev * z;
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  if (lo > hi) throw EngineError("uniform_int: empty range");
  const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
  if (range == 0) return static_cast<int64_t>(next_u64());  // full 64-bit span
  const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  uint64_t draw;
  do {
    draw = next_u64();
  } while (draw >= limit);
  return lo + static_cast<int64_t>(draw % range);
}

// ---- Tensor ----

Tensor Tensor::zeros(const Shape& shape) {
  return from_values(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return from_values(shape, std::vector<double>(shape_numel(shape), value));
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_values: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto d = std::make_shared<TensorData>();
  d->shape = shape;
  d->values = std::move(values);
  d->id = g_next_id.fetch_add(1);
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.normal(0.0, stddev);
  round_to_precision(v);
  return from_values(shape, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!d_) throw EngineError("use of undefined tensor");
  return d_->shape;
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(values().size());
}

int64_t Tensor::id() const {
  if (!d_) throw EngineError("use of undefined tensor");
  return d_->id;
}

std::vector<double>& Tensor::values() {
  if (!d_) throw EngineError("use of undefined tensor");
  return d_->values;
}

const std::vector<double>& Tensor::values() const {
  if (!d_) throw EngineError("use of undefined tensor");
  return d_->values;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item(): tensor has " + std::to_string(numel()) +
                     " elements");
  }
  return values()[0];
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
  if (!d_) throw EngineError("use of undefined tensor");
  d_->requires_grad = rg;
  return *this;
}

bool Tensor::has_grad() const { return d_ && !d_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  if (!d_) throw EngineError("use of undefined tensor");
  return ensure_grad(*d_);
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw EngineError("tensor has no gradient");
  return d_->grad;
}

void Tensor::zero_grad() {
  if (d_ && !d_->grad.empty()) {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }
}

double Tensor::grad_l2_norm() const {
  if (!has_grad()) return 0.0;
  double s = 0.0;
  for (double g : d_->grad) s += g * g;
  return std::sqrt(s);
}

// ---- Tape ----

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     shape_str(loss.shape()));
  }
  auto d = loss.data();
  ensure_grad(*d)[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->grad.empty()) it->backward();
  }
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw EngineError("backward: no active tape");
  t->backward(loss);
}

// Shared op-construction path: applies the precision policy, the finite-value
// invariant, and tape recording when any input requires a gradient.
Tensor make_op_output(const char* op, Shape shape, std::vector<double> values,
                      const std::vector<Tensor>& inputs,
                      std::function<void()> backward_fn) {
  round_to_precision(values);
  check_finite(op, values);
  Tensor out = Tensor::from_values(std::move(shape), std::move(values));
  Tape* tape = Tape::active();
  if (!tape) return out;
  bool needs_grad = false;
  for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (!needs_grad) return out;
  out.set_requires_grad(true);
  TapeEntry entry;
  entry.op = op;
  for (const Tensor& in : inputs) entry.input_ids.push_back(in.id());
  entry.output_id = out.id();
  entry.output = out.data();
  entry.backward = std::move(backward_fn);
  tape->entries_.push_back(std::move(entry));
  return out;
}

// ---- elementwise with broadcasting ----

namespace {

enum class BinOp { kAdd, kSub, kMul };

Tensor binary_op(const char* name, BinOp kind, const Tensor& a,
                 const Tensor& b) {
  const Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  const int64_t n = shape_numel(out_shape);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const size_t rank = out_shape.size();

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<int64_t> idx(rank, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    switch (kind) {
      case BinOp::kAdd: out[i] = av[oa] + bv[ob]; break;
      case BinOp::kSub: out[i] = av[oa] - bv[ob]; break;
      case BinOp::kMul: out[i] = av[oa] * bv[ob]; break;
    }
    for (size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      idx[d] = 0;
      oa -= sa[d] * (out_shape[d] - 1);
      ob -= sb[d] * (out_shape[d] - 1);
    }
  }

  // Gradient walks the same broadcast pattern, accumulating reduced sums
  // into broadcast dimensions. The closure needs the output's grad buffer,
  // which only exists after make_op_output runs, so bind it in two steps.
  Tensor ta = a, tb = b;
  auto run_backward = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output(
      name, out_shape, std::move(out), {a, b},
      [run_backward]() { (*run_backward)(); });
  auto out_data_ptr = result.data();
  *run_backward = [kind, ta, tb, out_shape, sa, sb, out_data_ptr]() mutable {
    const auto& og = out_data_ptr->grad;
    const size_t rank = out_shape.size();
    const int64_t n = shape_numel(out_shape);
    const bool need_a = ta.requires_grad();
    const bool need_b = tb.requires_grad();
    std::vector<double>* ga = need_a ? &ta.grad() : nullptr;
    std::vector<double>* gb = need_b ? &tb.grad() : nullptr;
    const auto& av = ta.values();
    const auto& bv = tb.values();
    std::vector<int64_t> idx(rank, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
      const double g = og[static_cast<size_t>(i)];
      switch (kind) {
        case BinOp::kAdd:
          if (need_a) (*ga)[oa] += g;
          if (need_b) (*gb)[ob] += g;
          break;
        case BinOp::kSub:
          if (need_a) (*ga)[oa] += g;
          if (need_b) (*gb)[ob] -= g;
          break;
        case BinOp::kMul:
          if (need_a) (*ga)[oa] += g * bv[ob];
          if (need_b) (*gb)[ob] += g * av[oa];
          break;
      }
      for (size_t d = rank; d-- > 0;) {
        if (++idx[d] < out_shape[d]) {
          oa += sa[d];
          ob += sb[d];
          break;
        }
        idx[d] = 0;
        oa -= sa[d] * (out_shape[d] - 1);
        ob -= sb[d] * (out_shape[d] - 1);
      }
    }
  };
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", BinOp::kAdd, a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", BinOp::kSub, a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", BinOp::kMul, a, b);
}

Tensor scale(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  Tensor ta = a;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("scale", a.shape(), std::move(out), {a},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [ta, c, od]() mutable {
    auto& g = ta.grad();
    const auto& og = od->grad;
    for (size_t i = 0; i < g.size(); ++i) g[i] += c * og[i];
  };
  return result;
}

Tensor relu(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tensor ta = a;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("relu", a.shape(), std::move(out), {a},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [ta, od]() mutable {
    auto& g = ta.grad();
    const auto& og = od->grad;
    const auto& av = ta.values();
    for (size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) g[i] += og[i];
    }
  };
  return result;
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(as) + " x " + shape_str(bs));
  }
  const int64_t m = as[as.size() - 2];
  const int64_t k = as[as.size() - 1];
  const int64_t k2 = bs[bs.size() - 2];
  const int64_t n = bs[bs.size() - 1];
  if (k != k2) {
    throw ShapeError("matmul: inner dims disagree, " + shape_str(as) + " x " +
                     shape_str(bs));
  }
  const bool shared_rhs = bs.size() == 2;
  if (!shared_rhs &&
      !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2)) {
    throw ShapeError("matmul: batch dims disagree, " + shape_str(as) + " x " +
                     shape_str(bs));
  }
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  const int64_t batch = shape_numel(Shape(as.begin(), as.end() - 2));

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(batch * m * n), 0.0);
  for (int64_t t = 0; t < batch; ++t) {
    const double* pa = av.data() + t * m * k;
    const double* pb = bv.data() + (shared_rhs ? 0 : t * k * n);
    double* po = out.data() + t * m * n;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        const double x = pa[i * k + kk];
        if (x == 0.0) continue;
        const double* pbr = pb + kk * n;
        double* por = po + i * n;
        for (int64_t j = 0; j < n; ++j) por[j] += x * pbr[j];
      }
    }
  }

  Tensor ta = a, tb = b;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("matmul", out_shape, std::move(out), {a, b},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [ta, tb, od, batch, m, k, n, shared_rhs]() mutable {
    const auto& og = od->grad;
    const auto& av = ta.values();
    const auto& bv = tb.values();
    if (ta.requires_grad()) {
      auto& ga = ta.grad();
      // dA = dC * B^T
      for (int64_t t = 0; t < batch; ++t) {
        const double* pg = og.data() + t * m * n;
        const double* pb = bv.data() + (shared_rhs ? 0 : t * k * n);
        double* pga = ga.data() + t * m * k;
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < n; ++j) {
            const double g = pg[i * n + j];
            if (g == 0.0) continue;
            for (int64_t kk = 0; kk < k; ++kk) {
              pga[i * k + kk] += g * pb[kk * n + j];
            }
          }
        }
      }
    }
    if (tb.requires_grad()) {
      auto& gb = tb.grad();
      // dB = A^T * dC (accumulated over the batch when B is shared)
      for (int64_t t = 0; t < batch; ++t) {
        const double* pa = av.data() + t * m * k;
        const double* pg = og.data() + t * m * n;
        double* pgb = gb.data() + (shared_rhs ? 0 : t * k * n);
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t kk = 0; kk < k; ++kk) {
            const double x = pa[i * k + kk];
            if (x == 0.0) continue;
            const double* pgr = pg + i * n;
            double* pgbr = pgb + kk * n;
            for (int64_t j = 0; j < n; ++j) pgbr[j] += x * pgr[j];
          }
        }
      }
    }
  };
  return result;
}

// ---- softmax ----

namespace {

// Iteration pattern along one axis: outer x axis x inner.
struct AxisIter {
  int64_t outer, len, inner;
};

AxisIter axis_iter(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
  AxisIter it{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) it.outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) it.inner *= shape[static_cast<size_t>(i)];
  return it;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const AxisIter it = axis_iter(x.shape(), axis);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (int64_t o = 0; o < it.outer; ++o) {
    for (int64_t in = 0; in < it.inner; ++in) {
      const int64_t base = o * it.len * it.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t l = 0; l < it.len; ++l) {
        mx = std::max(mx, xv[base + l * it.inner]);
      }
      double sum = 0.0;
      for (int64_t l = 0; l < it.len; ++l) {
        const double e = std::exp(xv[base + l * it.inner] - mx);
        out[base + l * it.inner] = e;
        sum += e;
      }
      for (int64_t l = 0; l < it.len; ++l) out[base + l * it.inner] /= sum;
    }
  }

  Tensor tx = x;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("softmax", x.shape(), std::move(out), {x},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tx, od, it]() mutable {
    auto& g = tx.grad();
    const auto& og = od->grad;
    const auto& y = od->values;
    for (int64_t o = 0; o < it.outer; ++o) {
      for (int64_t in = 0; in < it.inner; ++in) {
        const int64_t base = o * it.len * it.inner + in;
        double dot = 0.0;
        for (int64_t l = 0; l < it.len; ++l) {
          const int64_t p = base + l * it.inner;
          dot += og[p] * y[p];
        }
        for (int64_t l = 0; l < it.len; ++l) {
          const int64_t p = base + l * it.inner;
          g[p] += y[p] * (og[p] - dot);
        }
      }
    }
  };
  return result;
}

// ---- layer_norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("layer_norm: rank-0 input");
  const int64_t dim = xs.back();
  if (gain.shape() != Shape{dim} || bias.shape() != Shape{dim}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(dim) +
                     "]");
  }
  const int64_t rows = shape_numel(xs) / dim;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* px = xv.data() + r * dim;
    double mean = 0.0;
    for (int64_t i = 0; i < dim; ++i) mean += px[i];
    mean /= static_cast<double>(dim);
    double var = 0.0;
    for (int64_t i = 0; i < dim; ++i) {
      const double d = px[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(dim);
    const double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[static_cast<size_t>(r)] = istd;
    for (int64_t i = 0; i < dim; ++i) {
      const double h = (px[i] - mean) * istd;
      xhat[r * dim + i] = h;
      out[r * dim + i] = gv[i] * h + bv[i];
    }
  }

  Tensor tx = x, tg = gain, tb = bias;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("layer_norm", xs, std::move(out),
                                 {x, gain, bias}, [run]() { (*run)(); });
  auto od = result.data();
  auto xhat_p = std::make_shared<std::vector<double>>(std::move(xhat));
  auto istd_p = std::make_shared<std::vector<double>>(std::move(inv_std));
  *run = [tx, tg, tb, od, rows, dim, xhat_p, istd_p]() mutable {
    const auto& og = od->grad;
    const auto& gv = tg.values();
    const auto& xh = *xhat_p;
    if (tg.requires_grad()) {
      auto& gg = tg.grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t i = 0; i < dim; ++i) {
          gg[i] += og[r * dim + i] * xh[r * dim + i];
        }
      }
    }
    if (tb.requires_grad()) {
      auto& gb = tb.grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t i = 0; i < dim; ++i) gb[i] += og[r * dim + i];
      }
    }
    if (tx.requires_grad()) {
      auto& gx = tx.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double istd = (*istd_p)[static_cast<size_t>(r)];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int64_t i = 0; i < dim; ++i) {
          const double dxh = og[r * dim + i] * gv[i];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[r * dim + i];
        }
        const double inv_dim = 1.0 / static_cast<double>(dim);
        for (int64_t i = 0; i < dim; ++i) {
          const double dxh = og[r * dim + i] * gv[i];
          gx[r * dim + i] += istd * (dxh - inv_dim * sum_dxhat -
                                     xh[r * dim + i] * inv_dim * sum_dxhat_xhat);
        }
      }
    }
  };
  return result;
}

// ---- embedding ----

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) {
    throw ShapeError("embedding: table must be rank 2, got " + shape_str(ts));
  }
  const int64_t vocab = ts[0], dim = ts[1];
  const auto& tv = table.values();
  std::vector<double> out(ids.size() * static_cast<size_t>(dim));
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= vocab) {
      throw EngineError("embedding: id " + std::to_string(id) +
                        " out of range [0," + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + static_cast<int64_t>(id) * dim, dim,
                out.data() + static_cast<int64_t>(i) * dim);
  }

  Tensor tt = table;
  auto ids_p = std::make_shared<std::vector<int>>(ids);
  auto run = std::make_shared<std::function<void()>>();
  Tensor result =
      make_op_output("embedding", {static_cast<int64_t>(ids.size()), dim},
                     std::move(out), {table}, [run]() { (*run)(); });
  auto od = result.data();
  *run = [tt, od, ids_p, dim]() mutable {
    auto& g = tt.grad();
    const auto& og = od->grad;
    for (size_t i = 0; i < ids_p->size(); ++i) {
      const int64_t row = (*ids_p)[i];
      for (int64_t j = 0; j < dim; ++j) {
        g[row * dim + j] += og[static_cast<int64_t>(i) * dim + j];
      }
    }
  };
  return result;
}

// ---- shape ops ----

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  const Shape& xs = x.shape();
  const size_t rank = xs.size();
  if (perm.size() != rank) {
    throw ShapeError("transpose: perm rank mismatch for " + shape_str(xs));
  }
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int p = perm[i];
    if (p < 0 || static_cast<size_t>(p) >= rank || seen[static_cast<size_t>(p)]) {
      throw ShapeError("transpose: invalid permutation");
    }
    seen[static_cast<size_t>(p)] = true;
    out_shape[i] = xs[static_cast<size_t>(p)];
  }
  std::vector<int64_t> in_strides(rank, 1);
  for (size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * xs[i + 1];
  std::vector<int64_t> walk(rank);
  for (size_t i = 0; i < rank; ++i) walk[i] = in_strides[static_cast<size_t>(perm[i])];

  const auto& xv = x.values();
  const int64_t n = static_cast<int64_t>(xv.size());
  std::vector<double> out(xv.size());
  std::vector<int64_t> idx(rank, 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = xv[src];
    for (size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += walk[d];
        break;
      }
      idx[d] = 0;
      src -= walk[d] * (out_shape[d] - 1);
    }
  }

  Tensor tx = x;
  auto walk_p = std::make_shared<std::vector<int64_t>>(walk);
  auto oshape_p = std::make_shared<Shape>(out_shape);
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("transpose", out_shape, std::move(out), {x},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tx, od, walk_p, oshape_p]() mutable {
    auto& g = tx.grad();
    const auto& og = od->grad;
    const auto& oshape = *oshape_p;
    const auto& walk = *walk_p;
    const size_t rank = oshape.size();
    const int64_t n = static_cast<int64_t>(og.size());
    std::vector<int64_t> idx(rank, 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
      g[src] += og[i];
      for (size_t d = rank; d-- > 0;) {
        if (++idx[d] < oshape[d]) {
          src += walk[d];
          break;
        }
        idx[d] = 0;
        src -= walk[d] * (oshape[d] - 1);
      }
    }
  };
  return result;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor tx = x;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("reshape", shape,
                                 std::vector<double>(x.values()), {x},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tx, od]() mutable {
    auto& g = tx.grad();
    const auto& og = od->grad;
    for (size_t i = 0; i < g.size(); ++i) g[i] += og[i];
  };
  return result;
}

Tensor select(const Tensor& x, int axis, int64_t index) {
  const AxisIter it = axis_iter(x.shape(), axis);
  const int rank = static_cast<int>(x.shape().size());
  const int ax = axis < 0 ? axis + rank : axis;
  if (index < 0 || index >= it.len) {
    throw ShapeError("select: index " + std::to_string(index) +
                     " out of range for axis of length " +
                     std::to_string(it.len));
  }
  Shape out_shape;
  for (int i = 0; i < rank; ++i) {
    if (i != ax) out_shape.push_back(x.shape()[static_cast<size_t>(i)]);
  }
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(it.outer * it.inner));
  for (int64_t o = 0; o < it.outer; ++o) {
    const int64_t base = o * it.len * it.inner + index * it.inner;
    std::copy_n(xv.data() + base, it.inner, out.data() + o * it.inner);
  }

  Tensor tx = x;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("select", out_shape, std::move(out), {x},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tx, od, it, index]() mutable {
    auto& g = tx.grad();
    const auto& og = od->grad;
    for (int64_t o = 0; o < it.outer; ++o) {
      const int64_t base = o * it.len * it.inner + index * it.inner;
      for (int64_t i = 0; i < it.inner; ++i) g[base + i] += og[o * it.inner + i];
    }
  };
  return result;
}

Tensor sum_all(const Tensor& x) {
  const auto& xv = x.values();
  double s = 0.0;
  for (double v : xv) s += v;
  Tensor tx = x;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result =
      make_op_output("sum_all", {}, {s}, {x}, [run]() { (*run)(); });
  auto od = result.data();
  *run = [tx, od]() mutable {
    auto& g = tx.grad();
    const double go = od->grad[0];
    for (double& v : g) v += go;
  };
  return result;
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw EngineError("dropout: rate must be in [0,1)");
  }
  if (rate == 0.0) return x;
  const auto& xv = x.values();
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  Tensor tx = x;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("dropout", x.shape(), std::move(out), {x},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tx, od, mask]() mutable {
    auto& g = tx.grad();
    const auto& og = od->grad;
    for (size_t i = 0; i < g.size(); ++i) g[i] += og[i] * (*mask)[i];
  };
  return result;
}

// ---- losses ----

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_index) {
  const Shape& ls = logits.shape();
  if (ls.size() != 2) {
    throw ShapeError("cross_entropy: logits must be [N,V], got " +
                     shape_str(ls));
  }
  const int64_t n = ls[0], v = ls[1];
  if (static_cast<int64_t>(targets.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  }
  int64_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= v) {
      throw EngineError("cross_entropy: target " + std::to_string(t) +
                        " out of range [0," + std::to_string(v) + ")");
    }
    ++count;
  }
  if (count == 0) return Tensor::scalar(0.0);

  const auto& lv = logits.values();
  double loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const int t = targets[static_cast<size_t>(r)];
    if (t == ignore_index) continue;
    const double* row = lv.data() + r * v;
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    loss += mx + std::log(sum) - row[t];
  }
  loss /= static_cast<double>(count);

  Tensor tl = logits;
  auto targets_p = std::make_shared<std::vector<int>>(targets);
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("cross_entropy", {}, {loss}, {logits},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tl, od, targets_p, ignore_index, n, v, count]() mutable {
    auto& g = tl.grad();
    const double go = od->grad[0] / static_cast<double>(count);
    const auto& lv = tl.values();
    for (int64_t r = 0; r < n; ++r) {
      const int t = (*targets_p)[static_cast<size_t>(r)];
      if (t == ignore_index) continue;
      const double* row = lv.data() + r * v;
      double mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
      for (int64_t j = 0; j < v; ++j) {
        const double p = std::exp(row[j] - mx) / sum;
        g[r * v + j] += go * (p - (j == t ? 1.0 : 0.0));
      }
    }
  };
  return result;
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<int>& targets,
                       int ignore_index) {
  const int64_t n = logits.numel();
  if (static_cast<int64_t>(targets.size()) != n) {
    throw ShapeError("bce_with_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " logits");
  }
  int64_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t != 0 && t != 1) {
      throw EngineError("bce_with_logits: target " + std::to_string(t) +
                        " not in {0,1}");
    }
    ++count;
  }
  if (count == 0) return Tensor::scalar(0.0);

  const auto& lv = logits.values();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t == ignore_index) continue;
    const double x = lv[static_cast<size_t>(i)];
    // max(x,0) - x*y + log(1 + exp(-|x|))
    loss += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(count);

  Tensor tl = logits;
  auto targets_p = std::make_shared<std::vector<int>>(targets);
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("bce_with_logits", {}, {loss}, {logits},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tl, od, targets_p, ignore_index, n, count]() mutable {
    auto& g = tl.grad();
    const double go = od->grad[0] / static_cast<double>(count);
    const auto& lv = tl.values();
    for (int64_t i = 0; i < n; ++i) {
      const int t = (*targets_p)[static_cast<size_t>(i)];
      if (t == ignore_index) continue;
      const double x = lv[static_cast<size_t>(i)];
      const double sig = 1.0 / (1.0 + std::exp(-x));
      g[static_cast<size_t>(i)] += go * (sig - t);
    }
  };
  return result;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse: shape mismatch " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  const int64_t n = pred.numel();
  if (n == 0) throw ShapeError("mse: empty tensors");
  const auto& pv = pred.values();
  const auto& tv = target.values();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)];
    loss += d * d;
  }
  loss /= static_cast<double>(n);

  Tensor tp = pred, tt = target;
  auto run = std::make_shared<std::function<void()>>();
  Tensor result = make_op_output("mse", {}, {loss}, {pred, target},
                                 [run]() { (*run)(); });
  auto od = result.data();
  *run = [tp, tt, od, n]() mutable {
    const double go = od->grad[0] * 2.0 / static_cast<double>(n);
    const auto& pv = tp.values();
    const auto& tv = tt.values();
    if (tp.requires_grad()) {
      auto& g = tp.grad();
      for (int64_t i = 0; i < n; ++i) {
        g[static_cast<size_t>(i)] +=
            go * (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
      }
    }
    if (tt.requires_grad()) {
      auto& g = tt.grad();
      for (int64_t i = 0; i < n; ++i) {
        g[static_cast<size_t>(i)] -=
            go * (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
      }
    }
  };
  return result;
}

}  // namespace cml
