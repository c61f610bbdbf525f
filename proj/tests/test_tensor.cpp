#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <vector>

#include "cmlformer/tensor.hpp"
#include "doctest.h"
#include "grad_check.hpp"

using cml::Rng;
using cml::Shape;
using cml::Tensor;
using testutil::max_grad_rel_err;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -2.0,
                     double hi = 2.0) {
  std::vector<double> v(static_cast<size_t>(cml::shape_numel(shape)));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from_values(shape, std::move(v));
}

// Values bounded away from zero, for ops with a kink at the origin.
Tensor random_tensor_off_origin(const Shape& shape, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(cml::shape_numel(shape)));
  for (double& x : v) {
    const double mag = 0.1 + 1.9 * rng.uniform();
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor::from_values(shape, std::move(v));
}

constexpr double kGradTol = 1e-4;
constexpr int kTrials = 10;

}  // namespace

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

TEST_CASE("rng: identical seeds give identical streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(43);
  bool all_equal = true;
  Rng a2(42);
  for (int i = 0; i < 16; ++i) all_equal = all_equal && (a2.next_u64() == c.next_u64());
  CHECK(!all_equal);
}

TEST_CASE("rng: uniform lies in [0,1) and is roughly centered") {
  Rng rng(7);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(std::abs(sum / 20000.0 - 0.5) < 0.02);
}

TEST_CASE("rng: normal consumes exactly two uniforms per draw") {
  Rng a(123), b(123);
  (void)a.normal();
  (void)b.uniform();
  (void)b.uniform();
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: normal has the requested moments") {
  Rng rng(11);
  const int n = 50000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal(1.5, 0.5);
    sum += z;
    sumsq += z * z;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean - 1.5) < 0.02);
  CHECK(std::abs(std::sqrt(var) - 0.5) < 0.02);
}

TEST_CASE("rng: uniform_int stays in range and hits every value") {
  Rng rng(5);
  std::vector<int> hits(8, 0);
  for (int i = 0; i < 4000; ++i) {
    const int64_t v = rng.uniform_int(-2, 5);
    REQUIRE(v >= -2);
    REQUIRE(v <= 5);
    hits[static_cast<size_t>(v + 2)]++;
  }
  for (int h : hits) CHECK(h > 300);
  CHECK(rng.uniform_int(3, 3) == 3);
  CHECK_THROWS_AS(rng.uniform_int(4, 3), cml::EngineError);
}

TEST_CASE("rng: shuffle permutes and is seed-deterministic") {
  std::vector<int> v(100);
  for (int i = 0; i < 100; ++i) v[static_cast<size_t>(i)] = i;
  std::vector<int> w = v;
  Rng a(9);
  a.shuffle(v);
  CHECK(v != w);  // 100!-to-1 against
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == w);
  std::vector<int> v2 = w;
  Rng b(9);
  b.shuffle(v2);
  CHECK(v == v2);
}

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

TEST_CASE("tensor: factories and accessors") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.shape() == Shape{2, 3});
  for (double v : z.values()) CHECK(v == 0.0);

  Tensor f = Tensor::full({2}, 1.25);
  CHECK(f.values() == std::vector<double>{1.25, 1.25});

  Tensor s = Tensor::scalar(-3.5);
  CHECK(s.shape().empty());
  CHECK(s.item() == -3.5);

  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}),
                  cml::ShapeError);
  CHECK_THROWS_AS(z.item(), cml::ShapeError);

  Tensor undef;
  CHECK(!undef.defined());
  CHECK_THROWS_AS(undef.shape(), cml::EngineError);
}

TEST_CASE("tensor: grad bookkeeping") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0});
  CHECK(!x.has_grad());
  CHECK(x.grad_l2_norm() == 0.0);
  x.grad() = {3.0, 4.0};
  CHECK(x.grad_l2_norm() == 5.0);
  x.zero_grad();
  CHECK(x.grad_l2_norm() == 0.0);
}

// ---------------------------------------------------------------------------
// Forward values (frozen oracles)
// ---------------------------------------------------------------------------

TEST_CASE("matmul: hand-computed 2x2") {
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_values({2, 2}, {5, 6, 7, 8});
  Tensor c = cml::matmul(a, b);
  CHECK(c.values() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul: batched with shared rhs") {
  // batch 2 of 1x2 times shared 2x2
  Tensor a = Tensor::from_values({2, 1, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_values({2, 2}, {5, 6, 7, 8});
  Tensor c = cml::matmul(a, b);
  CHECK(c.shape() == Shape{2, 1, 2});
  CHECK(c.values() == std::vector<double>{5, 6, 7, 8});
  CHECK_THROWS_AS(cml::matmul(a, Tensor::zeros({3, 2})), cml::ShapeError);
}

TEST_CASE("softmax: known ratios") {
  Tensor x = Tensor::from_values({3}, {0.0, std::log(2.0), std::log(4.0)});
  Tensor y = cml::softmax(x, -1);
  CHECK(std::abs(y.values()[0] - 1.0 / 7.0) < 1e-15);
  CHECK(std::abs(y.values()[1] - 2.0 / 7.0) < 1e-15);
  CHECK(std::abs(y.values()[2] - 4.0 / 7.0) < 1e-15);
}

TEST_CASE("softmax: rows sum to one along the chosen axis") {
  Rng rng(31);
  Tensor x = random_tensor({4, 5, 6}, rng);
  for (int axis : {0, 1, 2, -1}) {
    Tensor y = cml::softmax(x, axis);
    const auto& ys = y.values();
    // spot-check: total mass equals the number of softmax slices
    double total = 0.0;
    for (double v : ys) total += v;
    const int ax = axis < 0 ? 3 + axis : axis;
    const double slices = 120.0 / static_cast<double>(x.shape()[ax]);
    CHECK(std::abs(total - slices) < 1e-9);
  }
}

TEST_CASE("layer_norm: matches the direct formula") {
  Tensor x = Tensor::from_values({1, 4}, {1, 2, 3, 4});
  Tensor g = Tensor::from_values({4}, {1, 1, 1, 1});
  Tensor b = Tensor::zeros({4});
  Tensor y = cml::layer_norm(x, g, b);
  const double mean = 2.5;
  const double var = 1.25;  // biased
  for (int i = 0; i < 4; ++i) {
    const double expect =
        ((i + 1) - mean) / std::sqrt(var + cml::kLayerNormEps);
    CHECK(std::abs(y.values()[static_cast<size_t>(i)] - expect) < 1e-14);
  }
  CHECK_THROWS_AS(cml::layer_norm(x, Tensor::zeros({3}), b), cml::ShapeError);
}

TEST_CASE("embedding: gathers rows, rejects out-of-range ids") {
  Tensor table = Tensor::from_values({3, 2}, {0, 1, 10, 11, 20, 21});
  Tensor out = cml::embedding(table, {2, 0, 2});
  CHECK(out.shape() == Shape{3, 2});
  CHECK(out.values() == std::vector<double>{20, 21, 0, 1, 20, 21});
  CHECK_THROWS_AS(cml::embedding(table, {3}), cml::EngineError);
  CHECK_THROWS_AS(cml::embedding(table, {-1}), cml::EngineError);
}

TEST_CASE("transpose / reshape / select") {
  Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor t = cml::transpose(x, {1, 0});
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.values() == std::vector<double>{1, 4, 2, 5, 3, 6});

  Tensor r = cml::reshape(x, {3, 2});
  CHECK(r.values() == x.values());
  CHECK_THROWS_AS(cml::reshape(x, {4, 2}), cml::ShapeError);

  Tensor s0 = cml::select(x, 0, 1);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.values() == std::vector<double>{4, 5, 6});
  Tensor s1 = cml::select(x, 1, 2);
  CHECK(s1.values() == std::vector<double>{3, 6});
  CHECK_THROWS_AS(cml::select(x, 0, 2), cml::ShapeError);
}

TEST_CASE("broadcasting add/mul against a naive oracle") {
  Rng rng(77);
  Tensor a = random_tensor({2, 1, 4}, rng);
  Tensor b = random_tensor({3, 1}, rng);
  Tensor c = cml::add(a, b);
  CHECK(c.shape() == Shape{2, 3, 4});
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int k = 0; k < 4; ++k) {
        const double expect = a.values()[static_cast<size_t>(i * 4 + k)] +
                              b.values()[static_cast<size_t>(j)];
        CHECK(c.values()[static_cast<size_t>((i * 3 + j) * 4 + k)] == expect);
      }
    }
  }
  CHECK_THROWS_AS(cml::add(Tensor::zeros({2, 3}), Tensor::zeros({4})),
                  cml::ShapeError);
}

TEST_CASE("cross_entropy: frozen values and ignore_index") {
  Tensor logits = Tensor::from_values({2, 3}, {1, 2, 3, 0, 0, 0});
  // row 0, target 2: loss = log(exp(1)+exp(2)+exp(3)) - 3
  const double row0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  Tensor l1 = cml::cross_entropy(logits, {2, -100}, -100);
  CHECK(std::abs(l1.item() - row0) < 1e-14);
  // both rows: row 1 is uniform over 3 classes
  Tensor l2 = cml::cross_entropy(logits, {2, 0}, -100);
  CHECK(std::abs(l2.item() - 0.5 * (row0 + std::log(3.0))) < 1e-14);
  // all ignored: exact zero, no gradient path
  cml::Tape tape;
  Tensor lg = logits;
  lg.set_requires_grad(true);
  Tensor l3 = cml::cross_entropy(lg, {-100, -100}, -100);
  CHECK(l3.item() == 0.0);
  CHECK(!l3.requires_grad());
  CHECK_THROWS_AS(cml::cross_entropy(logits, {0}, -100), cml::ShapeError);
  CHECK_THROWS_AS(cml::cross_entropy(logits, {3, 0}, -100), cml::EngineError);
}

TEST_CASE("bce_with_logits: frozen values") {
  Tensor x = Tensor::from_values({3}, {0.0, 20.0, -20.0});
  Tensor l = cml::bce_with_logits(x, {1, 1, 0}, -100);
  const double expect = (std::log(2.0) + std::log1p(std::exp(-20.0)) +
                         std::log1p(std::exp(-20.0))) /
                        3.0;
  CHECK(std::abs(l.item() - expect) < 1e-14);
  Tensor l2 = cml::bce_with_logits(x, {-100, -100, -100}, -100);
  CHECK(l2.item() == 0.0);
  CHECK_THROWS_AS(cml::bce_with_logits(x, {2, 0, 0}, -100), cml::EngineError);
}

TEST_CASE("mse: frozen value") {
  Tensor p = Tensor::from_values({2}, {1, 2});
  Tensor t = Tensor::from_values({2}, {3, 5});
  CHECK(cml::mse(p, t).item() == 6.5);
  CHECK_THROWS_AS(cml::mse(p, Tensor::zeros({3})), cml::ShapeError);
}

TEST_CASE("sum_all / mean_all / scale") {
  Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  CHECK(cml::sum_all(x).item() == 10.0);
  CHECK(cml::mean_all(x).item() == 2.5);
  CHECK(cml::scale(x, -2.0).values() == std::vector<double>{-2, -4, -6, -8});
}

TEST_CASE("dropout: zero rate is identity, mask scales kept values") {
  Rng rng(3);
  Tensor x = Tensor::full({1000}, 1.0);
  Rng dr(4);
  Tensor y = cml::dropout(x, 0.25, dr);
  int kept = 0;
  for (double v : y.values()) {
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15));
    if (v != 0.0) ++kept;
  }
  CHECK(kept > 650);
  CHECK(kept < 850);
  Rng dr2(4);
  Tensor z = cml::dropout(x, 0.0, dr2);
  CHECK(z.values() == x.values());
  CHECK_THROWS_AS(cml::dropout(x, 1.0, dr2), cml::EngineError);
  (void)rng;
}

// ---------------------------------------------------------------------------
// Tape semantics
// ---------------------------------------------------------------------------

TEST_CASE("tape: ops record only under an active tape with grad inputs") {
  Tensor x = Tensor::from_values({2}, {1, 2}).set_requires_grad(true);
  Tensor y = cml::scale(x, 2.0);  // no tape
  CHECK(!y.requires_grad());
  {
    cml::Tape tape;
    Tensor z = cml::scale(Tensor::from_values({2}, {1, 2}), 2.0);
    CHECK(!z.requires_grad());
    CHECK(tape.size() == 0);
    Tensor w = cml::scale(x, 2.0);
    CHECK(w.requires_grad());
    CHECK(tape.size() == 1);
  }
}

TEST_CASE("tape: reuse of an input accumulates gradient") {
  Tensor x = Tensor::from_values({2}, {1.0, -2.0}).set_requires_grad(true);
  cml::Tape tape;
  Tensor y = cml::sum_all(cml::add(x, x));
  tape.backward(y);
  CHECK(x.grad() == std::vector<double>{2.0, 2.0});
}

TEST_CASE("tape: nesting restores the previous tape") {
  Tensor x = Tensor::scalar(1.0).set_requires_grad(true);
  cml::Tape outer;
  (void)cml::scale(x, 2.0);
  CHECK(outer.size() == 1);
  {
    cml::Tape inner;
    (void)cml::scale(x, 3.0);
    CHECK(inner.size() == 1);
    CHECK(outer.size() == 1);
  }
  (void)cml::scale(x, 4.0);
  CHECK(outer.size() == 2);
}

TEST_CASE("tape: backward requires a scalar and an active tape") {
  Tensor x = Tensor::from_values({2}, {1, 2}).set_requires_grad(true);
  {
    cml::Tape tape;
    Tensor y = cml::scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), cml::ShapeError);
  }
  CHECK_THROWS_AS(cml::backward(Tensor::scalar(0.0)), cml::EngineError);
}

TEST_CASE("ops reject non-finite results") {
  Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(cml::add(big, big), cml::EngineError);
}

TEST_CASE("float32 mode rounds op outputs through float") {
  cml::set_precision(cml::Precision::kFloat32);
  Tensor a = Tensor::scalar(0.1);
  Tensor b = Tensor::scalar(0.2);
  Tensor c = cml::add(a, b);
  CHECK(c.item() == static_cast<double>(static_cast<float>(0.1 + 0.2)));
  CHECK(c.item() != 0.1 + 0.2);
  cml::set_precision(cml::Precision::kFloat64);
  Tensor d = cml::add(a, b);
  CHECK(d.item() == 0.1 + 0.2);
}

// ---------------------------------------------------------------------------
// Gradient checks: each op, >= 10 random inputs, central differences
// ---------------------------------------------------------------------------

TEST_CASE("grad: add/sub/mul with broadcasting") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(100 + static_cast<uint64_t>(trial));
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor(trial % 2 == 0 ? Shape{2, 3, 4} : Shape{3, 1},
                             rng);
    Tensor probe = random_tensor({2, 3, 4}, rng);
    auto mk = [&](auto op) {
      return [=]() { return cml::sum_all(cml::mul(op(a, b), probe)); };
    };
    CHECK(max_grad_rel_err({a, b}, mk([](const Tensor& x, const Tensor& y) {
            return cml::add(x, y);
          })) <= kGradTol);
    CHECK(max_grad_rel_err({a, b}, mk([](const Tensor& x, const Tensor& y) {
            return cml::sub(x, y);
          })) <= kGradTol);
    CHECK(max_grad_rel_err({a, b}, mk([](const Tensor& x, const Tensor& y) {
            return cml::mul(x, y);
          })) <= kGradTol);
  }
}

TEST_CASE("grad: matmul 2d, batched, and shared rhs") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(200 + static_cast<uint64_t>(trial));
    {
      Tensor a = random_tensor({3, 4}, rng);
      Tensor b = random_tensor({4, 5}, rng);
      Tensor probe = random_tensor({3, 5}, rng);
      auto loss = [=]() {
        return cml::sum_all(cml::mul(cml::matmul(a, b), probe));
      };
      CHECK(max_grad_rel_err({a, b}, loss) <= kGradTol);
    }
    {
      Tensor a = random_tensor({2, 3, 4}, rng);
      Tensor b = random_tensor({2, 4, 2}, rng);
      Tensor probe = random_tensor({2, 3, 2}, rng);
      auto loss = [=]() {
        return cml::sum_all(cml::mul(cml::matmul(a, b), probe));
      };
      CHECK(max_grad_rel_err({a, b}, loss) <= kGradTol);
    }
    {
      Tensor a = random_tensor({2, 3, 4}, rng);
      Tensor b = random_tensor({4, 2}, rng);  // shared across the batch
      Tensor probe = random_tensor({2, 3, 2}, rng);
      auto loss = [=]() {
        return cml::sum_all(cml::mul(cml::matmul(a, b), probe));
      };
      CHECK(max_grad_rel_err({a, b}, loss) <= kGradTol);
    }
  }
}

TEST_CASE("grad: scale and relu") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(300 + static_cast<uint64_t>(trial));
    Tensor x = random_tensor_off_origin({3, 5}, rng);
    Tensor probe = random_tensor({3, 5}, rng);
    CHECK(max_grad_rel_err({x}, [=]() {
            return cml::sum_all(cml::mul(cml::scale(x, -1.7), probe));
          }) <= kGradTol);
    CHECK(max_grad_rel_err({x}, [=]() {
            return cml::sum_all(cml::mul(cml::relu(x), probe));
          }) <= kGradTol);
  }
}

TEST_CASE("grad: softmax along both axes") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(400 + static_cast<uint64_t>(trial));
    Tensor x = random_tensor({4, 6}, rng);
    Tensor probe = random_tensor({4, 6}, rng);
    const int axis = trial % 2 == 0 ? -1 : 0;
    CHECK(max_grad_rel_err({x}, [=]() {
            return cml::sum_all(cml::mul(cml::softmax(x, axis), probe));
          }) <= kGradTol);
  }
}

TEST_CASE("grad: layer_norm wrt input, gain, and bias") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(500 + static_cast<uint64_t>(trial));
    Tensor x = random_tensor({2, 3, 6}, rng);
    Tensor g = random_tensor({6}, rng, 0.5, 1.5);
    Tensor b = random_tensor({6}, rng, -0.5, 0.5);
    Tensor probe = random_tensor({2, 3, 6}, rng);
    CHECK(max_grad_rel_err({x, g, b}, [=]() {
            return cml::sum_all(cml::mul(cml::layer_norm(x, g, b), probe));
          }) <= kGradTol);
  }
}

TEST_CASE("grad: embedding scatters into repeated rows") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(600 + static_cast<uint64_t>(trial));
    Tensor table = random_tensor({5, 4}, rng);
    std::vector<int> ids;
    for (int i = 0; i < 7; ++i) {
      ids.push_back(static_cast<int>(rng.uniform_int(0, 4)));
    }
    Tensor probe = random_tensor({7, 4}, rng);
    CHECK(max_grad_rel_err({table}, [=]() {
            return cml::sum_all(cml::mul(cml::embedding(table, ids), probe));
          }) <= kGradTol);
  }
}

TEST_CASE("grad: transpose, reshape, select, reductions") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(700 + static_cast<uint64_t>(trial));
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor probe = random_tensor({4, 2, 3}, rng);
    CHECK(max_grad_rel_err({x}, [=]() {
            return cml::sum_all(
                cml::mul(cml::transpose(x, {2, 0, 1}), probe));
          }) <= kGradTol);
    Tensor probe2 = random_tensor({6, 4}, rng);
    CHECK(max_grad_rel_err({x}, [=]() {
            return cml::sum_all(cml::mul(cml::reshape(x, {6, 4}), probe2));
          }) <= kGradTol);
    Tensor probe3 = random_tensor({2, 4}, rng);
    const int64_t idx = rng.uniform_int(0, 2);
    CHECK(max_grad_rel_err({x}, [=]() {
            return cml::sum_all(cml::mul(cml::select(x, 1, idx), probe3));
          }) <= kGradTol);
    CHECK(max_grad_rel_err({x}, [=]() { return cml::mean_all(x); }) <=
          kGradTol);
  }
}

TEST_CASE("grad: cross_entropy with ignored rows") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(800 + static_cast<uint64_t>(trial));
    Tensor logits = random_tensor({6, 5}, rng);
    std::vector<int> targets;
    for (int i = 0; i < 6; ++i) {
      targets.push_back(rng.uniform() < 0.3
                            ? -100
                            : static_cast<int>(rng.uniform_int(0, 4)));
    }
    if (targets == std::vector<int>(6, -100)) targets[0] = 1;
    CHECK(max_grad_rel_err({logits}, [=]() {
            return cml::cross_entropy(logits, targets, -100);
          }) <= kGradTol);
  }
}

TEST_CASE("grad: bce_with_logits") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(900 + static_cast<uint64_t>(trial));
    Tensor logits = random_tensor({8}, rng, -3.0, 3.0);
    std::vector<int> targets;
    for (int i = 0; i < 8; ++i) {
      const double u = rng.uniform();
      targets.push_back(u < 0.2 ? -100 : (u < 0.6 ? 0 : 1));
    }
    if (targets == std::vector<int>(8, -100)) targets[0] = 1;
    CHECK(max_grad_rel_err({logits}, [=]() {
            return cml::bce_with_logits(logits, targets, -100);
          }) <= kGradTol);
  }
}

TEST_CASE("grad: mse wrt both operands") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(1000 + static_cast<uint64_t>(trial));
    Tensor p = random_tensor({3, 4}, rng);
    Tensor t = random_tensor({3, 4}, rng);
    CHECK(max_grad_rel_err({p, t}, [=]() { return cml::mse(p, t); }) <=
          kGradTol);
  }
}

TEST_CASE("grad: dropout with a frozen mask") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(1100 + static_cast<uint64_t>(trial));
    Tensor x = random_tensor({4, 5}, rng);
    Tensor probe = random_tensor({4, 5}, rng);
    const uint64_t mask_seed = 7000 + static_cast<uint64_t>(trial);
    auto loss = [=]() {
      Rng mask_rng(mask_seed);  // same mask on every evaluation
      return cml::sum_all(cml::mul(cml::dropout(x, 0.35, mask_rng), probe));
    };
    CHECK(max_grad_rel_err({x}, loss) <= kGradTol);
  }
}

TEST_CASE("grad: composite expression mixing most ops") {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(1200 + static_cast<uint64_t>(trial));
    Tensor w1 = random_tensor({4, 6}, rng, -0.5, 0.5);
    Tensor b1 = random_tensor({6}, rng, -0.1, 0.1);
    Tensor g = Tensor::full({6}, 1.0);
    Tensor gb = Tensor::zeros({6});
    Tensor w2 = random_tensor({6, 3}, rng, -0.5, 0.5);
    Tensor x = random_tensor({5, 4}, rng);
    std::vector<int> targets = {0, 2, 1, -100, 2};
    auto loss = [=]() {
      Tensor h = cml::relu(cml::add(cml::matmul(x, w1), b1));
      Tensor n = cml::layer_norm(h, g, gb);
      Tensor logits = cml::matmul(n, w2);
      return cml::cross_entropy(logits, targets, -100);
    };
    CHECK(max_grad_rel_err({w1, b1, w2}, loss) <= kGradTol);
  }
}
