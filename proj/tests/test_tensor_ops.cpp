#include <doctest.h>

#include <cmath>
#include <vector>

#include "codats/ops.hpp"
#include "codats/rng.hpp"
#include "codats/tape.hpp"
#include "codats/tensor.hpp"
#include "codats/verify.hpp"

using namespace codats;

namespace {

// Naive sliding-window cross-correlation with explicit zero padding; the
// reference the fast path is checked against.
Tensor<double> naive_conv1d_same(const Tensor<double>& x, const Tensor<double>& w) {
  const std::size_t B = x.shape[0], H = x.shape[1], Kin = x.shape[2];
  const std::size_t kernel = w.shape[0], F = w.shape[2];
  const std::ptrdiff_t pad_left = static_cast<std::ptrdiff_t>((kernel - 1) / 2);
  Tensor<double> out({B, H, F});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < H; ++t) {
      for (std::size_t f = 0; f < F; ++f) {
        double acc = 0.0;
        for (std::size_t dk = 0; dk < kernel; ++dk) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + dk) - pad_left;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t c = 0; c < Kin; ++c) {
            acc += x.at3(b, static_cast<std::size_t>(src), c) * w.at3(dk, c, f);
          }
        }
        out.at3(b, t, f) = acc;
      }
    }
  }
  return out;
}

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("tensor-ops");

TEST_CASE("tensor shape/value invariant") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), std::invalid_argument);
  const Tensor<double> t({2, 3});
  CHECK(t.numel() == 6);
}

TEST_CASE("matmul identity, hand-expanded product, annihilator") {
  Tape<double> tape;
  Var eye = tape.leaf(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  Var a = tape.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  Var id_prod = matmul(tape, eye, a);
  CHECK(tape.val(id_prod).values == std::vector<double>{1, 2, 3, 4});

  Var b = tape.leaf(Tensor<double>({2, 1}, {5, 6}));
  Var prod = matmul(tape, a, b);
  CHECK(tape.val(prod).values == std::vector<double>{17, 39});

  Var zero = tape.leaf(Tensor<double>::zeros({2, 2}));
  Var ann = matmul(tape, zero, a);
  for (double v : tape.val(ann).values) CHECK(v == 0.0);

  Var bad = tape.leaf(Tensor<double>({3, 2}));
  CHECK_THROWS_AS(matmul(tape, a, bad), std::invalid_argument);
}

TEST_CASE("matmul backward rules") {
  Tape<double> tape;
  Var a = tape.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  Var b = tape.leaf(Tensor<double>({2, 1}, {5, 6}));
  Var prod = matmul(tape, a, b);
  Var loss = weighted_sum(tape, prod, Tensor<double>({2, 1}, {1, 1}));
  tape.backward(loss);
  // d/da = g * b^T with g = ones
  CHECK(tape.grad(a).values == std::vector<double>{5, 6, 5, 6});
  // d/db = a^T * g
  CHECK(tape.grad(b).values == std::vector<double>{4, 6});
}

TEST_CASE("conv1d_same centered unit kernel is identity") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({1, 3, 1}, {1, 2, 3}));
  Var w = tape.leaf(Tensor<double>({3, 1, 1}, {0, 1, 0}));
  Var y = conv1d_same(tape, x, w);
  CHECK(tape.val(y).values == std::vector<double>{1, 2, 3});
}

TEST_CASE("conv1d_same matches the naive reference on the difference kernel") {
  const Tensor<double> x({1, 3, 1}, {1, 2, 3});
  const Tensor<double> w({3, 1, 1}, {1, 0, -1});
  const Tensor<double> expected = naive_conv1d_same(x, w);
  CHECK(expected.values == std::vector<double>{-2, -2, 2});

  Tape<double> tape;
  Var y = conv1d_same(tape, tape.leaf(x), tape.leaf(w));
  CHECK(tape.val(y).values == expected.values);
}

TEST_CASE("conv1d_same keeps the time extent, kernel 8 and 128 filters") {
  Rng rng(7);
  Tape<double> tape;
  Var x = tape.leaf(random_tensor({2, 10, 3}, rng));
  Var w = tape.leaf(random_tensor({8, 3, 128}, rng));
  Var y = conv1d_same(tape, x, w);
  CHECK(tape.val(y).shape == Shape{2, 10, 128});
}

TEST_CASE("conv1d_same equals the naive reference on random shapes, k in {3,5,8}") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const std::size_t B = 1 + rng.uniform_index(3);
    const std::size_t H = 2 + rng.uniform_index(9);
    const std::size_t Kin = 1 + rng.uniform_index(4);
    const std::size_t F = 1 + rng.uniform_index(4);
    for (std::size_t kernel : {std::size_t(3), std::size_t(5), std::size_t(8)}) {
      const Tensor<double> x = random_tensor({B, H, Kin}, rng);
      const Tensor<double> w = random_tensor({kernel, Kin, F}, rng);
      const Tensor<double> expected = naive_conv1d_same(x, w);
      Tape<double> tape;
      Var y = conv1d_same(tape, tape.leaf(x), tape.leaf(w));
      CHECK(tape.val(y).shape == Shape{B, H, F});
      for (std::size_t i = 0; i < expected.numel(); ++i) {
        CHECK(tape.val(y)[i] == doctest::Approx(expected[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv1d_same channel mismatch") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({1, 4, 2}));
  Var w = tape.leaf(Tensor<double>({3, 3, 1}));
  CHECK_THROWS_AS(conv1d_same(tape, x, w), std::invalid_argument);
}

TEST_CASE("relu forward and backward") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({3}, {-1, 0, 2}));
  Var y = relu(tape, x);
  CHECK(tape.val(y).values == std::vector<double>{0, 0, 2});

  // all-negative input: zeros out, zero gradient back
  Var neg = tape.leaf(Tensor<double>({3}, {-1, -2, -3}));
  Var yn = relu(tape, neg);
  Var ln = weighted_sum(tape, yn, Tensor<double>({3}, {1, 1, 1}));
  tape.backward(ln);
  CHECK(tape.val(yn).values == std::vector<double>{0, 0, 0});
  CHECK(tape.grad(neg).values == std::vector<double>{0, 0, 0});

  // all-positive input: identity, upstream passes through
  Var pos = tape.leaf(Tensor<double>({3}, {1, 2, 3}));
  Var yp = relu(tape, pos);
  Var lp = weighted_sum(tape, yp, Tensor<double>({3}, {0.5, -1.0, 2.0}));
  tape.backward(lp);
  CHECK(tape.val(yp).values == std::vector<double>{1, 2, 3});
  CHECK(tape.grad(pos).values == std::vector<double>{0.5, -1.0, 2.0});
}

TEST_CASE("batchnorm1d normalizes {1,3} to {-1,1} as epsilon vanishes") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({1, 2, 1}, {1, 3}));
  Var gamma = tape.leaf(Tensor<double>({1}, {1}));
  Var beta = tape.leaf(Tensor<double>({1}, {0}));
  BatchNormState<double> state(1);
  state.epsilon = 0.0;  // mean 2, population variance 1
  Var y = batchnorm1d(tape, x, gamma, beta, state, Mode::Train);
  CHECK(tape.val(y).values == std::vector<double>{-1, 1});
  // running statistics move toward the batch
  CHECK(state.running_mean[0] == doctest::Approx(0.99 * 0.0 + 0.01 * 2.0));
  CHECK(state.running_var[0] == doctest::Approx(0.99 * 1.0 + 0.01 * 1.0));
}

TEST_CASE("batchnorm1d leaves standardized input nearly unchanged") {
  Tape<double> tape;
  // zero-mean unit-variance channel
  Var x = tape.leaf(Tensor<double>({1, 2, 1}, {-1, 1}));
  Var gamma = tape.leaf(Tensor<double>({1}, {1}));
  Var beta = tape.leaf(Tensor<double>({1}, {0}));
  BatchNormState<double> state(1);  // default epsilon 1e-3
  Var y = batchnorm1d(tape, x, gamma, beta, state, Mode::Train);
  CHECK(tape.val(y)[0] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(tape.val(y)[1] == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("batchnorm1d gamma 0 gives constant beta") {
  Tape<double> tape;
  Rng rng(3);
  Var x = tape.leaf(random_tensor({2, 3, 2}, rng));
  Var gamma = tape.leaf(Tensor<double>::zeros({2}));
  Var beta = tape.leaf(Tensor<double>({2}, {0.5, -0.25}));
  BatchNormState<double> state(2);
  Var y = batchnorm1d(tape, x, gamma, beta, state, Mode::Train);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(tape.val(y)[i * 2 + 0] == 0.5);
    CHECK(tape.val(y)[i * 2 + 1] == -0.25);
  }
}

TEST_CASE("batchnorm1d train mode needs at least two samples") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({1, 1, 2}));
  Var gamma = tape.leaf(Tensor<double>::full({2}, 1.0));
  Var beta = tape.leaf(Tensor<double>::zeros({2}));
  BatchNormState<double> state(2);
  CHECK_THROWS_AS(batchnorm1d(tape, x, gamma, beta, state, Mode::Train), std::invalid_argument);
  CHECK_NOTHROW(batchnorm1d(tape, x, gamma, beta, state, Mode::Inference));
}

TEST_CASE("global_avg_pool means over time") {
  Tape<double> tape;
  Var constant = tape.leaf(Tensor<double>::full({2, 5, 3}, 0.75));
  Var yc = global_avg_pool(tape, constant);
  CHECK(tape.val(yc).shape == Shape{2, 3});
  for (double v : tape.val(yc).values) CHECK(v == doctest::Approx(0.75));

  Var x = tape.leaf(Tensor<double>({1, 3, 1}, {1, 2, 3}));
  Var y = global_avg_pool(tape, x);
  CHECK(tape.val(y)[0] == doctest::Approx(2.0));
}

TEST_CASE("global_avg_pool output is length-independent") {
  Rng rng(11);
  for (std::size_t H : {std::size_t(128), std::size_t(315)}) {
    Tape<double> tape;
    Var x = tape.leaf(random_tensor({2, H, 4}, rng));
    Var y = global_avg_pool(tape, x);
    CHECK(tape.val(y).shape == Shape{2, 4});
  }
}

TEST_CASE("dropout identity cases and rate validation") {
  Rng rng(5);
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({4}, {1, 2, 3, 4}));
  Var y0 = dropout(tape, x, 0.0, rng, Mode::Train);
  CHECK(tape.val(y0).values == std::vector<double>{1, 2, 3, 4});
  Var yi = dropout(tape, x, 0.9, rng, Mode::Inference);
  CHECK(tape.val(yi).values == std::vector<double>{1, 2, 3, 4});
  CHECK_THROWS_AS(dropout(tape, x, 1.0, rng, Mode::Train), std::invalid_argument);
  CHECK_THROWS_AS(dropout(tape, x, -0.1, rng, Mode::Train), std::invalid_argument);
}

TEST_CASE("dropout inverted scaling preserves the mean") {
  Rng rng(12345);
  const std::size_t n = 200000;
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>::full({n}, 1.0));
  Var y = dropout(tape, x, 0.3, rng, Mode::Train);
  double sum = 0.0;
  for (double v : tape.val(y).values) sum += v;
  const double mean = sum / static_cast<double>(n);
  CHECK(mean == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("softmax_xent uniform logits give ln L") {
  for (std::size_t L : {std::size_t(2), std::size_t(5), std::size_t(7)}) {
    Tape<double> tape;
    Var logits = tape.leaf(Tensor<double>::full({3, L}, 0.42));
    XentResult<double> r = softmax_xent(tape, logits, std::vector<int>(3, 0));
    CHECK(tape.val(r.loss)[0] == doctest::Approx(std::log(static_cast<double>(L))).epsilon(1e-12));
  }
}

TEST_CASE("softmax_xent saturated correct class loses almost nothing") {
  Tape<double> tape;
  Var logits = tape.leaf(Tensor<double>({1, 3}, {50.0, 0.0, 0.0}));
  XentResult<double> r = softmax_xent(tape, logits, {0});
  CHECK(tape.val(r.loss)[0] < 1e-9);
}

TEST_CASE("softmax_xent against direct -log softmax evaluation") {
  // direct oracle: loss = logsumexp(z) - z[label]
  auto direct = [](const std::vector<double>& z, int label) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    return std::log(sum) + mx - z[label];
  };
  // logits [1,2]: label 0 costs ln(1+e), label 1 costs ln(1+1/e)
  CHECK(direct({1, 2}, 0) == doctest::Approx(1.3132616875182228).epsilon(1e-15));
  CHECK(direct({1, 2}, 1) == doctest::Approx(0.3132616875182228).epsilon(1e-15));

  for (int label : {0, 1}) {
    Tape<double> tape;
    Var logits = tape.leaf(Tensor<double>({1, 2}, {1, 2}));
    XentResult<double> r = softmax_xent(tape, logits, {label});
    CHECK(tape.val(r.loss)[0] == doctest::Approx(direct({1, 2}, label)).epsilon(1e-14));
  }
}

TEST_CASE("softmax rows sum to one within 1e-6") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tape<double> tape;
    Var logits = tape.leaf(random_tensor({4, 6}, rng));
    XentResult<double> r = softmax_xent(tape, logits, std::vector<int>(4, 1));
    for (std::size_t b = 0; b < 4; ++b) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 6; ++j) sum += r.probs.at2(b, j);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    Var probs = softmax(tape, logits);
    for (std::size_t b = 0; b < 4; ++b) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 6; ++j) sum += tape.val(probs).at2(b, j);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax_xent rejects bad labels and tiny class counts") {
  Tape<double> tape;
  Var logits = tape.leaf(Tensor<double>({2, 3}));
  CHECK_THROWS_AS(softmax_xent(tape, logits, {0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_xent(tape, logits, {0, -1}), std::invalid_argument);
  Var one_class = tape.leaf(Tensor<double>({2, 1}));
  CHECK_THROWS_AS(softmax_xent(tape, one_class, {0, 0}), std::invalid_argument);
}

TEST_CASE("grl forward is bit-identical, backward flips and scales") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({2}, {1.5, -2.0}));
  Var y3 = grl(tape, x, 3.0);
  CHECK(tape.val(y3).values == std::vector<double>{1.5, -2.0});

  // upstream [0.3, -0.4] through lambda 1 comes back negated
  Var x1 = tape.leaf(Tensor<double>({2}, {1.5, -2.0}));
  Var y1 = grl(tape, x1, 1.0);
  Var loss = weighted_sum(tape, y1, Tensor<double>({2}, {0.3, -0.4}));
  tape.backward(loss);
  CHECK(tape.grad(x1).values == std::vector<double>{-0.3, 0.4});

  Var x0 = tape.leaf(Tensor<double>({2}, {1.0, 2.0}));
  Var y0 = grl(tape, x0, 0.0);
  Var l0 = weighted_sum(tape, y0, Tensor<double>({2}, {1.0, 1.0}));
  tape.backward(l0);
  CHECK(tape.grad(x0).values == std::vector<double>{0.0, 0.0});

  CHECK_THROWS_AS(grl(tape, x, -0.5), std::invalid_argument);
}

TEST_CASE("grl forward identity on random tensors") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tape<float> tape;
    const Tensor<float> xv = random_tensor({3, 7}, rng).cast<float>();
    Var x = tape.leaf(xv);
    Var y = grl(tape, x, 2.5f);
    CHECK(tape.val(y).values == xv.values);  // bitwise
  }
}

TEST_CASE("mean_over_batch") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({2, 2}, {0, 1, 1, 0}));
  CHECK(tape.val(mean_over_batch(tape, x)).values == std::vector<double>{0.5, 0.5});

  Var single = tape.leaf(Tensor<double>({1, 3}, {0.2, 0.3, 0.5}));
  CHECK(tape.val(mean_over_batch(tape, single)).values == std::vector<double>{0.2, 0.3, 0.5});

  Var equal = tape.leaf(Tensor<double>({3, 2}, {0.25, 0.75, 0.25, 0.75, 0.25, 0.75}));
  const auto& m = tape.val(mean_over_batch(tape, equal));
  CHECK(m[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(m[1] == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("kl_true_vs_pred frozen value and identities") {
  // oracle: 0.5*ln(0.5/0.25) + 0.5*ln(0.5/0.75)
  const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  CHECK(expected == doctest::Approx(0.14384103622589042).epsilon(1e-15));

  Tape<double> tape;
  Var q = tape.leaf(Tensor<double>({2}, {0.25, 0.75}));
  Var kl = kl_true_vs_pred(tape, {0.5, 0.5}, q);
  CHECK(tape.val(kl)[0] == doctest::Approx(expected).epsilon(1e-14));

  // identical distributions: exactly zero, and zero gradient
  Var q2 = tape.leaf(Tensor<double>({2}, {0.5, 0.5}));
  Var kl2 = kl_true_vs_pred(tape, {0.5, 0.5}, q2);
  CHECK(tape.val(kl2)[0] == 0.0);
  tape.backward(kl2);
  CHECK(tape.grad(q2).values == std::vector<double>{0.0, 0.0});
}

TEST_CASE("kl_true_vs_pred is non-negative and zero only at equality") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    std::vector<double> p(3), qv(3);
    double ps = 0, qs = 0;
    for (int i = 0; i < 3; ++i) {
      p[i] = rng.uniform(0.05, 1.0);
      qv[i] = rng.uniform(0.05, 1.0);
      ps += p[i];
      qs += qv[i];
    }
    p[0] /= ps; p[1] /= ps; p[2] = 1.0 - p[0] - p[1];
    for (int i = 0; i < 3; ++i) qv[i] /= qs;
    Tape<double> tape;
    Var q = tape.leaf(Tensor<double>({3}, std::vector<double>(qv)));
    Var kl = kl_true_vs_pred(tape, p, q);
    CHECK(tape.val(kl)[0] >= 0.0);
    if (p != qv) CHECK(tape.val(kl)[0] > 0.0);
  }
}

TEST_CASE("kl_true_vs_pred clamps the prediction before the log") {
  Tape<double> tape;
  Var q = tape.leaf(Tensor<double>({2}, {1e-12, 1.0}));
  Var kl = kl_true_vs_pred(tape, {0.5, 0.5}, q);
  // q[0] is clamped to 1e-6: 0.5*ln(0.5/1e-6) + 0.5*ln(0.5/1)
  const double expected = 0.5 * std::log(0.5 / 1e-6) + 0.5 * std::log(0.5);
  CHECK(tape.val(kl)[0] == doctest::Approx(expected).epsilon(1e-12));
  // no gradient through the clamped coordinate
  tape.backward(kl);
  CHECK(tape.grad(q)[0] == 0.0);
  CHECK(tape.grad(q)[1] != 0.0);
}

TEST_CASE("kl_true_vs_pred rejects non-distributions") {
  Tape<double> tape;
  Var q = tape.leaf(Tensor<double>({2}, {0.5, 0.5}));
  CHECK_THROWS_AS(kl_true_vs_pred(tape, {0.7, 0.7}, q), std::invalid_argument);
  CHECK_THROWS_AS(kl_true_vs_pred(tape, {-0.2, 1.2}, q), std::invalid_argument);
  CHECK_THROWS_AS(kl_true_vs_pred(tape, {0.5, 0.25, 0.25}, q), std::invalid_argument);
}

TEST_CASE("structural helpers") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}));
  Var mid = slice_rows(tape, x, 1, 3);
  CHECK(tape.val(mid).values == std::vector<double>{3, 4, 5, 6});
  CHECK_THROWS_AS(slice_rows(tape, x, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(slice_rows(tape, x, 0, 4), std::invalid_argument);

  Var bias = tape.leaf(Tensor<double>({2}, {10, 20}));
  Var shifted = add_rowwise(tape, x, bias);
  CHECK(tape.val(shifted).values == std::vector<double>{11, 22, 13, 24, 15, 26});

  Var doubled = scale(tape, x, 2.0);
  CHECK(tape.val(doubled).values == std::vector<double>{2, 4, 6, 8, 10, 12});

  Var summed = add(tape, x, x);
  CHECK(tape.val(summed).values == tape.val(doubled).values);
}

TEST_CASE("non-finite detection fires only when enabled") {
  Tape<double> loose;
  Var x = loose.leaf(Tensor<double>({1}, {1e308}));
  CHECK_NOTHROW(scale(loose, x, 1e10));  // overflows to inf silently

  Tape<double> strict;
  strict.set_check_finite(true);
  Var y = strict.leaf(Tensor<double>({1}, {1e308}));
  CHECK_THROWS_AS(scale(strict, y, 1e10), std::runtime_error);
}

TEST_SUITE_END();
