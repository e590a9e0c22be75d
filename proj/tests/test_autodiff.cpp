// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "spikebert/bptt.hpp"
#include "spikebert/ops.hpp"

using namespace spikebert;
using namespace spikebert::ad;
using spikebert::testing::grad_check;
using M = ad::Matrix<double>;
using Vec = Eigen::VectorXd;

namespace {

M randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0, sd);
  return M::NullaryExpr(r, c, [&] { return d(rng); });
}

M binary(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution d(p);
  return M::NullaryExpr(r, c, [&] { return d(rng) ? 1.0 : 0.0; });
}

// Generic scalar readout so every output entry carries a distinct weight.
Var<double> readout(const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum_all(mul_const(y, randn(y.rows(), y.cols(), rng)));
}

template <typename Fn>
void expect_fd(const Parameters<double>& params, Fn&& fn, double tol = 1e-4) {
  const auto r = grad_check(params, fn);
  INFO(r.worst);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_err <= tol);
}

}  // namespace

TEST_CASE("y = x W gives dL/dW = x^T for L = sum(y)") {
  Tape<double> tape;
  M x(1, 3);
  x << 1.5, -2.0, 0.25;
  auto xv = tape.constant(x);
  auto w = tape.leaf(M::Random(3, 2));
  tape.backward(sum_all(matmul(xv, w)));
  M expected(3, 2);
  expected << 1.5, 1.5, -2.0, -2.0, 0.25, 0.25;
  CHECK(w.grad().isApprox(expected, 1e-15));
}

TEST_CASE("backward on a constant-only tape is a no-op") {
  Tape<double> tape;
  auto a = tape.constant(M::Ones(2, 2));
  auto loss = sum_all(a);
  tape.backward(loss);
  CHECK(a.grad().isZero());
  CHECK(loss.grad().isZero());
}

TEST_CASE("two chained matmuls on 2x2 match the symbolic chain rule") {
  Tape<double> tape;
  M a(2, 2), b(2, 2), c(2, 2);
  a << 1, 2, 3, 4;
  b << 0, 1, 1, 0;
  c << 2, 0, 0, 3;
  auto av = tape.leaf(a), bv = tape.leaf(b), cv = tape.leaf(c);
  tape.backward(sum_all(matmul(matmul(av, bv), cv)));
  // dL/dA_ij = sum_k (BC)_jk ; dL/dB_jk = colsum(A)_j * rowsum(C)_k ; dL/dC_kl = colsum(AB)_k
  M da(2, 2), db(2, 2), dc(2, 2);
  da << 3, 2, 3, 2;
  db << 8, 12, 12, 18;
  dc << 6, 6, 4, 4;
  CHECK(av.grad().isApprox(da));
  CHECK(bv.grad().isApprox(db));
  CHECK(cv.grad().isApprox(dc));
}

TEST_CASE("non-scalar loss is rejected") {
  Tape<double> tape;
  auto a = tape.leaf(M::Ones(2, 2));
  CHECK_THROWS_AS(tape.backward(a), ContractViolation);
}

TEST_CASE("gradient accumulation is linear") {
  std::mt19937_64 rng(1);
  const M x = randn(3, 4, rng), w0 = randn(4, 2, rng);
  auto grad_of = [&](int which) {
    Tape<double> tape;
    auto w = tape.leaf(w0);
    auto xv = tape.constant(x);
    auto l1 = readout(matmul(xv, w), 10);
    auto l2 = sum_all(mul(w, w));
    tape.backward(which == 0 ? add(l1, l2) : which == 1 ? l1 : l2);
    return w.grad();
  };
  CHECK(grad_of(0).isApprox(grad_of(1) + grad_of(2), 1e-14));
}

TEST_CASE("weight sharing across steps equals summed per-step copies") {
  std::mt19937_64 rng(2);
  const int steps = 4;
  std::vector<M> xs;
  for (int t = 0; t < steps; ++t) xs.push_back(randn(2, 3, rng));
  const M w0 = randn(3, 3, rng);
  const LifParams<double> lif{1.0, 0.9, 2.0};

  auto run = [&](bool shared) {
    Tape<double> tape;
    auto w = tape.leaf(w0);
    std::vector<Var<double>> copies;
    std::vector<Var<double>> currents;
    for (int t = 0; t < steps; ++t) {
      copies.push_back(shared ? w : tape.leaf(w0));
      currents.push_back(matmul(tape.constant(xs[t]), copies.back()));
    }
    auto spikes = lif_layer(concat_rows(std::span<const Var<double>>(currents)), steps, lif);
    tape.backward(readout(spikes, 3));
    M total = M::Zero(3, 3);
    if (shared) return w.grad();
    for (auto& c : copies) total += c.grad();
    return total;
  };
  CHECK(run(true).isApprox(run(false), 1e-14));
}

TEST_CASE("primitive gradients match central differences") {
  std::mt19937_64 rng(42);
  Parameters<double> p;
  p["a"] = randn(3, 4, rng);
  p["b"] = randn(3, 4, rng);
  p["w"] = randn(4, 2, rng);
  p["row"] = randn(1, 4, rng);
  p["gain"] = randn(1, 4, rng);
  p["bias"] = randn(1, 4, rng);
  p["table"] = randn(5, 4, rng);
  const M c = randn(3, 4, rng);

  SUBCASE("matmul") { expect_fd(p, [](auto& v) { return readout(matmul(v["a"], v["w"]), 1); }); }
  SUBCASE("add") { expect_fd(p, [](auto& v) { return readout(add(v["a"], v["b"]), 2); }); }
  SUBCASE("sub") { expect_fd(p, [](auto& v) { return readout(sub(v["a"], v["b"]), 3); }); }
  SUBCASE("mul") { expect_fd(p, [](auto& v) { return readout(mul(v["a"], v["b"]), 4); }); }
  SUBCASE("mul_const") { expect_fd(p, [&](auto& v) { return readout(mul_const(v["a"], c), 5); }); }
  SUBCASE("scale") { expect_fd(p, [](auto& v) { return readout(scale(v["a"], -1.7), 6); }); }
  SUBCASE("add_row") { expect_fd(p, [](auto& v) { return readout(add_row(v["a"], v["row"]), 7); }); }
  SUBCASE("sum_axis") {
    expect_fd(p, [](auto& v) { return add(readout(sum_axis(v["a"], 0), 8), readout(sum_axis(v["a"], 1), 9)); });
  }
  SUBCASE("mean_axis") {
    expect_fd(p, [](auto& v) { return add(readout(mean_axis(v["a"], 0), 10), readout(mean_axis(v["a"], 1), 11)); });
  }
  SUBCASE("sum_all and mean_all") {
    expect_fd(p, [](auto& v) { return add(sum_all(mul(v["a"], v["a"])), mean_all(mul(v["b"], v["a"]))); });
  }
  SUBCASE("layer_norm") {
    expect_fd(p, [](auto& v) { return readout(layer_norm(v["a"], v["gain"], v["bias"]), 12); });
  }
  SUBCASE("linear") { expect_fd(p, [](auto& v) { return readout(linear(v["a"], v["w"], v["row"].tape().constant(M::Ones(1, 2))), 13); }); }
  SUBCASE("embedding") {
    expect_fd(p, [](auto& v) { return readout(embedding(v["table"], {0, 3, 3, 1}), 14); });
  }
  SUBCASE("spike (soft forward)") {
    expect_fd(p, [](auto& v) { return readout(spike(v["a"], 0.3, 2.0, SpikeMode::kSoft), 15); });
  }
  SUBCASE("soft_spike") { expect_fd(p, [](auto& v) { return readout(soft_spike(v["a"], 2.0), 16); }); }
  SUBCASE("softmax") { expect_fd(p, [](auto& v) { return readout(softmax(v["a"]), 17); }); }
  SUBCASE("kl_divergence") {
    std::mt19937_64 r2(9);
    M target = randn(3, 4, r2).array().exp().matrix();
    target = target.array().colwise() / target.rowwise().sum().array();
    expect_fd(p, [&](auto& v) { return kl_divergence(target, softmax(v["a"])); });
  }
  SUBCASE("cross_entropy") {
    expect_fd(p, [](auto& v) { return cross_entropy(softmax(v["a"]), {0, 3, 2}); });
  }
  SUBCASE("softmax_cross_entropy") {
    expect_fd(p, [](auto& v) { return softmax_cross_entropy(v["a"], {1, 1, 2}); });
  }
  SUBCASE("group_l2_norm and l2_norm") {
    expect_fd(p, [](auto& v) {
      return add(readout(group_l2_norm(v["a"], 1), 18), l2_norm(sub(v["a"], v["b"])));
    });
  }
  SUBCASE("slice_rows and concat_rows") {
    expect_fd(p, [](auto& v) {
      std::vector<Var<double>> parts{slice_rows(v["a"], 1, 2), v["b"], slice_rows(v["a"], 0, 1)};
      return readout(concat_rows(std::span<const Var<double>>(parts)), 19);
    });
  }
  SUBCASE("time_sum") {
    Parameters<double> q{{"x", randn(6, 3, rng)}};
    expect_fd(q, [](auto& v) { return readout(time_sum(v["x"], 3), 20); });
  }
  SUBCASE("spiking_attention") {
    const SeqLayout layout{2, 2, 3};
    Parameters<double> q{{"q", randn(12, 4, rng)}, {"k", randn(12, 4, rng)}, {"v", randn(12, 4, rng)}};
    M mask = M::Ones(2, 3);
    mask(1, 2) = 0;
    expect_fd(q, [&](auto& v) {
      return readout(spiking_attention(v["q"], v["k"], v["v"], mask, layout, 2, 0.125), 21);
    });
  }
}

TEST_CASE("embedding rejects out-of-range ids") {
  Tape<double> tape;
  auto table = tape.leaf(M::Zero(4, 2));
  CHECK_THROWS_AS(embedding(table, {0, 4}), InputError);
  CHECK_THROWS_AS(embedding(table, {-1}), InputError);
}

TEST_CASE("hard spike backward carries the surrogate factor") {
  for (double x : {0.2, 0.6, 1.4}) {
    Tape<double> tape;
    auto w = tape.leaf(M::Constant(1, 1, 1.3));
    auto u = scale(w, x);
    auto s = spike(u, 1.0, 2.0, SpikeMode::kHard);
    tape.backward(sum_all(s));
    const double uu = 1.3 * x - 1.0;
    const double k = std::numbers::pi;  // pi * alpha / 2 with alpha = 2
    CHECK(s.value()(0, 0) == (1.3 * x >= 1.0 ? 1.0 : 0.0));
    CHECK(w.grad()(0, 0) == doctest::Approx(x * 1.0 / (1 + k * k * uu * uu)).epsilon(1e-14));
  }
}

namespace {

// loss = sum_t c_t S_t for a single neuron with I_t = x_t . w
Vec tape_neuron_grad(const Vec& w0, const M& x, const Vec& c, const LifParams<double>& p, UnrollOptions opt) {
  Tape<double> tape;
  auto w = tape.leaf(w0);
  auto spikes = lif_layer(matmul(tape.constant(x), w), x.rows(), p, opt);
  tape.backward(sum_all(mul_const(spikes, M(c))));
  return w.grad();
}

}  // namespace

TEST_CASE("single LIF neuron, T=3, soft forward: autodiff matches finite differences") {
  std::mt19937_64 rng(8);
  const M x = randn(3, 4, rng, 0.6);
  Parameters<double> p{{"w", randn(4, 1, rng)}};
  const LifParams<double> lif{1.0, 0.9, 2.0};
  expect_fd(p, [&](auto& v) {
    auto spikes = lif_layer(matmul(v["w"].tape().constant(x), v["w"]), 3, lif,
                            {SpikeMode::kSoft, ResetGrad::kAttached});
    return sum_all(spikes);
  });
}

TEST_CASE("detached reset matches the explicit recurrence") {
  std::mt19937_64 rng(12);
  for (int steps : {1, 2, 4, 8}) {
    for (double beta : {0.0, 0.5, 0.9, 1.0}) {
      const M x = randn(steps, 5, rng, 0.8);
      const Vec w = randn(5, 1, rng);
      const Vec c = randn(steps, 1, rng);
      LifParams<double> lif{1.0, beta, 2.0};
      const Vec got = tape_neuron_grad(w, x, c, lif, {});
      const Vec ref = bptt_reference_grad<double>(w, x, c, lif);
      CAPTURE(steps);
      CAPTURE(beta);
      CHECK((got - ref).norm() <= 1e-10 * std::max(ref.norm(), 1e-300));
    }
  }
}

TEST_CASE("beta 0 and T 1 reduce to the single-step chain rule") {
  std::mt19937_64 rng(13);
  const double k = std::numbers::pi;
  auto sg = [&](double u) { return 1.0 / (1 + k * k * u * u); };
  {
    const M x = randn(4, 3, rng);
    const Vec w = randn(3, 1, rng), c = randn(4, 1, rng);
    LifParams<double> lif{1.0, 0.0, 2.0};
    Vec expected = Vec::Zero(3);
    double last = 0;
    for (int i = 0; i < 4; ++i) {
      const double u = x.row(i).dot(w) - last;  // beta = 0: only the reset survives
      expected += c(i) * sg(u - 1.0) * x.row(i).transpose();
      last = u >= 1.0 ? 1.0 : 0.0;
    }
    CHECK((bptt_reference_grad<double>(w, x, c, lif) - expected).norm() <= 1e-12);
    CHECK((tape_neuron_grad(w, x, c, lif, {}) - expected).norm() <= 1e-12);
  }
  {
    const M x = randn(1, 3, rng);
    const Vec w = randn(3, 1, rng), c = randn(1, 1, rng);
    LifParams<double> lif{1.0, 0.9, 2.0};
    const Vec expected = c(0) * sg(x.row(0).dot(w) - 1.0) * x.row(0).transpose();
    CHECK((tape_neuron_grad(w, x, c, lif, {}) - expected).norm() <= 1e-14);
  }
}

TEST_CASE("the finite-difference checker flags a wrong backward rule") {
  Parameters<double> p{{"a", M::Constant(2, 2, 0.7)}};
  const auto r = grad_check(p, [](auto& v) {
    Tape<double>& tape = v["a"].tape();
    const int id = v["a"].id();
    // forward a^2, backward claims 3a
    auto sq = tape.record(OpKind::kMul, {id}, v["a"].value().cwiseAbs2(),
                          [id](Tape<double>& t, const M& g) { t.accumulate(id, 3.0 * g.cwiseProduct(t.value(id))); });
    return sum_all(sq);
  });
  CHECK(r.max_rel_err > 0.4);
}
