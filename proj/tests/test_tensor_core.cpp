#include "cast/autodiff.hpp"
#include "cast/finite_diff.hpp"
#include "support.hpp"

#include <functional>

using namespace cast;
using cast::test::random_tensor;

namespace {

using Build = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

Parameter<double> make_param(const std::string& name, Tensor<double> v, bool frozen = false) {
  Parameter<double> p;
  p.name = name;
  p.value = std::move(v);
  p.frozen = frozen;
  return p;
}

double eval_scalar(const Build& f, std::vector<Parameter<double>>& ps) {
  Tape<double> tape(false);
  std::vector<Var<double>> vs;
  for (auto& p : ps) vs.push_back(tape.param(p));
  return f(tape, vs).value()[0];
}

/// Worst relative error between reverse-mode and central-difference gradients.
double grad_error(const Build& f, std::vector<Parameter<double>>& ps) {
  for (auto& p : ps) p.grad.reset();
  Tape<double> tape;
  std::vector<Var<double>> vs;
  for (auto& p : ps) vs.push_back(tape.param(p));
  tape.backward(f(tape, vs));
  double worst = 0;
  for (auto& p : ps) {
    if (p.frozen) continue;
    REQUIRE(p.grad.has_value());
    auto fd = finite_diff_grad([&] { return eval_scalar(f, ps); }, p, 1e-5);
    worst = std::max(worst, max_relative_error(*p.grad, fd, 1e-6));
  }
  return worst;
}

}  // namespace

TEST_CASE("tensor: shape and data length agree") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0}), DimensionError);
  Tensor<double> t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
}

TEST_CASE("matmul: hand example, identity and triple-loop oracle") {
  Tape<double> tape(false);
  auto a = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor<double>({2, 2}, {0, 1, 1, 0}));
  auto c = matmul(a, b).value();
  CHECK(c[0] == 2);
  CHECK(c[1] == 1);
  CHECK(c[2] == 4);
  CHECK(c[3] == 3);

  auto x = random_tensor({3, 5}, 1);
  Tensor<double> eye({5, 5});
  for (Index i = 0; i < 5; ++i) eye[i * 5 + i] = 1;
  auto xi = matmul(tape.constant(x), tape.constant(eye)).value();
  CHECK(xi.data() == x.data());

  auto p = random_tensor({2, 3, 4}, 2), q = random_tensor({4, 2}, 3);
  auto r = matmul(tape.constant(p), tape.constant(q)).value();
  REQUIRE(r.shape() == Shape{2, 3, 2});
  for (Index bt = 0; bt < 2; ++bt)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 2; ++j) {
        double s = 0;
        for (Index k = 0; k < 4; ++k) s += p[(bt * 3 + i) * 4 + k] * q[k * 2 + j];
        CHECK(std::abs(r[(bt * 3 + i) * 2 + j] - s) < 1e-6);
      }
}

TEST_CASE("matmul: mismatched inner extents name both shapes") {
  Tape<double> tape(false);
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({4, 2}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("softmax: analytic values, shift invariance, simplex rows") {
  Tape<double> tape(false);
  auto u = softmax_lastdim(tape.constant(Tensor<double>({3}, {0, 0, 0}))).value();
  for (Index i = 0; i < 3; ++i) CHECK(std::abs(u[i] - 1.0 / 3) < 1e-12);
  auto two = softmax_lastdim(tape.constant(Tensor<double>({2}, {0, std::log(2.0)}))).value();
  CHECK(std::abs(two[0] - 1.0 / 3) < 1e-12);
  CHECK(std::abs(two[1] - 2.0 / 3) < 1e-12);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto x = random_tensor({4, 7}, seed, -20, 20);
    auto s = softmax_lastdim(tape.constant(x)).value();
    Tensor<double> shifted = x;
    shifted.data().array() += 123.5;
    auto s2 = softmax_lastdim(tape.constant(shifted)).value();
    for (Index r = 0; r < 4; ++r) {
      double total = 0;
      for (Index c = 0; c < 7; ++c) {
        const double v = s[r * 7 + c];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        total += v;
        CHECK(std::abs(v - s2[r * 7 + c]) < 1e-12);
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
  Tensor<double> bad({2}, {0, std::nan("")});
  CHECK_THROWS_AS(softmax_lastdim(tape.constant(bad)), NumericError);
}

TEST_CASE("layer_norm: limits and statistics") {
  Tape<double> tape(false);
  auto ones = tape.constant(Tensor<double>({4}, {1, 1, 1, 1}));
  auto zeros = tape.constant(Tensor<double>({4}));
  auto c = layer_norm(tape.constant(Tensor<double>({4}, {3, 3, 3, 3})), ones, zeros, 1e-6).value();
  for (Index i = 0; i < 4; ++i) CHECK(c[i] == 0.0);

  auto g2 = tape.constant(Tensor<double>({2}, {1, 1}));
  auto b2 = tape.constant(Tensor<double>({2}));
  auto pm = layer_norm(tape.constant(Tensor<double>({2}, {1, -1})), g2, b2, 0.0).value();
  CHECK(pm[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pm[1] == doctest::Approx(-1.0).epsilon(1e-12));

  auto x = random_tensor({5, 64}, 9, -3, 7);
  Tensor<double> g({64}), b({64});
  g.data().setOnes();
  auto y = layer_norm(tape.constant(x), tape.constant(g), tape.constant(b), 1e-6).value();
  for (Index r = 0; r < 5; ++r) {
    auto row = y.matrix().row(r);
    const double mean = row.mean();
    const double var = (row.array() - mean).square().mean();
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }
  CHECK_THROWS_AS(layer_norm(tape.constant(x), g2, b2, 1e-6), DimensionError);
}

TEST_CASE("gelu: exact erf form") {
  CHECK(gelu_value(0.0) == 0.0);
  CHECK(std::abs(gelu_value(10.0) - 10.0) < 1e-6);
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  CHECK(std::abs(gelu_value(1.0) - phi1) < 1e-12);
  CHECK(std::abs(gelu_value(1.0) - 0.8413) < 1e-4);
}

TEST_CASE("backward: sum of products, frozen contract, single use") {
  auto xv = random_tensor({3, 4}, 4), yv = random_tensor({3, 4}, 5);
  auto px = make_param("x", xv), py = make_param("y", yv, /*frozen=*/true);
  Tape<double> tape;
  auto loss = sum(mul(tape.param(px), tape.param(py)));
  tape.backward(loss);
  REQUIRE(px.grad.has_value());
  CHECK(px.grad->data() == yv.data());
  CHECK_FALSE(py.grad.has_value());
  CHECK_THROWS_AS(tape.backward(loss), TapeError);
  CHECK_THROWS_AS(tape.constant(xv), TapeError);
  tape.reset();
  CHECK_NOTHROW(tape.constant(xv));

  Tape<double> inference(false);
  auto l2 = sum(inference.param(px));
  CHECK_THROWS_AS(inference.backward(l2), TapeError);
}

TEST_CASE("backward: leaf gradients") {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({2}, {1, 2}));
  auto b = tape.constant(Tensor<double>({2}, {3, 5}));
  tape.backward(sum(mul(a, b)));
  auto g = tape.grad(a);
  REQUIRE(g.has_value());
  CHECK((*g)[0] == 3);
  CHECK((*g)[1] == 5);
  CHECK_FALSE(tape.grad(b).has_value());
}

TEST_CASE("finite_diff_grad: analytic cases") {
  auto p = make_param("p", Tensor<double>({2}, {1, 2}));
  auto sq = finite_diff_grad(
      [&] { return p.value.data().squaredNorm(); }, p, 1e-5);
  CHECK(std::abs(sq[0] - 2) < 1e-6);
  CHECK(std::abs(sq[1] - 4) < 1e-6);
  auto soft = finite_diff_grad(
      [&] {
        Tape<double> t(false);
        return sum(softmax_lastdim(t.param(p))).value()[0];
      },
      p, 1e-5);
  CHECK(std::abs(soft[0]) < 1e-9);
  CHECK(std::abs(soft[1]) < 1e-9);
  CHECK_THROWS_AS(finite_diff_grad([&] { return std::nan(""); }, p, 1e-5), NumericError);
  CHECK_THROWS_AS(finite_diff_grad([&] { return 0.0; }, p, 0.0), DomainError);
}

TEST_CASE("gradients of every primitive match central differences") {
  auto P = [](const std::string& n, Shape s, std::uint64_t seed) { return make_param(n, random_tensor(std::move(s), seed)); };
  const std::vector<int> labels = {2, 0, 1};

  SUBCASE("matmul (batched, broadcast)") {
    std::vector<Parameter<double>> ps = {P("a", {2, 3, 4}, 1), P("b", {4, 5}, 2)};
    CHECK(grad_error([](auto&, auto& v) { return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1]))); }, ps) < 1e-6);
  }
  SUBCASE("linear with bias") {
    std::vector<Parameter<double>> ps = {P("x", {3, 4}, 3), P("w", {4, 5}, 4), P("b", {5}, 5)};
    CHECK(grad_error([](auto&, auto& v) { return sum(gelu(linear(v[0], v[1], v[2]))); }, ps) < 1e-6);
  }
  SUBCASE("add, sub, scale, mean") {
    std::vector<Parameter<double>> ps = {P("a", {3, 4}, 6), P("b", {3, 4}, 7)};
    CHECK(grad_error([](auto&, auto& v) { return mean(mul(sub(v[0], scale(v[1], 0.7)), add(v[0], v[1]))); }, ps) < 1e-6);
  }
  SUBCASE("layer_norm") {
    std::vector<Parameter<double>> ps = {P("x", {4, 6}, 8), P("g", {6}, 9), P("b", {6}, 10), P("w", {4, 6}, 11)};
    CHECK(grad_error([](auto&, auto& v) { return sum(mul(layer_norm(v[0], v[1], v[2], 1e-6), v[3])); }, ps) < 1e-6);
  }
  SUBCASE("softmax and cross_entropy with smoothing") {
    std::vector<Parameter<double>> ps = {P("x", {3, 4}, 12), P("w", {3, 4}, 13)};
    CHECK(grad_error([](auto&, auto& v) { return sum(mul(softmax_lastdim(v[0]), v[1])); }, ps) < 1e-6);
    std::vector<Parameter<double>> ls = {P("l", {3, 4}, 14)};
    CHECK(grad_error([&](auto&, auto& v) { return cross_entropy(v[0], std::span<const int>(labels), 0.1); }, ls) < 1e-6);
  }
  SUBCASE("row gather, concat, indexed add, group mean") {
    std::vector<Parameter<double>> ps = {P("x", {6, 3}, 15), P("t", {2, 3}, 16)};
    CHECK(grad_error(
              [](auto&, auto& v) {
                auto g = gather_rows(v[0], {5, 0, 0, 2});
                auto x = add_indexed_rows(g, v[1], {1, 0, 1, 1});
                auto c = concat_cols(x, concat_rows(gather_rows(v[0], {1, 2}), v[1]));
                return sum(mul(group_mean_rows(c, 2), group_mean_rows(c, 2)));
              },
              ps) < 1e-6);
  }
  SUBCASE("grouped multi-head attention") {
    std::vector<Parameter<double>> ps = {P("q", {6, 4}, 18), P("k", {6, 4}, 19), P("v", {6, 4}, 20), P("w", {6, 4}, 21)};
    CHECK(grad_error([](auto&, auto& v) { return sum(mul(grouped_attention(v[0], v[1], v[2], 2, 2), v[3])); }, ps) < 1e-6);
  }
}

TEST_CASE("cross_entropy without smoothing is the negative log-probability") {
  auto x = random_tensor({3, 5}, 30, -4, 4);
  const std::vector<int> labels = {4, 0, 2};
  Tape<double> tape(false);
  const double ce = cross_entropy(tape.constant(x), std::span<const int>(labels)).value()[0];
  auto p = softmax_rows(x);
  double nll = 0;
  for (int i = 0; i < 3; ++i) nll -= std::log(p[i * 5 + labels[i]]);
  CHECK(std::abs(ce - nll / 3) < 1e-6);
}
