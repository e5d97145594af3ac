#include "oracles.hpp"

using namespace cast;
using namespace cast::test;

TEST_CASE("support sets: counts and hand-enumerated examples") {
  for (const auto& keys : attention_support(Window::space, 3, 4)) CHECK(keys.size() == 4);
  for (const auto& keys : attention_support(Window::time, 3, 4)) CHECK(keys.size() == 3);
  for (const auto& keys : attention_support(Window::space_time, 3, 4)) CHECK(keys.size() == 12);
  // T2S: query (t=0, n=1) sees (0,1) and (1,1); S2T: query (t=1, n=0) sees (1,0) and (1,1).
  CHECK(attention_support(Window::time, 2, 2)[1] == std::vector<Index>{1, 3});
  CHECK(attention_support(Window::space, 2, 2)[2] == std::vector<Index>{2, 3});
  CHECK_THROWS_AS(attention_support(Window::space, 0, 2), DomainError);
}

TEST_CASE("windowed attention equals masked full attention for every T, N <= 4") {
  const Index D = 4;
  for (Window w : {Window::space, Window::time, Window::space_time})
    for (Index T = 1; T <= 4; ++T)
      for (Index N = 1; N <= 4; ++N)
        for (Index heads : {1, 2}) {
          CAPTURE(to_string(w));
          CAPTURE(T);
          CAPTURE(N);
          Tape<double> tape(false);
          const bool cls = w != Window::time && N % 2 == 1;
          auto x = random_grid(tape, 2, T, N, D, cls, 100 * T + N);
          auto y = random_grid(tape, 2, T, N, D, cls, 100 * T + N + 50);
          auto wts = AttnWeights::random(D, T * 7 + N, heads == 1);
          auto self = mhsa(x, wts.vars(tape, heads, w));
          CHECK((self.data.value().matrix() - masked_attention(x, x, wts, heads, w)).cwiseAbs().maxCoeff() < 1e-5);
          auto cross = mhca(x, y, wts.vars(tape, heads, w));
          CHECK((cross.data.value().matrix() - masked_attention(x, y, wts, heads, w)).cwiseAbs().maxCoeff() < 1e-5);
        }
}

TEST_CASE("cross-attention support sets equal the enumeration exactly") {
  for (Window w : {Window::space, Window::time, Window::space_time})
    for (Index T = 1; T <= 4; ++T)
      for (Index N = 1; N <= 4; ++N) {
        Tape<double> tape(false);
        auto q = random_grid(tape, 1, T, N, 4, false, 7 * T + N);
        auto kv = random_grid(tape, 1, T, N, 4, false, 7 * T + N + 99);
        const auto seen = observed_support(q, kv, AttnWeights::random(4, 3), 2, w);
        const auto expect = attention_support(w, T, N);
        for (std::size_t i = 0; i < expect.size(); ++i)
          CHECK(seen[i] == std::set<Index>(expect[i].begin(), expect[i].end()));
      }
}

TEST_CASE("mhsa degenerate cases") {
  Tape<double> tape(false);
  const Index D = 4;
  auto wts = AttnWeights::random(D, 11);

  SUBCASE("single token: the lone weight is 1") {
    auto x = random_grid(tape, 1, 1, 1, D, false, 1);
    auto out = mhsa(x, wts.vars(tape, 2, Window::space_time)).data.value();
    RowVector<double> v = x.data.value().matrix() * wts.wv.matrix() + wts.bv.matrix();
    RowVector<double> o = v * wts.wo.matrix() + wts.bo.matrix();
    CHECK((out.matrix() - o).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("two identical tokens split attention evenly") {
    auto one = random_tensor({1, D}, 2);
    Tensor<double> two({2, D});
    two.matrix().row(0) = one.matrix().row(0);
    two.matrix().row(1) = one.matrix().row(0);
    TokenGrid<double> x{tape.constant(two), 1, 1, 2, false, kFrameMajor};
    auto out = mhsa(x, wts.vars(tape, 1, Window::space)).data.value();
    RowVector<double> v = one.matrix() * wts.wv.matrix() + wts.bv.matrix();
    RowVector<double> o = v * wts.wo.matrix() + wts.bo.matrix();
    CHECK((out.matrix().row(0) - o).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out.matrix().row(1) - o).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("zero query and key projections give the window mean of the values") {
    AttnWeights u = wts;
    u.wq.data().setZero();
    u.bq.data().setZero();
    u.wk.data().setZero();
    u.bk.data().setZero();
    u.out_proj = false;
    auto x = random_grid(tape, 1, 3, 2, D, false, 3);
    auto out = mhsa(x, u.vars(tape, 1, Window::time)).data.value();
    for (Index n = 0; n < 2; ++n) {
      RowVector<double> m = RowVector<double>::Zero(D);
      for (Index t = 0; t < 3; ++t) m += x.data.value().matrix().row(x.row_of(0, t, n)) * u.wv.matrix() + u.bv.matrix();
      m /= 3;
      for (Index t = 0; t < 3; ++t) CHECK((out.matrix().row(x.row_of(0, t, n)) - m).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("attention rows over the support sum to one") {
    AttnWeights u = wts;
    u.wv.data().setZero();
    u.bv.data().setOnes();
    u.out_proj = false;
    auto x = random_grid(tape, 2, 3, 3, D, true, 4);
    for (Window w : {Window::space, Window::space_time}) {
      auto out = mhsa(x, u.vars(tape, 2, w)).data.value();
      CHECK((out.data().array() - 1.0).abs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("mhca with kv == query is mhsa exactly") {
  Tape<double> tape(false);
  auto x = random_grid(tape, 2, 3, 4, 4, false, 5);
  auto wts = AttnWeights::random(4, 21);
  for (Window w : {Window::space, Window::time, Window::space_time}) {
    auto a = mhsa(x, wts.vars(tape, 2, w)).data.value();
    auto b = mhca(x, x, wts.vars(tape, 2, w)).data.value();
    CHECK(bitwise_equal(a.matrix(), b.matrix()));
  }
}

TEST_CASE("frame permutation permutes attention outputs") {
  Tape<double> tape(false);
  const Index B = 1, T = 4, N = 3, D = 4;
  auto x = random_grid(tape, B, T, N, D, false, 6);
  const std::vector<Index> perm = {2, 0, 3, 1};
  Tensor<double> moved = x.data.value();
  for (Index t = 0; t < T; ++t)
    for (Index n = 0; n < N; ++n) moved.matrix().row(x.row_of(0, t, n)) = x.data.value().matrix().row(x.row_of(0, perm[t], n));
  auto xp = with_data(x, tape.constant(moved));
  auto wts = AttnWeights::random(D, 31);
  for (Window w : {Window::space, Window::time}) {
    auto a = mhsa(x, wts.vars(tape, 2, w)).data.value();
    auto b = mhsa(xp, wts.vars(tape, 2, w)).data.value();
    for (Index t = 0; t < T; ++t)
      for (Index n = 0; n < N; ++n)
        CHECK((b.matrix().row(x.row_of(0, t, n)) - a.matrix().row(x.row_of(0, perm[t], n))).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("attention errors") {
  Tape<double> tape(false);
  auto cls = random_grid(tape, 1, 2, 2, 4, true, 7);
  auto wts = AttnWeights::random(4, 41);
  CHECK_THROWS_AS(mhsa(cls, wts.vars(tape, 2, Window::time)), ContractError);
  auto a = random_grid(tape, 1, 2, 2, 4, false, 8);
  auto b = random_grid(tape, 1, 3, 2, 4, false, 9);
  CHECK_THROWS_AS(mhca(a, b, wts.vars(tape, 2, Window::space)), DimensionError);
  auto narrow = random_grid(tape, 1, 2, 2, 6, false, 10);
  CHECK_THROWS_AS(mhsa(narrow, wts.vars(tape, 2, Window::space)), DimensionError);
}
