#include <catch2/catch_amalgamated.hpp>

#include "das/tensor.hpp"

using das::Mask;
using das::Tape;
using das::Tensor;

namespace {

// independent triple-loop product, used as the matmul oracle
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p)
        c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

}  // namespace

TEST_CASE("matmul identity") {
  Tape tape;
  auto eye = das::make_leaf({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto b = das::make_leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  auto c = das::matmul(tape, eye, b);
  REQUIRE(c.shape() == das::Shape{3, 2});
  for (int i = 0; i < 6; ++i) REQUIRE(c.value()[i] == b.value()[i]);
}

TEST_CASE("matmul 1x1") {
  Tape tape;
  auto a = das::make_leaf({1, 1}, {2});
  auto b = das::make_leaf({1, 1}, {3});
  REQUIRE(das::matmul(tape, a, b).scalar() == 6.0);
}

TEST_CASE("matmul random vs triple-loop oracle") {
  das::Rng rng(17);
  Tape tape;
  auto a = das::uniform_leaf(rng, {4, 5}, -2.0, 2.0, false);
  auto b = das::uniform_leaf(rng, {5, 3}, -2.0, 2.0, false);
  auto c = das::matmul(tape, a, b);
  auto expect = naive_matmul(a.value(), b.value(), 4, 5, 3);
  for (std::size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::abs(c.value()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  auto a = das::zeros({4, 5});
  auto b = das::zeros({3, 2});
  try {
    das::matmul(tape, a, b);
    FAIL("expected exception");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("[4x5]") != std::string::npos);
    REQUIRE(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("elementwise basics") {
  Tape tape;
  REQUIRE(das::sigmoid(tape, das::scalar_leaf(0.0)).scalar() == 0.5);
  REQUIRE(das::tanh_op(tape, das::scalar_leaf(0.0)).scalar() == 0.0);
  auto m = das::mul(tape, das::make_leaf({2}, {1, 2}), das::make_leaf({2}, {3, 4}));
  REQUIRE(m.value() == std::vector<double>{3, 8});
  REQUIRE_THROWS_AS(das::add(tape, das::zeros({2}), das::zeros({3})), std::invalid_argument);
}

TEST_CASE("softmax basics") {
  Tape tape;
  auto a = das::softmax(tape, das::make_leaf({2}, {0, 0}));
  REQUIRE(a.value()[0] == Catch::Approx(0.5).margin(1e-15));

  auto b = das::softmax(tape, das::make_leaf({2}, {0.0, std::log(3.0)}));
  REQUIRE(b.value()[0] == Catch::Approx(0.25).margin(1e-12));
  REQUIRE(b.value()[1] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax mask zeroes hidden positions") {
  Tape tape;
  Mask mask = {1, 1, 0};
  auto s = das::softmax(tape, das::make_leaf({3}, {5, 7, 9}), &mask);
  auto ref = das::softmax(tape, das::make_leaf({2}, {5, 7}));
  REQUIRE(s.value()[2] == 0.0);
  REQUIRE(s.value()[0] == Catch::Approx(ref.value()[0]).margin(1e-15));
  REQUIRE(s.value()[1] == Catch::Approx(ref.value()[1]).margin(1e-15));

  Mask all = {0, 0, 0};
  REQUIRE_THROWS_AS(das::softmax(tape, das::zeros({3}), &all), std::invalid_argument);
}

TEST_CASE("softmax shift invariance") {
  das::Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    auto x = das::uniform_leaf(rng, {7}, -3.0, 3.0, false);
    double c = rng.uniform(-50.0, 50.0);
    auto shifted = x.value();
    for (auto& v : shifted) v += c;
    auto s1 = das::softmax(tape, x);
    auto s2 = das::softmax(tape, das::make_leaf({7}, shifted));
    double total = 0.0;
    for (int i = 0; i < 7; ++i) {
      REQUIRE(std::abs(s1.value()[i] - s2.value()[i]) < 1e-12);
      total += s1.value()[i];
    }
    REQUIRE(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("backward square") {
  Tape tape;
  auto x = das::make_leaf({1}, {3.0}, true);
  auto loss = das::mul(tape, x, x);
  tape.backward(loss);
  REQUIRE(x.grad()[0] == 6.0);
}

TEST_CASE("backward constant loss gives zero grads") {
  Tape tape;
  auto x = das::make_leaf({2}, {1.0, 2.0}, true);
  auto c = das::scalar_leaf(7.0);
  auto loss = das::mul(tape, c, c);  // does not touch x
  REQUIRE(loss.tape_ == nullptr);    // constant subgraph is not recorded
  auto loss2 = das::scale(tape, das::sum(tape, x), 0.0);
  tape.backward(loss2);
  REQUIRE(x.grad()[0] == 0.0);
  REQUIRE(x.grad()[1] == 0.0);
}

TEST_CASE("backward twice is an error") {
  auto x = das::make_leaf({1}, {2.0}, true);
  Tape tape;
  auto loss = das::mul(tape, x, x);
  tape.backward(loss);
  REQUIRE_THROWS_AS(tape.backward(loss), std::logic_error);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  auto x = das::make_leaf({2}, {1.0, 2.0}, true);
  auto y = das::add(tape, x, x);
  REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward of sum(sigmoid(Wx)) matches hand-rolled finite differences") {
  das::Rng rng(23);
  auto w = das::uniform_leaf(rng, {4, 3}, -1.0, 1.0, true);
  auto x = das::uniform_leaf(rng, {3}, -1.0, 1.0, true);

  auto forward = [&](Tape& t) {
    return das::sum(t, das::sigmoid(t, das::matmul(t, w, x)));
  };
  {
    Tape tape;
    auto loss = forward(tape);
    tape.backward(loss);
  }
  const double h = 1e-5;
  auto check = [&](Tensor& p) {
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      double orig = p.value()[i];
      p.value()[i] = orig + h;
      Tape tp;
      tp.set_recording(false);
      double fp = forward(tp).scalar();
      p.value()[i] = orig - h;
      Tape tm;
      tm.set_recording(false);
      double fm = forward(tm).scalar();
      p.value()[i] = orig;
      double fd = (fp - fm) / (2 * h);
      double rel = std::abs(p.grad()[i] - fd) /
                   std::max({std::abs(p.grad()[i]), std::abs(fd), 1e-8});
      REQUIRE(rel <= 1e-6);
    }
  };
  check(w);
  check(x);
}

TEST_CASE("gradcheck passes on dot product") {
  das::Rng rng(3);
  auto a = das::uniform_leaf(rng, {5}, -1.0, 1.0, true);
  auto b = das::uniform_leaf(rng, {5}, -1.0, 1.0, true);
  auto report = das::gradcheck(
      [&](Tape& t) { return das::sum(t, das::mul(t, a, b)); },
      {{"a", a}, {"b", b}}, 1e-5, 1e-6);
  REQUIRE(report.pass);
}

TEST_CASE("gradcheck detects a corrupted gradient") {
  das::Rng rng(4);
  auto a = das::uniform_leaf(rng, {4}, 0.5, 1.5, true);
  // scale(2x) in the analytic path only: loss value is sum(a) but the recorded
  // graph doubles the gradient
  auto report = das::gradcheck(
      [&](Tape& t) {
        if (t.recording()) return das::scale(t, das::sum(t, a), 2.0);
        return das::sum(t, a);
      },
      {{"a", a}}, 1e-5, 1e-6);
  REQUIRE_FALSE(report.pass);
  REQUIRE(report.entries[0].max_rel_err > 0.1);
}

TEST_CASE("per-op chain rule vs finite differences on random shapes") {
  das::Rng rng(99);
  auto run = [&](auto&& f, std::vector<std::pair<std::string, Tensor>> params) {
    auto report = das::gradcheck(f, params, 1e-5, 1e-6);
    INFO(report.summary());
    REQUIRE(report.pass);
  };

  auto a = das::uniform_leaf(rng, {3, 4}, -1, 1, true);
  auto b = das::uniform_leaf(rng, {4, 2}, -1, 1, true);
  run([&](Tape& t) { return das::sum(t, das::tanh_op(t, das::matmul(t, a, b))); },
      {{"a", a}, {"b", b}});

  auto c = das::uniform_leaf(rng, {5, 3}, -1, 1, true);
  auto d = das::uniform_leaf(rng, {2, 3}, -1, 1, true);
  run([&](Tape& t) { return das::sum(t, das::sigmoid(t, das::matmul_nt(t, c, d))); },
      {{"c", c}, {"d", d}});

  auto x = das::uniform_leaf(rng, {4, 3}, -1, 1, true);
  auto w = das::uniform_leaf(rng, {4}, -1, 1, true);
  run([&](Tape& t) { return das::sum(t, das::matvec_t(t, x, w)); }, {{"x", x}, {"w", w}});

  auto v1 = das::uniform_leaf(rng, {3}, -1, 1, true);
  auto v2 = das::uniform_leaf(rng, {2}, -1, 1, true);
  run([&](Tape& t) {
        auto cat = das::concat(t, {v1, v2});
        auto sl = das::slice(t, cat, 1, 4);
        return das::sum(t, das::mul(t, sl, sl));
      },
      {{"v1", v1}, {"v2", v2}});

  auto m = das::uniform_leaf(rng, {3, 2}, -1, 1, true);
  auto bias = das::uniform_leaf(rng, {2}, -1, 1, true);
  run([&](Tape& t) {
        auto r = das::add_rows(t, m, bias);
        return das::sum(t, das::mul(t, r, r));
      },
      {{"m", m}, {"bias", bias}});

  auto sm = das::uniform_leaf(rng, {6}, -2, 2, true);
  Mask mask = {1, 0, 1, 1, 0, 1};
  run([&](Tape& t) {
        auto s = das::softmax(t, sm, &mask);
        auto q = das::uniform_leaf; (void)q;
        return das::sum(t, das::mul(t, s, s));
      },
      {{"sm", sm}});

  auto ls = das::uniform_leaf(rng, {5}, -2, 2, true);
  run([&](Tape& t) {
        auto l = das::log_softmax(t, ls);
        return das::scale(t, das::slice(t, l, 2, 3), -1.0);
      },
      {{"ls", ls}});

  auto table = das::uniform_leaf(rng, {4, 3}, -1, 1, true);
  run([&](Tape& t) {
        auto e0 = das::embed(t, table, 2);
        auto e1 = das::embed(t, table, 2);  // repeated lookup accumulates
        return das::sum(t, das::mul(t, e0, e1));
      },
      {{"table", table}});

  auto bl = das::uniform_leaf(rng, {6}, -2, 2, true);
  std::vector<double> targets = {1, 0, 0, 1, 1, 0};
  run([&](Tape& t) { return das::bce_with_logits_mean(t, bl, targets); }, {{"bl", bl}});

  auto rr = das::uniform_leaf(rng, {3}, -1, 1, true);
  run([&](Tape& t) {
        auto rep = das::repeat_rows(t, rr, 4);
        return das::sum(t, das::mul(t, rep, rep));
      },
      {{"rr", rr}});

  auto st1 = das::uniform_leaf(rng, {3}, -1, 1, true);
  auto st2 = das::uniform_leaf(rng, {3}, -1, 1, true);
  run([&](Tape& t) {
        auto stk = das::stack_rows(t, {st1, st2});
        auto flat = das::reshape(t, stk, {6});
        return das::sum(t, das::mul(t, flat, flat));
      },
      {{"st1", st1}, {"st2", st2}});
}

TEST_CASE("determinism: identical seed gives bitwise-identical results") {
  auto run = [](std::uint64_t seed) {
    das::Rng rng(seed);
    Tape tape;
    auto a = das::uniform_leaf(rng, {6, 6}, -1, 1, true);
    auto b = das::uniform_leaf(rng, {6}, -1, 1, true);
    auto s = das::sum(tape, das::sigmoid(tape, das::matmul(tape, a, b)));
    auto drop = das::dropout(tape, s, 0.8, rng);
    tape.backward(drop);
    return std::make_pair(drop.scalar(), a.grad());
  };
  auto r1 = run(1234);
  auto r2 = run(1234);
  REQUIRE(r1.first == r2.first);
  REQUIRE(r1.second == r2.second);
}

TEST_CASE("dropout keep=1 is identity") {
  das::Rng rng(8);
  Tape tape;
  auto x = das::uniform_leaf(rng, {10}, -1, 1, false);
  auto y = das::dropout(tape, x, 1.0, rng);
  REQUIRE(y.value() == x.value());
}

TEST_CASE("embed rejects out-of-range ids") {
  Tape tape;
  auto table = das::zeros({4, 3});
  REQUIRE_THROWS_AS(das::embed(tape, table, 4), std::out_of_range);
  REQUIRE_THROWS_AS(das::embed(tape, table, -1), std::out_of_range);
}
