#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "somno/autodiff.hpp"

using namespace somno;
using D = double;
using VarD = ad::Var<D>;
using TapeD = ad::Tape<D>;

namespace {

Tensor<D> random_tensor(Shape s, Rng& rng, double scale = 0.5) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

std::shared_ptr<Tensor<D>> random_weights(const Shape& s, Rng& rng) {
  return std::make_shared<Tensor<D>>(random_tensor(s, rng, 1.0));
}

// Central finite differences against reverse-mode for every parameter entry.
void check_gradients(std::vector<Tensor<D>*> params,
                     const std::function<VarD(TapeD&, const std::vector<VarD>&)>& build,
                     double h = 1e-4, double tol = 1e-6) {
  TapeD tape;
  std::vector<VarD> leaves;
  leaves.reserve(params.size());
  for (auto* p : params) leaves.push_back(tape.leaf(*p, true));
  auto loss = build(tape, leaves);
  REQUIRE(tape.val(loss.id).numel() == 1);
  tape.backward(loss);
  std::vector<Tensor<D>> analytic;
  analytic.reserve(leaves.size());
  for (auto& lv : leaves) analytic.push_back(tape.grad(lv.id));

  auto eval = [&]() {
    TapeD tp;
    std::vector<VarD> ls;
    ls.reserve(params.size());
    for (auto* p : params) ls.push_back(tp.leaf(*p, false));
    auto l = build(tp, ls);
    return tp.val(l.id).data[0];
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi]->numel(); ++i) {
      D& v = params[pi]->data[i];
      const D orig = v;
      v = orig + h;
      const D lp = eval();
      v = orig - h;
      const D lm = eval();
      v = orig;
      const D fd = (lp - lm) / (2 * h);
      const D an = analytic[pi].data[i];
      const D rel = std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)});
      INFO("param " << pi << " index " << i << " analytic " << an << " fd " << fd);
      REQUIRE(rel < tol);
    }
  }
}

}  // namespace

TEST_CASE("gradients: linear layer") {
  Rng rng(101);
  auto x = random_tensor({3, 5}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto b = random_tensor({4}, rng);
  auto wsum = random_weights({3, 4}, rng);
  check_gradients({&x, &w, &b}, [&](TapeD& t, const std::vector<VarD>& v) {
    return ad::weighted_sum(ad::linear(v[0], v[1], v[2]), wsum);
  });
}

TEST_CASE("gradient of summed outputs w.r.t. linear input equals weight column sums") {
  // oracle: d/dx_j sum_o (W x)_o = sum_o W[o][j]
  Rng rng(7);
  auto x = random_tensor({1, 6}, rng);
  auto w = random_tensor({3, 6}, rng);
  Tensor<D> b({3});
  TapeD tape;
  auto xv = tape.leaf(x, true);
  auto wv = tape.leaf(w, false);
  auto bv = tape.leaf(b, false);
  auto y = ad::linear(xv, wv, bv);
  auto ones = std::make_shared<Tensor<D>>(Shape{1, 3});
  for (auto& v : ones->data) v = 1.0;
  auto loss = ad::weighted_sum(y, ones);
  tape.backward(loss);
  for (std::size_t j = 0; j < 6; ++j) {
    D expect = 0.0;
    for (std::size_t o = 0; o < 3; ++o) expect += w.data[o * 6 + j];
    CHECK(tape.grad(xv.id).data[j] == Catch::Approx(expect).margin(1e-12));
  }
}

TEST_CASE("gradients: conv1d stride and padding variants") {
  Rng rng(202);
  for (auto [stride, pad] : std::vector<std::pair<int, int>>{{1, 1}, {2, 3}}) {
    auto x = random_tensor({2, 3, 12}, rng);
    auto w = random_tensor({4, 3, 5}, rng);
    auto b = random_tensor({4}, rng);
    const std::size_t lout = (12 + 2 * pad - 5) / stride + 1;
    auto wsum = random_weights({2, 4, lout}, rng);
    check_gradients({&x, &w, &b}, [&, stride, pad](TapeD& t, const std::vector<VarD>& v) {
      return ad::weighted_sum(ad::conv1d(v[0], v[1], v[2], stride, pad), wsum);
    });
  }
}

TEST_CASE("gradients: batchnorm in train and eval mode") {
  Rng rng(303);
  for (bool train : {true, false}) {
    auto x = random_tensor({4, 3, 6}, rng);
    auto gamma = random_tensor({3}, rng, 0.3);
    for (auto& v : gamma.data) v += 1.0;
    auto beta = random_tensor({3}, rng);
    auto run_mean = std::make_shared<Tensor<D>>(Shape{3});
    auto run_var = std::make_shared<Tensor<D>>(Shape{3});
    for (auto& v : run_var->data) v = 1.0 + 0.2 * rng.uniform();
    for (auto& v : run_mean->data) v = 0.1 * rng.normal();
    auto wsum = random_weights({4, 3, 6}, rng);
    check_gradients({&x, &gamma, &beta}, [&, train](TapeD& t, const std::vector<VarD>& v) {
      // fresh copies each evaluation so train-mode running updates cannot leak
      auto rm = *run_mean;
      auto rv = *run_var;
      return ad::weighted_sum(ad::batchnorm(v[0], v[1], v[2], &rm, &rv, train), wsum);
    });
  }
}

TEST_CASE("gradients: layernorm") {
  Rng rng(404);
  auto x = random_tensor({5, 8}, rng);
  auto g = random_tensor({8}, rng, 0.3);
  for (auto& v : g.data) v += 1.0;
  auto b = random_tensor({8}, rng);
  auto wsum = random_weights({5, 8}, rng);
  check_gradients({&x, &g, &b}, [&](TapeD& t, const std::vector<VarD>& v) {
    return ad::weighted_sum(ad::layernorm(v[0], v[1], v[2]), wsum);
  });
}

TEST_CASE("gradients: softmax rows") {
  Rng rng(505);
  auto x = random_tensor({4, 6}, rng, 1.0);
  auto wsum = random_weights({4, 6}, rng);
  check_gradients({&x}, [&](TapeD& t, const std::vector<VarD>& v) {
    return ad::weighted_sum(ad::softmax_rows(v[0]), wsum);
  });
}

TEST_CASE("gradients: softmax + cross entropy") {
  Rng rng(606);
  auto logits = random_tensor({6, 4}, rng, 1.0);
  std::vector<int> labels = {0, 2, 1, 3, 2, 0};
  std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1};
  check_gradients({&logits}, [&](TapeD& t, const std::vector<VarD>& v) {
    return ad::cross_entropy_logits(v[0], labels, mask);
  });
}

TEST_CASE("gradients: batched matmul both transpose modes") {
  Rng rng(707);
  for (bool tb : {false, true}) {
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = tb ? random_tensor({2, 5, 4}, rng) : random_tensor({2, 4, 5}, rng);
    auto wsum = random_weights({2, 3, 5}, rng);
    check_gradients({&a, &b}, [&, tb](TapeD& t, const std::vector<VarD>& v) {
      return ad::weighted_sum(ad::bmm(v[0], v[1], tb), wsum);
    });
  }
}

TEST_CASE("gradients: full attention block") {
  Rng rng(808);
  const std::size_t B = 2, N = 3, H = 2, dk = 2, Dm = H * dk;
  auto x = random_tensor({B * N, Dm}, rng);
  auto wq = random_tensor({Dm, Dm}, rng);
  auto wk = random_tensor({Dm, Dm}, rng);
  auto wv = random_tensor({Dm, Dm}, rng);
  auto wo = random_tensor({Dm, Dm}, rng);
  auto bq = random_tensor({Dm}, rng);
  auto bk = random_tensor({Dm}, rng);
  auto bv = random_tensor({Dm}, rng);
  auto bo = random_tensor({Dm}, rng);
  auto wsum = random_weights({B * N, Dm}, rng);
  check_gradients(
      {&x, &wq, &wk, &wv, &wo, &bq, &bk, &bv, &bo},
      [&](TapeD& t, const std::vector<VarD>& v) {
        auto q = ad::split_heads(ad::linear(v[0], v[1], v[5]), B, N, H, dk);
        auto k = ad::split_heads(ad::linear(v[0], v[2], v[6]), B, N, H, dk);
        auto val = ad::split_heads(ad::linear(v[0], v[3], v[7]), B, N, H, dk);
        auto scores = ad::scale(ad::bmm(q, k, true), D(1) / std::sqrt(D(dk)));
        auto probs = ad::softmax_rows(scores);
        auto ctx = ad::merge_heads(ad::bmm(probs, val, false), B, N, H, dk);
        auto out = ad::linear(ctx, v[4], v[8]);
        return ad::weighted_sum(out, wsum);
      });
}

TEST_CASE("gradients: MLP with relu") {
  Rng rng(909);
  auto x = random_tensor({4, 6}, rng);
  auto w1 = random_tensor({10, 6}, rng);
  auto b1 = random_tensor({10}, rng);
  auto w2 = random_tensor({6, 10}, rng);
  auto b2 = random_tensor({6}, rng);
  auto wsum = random_weights({4, 6}, rng);
  check_gradients({&x, &w1, &b1, &w2, &b2}, [&](TapeD& t, const std::vector<VarD>& v) {
    auto h = ad::relu(ad::linear(v[0], v[1], v[2]));
    return ad::weighted_sum(ad::linear(h, v[3], v[4]), wsum);
  });
}

TEST_CASE("gradients: gap, reshape, concat, add, scale, add_rowvec") {
  Rng rng(111);
  auto x = random_tensor({2, 3, 5}, rng);
  auto y = random_tensor({2, 3}, rng);
  auto v2 = random_tensor({3}, rng);
  auto wsum = random_weights({2, 6}, rng);
  check_gradients({&x, &y, &v2}, [&](TapeD& t, const std::vector<VarD>& v) {
    auto pooled = ad::global_avg_pool(v[0]);              // [2,3]
    auto summed = ad::add(pooled, v[1]);                  // [2,3]
    auto biased = ad::add_rowvec(summed, v[2]);           // [2,3]
    auto two = ad::scale(biased, D(2));
    auto cat = ad::concat_cols(two, summed);              // [2,6]
    return ad::weighted_sum(ad::reshape(cat, {2, 6}), wsum);
  });
}

TEST_CASE("gradients: dropout with a fixed mask") {
  Rng rng(222);
  auto x = random_tensor({4, 5}, rng);
  auto wsum = random_weights({4, 5}, rng);
  check_gradients({&x}, [&](TapeD& t, const std::vector<VarD>& v) {
    Rng drop(42);  // same mask for every evaluation
    return ad::weighted_sum(ad::dropout(v[0], D(0.3), drop, true), wsum);
  });
}

TEST_CASE("gradients: split/merge heads round trip") {
  Rng rng(333);
  auto x = random_tensor({6, 4}, rng);  // B=2 N=3 H=2 dk=2
  auto wsum = random_weights({6, 4}, rng);
  check_gradients({&x}, [&](TapeD& t, const std::vector<VarD>& v) {
    auto s = ad::split_heads(v[0], 2, 3, 2, 2);
    return ad::weighted_sum(ad::merge_heads(s, 2, 3, 2, 2), wsum);
  });
}

TEST_CASE("unused parameter gets zero gradient, not an error") {
  Rng rng(444);
  auto x = random_tensor({2, 3}, rng);
  auto orphan = random_tensor({4}, rng);
  TapeD tape;
  auto xv = tape.leaf(x, true);
  auto ov = tape.leaf(orphan, true);
  auto wsum = random_weights({2, 3}, rng);
  auto loss = ad::weighted_sum(ad::scale(xv, D(3)), wsum);
  tape.backward(loss);
  for (auto v : tape.grad(ov.id).data) CHECK(v == 0.0);
}

TEST_CASE("cross entropy values match hand arithmetic") {
  // uniform logits, C=4 -> ln 4; and a 0.7/0.1 pair
  TapeD tape;
  Tensor<D> logits({2, 4});
  auto lv = tape.leaf(logits, false);
  auto loss = ad::cross_entropy_logits(lv, {1, 2}, {1, 1});
  CHECK(tape.val(loss.id).data[0] == Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("batchnorm eval mode uses and preserves running stats") {
  TapeD tape;
  Tensor<D> x({1, 2, 3});
  for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] = static_cast<D>(i);
  Tensor<D> gamma({2}), beta({2});
  gamma.data = {1.0, 2.0};
  Tensor<D> rm({2}), rv({2});
  rm.data = {1.0, 4.0};
  rv.data = {4.0, 1.0};
  auto xv = tape.leaf(x, false);
  auto gv = tape.leaf(gamma, false);
  auto bv = tape.leaf(beta, false);
  auto y = ad::batchnorm(xv, gv, bv, &rm, &rv, false);
  // channel 0: (x - 1)/sqrt(4 + eps); channel 1: 2*(x - 4)/sqrt(1 + eps)
  CHECK(tape.val(y.id).data[0] == Catch::Approx((0.0 - 1.0) / std::sqrt(4.0 + 1e-5)).margin(1e-9));
  CHECK(tape.val(y.id).data[4] == Catch::Approx(2.0 * (4.0 - 4.0) / std::sqrt(1.0 + 1e-5)).margin(1e-9));
  CHECK(rm.data[0] == 1.0);  // eval leaves running stats untouched
  CHECK(rv.data[1] == 1.0);
}
