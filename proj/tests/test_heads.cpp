#include <doctest.h>

#include <cmath>

#include "imo/errors.hpp"
#include "imo/heads.hpp"
#include "support.hpp"

using namespace imo;

namespace {

std::vector<double> softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0;
  std::vector<double> out;
  for (double v : z) sum += std::exp(v - mx);
  for (double v : z) out.push_back(std::exp(v - mx) / sum);
  return out;
}

BinaryHead binary_head(Tensor p) {
  Rng rng(0);
  BinaryHead head(p.shape[0], p.shape[1], rng);
  head.projection.value = std::move(p);
  return head;
}

}  // namespace

TEST_CASE("binary head hand example") {
  BinaryHead head = binary_head(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  ad::Tape tape(false);
  HeadOutput out = binary_forward(tape, tape.constant(Tensor::matrix(2, 2, {2, 3, 1, 1})),
                                  tape.constant(Tensor::vector({1, 0})), head);
  REQUIRE(out.attention.size() == 1);
  CHECK(out.attention[0].value().data == std::vector<double>{2, 1});
  // v = [5, 7], P = I
  CHECK(out.logits.value().data == std::vector<double>{5, 7});
}

TEST_CASE("zero mask gives a uniform distribution") {
  BinaryHead head = binary_head(test::random_tensor({3, 2}, 4));
  ad::Tape tape(false);
  HeadOutput out = binary_forward(tape, tape.constant(Tensor::matrix(2, 3, {0, 0, 0, 0, 0, 0})),
                                  tape.constant(Tensor({3}, 0.0)), head);
  CHECK(ad::softmax(out.logits).value().data == std::vector<double>{0.5, 0.5});
}

TEST_CASE("binary head matches a straight-line oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t t = 5, d = 6;
    const Tensor e = test::random_tensor({t, d}, 100 + seed);
    const Tensor m = test::random_tensor({d}, 200 + seed);
    BinaryHead head = binary_head(test::random_tensor({d, 2}, 300 + seed));
    ad::Tape tape(false);
    HeadOutput out = binary_forward(tape, tape.constant(e), tape.constant(m), head);

    std::vector<double> a(t, 0.0), v(d, 0.0), z(2, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t k = 0; k < d; ++k) a[i] += m.data[k] * e(i, k);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t k = 0; k < d; ++k) v[k] += a[i] * e(i, k);
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t y = 0; y < 2; ++y) z[y] += v[k] * head.projection.value(k, y);
    const auto want = softmax(z);
    const auto got = ad::softmax(out.logits).value().data;
    for (std::size_t i = 0; i < t; ++i)
      CHECK(std::fabs(out.attention[0].value().data[i] - a[i]) <= 1e-12);
    for (std::size_t y = 0; y < 2; ++y) CHECK(std::fabs(got[y] - want[y]) <= 1e-12);
  }
}

TEST_CASE("positive scaling of the query") {
  const Tensor e = test::random_tensor({4, 3}, 7);
  const Tensor m = test::random_tensor({3}, 8);
  BinaryHead head = binary_head(test::random_tensor({3, 2}, 9));
  for (double lambda : {0.5, 2.0, 7.0}) {
    Tensor ms = m;
    for (double& x : ms.data) x *= lambda;
    ad::Tape tape(false);
    HeadOutput base = binary_forward(tape, tape.constant(e), tape.constant(m), head);
    HeadOutput scaled = binary_forward(tape, tape.constant(e), tape.constant(ms), head);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(scaled.attention[0].value().data[i] ==
            doctest::Approx(lambda * base.attention[0].value().data[i]).epsilon(1e-12));
    }
    // v and vP scale by lambda, so the argmax is unchanged.
    for (std::size_t y = 0; y < 2; ++y) {
      CHECK(scaled.logits.value().data[y] ==
            doctest::Approx(lambda * base.logits.value().data[y]).epsilon(1e-12));
    }
    const auto& bl = base.logits.value().data;
    const auto& sl = scaled.logits.value().data;
    CHECK((bl[0] > bl[1]) == (sl[0] > sl[1]));
  }
}

TEST_CASE("mean pooling and normalized attention") {
  BinaryHead head = binary_head(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  ad::Tape tape(false);
  ad::Var e = tape.constant(Tensor::matrix(2, 2, {2, 3, 1, 1}));
  ad::Var m = tape.constant(Tensor::vector({1, 0}));
  HeadOptions mean;
  mean.pooling = Pooling::Mean;
  HeadOutput out = binary_forward(tape, e, m, head, mean);
  CHECK(out.attention.empty());
  CHECK(out.logits.value().data == std::vector<double>{1.5, 2.0});

  HeadOptions norm;
  norm.normalize_attention = true;
  HeadOutput n = binary_forward(tape, e, m, head, norm);
  const auto a = softmax({2, 1});
  CHECK(n.attention[0].value().data[0] == doctest::Approx(a[0]).epsilon(1e-12));
  CHECK(n.logits.value().data[0] == doctest::Approx(2 * a[0] + a[1]).epsilon(1e-12));
}

TEST_CASE("binary head errors") {
  BinaryHead head = binary_head(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  ad::Tape tape(false);
  CHECK_THROWS_AS(binary_forward(tape, tape.constant(Tensor({0, 2})), tape.constant(Tensor({2}, 1.0)), head),
                  InputError);
  CHECK_THROWS_AS(binary_forward(tape, tape.constant(Tensor({1, 3})), tape.constant(Tensor({2}, 1.0)), head),
                  ContractError);
  CHECK_THROWS_AS(binary_forward(tape, tape.constant(Tensor({1, 2})), tape.constant(Tensor({3}, 1.0)), head),
                  ContractError);
}

TEST_CASE("multi-class hand example") {
  Rng rng(0);
  MultiClassHead head(2, 2, rng);
  head.projections[0].value = Tensor::vector({1, 1});
  head.projections[1].value = Tensor::vector({2, -1});
  ad::Tape tape(false);
  HeadOutput out = multiclass_forward(tape, tape.constant(Tensor::matrix(2, 2, {1, 2, 3, -1})),
                                      {tape.constant(Tensor::vector({1, 0})),
                                       tape.constant(Tensor::vector({0, 1}))},
                                      head);
  // y=0: e = [[1,0],[3,0]], a = [1,3], v = [10,0], c = 10
  // y=1: e = [[0,2],[0,-1]], a = [2,-1], v = [0,5], c = -5
  CHECK(out.logits.value().data == std::vector<double>{10, -5});
  REQUIRE(out.attention.size() == 2);
  CHECK(out.attention[0].value().data == std::vector<double>{1, 3});
  CHECK(out.attention[1].value().data == std::vector<double>{2, -1});
  const auto p = ad::softmax(out.logits).value().data;
  CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-15.0))).epsilon(1e-12));

  HeadOptions shared;
  shared.shared_embeddings = true;
  HeadOutput s = multiclass_forward(tape, tape.constant(Tensor::matrix(2, 2, {1, 2, 3, -1})),
                                    {tape.constant(Tensor::vector({1, 0})),
                                     tape.constant(Tensor::vector({0, 1}))},
                                    head, shared);
  // y=0: v = 1*[1,2] + 3*[3,-1] = [10,-1], c = 9; y=1: v = 2*[1,2] - [3,-1] = [-1,5], c = -7
  CHECK(s.logits.value().data == std::vector<double>{9, -7});
}

TEST_CASE("multi-class symmetric and degenerate cases") {
  Rng rng(0);
  MultiClassHead head(3, 4, rng);
  for (auto& p : head.projections) p.value = Tensor::vector({0.3, -0.1, 0.2});
  ad::Tape tape(false);
  ad::Var h = tape.constant(test::random_tensor({5, 3}, 1));
  std::vector<ad::Var> same(4, tape.constant(Tensor::vector({0.5, 1.0, -0.7})));
  const auto p = ad::softmax(multiclass_forward(tape, h, same, head).logits).value().data;
  for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  std::vector<ad::Var> masks{tape.constant(test::random_tensor({3}, 2)), tape.constant(Tensor({3}, 0.0)),
                             tape.constant(test::random_tensor({3}, 3)), tape.constant(test::random_tensor({3}, 4))};
  const auto logits = multiclass_forward(tape, h, masks, head).logits.value().data;
  CHECK(logits[1] == 0.0);
  double sum = 0;
  for (double v : ad::softmax(tape.constant(Tensor::vector(logits))).value().data) {
    CHECK(v >= 0.0);
    sum += v;
  }
  CHECK(std::fabs(sum - 1.0) < 1e-6);

  CHECK_THROWS_AS(multiclass_forward(tape, h, {masks[0]}, head), ContractError);
}

TEST_CASE("distance loss") {
  ad::Tape tape(false);
  auto v = [&](std::vector<double> x) { return tape.constant(Tensor::vector(std::move(x))); };
  CHECK(distance_loss(tape, {v({1, 2}), v({1, 2})}).value().item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(distance_loss(tape, {v({1, 0}), v({0, 3})}).value().item() == 0.0);
  CHECK(std::fabs(distance_loss(tape, {v({1, 0, 0}), v({1, 0, 0}), v({0, 1, 0})}).value().item() - 1.0 / 3.0) <=
        1e-12);
  CHECK(distance_loss(tape, {v({1, 0}), v({0, 0})}).value().item() == 0.0);
}

TEST_CASE("distance loss is permutation symmetric and bounded") {
  ad::Tape tape(false);
  std::vector<ad::Var> masks;
  for (std::uint64_t s = 0; s < 4; ++s) masks.push_back(tape.constant(test::random_tensor({5}, 40 + s)));
  const double base = distance_loss(tape, masks).value().item();
  CHECK(base >= -1.0);
  CHECK(base <= 1.0);
  std::vector<ad::Var> perm{masks[2], masks[0], masks[3], masks[1]};
  CHECK(distance_loss(tape, perm).value().item() == doctest::Approx(base).epsilon(1e-14));
  std::vector<ad::Var> neg{tape.constant(Tensor::vector({1, 0})), tape.constant(Tensor::vector({-1, 0}))};
  CHECK(distance_loss(tape, neg).value().item() == -1.0);
}

TEST_CASE("cross entropy") {
  ad::Tape tape(false);
  ad::Var logits = tape.constant(Tensor::vector({0, 0}));
  CHECK(cross_entropy(tape, logits, 1).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(cross_entropy(tape, logits, 2), InputError);
}
