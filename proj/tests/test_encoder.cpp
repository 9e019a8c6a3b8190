#include <doctest.h>

#include <cmath>

#include "imo/encoder.hpp"
#include "imo/errors.hpp"

using namespace imo;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.shape[0], std::vector<double>(t.shape[1]));
  for (std::size_t r = 0; r < t.shape[0]; ++r)
    for (std::size_t c = 0; c < t.shape[1]; ++c) m[r][c] = t(r, c);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

void add_row(Mat& a, const std::vector<double>& b) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
}

Mat layernorm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v;
    mu /= static_cast<double>(x[i].size());
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j)
      out[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return out;
}

/// One pre-LN layer written out loop by loop, single head.
Mat oracle_layer(const TransformerLayer& p, const Mat& x) {
  const std::size_t t = x.size(), d = x[0].size();
  Mat y = layernorm(x, p.ln1_gain.value.data, p.ln1_bias.value.data);
  Mat q = mm(y, to_mat(p.wq.value));
  add_row(q, p.bq.value.data);
  Mat k = mm(y, to_mat(p.wk.value));
  add_row(k, p.bk.value.data);
  Mat v = mm(y, to_mat(p.wv.value));
  add_row(v, p.bv.value.data);
  Mat attn(t, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> s(t);
    double mx = -1e300;
    for (std::size_t j = 0; j < t; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i][c] * k[j][c];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t c = 0; c < d; ++c) attn[i][c] += s[j] / z * v[j][c];
  }
  Mat o = mm(attn, to_mat(p.wo.value));
  add_row(o, p.bo.value.data);
  Mat x1 = x;
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t c = 0; c < d; ++c) x1[i][c] += o[i][c];
  Mat h = mm(layernorm(x1, p.ln2_gain.value.data, p.ln2_bias.value.data), to_mat(p.w1.value));
  add_row(h, p.b1.value.data);
  for (auto& row : h)
    for (double& e : row) e = std::max(e, 0.0);
  Mat f = mm(h, to_mat(p.w2.value));
  add_row(f, p.b2.value.data);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t c = 0; c < d; ++c) x1[i][c] += f[i][c];
  return x1;
}

EncoderConfig small(std::uint64_t seed) {
  EncoderConfig c;
  c.vocab_size = 10;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = 6;
  c.seed = seed;
  return c;
}

std::vector<Tensor> run(Encoder& enc, const std::vector<int>& tokens,
                        const std::vector<std::optional<Tensor>>& masks = {}) {
  ad::Tape tape(false);
  std::vector<std::optional<ad::Var>> vars;
  for (const auto& m : masks) {
    if (m) vars.emplace_back(tape.constant(*m));
    else vars.emplace_back(std::nullopt);
  }
  EncodeTrace trace = enc.encode(tape, tokens, vars);
  std::vector<Tensor> out;
  for (const auto& h : trace.masked) out.push_back(h.value());
  return out;
}

}  // namespace

TEST_CASE("hand-stepped oracle, seed 7, one layer, four dims") {
  EncoderConfig c;
  c.vocab_size = 5;
  c.d_model = 4;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_ff = 8;
  c.max_len = 4;
  c.seed = 7;
  Encoder enc(c);
  // Raise the weights so the comparison is not dominated by the residual path.
  for (Parameter* p : enc.parameters()) {
    if (p->name.find("ln") == std::string::npos)
      for (double& v : p->value.data) v *= 40.0;
  }
  const std::vector<int> tokens{2, 3};
  Mat x(2, std::vector<double>(4));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      x[i][j] = enc.token_embedding.value(tokens[i], j) + enc.position_embedding.value(i, j);
  const Mat want = oracle_layer(enc.layers[0], x);
  const Tensor got = run(enc, tokens).back();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(got(i, j) == doctest::Approx(want[i][j]).epsilon(1e-12));
}

TEST_CASE("initialization is reproducible") {
  Encoder a(small(3)), b(small(3)), c(small(4));
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value.data == pb[i]->value.data);
    any_diff = any_diff || pa[i]->value.data != pc[i]->value.data;
  }
  CHECK(any_diff);
}

TEST_CASE("initial statistics") {
  EncoderConfig c = small(1);
  c.d_model = 32;
  c.vocab_size = 400;
  Encoder enc(c);
  double sum = 0, sq = 0;
  for (double v : enc.token_embedding.value.data) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(enc.token_embedding.value.size());
  CHECK(std::sqrt(sq / n - (sum / n) * (sum / n)) == doctest::Approx(0.02).epsilon(0.05));
  for (double v : enc.layers[0].ln1_gain.value.data) CHECK(v == 1.0);
  for (double v : enc.layers[0].ln1_bias.value.data) CHECK(v == 0.0);
}

TEST_CASE("parameter count is a function of the config") {
  Encoder a(small(1)), b(small(99));
  auto count = [](const Encoder& e) {
    std::size_t n = 0;
    for (const Parameter* p : e.parameters()) n += p->value.size();
    return n;
  };
  CHECK(count(a) == count(b));
  // embeddings + per layer (4 attn d*d + 4 d biases + 2 LN pairs + ffn)
  const std::size_t d = 8, f = 16;
  const std::size_t per_layer = 4 * d * d + 4 * d + 4 * d + d * f + f + f * d + d;
  CHECK(count(a) == 10 * d + 6 * d + 2 * per_layer);
}

TEST_CASE("config validation") {
  EncoderConfig c = small(0);
  c.n_heads = 3;
  try {
    Encoder e(c);
    FAIL("expected config error");
  } catch (const ConfigError& e) {
    CHECK(e.field == "encoder.n_heads");
  }
  c = small(0);
  c.max_len = 0;
  CHECK_THROWS_AS(Encoder{c}, ConfigError);
}

TEST_CASE("token errors") {
  Encoder enc(small(0));
  ad::Tape tape(false);
  CHECK_THROWS_AS(enc.encode(tape, {}, {}), InputError);
  CHECK_THROWS_AS(enc.encode(tape, {1, 10}, {}), InputError);
  CHECK_THROWS_AS(enc.encode(tape, {1, 1, 1, 1, 1, 1, 1}, {}), InputError);
}

TEST_CASE("all-ones masks leave the pass unchanged") {
  Encoder enc(small(5));
  const std::vector<int> tokens{1, 4, 2};
  const auto plain = run(enc, tokens);
  const auto masked = run(enc, tokens, {Tensor({8}, 1.0), Tensor({8}, 1.0)});
  for (std::size_t l = 0; l < 2; ++l) CHECK(plain[l].data == masked[l].data);
}

TEST_CASE("masked states feed the next layer") {
  Encoder enc(small(5));
  const std::vector<int> tokens{1, 4, 2};
  Tensor m({8}, 1.0);
  m.data[0] = 0.0;
  const auto plain = run(enc, tokens);
  const auto masked = run(enc, tokens, {m, std::nullopt});
  for (std::size_t i = 0; i < 3; ++i) CHECK(masked[0](i, 0) == 0.0);
  CHECK(masked[1].data != plain[1].data);

  ad::Tape tape(false);
  std::vector<std::optional<ad::Var>> masks{tape.constant(m)};
  EncodeTrace raw = enc.encode(tape, tokens, masks, false);
  CHECK(raw.hidden[1].value().data == plain[1].data);
}

TEST_CASE("mask width mismatch") {
  Encoder enc(small(5));
  CHECK_THROWS_AS(run(enc, {1}, {Tensor({7}, 1.0)}), ContractError);
}

TEST_CASE("without positions, pooled states are order invariant") {
  Encoder enc(small(11));
  enc.position_embedding.value.fill(0.0);
  const auto a = run(enc, {1, 2, 3, 4}).back();
  const auto b = run(enc, {4, 2, 1, 3}).back();
  for (std::size_t c = 0; c < 8; ++c) {
    double sa = 0, sb = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      sa += a(i, c);
      sb += b(i, c);
    }
    CHECK(sa == doctest::Approx(sb).epsilon(1e-12));
  }
}

TEST_CASE("encode is pure") {
  Encoder enc(small(2));
  CHECK(run(enc, {3, 1}).back().data == run(enc, {3, 1}).back().data);
}
