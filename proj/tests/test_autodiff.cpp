#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "skurg/gradcheck.hpp"
#include "skurg/nn.hpp"
#include "skurg/param_store.hpp"
#include "skurg/tensor.hpp"
#include "support/naive_ref.hpp"

using namespace skurg;

namespace {

Tensor64 rand_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> vals(std::size_t(s.numel()));
  for (auto& v : vals) v = dist(rng);
  return Tensor64::from(s, std::move(vals));
}

naive::Mat to_mat(const Tensor64& t) {
  naive::Mat m = naive::zeros(std::size_t(t.rows()), std::size_t(t.cols()));
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) m[std::size_t(i)][std::size_t(j)] = t.at(i, j);
  return m;
}

}  // namespace

TEST_CASE("sigmoid midpoint") {
  auto x = Tensor64::scalar(0.0);
  auto y = apply_primitive(OpTag::Sigmoid, std::vector<Tensor64>{x});
  CHECK(y.item() == doctest::Approx(0.5).epsilon(0));
}

TEST_CASE("softmax of equal logits is uniform") {
  auto x = Tensor64::from({1, 2}, {3.7, 3.7});
  auto y = apply_primitive(OpTag::Softmax, std::vector<Tensor64>{x});
  CHECK(y.at(0, 0) == doctest::Approx(0.5));
  CHECK(y.at(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("matmul matches triple-loop oracle") {
  auto a = Tensor64::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor64::from({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = apply_primitive(OpTag::Matmul, std::vector<Tensor64>{a, b});
  auto expect = naive::matmul(to_mat(a), to_mat(b));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(c.at(i, j) == doctest::Approx(expect[std::size_t(i)][std::size_t(j)]).epsilon(0));
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = rand_tensor({4, 6}, rng, 8.0);
    auto y = softmax_rows(x);
    for (int i = 0; i < y.rows(); ++i) {
      double sum = 0;
      for (int j = 0; j < y.cols(); ++j) sum += y.at(i, j);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("backward: product rule") {
  auto x = Tensor64::scalar(3.0);
  x.set_requires_grad(true);
  auto y = Tensor64::scalar(5.0);
  y.set_requires_grad(true);
  auto z = mul(x, y);
  backward(z);
  CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(0));
  CHECK(y.grad()[0] == doctest::Approx(3.0).epsilon(0));
}

TEST_CASE("backward: sigmoid derivative at zero") {
  auto x = Tensor64::scalar(0.0);
  x.set_requires_grad(true);
  auto y = sigmoid(x);
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("backward: duplicated use accumulates") {
  auto x = Tensor64::scalar(2.0);
  x.set_requires_grad(true);
  auto y = mul(x, x);
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(4.0).epsilon(0));
}

TEST_CASE("backward rejects non-scalar roots") {
  auto x = Tensor64::from({1, 2}, {1.0, 2.0}, true);
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), GraphError);
}

TEST_CASE("shape mismatch names the op and shapes") {
  auto a = Tensor64::zeros({2, 3});
  auto b = Tensor64::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x2") != std::string::npos);
  }
}

TEST_CASE("apply_primitive purity: identical inputs give bit-identical outputs") {
  std::mt19937_64 rng(11);
  auto a = rand_tensor({3, 5}, rng);
  auto b = rand_tensor({5, 4}, rng);
  auto c1 = apply_primitive(OpTag::Matmul, std::vector<Tensor64>{a, b});
  auto c2 = apply_primitive(OpTag::Matmul, std::vector<Tensor64>{a, b});
  for (std::size_t i = 0; i < c1.values().size(); ++i) CHECK(c1.values()[i] == c2.values()[i]);
  auto s1 = apply_primitive(OpTag::Softmax, std::vector<Tensor64>{a});
  auto s2 = apply_primitive(OpTag::Softmax, std::vector<Tensor64>{a});
  for (std::size_t i = 0; i < s1.values().size(); ++i) CHECK(s1.values()[i] == s2.values()[i]);
}

TEST_CASE("finite differences: quadratic and constant") {
  ParamStore64 params;
  auto& x = params.create("x", {1, 1});
  x.values_mut()[0] = 3.0;
  auto quad = finite_diff_grad<double>([&] { return x.values()[0] * x.values()[0]; }, params, 1e-4);
  CHECK(quad.at("x")[0] == doctest::Approx(6.0).epsilon(1e-6));
  auto constant = finite_diff_grad<double>([&] { return 42.0; }, params, 1e-4);
  CHECK(constant.at("x")[0] == doctest::Approx(0.0).epsilon(0));
  CHECK_THROWS_AS(
      finite_diff_grad<double>([&] { return std::numeric_limits<double>::quiet_NaN(); }, params,
                               1e-4),
      GraphError);
}

TEST_CASE("random 3-layer composite gradients match finite differences") {
  std::mt19937_64 seed_rng(23);
  NormalSampler init(23);
  ParamStore64 params;
  auto& w1 = params.create_normal("w1", {4, 6}, init, 0.4);
  auto& b1 = params.create_normal("b1", {1, 6}, init, 0.2);
  auto& w2 = params.create_normal("w2", {6, 5}, init, 0.4);
  auto& b2 = params.create_normal("b2", {1, 5}, init, 0.2);
  auto& w3 = params.create_normal("w3", {5, 3}, init, 0.4);
  auto x = rand_tensor({3, 4}, seed_rng);

  auto forward = [&]() -> Tensor64 {
    auto h1 = tanh_op(add_rowvec(matmul(x, w1), b1));
    auto h2 = gelu(add_rowvec(matmul(h1, w2), b2));
    auto h3 = softmax_rows(matmul(h2, w3));
    auto picked = slice_cols(h3, 0, 1);
    auto ln = layer_norm_rows(h2, 1e-5);
    return add(mean_all(log_op(picked)), scale(sum_all(mul(ln, ln)), 0.01));
  };

  auto loss = forward();
  auto analytic = gradients_of(loss, params);
  auto numeric = finite_diff_grad<double>([&] { return forward().item(); }, params, 1e-5);
  auto report = compare_gradients(analytic, numeric, 1e-3);
  CAPTURE(report.worst.param);
  CAPTURE(report.max_rel_error);
  CHECK(report.passed());
  CHECK(report.checked > 0);
}

TEST_CASE("cross entropy: uniform logits, limits, finite differences") {
  auto logits = Tensor64::zeros({1, 4});
  auto loss = cross_entropy_rows(logits, {0}, Reduction::Mean);
  CHECK(loss.item() == doctest::Approx(std::log(4.0)));

  // target logit dominating drives the loss to zero
  auto peaked = Tensor64::from({1, 3}, {40.0, 0.0, 0.0});
  CHECK(cross_entropy_rows(peaked, {0}, Reduction::Mean).item() == doctest::Approx(0.0).epsilon(1e-9));

  // excluded rows contribute nothing
  auto two = Tensor64::from({2, 3}, {1.0, 2.0, 3.0, 9.0, 9.0, 9.0});
  auto only_first = cross_entropy_rows(two, {1, -1}, Reduction::Mean);
  auto first_row = slice_rows(two, 0, 1);
  CHECK(only_first.item() == doctest::Approx(cross_entropy_rows(first_row, {1}, Reduction::Mean).item()));

  ParamStore64 params;
  NormalSampler init(5);
  auto& l = params.create_normal("l", {3, 5}, init, 1.0);
  auto forward = [&] { return cross_entropy_rows(l, {2, -1, 0}, Reduction::Mean); };
  auto analytic = gradients_of(forward(), params);
  auto numeric = finite_diff_grad<double>([&] { return forward().item(); }, params, 1e-5);
  CHECK(compare_gradients(analytic, numeric, 1e-4).passed());
}

TEST_CASE("bce with logits: value and gradient") {
  auto z = Tensor64::zeros({2, 1});
  auto loss = bce_with_logits_mean(z, std::vector<double>{1.0, 0.0});
  CHECK(loss.item() == doctest::Approx(std::log(2.0)));

  ParamStore64 params;
  NormalSampler init(9);
  auto& l = params.create_normal("z", {4, 1}, init, 2.0);
  std::vector<double> labels{1.0, 0.0, 1.0, 0.0};
  auto forward = [&] { return bce_with_logits_mean(l, labels); };
  auto analytic = gradients_of(forward(), params);
  auto numeric = finite_diff_grad<double>([&] { return forward().item(); }, params, 1e-5);
  CHECK(compare_gradients(analytic, numeric, 1e-4).passed());
}

TEST_CASE("embedding lookup gathers rows and accumulates repeated ids") {
  auto table = Tensor64::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  auto out = embedding_lookup(table, {2, 0, 2});
  CHECK(out.at(0, 0) == 5);
  CHECK(out.at(2, 1) == 6);
  backward(sum_all(out));
  CHECK(table.grad()[0] == doctest::Approx(1.0));  // row 0 used once
  CHECK(table.grad()[4] == doctest::Approx(2.0));  // row 2 used twice
  CHECK(table.grad()[2] == doctest::Approx(0.0));  // row 1 unused
}

TEST_CASE("masked softmax zeros masked keys exactly and rejects empty rows") {
  auto scores = Tensor64::from({2, 3}, {5.0, 1.0, -2.0, 0.0, 0.0, 0.0});
  Mask mask(2, 3, true);
  mask.set(0, 1, false);
  auto probs = masked_softmax_rows(scores, mask);
  CHECK(probs.at(0, 1) == 0.0);
  CHECK(probs.at(0, 0) + probs.at(0, 2) == doctest::Approx(1.0));

  Mask dead(1, 2, false);
  auto row = Tensor64::zeros({1, 2});
  CHECK_THROWS_AS(masked_softmax_rows(row, dead), GraphError);
}

TEST_CASE("attention: singleton key takes weight one, masked key takes zero") {
  NormalSampler init(31);
  ParamStore64 params;
  auto attn = make_attention(params, "attn", 4, 2, init);
  std::mt19937_64 rng(3);
  auto q = rand_tensor({2, 4}, rng);

  auto single = rand_tensor({1, 4}, rng);
  auto out1 = attn(q, single, nullptr);
  for (const auto& probs : out1.head_probs)
    for (int i = 0; i < probs.rows(); ++i) CHECK(probs.at(i, 0) == doctest::Approx(1.0).epsilon(0));

  auto keys = rand_tensor({3, 4}, rng);
  Mask mask(2, 3, true);
  mask.set(0, 2, false);
  mask.set(1, 2, false);
  auto out2 = attn(q, keys, &mask);
  for (const auto& probs : out2.head_probs)
    for (int i = 0; i < probs.rows(); ++i) CHECK(probs.at(i, 2) == 0.0);
}

TEST_CASE("attention matches the pencil-and-paper oracle") {
  // 1 head, 2 queries, 2 keys, hand-set weights
  NormalSampler init(17);
  ParamStore64 params;
  auto attn = make_attention(params, "a", 2, 1, init);
  auto set = [&](const char* name, std::vector<double> vals) {
    auto v = params.at(name).values_mut();
    std::copy(vals.begin(), vals.end(), v.begin());
  };
  set("a.wq.w", {1, 0, 0, 1});
  set("a.wq.b", {0.1, -0.1});
  set("a.wk.w", {0, 1, 1, 0});
  set("a.wk.b", {0, 0});
  set("a.wv.w", {1, 1, 0, 1});
  set("a.wv.b", {0.5, 0});
  set("a.wo.w", {2, 0, 0, 2});
  set("a.wo.b", {0, 1});

  auto q_in = Tensor64::from({2, 2}, {0.3, -0.2, 1.0, 0.4});
  auto kv_in = Tensor64::from({2, 2}, {0.7, 0.1, -0.5, 0.9});
  auto got = attn(q_in, kv_in, nullptr);

  auto ref = naive::mha(to_mat(q_in), to_mat(kv_in), {{1, 0}, {0, 1}}, {0.1, -0.1},
                        {{0, 1}, {1, 0}}, {0, 0}, {{1, 1}, {0, 1}}, {0.5, 0}, {{2, 0}, {0, 2}},
                        {0, 1}, 1);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(got.output.at(i, j) == doctest::Approx(ref.output[std::size_t(i)][std::size_t(j)]));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(got.head_scores[0].at(i, j) ==
            doctest::Approx(ref.head_scores[0][std::size_t(i)][std::size_t(j)]));
}

TEST_CASE("attention block gradients match finite differences") {
  NormalSampler init(41);
  ParamStore64 params;
  auto attn = make_attention(params, "attn", 4, 2, init);
  std::mt19937_64 rng(13);
  auto q = rand_tensor({3, 4}, rng);
  auto kv = rand_tensor({5, 4}, rng);
  Mask mask(3, 5, true);
  mask.set(0, 4, false);
  mask.set(2, 1, false);

  auto forward = [&] {
    auto out = attn(q, kv, &mask);
    return mean_all(mul(out.output, out.output));
  };
  auto analytic = gradients_of(forward(), params);
  auto numeric = finite_diff_grad<double>([&] { return forward().item(); }, params, 1e-5);
  auto report = compare_gradients(analytic, numeric, 1e-3);
  CAPTURE(report.worst.param);
  CAPTURE(report.max_rel_error);
  CHECK(report.passed());
}

TEST_CASE("encoder layer matches independent reference") {
  NormalSampler init(71);
  ParamStore64 params;
  auto layer = make_encoder_layer(params, "enc", 4, 2, 8, 1e-5, init);
  std::mt19937_64 rng(99);
  auto x = rand_tensor({3, 4}, rng);
  auto got = layer(x);

  auto m = [&](const char* n) { return to_mat(params.at(n)); };
  auto v = [&](const char* n) {
    auto vals = params.at(n).values();
    return std::vector<double>(vals.begin(), vals.end());
  };
  naive::Mat xm = to_mat(x);
  naive::Mat a = naive::layer_norm_affine(xm, v("enc.ln_attn.gain"), v("enc.ln_attn.bias"), 1e-5);
  auto attn = naive::mha(a, a, m("enc.attn.wq.w"), v("enc.attn.wq.b"), m("enc.attn.wk.w"),
                         v("enc.attn.wk.b"), m("enc.attn.wv.w"), v("enc.attn.wv.b"),
                         m("enc.attn.wo.w"), v("enc.attn.wo.b"), 2);
  naive::Mat y = naive::add(xm, attn.output);
  naive::Mat f = naive::layer_norm_affine(y, v("enc.ln_ffn.gain"), v("enc.ln_ffn.bias"), 1e-5);
  naive::Mat up = naive::gelu_mat(naive::linear(f, m("enc.ffn.up.w"), v("enc.ffn.up.b")));
  naive::Mat expect = naive::add(y, naive::linear(up, m("enc.ffn.down.w"), v("enc.ffn.down.b")));

  for (int i = 0; i < got.rows(); ++i)
    for (int j = 0; j < got.cols(); ++j)
      CHECK(got.at(i, j) == doctest::Approx(expect[std::size_t(i)][std::size_t(j)]).epsilon(1e-9));
}

TEST_CASE("attention rejects head counts that do not divide the model dim") {
  NormalSampler init(1);
  ParamStore64 params;
  CHECK_THROWS_AS(make_attention(params, "bad", 6, 4, init), ShapeError);
}

TEST_CASE("apply_primitive: slice and embedding-lookup via trailing argument tensors") {
  auto a = Tensor64::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto range = Tensor64::from({1, 4}, {1, 3, 0, 2});
  auto sliced = apply_primitive(OpTag::Slice, std::vector<Tensor64>{a, range});
  CHECK(sliced.rows() == 2);
  CHECK(sliced.cols() == 2);
  CHECK(sliced.at(0, 0) == 4);
  CHECK(sliced.at(1, 1) == 8);

  auto ids = Tensor64::from({1, 2}, {2, 0});
  auto emb = apply_primitive(OpTag::EmbeddingLookup, std::vector<Tensor64>{a, ids});
  CHECK(emb.at(0, 0) == 7);
  CHECK(emb.at(1, 2) == 3);
}
