#pragma once

// Plain-loop double-precision reference math, written independently of the
// library's tensor ops. Oracle path for the transformer unit tests.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace naive {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  assert(!a.empty() && !b.empty() && a[0].size() == b.size());
  Mat c = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < b.size(); ++k) acc += a[i][k] * b[k][j];
      c[i][j] = acc;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t = zeros(a[0].size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) c[i][j] += b[i][j];
  return c;
}

inline Mat add_row(const Mat& a, const std::vector<double>& v) {
  Mat c = a;
  for (auto& row : c)
    for (std::size_t j = 0; j < v.size(); ++j) row[j] += v[j];
  return c;
}

inline Mat linear(const Mat& x, const Mat& w, const std::vector<double>& b) {
  return add_row(matmul(x, w), b);
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> y(x.size());
  double sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (auto& v : y) v /= sum;
  return y;
}

inline Mat softmax_rows(const Mat& a) {
  Mat c = a;
  for (auto& row : c) row = softmax(row);
  return c;
}

inline Mat masked_softmax_rows(const Mat& a, const std::vector<std::vector<bool>>& keep) {
  Mat c = zeros(a.size(), a[0].size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double mx = -1e300, sum = 0;
    for (std::size_t j = 0; j < a[i].size(); ++j)
      if (keep[i][j]) mx = std::max(mx, a[i][j]);
    for (std::size_t j = 0; j < a[i].size(); ++j)
      if (keep[i][j]) {
        c[i][j] = std::exp(a[i][j] - mx);
        sum += c[i][j];
      }
    for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] /= sum;
  }
  return c;
}

inline Mat layer_norm(const Mat& a, double eps) {
  Mat c = a;
  for (auto& row : c) {
    double mean = 0;
    for (double v : row) mean += v;
    mean /= double(row.size());
    double var = 0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= double(row.size());
    const double rs = 1.0 / std::sqrt(var + eps);
    for (auto& v : row) v = (v - mean) * rs;
  }
  return c;
}

inline Mat layer_norm_affine(const Mat& a, const std::vector<double>& gain,
                             const std::vector<double>& bias, double eps) {
  Mat c = layer_norm(a, eps);
  for (auto& row : c)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * gain[j] + bias[j];
  return c;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Mat gelu_mat(const Mat& a) {
  Mat c = a;
  for (auto& row : c)
    for (auto& v : row) v = gelu(v);
  return c;
}

struct AttentionRef {
  Mat output;
  std::vector<Mat> head_scores;  // scaled pre-softmax
};

// Multi-head attention with column-split heads, matching the layout contract of
// the library but computed with independent loops.
inline AttentionRef mha(const Mat& q_in, const Mat& kv_in, const Mat& wq,
                        const std::vector<double>& bq, const Mat& wk,
                        const std::vector<double>& bk, const Mat& wv,
                        const std::vector<double>& bv, const Mat& wo,
                        const std::vector<double>& bo, int heads,
                        const std::vector<std::vector<bool>>* keep = nullptr) {
  const std::size_t d = wq[0].size();
  const std::size_t dh = d / std::size_t(heads);
  Mat q = linear(q_in, wq, bq), k = linear(kv_in, wk, bk), v = linear(kv_in, wv, bv);
  Mat ctx = zeros(q_in.size(), d);
  AttentionRef ref;
  for (int h = 0; h < heads; ++h) {
    Mat qh = zeros(q.size(), dh), kh = zeros(k.size(), dh), vh = zeros(v.size(), dh);
    for (std::size_t i = 0; i < q.size(); ++i)
      for (std::size_t j = 0; j < dh; ++j) qh[i][j] = q[i][std::size_t(h) * dh + j];
    for (std::size_t i = 0; i < k.size(); ++i)
      for (std::size_t j = 0; j < dh; ++j) {
        kh[i][j] = k[i][std::size_t(h) * dh + j];
        vh[i][j] = v[i][std::size_t(h) * dh + j];
      }
    Mat scores = matmul(qh, transpose(kh));
    for (auto& row : scores)
      for (auto& s : row) s /= std::sqrt(double(dh));
    ref.head_scores.push_back(scores);
    Mat probs = keep ? masked_softmax_rows(scores, *keep) : softmax_rows(scores);
    Mat c = matmul(probs, vh);
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t j = 0; j < dh; ++j) ctx[i][std::size_t(h) * dh + j] = c[i][j];
  }
  ref.output = linear(ctx, wo, bo);
  return ref;
}

}  // namespace naive
