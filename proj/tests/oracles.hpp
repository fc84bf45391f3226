#pragma once

// Plain-loop reference computations. They index flat row-major buffers and use no
// tensor operations, so they share no code path with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace mpamatch::test::oracle {

struct Dims {
  int n, c, h, w;
  int at(int i, int k, int y, int x) const { return ((i * c + k) * h + y) * w + x; }
  int pixels() const { return n * h * w; }
};

/// 0.5 * (mean pixel NLL + mean over (image, class) of Dice loss).
inline double supervised(const std::vector<double>& p, const std::vector<double>& onehot, Dims d, double eps) {
  double ce = 0.0;
  for (int i = 0; i < d.n; ++i)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x)
        for (int k = 0; k < d.c; ++k) {
          const double t = onehot[d.at(i, k, y, x)];
          if (t != 0.0) ce -= t * std::log(p[d.at(i, k, y, x)]);
        }
  ce /= d.pixels();
  double dice = 0.0;
  for (int i = 0; i < d.n; ++i)
    for (int k = 0; k < d.c; ++k) {
      double inter = 0.0, sp = 0.0, sy = 0.0;
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          inter += p[d.at(i, k, y, x)] * onehot[d.at(i, k, y, x)];
          sp += p[d.at(i, k, y, x)];
          sy += onehot[d.at(i, k, y, x)];
        }
      dice += 1.0 - (2.0 * inter + eps) / (sp + sy + eps);
    }
  dice /= d.n * d.c;
  return 0.5 * (ce + dice);
}

struct Unlabeled {
  double loss;
  double retention;
};

/// Hard pseudo-labels from p_w; each pixel with max p_w >= tau contributes
/// lambda*H(fp) + mu/2*(H(s1)+H(s2)); averaged over retained pixels.
inline Unlabeled unlabeled(const std::vector<double>& pw, const std::vector<double>& pfp,
                           const std::vector<double>& ps1, const std::vector<double>& ps2, Dims d, double tau,
                           double lambda, double mu) {
  double sum = 0.0;
  int kept = 0;
  for (int i = 0; i < d.n; ++i)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        int best = 0;
        for (int k = 1; k < d.c; ++k)
          if (pw[d.at(i, k, y, x)] > pw[d.at(i, best, y, x)]) best = k;
        if (pw[d.at(i, best, y, x)] < tau) continue;
        ++kept;
        const int j = d.at(i, best, y, x);
        sum += lambda * -std::log(pfp[j]) + 0.5 * mu * (-std::log(ps1[j]) - std::log(ps2[j]));
      }
  return {kept ? sum / kept : 0.0, static_cast<double>(kept) / d.pixels()};
}

/// Mean over rows with y >= 0 of -log softmax(z/t)[y].
inline double pal(const std::vector<double>& z, const std::vector<std::int64_t>& y, int n, int p, double t) {
  double sum = 0.0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    if (y[i] < 0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < p; ++j) mx = std::max(mx, z[i * p + j] / t);
    double denom = 0.0;
    for (int j = 0; j < p; ++j) denom += std::exp(z[i * p + j] / t - mx);
    sum += -(z[i * p + y[i]] / t - mx - std::log(denom));
    ++count;
  }
  return count ? sum / count : 0.0;
}

/// Like pal, but prototypes of the target's class other than the target are left out.
inline double pcl(const std::vector<double>& z, const std::vector<std::int64_t>& y, int n, int p, int k, double t) {
  double sum = 0.0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    if (y[i] < 0) continue;
    const int cls = static_cast<int>(y[i]) / k;
    std::vector<double> kept;
    for (int j = 0; j < p; ++j)
      if (j == y[i] || j / k != cls) kept.push_back(z[i * p + j] / t);
    const double mx = *std::max_element(kept.begin(), kept.end());
    double denom = 0.0;
    for (double v : kept) denom += std::exp(v - mx);
    sum += -(z[i * p + y[i]] / t - mx - std::log(denom));
    ++count;
  }
  return count ? sum / count : 0.0;
}

/// softmax(Q K^T / sqrt(m)) K for Q [n,m], K [p,m].
inline std::vector<double> attention(const std::vector<double>& q, const std::vector<double>& keys, int n, int p, int m) {
  std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> s(p);
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < p; ++j) {
      double dot = 0.0;
      for (int a = 0; a < m; ++a) dot += q[i * m + a] * keys[j * m + a];
      s[j] = dot / std::sqrt(static_cast<double>(m));
      mx = std::max(mx, s[j]);
    }
    double total = 0.0;
    for (auto& v : s) total += (v = std::exp(v - mx));
    for (int j = 0; j < p; ++j)
      for (int a = 0; a < m; ++a) out[i * m + a] += s[j] / total * keys[j * m + a];
  }
  return out;
}

/// Cosine similarity with zero vectors scoring 0.
inline double cosine(const double* a, const double* b, int m) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < m; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct Scores {
  double miou, mdice, mcpa;
};

/// Macro averages over classes with a nonzero ground-truth row; rows are truth.
inline Scores summarize(const std::vector<std::vector<std::int64_t>>& cm) {
  const int c = static_cast<int>(cm.size());
  double iou = 0.0, dice = 0.0, cpa = 0.0;
  int present = 0;
  for (int k = 0; k < c; ++k) {
    double tp = static_cast<double>(cm[k][k]), fn = 0.0, fp = 0.0;
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fn += static_cast<double>(cm[k][j]);
      fp += static_cast<double>(cm[j][k]);
    }
    if (tp + fn == 0.0) continue;
    ++present;
    iou += tp / (tp + fp + fn);
    dice += 2.0 * tp / (2.0 * tp + fp + fn);
    cpa += tp / (tp + fn);
  }
  return {iou / present, dice / present, cpa / present};
}

}  // namespace mpamatch::test::oracle
