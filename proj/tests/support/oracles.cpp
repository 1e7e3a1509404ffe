#include "oracles.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

Vec conv2d(const Vec& x, std::size_t h, std::size_t w, std::size_t cin, const Vec& wt, std::size_t k,
           std::size_t cout, std::size_t stride, std::size_t dilation, std::size_t groups) {
  const std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
  const long span = static_cast<long>((k - 1) * dilation + 1);
  const long pad_t = std::max<long>(static_cast<long>((oh - 1) * stride) + span - static_cast<long>(h), 0) / 2;
  const long pad_l = std::max<long>(static_cast<long>((ow - 1) * stride) + span - static_cast<long>(w), 0) / 2;
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  Vec y(oh * ow * cout, 0.0);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t g = co / cout_g;
        double acc = 0.0;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long iy = static_cast<long>(oy * stride + ky * dilation) - pad_t;
            const long ix = static_cast<long>(ox * stride + kx * dilation) - pad_l;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
              const double xv = x[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin + g * cin_g + ci];
              acc += xv * wt[((ky * k + kx) * cin_g + ci) * cout + co];
            }
          }
        y[(oy * ow + ox) * cout + co] = acc;
      }
  return y;
}

Vec bilinear(const Vec& x, std::size_t h, std::size_t w, std::size_t c, std::size_t oh, std::size_t ow) {
  auto src = [](std::size_t o, std::size_t in, std::size_t out) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  Vec y(oh * ow * c);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const double sy = src(oy, h, oh);
    const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const double sx = src(ox, w, ow);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx)), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto at = [&](std::size_t yy, std::size_t xx) { return x[(yy * w + xx) * c + ch]; };
        y[(oy * ow + ox) * c + ch] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                     fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  }
  return y;
}

Centers class_means(const Vec& x, std::size_t p, std::size_t c, const std::vector<int>& labels, std::size_t n) {
  Centers out{Vec(n * c, 0.0), std::vector<long>(n, 0)};
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < p; ++i) {
      if (labels[i] != static_cast<int>(k)) continue;
      ++out.counts[k];
      for (std::size_t j = 0; j < c; ++j) out.mu[k * c + j] += x[i * c + j];
    }
    for (std::size_t j = 0; j < c && out.counts[k] > 0; ++j) out.mu[k * c + j] /= static_cast<double>(out.counts[k]);
  }
  return out;
}

namespace {

bool labelled(int l, std::size_t n) { return l >= 0 && l < static_cast<int>(n); }

double dot(const double* a, const double* b, std::size_t c) {
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) s += a[j] * b[j];
  return s;
}

}  // namespace

double intra_loss(const Vec& x, std::size_t p, std::size_t c, const std::vector<int>& labels, std::size_t n) {
  const Centers ct = class_means(x, p, c, labels, n);
  double acc = 0.0;
  long rows = 0;
  for (std::size_t i = 0; i < p; ++i) {
    if (!labelled(labels[i], n)) continue;
    ++rows;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = ct.mu[labels[i] * c + j] - x[i * c + j];
      acc += d * d;
    }
  }
  return rows ? acc / static_cast<double>(rows * static_cast<long>(c)) : 0.0;
}

double c2c_loss(const Centers& ct, std::size_t c, std::size_t n, double eps0) {
  std::vector<std::size_t> present;
  for (std::size_t k = 0; k < n; ++k)
    if (ct.counts[k] > 0) present.push_back(k);
  if (present.size() < 2) return 0.0;
  const double margin = eps0 / static_cast<double>(n - 1);
  double acc = 0.0;
  for (std::size_t a : present) {
    std::vector<double> logits;
    for (std::size_t b : present) logits.push_back(dot(&ct.mu[a * c], &ct.mu[b * c], c) / std::sqrt(static_cast<double>(c)));
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    double row = 0.0;
    for (std::size_t bi = 0; bi < present.size(); ++bi) {
      if (present[bi] == a) continue;
      row += std::max(std::exp(logits[bi] - mx) / z - margin, 0.0);
    }
    acc += row * row;
  }
  return acc / static_cast<double>(present.size());
}

double c2p_loss(const Vec& x, std::size_t p, std::size_t c, const std::vector<int>& labels, std::size_t n,
                double eps1) {
  const Centers ct = class_means(x, p, c, labels, n);
  std::vector<std::size_t> present;
  for (std::size_t k = 0; k < n; ++k)
    if (ct.counts[k] > 0) present.push_back(k);
  const double margin = eps1 / static_cast<double>(n - 1);
  double acc = 0.0;
  long rows = 0;
  for (std::size_t i = 0; i < p; ++i) {
    if (!labelled(labels[i], n)) continue;
    ++rows;
    const std::size_t own = static_cast<std::size_t>(labels[i]);
    std::vector<double> s;
    for (std::size_t k : present) {
      s.push_back(k == own ? dot(&ct.mu[k * c], &ct.mu[k * c], c) : dot(&x[i * c], &ct.mu[k * c], c));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    double row = 0.0;
    for (std::size_t t = 0; t < present.size(); ++t) {
      if (present[t] == own) continue;
      row += std::max(std::exp(s[t] - mx) / z - margin, 0.0);
    }
    acc += row * row;
  }
  return rows ? acc / static_cast<double>(rows) : 0.0;
}

Vec dense_attention(const Vec& x, std::size_t h, std::size_t w, std::size_t c, std::size_t heads,
                    const Vec& cpe_w, const Vec& wq, const Vec& wk, const Vec& wv, const Vec& wo) {
  const std::size_t n = h * w, d = c / heads;
  Vec p = conv2d(x, h, w, c, cpe_w, 3, c, 1, 1, c);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] += x[i];
  auto project = [&](const Vec& in, const Vec& m) {
    Vec out(n * c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < c; ++o)
        for (std::size_t j = 0; j < c; ++j) out[i * c + o] += in[i * c + j] * m[j * c + o];
    return out;
  };
  const Vec q = project(p, wq), k = project(p, wk), v = project(p, wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Vec merged(n * c, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      for (std::size_t j = 0; j < n; ++j) s[j] = scale * dot(&q[i * c + hd * d], &k[j * c + hd * d], d);
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t t = 0; t < d; ++t) merged[i * c + hd * d + t] += s[j] / z * v[j * c + hd * d + t];
    }
  }
  return project(merged, wo);
}

double cross_entropy(const Vec& logits, std::size_t p, std::size_t k, const std::vector<int>& labels) {
  double acc = 0.0;
  long rows = 0;
  for (std::size_t i = 0; i < p; ++i) {
    if (!labelled(labels[i], k)) continue;
    ++rows;
    const double* l = &logits[i * k];
    const double mx = *std::max_element(l, l + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(l[j] - mx);
    acc += -(l[labels[i]] - mx - std::log(z));
  }
  return rows ? acc / static_cast<double>(rows) : 0.0;
}

}  // namespace oracle
