#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>

#include "distembed/error.hpp"
#include "distembed/tensor.hpp"
#include "tensor_internal.hpp"

namespace distembed {

using detail::make_result;
using detail::Node;
using detail::require;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

struct MapGeometry {
  std::size_t n, h, w, c;
  bool batched;
};

MapGeometry feature_map_geometry(const Tensor& x, const char* op) {
  const Shape& s = x.shape();
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw Error(ErrorKind::IncompatibleShape, std::string(op) + " expects HWC or NHWC input, got " + shape_str(s));
}

Shape feature_map_shape(const MapGeometry& g, std::size_t h, std::size_t w, std::size_t c) {
  return g.batched ? Shape{g.n, h, w, c} : Shape{h, w, c};
}

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p, const char* op) {
  require(k > 0 && s > 0, ErrorKind::InvalidGeometry, std::string(op) + ": kernel and stride must be positive");
  require(p < k, ErrorKind::InvalidGeometry, std::string(op) + ": padding must be smaller than the kernel");
  require(in + 2 * p >= k, ErrorKind::InvalidGeometry,
          std::string(op) + ": window " + std::to_string(k) + " larger than padded extent " +
              std::to_string(in + 2 * p));
  return (in + 2 * p - k) / s + 1;
}

// Visits every in-bounds kernel tap: dst is the offset of its C-wide run in the
// unfolded [N*Ho*Wo, kh*kw*C] matrix, src the matching pixel offset in the input.
template <typename F>
void for_each_tap(const MapGeometry& g, const Window2D& win, std::size_t ho, std::size_t wo, F f) {
  const std::size_t cols = win.kh * win.kw * g.c;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t r = (n * ho + oy) * wo + ox;
        for (std::size_t ky = 0; ky < win.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * win.sh + ky) - static_cast<std::ptrdiff_t>(win.ph);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < win.kw; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * win.sw + kx) - static_cast<std::ptrdiff_t>(win.pw);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            f(r * cols + (ky * win.kw + kx) * g.c, ((n * g.h + iy) * g.w + ix) * g.c);
          }
        }
      }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::IncompatibleShape,
          "matmul expects matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorKind::IncompatibleShape,
          "matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  {
    ConstMap ma(a.data().data(), m, k);
    ConstMap mb(b.data().data(), k, n);
    MutMap mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  return make_result(Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    ConstMap g(self.grad.data(), m, n);
    if (na.requires_grad) {
      MutMap ga(na.ensure_grad().data(), m, k);
      ga.noalias() += g * ConstMap(nb.data.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MutMap gb(nb.ensure_grad().data(), k, n);
      gb.noalias() += ConstMap(na.data.data(), m, k).transpose() * g;
    }
  });
}

Tensor conv1x1(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require(input.rank() >= 1 && weight.rank() == 2 && bias.rank() == 1, ErrorKind::IncompatibleShape,
          "conv1x1 expects input [...,Cin], weight [Cin,Cout], bias [Cout]");
  const std::size_t cin = input.shape().back();
  require(weight.dim(0) == cin, ErrorKind::IncompatibleShape,
          "conv1x1 input has " + std::to_string(cin) + " channels, weight expects " + std::to_string(weight.dim(0)));
  require(bias.dim(0) == weight.dim(1), ErrorKind::IncompatibleShape, "conv1x1 bias does not match output channels");
  const std::size_t pixels = input.numel() / std::max<std::size_t>(cin, 1);
  Shape out_shape = input.shape();
  out_shape.back() = weight.dim(1);
  Tensor flat = reshape(input, {pixels, cin});
  return reshape(add(matmul(flat, weight), bias), std::move(out_shape));
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const Window2D& window) {
  const auto g = feature_map_geometry(input, "conv2d");
  require(weight.rank() == 4 && weight.dim(0) == window.kh && weight.dim(1) == window.kw && weight.dim(2) == g.c,
          ErrorKind::IncompatibleShape,
          "conv2d weight " + shape_str(weight.shape()) + " does not fit input " + shape_str(input.shape()));
  const std::size_t cout = weight.dim(3);
  require(bias.rank() == 1 && bias.dim(0) == cout, ErrorKind::IncompatibleShape, "conv2d bias mismatch");
  const std::size_t ho = out_extent(g.h, window.kh, window.sh, window.ph, "conv2d");
  const std::size_t wo = out_extent(g.w, window.kw, window.sw, window.pw, "conv2d");
  const std::size_t rows = g.n * ho * wo;
  const std::size_t k = window.kh * window.kw * g.c;

  auto cols = std::make_shared<std::vector<double>>(rows * k, 0.0);
  const auto& dx = input.node()->data;
  for_each_tap(g, window, ho, wo, [&](std::size_t dst, std::size_t src) {
    std::copy_n(dx.data() + src, g.c, cols->data() + dst);
  });

  std::vector<double> out(rows * cout);
  {
    MutMap mo(out.data(), rows, cout);
    mo.noalias() = ConstMap(cols->data(), rows, k) * ConstMap(weight.data().data(), k, cout);
    mo.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), cout);
  }
  return make_result(feature_map_shape(g, ho, wo, cout), std::move(out), {input, weight, bias},
                     [cols, g, window, ho, wo, rows, k, cout](Node& self) {
                       Node& nx = *self.parents[0];
                       Node& nw = *self.parents[1];
                       Node& nb = *self.parents[2];
                       ConstMap gr(self.grad.data(), rows, cout);
                       if (nw.requires_grad) {
                         MutMap gw(nw.ensure_grad().data(), k, cout);
                         gw.noalias() += ConstMap(cols->data(), rows, k).transpose() * gr;
                       }
                       if (nb.requires_grad) {
                         Eigen::Map<Eigen::RowVectorXd> gb(nb.ensure_grad().data(), cout);
                         gb += gr.colwise().sum();
                       }
                       if (!nx.requires_grad) return;
                       RowMatrix dcols = gr * ConstMap(nw.data.data(), k, cout).transpose();
                       auto& gx = nx.ensure_grad();
                       for_each_tap(g, window, ho, wo, [&](std::size_t dst, std::size_t src) {
                         const double* d = dcols.data() + dst;
                         for (std::size_t c = 0; c < g.c; ++c) gx[src + c] += d[c];
                       });
                     });
}

Tensor pool(PoolKind kind, const Tensor& input, const Window2D& win) {
  const auto g = feature_map_geometry(input, "pool");
  const std::size_t ho = out_extent(g.h, win.kh, win.sh, win.ph, "pool");
  const std::size_t wo = out_extent(g.w, win.kw, win.sw, win.pw, "pool");
  const auto& dx = input.node()->data;
  const std::size_t total = g.n * ho * wo * g.c;
  std::vector<double> out(total);
  // Min/max: selected source per output. Avg: number of real cells per window.
  std::vector<std::size_t> chosen(kind == PoolKind::Avg ? 0 : total);
  std::vector<double> counts;
  if (kind == PoolKind::Avg) counts.resize(g.n * ho * wo);

  const double sentinel = kind == PoolKind::Min ? std::numeric_limits<double>::infinity()
                                                : -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t cell = (n * ho + oy) * wo + ox;
        double* o = out.data() + cell * g.c;
        std::size_t* pick = chosen.empty() ? nullptr : chosen.data() + cell * g.c;
        std::fill(o, o + g.c, kind == PoolKind::Avg ? 0.0 : sentinel);
        std::size_t count = 0;
        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * win.sh) - static_cast<std::ptrdiff_t>(win.ph);
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * win.sw) - static_cast<std::ptrdiff_t>(win.pw);
        for (std::ptrdiff_t iy = y0; iy < y0 + static_cast<std::ptrdiff_t>(win.kh); ++iy) {
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::ptrdiff_t ix = x0; ix < x0 + static_cast<std::ptrdiff_t>(win.kw); ++ix) {
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            ++count;
            const std::size_t base = ((n * g.h + iy) * g.w + ix) * g.c;
            const double* v = dx.data() + base;
            switch (kind) {
              case PoolKind::Avg:
                for (std::size_t c = 0; c < g.c; ++c) o[c] += v[c];
                break;
              case PoolKind::Min:
                for (std::size_t c = 0; c < g.c; ++c)
                  if (v[c] < o[c]) o[c] = v[c], pick[c] = base + c;
                break;
              case PoolKind::Max:
                for (std::size_t c = 0; c < g.c; ++c)
                  if (v[c] > o[c]) o[c] = v[c], pick[c] = base + c;
                break;
            }
          }
        }
        if (kind == PoolKind::Avg) {
          counts[cell] = static_cast<double>(count);
          for (std::size_t c = 0; c < g.c; ++c) o[c] /= counts[cell];
        }
      }

  if (kind != PoolKind::Avg) {
    return make_result(feature_map_shape(g, ho, wo, g.c), std::move(out), {input},
                       [chosen = std::move(chosen)](Node& self) {
                         auto& gi = self.parents[0]->ensure_grad();
                         for (std::size_t k = 0; k < chosen.size(); ++k) gi[chosen[k]] += self.grad[k];
                       });
  }
  return make_result(feature_map_shape(g, ho, wo, g.c), std::move(out), {input},
                     [g, ho, wo, win, counts = std::move(counts)](Node& self) {
                       auto& gi = self.parents[0]->ensure_grad();
                       for (std::size_t n = 0; n < g.n; ++n)
                         for (std::size_t oy = 0; oy < ho; ++oy)
                           for (std::size_t ox = 0; ox < wo; ++ox) {
                             const std::size_t cell = (n * ho + oy) * wo + ox;
                             const double* go = self.grad.data() + cell * g.c;
                             const double inv = 1.0 / counts[cell];
                             const auto y0 = static_cast<std::ptrdiff_t>(oy * win.sh) -
                                             static_cast<std::ptrdiff_t>(win.ph);
                             const auto x0 = static_cast<std::ptrdiff_t>(ox * win.sw) -
                                             static_cast<std::ptrdiff_t>(win.pw);
                             for (auto iy = y0; iy < y0 + static_cast<std::ptrdiff_t>(win.kh); ++iy) {
                               if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                               for (auto ix = x0; ix < x0 + static_cast<std::ptrdiff_t>(win.kw); ++ix) {
                                 if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                                 double* t = gi.data() + ((n * g.h + iy) * g.w + ix) * g.c;
                                 for (std::size_t c = 0; c < g.c; ++c) t[c] += go[c] * inv;
                               }
                             }
                           }
                     });
}

Tensor global_avg_pool(const Tensor& input) {
  const auto g = feature_map_geometry(input, "global_avg_pool");
  return g.batched ? mean_axes(input, {1, 2}) : mean_axes(input, {0, 1});
}

Tensor log_softmax(const Tensor& logits) {
  require(logits.rank() >= 1 && logits.shape().back() > 0, ErrorKind::IncompatibleShape,
          "log_softmax needs a non-empty last axis");
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  const auto& dx = logits.node()->data;
  std::vector<double> out(dx.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = dx.data() + r * k;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      require(std::isfinite(x[j]), ErrorKind::Domain, "log_softmax on non-finite logit");
      m = std::max(m, x[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[j] - lse;
  }
  return make_result(logits.shape(), std::move(out), {logits}, [rows, k](Node& self) {
    auto& gi = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * k;
      const double* y = self.data.data() + r * k;
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += g[j];
      for (std::size_t j = 0; j < k; ++j) gi[r * k + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

Tensor dropout(const Tensor& input, double rate, Mode mode, std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, ErrorKind::InvalidConfig,
          "dropout rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return input;
  std::mt19937_64 rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(input.numel());
  for (auto& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < rate ? 0.0 : keep_scale;
  }
  return mul(input, Tensor(input.shape(), std::move(mask)));
}

Tensor affine_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto g = feature_map_geometry(input, "affine_norm");
  require(gamma.shape() == Shape{g.c} && beta.shape() == Shape{g.c}, ErrorKind::IncompatibleShape,
          "affine_norm parameters must have shape [" + std::to_string(g.c) + "]");
  const std::size_t hw = g.h * g.w;
  const std::size_t c = g.c;
  require(hw > 0, ErrorKind::InvalidGeometry, "affine_norm over an empty feature map");
  const auto& dx = input.node()->data;
  const auto& dg = gamma.node()->data;
  const auto& db = beta.node()->data;
  // Normalised activations and per-(sample, channel) inverse std, kept for backward.
  std::vector<double> xhat(dx.size()), inv(g.n * c);
  std::vector<double> out(dx.size());
  std::vector<double> mu(c), var(c);
  for (std::size_t n = 0; n < g.n; ++n) {
    const std::size_t base = n * hw * c;
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) mu[ch] += dx[base + p * c + ch];
    for (auto& m : mu) m /= static_cast<double>(hw);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = dx[base + p * c + ch] - mu[ch];
        var[ch] += d * d;
      }
    for (std::size_t ch = 0; ch < c; ++ch) inv[n * c + ch] = 1.0 / std::sqrt(var[ch] / static_cast<double>(hw) + eps);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = base + p * c + ch;
        xhat[k] = (dx[k] - mu[ch]) * inv[n * c + ch];
        out[k] = dg[ch] * xhat[k] + db[ch];
      }
  }
  return make_result(input.shape(), std::move(out), {input, gamma, beta},
                     [xhat = std::move(xhat), inv = std::move(inv), n_count = g.n, hw, c](Node& self) {
                       Node& nx = *self.parents[0];
                       Node& ng = *self.parents[1];
                       Node& nb = *self.parents[2];
                       const auto& gr = self.grad;
                       if (ng.requires_grad) {
                         auto& gg = ng.ensure_grad();
                         for (std::size_t k = 0; k < gr.size(); ++k) gg[k % c] += gr[k] * xhat[k];
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t k = 0; k < gr.size(); ++k) gb[k % c] += gr[k];
                       }
                       if (!nx.requires_grad) return;
                       auto& gx = nx.ensure_grad();
                       std::vector<double> s1(c), s2(c);
                       for (std::size_t n = 0; n < n_count; ++n) {
                         const std::size_t base = n * hw * c;
                         std::fill(s1.begin(), s1.end(), 0.0);
                         std::fill(s2.begin(), s2.end(), 0.0);
                         for (std::size_t p = 0; p < hw; ++p)
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             const std::size_t k = base + p * c + ch;
                             const double d = gr[k] * ng.data[ch];
                             s1[ch] += d;
                             s2[ch] += d * xhat[k];
                           }
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           s1[ch] /= static_cast<double>(hw);
                           s2[ch] /= static_cast<double>(hw);
                         }
                         for (std::size_t p = 0; p < hw; ++p)
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             const std::size_t k = base + p * c + ch;
                             gx[k] += inv[n * c + ch] * (gr[k] * ng.data[ch] - s1[ch] - xhat[k] * s2[ch]);
                           }
                       }
                     });
}

Tensor take_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.rank() < 1) throw Error(ErrorKind::IncompatibleShape, "take_rows needs a batched tensor");
  const std::size_t row = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = indices.size();
  std::vector<double> out(indices.size() * row);
  const auto src = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.dim(0)) throw Error(ErrorKind::IncompatibleShape, "row index out of range");
    std::copy_n(src.begin() + indices[i] * row, row, out.begin() + i * row);
  }
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace distembed
