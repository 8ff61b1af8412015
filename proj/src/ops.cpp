#include "eocount/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <vector>

namespace eoc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_probe_active = false;
thread_local std::uint64_t g_probe_hash = 0;
GradFault g_fault = GradFault::none;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void accumulate(TensorImpl& dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst.grad[i] += src[i];
}

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
};

// Scratch buffers recycled by size. The column matrices are large enough
// that fresh allocations go through mmap and page faults dominate.
class BufferPool {
 public:
  ~BufferPool() { alive_ = false; }

  static BufferPool& instance() {
    thread_local BufferPool pool;
    return pool;
  }

  std::shared_ptr<double[]> take(std::size_t n) {
    auto& list = free_[n];
    double* raw;
    if (list.empty()) {
      raw = new double[n];
    } else {
      raw = list.back().release();
      list.pop_back();
    }
    return std::shared_ptr<double[]>(raw, [n](double* q) { give(n, q); });
  }

 private:
  static void give(std::size_t n, double* q) {
    // buffers released after thread teardown just get freed
    if (!alive_) {
      delete[] q;
      return;
    }
    auto& list = instance().free_[n];
    if (list.size() < 64)
      list.emplace_back(q);
    else
      delete[] q;
  }

  static thread_local bool alive_;
  std::map<std::size_t, std::vector<std::unique_ptr<double[]>>> free_;
};

thread_local bool BufferPool::alive_ = true;

// Output columns [lo, hi) read input columns inside [0, w) for tap offset kx.
void valid_range(const ConvGeometry& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  const long off = static_cast<long>(kx) - g.pad;
  long l = 0, h = static_cast<long>(g.wo);
  while (l < h && (l * g.stride + off < 0)) ++l;
  while (h > l && ((h - 1) * g.stride + off >= static_cast<long>(g.w))) --h;
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

void im2col(const double* in, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * p;
        std::size_t lo, hi;
        valid_range(g, kx, lo, hi);
        const long off = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h) || lo >= hi) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + static_cast<long>(lo) + off, src + static_cast<long>(hi) + off, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[static_cast<long>(ox) * g.stride + off];
          }
          std::fill(dst + hi, dst + g.wo, 0.0);
        }
      }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* in_grad) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * p;
        std::size_t lo, hi;
        valid_range(g, kx, lo, hi);
        const long off = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = in_grad + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox) * g.stride + off] += src[ox];
        }
      }
}

// Pointwise (1x1, stride 1, unpadded) convolution as explicit loops. Each
// output channel is computed independently of how many channels exist, which
// keeps old head channels bitwise stable when the head grows.
void pointwise_forward(const double* in, const double* w, const double* b, std::size_t cin,
                       std::size_t cout, std::size_t p, double* out) {
  for (std::size_t o = 0; o < cout; ++o) {
    double* row = out + o * p;
    std::fill(row, row + p, b[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double wc = w[o * cin + c];
      const double* src = in + c * p;
      for (std::size_t i = 0; i < p; ++i) row[i] += wc * src[i];
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  require_rank(input, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  require_rank(bias, 1, "conv2d bias");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  ConvGeometry g{};
  g.cin = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.cin)
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, input has " + std::to_string(g.cin));
  if (bias.dim(0) != g.cout) throw DimensionError("conv2d: bias length does not match C_out");
  const std::size_t ph = g.h + 2 * static_cast<std::size_t>(padding);
  const std::size_t pw = g.w + 2 * static_cast<std::size_t>(padding);
  if (g.kh > ph || g.kw > pw) throw DimensionError("conv2d: kernel larger than padded input");
  g.ho = (ph - g.kh) / static_cast<std::size_t>(stride) + 1;
  g.wo = (pw - g.kw) / static_cast<std::size_t>(stride) + 1;
  const std::size_t p = g.ho * g.wo;
  const std::size_t k = g.cin * g.kh * g.kw;

  const bool tracked = any_tracked({&input, &weight, &bias});
  Tensor out = make_result({g.cout, g.ho, g.wo}, tracked);
  const bool pointwise = g.kh == 1 && g.kw == 1 && stride == 1 && padding == 0;

  if (pointwise) {
    pointwise_forward(input.data().data(), weight.data().data(), bias.data().data(), g.cin, g.cout,
                      p, out.data().data());
  } else {
    auto cols = BufferPool::instance().take(k * p);
    im2col(input.data().data(), g, cols.get());
    if (k <= 16) {
      // short reductions lose to plain axpy loops
      pointwise_forward(cols.get(), weight.data().data(), bias.data().data(), k, g.cout, p,
                        out.data().data());
    } else {
      MutMap y(out.data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(p));
      y.noalias() = ConstMap(weight.data().data(), static_cast<Eigen::Index>(g.cout),
                             static_cast<Eigen::Index>(k)) *
                    ConstMap(cols.get(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
      const auto b = bias.data();
      for (std::size_t o = 0; o < g.cout; ++o) y.row(static_cast<Eigen::Index>(o)).array() += b[o];
    }
    if (tracked) {
      auto in = input.handle(), wt = weight.handle(), bs = bias.handle(), o = out.handle();
      Tape::current().record("conv2d", {input, weight, bias}, out, [in, wt, bs, o, cols, g, k, p] {
        ConstMap dy(o->grad.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(p));
        if (wt->requires_grad) {
          MutMap dw(wt->grad.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(k));
          const ConstMap c(cols.get(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
          if (g_fault == GradFault::conv2d_weight)
            dw.noalias() += 1.01 * (dy * c.transpose());
          else
            dw.noalias() += dy * c.transpose();
        }
        // plain loop: Eigen's vectorized sum peels by pointer alignment
        if (bs->requires_grad)
          for (std::size_t oc = 0; oc < g.cout; ++oc) {
            const double* r = o->grad.data() + oc * p;
            double s = 0.0;
            for (std::size_t i = 0; i < p; ++i) s += r[i];
            bs->grad[oc] += s;
          }
        if (in->requires_grad) {
          auto dcols = BufferPool::instance().take(k * p);
          MutMap(dcols.get(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p)).noalias() =
              ConstMap(wt->data.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(k))
                  .transpose() *
              dy;
          col2im_add(dcols.get(), g, in->grad.data());
        }
      });
    }
    return out;
  }

  if (tracked) {
    auto in = input.handle(), wt = weight.handle(), bs = bias.handle(), o = out.handle();
    Tape::current().record("conv2d", {input, weight, bias}, out, [in, wt, bs, o, g, p] {
      const double* dy = o->grad.data();
      const double fault = g_fault == GradFault::conv2d_weight ? 1.01 : 1.0;
      for (std::size_t oc = 0; oc < g.cout; ++oc) {
        const double* dyr = dy + oc * p;
        if (bs->requires_grad) {
          double s = 0.0;
          for (std::size_t i = 0; i < p; ++i) s += dyr[i];
          bs->grad[oc] += s;
        }
        for (std::size_t c = 0; c < g.cin; ++c) {
          const double* x = in->data.data() + c * p;
          if (wt->requires_grad) {
            double s = 0.0;
            for (std::size_t i = 0; i < p; ++i) s += dyr[i] * x[i];
            wt->grad[oc * g.cin + c] += fault * s;
          }
          if (in->requires_grad) {
            const double wc = wt->data[oc * g.cin + c];
            double* dx = in->grad.data() + c * p;
            for (std::size_t i = 0; i < p; ++i) dx[i] += wc * dyr[i];
          }
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  const bool tracked = any_tracked({&x});
  Tensor out = make_result(x.shape(), tracked);
  const auto in = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > 0.0 ? in[i] : 0.0;
  if (g_probe_active) {
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < in.size(); ++i) h = h * 1099511628211ULL + (in[i] > 0.0 ? 1 : 2);
    kink_probe::note(h);
  }
  if (tracked) {
    auto xi = x.handle(), o = out.handle();
    Tape::current().record("relu", {x}, out, [xi, o] {
      for (std::size_t i = 0; i < xi->data.size(); ++i)
        if (xi->data[i] > 0.0) xi->grad[i] += o->grad[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  const bool tracked = any_tracked({&x});
  Tensor out = make_result(x.shape(), tracked);
  const auto in = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    double s;
    if (in[i] >= 0.0) {
      s = 1.0 / (1.0 + std::exp(-in[i]));
    } else {
      const double e = std::exp(in[i]);
      s = e / (1.0 + e);
    }
    y[i] = std::clamp(s, lo, hi);
  }
  if (tracked) {
    auto xi = x.handle(), o = out.handle();
    Tape::current().record("sigmoid", {x}, out, [xi, o] {
      for (std::size_t i = 0; i < o->data.size(); ++i) {
        const double s = o->data[i];
        xi->grad[i] += o->grad[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

Tensor maxpool2d(const Tensor& x, int k) {
  require_rank(x, 3, "maxpool2d");
  if (k < 1) throw std::invalid_argument("maxpool2d: window must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), ks = static_cast<std::size_t>(k);
  if (h % ks != 0 || w % ks != 0)
    throw DimensionError("maxpool2d: extent " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(k));
  const std::size_t ho = h / ks, wo = w / ks;
  const bool tracked = any_tracked({&x});
  Tensor out = make_result({c, ho, wo}, tracked);
  auto winners = std::make_shared<std::vector<std::size_t>>(c * ho * wo);
  const auto in = x.data();
  auto y = out.data();
  std::uint64_t h_probe = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (ch * h + oy * ks) * w + ox * ks;
        for (std::size_t dy = 0; dy < ks; ++dy)
          for (std::size_t dx = 0; dx < ks; ++dx) {
            const std::size_t idx = (ch * h + oy * ks + dy) * w + ox * ks + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (ch * ho + oy) * wo + ox;
        y[o] = in[best];
        (*winners)[o] = best;
        if (g_probe_active) h_probe = h_probe * 1099511628211ULL + best;
      }
  if (g_probe_active) kink_probe::note(h_probe);
  if (tracked) {
    auto xi = x.handle(), oi = out.handle();
    Tape::current().record("maxpool2d", {x}, out, [xi, oi, winners] {
      for (std::size_t o = 0; o < winners->size(); ++o) xi->grad[(*winners)[o]] += oi->grad[o];
    });
  }
  return out;
}

Tensor global_avgpool(const Tensor& x) {
  require_rank(x, 3, "global_avgpool");
  const std::size_t c = x.dim(0), p = x.dim(1) * x.dim(2);
  const bool tracked = any_tracked({&x});
  Tensor out = make_result({c}, tracked);
  const auto in = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < p; ++i) s += in[ch * p + i];
    out[ch] = s / static_cast<double>(p);
  }
  if (tracked) {
    auto xi = x.handle(), o = out.handle();
    Tape::current().record("global_avgpool", {x}, out, [xi, o, c, p] {
      const double inv = 1.0 / static_cast<double>(p);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = o->grad[ch] * inv;
        for (std::size_t i = 0; i < p; ++i) xi->grad[ch * p + i] += g;
      }
    });
  }
  return out;
}

Tensor center_channels(const Tensor& x) {
  require_rank(x, 3, "center_channels");
  const std::size_t c = x.dim(0), p = x.dim(1) * x.dim(2);
  const bool tracked = any_tracked({&x});
  Tensor out = make_result(x.shape(), tracked);
  const auto in = x.data();
  const double inv = 1.0 / static_cast<double>(p);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < p; ++i) s += in[ch * p + i];
    const double mean = s * inv;
    for (std::size_t i = 0; i < p; ++i) out[ch * p + i] = in[ch * p + i] - mean;
  }
  if (tracked) {
    auto xi = x.handle(), o = out.handle();
    Tape::current().record("center_channels", {x}, out, [xi, o, c, p, inv] {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* g = o->grad.data() + ch * p;
        double s = 0.0;
        for (std::size_t i = 0; i < p; ++i) s += g[i];
        const double mean = s * inv;
        for (std::size_t i = 0; i < p; ++i) xi->grad[ch * p + i] += g[i] - mean;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 1, "linear input");
  require_rank(weight, 2, "linear weight");
  require_rank(bias, 1, "linear bias");
  const std::size_t k = weight.dim(0), d = weight.dim(1);
  if (x.dim(0) != d)
    throw DimensionError("linear: input length " + std::to_string(x.dim(0)) +
                         " does not match weight " + shape_str(weight.shape()));
  if (bias.dim(0) != k) throw DimensionError("linear: bias length does not match outputs");
  const bool tracked = any_tracked({&x, &weight, &bias});
  Tensor out = make_result({k}, tracked);
  const auto xv = x.data(), wv = weight.data(), bv = bias.data();
  for (std::size_t r = 0; r < k; ++r) {
    double s = bv[r];
    for (std::size_t j = 0; j < d; ++j) s += wv[r * d + j] * xv[j];
    out[r] = s;
  }
  if (tracked) {
    auto xi = x.handle(), wi = weight.handle(), bi = bias.handle(), o = out.handle();
    Tape::current().record("linear", {x, weight, bias}, out, [xi, wi, bi, o, k, d] {
      for (std::size_t r = 0; r < k; ++r) {
        const double g = o->grad[r];
        if (bi->requires_grad) bi->grad[r] += g;
        for (std::size_t j = 0; j < d; ++j) {
          if (wi->requires_grad) wi->grad[r * d + j] += g * xi->data[j];
          if (xi->requires_grad) xi->grad[j] += g * wi->data[r * d + j];
        }
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target) {
  require_rank(logits, 1, "softmax_cross_entropy");
  const std::size_t k = logits.dim(0);
  if (target >= k)
    throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(target) +
                            " outside [0, " + std::to_string(k) + ")");
  const auto z = logits.data();
  const double shift = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - shift);
  const double lse = shift + std::log(s);
  const bool tracked = any_tracked({&logits});
  Tensor out = make_result({1}, tracked);
  out[0] = lse - z[target];
  if (tracked) {
    auto li = logits.handle(), o = out.handle();
    Tape::current().record("softmax_cross_entropy", {logits}, out, [li, o, lse, target] {
      const double g = o->grad[0];
      for (std::size_t i = 0; i < li->data.size(); ++i) {
        const double p = std::exp(li->data[i] - lse);
        li->grad[i] += g * (p - (i == target ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

Tensor bce_loss(const Tensor& q, const Tensor& target) {
  require_same_shape(q, target, "bce_loss");
  const auto qv = q.data(), bv = target.data();
  const double m = static_cast<double>(qv.size());
  double s = 0.0;
  for (std::size_t i = 0; i < qv.size(); ++i) {
    const double qc = std::clamp(qv[i], kBceClamp, 1.0 - kBceClamp);
    s += bv[i] * std::log(qc) + (1.0 - bv[i]) * std::log(1.0 - qc);
  }
  const bool tracked = any_tracked({&q});
  Tensor out = make_result({1}, tracked);
  out[0] = -s / m;
  if (tracked) {
    auto qi = q.handle(), bi = target.handle(), o = out.handle();
    Tape::current().record("bce_loss", {q}, out, [qi, bi, o, m] {
      const double g = o->grad[0] / m;
      for (std::size_t i = 0; i < qi->data.size(); ++i) {
        const double qv = qi->data[i];
        if (qv < kBceClamp || qv > 1.0 - kBceClamp) continue;
        const double b = bi->data[i];
        qi->grad[i] += -g * (b / qv - (1.0 - b) / (1.0 - qv));
      }
    });
  }
  return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target, double scale_factor) {
  require_same_shape(pred, target, "mse_loss");
  const auto p = pred.data(), t = target.data();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    s += d * d;
  }
  const bool tracked = any_tracked({&pred, &target});
  Tensor out = make_result({1}, tracked);
  out[0] = scale_factor * s;
  if (tracked) {
    auto pi = pred.handle(), ti = target.handle(), o = out.handle();
    Tape::current().record("mse_loss", {pred, target}, out, [pi, ti, o, scale_factor] {
      const double g = 2.0 * scale_factor * o->grad[0];
      for (std::size_t i = 0; i < pi->data.size(); ++i) {
        const double d = g * (pi->data[i] - ti->data[i]);
        if (pi->requires_grad) pi->grad[i] += d;
        if (ti->requires_grad) ti->grad[i] -= d;
      }
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (!b.defined()) return a;
  if (!a.defined()) return b;
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const bool tracked = any_tracked({&a, &b});
  Tensor out = make_result({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, tracked);
  auto y = out.data();
  std::copy(a.data().begin(), a.data().end(), y.begin());
  std::copy(b.data().begin(), b.data().end(), y.begin() + static_cast<std::ptrdiff_t>(a.numel()));
  if (tracked) {
    auto ai = a.handle(), bi = b.handle(), o = out.handle();
    Tape::current().record("concat_channels", {a, b}, out, [ai, bi, o] {
      const std::size_t na = ai->data.size();
      if (ai->requires_grad)
        for (std::size_t i = 0; i < na; ++i) ai->grad[i] += o->grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < bi->data.size(); ++i) bi->grad[i] += o->grad[na + i];
    });
  }
  return out;
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 3, "slice_channels");
  if (begin >= end || end > x.dim(0))
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  const std::size_t p = x.dim(1) * x.dim(2);
  const bool tracked = any_tracked({&x});
  Tensor out = make_result({end - begin, x.dim(1), x.dim(2)}, tracked);
  const auto in = x.data();
  std::copy(in.begin() + static_cast<std::ptrdiff_t>(begin * p),
            in.begin() + static_cast<std::ptrdiff_t>(end * p), out.data().begin());
  if (tracked) {
    auto xi = x.handle(), o = out.handle();
    Tape::current().record("slice_channels", {x}, out, [xi, o, begin, p] {
      for (std::size_t i = 0; i < o->data.size(); ++i) xi->grad[begin * p + i] += o->grad[i];
    });
  }
  return out;
}

Tensor affine(const Tensor& x, double a, double b) {
  const bool tracked = any_tracked({&x});
  Tensor out = make_result(x.shape(), tracked);
  const auto in = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = a * in[i] + b;
  if (tracked) {
    auto xi = x.handle(), o = out.handle();
    Tape::current().record("affine", {x}, out, [xi, o, a] {
      for (std::size_t i = 0; i < o->grad.size(); ++i) xi->grad[i] += a * o->grad[i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool tracked = any_tracked({&a, &b});
  Tensor out = make_result(a.shape(), tracked);
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  if (tracked) {
    auto ai = a.handle(), bi = b.handle(), o = out.handle();
    Tape::current().record("add", {a, b}, out, [ai, bi, o] {
      if (ai->requires_grad) accumulate(*ai, o->grad);
      if (bi->requires_grad) accumulate(*bi, o->grad);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool tracked = any_tracked({&a, &b});
  Tensor out = make_result(a.shape(), tracked);
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  if (tracked) {
    auto ai = a.handle(), bi = b.handle(), o = out.handle();
    Tape::current().record("mul", {a, b}, out, [ai, bi, o] {
      for (std::size_t i = 0; i < o->grad.size(); ++i) {
        if (ai->requires_grad) ai->grad[i] += o->grad[i] * bi->data[i];
        if (bi->requires_grad) bi->grad[i] += o->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }

Tensor sum(const Tensor& x) {
  const bool tracked = any_tracked({&x});
  Tensor out = make_result({1}, tracked);
  double s = 0.0;
  for (double v : x.data()) s += v;
  out[0] = s;
  if (tracked) {
    auto xi = x.handle(), o = out.handle();
    Tape::current().record("sum", {x}, out, [xi, o] {
      const double g = o->grad[0];
      for (auto& v : xi->grad) v += g;
    });
  }
  return out;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  if (g_probe_active) kink_probe::note(best + 0x51ULL);
  return best;
}

namespace kink_probe {
void begin() {
  g_probe_active = true;
  g_probe_hash = 0xcbf29ce484222325ULL;
}
std::uint64_t end() {
  g_probe_active = false;
  return g_probe_hash;
}
bool active() { return g_probe_active; }
void note(std::uint64_t value) {
  if (g_probe_active) g_probe_hash = (g_probe_hash ^ value) * 1099511628211ULL + 0x9e37ULL;
}
}  // namespace kink_probe

void set_grad_fault(GradFault fault) { g_fault = fault; }
GradFault grad_fault() { return g_fault; }

}  // namespace eoc
