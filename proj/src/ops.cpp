#include "fccdn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fccdn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var make_op(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> bp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backprop = std::move(bp);
    }
  }
  return Var::from_node(n);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

inline int reflect101(int i, int n) {
  // n >= 2 whenever padding is in use
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const std::int64_t n = out.numel();
  const double* pa = a.value().data.data();
  const double* pb = b.value().data.data();
  double* po = out.data.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  auto na = a.node(), nb = b.node();
  return make_op(std::move(out), {na, nb}, [na, nb](Node& nd) {
    const std::int64_t m = nd.grad.numel();
    if (na->requires_grad) {
      Tensor& g = na->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) g.data[i] += nd.grad.data[i];
    }
    if (nb->requires_grad) {
      Tensor& g = nb->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) g.data[i] += nd.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  auto na = a.node(), nb = b.node();
  return make_op(std::move(out), {na, nb}, [na, nb](Node& nd) {
    const std::int64_t m = nd.grad.numel();
    if (na->requires_grad) {
      Tensor& g = na->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) g.data[i] += nd.grad.data[i];
    }
    if (nb->requires_grad) {
      Tensor& g = nb->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) g.data[i] -= nd.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  auto na = a.node(), nb = b.node();
  return make_op(std::move(out), {na, nb}, [na, nb](Node& nd) {
    const std::int64_t m = nd.grad.numel();
    if (na->requires_grad) {
      Tensor& g = na->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) g.data[i] += nd.grad.data[i] * nb->value.data[i];
    }
    if (nb->requires_grad) {
      Tensor& g = nb->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) g.data[i] += nd.grad.data[i] * na->value.data[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data[i] = a.value().data[i] * s;
  auto na = a.node();
  return make_op(std::move(out), {na}, [na, s](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i) g.data[i] += nd.grad.data[i] * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + s;
  auto na = a.node();
  return make_op(std::move(out), {na}, [na](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i) g.data[i] += nd.grad.data[i];
  });
}

Var relu(const Var& a) {
  Tensor out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data[i] = a.value().data[i] > 0.0 ? a.value().data[i] : 0.0;
  auto na = a.node();
  return make_op(std::move(out), {na}, [na](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i)
      if (na->value.data[i] > 0.0) g.data[i] += nd.grad.data[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    double x = a.value().data[i];
    out.data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  auto na = a.node();
  return make_op(std::move(out), {na}, [na](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i) {
      double y = nd.value.data[i];
      g.data[i] += nd.grad.data[i] * y * (1.0 - y);
    }
  });
}

Var vlog(const Var& a) {
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] = std::log(a.value().data[i]);
  auto na = a.node();
  return make_op(std::move(out), {na}, [na](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i)
      g.data[i] += nd.grad.data[i] / na->value.data[i];
  });
}

Var vabs(const Var& a) {
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] = std::fabs(a.value().data[i]);
  auto na = a.node();
  return make_op(std::move(out), {na}, [na](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i) {
      double x = na->value.data[i];
      if (x > 0.0)
        g.data[i] += nd.grad.data[i];
      else if (x < 0.0)
        g.data[i] -= nd.grad.data[i];
    }
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = std::min(hi, std::max(lo, a.value().data[i]));
  auto na = a.node();
  return make_op(std::move(out), {na}, [na, lo, hi](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i) {
      double x = na->value.data[i];
      if (x >= lo && x <= hi) g.data[i] += nd.grad.data[i];
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value().data[i];
  auto na = a.node();
  return make_op(Tensor::scalar(s), {na}, [na](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    const double gv = nd.grad.data[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g.data[i] += gv;
  });
}

Var mean(const Var& a) {
  const std::int64_t n = a.value().numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(const Var& a, std::vector<int> s) {
  if (Tensor::numel_of(s) != a.value().numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(s), a.value().data);
  auto na = a.node();
  return make_op(std::move(out), {na}, [na](Node& nd) {
    if (!na->requires_grad) return;
    Tensor& g = na->ensure_grad();
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i) g.data[i] += nd.grad.data[i];
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const auto& s0 = xs[0].shape();
  if (s0.size() != 4) throw std::invalid_argument("concat_channels: expects NCHW");
  int n = s0[0], h = s0[2], w = s0[3];
  int ctot = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[0] != n || s[2] != h || s[3] != w)
      throw std::invalid_argument("concat_channels: incompatible shapes");
    ctot += s[1];
  }
  Tensor out({n, ctot, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<NodePtr> parents;
  parents.reserve(xs.size());
  std::vector<int> chans;
  for (const auto& x : xs) {
    parents.push_back(x.node());
    chans.push_back(x.shape()[1]);
  }
  for (int b = 0; b < n; ++b) {
    std::int64_t coff = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const Tensor& xv = xs[k].value();
      int ck = chans[k];
      std::copy_n(xv.data.data() + static_cast<std::int64_t>(b) * ck * plane, static_cast<std::int64_t>(ck) * plane,
                  out.data.data() + (static_cast<std::int64_t>(b) * ctot + coff) * plane);
      coff += ck;
    }
  }
  auto parents_copy = parents;
  return make_op(std::move(out), std::move(parents), [parents_copy, chans, n, plane, ctot](Node& nd) {
    for (int b = 0; b < n; ++b) {
      std::int64_t coff = 0;
      for (std::size_t k = 0; k < parents_copy.size(); ++k) {
        int ck = chans[k];
        if (parents_copy[k]->requires_grad) {
          Tensor& g = parents_copy[k]->ensure_grad();
          const double* src = nd.grad.data.data() + (static_cast<std::int64_t>(b) * ctot + coff) * plane;
          double* dst = g.data.data() + static_cast<std::int64_t>(b) * ck * plane;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(ck) * plane; ++i) dst[i] += src[i];
        }
        coff += ck;
      }
    }
  });
}

Var upsample_nearest2(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("upsample_nearest2: expects NCHW");
  int n = s[0], c = s[1], h = s[2], w = s[3];
  Tensor out({n, c, 2 * h, 2 * w});
  const Tensor& xv = x.value();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) if (n * c > 1)
#endif
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double v = xv.at4(b, ch, i, j);
          out.at4(b, ch, 2 * i, 2 * j) = v;
          out.at4(b, ch, 2 * i, 2 * j + 1) = v;
          out.at4(b, ch, 2 * i + 1, 2 * j) = v;
          out.at4(b, ch, 2 * i + 1, 2 * j + 1) = v;
        }
  auto nx = x.node();
  return make_op(std::move(out), {nx}, [nx, n, c, h, w](Node& nd) {
    if (!nx->requires_grad) return;
    Tensor& g = nx->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            g.at4(b, ch, i, j) += nd.grad.at4(b, ch, 2 * i, 2 * j) +
                                  nd.grad.at4(b, ch, 2 * i, 2 * j + 1) +
                                  nd.grad.at4(b, ch, 2 * i + 1, 2 * j) +
                                  nd.grad.at4(b, ch, 2 * i + 1, 2 * j + 1);
  });
}

Var transpose12(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("transpose12: expects (N,A,B)");
  int n = s[0], a = s[1], b = s[2];
  Tensor out({n, b, a});
  for (int k = 0; k < n; ++k) {
    const double* src = x.value().data.data() + static_cast<std::int64_t>(k) * a * b;
    double* dst = out.data.data() + static_cast<std::int64_t>(k) * a * b;
    for (int i = 0; i < a; ++i)
      for (int j = 0; j < b; ++j) dst[static_cast<std::int64_t>(j) * a + i] = src[static_cast<std::int64_t>(i) * b + j];
  }
  auto nx = x.node();
  return make_op(std::move(out), {nx}, [nx, n, a, b](Node& nd) {
    if (!nx->requires_grad) return;
    Tensor& g = nx->ensure_grad();
    for (int k = 0; k < n; ++k) {
      const double* src = nd.grad.data.data() + static_cast<std::int64_t>(k) * a * b;
      double* dst = g.data.data() + static_cast<std::int64_t>(k) * a * b;
      for (int j = 0; j < b; ++j)
        for (int i = 0; i < a; ++i) dst[static_cast<std::int64_t>(i) * b + j] += src[static_cast<std::int64_t>(j) * a + i];
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  int n = sa[0], p = sa[1], q = sa[2], r = sb[2];
  Tensor out({n, p, r});
#ifdef _OPENMP
#pragma omp parallel for if (n > 1)
#endif
  for (int k = 0; k < n; ++k) {
    CMapMat A(a.value().data.data() + static_cast<std::int64_t>(k) * p * q, p, q);
    CMapMat B(b.value().data.data() + static_cast<std::int64_t>(k) * q * r, q, r);
    MapMat O(out.data.data() + static_cast<std::int64_t>(k) * p * r, p, r);
    O.noalias() = A * B;
  }
  auto na = a.node(), nb = b.node();
  return make_op(std::move(out), {na, nb}, [na, nb, n, p, q, r](Node& nd) {
    if (na->requires_grad) {
      Tensor& g = na->ensure_grad();
      for (int k = 0; k < n; ++k) {
        CMapMat G(nd.grad.data.data() + static_cast<std::int64_t>(k) * p * r, p, r);
        CMapMat B(nb->value.data.data() + static_cast<std::int64_t>(k) * q * r, q, r);
        MapMat GA(g.data.data() + static_cast<std::int64_t>(k) * p * q, p, q);
        GA.noalias() += G * B.transpose();
      }
    }
    if (nb->requires_grad) {
      Tensor& g = nb->ensure_grad();
      for (int k = 0; k < n; ++k) {
        CMapMat G(nd.grad.data.data() + static_cast<std::int64_t>(k) * p * r, p, r);
        CMapMat A(na->value.data.data() + static_cast<std::int64_t>(k) * p * q, p, q);
        MapMat GB(g.data.data() + static_cast<std::int64_t>(k) * q * r, q, r);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Var softmax_lastdim(const Var& x) {
  const auto& s = x.shape();
  if (s.size() < 2) throw std::invalid_argument("softmax_lastdim: needs >= 2 dims");
  std::int64_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  const int cols = s.back();
  Tensor out(s);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = x.value().data.data() + r * cols;
    double* dst = out.data.data() + r * cols;
    double mx = src[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    for (int j = 0; j < cols; ++j) dst[j] /= z;
  }
  auto nx = x.node();
  return make_op(std::move(out), {nx}, [nx, rows, cols](Node& nd) {
    if (!nx->requires_grad) return;
    Tensor& g = nx->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = nd.value.data.data() + r * cols;
      const double* dy = nd.grad.data.data() + r * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
      double* dst = g.data.data() + r * cols;
      for (int j = 0; j < cols; ++j) dst[j] += y[j] * (dy[j] - dot);
    }
  });
}

Var softmax_channels(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("softmax_channels: expects NCHW");
  const int n = s[0], c = s[1];
  const std::int64_t area = static_cast<std::int64_t>(s[2]) * s[3];
  Tensor out(s);
  for (int b = 0; b < n; ++b) {
    const double* xb = x.value().data.data() + static_cast<std::int64_t>(b) * c * area;
    double* ob = out.data.data() + static_cast<std::int64_t>(b) * c * area;
    for (std::int64_t i = 0; i < area; ++i) {
      double mx = xb[i];
      for (int k = 1; k < c; ++k) mx = std::max(mx, xb[k * area + i]);
      double z = 0.0;
      for (int k = 0; k < c; ++k) {
        double e = std::exp(xb[k * area + i] - mx);
        ob[k * area + i] = e;
        z += e;
      }
      for (int k = 0; k < c; ++k) ob[k * area + i] /= z;
    }
  }
  auto nx = x.node();
  return make_op(std::move(out), {nx}, [nx, n, c, area](Node& nd) {
    if (!nx->requires_grad) return;
    Tensor& g = nx->ensure_grad();
    for (int b = 0; b < n; ++b) {
      const double* y = nd.value.data.data() + static_cast<std::int64_t>(b) * c * area;
      const double* dy = nd.grad.data.data() + static_cast<std::int64_t>(b) * c * area;
      double* dst = g.data.data() + static_cast<std::int64_t>(b) * c * area;
      for (std::int64_t i = 0; i < area; ++i) {
        double dot = 0.0;
        for (int k = 0; k < c; ++k) dot += dy[k * area + i] * y[k * area + i];
        for (int k = 0; k < c; ++k) dst[k * area + i] += y[k * area + i] * (dy[k * area + i] - dot);
      }
    }
  });
}

Var vdiv(const Var& a, const Var& b) {
  check_same_shape(a, b, "vdiv");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] / b.value().data[i];
  auto na = a.node(), nb = b.node();
  return make_op(std::move(out), {na, nb}, [na, nb](Node& nd) {
    const std::int64_t m = nd.grad.numel();
    if (na->requires_grad) {
      Tensor& g = na->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) g.data[i] += nd.grad.data[i] / nb->value.data[i];
    }
    if (nb->requires_grad) {
      Tensor& g = nb->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) {
        double bv = nb->value.data[i];
        g.data[i] -= nd.grad.data[i] * na->value.data[i] / (bv * bv);
      }
    }
  });
}

namespace {

struct ConvDims {
  int n, c, h, w, f, kh, kw, ho, wo;
  int stride, pad;
  std::int64_t ckk() const { return static_cast<std::int64_t>(c) * kh * kw; }
  std::int64_t area_out() const { return static_cast<std::int64_t>(ho) * wo; }
};

void im2col(const double* x, const ConvDims& d, int sample, double* col) {
  // col is (C*KH*KW, HO*WO) row-major
  const std::int64_t plane = static_cast<std::int64_t>(d.h) * d.w;
  const double* xs = x + static_cast<std::int64_t>(sample) * d.c * plane;
  std::int64_t row = 0;
  for (int c = 0; c < d.c; ++c) {
    const double* xc = xs + c * plane;
    for (int ki = 0; ki < d.kh; ++ki)
      for (int kj = 0; kj < d.kw; ++kj, ++row) {
        double* out = col + row * d.area_out();
        std::int64_t idx = 0;
        for (int oh = 0; oh < d.ho; ++oh) {
          int ih = oh * d.stride - d.pad + ki;
          ih = (ih < 0 || ih >= d.h) ? reflect101(ih, d.h) : ih;
          const double* xrow = xc + static_cast<std::int64_t>(ih) * d.w;
          for (int ow = 0; ow < d.wo; ++ow, ++idx) {
            int iw = ow * d.stride - d.pad + kj;
            iw = (iw < 0 || iw >= d.w) ? reflect101(iw, d.w) : iw;
            out[idx] = xrow[iw];
          }
        }
      }
  }
}

void col2im_add(const double* col, const ConvDims& d, int sample, double* gx) {
  const std::int64_t plane = static_cast<std::int64_t>(d.h) * d.w;
  double* gs = gx + static_cast<std::int64_t>(sample) * d.c * plane;
  std::int64_t row = 0;
  for (int c = 0; c < d.c; ++c) {
    double* gc = gs + c * plane;
    for (int ki = 0; ki < d.kh; ++ki)
      for (int kj = 0; kj < d.kw; ++kj, ++row) {
        const double* src = col + row * d.area_out();
        std::int64_t idx = 0;
        for (int oh = 0; oh < d.ho; ++oh) {
          int ih = oh * d.stride - d.pad + ki;
          ih = (ih < 0 || ih >= d.h) ? reflect101(ih, d.h) : ih;
          double* grow = gc + static_cast<std::int64_t>(ih) * d.w;
          for (int ow = 0; ow < d.wo; ++ow, ++idx) {
            int iw = ow * d.stride - d.pad + kj;
            iw = (iw < 0 || iw >= d.w) ? reflect101(iw, d.w) : iw;
            grow[iw] += src[idx];
          }
        }
      }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4)
    throw std::invalid_argument("conv2d: expects NCHW input and (F,C,KH,KW) weight");
  if (sx[1] != sw[1])
    throw std::invalid_argument("conv2d: channel mismatch " + shape_str(sx) + " vs " + shape_str(sw));
  ConvDims d;
  d.n = sx[0]; d.c = sx[1]; d.h = sx[2]; d.w = sx[3];
  d.f = sw[0]; d.kh = sw[2]; d.kw = sw[3];
  d.stride = stride; d.pad = pad;
  if (pad > 0 && (d.h < 2 || d.w < 2))
    throw std::invalid_argument("conv2d: reflect padding needs spatial size >= 2");
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw std::invalid_argument("conv2d: output would be empty");

  const bool has_bias = b.defined();
  if (has_bias && (b.shape().size() != 1 || b.shape()[0] != d.f))
    throw std::invalid_argument("conv2d: bias shape mismatch");

  Tensor out({d.n, d.f, d.ho, d.wo});
  const std::int64_t ckk = d.ckk(), area = d.area_out();
#ifdef _OPENMP
#pragma omp parallel for if (d.n > 1)
#endif
  for (int s = 0; s < d.n; ++s) {
    std::vector<double> col(static_cast<std::size_t>(ckk * area));
    im2col(x.value().data.data(), d, s, col.data());
    CMapMat W(w.value().data.data(), d.f, ckk);
    CMapMat C(col.data(), ckk, area);
    MapMat O(out.data.data() + static_cast<std::int64_t>(s) * d.f * area, d.f, area);
    O.noalias() = W * C;
    if (has_bias) {
      const double* bp = b.value().data.data();
      for (int f = 0; f < d.f; ++f) {
        double* orow = out.data.data() + (static_cast<std::int64_t>(s) * d.f + f) * area;
        for (std::int64_t i = 0; i < area; ++i) orow[i] += bp[f];
      }
    }
  }

  auto nx = x.node(), nw = w.node();
  NodePtr nb = has_bias ? b.node() : nullptr;
  std::vector<NodePtr> parents{nx, nw};
  if (nb) parents.push_back(nb);
  return make_op(std::move(out), std::move(parents), [nx, nw, nb, d, ckk, area](Node& nd) {
    const bool need_x = nx->requires_grad;
    const bool need_w = nw->requires_grad;
    const bool need_b = nb && nb->requires_grad;
    // Per-sample weight-gradient buffers summed in sample order keeps the
    // result independent of the thread count.
    std::vector<std::vector<double>> wg;
    if (need_w) wg.assign(static_cast<std::size_t>(d.n), std::vector<double>(static_cast<std::size_t>(d.f * ckk), 0.0));
    if (need_x) nx->ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for if (d.n > 1)
#endif
    for (int s = 0; s < d.n; ++s) {
      CMapMat G(nd.grad.data.data() + static_cast<std::int64_t>(s) * d.f * area, d.f, area);
      if (need_w) {
        std::vector<double> col(static_cast<std::size_t>(ckk * area));
        im2col(nx->value.data.data(), d, s, col.data());
        CMapMat C(col.data(), ckk, area);
        MapMat GW(wg[static_cast<std::size_t>(s)].data(), d.f, ckk);
        GW.noalias() = G * C.transpose();
      }
      if (need_x) {
        std::vector<double> gcol(static_cast<std::size_t>(ckk * area));
        CMapMat W(nw->value.data.data(), d.f, ckk);
        MapMat GC(gcol.data(), ckk, area);
        GC.noalias() = W.transpose() * G;
        col2im_add(gcol.data(), d, s, nx->grad.data.data());
      }
    }
    if (need_w) {
      Tensor& g = nw->ensure_grad();
      for (int s = 0; s < d.n; ++s) {
        const double* src = wg[static_cast<std::size_t>(s)].data();
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(d.f) * ckk; ++i) g.data[i] += src[i];
      }
    }
    if (need_b) {
      Tensor& g = nb->ensure_grad();
      for (int s = 0; s < d.n; ++s)
        for (int f = 0; f < d.f; ++f) {
          const double* grow = nd.grad.data.data() + (static_cast<std::int64_t>(s) * d.f + f) * area;
          double acc = 0.0;
          for (std::int64_t i = 0; i < area; ++i) acc += grow[i];
          g.data[f] += acc;
        }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1])
    throw std::invalid_argument("linear: incompatible shapes");
  int n = sx[0], ci = sx[1], co = sw[0];
  const bool has_bias = b.defined();
  Tensor out({n, co});
  CMapMat X(x.value().data.data(), n, ci);
  CMapMat W(w.value().data.data(), co, ci);
  MapMat O(out.data.data(), n, co);
  O.noalias() = X * W.transpose();
  if (has_bias) {
    const double* bp = b.value().data.data();
    for (int s = 0; s < n; ++s)
      for (int j = 0; j < co; ++j) out.data[static_cast<std::int64_t>(s) * co + j] += bp[j];
  }
  auto nx = x.node(), nw = w.node();
  NodePtr nb = has_bias ? b.node() : nullptr;
  std::vector<NodePtr> parents{nx, nw};
  if (nb) parents.push_back(nb);
  return make_op(std::move(out), std::move(parents), [nx, nw, nb, n, ci, co](Node& nd) {
    CMapMat G(nd.grad.data.data(), n, co);
    if (nx->requires_grad) {
      Tensor& g = nx->ensure_grad();
      CMapMat W(nw->value.data.data(), co, ci);
      MapMat GX(g.data.data(), n, ci);
      GX.noalias() += G * W;
    }
    if (nw->requires_grad) {
      Tensor& g = nw->ensure_grad();
      CMapMat X(nx->value.data.data(), n, ci);
      MapMat GW(g.data.data(), co, ci);
      GW.noalias() += G.transpose() * X;
    }
    if (nb && nb->requires_grad) {
      Tensor& g = nb->ensure_grad();
      for (int s = 0; s < n; ++s)
        for (int j = 0; j < co; ++j) g.data[j] += nd.grad.data[static_cast<std::int64_t>(s) * co + j];
    }
  });
}

Var global_avg_pool(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("global_avg_pool: expects NCHW");
  int n = s[0], c = s[1];
  const std::int64_t area = static_cast<std::int64_t>(s[2]) * s[3];
  Tensor out({n, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = x.value().data.data() + (static_cast<std::int64_t>(b) * c + ch) * area;
      double acc = 0.0;
      for (std::int64_t i = 0; i < area; ++i) acc += src[i];
      out.data[static_cast<std::int64_t>(b) * c + ch] = acc / static_cast<double>(area);
    }
  auto nx = x.node();
  return make_op(std::move(out), {nx}, [nx, n, c, area](Node& nd) {
    if (!nx->requires_grad) return;
    Tensor& g = nx->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        double gv = nd.grad.data[static_cast<std::int64_t>(b) * c + ch] / static_cast<double>(area);
        double* dst = g.data.data() + (static_cast<std::int64_t>(b) * c + ch) * area;
        for (std::int64_t i = 0; i < area; ++i) dst[i] += gv;
      }
  });
}

Var channel_scale(const Var& x, const Var& g) {
  const auto& sx = x.shape();
  const auto& sg = g.shape();
  if (sx.size() != 4 || sg.size() != 2 || sg[0] != sx[0] || sg[1] != sx[1])
    throw std::invalid_argument("channel_scale: expects NCHW and (N,C)");
  int n = sx[0], c = sx[1];
  const std::int64_t area = static_cast<std::int64_t>(sx[2]) * sx[3];
  Tensor out(sx);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      double s = g.value().data[static_cast<std::int64_t>(b) * c + ch];
      const double* src = x.value().data.data() + (static_cast<std::int64_t>(b) * c + ch) * area;
      double* dst = out.data.data() + (static_cast<std::int64_t>(b) * c + ch) * area;
      for (std::int64_t i = 0; i < area; ++i) dst[i] = src[i] * s;
    }
  auto nx = x.node(), ng = g.node();
  return make_op(std::move(out), {nx, ng}, [nx, ng, n, c, area](Node& nd) {
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        const std::int64_t off = (static_cast<std::int64_t>(b) * c + ch) * area;
        const double* dy = nd.grad.data.data() + off;
        if (nx->requires_grad) {
          Tensor& gx = nx->ensure_grad();
          double s = ng->value.data[static_cast<std::int64_t>(b) * c + ch];
          double* dst = gx.data.data() + off;
          for (std::int64_t i = 0; i < area; ++i) dst[i] += dy[i] * s;
        }
        if (ng->requires_grad) {
          Tensor& gg = ng->ensure_grad();
          const double* xv = nx->value.data.data() + off;
          double acc = 0.0;
          for (std::int64_t i = 0; i < area; ++i) acc += dy[i] * xv[i];
          gg.data[static_cast<std::int64_t>(b) * c + ch] += acc;
        }
      }
  });
}

BatchNormOut batch_norm(const Var& x, const Var& gamma, const Var& beta, const Tensor& run_mean,
                        const Tensor& run_var, bool training, double eps) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("batch_norm: expects NCHW");
  int n = s[0], c = s[1];
  const std::int64_t area = static_cast<std::int64_t>(s[2]) * s[3];
  const std::int64_t cnt = static_cast<std::int64_t>(n) * area;
  if (gamma.shape() != std::vector<int>{c} || beta.shape() != std::vector<int>{c})
    throw std::invalid_argument("batch_norm: affine shape mismatch");

  Tensor mean_t({c}), var_t({c});
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* src = x.value().data.data() + (static_cast<std::int64_t>(b) * c + ch) * area;
        for (std::int64_t i = 0; i < area; ++i) acc += src[i];
      }
      mean_t.data[ch] = acc / static_cast<double>(cnt);
    }
    for (int ch = 0; ch < c; ++ch) {
      double m = mean_t.data[ch], acc = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* src = x.value().data.data() + (static_cast<std::int64_t>(b) * c + ch) * area;
        for (std::int64_t i = 0; i < area; ++i) {
          double d = src[i] - m;
          acc += d * d;
        }
      }
      var_t.data[ch] = acc / static_cast<double>(cnt);
    }
  } else {
    mean_t = run_mean;
    var_t = run_var;
  }

  Tensor inv_std({c});
  for (int ch = 0; ch < c; ++ch) inv_std.data[ch] = 1.0 / std::sqrt(var_t.data[ch] + eps);

  Tensor out(s);
  auto xhat = std::make_shared<Tensor>(s);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t off = (static_cast<std::int64_t>(b) * c + ch) * area;
      const double* src = x.value().data.data() + off;
      double* xh = xhat->data.data() + off;
      double* dst = out.data.data() + off;
      const double m = mean_t.data[ch], is = inv_std.data[ch];
      const double gmv = gamma.value().data[ch], bv = beta.value().data[ch];
      for (std::int64_t i = 0; i < area; ++i) {
        xh[i] = (src[i] - m) * is;
        dst[i] = gmv * xh[i] + bv;
      }
    }

  auto nx = x.node(), ngm = gamma.node(), nbt = beta.node();
  auto istd = std::make_shared<Tensor>(inv_std);
  Var y = make_op(std::move(out), {nx, ngm, nbt}, [nx, ngm, nbt, xhat, istd, n, c, area, cnt, training](Node& nd) {
    for (int ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (int b = 0; b < n; ++b) {
        const std::int64_t off = (static_cast<std::int64_t>(b) * c + ch) * area;
        const double* dy = nd.grad.data.data() + off;
        const double* xh = xhat->data.data() + off;
        for (std::int64_t i = 0; i < area; ++i) {
          sum_dy += dy[i];
          sum_dy_xh += dy[i] * xh[i];
        }
      }
      if (ngm->requires_grad) ngm->ensure_grad().data[ch] += sum_dy_xh;
      if (nbt->requires_grad) nbt->ensure_grad().data[ch] += sum_dy;
      if (nx->requires_grad) {
        Tensor& gx = nx->ensure_grad();
        const double gmv = ngm->value.data[ch], is = istd->data[ch];
        const double mean_dy = sum_dy / static_cast<double>(cnt);
        const double mean_dy_xh = sum_dy_xh / static_cast<double>(cnt);
        for (int b = 0; b < n; ++b) {
          const std::int64_t off = (static_cast<std::int64_t>(b) * c + ch) * area;
          const double* dy = nd.grad.data.data() + off;
          const double* xh = xhat->data.data() + off;
          double* dst = gx.data.data() + off;
          if (training) {
            for (std::int64_t i = 0; i < area; ++i)
              dst[i] += gmv * is * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
          } else {
            for (std::int64_t i = 0; i < area; ++i) dst[i] += gmv * is * dy[i];
          }
        }
      }
    }
  });
  BatchNormOut r;
  r.y = y;
  if (training) {
    r.batch_mean = mean_t;
    r.batch_var = var_t;
  }
  return r;
}

}  // namespace fccdn::ops
