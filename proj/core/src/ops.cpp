#include "diffmap/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "diffmap/errors.hpp"

namespace diffmap::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void require_rank(const Var& x, int rank, const char* what) {
  if (x.value().rank() != rank) {
    throw ContractError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(x.shape()));
  }
}

void require_same(const Var& a, const Var& b, const char* what) {
  require_same_shape(a.value(), b.value(), what);
}

template <class F>
Tensor map_values(const Tensor& x, F&& f) {
  Tensor out(x.shape());
  const double* src = x.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < x.numel(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(a.value() + b.value(), {a, b}, [na, nb](const Tensor& g) {
    if (na->requires_grad) na->accumulate(g);
    if (nb->requires_grad) nb->accumulate(g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(a.value() - b.value(), {a, b}, [na, nb](const Tensor& g) {
    if (na->requires_grad) na->accumulate(g);
    if (nb->requires_grad) nb->accumulate(g * -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(std::move(out), {a, b}, [na, nb](const Tensor& g) {
    if (na->requires_grad) {
      Tensor ga(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * nb->value[i];
      na->accumulate(std::move(ga));
    }
    if (nb->requires_grad) {
      Tensor gb(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * na->value[i];
      nb->accumulate(std::move(gb));
    }
  });
}

Var scale(const Var& a, double s) {
  Node* na = a.node();
  return make_result(a.value() * s, {a}, [na, s](const Tensor& g) { na->accumulate(g * s); });
}

Var add_scalar(const Var& a, double s) {
  Node* na = a.node();
  return make_result(map_values(a.value(), [s](double v) { return v + s; }), {a},
                     [na](const Tensor& g) { na->accumulate(g); });
}

Var detach(const Var& a) { return Var(a.value(), false); }

Var relu(const Var& x) {
  Node* nx = x.node();
  return make_result(map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }), {x},
                     [nx](const Tensor& g) {
                       Tensor gx(g.shape());
                       for (std::size_t i = 0; i < g.numel(); ++i) gx[i] = nx->value[i] > 0.0 ? g[i] : 0.0;
                       nx->accumulate(std::move(gx));
                     });
}

Var silu(const Var& x) {
  Node* nx = x.node();
  return make_result(map_values(x.value(), [](double v) { return v / (1.0 + std::exp(-v)); }), {x},
                     [nx](const Tensor& g) {
                       Tensor gx(g.shape());
                       for (std::size_t i = 0; i < g.numel(); ++i) {
                         const double v = nx->value[i];
                         const double s = 1.0 / (1.0 + std::exp(-v));
                         gx[i] = g[i] * s * (1.0 + v * (1.0 - s));
                       }
                       nx->accumulate(std::move(gx));
                     });
}

Var sigmoid(const Var& x) {
  Tensor out = map_values(x.value(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  Node* nx = x.node();
  auto y = std::make_shared<Tensor>(out);
  return make_result(std::move(out), {x}, [nx, y](const Tensor& g) {
    Tensor gx(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] = g[i] * (*y)[i] * (1.0 - (*y)[i]);
    nx->accumulate(std::move(gx));
  });
}

Var sum(const Var& x) {
  Node* nx = x.node();
  return make_result(Tensor({1}, x.value().sum()), {x},
                     [nx](const Tensor& g) { nx->accumulate(Tensor(nx->value.shape(), g[0])); });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().numel());
  Node* nx = x.node();
  return make_result(Tensor({1}, x.value().sum() / n), {x},
                     [nx, n](const Tensor& g) { nx->accumulate(Tensor(nx->value.shape(), g[0] / n)); });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw ContractError("weighted_sum: terms/weights size mismatch");
  double total = 0.0;
  std::vector<Node*> nodes;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().numel() != 1) throw ContractError("weighted_sum: terms must be scalars");
    total += weights[i] * terms[i].value()[0];
    nodes.push_back(terms[i].node());
  }
  return make_result(Tensor({1}, total), terms, [nodes, weights](const Tensor& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) nodes[i]->accumulate(Tensor({1}, g[0] * weights[i]));
    }
  });
}

Var modulate(const Var& x, const Var& scale, const Var& shift) {
  require_rank(x, 4, "modulate");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (scale.shape() != Shape{n, c} || shift.shape() != Shape{n, c}) {
    throw ContractError("modulate: scale/shift must be [N,C]");
  }
  Tensor out(x.shape());
  for (int i = 0; i < n * c; ++i) {
    const double a = 1.0 + scale.value()[i], b = shift.value()[i];
    const double* src = x.value().data() + static_cast<std::size_t>(i) * hw;
    double* dst = out.data() + static_cast<std::size_t>(i) * hw;
    for (int p = 0; p < hw; ++p) dst[p] = src[p] * a + b;
  }
  Node *nx = x.node(), *ns = scale.node(), *nb = shift.node();
  return make_result(std::move(out), {x, scale, shift}, [nx, ns, nb, n, c, hw](const Tensor& g) {
    Tensor gx(nx->value.shape()), gs({n, c}), gb({n, c});
    for (int i = 0; i < n * c; ++i) {
      const double a = 1.0 + ns->value[i];
      const double* gi = g.data() + static_cast<std::size_t>(i) * hw;
      const double* xi = nx->value.data() + static_cast<std::size_t>(i) * hw;
      double* gxi = gx.data() + static_cast<std::size_t>(i) * hw;
      double ds = 0.0, db = 0.0;
      for (int p = 0; p < hw; ++p) {
        gxi[p] = gi[p] * a;
        ds += gi[p] * xi[p];
        db += gi[p];
      }
      gs[i] = ds;
      gb[i] = db;
    }
    if (nx->requires_grad) nx->accumulate(std::move(gx));
    if (ns->requires_grad) ns->accumulate(std::move(gs));
    if (nb->requires_grad) nb->accumulate(std::move(gb));
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  const int n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.shape() != Shape{out_dim, in} || bias.shape() != Shape{out_dim}) {
    throw ContractError("linear: weight/bias shape mismatch for input " + shape_str(x.shape()));
  }
  Tensor out({n, out_dim});
  MatMap(out.data(), n, out_dim).noalias() =
      ConstMatMap(x.value().data(), n, in) * ConstMatMap(weight.value().data(), out_dim, in).transpose();
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out_dim; ++o) out[static_cast<std::size_t>(i) * out_dim + o] += bias.value()[o];
  Node *nx = x.node(), *nw = weight.node(), *nb = bias.node();
  return make_result(std::move(out), {x, weight, bias}, [nx, nw, nb, n, in, out_dim](const Tensor& g) {
    ConstMatMap gm(g.data(), n, out_dim);
    if (nx->requires_grad) {
      Tensor gx({n, in});
      MatMap(gx.data(), n, in).noalias() = gm * ConstMatMap(nw->value.data(), out_dim, in);
      nx->accumulate(std::move(gx));
    }
    if (nw->requires_grad) {
      Tensor gw({out_dim, in});
      MatMap(gw.data(), out_dim, in).noalias() = gm.transpose() * ConstMatMap(nx->value.data(), n, in);
      nw->accumulate(std::move(gw));
    }
    if (nb->requires_grad) {
      Tensor gb({out_dim});
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < out_dim; ++o) gb[o] += g[static_cast<std::size_t>(i) * out_dim + o];
      nb->accumulate(std::move(gb));
    }
  });
}

namespace {

struct ConvGeom {
  int channels, height, width, kernel, stride, padding, out_h, out_w;
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h * out_w; }
};

// Doubles in one unfolded column band (about 1 MB).
constexpr int kColumnBudget = 1 << 17;

// Output columns [lo, hi) whose input column ow * stride - padding + kj is in range.
std::pair<int, int> valid_cols(const ConvGeom& g, int kj) {
  const int shift = g.padding - kj;
  const int lo = shift > 0 ? (shift + g.stride - 1) / g.stride : 0;
  const int hi = std::min(g.out_w, (g.width - 1 + shift) / g.stride + 1);
  return {lo, std::max(lo, hi)};
}

// Column matrix of output rows [oh0, oh1): rows() x ((oh1 - oh0) * out_w).
void im2col(const double* img, const ConvGeom& g, int oh0, int oh1, double* col) {
  const std::size_t band = static_cast<std::size_t>(oh1 - oh0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        double* row = col + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * band;
        const auto [lo, hi] = valid_cols(g, kj);
        for (int oh = oh0; oh < oh1; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          double* dst = row + static_cast<std::size_t>(oh - oh0) * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = img + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
          const int off = kj - g.padding;
          std::fill(dst, dst + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + lo + off, src + hi + off, dst + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride + off];
          }
          std::fill(dst + hi, dst + g.out_w, 0.0);
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeom& g, int oh0, int oh1, double* img) {
  const std::size_t band = static_cast<std::size_t>(oh1 - oh0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const double* row = col + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * band;
        const auto [lo, hi] = valid_cols(g, kj);
        for (int oh = oh0; oh < oh1; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          const double* src = row + static_cast<std::size_t>(oh - oh0) * g.out_w;
          double* dst = img + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
          const int off = kj - g.padding;
          for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride + off] += src[ow];
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int n = x.dim(0), in_c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int out_c = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != in_c || weight.dim(3) != k) {
    throw ContractError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                        shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out_c}) throw ContractError("conv2d: bias must be [O]");
  if (stride < 1 || padding < 0) throw ContractError("conv2d: invalid stride/padding");
  ConvGeom geom{in_c, h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1,
                (w + 2 * padding - k) / stride + 1};
  if (geom.out_h <= 0 || geom.out_w <= 0) throw ContractError("conv2d: kernel larger than padded input");
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);
  // Non-pointwise convs unfold a band of output rows at a time so the column
  // buffer stays cache-resident.
  const int band_rows = std::max(1, std::min(geom.out_h, kColumnBudget / std::max(1, geom.rows() * geom.out_w)));

  Tensor out({n, out_c, geom.out_h, geom.out_w});
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(geom.rows()) * band_rows * geom.out_w);
  ConstMatMap wm(weight.value().data(), out_c, geom.rows());
  for (int b = 0; b < n; ++b) {
    const double* img = x.value().data() + static_cast<std::size_t>(b) * in_c * h * w;
    MatMap om(out.data() + static_cast<std::size_t>(b) * out_c * geom.cols(), out_c, geom.cols());
    if (pointwise) {
      om.noalias() = wm * ConstMatMap(img, geom.rows(), geom.cols());
    } else {
      for (int oh0 = 0; oh0 < geom.out_h; oh0 += band_rows) {
        const int oh1 = std::min(geom.out_h, oh0 + band_rows);
        const int cols = (oh1 - oh0) * geom.out_w;
        im2col(img, geom, oh0, oh1, col.data());
        om.middleCols(static_cast<Eigen::Index>(oh0) * geom.out_w, cols).noalias() =
            wm * ConstMatMap(col.data(), geom.rows(), cols);
      }
    }
    if (has_bias) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data(), out_c);
  }

  Node *nx = x.node(), *nw = weight.node(), *nb = has_bias ? bias.node() : nullptr;
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs),
                     [nx, nw, nb, geom, n, out_c, pointwise, band_rows](const Tensor& g) {
    const std::size_t img_size = static_cast<std::size_t>(geom.channels) * geom.height * geom.width;
    const std::size_t out_size = static_cast<std::size_t>(out_c) * geom.cols();
    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(geom.rows()) * band_rows * geom.out_w);
    std::vector<double> dcol(col.size());
    Tensor gw = nw->requires_grad ? Tensor(nw->value.shape()) : Tensor();
    Tensor gx = nx->requires_grad ? Tensor(nx->value.shape()) : Tensor();
    ConstMatMap wm(nw->value.data(), out_c, geom.rows());
    for (int b = 0; b < n; ++b) {
      ConstMatMap gm(g.data() + b * out_size, out_c, geom.cols());
      const double* img = nx->value.data() + b * img_size;
      if (pointwise) {
        if (nw->requires_grad)
          MatMap(gw.data(), out_c, geom.rows()).noalias() +=
              gm * ConstMatMap(img, geom.rows(), geom.cols()).transpose();
        if (nx->requires_grad)
          MatMap(gx.data() + b * img_size, geom.rows(), geom.cols()).noalias() = wm.transpose() * gm;
        continue;
      }
      for (int oh0 = 0; oh0 < geom.out_h; oh0 += band_rows) {
        const int oh1 = std::min(geom.out_h, oh0 + band_rows);
        const int cols = (oh1 - oh0) * geom.out_w;
        const auto gband = gm.middleCols(static_cast<Eigen::Index>(oh0) * geom.out_w, cols);
        if (nw->requires_grad) {
          im2col(img, geom, oh0, oh1, col.data());
          MatMap(gw.data(), out_c, geom.rows()).noalias() +=
              gband * ConstMatMap(col.data(), geom.rows(), cols).transpose();
        }
        if (nx->requires_grad) {
          MatMap(dcol.data(), geom.rows(), cols).noalias() = wm.transpose() * gband;
          col2im(dcol.data(), geom, oh0, oh1, gx.data() + b * img_size);
        }
      }
    }
    if (nw->requires_grad) nw->accumulate(std::move(gw));
    if (nx->requires_grad) nx->accumulate(std::move(gx));
    if (nb && nb->requires_grad) {
      Tensor gb({out_c});
      for (int b = 0; b < n; ++b)
        for (int o = 0; o < out_c; ++o) {
          const double* gp = g.data() + b * out_size + static_cast<std::size_t>(o) * geom.cols();
          double s = 0.0;
          for (int p = 0; p < geom.cols(); ++p) s += gp[p];
          gb[o] += s;
        }
      nb->accumulate(std::move(gb));
    }
  });
}

Var upsample_nearest(const Var& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h * factor, ow = w * factor;
  Tensor out({n, c, oh, ow});
  for (int p = 0; p < n * c; ++p) {
    const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) dst[i * ow + j] = src[(i / factor) * w + j / factor];
  }
  Node* nx = x.node();
  return make_result(std::move(out), {x}, [nx, n, c, h, w, factor](const Tensor& g) {
    const int oh = h * factor, ow = w * factor;
    Tensor gx({n, c, h, w});
    for (int p = 0; p < n * c; ++p) {
      const double* src = g.data() + static_cast<std::size_t>(p) * oh * ow;
      double* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) dst[(i / factor) * w + j / factor] += src[i * ow + j];
    }
    nx->accumulate(std::move(gx));
  });
}

Var avg_pool(const Var& x, int factor) {
  require_rank(x, 4, "avg_pool");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw ContractError("avg_pool: factor " + std::to_string(factor) + " must divide " + shape_str(x.shape()));
  }
  const int oh = h / factor, ow = w / factor;
  const double inv = 1.0 / (factor * factor);
  Tensor out({n, c, oh, ow});
  for (int p = 0; p < n * c; ++p) {
    const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) dst[(i / factor) * ow + j / factor] += src[i * w + j];
    for (int q = 0; q < oh * ow; ++q) dst[q] *= inv;
  }
  Node* nx = x.node();
  return make_result(std::move(out), {x}, [nx, n, c, h, w, factor, inv](const Tensor& g) {
    const int oh = h / factor, ow = w / factor;
    Tensor gx({n, c, h, w});
    for (int p = 0; p < n * c; ++p) {
      const double* src = g.data() + static_cast<std::size_t>(p) * oh * ow;
      double* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) dst[i * w + j] = src[(i / factor) * ow + j / factor] * inv;
    }
    nx->accumulate(std::move(gx));
  });
}

Var gather_pixels(const Var& x, const std::vector<std::size_t>& pixels) {
  require_rank(x, 4, "gather_pixels");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int count = static_cast<int>(pixels.size());
  for (std::size_t p : pixels)
    if (p >= n * hw) throw ContractError("gather_pixels: index out of range for " + shape_str(x.shape()));
  Tensor out({1, c, count, 1});
  const double* src = x.value().data();
  for (int i = 0; i < count; ++i) {
    const std::size_t b = pixels[i] / hw, q = pixels[i] % hw;
    for (int ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(ch) * count + i] = src[(b * c + ch) * hw + q];
  }
  Node* nx = x.node();
  return make_result(std::move(out), {x}, [nx, pixels, c, hw, count](const Tensor& g) {
    Tensor gx(nx->value.shape());
    for (int i = 0; i < count; ++i) {
      const std::size_t b = pixels[i] / hw, q = pixels[i] % hw;
      for (int ch = 0; ch < c; ++ch) gx[(b * c + ch) * hw + q] += g[static_cast<std::size_t>(ch) * count + i];
    }
    nx->accumulate(std::move(gx));
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const int n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    require_rank(p, 4, "concat_channels");
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
      throw ContractError("concat_channels: spatial/batch mismatch " + shape_str(parts[0].shape()) + " vs " +
                          shape_str(p.shape()));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({n, total, h, w});
  for (int b = 0; b < n; ++b) {
    int offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const double* src = parts[i].value().data() + b * widths[i] * hw;
      std::copy(src, src + widths[i] * hw, out.data() + (b * total + offset) * hw);
      offset += widths[i];
    }
  }
  std::vector<Node*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result(std::move(out), parts, [nodes, widths, n, total, hw](const Tensor& g) {
    int offset = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) {
        Tensor gi(nodes[i]->value.shape());
        for (int b = 0; b < n; ++b) {
          const double* src = g.data() + (b * total + offset) * hw;
          std::copy(src, src + widths[i] * hw, gi.data() + b * widths[i] * hw);
        }
        nodes[i]->accumulate(std::move(gi));
      }
      offset += widths[i];
    }
  });
}

Var slice_channels(const Var& x, int begin, int end) {
  require_rank(x, 4, "slice_channels");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (begin < 0 || end > c || begin >= end) throw ContractError("slice_channels: invalid range");
  const int width = end - begin;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({n, width, h, w});
  for (int b = 0; b < n; ++b) {
    const double* src = x.value().data() + (b * c + begin) * hw;
    std::copy(src, src + width * hw, out.data() + b * width * hw);
  }
  Node* nx = x.node();
  return make_result(std::move(out), {x}, [nx, n, c, begin, width, hw](const Tensor& g) {
    Tensor gx(nx->value.shape());
    for (int b = 0; b < n; ++b) {
      const double* src = g.data() + b * width * hw;
      std::copy(src, src + width * hw, gx.data() + (b * c + begin) * hw);
    }
    nx->accumulate(std::move(gx));
  });
}

namespace {

// [N, A, B] -> [N, B, A]
Tensor transpose_last2(const Tensor& t, int n, int a, int b) {
  Tensor out({n, b, a});
  for (int i = 0; i < n; ++i) {
    MatMap(out.data() + static_cast<std::size_t>(i) * a * b, b, a) =
        ConstMatMap(t.data() + static_cast<std::size_t>(i) * a * b, a, b).transpose();
  }
  return out;
}

}  // namespace

Var to_tokens(const Var& x) {
  require_rank(x, 4, "to_tokens");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Node* nx = x.node();
  return make_result(transpose_last2(x.value(), n, c, hw), {x}, [nx, n, c, hw](const Tensor& g) {
    nx->accumulate(transpose_last2(g, n, hw, c).reshaped(nx->value.shape()));
  });
}

Var from_tokens(const Var& tokens, int height, int width) {
  require_rank(tokens, 3, "from_tokens");
  const int n = tokens.dim(0), l = tokens.dim(1), c = tokens.dim(2);
  if (l != height * width) throw ContractError("from_tokens: token count does not match spatial size");
  Node* nt = tokens.node();
  return make_result(transpose_last2(tokens.value(), n, l, c).reshaped({n, c, height, width}), {tokens},
                     [nt, n, l, c](const Tensor& g) { nt->accumulate(transpose_last2(g, n, c, l)); });
}

Var token_linear(const Var& tokens, const Var& weight, const Var& bias) {
  require_rank(tokens, 3, "token_linear");
  const int n = tokens.dim(0), l = tokens.dim(1), in = tokens.dim(2);
  Var flat = make_result(tokens.value().reshaped({n * l, in}), {tokens}, [nt = tokens.node()](const Tensor& g) {
    nt->accumulate(g.reshaped(nt->value.shape()));
  });
  Var y = linear(flat, weight, bias);
  const int out_dim = weight.dim(0);
  return make_result(y.value().reshaped({n, l, out_dim}), {y},
                     [ny = y.node()](const Tensor& g) { ny->accumulate(g.reshaped(ny->value.shape())); });
}

namespace {

void check_attention_shapes(const Tensor& q, const Tensor& k, int heads) {
  if (q.rank() != 3 || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw ContractError("attention: incompatible shapes " + shape_str(q.shape()) + " and " + shape_str(k.shape()));
  }
  if (heads < 1 || q.dim(2) % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide width " +
                      std::to_string(q.dim(2)));
  }
}

// probs[N, heads, L, S]
Tensor softmax_scores(const Tensor& q, const Tensor& k, int heads) {
  const int n = q.dim(0), l = q.dim(1), e = q.dim(2), s = k.dim(1), dh = e / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor probs({n, heads, l, s});
  for (int b = 0; b < n; ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      ConstStridedMap qh(q.data() + static_cast<std::size_t>(b) * l * e + hd * dh, l, dh, Eigen::OuterStride<>(e));
      ConstStridedMap kh(k.data() + static_cast<std::size_t>(b) * s * e + hd * dh, s, dh, Eigen::OuterStride<>(e));
      MatMap p(probs.data() + (static_cast<std::size_t>(b) * heads + hd) * l * s, l, s);
      p.noalias() = (qh * kh.transpose()) * inv_sqrt;
      for (int i = 0; i < l; ++i) {
        const double mx = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
      }
    }
  }
  return probs;
}

}  // namespace

Tensor attention_weights(const Tensor& q, const Tensor& k, int heads) {
  check_attention_shapes(q, k, heads);
  return softmax_scores(q, k, heads);
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  check_attention_shapes(q.value(), k.value(), heads);
  require_same(k, v, "attention key/value");
  const int n = q.dim(0), l = q.dim(1), e = q.dim(2), s = k.dim(1), dh = e / heads;
  auto probs = std::make_shared<Tensor>(softmax_scores(q.value(), k.value(), heads));
  Tensor out({n, l, e});
  for (int b = 0; b < n; ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      ConstMatMap p(probs->data() + (static_cast<std::size_t>(b) * heads + hd) * l * s, l, s);
      ConstStridedMap vh(v.value().data() + static_cast<std::size_t>(b) * s * e + hd * dh, s, dh,
                         Eigen::OuterStride<>(e));
      StridedMap oh(out.data() + static_cast<std::size_t>(b) * l * e + hd * dh, l, dh, Eigen::OuterStride<>(e));
      oh.noalias() = p * vh;
    }
  }
  Node *nq = q.node(), *nk = k.node(), *nv = v.node();
  return make_result(std::move(out), {q, k, v}, [nq, nk, nv, probs, n, l, e, s, dh, heads](const Tensor& g) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor gq({n, l, e}), gk({n, s, e}), gv({n, s, e});
    RowMat dp(l, s);
    for (int b = 0; b < n; ++b) {
      for (int hd = 0; hd < heads; ++hd) {
        const std::size_t qoff = static_cast<std::size_t>(b) * l * e + hd * dh;
        const std::size_t koff = static_cast<std::size_t>(b) * s * e + hd * dh;
        ConstMatMap p(probs->data() + (static_cast<std::size_t>(b) * heads + hd) * l * s, l, s);
        ConstStridedMap go(g.data() + qoff, l, dh, Eigen::OuterStride<>(e));
        ConstStridedMap qh(nq->value.data() + qoff, l, dh, Eigen::OuterStride<>(e));
        ConstStridedMap kh(nk->value.data() + koff, s, dh, Eigen::OuterStride<>(e));
        ConstStridedMap vh(nv->value.data() + koff, s, dh, Eigen::OuterStride<>(e));
        StridedMap(gv.data() + koff, s, dh, Eigen::OuterStride<>(e)).noalias() = p.transpose() * go;
        dp.noalias() = go * vh.transpose();
        for (int i = 0; i < l; ++i) {
          const double dot = dp.row(i).dot(p.row(i));
          dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
        }
        dp *= inv_sqrt;
        StridedMap(gq.data() + qoff, l, dh, Eigen::OuterStride<>(e)).noalias() = dp * kh;
        StridedMap(gk.data() + koff, s, dh, Eigen::OuterStride<>(e)).noalias() = dp.transpose() * qh;
      }
    }
    if (nq->requires_grad) nq->accumulate(std::move(gq));
    if (nk->requires_grad) nk->accumulate(std::move(gk));
    if (nv->requires_grad) nv->accumulate(std::move(gv));
  });
}

Var mse(const Var& a, const Var& b) {
  require_same(a, b, "mse");
  const double n = static_cast<double>(a.value().numel());
  double total = 0.0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    total += d * d;
  }
  Node *na = a.node(), *nb = b.node();
  return make_result(Tensor({1}, total / n), {a, b}, [na, nb, n](const Tensor& g) {
    Tensor ga(na->value.shape());
    const double c = 2.0 * g[0] / n;
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = c * (na->value[i] - nb->value[i]);
    if (nb->requires_grad) nb->accumulate(ga * -1.0);
    if (na->requires_grad) na->accumulate(std::move(ga));
  });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  require_same_shape(logits.value(), targets, "bce_with_logits");
  const double n = static_cast<double>(targets.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < targets.numel(); ++i) {
    const double x = logits.value()[i], y = targets[i];
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Node* nl = logits.node();
  auto tgt = std::make_shared<Tensor>(targets);
  return make_result(Tensor({1}, total / n), {logits}, [nl, tgt, n](const Tensor& g) {
    Tensor gl(nl->value.shape());
    for (std::size_t i = 0; i < gl.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-nl->value[i]));
      gl[i] = g[0] * (s - (*tgt)[i]) / n;
    }
    nl->accumulate(std::move(gl));
  });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  require_rank(logits, 4, "softmax_cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  if (labels.size() != n * hw) throw ContractError("softmax_cross_entropy: label count mismatch");
  auto probs = std::make_shared<Tensor>(logits.shape());
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> z(k);
  for (int b = 0; b < n; ++b) {
    const double* base = logits.value().data() + static_cast<std::size_t>(b) * k * hw;
    double* pbase = probs->data() + static_cast<std::size_t>(b) * k * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -INFINITY;
      for (int c = 0; c < k; ++c) mx = std::max(mx, base[c * hw + p]);
      double denom = 0.0;
      for (int c = 0; c < k; ++c) {
        z[c] = std::exp(base[c * hw + p] - mx);
        denom += z[c];
      }
      for (int c = 0; c < k; ++c) pbase[c * hw + p] = z[c] / denom;
      const int label = labels[b * hw + p];
      if (label < 0) continue;
      if (label >= k) throw ContractError("softmax_cross_entropy: label out of range");
      total += -(base[label * hw + p] - mx - std::log(denom));
      ++count;
    }
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  Node* nl = logits.node();
  return make_result(Tensor({1}, total / denom), {logits}, [nl, probs, labels, n, k, hw, denom](const Tensor& g) {
    Tensor gl(nl->value.shape());
    const double c0 = g[0] / denom;
    for (int b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < hw; ++p) {
        const int label = labels[b * hw + p];
        if (label < 0) continue;
        for (int c = 0; c < k; ++c) {
          const std::size_t idx = (static_cast<std::size_t>(b) * k + c) * hw + p;
          gl[idx] = c0 * ((*probs)[idx] - (c == label ? 1.0 : 0.0));
        }
      }
    }
    nl->accumulate(std::move(gl));
  });
}

}  // namespace diffmap::ag
