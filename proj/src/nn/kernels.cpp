#include "pdlatent/nn/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>

#include "pdlatent/error.hpp"

namespace pdlatent::nn {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3d:
      return "conv3d";
    case LayerKind::ConvTranspose3d:
      return "convtranspose3d";
    case LayerKind::Linear:
      return "linear";
    case LayerKind::Relu:
      return "relu";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv3d") return LayerKind::Conv3d;
  if (s == "convtranspose3d") return LayerKind::ConvTranspose3d;
  if (s == "linear") return LayerKind::Linear;
  if (s == "relu") return LayerKind::Relu;
  throw FormatError("unknown layer kind '" + s + "'");
}

int conv_output_size(int n, int kernel, int stride, int padding) {
  return (n + 2 * padding - kernel) / stride + 1;
}

int conv_transpose_output_size(int n, int kernel, int stride, int padding, int output_padding) {
  return (n - 1) * stride - 2 * padding + kernel + output_padding;
}

void LayerSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ShapeError("layer channel counts must be >= 1");
  if (kernel < 1 || stride < 1) throw ShapeError("kernel and stride must be >= 1");
  if (padding < 0) throw ShapeError("padding must be >= 0");
  for (int op : output_padding) {
    if (op < 0 || (kind == LayerKind::ConvTranspose3d && op >= stride)) {
      throw ShapeError("output_padding must satisfy 0 <= output_padding < stride");
    }
    if (kind != LayerKind::ConvTranspose3d && op != 0) throw ShapeError("output_padding is for convtranspose3d only");
  }
}

Size3 LayerSpec::output_size(const Size3& in) const {
  Size3 out{};
  for (int a = 0; a < 3; ++a) {
    out[a] = kind == LayerKind::ConvTranspose3d
                 ? conv_transpose_output_size(in[a], kernel, stride, padding, output_padding[a])
                 : conv_output_size(in[a], kernel, stride, padding);
    if (out[a] < 1) throw ShapeError("layer produces an empty spatial axis");
  }
  return out;
}

Shape LayerSpec::weight_shape() const {
  switch (kind) {
    case LayerKind::Conv3d:
      return {out_channels, in_channels, kernel, kernel, kernel};
    case LayerKind::ConvTranspose3d:
      return {in_channels, out_channels, kernel, kernel, kernel};
    case LayerKind::Linear:
      return {in_channels, out_channels};
    case LayerKind::Relu:
      break;
  }
  return {};
}

int LayerSpec::fan_in() const {
  if (kind == LayerKind::Linear) return in_channels;
  return in_channels * kernel * kernel * kernel;
}

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

// Upper bound on im2col buffer elements; items are processed in chunks below it.
constexpr std::size_t kMaxColElems = std::size_t{1} << 25;

// Sliding-window geometry: `channels` planes of size `in` viewed through a k^3 window
// with stride s and padding p, producing `out` window positions per axis.
struct Geom {
  int channels;
  Size3 in;
  Size3 out;
  int k;
  int s;
  int p;

  std::size_t in_vox() const { return std::size_t(in[0]) * in[1] * in[2]; }
  std::size_t out_vox() const { return std::size_t(out[0]) * out[1] * out[2]; }
  std::size_t rows() const { return std::size_t(channels) * k * k * k; }
};

// col is rows x (items * out_vox); x holds `items` consecutive (channels, in) blocks.
template <typename T>
void im2col(const T* x, const Geom& g, int items, T* col) {
  const std::size_t cols = std::size_t(items) * g.out_vox();
  const std::size_t in_vox = g.in_vox();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    for (int kd = 0; kd < g.k; ++kd) {
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw, ++row) {
          T* dst_row = col + row * cols;
          for (int n = 0; n < items; ++n) {
            const T* src = x + (std::size_t(n) * g.channels + c) * in_vox;
            T* dst = dst_row + std::size_t(n) * g.out_vox();
            for (int od = 0; od < g.out[0]; ++od) {
              const int id = od * g.s - g.p + kd;
              for (int oh = 0; oh < g.out[1]; ++oh) {
                const int ih = oh * g.s - g.p + kh;
                T* d = dst + (std::size_t(od) * g.out[1] + oh) * g.out[2];
                if (id < 0 || id >= g.in[0] || ih < 0 || ih >= g.in[1]) {
                  std::fill(d, d + g.out[2], T{0});
                  continue;
                }
                const T* s = src + (std::size_t(id) * g.in[1] + ih) * g.in[2];
                for (int ow = 0; ow < g.out[2]; ++ow) {
                  const int iw = ow * g.s - g.p + kw;
                  d[ow] = (iw >= 0 && iw < g.in[2]) ? s[iw] : T{0};
                }
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds col back into x.
template <typename T>
void col2im(const T* col, const Geom& g, int items, T* x) {
  const std::size_t cols = std::size_t(items) * g.out_vox();
  const std::size_t in_vox = g.in_vox();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    for (int kd = 0; kd < g.k; ++kd) {
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw, ++row) {
          const T* src_row = col + row * cols;
          for (int n = 0; n < items; ++n) {
            T* dst = x + (std::size_t(n) * g.channels + c) * in_vox;
            const T* src = src_row + std::size_t(n) * g.out_vox();
            for (int od = 0; od < g.out[0]; ++od) {
              const int id = od * g.s - g.p + kd;
              if (id < 0 || id >= g.in[0]) continue;
              for (int oh = 0; oh < g.out[1]; ++oh) {
                const int ih = oh * g.s - g.p + kh;
                if (ih < 0 || ih >= g.in[1]) continue;
                const T* s = src + (std::size_t(od) * g.out[1] + oh) * g.out[2];
                T* d = dst + (std::size_t(id) * g.in[1] + ih) * g.in[2];
                for (int ow = 0; ow < g.out[2]; ++ow) {
                  const int iw = ow * g.s - g.p + kw;
                  if (iw >= 0 && iw < g.in[2]) d[iw] += s[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

// (items, C, V) block <-> (C, items * V) matrix.
template <typename T>
void items_to_channel_major(const T* src, int items, int channels, std::size_t vox, T* dst) {
  for (int n = 0; n < items; ++n)
    for (int c = 0; c < channels; ++c)
      std::copy_n(src + (std::size_t(n) * channels + c) * vox, vox, dst + std::size_t(c) * items * vox + n * vox);
}

template <typename T>
void channel_major_add_to_items(const T* src, int items, int channels, std::size_t vox, T* dst) {
  for (int n = 0; n < items; ++n)
    for (int c = 0; c < channels; ++c) {
      const T* s = src + std::size_t(c) * items * vox + n * vox;
      T* d = dst + (std::size_t(n) * channels + c) * vox;
      for (std::size_t i = 0; i < vox; ++i) d[i] += s[i];
    }
}

Size3 spatial(const Shape& s) { return {s[2], s[3], s[4]}; }

template <typename T>
void check_conv_input(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const LayerSpec& spec,
                      LayerKind kind) {
  if (spec.kind != kind) throw ShapeError(std::string("layer spec is not ") + to_string(kind));
  spec.validate();
  if (x.rank() != 5) throw ShapeError("conv input must be (N,C,D,H,W), got " + shape_string(x.shape()));
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError("conv input has " + std::to_string(x.dim(1)) + " channels, layer expects " +
                     std::to_string(spec.in_channels));
  }
  if (w.shape() != spec.weight_shape()) {
    throw ShapeError("weight shape " + shape_string(w.shape()) + " != " + shape_string(spec.weight_shape()));
  }
  if (b.size() != static_cast<std::size_t>(spec.out_channels)) throw ShapeError("bias length != out_channels");
}

int chunk_items(std::size_t per_item, int n) {
  const std::size_t m = std::max<std::size_t>(1, kMaxColElems / std::max<std::size_t>(1, per_item));
  return static_cast<int>(std::min<std::size_t>(m, static_cast<std::size_t>(n)));
}

}  // namespace

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const LayerSpec& spec) {
  check_conv_input(x, w, b, spec, LayerKind::Conv3d);
  const int n = x.dim(0);
  const Geom g{spec.in_channels, spatial(x.shape()), spec.output_size(spatial(x.shape())), spec.kernel, spec.stride,
               spec.padding};
  const int cout = spec.out_channels;
  Tensor<T> out({n, cout, g.out[0], g.out[1], g.out[2]});

  const int chunk = chunk_items(g.rows() * g.out_vox(), n);
  std::vector<T> col;
  MatR<T> res;
  CMapR<T> wm(w.ptr(), cout, static_cast<Eigen::Index>(g.rows()));
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int m = std::min(chunk, n - n0);
    const auto cols = static_cast<Eigen::Index>(std::size_t(m) * g.out_vox());
    col.resize(g.rows() * std::size_t(cols));
    im2col(x.ptr() + std::size_t(n0) * g.channels * g.in_vox(), g, m, col.data());
    res.noalias() = wm * CMapR<T>(col.data(), static_cast<Eigen::Index>(g.rows()), cols);
    for (int i = 0; i < m; ++i)
      for (int co = 0; co < cout; ++co) {
        T* dst = out.ptr() + (std::size_t(n0 + i) * cout + co) * g.out_vox();
        const T* src = res.data() + std::size_t(co) * cols + std::size_t(i) * g.out_vox();
        for (std::size_t v = 0; v < g.out_vox(); ++v) dst[v] = src[v] + b[co];
      }
  }
  return out;
}

template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, const LayerSpec& spec,
                     Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const int n = x.dim(0);
  const Geom g{spec.in_channels, spatial(x.shape()), spec.output_size(spatial(x.shape())), spec.kernel, spec.stride,
               spec.padding};
  const int cout = spec.out_channels;
  const auto rows = static_cast<Eigen::Index>(g.rows());
  CMapR<T> wm(w.ptr(), cout, rows);

  const int chunk = chunk_items(g.rows() * g.out_vox(), n);
  std::vector<T> col;
  std::vector<T> gmat;
  MatR<T> dcol;
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int m = std::min(chunk, n - n0);
    const auto cols = static_cast<Eigen::Index>(std::size_t(m) * g.out_vox());
    gmat.resize(std::size_t(cout) * cols);
    items_to_channel_major(grad_out.ptr() + std::size_t(n0) * cout * g.out_vox(), m, cout, g.out_vox(), gmat.data());
    CMapR<T> gm(gmat.data(), cout, cols);
    if (grad_b) {
      for (int co = 0; co < cout; ++co) {
        T acc{0};
        for (Eigen::Index j = 0; j < cols; ++j) acc += gm(co, j);
        (*grad_b)[co] += acc;
      }
    }
    if (grad_w) {
      col.resize(g.rows() * std::size_t(cols));
      im2col(x.ptr() + std::size_t(n0) * g.channels * g.in_vox(), g, m, col.data());
      MapR<T>(grad_w->ptr(), cout, rows).noalias() += gm * CMapR<T>(col.data(), rows, cols).transpose();
    }
    if (grad_x) {
      dcol.noalias() = wm.transpose() * gm;
      col2im(dcol.data(), g, m, grad_x->ptr() + std::size_t(n0) * g.channels * g.in_vox());
    }
  }
}

template <typename T>
Tensor<T> conv_transpose3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                                   const LayerSpec& spec) {
  check_conv_input(x, w, b, spec, LayerKind::ConvTranspose3d);
  const int n = x.dim(0);
  const int cin = spec.in_channels;
  const int cout = spec.out_channels;
  const Size3 in = spatial(x.shape());
  // The transposed conv is the adjoint of a conv from the output grid onto the input grid.
  const Geom g{cout, spec.output_size(in), in, spec.kernel, spec.stride, spec.padding};
  Tensor<T> out({n, cout, g.in[0], g.in[1], g.in[2]});

  const auto rows = static_cast<Eigen::Index>(g.rows());
  CMapR<T> wm(w.ptr(), cin, rows);
  const int chunk = chunk_items(g.rows() * g.out_vox(), n);
  std::vector<T> xmat;
  MatR<T> colt;
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int m = std::min(chunk, n - n0);
    const auto cols = static_cast<Eigen::Index>(std::size_t(m) * g.out_vox());
    xmat.resize(std::size_t(cin) * cols);
    items_to_channel_major(x.ptr() + std::size_t(n0) * cin * g.out_vox(), m, cin, g.out_vox(), xmat.data());
    colt.noalias() = wm.transpose() * CMapR<T>(xmat.data(), cin, cols);
    col2im(colt.data(), g, m, out.ptr() + std::size_t(n0) * cout * g.in_vox());
  }
  for (int i = 0; i < n; ++i)
    for (int co = 0; co < cout; ++co) {
      T* dst = out.ptr() + (std::size_t(i) * cout + co) * g.in_vox();
      for (std::size_t v = 0; v < g.in_vox(); ++v) dst[v] += b[co];
    }
  return out;
}

template <typename T>
void conv_transpose3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out,
                               const LayerSpec& spec, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const int n = x.dim(0);
  const int cin = spec.in_channels;
  const int cout = spec.out_channels;
  const Size3 in = spatial(x.shape());
  const Geom g{cout, spec.output_size(in), in, spec.kernel, spec.stride, spec.padding};
  const auto rows = static_cast<Eigen::Index>(g.rows());
  CMapR<T> wm(w.ptr(), cin, rows);

  if (grad_b) {
    for (int co = 0; co < cout; ++co) {
      T acc{0};
      for (int i = 0; i < n; ++i) {
        const T* src = grad_out.ptr() + (std::size_t(i) * cout + co) * g.in_vox();
        for (std::size_t v = 0; v < g.in_vox(); ++v) acc += src[v];
      }
      (*grad_b)[co] += acc;
    }
  }
  if (!grad_x && !grad_w) return;

  const int chunk = chunk_items(g.rows() * g.out_vox(), n);
  std::vector<T> dcol;
  std::vector<T> xmat;
  MatR<T> dxm;
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int m = std::min(chunk, n - n0);
    const auto cols = static_cast<Eigen::Index>(std::size_t(m) * g.out_vox());
    dcol.resize(g.rows() * std::size_t(cols));
    im2col(grad_out.ptr() + std::size_t(n0) * cout * g.in_vox(), g, m, dcol.data());
    CMapR<T> dc(dcol.data(), rows, cols);
    if (grad_x) {
      dxm.noalias() = wm * dc;
      channel_major_add_to_items(dxm.data(), m, cin, g.out_vox(), grad_x->ptr() + std::size_t(n0) * cin * g.out_vox());
    }
    if (grad_w) {
      xmat.resize(std::size_t(cin) * cols);
      items_to_channel_major(x.ptr() + std::size_t(n0) * cin * g.out_vox(), m, cin, g.out_vox(), xmat.data());
      MapR<T>(grad_w->ptr(), cin, rows).noalias() += CMapR<T>(xmat.data(), cin, cols) * dc.transpose();
    }
  }
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2) throw ShapeError("linear expects (N,F) input and (F,G) weights");
  if (x.dim(1) != w.dim(0)) {
    throw ShapeError("linear input width " + std::to_string(x.dim(1)) + " != weight rows " + std::to_string(w.dim(0)));
  }
  if (b.size() != static_cast<std::size_t>(w.dim(1))) throw ShapeError("linear bias length != output width");
  const int n = x.dim(0);
  const int f = x.dim(1);
  const int gdim = w.dim(1);
  Tensor<T> out({n, gdim});
  MapR<T> om(out.ptr(), n, gdim);
  om.noalias() = CMapR<T>(x.ptr(), n, f) * CMapR<T>(w.ptr(), f, gdim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < gdim; ++j) om(i, j) += b[j];
  return out;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, Tensor<T>* grad_x,
                     Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const int n = x.dim(0);
  const int f = x.dim(1);
  const int gdim = w.dim(1);
  CMapR<T> gm(grad_out.ptr(), n, gdim);
  if (grad_x) MapR<T>(grad_x->ptr(), n, f).noalias() += gm * CMapR<T>(w.ptr(), f, gdim).transpose();
  if (grad_w) MapR<T>(grad_w->ptr(), f, gdim).noalias() += CMapR<T>(x.ptr(), n, f).transpose() * gm;
  if (grad_b) {
    for (int j = 0; j < gdim; ++j) {
      T acc{0};
      for (int i = 0; i < n; ++i) acc += gm(i, j);
      (*grad_b)[j] += acc;
    }
  }
}

#define PDLATENT_INSTANTIATE_KERNELS(T)                                                                         \
  template Tensor<T> conv3d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LayerSpec&);    \
  template void conv3d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LayerSpec&,         \
                                Tensor<T>*, Tensor<T>*, Tensor<T>*);                                            \
  template Tensor<T> conv_transpose3d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                              const LayerSpec&);                                                \
  template void conv_transpose3d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                          const LayerSpec&, Tensor<T>*, Tensor<T>*, Tensor<T>*);                \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template void linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*, Tensor<T>*, \
                                Tensor<T>*);

PDLATENT_INSTANTIATE_KERNELS(float)
PDLATENT_INSTANTIATE_KERNELS(double)

}  // namespace pdlatent::nn
