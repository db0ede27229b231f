// Reverse-mode automatic differentiation over small dense tensors.
//
// A Graph is a tape of Nodes built by one forward pass; backward() walks the
// tape in reverse creation order. Ops are free functions returning Var
// handles. Everything is scalar-templated; gradient tests instantiate double,
// training instantiates float. All kernels are sequential and fixed-order, so
// results are bit-reproducible.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "elasto/fieldops.hpp"
#include "elasto/tensor.hpp"

namespace elasto {

// A named trainable tensor with a persistent gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>::zeros_like(value);
    grad.fill(T(0));
  }
};

// Creation-ordered parameter table; the order defines blob and moment layout.
template <typename T>
struct ParamRegistry {
  std::vector<Parameter<T>*> items;

  Parameter<T>* add(Parameter<T>* p) {
    items.push_back(p);
    return p;
  }
  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (auto* p : items) n += p->value.size();
    return n;
  }
};

namespace ad {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on demand during backward
  bool requires_grad = false;
  std::function<void(Node<T>&)> backfn;

  Tensor<T>& ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>::zeros_like(value);
    return grad;
  }
  bool has_grad() const { return grad.same_shape(value); }
};

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, Node<T>* n) : graph_(g), node_(n) {}

  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return node_ != nullptr; }
  Graph<T>* graph() const { return graph_; }
  Node<T>* node() const { return node_; }

  // scalar convenience
  T item() const { return node_->value[0]; }

 private:
  Graph<T>* graph_ = nullptr;
  Node<T>* node_ = nullptr;
};

template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return Var<T>(this, &n);
  }

  // Shared-weight semantics: the same Parameter maps to one node per graph.
  Var<T> param(Parameter<T>& p, bool trainable = true) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = leaf(p.value, trainable);
    param_nodes_[&p] = v.node();
    if (trainable) bound_params_.emplace_back(&p, v.node());
    return v;
  }

  Var<T> make(Tensor<T> value, std::vector<Node<T>*> parents, std::function<void(Node<T>&)> backfn) {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.value = std::move(value);
    for (auto* p : parents)
      if (p && p->requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backfn = std::move(backfn);
    return Var<T>(this, &n);
  }

  // Backpropagate from a scalar loss; accumulates into bound Parameter grads.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) throw_config("shape error: backward expects a scalar loss");
    loss.node()->ensure_grad().fill(T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = *it;
      if (n.requires_grad && n.has_grad() && n.backfn) n.backfn(n);
    }
    for (auto& [p, node] : bound_params_) {
      if (!node->has_grad()) continue;
      if (!p->grad.same_shape(p->value)) p->zero_grad();
      p->grad += node->grad;
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::deque<Node<T>> nodes_;
  std::map<Parameter<T>*, Node<T>*> param_nodes_;
  std::vector<std::pair<Parameter<T>*, Node<T>*>> bound_params_;
};

// gradient sink: null when the parent does not need gradients
template <typename T>
inline Tensor<T>* sink(Node<T>* p) {
  return (p && p->requires_grad) ? &p->ensure_grad() : nullptr;
}

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value())) throw_config("shape error: add shape mismatch");
  Tensor<T> out = a.value();
  out += b.value();
  Node<T>*pa = a.node(), *pb = b.node();
  return a.graph()->make(std::move(out), {pa, pb}, [pa, pb](Node<T>& self) {
    if (auto* g = sink(pa)) *g += self.grad;
    if (auto* g = sink(pb)) *g += self.grad;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value())) throw_config("shape error: sub shape mismatch");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return a.graph()->make(std::move(out), {pa, pb}, [pa, pb](Node<T>& self) {
    if (auto* g = sink(pa)) *g += self.grad;
    if (auto* g = sink(pb))
      for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value())) throw_config("shape error: mul shape mismatch");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return a.graph()->make(std::move(out), {pa, pb}, [pa, pb](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pb->value[i];
    if (auto* g = sink(pb))
      for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pa->value[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
  Tensor<T> out = a.value();
  out *= static_cast<T>(s);
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa, s](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] += static_cast<T>(s) * self.grad[i];
  });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return scale(a, -1.0);
}

template <typename T>
Var<T> add_const(Var<T> a, double c) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += static_cast<T>(c);
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa](Node<T>& self) {
    if (auto* g = sink(pa)) *g += self.grad;
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> a, double slope = 0.1) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i)
    if (out[i] < T(0)) out[i] *= static_cast<T>(slope);
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa, slope](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i)
        (*g)[i] += self.grad[i] * (pa->value[i] > T(0) ? T(1) : static_cast<T>(slope));
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-out[i]));
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i) {
        const T y = self.value[i];
        (*g)[i] += self.grad[i] * y * (T(1) - y);
      }
  });
}

template <typename T>
Var<T> tanh_(Var<T> a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i) {
        const T y = self.value[i];
        (*g)[i] += self.grad[i] * (T(1) - y * y);
      }
  });
}

template <typename T>
Var<T> abs_(Var<T> a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::abs(out[i]);
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i) {
        const T x = pa->value[i];
        (*g)[i] += self.grad[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
      }
  });
}

// ---------------------------------------------------------------------------
// reductions and structure

template <typename T>
Var<T> sum_all(Var<T> a) {
  T acc = T(0);
  for (std::int64_t i = 0; i < a.value().size(); ++i) acc += a.value()[i];
  Tensor<T> out({1});
  out[0] = acc;
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

template <typename T>
Var<T> reshape(Var<T> a, std::vector<std::int64_t> new_shape) {
  Tensor<T> out = a.value().reshaped(std::move(new_shape));
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> concat_ch(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw_config("shape error: concat of nothing");
  const auto& first = xs[0].value();
  if (first.rank() != 3) throw_config("shape error: concat_ch expects [C,H,W]");
  std::int64_t c_total = 0;
  for (const auto& x : xs) {
    if (x.value().rank() != 3 || x.value().dim(1) != first.dim(1) || x.value().dim(2) != first.dim(2))
      throw_config("shape error: concat_ch spatial mismatch");
    c_total += x.value().dim(0);
  }
  Tensor<T> out({c_total, first.dim(1), first.dim(2)});
  std::vector<Node<T>*> parents;
  std::int64_t offset = 0;
  for (const auto& x : xs) {
    const auto& v = x.value();
    std::copy(v.data(), v.data() + v.size(), out.data() + offset);
    offset += v.size();
    parents.push_back(x.node());
  }
  return xs[0].graph()->make(std::move(out), parents, [parents](Node<T>& self) {
    std::int64_t off = 0;
    for (auto* p : parents) {
      const std::int64_t n = p->value.size();
      if (auto* g = sink(p))
        for (std::int64_t i = 0; i < n; ++i) (*g)[i] += self.grad[off + i];
      off += n;
    }
  });
}

template <typename T>
Var<T> slice_ch(Var<T> a, std::int64_t c0, std::int64_t len) {
  const auto& v = a.value();
  if (v.rank() != 3 || c0 < 0 || c0 + len > v.dim(0)) throw_config("shape error: slice_ch out of range");
  const std::int64_t plane = v.dim(1) * v.dim(2);
  Tensor<T> out({len, v.dim(1), v.dim(2)});
  std::copy(v.data() + c0 * plane, v.data() + (c0 + len) * plane, out.data());
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa, c0, plane, len](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t i = 0; i < len * plane; ++i) (*g)[c0 * plane + i] += self.grad[i];
  });
}

// crop rows/cols of a [H,W] or [C,H,W] grid
template <typename T>
Var<T> crop_hw(Var<T> a, std::int64_t r0, std::int64_t c0, std::int64_t nh, std::int64_t nw) {
  const auto& v = a.value();
  const bool chw = v.rank() == 3;
  if (!chw && v.rank() != 2) throw_config("shape error: crop_hw expects rank 2 or 3");
  const std::int64_t ch = chw ? v.dim(0) : 1;
  const std::int64_t h = v.dim(chw ? 1 : 0), w = v.dim(chw ? 2 : 1);
  if (r0 < 0 || c0 < 0 || r0 + nh > h || c0 + nw > w) throw_config("shape error: crop_hw out of range");
  Tensor<T> out(chw ? std::vector<std::int64_t>{ch, nh, nw} : std::vector<std::int64_t>{nh, nw});
  for (std::int64_t k = 0; k < ch; ++k)
    for (std::int64_t r = 0; r < nh; ++r)
      for (std::int64_t c = 0; c < nw; ++c)
        out[(k * nh + r) * nw + c] = v[(k * h + (r0 + r)) * w + (c0 + c)];
  Node<T>* pa = a.node();
  return a.graph()->make(std::move(out), {pa}, [pa, r0, c0, nh, nw, ch, h, w](Node<T>& self) {
    if (auto* g = sink(pa))
      for (std::int64_t k = 0; k < ch; ++k)
        for (std::int64_t r = 0; r < nh; ++r)
          for (std::int64_t c = 0; c < nw; ++c)
            (*g)[(k * h + (r0 + r)) * w + (c0 + c)] += self.grad[(k * nh + r) * nw + c];
  });
}

// ---------------------------------------------------------------------------
// dense linear algebra helpers (row-major GEMM via Eigen)

namespace detail {

template <typename T>
using CMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using MMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C = A[m,k] * B[k,n] (optionally accumulating)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
  CMap<T> A(a, m, k);
  CMap<T> B(b, k, n);
  MMap<T> C(c, m, n);
  if (acc)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C = A^T[m,k] * B[k,n] where A is stored [k,m]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
  CMap<T> A(a, k, m);
  CMap<T> B(b, k, n);
  MMap<T> C(c, m, n);
  if (acc)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

// C = A[m,k] * B^T[k,n] where B is stored [n,k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
  CMap<T> A(a, m, k);
  CMap<T> B(b, n, k);
  MMap<T> C(c, m, n);
  if (acc)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

template <typename T>
void im2col(const T* x, std::int64_t ci, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t ho, std::int64_t wo, T* col) {
  for (std::int64_t c = 0; c < ci; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
    const std::int64_t row = (c * kh + ki) * kw + kj;
    T* dst = col + row * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const std::int64_t iy = oy * stride + ki - pad;
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const std::int64_t ix = ox * stride + kj - pad;
        dst[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(c * h + iy) * w + ix] : T(0);
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, std::int64_t ci, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t ho, std::int64_t wo, T* gx) {
  for (std::int64_t c = 0; c < ci; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
    const std::int64_t row = (c * kh + ki) * kw + kj;
    const T* src = col + row * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const std::int64_t iy = oy * stride + ki - pad;
      if (iy < 0 || iy >= h) continue;
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const std::int64_t ix = ox * stride + kj - pad;
        if (ix >= 0 && ix < w) gx[(c * h + iy) * w + ix] += src[oy * wo + ox];
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// convolution ops

// x: [Ci,H,W], w: [Co,Ci,kh,kw], b: [Co] (optional, pass invalid Var)
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1, int pad = 0) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 4 || xv.dim(0) != wv.dim(1))
    throw_config("shape error: conv2d input/weight mismatch");
  const std::int64_t ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const std::int64_t co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw_config("shape error: conv2d output would be empty");

  auto col = std::make_shared<Tensor<T>>(std::vector<std::int64_t>{ci * kh * kw, ho * wo});
  detail::im2col(xv.data(), ci, h, wd, kh, kw, stride, pad, ho, wo, col->data());

  Tensor<T> out({co, ho, wo});
  detail::gemm_nn(wv.data(), col->data(), out.data(), co, ci * kh * kw, ho * wo, false);
  if (b.valid()) {
    if (b.value().size() != co) throw_config("shape error: conv2d bias size");
    for (std::int64_t o = 0; o < co; ++o) {
      const T bias = b.value()[o];
      T* plane = out.data() + o * ho * wo;
      for (std::int64_t i = 0; i < ho * wo; ++i) plane[i] += bias;
    }
  }

  Node<T>*px = x.node(), *pw = w.node(), *pb = b.valid() ? b.node() : nullptr;
  return x.graph()->make(std::move(out), {px, pw, pb},
                         [px, pw, pb, col, ci, h, wd, kh, kw, stride, pad, ho, wo, co](Node<T>& self) {
    const T* gout = self.grad.data();
    if (auto* gw = sink(pw))
      detail::gemm_nt(gout, col->data(), gw->data(), co, ho * wo, ci * kh * kw, true);
    if (pb)
      if (auto* gb = sink(pb))
        for (std::int64_t o = 0; o < co; ++o) {
          T acc = T(0);
          const T* plane = gout + o * ho * wo;
          for (std::int64_t i = 0; i < ho * wo; ++i) acc += plane[i];
          (*gb)[o] += acc;
        }
    if (auto* gx = sink(px)) {
      Tensor<T> gcol({ci * kh * kw, ho * wo});
      detail::gemm_tn(pw->value.data(), gout, gcol.data(), ci * kh * kw, co, ho * wo, false);
      detail::col2im_acc(gcol.data(), ci, h, wd, kh, kw, stride, pad, ho, wo, gx->data());
    }
  });
}

// learnable 2x upsampling: transposed conv, kernel 2, stride 2 (no overlap)
// x: [Ci,H,W], w: [Ci,Co,2,2], b: [Co] -> [Co,2H,2W]
template <typename T>
Var<T> conv_transpose2x2(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(0) != xv.dim(0) || wv.dim(2) != 2 || wv.dim(3) != 2)
    throw_config("shape error: conv_transpose2x2 input/weight mismatch");
  const std::int64_t ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), co = wv.dim(1);
  Tensor<T> out({co, 2 * h, 2 * wd});
  if (b.valid()) {
    if (b.value().size() != co) throw_config("shape error: conv_transpose2x2 bias size");
    for (std::int64_t o = 0; o < co; ++o)
      std::fill(out.data() + o * 4 * h * wd, out.data() + (o + 1) * 4 * h * wd, b.value()[o]);
  }
  for (std::int64_t c = 0; c < ci; ++c)
    for (std::int64_t o = 0; o < co; ++o) {
      const T* wq = wv.data() + (c * co + o) * 4;
      const T* xp = xv.data() + c * h * wd;
      T* op = out.data() + o * 4 * h * wd;
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t s = 0; s < wd; ++s) {
          const T xv_ = xp[r * wd + s];
          T* dst = op + (2 * r) * (2 * wd) + 2 * s;
          dst[0] += xv_ * wq[0];
          dst[1] += xv_ * wq[1];
          dst[2 * wd] += xv_ * wq[2];
          dst[2 * wd + 1] += xv_ * wq[3];
        }
    }

  Node<T>*px = x.node(), *pw = w.node(), *pb = b.valid() ? b.node() : nullptr;
  return x.graph()->make(std::move(out), {px, pw, pb}, [px, pw, pb, ci, co, h, wd](Node<T>& self) {
    const T* gout = self.grad.data();
    auto* gx = sink(px);
    auto* gw = sink(pw);
    for (std::int64_t c = 0; c < ci; ++c)
      for (std::int64_t o = 0; o < co; ++o) {
        const T* wq = pw->value.data() + (c * co + o) * 4;
        const T* xp = px->value.data() + c * h * wd;
        const T* gp = gout + o * 4 * h * wd;
        T gw0 = T(0), gw1 = T(0), gw2 = T(0), gw3 = T(0);
        for (std::int64_t r = 0; r < h; ++r)
          for (std::int64_t s = 0; s < wd; ++s) {
            const T* gq = gp + (2 * r) * (2 * wd) + 2 * s;
            if (gx)
              (*gx)[(c * h + r) * wd + s] += gq[0] * wq[0] + gq[1] * wq[1] + gq[2 * wd] * wq[2] + gq[2 * wd + 1] * wq[3];
            if (gw) {
              const T xv_ = xp[r * wd + s];
              gw0 += gq[0] * xv_;
              gw1 += gq[1] * xv_;
              gw2 += gq[2 * wd] * xv_;
              gw3 += gq[2 * wd + 1] * xv_;
            }
          }
        if (gw) {
          T* gwq = gw->data() + (c * co + o) * 4;
          gwq[0] += gw0;
          gwq[1] += gw1;
          gwq[2] += gw2;
          gwq[3] += gw3;
        }
      }
    if (pb)
      if (auto* gb = sink(pb))
        for (std::int64_t o = 0; o < co; ++o) {
          T acc = T(0);
          const T* gp = gout + o * 4 * h * wd;
          for (std::int64_t i = 0; i < 4 * h * wd; ++i) acc += gp[i];
          (*gb)[o] += acc;
        }
  });
}

// ---------------------------------------------------------------------------
// geometry ops (wrap the fieldops kernels)

template <typename T>
Var<T> resize_bilinear(Var<T> x, std::int64_t h2, std::int64_t w2) {
  const auto& v = x.value();
  const bool chw = v.rank() == 3;
  if (!chw && v.rank() != 2) throw_config("shape error: resize_bilinear expects rank 2 or 3");
  const std::int64_t ch = chw ? v.dim(0) : 1;
  const std::int64_t h = v.dim(chw ? 1 : 0), w = v.dim(chw ? 2 : 1);
  Tensor<T> out(chw ? std::vector<std::int64_t>{ch, h2, w2} : std::vector<std::int64_t>{h2, w2});
  fieldops::resize_forward(v.data(), ch, h, w, h2, w2, out.data());
  Node<T>* px = x.node();
  return x.graph()->make(std::move(out), {px}, [px, ch, h, w, h2, w2](Node<T>& self) {
    if (auto* gx = sink(px)) fieldops::resize_backward(ch, h, w, h2, w2, self.grad.data(), gx->data());
  });
}

// frame: [H,W] or [C,H,W]; dy, dx: [H,W]
template <typename T>
Var<T> warp(Var<T> frame, Var<T> dy, Var<T> dx) {
  const auto& fv = frame.value();
  const bool chw = fv.rank() == 3;
  if (!chw && fv.rank() != 2) throw_config("shape error: warp expects rank 2 or 3 frame");
  const std::int64_t ch = chw ? fv.dim(0) : 1;
  const std::int64_t h = fv.dim(chw ? 1 : 0), w = fv.dim(chw ? 2 : 1);
  if (dy.value().rank() != 2 || dy.value().dim(0) != h || dy.value().dim(1) != w ||
      !dy.value().same_shape(dx.value()))
    throw_config("shape error: warp displacement mismatch");
  Tensor<T> out = Tensor<T>::zeros_like(fv);
  fieldops::warp_forward(fv.data(), ch, h, w, dy.value().data(), dx.value().data(), out.data());
  Node<T>*pf = frame.node(), *py = dy.node(), *px = dx.node();
  return frame.graph()->make(std::move(out), {pf, py, px}, [pf, py, px, ch, h, w](Node<T>& self) {
    auto* gf = sink(pf);
    auto* gy = sink(py);
    auto* gx = sink(px);
    if (!gf && !gy && !gx) return;
    fieldops::warp_backward(pf->value.data(), ch, h, w, py->value.data(), px->value.data(),
                            self.grad.data(), gf ? gf->data() : nullptr,
                            gy ? gy->data() : nullptr, gx ? gx->data() : nullptr);
  });
}

// warp at factor-times refined resolution; factor 1 degenerates to warp()
template <typename T>
Var<T> warp_upsampled(Var<T> frame, Var<T> dy, Var<T> dx, int factor) {
  if (factor < 1) throw_config("parameter error: upsample factor must be >= 1");
  if (factor == 1) return warp(frame, dy, dx);
  const auto& fv = frame.value();
  const std::int64_t h = fv.dim(fv.rank() == 3 ? 1 : 0), w = fv.dim(fv.rank() == 3 ? 2 : 1);
  const std::int64_t h2 = factor * (h - 1) + 1, w2 = factor * (w - 1) + 1;
  Var<T> uf = resize_bilinear(frame, h2, w2);
  Var<T> udy = scale(resize_bilinear(dy, h2, w2), factor);
  Var<T> udx = scale(resize_bilinear(dx, h2, w2), factor);
  return resize_bilinear(warp(uf, udy, udx), h, w);
}

template <typename T>
Var<T> lsqse(Var<T> dy, int window) {
  const auto& v = dy.value();
  if (v.rank() != 2) throw_config("shape error: lsqse expects a 2-D grid");
  fieldops::lsqse_validate(window, v.dim(0));
  const std::int64_t h = v.dim(0), w = v.dim(1);
  Tensor<T> out({h, w});
  fieldops::lsqse_forward(v.data(), h, w, window, out.data());
  Node<T>* pd = dy.node();
  return dy.graph()->make(std::move(out), {pd}, [pd, h, w, window](Node<T>& self) {
    if (auto* g = sink(pd)) fieldops::lsqse_backward(h, w, window, self.grad.data(), g->data());
  });
}

// ---------------------------------------------------------------------------
// attention ops

// rows of a [N,M] matrix sum to one
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const auto& v = x.value();
  if (v.rank() != 2) throw_config("shape error: softmax_rows expects [N,M]");
  const std::int64_t n = v.dim(0), m = v.dim(1);
  Tensor<T> out({n, m});
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = v.data() + i * m;
    T mx = row[0];
    for (std::int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (std::int64_t j = 0; j < m; ++j) s += (out[i * m + j] = std::exp(row[j] - mx));
    const T inv = T(1) / s;
    for (std::int64_t j = 0; j < m; ++j) out[i * m + j] *= inv;
  }
  Node<T>* px = x.node();
  return x.graph()->make(std::move(out), {px}, [px, n, m](Node<T>& self) {
    if (auto* g = sink(px))
      for (std::int64_t i = 0; i < n; ++i) {
        const T* y = self.value.data() + i * m;
        const T* gy = self.grad.data() + i * m;
        T dot = T(0);
        for (std::int64_t j = 0; j < m; ++j) dot += gy[j] * y[j];
        T* gx = g->data() + i * m;
        for (std::int64_t j = 0; j < m; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
  });
}

// per-position distribution over channels of a [C,H,W] grid
template <typename T>
Var<T> softmax_channels(Var<T> x) {
  const auto& v = x.value();
  if (v.rank() != 3) throw_config("shape error: softmax_channels expects [C,H,W]");
  const std::int64_t c = v.dim(0), plane = v.dim(1) * v.dim(2);
  Tensor<T> out = Tensor<T>::zeros_like(v);
  for (std::int64_t i = 0; i < plane; ++i) {
    T mx = v[i];
    for (std::int64_t k = 1; k < c; ++k) mx = std::max(mx, v[k * plane + i]);
    T s = T(0);
    for (std::int64_t k = 0; k < c; ++k) s += (out[k * plane + i] = std::exp(v[k * plane + i] - mx));
    const T inv = T(1) / s;
    for (std::int64_t k = 0; k < c; ++k) out[k * plane + i] *= inv;
  }
  Node<T>* px = x.node();
  return x.graph()->make(std::move(out), {px}, [px, c, plane](Node<T>& self) {
    if (auto* g = sink(px))
      for (std::int64_t i = 0; i < plane; ++i) {
        T dot = T(0);
        for (std::int64_t k = 0; k < c; ++k) dot += self.grad[k * plane + i] * self.value[k * plane + i];
        for (std::int64_t k = 0; k < c; ++k) {
          const T y = self.value[k * plane + i];
          (*g)[k * plane + i] += y * (self.grad[k * plane + i] - dot);
        }
      }
  });
}

// scaled dot-product scores over spatial tokens: S(i,j) = s * <q(:,i), k(:,j)>
// q, k: [C,H,W] viewed as [C,N]; output [N,N]
template <typename T>
Var<T> attn_scores(Var<T> q, Var<T> k, double s) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  if (qv.rank() != 3 || !qv.same_shape(kv)) throw_config("shape error: attn_scores expects matching [C,H,W]");
  const std::int64_t c = qv.dim(0), n = qv.dim(1) * qv.dim(2);
  Tensor<T> out({n, n});
  detail::gemm_tn(qv.data(), kv.data(), out.data(), n, c, n, false);
  out *= static_cast<T>(s);
  Node<T>*pq = q.node(), *pk = k.node();
  return q.graph()->make(std::move(out), {pq, pk}, [pq, pk, c, n, s](Node<T>& self) {
    Tensor<T> gs = self.grad;
    gs *= static_cast<T>(s);
    if (auto* gq = sink(pq)) {
      // gQ += K * gS^T
      detail::gemm_nt(pk->value.data(), gs.data(), gq->data(), c, n, n, true);
    }
    if (auto* gk = sink(pk)) {
      // gK += Q * gS
      detail::gemm_nn(pq->value.data(), gs.data(), gk->data(), c, n, n, true);
    }
  });
}

// out(:,i) = sum_j A(i,j) * v(:,j); A: [N,N], v: [C,H,W]
template <typename T>
Var<T> attn_apply(Var<T> a, Var<T> v) {
  const auto& av = a.value();
  const auto& vv = v.value();
  const std::int64_t n = vv.dim(1) * vv.dim(2), c = vv.dim(0);
  if (av.rank() != 2 || av.dim(0) != n || av.dim(1) != n || vv.rank() != 3)
    throw_config("shape error: attn_apply shape mismatch");
  Tensor<T> out = Tensor<T>::zeros_like(vv);
  detail::gemm_nt(vv.data(), av.data(), out.data(), c, n, n, false);
  Node<T>*pa = a.node(), *pv = v.node();
  return a.graph()->make(std::move(out), {pa, pv}, [pa, pv, c, n](Node<T>& self) {
    if (auto* gv = sink(pv)) detail::gemm_nn(self.grad.data(), pa->value.data(), gv->data(), c, n, n, true);
    if (auto* ga = sink(pa)) detail::gemm_tn(self.grad.data(), pv->value.data(), ga->data(), n, c, n, true);
  });
}

// operator sugar
template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace ad
}  // namespace elasto
