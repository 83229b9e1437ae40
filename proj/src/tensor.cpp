#include "foal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "foal/errors.hpp"

namespace foal {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   std::vector<NodePtr> parents) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  node->parents = std::move(parents);
  return Tensor::wrap(std::move(node));
}

// Flat offsets into a and b for every element of the broadcast result.
struct BroadcastMap {
  Shape out;
  std::vector<std::size_t> a_off;
  std::vector<std::size_t> b_off;
};

BroadcastMap broadcast(const Shape& sa, const Shape& sb, const char* op) {
  const std::size_t r = std::max(sa.size(), sb.size());
  Shape pa(r - sa.size(), 1), pb(r - sb.size(), 1);
  pa.insert(pa.end(), sa.begin(), sa.end());
  pb.insert(pb.end(), sb.begin(), sb.end());
  BroadcastMap m;
  m.out.resize(r);
  for (std::size_t d = 0; d < r; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(sa) + " with " +
                       shape_str(sb));
    }
    m.out[d] = std::max(pa[d], pb[d]);
  }
  std::vector<std::size_t> stride_a(r, 0), stride_b(r, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t d = r; d-- > 0;) {
    stride_a[d] = pa[d] == 1 ? 0 : acc_a;
    stride_b[d] = pb[d] == 1 ? 0 : acc_b;
    acc_a *= pa[d];
    acc_b *= pb[d];
  }
  const std::size_t n = shape_numel(m.out);
  m.a_off.resize(n);
  m.b_off.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    m.a_off[i] = oa;
    m.b_off[i] = ob;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += stride_a[d];
      ob += stride_b[d];
      if (idx[d] < m.out[d]) break;
      oa -= stride_a[d] * idx[d];
      ob -= stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
  return m;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

enum class BinaryKind { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  auto m = broadcast(a.shape(), b.shape(), op);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(m.a_off.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[m.a_off[i]], y = bv[m.b_off[i]];
    switch (kind) {
      case BinaryKind::add: out[i] = x + y; break;
      case BinaryKind::sub: out[i] = x - y; break;
      case BinaryKind::mul: out[i] = x * y; break;
    }
  }
  auto result = make_result(m.out, std::move(out), op, {a.node_ptr(), b.node_ptr()});
  if (result.requires_grad()) {
    Node* pa = a.node();
    Node* pb = b.node();
    result.node()->backward = [pa, pb, kind, m = std::move(m)](Node& self) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double g = self.grad[i];
        const std::size_t ia = m.a_off[i], ib = m.b_off[i];
        switch (kind) {
          case BinaryKind::add:
            if (pa->requires_grad) pa->grad[ia] += g;
            if (pb->requires_grad) pb->grad[ib] += g;
            break;
          case BinaryKind::sub:
            if (pa->requires_grad) pa->grad[ia] += g;
            if (pb->requires_grad) pb->grad[ib] -= g;
            break;
          case BinaryKind::mul:
            if (pa->requires_grad) pa->grad[ia] += g * pb->value[ib];
            if (pb->requires_grad) pb->grad[ib] += g * pa->value[ia];
            break;
        }
      }
    };
  }
  return result;
}

// c[m,n] += a[m,k] * b[k,n], accumulated in k order.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// da[m,k] += dc[m,n] * b[k,n]^T
void gemm_nt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      da[i * k + p] += s;
    }
  }
}

// db[k,n] += a[m,k]^T * dc[m,n]
void gemm_tn(const double* a, const double* dc, double* db, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::wrap(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank(), "dim")]; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at(): index rank mismatch for " + shape_str(shape()));
  std::size_t off = 0, d = 0;
  for (auto i : index) {
    if (i >= shape()[d]) throw ShapeError("at(): index out of range for " + shape_str(shape()));
    off = off * shape()[d] + i;
    ++d;
  }
  return node_->value[off];
}

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto result = make_result(x.shape(), std::move(out), "scale", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px, factor](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += factor * self.grad[i];
    };
  }
  return result;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  auto result = make_result(x.shape(), std::move(out), "relu", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (px->value[i] > 0.0) px->grad[i] += self.grad[i];
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  BroadcastMap bm;
  try {
    bm = broadcast(batch_a, batch_b, "matmul");
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch dimensions not broadcastable: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape out_shape = bm.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::size_t batches = bm.a_off.size();
  std::vector<double> out(batches * m * n, 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t t = 0; t < batches; ++t) {
    gemm_nn(av + bm.a_off[t] * m * k, bv + bm.b_off[t] * k * n, out.data() + t * m * n, m, k, n);
  }
  auto result = make_result(std::move(out_shape), std::move(out), "matmul", {a.node_ptr(), b.node_ptr()});
  if (result.requires_grad()) {
    Node* pa = a.node();
    Node* pb = b.node();
    result.node()->backward = [pa, pb, m, k, n, bm = std::move(bm)](Node& self) {
      const std::size_t batches = bm.a_off.size();
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t t = 0; t < batches; ++t) {
          gemm_nt(self.grad.data() + t * m * n, pb->value.data() + bm.b_off[t] * k * n,
                  pa->grad.data() + bm.a_off[t] * m * k, m, k, n);
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t t = 0; t < batches; ++t) {
          gemm_tn(pa->value.data() + bm.a_off[t] * m * k, self.grad.data() + t * m * n,
                  pb->grad.data() + bm.b_off[t] * k * n, m, k, n);
        }
      }
    };
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(-2), c = x.dim(-1);
  const std::size_t batches = x.numel() / (r * c);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t t = 0; t < batches; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = xv[t * r * c + i * c + j];
    }
  }
  auto result = make_result(std::move(out_shape), std::move(out), "transpose", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px, r, c, batches](Node& self) {
      px->ensure_grad();
      for (std::size_t t = 0; t < batches; ++t) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) px->grad[t * r * c + i * c + j] += self.grad[t * r * c + j * r + i];
        }
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto result = make_result({}, {s}, "sum", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px](Node& self) {
      px->ensure_grad();
      for (auto& g : px->grad) g += self.grad[0];
    };
  }
  return result;
}

Tensor mean(const Tensor& x) {
  auto s = sum(x);
  auto result = scale(s, 1.0 / static_cast<double>(x.numel()));
  result.node()->op = "mean";
  return result;
}

namespace {

Tensor softmax_impl(const Tensor& x, int axis, bool log_space) {
  const char* op = log_space ? "log_softmax" : "softmax";
  if (x.rank() == 0) throw ShapeError(std::string(op) + " of a scalar");
  const std::size_t ax = normalize_axis(axis, x.rank(), op);
  const auto s = split_axis(x.shape(), ax);
  if (s.len == 0) throw ShapeError(std::string(op) + ": empty axis");
  const auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.len; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) z += std::exp(xv[base + i * s.inner] - mx);
      if (log_space) {
        const double lz = std::log(z);
        for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] = xv[base + i * s.inner] - mx - lz;
      } else {
        for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] = std::exp(xv[base + i * s.inner] - mx) / z;
      }
    }
  }
  auto result = make_result(x.shape(), std::move(out), op, {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px, s, log_space](Node& self) {
      px->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          if (log_space) {
            // dx = dy - softmax * sum(dy)
            double gsum = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) gsum += self.grad[base + i * s.inner];
            for (std::size_t i = 0; i < s.len; ++i) {
              const std::size_t k = base + i * s.inner;
              px->grad[k] += self.grad[k] - std::exp(self.value[k]) * gsum;
            }
          } else {
            // dx = y * (dy - sum(dy * y))
            double dot = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) {
              const std::size_t k = base + i * s.inner;
              dot += self.grad[k] * self.value[k];
            }
            for (std::size_t i = 0; i < s.len; ++i) {
              const std::size_t k = base + i * s.inner;
              px->grad[k] += self.value[k] * (self.grad[k] - dot);
            }
          }
        }
      }
    };
  }
  return result;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) { return softmax_impl(x, axis, false); }
Tensor log_softmax(const Tensor& x, int axis) { return softmax_impl(x, axis, true); }

Tensor mean_pool_time(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("mean_pool_time expects [N, T, D], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (t == 0) throw ShapeError("mean_pool_time: T must be >= 1");
  const auto xv = x.data();
  std::vector<double> out(n * d, 0.0);
  const double inv = 1.0 / static_cast<double>(t);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < t; ++f) {
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += xv[(i * t + f) * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] *= inv;
  }
  auto result = make_result({n, d}, std::move(out), "mean_pool_time", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px, n, t, d, inv](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < t; ++f) {
          for (std::size_t c = 0; c < d; ++c) px->grad[(i * t + f) * d + c] += self.grad[i * d + c] * inv;
        }
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------- structural

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of an empty list");
  const Shape& first = xs.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s) +
                       " along axis " + std::to_string(axis));
    }
    out_shape[ax] += s[ax];
  }
  const auto so = split_axis(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  std::vector<NodePtr> parents;
  for (const auto& x : xs) {
    const std::size_t len = x.shape()[ax];
    const auto xv = x.data();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(xv.begin() + o * len * so.inner, len * so.inner,
                  out.begin() + (o * so.len + offset) * so.inner);
    }
    offsets.push_back(offset);
    offset += len;
    parents.push_back(x.node_ptr());
  }
  auto result = make_result(std::move(out_shape), std::move(out), "concat", parents);
  if (result.requires_grad()) {
    std::vector<Node*> raw;
    for (const auto& p : parents) raw.push_back(p.get());
    result.node()->backward = [raw, offsets, so, ax](Node& self) {
      for (std::size_t p = 0; p < raw.size(); ++p) {
        Node* px = raw[p];
        if (!px->requires_grad) continue;
        px->ensure_grad();
        const std::size_t len = px->shape[ax];
        for (std::size_t o = 0; o < so.outer; ++o) {
          const double* src = self.grad.data() + (o * so.len + offsets[p]) * so.inner;
          double* dst = px->grad.data() + o * len * so.inner;
          for (std::size_t i = 0; i < len * so.inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return result;
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "slice");
  if (begin >= end || end > x.shape()[ax]) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto si = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> out(shape_numel(out_shape));
  const auto xv = x.data();
  for (std::size_t o = 0; o < si.outer; ++o) {
    std::copy_n(xv.begin() + (o * si.len + begin) * si.inner, len * si.inner, out.begin() + o * len * si.inner);
  }
  auto result = make_result(std::move(out_shape), std::move(out), "slice", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px, si, begin, len](Node& self) {
      px->ensure_grad();
      for (std::size_t o = 0; o < si.outer; ++o) {
        const double* src = self.grad.data() + o * len * si.inner;
        double* dst = px->grad.data() + (o * si.len + begin) * si.inner;
        for (std::size_t i = 0; i < len * si.inner; ++i) dst[i] += src[i];
      }
    };
  }
  return result;
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.rank() == 0) throw ShapeError("index_rows of a scalar");
  if (indices.empty()) throw ShapeError("index_rows with no indices");
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / rows;
  for (auto i : indices) {
    if (i >= rows) {
      throw ShapeError("index_rows: index " + std::to_string(i) + " out of range for " + std::to_string(rows) +
                       " rows");
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * width);
  const auto xv = x.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(xv.begin() + indices[r] * width, width, out.begin() + r * width);
  }
  auto result = make_result(std::move(out_shape), std::move(out), "index_rows", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    result.node()->backward = [px, idx = std::move(idx), width](Node& self) {
      px->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) px->grad[idx[r] * width + c] += self.grad[r * width + c];
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------- losses / norms

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [N, C] logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                     " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " at index " + std::to_string(i) +
                       " outside [0, " + std::to_string(c) + ")");
    }
  }
  const auto lv = logits.data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - mx - lz);
    total += -(row[targets[i]] - mx - lz);
  }
  auto result = make_result({}, {total / static_cast<double>(n)}, "cross_entropy", {logits.node_ptr()});
  if (result.requires_grad()) {
    Node* pl = logits.node();
    std::vector<int> tgt(targets.begin(), targets.end());
    result.node()->backward = [pl, probs = std::move(probs), tgt = std::move(tgt), n, c](Node& self) {
      pl->ensure_grad();
      const double g = self.grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot = static_cast<std::size_t>(tgt[i]) == j ? 1.0 : 0.0;
          pl->grad[i * c + j] += g * (probs[i * c + j] - onehot);
        }
      }
    };
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm of a scalar");
  const std::size_t d = x.dim(-1);
  if (d < 2) throw ShapeError("layer_norm needs a feature axis of size >= 2, got " + shape_str(x.shape()));
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match feature size " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  auto result = make_result(x.shape(), std::move(out), "layer_norm", {x.node_ptr(), gain.node_ptr(), bias.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    Node* pg = gain.node();
    Node* pb = bias.node();
    result.node()->backward = [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                               d](Node& self) {
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      if (px->requires_grad) px->ensure_grad();
      std::vector<double> dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* g = self.grad.data() + r * d;
        const double* xh = xhat.data() + r * d;
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          if (pg->requires_grad) pg->grad[j] += g[j] * xh[j];
          if (pb->requires_grad) pb->grad[j] += g[j];
          dxhat[j] = g[j] * pg->value[j];
          mean_dxhat += dxhat[j];
          mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        if (!px->requires_grad) continue;
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          px->grad[r * d + j] += inv_std[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      }
    };
  }
  return result;
}

Tensor l2_normalize(const Tensor& x, double eps) {
  if (x.rank() == 0) throw ShapeError("l2_normalize of a scalar");
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<double> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norms[r];
  }
  auto result = make_result(x.shape(), std::move(out), "l2_normalize", {x.node_ptr()});
  if (result.requires_grad()) {
    Node* px = x.node();
    result.node()->backward = [px, norms = std::move(norms), rows, d, eps](Node& self) {
      px->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * d;
        const double* g = self.grad.data() + r * d;
        if (norms[r] <= eps) {
          // clamped branch: y = x / eps
          for (std::size_t j = 0; j < d; ++j) px->grad[r * d + j] += g[j] / eps;
          continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < d; ++j) px->grad[r * d + j] += (g[j] - y[j] * dot) / norms[r];
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------- backward

namespace {

// Post-order over the recorded history of `root`: every parent precedes its
// children.
std::vector<Node*> record_tape(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined()) throw NumericError("backward on an undefined tensor");
  if (loss.numel() != 1) throw NumericError("backward needs a scalar root, got shape " + shape_str(loss.shape()));
  Node* root = loss.node();
  const auto tape = record_tape(root);
  for (Node* n : tape) {
    if (n->consumed) throw NumericError("backward on a consumed tape (op '" + std::string(n->op) + "')");
  }
  if (!root->requires_grad) return;
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    Node* n = *it;
    if (n->parents.empty()) continue;
    if (n->backward && !n->grad.empty()) n->backward(*n);
    n->consumed = true;
    n->backward = nullptr;
    // Intermediate gradients are not needed once propagated.
    std::vector<double>().swap(n->grad);
  }
}

void check_finite(const Tensor& t, const std::string& what) {
  auto finite = [](const Node* n) {
    return std::all_of(n->value.begin(), n->value.end(), [](double v) { return std::isfinite(v); });
  };
  if (finite(t.node())) return;
  for (Node* n : record_tape(t.node())) {
    if (!finite(n)) {
      throw NumericError("non-finite value in " + what + ", first produced by op '" + std::string(n->op) + "'");
    }
  }
}

}  // namespace foal
