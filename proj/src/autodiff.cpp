#include "htkg/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "htkg/kernels.hpp"

namespace htkg::ad {

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

const kernels::Ops& K() { return kernels::ops(); }

bool any_requires(std::span<const Tensor> ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) return true;
  return false;
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value,
                                std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> bp) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool req = false;
    for (const auto& p : parents) req = req || p->requires_grad;
    if (req) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backprop = std::move(bp);
    }
  }
  return n;
}

double* ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad.data();
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

double* Node::grad_data() { return ensure_grad(*this); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  if (numel(shape) != value.size())
    throw std::invalid_argument("leaf: value size does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::constant(Shape shape, std::vector<double> value) {
  return leaf(std::move(shape), std::move(value), false);
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(numel(shape), 0.0);
  return constant(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item(): tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  ensure_grad(*node_);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
  if (size() != 1) throw std::logic_error("backward(): output must be scalar");
  // Iterative topological order over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  ensure_grad(*node_)[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---- elementwise ----

namespace {

Tensor binary_same_shape(const char* name, const Tensor& a, const Tensor& b,
                         void (*fwd)(const double*, const double*, double*, std::size_t),
                         std::function<void(Node&)> bp) {
  if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  std::vector<double> out(a.size());
  fwd(a.values().data(), b.values().data(), out.data(), a.size());
  return Tensor(make_node(a.shape(), std::move(out), {a.node(), b.node()}, std::move(bp)));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape("add", a, b, K().add, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) K().axpy(1.0, n.grad.data(), ensure_grad(pa), n.grad.size());
    if (pb.requires_grad) K().axpy(1.0, n.grad.data(), ensure_grad(pb), n.grad.size());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape("sub", a, b, K().sub, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) K().axpy(1.0, n.grad.data(), ensure_grad(pa), n.grad.size());
    if (pb.requires_grad) K().axpy(-1.0, n.grad.data(), ensure_grad(pb), n.grad.size());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape("mul", a, b, K().mul, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const std::size_t sz = n.grad.size();
    if (pa.requires_grad) {
      double* ga = ensure_grad(pa);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      double* gb = ensure_grad(pb);
      for (std::size_t i = 0; i < sz; ++i) gb[i] += n.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& x, double a) {
  std::vector<double> out(x.size());
  K().scale(x.values().data(), a, out.data(), x.size());
  return Tensor(make_node(x.shape(), std::move(out), {x.node()}, [a](Node& n) {
    auto& p = *n.parents[0];
    if (p.requires_grad) K().axpy(a, n.grad.data(), ensure_grad(p), n.grad.size());
  }));
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw std::invalid_argument("scale_by: scale must be a 1-element tensor");
  const double sv = s.values()[0];
  std::vector<double> out(x.size());
  K().scale(x.values().data(), sv, out.data(), x.size());
  return Tensor(make_node(x.shape(), std::move(out), {x.node(), s.node()}, [sv](Node& n) {
    auto& px = *n.parents[0];
    auto& ps = *n.parents[1];
    if (px.requires_grad) K().axpy(sv, n.grad.data(), ensure_grad(px), n.grad.size());
    if (ps.requires_grad) ensure_grad(ps)[0] += K().dot(n.grad.data(), px.value.data(), n.grad.size());
  }));
}

Tensor blend(const Tensor& gate, const Tensor& x, const Tensor& y) {
  if (gate.size() != 1) throw std::invalid_argument("blend: gate must be a 1-element tensor");
  if (x.shape() != y.shape()) shape_error("blend", x.shape(), y.shape());
  const double g = gate.values()[0];
  const std::size_t sz = x.size();
  std::vector<double> out(sz);
  const double* xv = x.values().data();
  const double* yv = y.values().data();
  for (std::size_t i = 0; i < sz; ++i) out[i] = g * xv[i] + (1.0 - g) * yv[i];
  return Tensor(make_node(x.shape(), std::move(out), {gate.node(), x.node(), y.node()}, [g](Node& n) {
    auto& pg = *n.parents[0];
    auto& px = *n.parents[1];
    auto& py = *n.parents[2];
    const std::size_t sz = n.grad.size();
    if (px.requires_grad) K().axpy(g, n.grad.data(), ensure_grad(px), sz);
    if (py.requires_grad) K().axpy(1.0 - g, n.grad.data(), ensure_grad(py), sz);
    if (pg.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < sz; ++i) acc += n.grad[i] * (px.value[i] - py.value[i]);
      ensure_grad(pg)[0] += acc;
    }
  }));
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t m, k, n;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0], k = sa[1], n = sb[1];
    if (sb[0] != k) shape_error("matmul", sa, sb);
    out_shape = {m, n};
  } else if (sa.size() == 2 && sb.size() == 1) {
    m = sa[0], k = sa[1], n = 1;
    if (sb[0] != k) shape_error("matmul", sa, sb);
    out_shape = {m};
  } else if (sa.size() == 1 && sb.size() == 2) {
    m = 1, k = sa[0], n = sb[1];
    if (sb[0] != k) shape_error("matmul", sa, sb);
    out_shape = {n};
  } else {
    shape_error("matmul", sa, sb);
  }
  std::vector<double> out(m * n);
  K().gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n, false);
  return Tensor(make_node(std::move(out_shape), std::move(out), {a.node(), b.node()},
                          [m, k, n](Node& nd) {
                            auto& pa = *nd.parents[0];
                            auto& pb = *nd.parents[1];
                            // dA += G * B^T ; dB += A^T * G
                            if (pa.requires_grad)
                              K().gemm_nt(nd.grad.data(), pb.value.data(), ensure_grad(pa), m, n, k, true);
                            if (pb.requires_grad)
                              K().gemm_tn(pa.value.data(), nd.grad.data(), ensure_grad(pb), k, m, n, true);
                          }));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1]) shape_error("matmul_nt", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[0];
  std::vector<double> out(m * n);
  K().gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n, false);
  return Tensor(make_node({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& nd) {
    auto& pa = *nd.parents[0];
    auto& pb = *nd.parents[1];
    // C = A B^T: dA += G * B ; dB += G^T * A
    if (pa.requires_grad)
      K().gemm_nn(nd.grad.data(), pb.value.data(), ensure_grad(pa), m, n, k, true);
    if (pb.requires_grad)
      K().gemm_tn(nd.grad.data(), pa.value.data(), ensure_grad(pb), n, m, k, true);
  }));
}

Tensor matvec_t(const Tensor& a, const Tensor& x) {
  const auto& sa = a.shape();
  const auto& sx = x.shape();
  if (sa.size() != 2 || sx.size() != 1 || sa[0] != sx[0]) shape_error("matvec_t", sa, sx);
  const std::size_t k = sa[0], m = sa[1];
  std::vector<double> out(m);
  K().gemm_tn(a.values().data(), x.values().data(), out.data(), m, k, 1, false);
  return Tensor(make_node({m}, std::move(out), {a.node(), x.node()}, [k, m](Node& nd) {
    auto& pa = *nd.parents[0];
    auto& px = *nd.parents[1];
    // y = A^T x: dA += x y_grad^T (outer, k x m); dx += A y_grad
    if (pa.requires_grad) {
      double* ga = ensure_grad(pa);
      for (std::size_t i = 0; i < k; ++i)
        K().axpy(px.value[i], nd.grad.data(), ga + i * m, m);
    }
    if (px.requires_grad)
      K().gemm_nn(pa.value.data(), nd.grad.data(), ensure_grad(px), k, m, 1, true);
  }));
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1) throw std::invalid_argument("concat: 1-D tensors only");
  const std::size_t p = a.size(), q = b.size();
  std::vector<double> out(p + q);
  std::memcpy(out.data(), a.values().data(), p * sizeof(double));
  std::memcpy(out.data() + p, b.values().data(), q * sizeof(double));
  return Tensor(make_node({p + q}, std::move(out), {a.node(), b.node()}, [p, q](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) K().axpy(1.0, n.grad.data(), ensure_grad(pa), p);
    if (pb.requires_grad) K().axpy(1.0, n.grad.data() + p, ensure_grad(pb), q);
  }));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size()) shape_error("dot", a.shape(), b.shape());
  const double v = K().dot(a.values().data(), b.values().data(), a.size());
  return Tensor(make_node({1}, {v}, {a.node(), b.node()}, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const double g = n.grad[0];
    if (pa.requires_grad) K().axpy(g, pb.value.data(), ensure_grad(pa), pa.value.size());
    if (pb.requires_grad) K().axpy(g, pa.value.data(), ensure_grad(pb), pb.value.size());
  }));
}

Tensor sum(const Tensor& x) {
  const double v = K().sum(x.values().data(), x.size());
  return Tensor(make_node({1}, {v}, {x.node()}, [](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    const double g = n.grad[0];
    double* gp = ensure_grad(p);
    for (std::size_t i = 0; i < p.value.size(); ++i) gp[i] += g;
  }));
}

// ---- activations / softmax ----

namespace {

Tensor unary(const Tensor& x, double (*f)(double), std::function<void(Node&)> bp) {
  std::vector<double> out(x.size());
  const double* xv = x.values().data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(xv[i]);
  return Tensor(make_node(x.shape(), std::move(out), {x.node()}, std::move(bp)));
}

double sigmoid_stable(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary(x, sigmoid_stable, [](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    double* gp = ensure_grad(p);
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      const double s = n.value[i];
      gp[i] += n.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor tanh_act(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    double* gp = ensure_grad(p);
    for (std::size_t i = 0; i < n.value.size(); ++i)
      gp[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    double* gp = ensure_grad(p);
    for (std::size_t i = 0; i < n.value.size(); ++i)
      if (p.value[i] > 0.0) gp[i] += n.grad[i];
  });
}

Tensor cosine(const Tensor& x) {
  return unary(x, [](double v) { return std::cos(v); }, [](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    double* gp = ensure_grad(p);
    for (std::size_t i = 0; i < n.value.size(); ++i)
      gp[i] += -std::sin(p.value[i]) * n.grad[i];
  });
}

namespace {

// softmax over contiguous or strided slices. For a 2-D (r, c) tensor:
// axis 1: r slices of length c, stride 1; axis 0: c slices of length r, stride c.
void softmax_slices(const double* x, double* out, std::size_t slices, std::size_t len,
                    std::size_t base_step, std::size_t stride) {
  for (std::size_t s = 0; s < slices; ++s) {
    const double* xs = x + s * base_step;
    double* os = out + s * base_step;
    double mx = xs[0];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xs[i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(xs[i * stride] - mx);
      os[i * stride] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < len; ++i) os[i * stride] /= denom;
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const auto& sh = x.shape();
  std::size_t slices, len, base_step, stride;
  if (sh.size() == 1) {
    slices = 1;
    len = sh[0];
    base_step = 0;
    stride = 1;
  } else if (sh.size() == 2 && (axis == 1 || axis == -1)) {
    slices = sh[0];
    len = sh[1];
    base_step = sh[1];
    stride = 1;
  } else if (sh.size() == 2 && axis == 0) {
    slices = sh[1];
    len = sh[0];
    base_step = 1;
    stride = sh[1];
  } else {
    throw std::invalid_argument("softmax: unsupported axis for shape " + shape_str(sh));
  }
  if (len == 0) throw std::invalid_argument("softmax: empty reduction axis");
  std::vector<double> out(x.size());
  softmax_slices(x.values().data(), out.data(), slices, len, base_step, stride);
  return Tensor(make_node(x.shape(), std::move(out), {x.node()},
                          [slices, len, base_step, stride](Node& n) {
                            auto& p = *n.parents[0];
                            if (!p.requires_grad) return;
                            double* gp = ensure_grad(p);
                            for (std::size_t s = 0; s < slices; ++s) {
                              const double* sv = n.value.data() + s * base_step;
                              const double* gv = n.grad.data() + s * base_step;
                              double inner = 0.0;
                              for (std::size_t i = 0; i < len; ++i)
                                inner += gv[i * stride] * sv[i * stride];
                              double* gs = gp + s * base_step;
                              for (std::size_t i = 0; i < len; ++i)
                                gs[i * stride] += sv[i * stride] * (gv[i * stride] - inner);
                            }
                          }));
}

// ---- aggregates ----

Tensor mean_list(std::span<const Tensor> xs) {
  if (xs.empty()) throw std::invalid_argument("mean_list: empty list");
  const auto& sh = xs[0].shape();
  std::vector<double> out(xs[0].size(), 0.0);
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  for (const auto& t : xs) {
    if (t.shape() != sh) shape_error("mean_list", sh, t.shape());
    K().axpy(1.0, t.values().data(), out.data(), out.size());
    parents.push_back(t.node());
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  K().scale(out.data(), inv, out.data(), out.size());
  return Tensor(make_node(sh, std::move(out), std::move(parents), [inv](Node& n) {
    for (auto& pp : n.parents) {
      if (pp->requires_grad) K().axpy(inv, n.grad.data(), ensure_grad(*pp), n.grad.size());
    }
  }));
}

Tensor sum_list(std::span<const Tensor> xs) {
  if (xs.empty()) throw std::invalid_argument("sum_list: empty list");
  const auto& sh = xs[0].shape();
  std::vector<double> out(xs[0].size(), 0.0);
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  for (const auto& t : xs) {
    if (t.shape() != sh) shape_error("sum_list", sh, t.shape());
    K().axpy(1.0, t.values().data(), out.data(), out.size());
    parents.push_back(t.node());
  }
  return Tensor(make_node(sh, std::move(out), std::move(parents), [](Node& n) {
    for (auto& pp : n.parents) {
      if (pp->requires_grad) K().axpy(1.0, n.grad.data(), ensure_grad(*pp), n.grad.size());
    }
  }));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto& sh = x.shape();
  const std::size_t width = sh.back();
  const std::size_t rows = x.size() / width;
  if (gain.size() != width || bias.size() != width)
    throw std::invalid_argument("layer_norm: affine width mismatch");
  std::vector<double> out(x.size());
  std::vector<double> inv_sd(rows), xhat(x.size());
  const double* xv = x.values().data();
  const double* gv = gain.values().data();
  const double* bv = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * width;
    double mean = K().sum(row, width) / width;
    double var = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      const double d = row[i] - mean;
      var += d * d;
    }
    var /= width;
    const double isd = 1.0 / std::sqrt(var + eps);
    inv_sd[r] = isd;
    for (std::size_t i = 0; i < width; ++i) {
      const double h = (row[i] - mean) * isd;
      xhat[r * width + i] = h;
      out[r * width + i] = h * gv[i] + bv[i];
    }
  }
  return Tensor(make_node(sh, std::move(out), {x.node(), gain.node(), bias.node()},
                          [rows, width, inv_sd = std::move(inv_sd), xhat = std::move(xhat)](Node& n) {
                            auto& px = *n.parents[0];
                            auto& pg = *n.parents[1];
                            auto& pb = *n.parents[2];
                            const double* gv = pg.value.data();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const double* g = n.grad.data() + r * width;
                              const double* xh = xhat.data() + r * width;
                              if (pg.requires_grad) {
                                double* gg = ensure_grad(pg);
                                for (std::size_t i = 0; i < width; ++i) gg[i] += g[i] * xh[i];
                              }
                              if (pb.requires_grad) {
                                double* gb = ensure_grad(pb);
                                for (std::size_t i = 0; i < width; ++i) gb[i] += g[i];
                              }
                              if (px.requires_grad) {
                                double mean_gy = 0.0, mean_gyx = 0.0;
                                for (std::size_t i = 0; i < width; ++i) {
                                  const double gy = g[i] * gv[i];
                                  mean_gy += gy;
                                  mean_gyx += gy * xh[i];
                                }
                                mean_gy /= width;
                                mean_gyx /= width;
                                double* gx = ensure_grad(px) + r * width;
                                for (std::size_t i = 0; i < width; ++i) {
                                  const double gy = g[i] * gv[i];
                                  gx[i] += (gy - mean_gy - xh[i] * mean_gyx) * inv_sd[r];
                                }
                              }
                            }
                          }));
}

Tensor dropout(const Tensor& x, const Tensor& mask, double rate) {
  if (x.shape() != mask.shape()) shape_error("dropout", x.shape(), mask.shape());
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const double keep_inv = 1.0 / (1.0 - rate);
  std::vector<double> out(x.size());
  const double* xv = x.values().data();
  const double* mv = mask.values().data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = xv[i] * mv[i] * keep_inv;
  return Tensor(make_node(x.shape(), std::move(out), {x.node(), mask.node()}, [keep_inv](Node& n) {
    auto& px = *n.parents[0];
    auto& pm = *n.parents[1];
    if (!px.requires_grad) return;
    double* gx = ensure_grad(px);
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      gx[i] += n.grad[i] * pm.value[i] * keep_inv;
  }));
}

// ---- gather / reshapes ----

Tensor gather_rows(const Tensor& matrix, std::span<const std::uint32_t> ids) {
  if (matrix.rank() != 2) throw std::invalid_argument("gather_rows: matrix must be 2-D");
  const std::size_t rows = matrix.dim(0), width = matrix.dim(1);
  std::vector<double> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows)
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    std::memcpy(out.data() + i * width, matrix.values().data() + ids[i] * width,
                width * sizeof(double));
  }
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  return Tensor(make_node({ids.size(), width}, std::move(out), {matrix.node()},
                          [idv = std::move(idv), width](Node& n) {
                            auto& p = *n.parents[0];
                            if (!p.requires_grad) return;
                            double* gp = ensure_grad(p);
                            for (std::size_t i = 0; i < idv.size(); ++i)
                              K().axpy(1.0, n.grad.data() + i * width, gp + idv[i] * width, width);
                          }));
}

Tensor take_row(const Tensor& matrix, std::size_t row) {
  if (matrix.rank() != 2) throw std::invalid_argument("take_row: matrix must be 2-D");
  const std::size_t width = matrix.dim(1);
  if (row >= matrix.dim(0)) throw std::out_of_range("take_row: row out of range");
  std::vector<double> out(width);
  std::memcpy(out.data(), matrix.values().data() + row * width, width * sizeof(double));
  return Tensor(make_node({width}, std::move(out), {matrix.node()}, [row, width](Node& n) {
    auto& p = *n.parents[0];
    if (p.requires_grad)
      K().axpy(1.0, n.grad.data(), ensure_grad(p) + row * width, width);
  }));
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty list");
  const std::size_t width = rows[0].size();
  std::vector<double> out(rows.size() * width);
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].rank() != 1 || rows[i].size() != width)
      shape_error("stack_rows", rows[0].shape(), rows[i].shape());
    std::memcpy(out.data() + i * width, rows[i].values().data(), width * sizeof(double));
    parents.push_back(rows[i].node());
  }
  return Tensor(make_node({rows.size(), width}, std::move(out), std::move(parents),
                          [width](Node& n) {
                            for (std::size_t i = 0; i < n.parents.size(); ++i) {
                              auto& p = *n.parents[i];
                              if (p.requires_grad)
                                K().axpy(1.0, n.grad.data() + i * width, ensure_grad(p), width);
                            }
                          }));
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2) throw std::invalid_argument("slice_cols: 2-D tensors only");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (start + count > width) throw std::out_of_range("slice_cols: range out of bounds");
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * count, x.values().data() + r * width + start,
                count * sizeof(double));
  return Tensor(make_node({rows, count}, std::move(out), {x.node()},
                          [rows, width, start, count](Node& n) {
                            auto& p = *n.parents[0];
                            if (!p.requires_grad) return;
                            double* gp = ensure_grad(p);
                            for (std::size_t r = 0; r < rows; ++r)
                              K().axpy(1.0, n.grad.data() + r * count, gp + r * width + start, count);
                          }));
}

Tensor concat_cols(std::span<const Tensor> xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty list");
  const std::size_t rows = xs[0].dim(0);
  std::size_t total = 0;
  for (const auto& t : xs) {
    if (t.rank() != 2 || t.dim(0) != rows) shape_error("concat_cols", xs[0].shape(), t.shape());
    total += t.dim(1);
  }
  std::vector<double> out(rows * total);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    const std::size_t w = t.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * total + off, t.values().data() + r * w, w * sizeof(double));
    parents.push_back(t.node());
    offsets.push_back(off);
    off += w;
  }
  return Tensor(make_node({rows, total}, std::move(out), std::move(parents),
                          [rows, total, offsets = std::move(offsets)](Node& n) {
                            for (std::size_t i = 0; i < n.parents.size(); ++i) {
                              auto& p = *n.parents[i];
                              if (!p.requires_grad) continue;
                              const std::size_t w = p.shape[1];
                              double* gp = ensure_grad(p);
                              for (std::size_t r = 0; r < rows; ++r)
                                K().axpy(1.0, n.grad.data() + r * total + offsets[i], gp + r * w, w);
                            }
                          }));
}

// ---- composition / loss ----

Tensor complex_rotate(const Tensor& e, const Tensor& r) {
  if (e.rank() != 1 || r.rank() != 1 || e.size() != r.size())
    shape_error("complex_rotate", e.shape(), r.shape());
  const std::size_t d = e.size();
  if (d % 2 != 0) throw std::invalid_argument("complex_rotate: dimension must be even");
  const std::size_t h = d / 2;
  std::vector<double> out(d);
  const double* ev = e.values().data();
  const double* rv = r.values().data();
  for (std::size_t j = 0; j < h; ++j) {
    const double c = std::cos(rv[j]);
    const double s = std::sin(rv[j]);
    out[j] = ev[j] * c - ev[j + h] * s;
    out[j + h] = ev[j] * s + ev[j + h] * c;
  }
  return Tensor(make_node({d}, std::move(out), {e.node(), r.node()}, [h](Node& n) {
    auto& pe = *n.parents[0];
    auto& pr = *n.parents[1];
    const double* ev = pe.value.data();
    const double* rv = pr.value.data();
    for (std::size_t j = 0; j < h; ++j) {
      const double c = std::cos(rv[j]);
      const double s = std::sin(rv[j]);
      const double gre = n.grad[j];
      const double gim = n.grad[j + h];
      if (pe.requires_grad) {
        double* ge = ensure_grad(pe);
        ge[j] += gre * c + gim * s;
        ge[j + h] += -gre * s + gim * c;
      }
      if (pr.requires_grad) {
        double* gr = ensure_grad(pr);
        gr[j] += gre * (-ev[j] * s - ev[j + h] * c) + gim * (ev[j] * c - ev[j + h] * s);
      }
    }
  }));
}

Tensor bce_logits_onehot(const Tensor& scores, std::size_t truth_index) {
  if (scores.rank() != 1) throw std::invalid_argument("bce_logits_onehot: scores must be 1-D");
  const std::size_t n = scores.size();
  if (truth_index >= n) throw std::out_of_range("bce_logits_onehot: truth index out of range");
  constexpr double kClamp = 1e-12;
  const double* sv = scores.values().data();
  double loss = 0.0;
  std::vector<double> dldz(n);  // d(term)/d(logit), before the 1/n factor
  for (std::size_t i = 0; i < n; ++i) {
    const double p = sigmoid_stable(sv[i]);
    if (i == truth_index) {
      const double pc = std::max(p, kClamp);
      loss += -std::log(pc);
      dldz[i] = (p > kClamp) ? (p - 1.0) : 0.0;
    } else {
      const double qc = std::max(1.0 - p, kClamp);
      loss += -std::log(qc);
      dldz[i] = (1.0 - p > kClamp) ? p : 0.0;
    }
  }
  loss /= static_cast<double>(n);
  const double inv = 1.0 / static_cast<double>(n);
  return Tensor(make_node({1}, {loss}, {scores.node()},
                          [dldz = std::move(dldz), inv](Node& nd) {
                            auto& p = *nd.parents[0];
                            if (!p.requires_grad) return;
                            const double g = nd.grad[0] * inv;
                            double* gp = ensure_grad(p);
                            for (std::size_t i = 0; i < dldz.size(); ++i) gp[i] += g * dldz[i];
                          }));
}

}  // namespace htkg::ad
