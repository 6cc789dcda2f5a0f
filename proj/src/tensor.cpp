#include "msdnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace msdnet {

namespace {

std::int64_t shape_product(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 1) throw ShapeError("tensor: extent must be positive, got " + std::to_string(d));
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(shape_product(shape)), fill);
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> d) {
  Tensor t;
  t.shape = std::move(s);
  if (shape_product(t.shape) != static_cast<std::int64_t>(d.size()))
    throw ShapeError("tensor: data length " + std::to_string(d.size()) +
                     " does not match shape product");
  t.data = std::move(d);
  return t;
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tape

NodeId Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.tracked = false;
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.tracked = true;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Tape::param(Tensor& external) {
  Node n;
  n.value = external;  // copy of the current value
  n.tracked = true;
  n.external = &external;
  n.op = "param";
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Tape::push(Tensor value, std::vector<NodeId> inputs,
                  std::function<void(Tape&, NodeId)> backward_rule, const char* op) {
  bool tracked = false;
  for (NodeId id : inputs) tracked = tracked || nodes_[static_cast<std::size_t>(id)].tracked;
  Node n;
  n.value = std::move(value);
  n.tracked = tracked;
  n.inputs = std::move(inputs);
  if (tracked) n.rule = std::move(backward_rule);
  n.op = op;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

const std::vector<double>& Tape::grad(NodeId id) const {
  static const std::vector<double> empty;
  const auto& g = nodes_[static_cast<std::size_t>(id)].grad;
  return g.empty() ? empty : g;
}

std::span<const double> Tape::out_grad(NodeId id) const {
  return std::span<const double>(pass_[static_cast<std::size_t>(id)]);
}

double* Tape::in_grad(NodeId id) {
  auto& node = nodes_[static_cast<std::size_t>(id)];
  if (!node.tracked) return nullptr;
  auto& buf = pass_[static_cast<std::size_t>(id)];
  if (buf.empty()) buf.assign(node.value.data.size(), 0.0);
  return buf.data();
}

void Tape::backward(NodeId loss, bool into_externals) {
  if (val(loss).numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + val(loss).shape_str());
  if (!tracked(loss)) return;  // nothing reachable

  const std::size_t n = nodes_.size();
  pass_.assign(n, {});
  reachable_.assign(n, 0);

  // mark tracked ancestors of the loss
  std::vector<NodeId> stack{loss};
  reachable_[static_cast<std::size_t>(loss)] = 1;
  while (!stack.empty()) {
    const NodeId id = stack.back();
    stack.pop_back();
    for (NodeId in : nodes_[static_cast<std::size_t>(id)].inputs) {
      auto& nd = nodes_[static_cast<std::size_t>(in)];
      if (nd.tracked && !reachable_[static_cast<std::size_t>(in)]) {
        reachable_[static_cast<std::size_t>(in)] = 1;
        stack.push_back(in);
      }
    }
  }

  pass_[static_cast<std::size_t>(loss)].assign(1, 1.0);
  for (NodeId id = loss; id >= 0; --id) {
    if (!reachable_[static_cast<std::size_t>(id)]) continue;
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (pass_[static_cast<std::size_t>(id)].empty() || !node.rule) continue;
    node.rule(*this, id);
  }

  for (NodeId id = 0; id <= loss; ++id) {
    auto& buf = pass_[static_cast<std::size_t>(id)];
    if (buf.empty()) continue;
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.size() != buf.size()) node.grad.assign(buf.size(), 0.0);
    for (std::size_t i = 0; i < buf.size(); ++i) node.grad[i] += buf[i];
    if (into_externals && node.external) {
      node.external->ensure_grad();
      for (std::size_t i = 0; i < buf.size(); ++i) node.external->grad[i] += buf[i];
    }
  }
  pass_.clear();
  reachable_.clear();
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvGeom {
  bool batched = false;
  int n = 1, cin = 0, h = 0, w = 0;
  int cout = 0, k = 0, stride = 1, pad = 0;
  int hp = 0, wp = 0, hout = 0, wout = 0;
};

ConvGeom conv_geometry(const Tensor& in, const Tensor& wt, const Tensor& bias, int stride,
                       Padding padding) {
  if (wt.rank() != 4)
    throw ShapeError("conv2d: weight must be rank 4 [Cout,Cin,k,k], got " + wt.shape_str());
  if (wt.dim(2) != wt.dim(3))
    throw ShapeError("conv2d: kernel must be square on axes 2,3, got " + wt.shape_str());
  ConvGeom g;
  g.k = wt.dim(2);
  if (g.k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(g.k));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (in.rank() == 3) {
    g.batched = false;
    g.cin = in.dim(0);
    g.h = in.dim(1);
    g.w = in.dim(2);
  } else if (in.rank() == 4) {
    g.batched = true;
    g.n = in.dim(0);
    g.cin = in.dim(1);
    g.h = in.dim(2);
    g.w = in.dim(3);
  } else {
    throw ShapeError("conv2d: input must be rank 3 [Cin,H,W] or rank 4 [N,Cin,H,W], got " +
                     in.shape_str());
  }
  if (g.cin != wt.dim(1))
    throw ShapeError("conv2d: input channel axis has " + std::to_string(g.cin) +
                     " channels but weight axis 1 has " + std::to_string(wt.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != wt.dim(0))
    throw ShapeError("conv2d: bias must be rank 1 of length Cout=" + std::to_string(wt.dim(0)) +
                     ", got " + bias.shape_str());
  g.cout = wt.dim(0);
  g.stride = stride;
  g.pad = padding == Padding::same ? (g.k - 1) / 2 : 0;
  g.hp = g.h + 2 * g.pad;
  g.wp = g.w + 2 * g.pad;
  if (g.hp < g.k || g.wp < g.k)
    throw ShapeError("conv2d: spatial dims " + std::to_string(g.h) + "x" + std::to_string(g.w) +
                     " too small for kernel " + std::to_string(g.k));
  g.hout = (g.hp - g.k) / g.stride + 1;
  g.wout = (g.wp - g.k) / g.stride + 1;
  return g;
}

// zero-padded copy, [n][cin][hp][wp]
std::vector<double> pad_input(const Tensor& in, const ConvGeom& g) {
  std::vector<double> pad(static_cast<std::size_t>(g.n) * g.cin * g.hp * g.wp, 0.0);
  const double* src = in.data.data();
  for (int b = 0; b < g.n; ++b)
    for (int c = 0; c < g.cin; ++c)
      for (int y = 0; y < g.h; ++y) {
        const std::size_t s = ((static_cast<std::size_t>(b) * g.cin + c) * g.h + y) * g.w;
        const std::size_t d =
            ((static_cast<std::size_t>(b) * g.cin + c) * g.hp + (y + g.pad)) * g.wp + g.pad;
        std::memcpy(&pad[d], &src[s], sizeof(double) * static_cast<std::size_t>(g.w));
      }
  return pad;
}

void conv2d_backward(Tape& t, NodeId self, const ConvGeom& g, NodeId input, NodeId weight,
                     NodeId bias) {
  const auto dout = t.out_grad(self);
  const Tensor& in = t.val(input);
  const Tensor& wt = t.val(weight);
  double* din = t.in_grad(input);
  double* dw = t.in_grad(weight);
  double* db = t.in_grad(bias);

  std::vector<double> pad;
  if (dw) pad = pad_input(in, g);
  std::vector<double> dpad;
  if (din) dpad.assign(static_cast<std::size_t>(g.n) * g.cin * g.hp * g.wp, 0.0);

  const std::size_t plane_out = static_cast<std::size_t>(g.hout) * g.wout;
  for (int b = 0; b < g.n; ++b) {
    for (int oc = 0; oc < g.cout; ++oc) {
      const double* gout = dout.data() + (static_cast<std::size_t>(b) * g.cout + oc) * plane_out;
      if (db) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane_out; ++i) acc += gout[i];
        db[oc] += acc;
      }
      for (int ic = 0; ic < g.cin; ++ic) {
        const std::size_t pbase = (static_cast<std::size_t>(b) * g.cin + ic) *
                                  static_cast<std::size_t>(g.hp) * g.wp;
        for (int ky = 0; ky < g.k; ++ky) {
          for (int kx = 0; kx < g.k; ++kx) {
            const std::size_t widx =
                ((static_cast<std::size_t>(oc) * g.cin + ic) * g.k + ky) * g.k + kx;
            if (din) {
              const double wv = wt.data[widx];
              for (int yo = 0; yo < g.hout; ++yo) {
                double* drow = &dpad[pbase + static_cast<std::size_t>(yo * g.stride + ky) * g.wp +
                                     kx];
                const double* grow = gout + static_cast<std::size_t>(yo) * g.wout;
                for (int xo = 0; xo < g.wout; ++xo) drow[xo * g.stride] += wv * grow[xo];
              }
            }
            if (dw) {
              double acc = 0.0;
              for (int yo = 0; yo < g.hout; ++yo) {
                const double* prow =
                    &pad[pbase + static_cast<std::size_t>(yo * g.stride + ky) * g.wp + kx];
                const double* grow = gout + static_cast<std::size_t>(yo) * g.wout;
                for (int xo = 0; xo < g.wout; ++xo) acc += prow[xo * g.stride] * grow[xo];
              }
              dw[widx] += acc;
            }
          }
        }
      }
    }
  }

  if (din) {
    for (int b = 0; b < g.n; ++b)
      for (int c = 0; c < g.cin; ++c)
        for (int y = 0; y < g.h; ++y) {
          const std::size_t s =
              ((static_cast<std::size_t>(b) * g.cin + c) * g.hp + (y + g.pad)) * g.wp + g.pad;
          const std::size_t d = ((static_cast<std::size_t>(b) * g.cin + c) * g.h + y) * g.w;
          for (int x = 0; x < g.w; ++x) din[d + x] += dpad[s + x];
        }
  }
}

}  // namespace

NodeId conv2d(Tape& t, NodeId input, NodeId weight, NodeId bias, int stride, Padding padding) {
  const Tensor& in = t.val(input);
  const Tensor& wt = t.val(weight);
  const Tensor& bs = t.val(bias);
  const ConvGeom g = conv_geometry(in, wt, bs, stride, padding);

  const std::vector<double> pad = pad_input(in, g);
  Tensor out(g.batched ? std::vector<int>{g.n, g.cout, g.hout, g.wout}
                       : std::vector<int>{g.cout, g.hout, g.wout});
  const std::size_t plane_out = static_cast<std::size_t>(g.hout) * g.wout;
  for (int b = 0; b < g.n; ++b) {
    for (int oc = 0; oc < g.cout; ++oc) {
      double* dst = out.data.data() + (static_cast<std::size_t>(b) * g.cout + oc) * plane_out;
      std::fill(dst, dst + plane_out, bs.data[static_cast<std::size_t>(oc)]);
      for (int ic = 0; ic < g.cin; ++ic) {
        const std::size_t pbase =
            (static_cast<std::size_t>(b) * g.cin + ic) * static_cast<std::size_t>(g.hp) * g.wp;
        for (int ky = 0; ky < g.k; ++ky) {
          for (int kx = 0; kx < g.k; ++kx) {
            const double wv =
                wt.data[((static_cast<std::size_t>(oc) * g.cin + ic) * g.k + ky) * g.k + kx];
            for (int yo = 0; yo < g.hout; ++yo) {
              const double* prow =
                  &pad[pbase + static_cast<std::size_t>(yo * g.stride + ky) * g.wp + kx];
              double* drow = dst + static_cast<std::size_t>(yo) * g.wout;
              for (int xo = 0; xo < g.wout; ++xo) drow[xo] += wv * prow[xo * g.stride];
            }
          }
        }
      }
    }
  }

  return t.push(std::move(out), {input, weight, bias},
                [g, input, weight, bias](Tape& tp, NodeId self) {
                  conv2d_backward(tp, self, g, input, weight, bias);
                },
                "conv2d");
}

// ---------------------------------------------------------------------------
// elementwise

NodeId relu(Tape& t, NodeId x) {
  const Tensor& in = t.val(x);
  Tensor out(in.shape);
  for (std::size_t i = 0; i < in.data.size(); ++i) out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
  return t.push(std::move(out), {x},
                [x](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  if (double* din = tp.in_grad(x)) {
                    const Tensor& v = tp.val(x);
                    for (std::size_t i = 0; i < dout.size(); ++i)
                      if (v.data[i] > 0.0) din[i] += dout[i];  // subgradient at 0 is 0
                  }
                },
                "relu");
}

NodeId sigmoid(Tape& t, NodeId x) {
  const Tensor& in = t.val(x);
  Tensor out(in.shape);
  for (std::size_t i = 0; i < in.data.size(); ++i) {
    const double v = in.data[i];
    if (v >= 0.0) {
      out.data[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out.data[i] = e / (1.0 + e);
    }
  }
  return t.push(std::move(out), {x},
                [x](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  if (double* din = tp.in_grad(x)) {
                    const Tensor& y = tp.val(self);
                    for (std::size_t i = 0; i < dout.size(); ++i)
                      din[i] += dout[i] * y.data[i] * (1.0 - y.data[i]);
                  }
                },
                "sigmoid");
}

// ---------------------------------------------------------------------------
// pooling

namespace {

void require_rank3(const Tensor& x, const char* op) {
  if (x.rank() != 3)
    throw ShapeError(std::string(op) + ": expected rank 3 [C,H,W], got " + x.shape_str());
}

}  // namespace

NodeId pool_max2x2(Tape& t, NodeId x) {
  const Tensor& in = t.val(x);
  require_rank3(in, "pool2d(max2x2)");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("pool2d(max2x2): spatial dims must be even, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  Tensor out({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int xo = 0; xo < w / 2; ++xo) {
        double best = in.at(ch, 2 * y, 2 * xo);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const double v = in.at(ch, 2 * y + dy, 2 * xo + dx);
            if (v > best) best = v;
          }
        out.at(ch, y, xo) = best;
      }
  return t.push(std::move(out), {x},
                [x, c, h, w](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  double* din = tp.in_grad(x);
                  if (!din) return;
                  const Tensor& in = tp.val(x);
                  const int wo = w / 2;
                  for (int ch = 0; ch < c; ++ch)
                    for (int y = 0; y < h / 2; ++y)
                      for (int xo = 0; xo < wo; ++xo) {
                        int by = 2 * y, bx = 2 * xo;
                        double best = in.at(ch, by, bx);
                        for (int dy = 0; dy < 2; ++dy)
                          for (int dx = 0; dx < 2; ++dx) {
                            const double v = in.at(ch, 2 * y + dy, 2 * xo + dx);
                            if (v > best) {  // strict: first row-major max wins ties
                              best = v;
                              by = 2 * y + dy;
                              bx = 2 * xo + dx;
                            }
                          }
                        din[(static_cast<std::size_t>(ch) * h + by) * w + bx] +=
                            dout[(static_cast<std::size_t>(ch) * (h / 2) + y) * wo + xo];
                      }
                },
                "pool_max2x2");
}

NodeId pool_global_max(Tape& t, NodeId x) {
  const Tensor& in = t.val(x);
  require_rank3(in, "pool2d(global_max)");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  Tensor out({c, 1, 1});
  for (int ch = 0; ch < c; ++ch) {
    double best = in.at(ch, 0, 0);
    for (int y = 0; y < h; ++y)
      for (int xo = 0; xo < w; ++xo) best = std::max(best, in.at(ch, y, xo));
    out.data[static_cast<std::size_t>(ch)] = best;
  }
  return t.push(std::move(out), {x},
                [x, c, h, w](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  double* din = tp.in_grad(x);
                  if (!din) return;
                  const Tensor& in = tp.val(x);
                  for (int ch = 0; ch < c; ++ch) {
                    int by = 0, bx = 0;
                    double best = in.at(ch, 0, 0);
                    for (int y = 0; y < h; ++y)
                      for (int xo = 0; xo < w; ++xo)
                        if (in.at(ch, y, xo) > best) {
                          best = in.at(ch, y, xo);
                          by = y;
                          bx = xo;
                        }
                    din[(static_cast<std::size_t>(ch) * h + by) * w + bx] +=
                        dout[static_cast<std::size_t>(ch)];
                  }
                },
                "pool_global_max");
}

namespace {
inline int bin_lo(int i, int n, int bins) { return i * n / bins; }
inline int bin_hi(int i, int n, int bins) { return (i + 1) * n / bins; }
}  // namespace

NodeId pool_adaptive_avg(Tape& t, NodeId x, int bins) {
  const Tensor& in = t.val(x);
  require_rank3(in, "pool2d(adaptive_avg)");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (bins < 1 || bins > std::min(h, w))
    throw ShapeError("pool2d(adaptive_avg): bins=" + std::to_string(bins) +
                     " must be in [1, min(H,W)=" + std::to_string(std::min(h, w)) + "]");
  Tensor out({c, bins, bins});
  for (int ch = 0; ch < c; ++ch)
    for (int by = 0; by < bins; ++by)
      for (int bx = 0; bx < bins; ++bx) {
        double acc = 0.0;
        const int y0 = bin_lo(by, h, bins), y1 = bin_hi(by, h, bins);
        const int x0 = bin_lo(bx, w, bins), x1 = bin_hi(bx, w, bins);
        for (int y = y0; y < y1; ++y)
          for (int xo = x0; xo < x1; ++xo) acc += in.at(ch, y, xo);
        out.at(ch, by, bx) = acc / ((y1 - y0) * (x1 - x0));
      }
  return t.push(std::move(out), {x},
                [x, c, h, w, bins](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  double* din = tp.in_grad(x);
                  if (!din) return;
                  for (int ch = 0; ch < c; ++ch)
                    for (int by = 0; by < bins; ++by)
                      for (int bx = 0; bx < bins; ++bx) {
                        const int y0 = bin_lo(by, h, bins), y1 = bin_hi(by, h, bins);
                        const int x0 = bin_lo(bx, w, bins), x1 = bin_hi(bx, w, bins);
                        const double g =
                            dout[(static_cast<std::size_t>(ch) * bins + by) * bins + bx] /
                            ((y1 - y0) * (x1 - x0));
                        for (int y = y0; y < y1; ++y)
                          for (int xo = x0; xo < x1; ++xo)
                            din[(static_cast<std::size_t>(ch) * h + y) * w + xo] += g;
                      }
                },
                "pool_adaptive_avg");
}

NodeId pool_avg2x2(Tape& t, NodeId x) {
  const Tensor& in = t.val(x);
  require_rank3(in, "pool2d(avg2x2)");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("pool2d(avg2x2): spatial dims must be even, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  Tensor out({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int xo = 0; xo < w / 2; ++xo)
        out.at(ch, y, xo) = 0.25 * (in.at(ch, 2 * y, 2 * xo) + in.at(ch, 2 * y, 2 * xo + 1) +
                                    in.at(ch, 2 * y + 1, 2 * xo) + in.at(ch, 2 * y + 1, 2 * xo + 1));
  return t.push(std::move(out), {x},
                [x, c, h, w](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  double* din = tp.in_grad(x);
                  if (!din) return;
                  const int wo = w / 2;
                  for (int ch = 0; ch < c; ++ch)
                    for (int y = 0; y < h / 2; ++y)
                      for (int xo = 0; xo < wo; ++xo) {
                        const double g =
                            0.25 * dout[(static_cast<std::size_t>(ch) * (h / 2) + y) * wo + xo];
                        for (int dy = 0; dy < 2; ++dy)
                          for (int dx = 0; dx < 2; ++dx)
                            din[(static_cast<std::size_t>(ch) * h + 2 * y + dy) * w + 2 * xo + dx] +=
                                g;
                      }
                },
                "pool_avg2x2");
}

// ---------------------------------------------------------------------------
// resize / concat / reshape

NodeId resize_nearest(Tape& t, NodeId x, int factor) {
  const Tensor& in = t.val(x);
  require_rank3(in, "resize_nearest");
  if (factor < 1)
    throw ShapeError("resize_nearest: factor must be >= 1, got " + std::to_string(factor));
  return resize_nearest_to(t, x, in.dim(1) * factor, in.dim(2) * factor);
}

NodeId resize_nearest_to(Tape& t, NodeId x, int out_h, int out_w) {
  const Tensor& in = t.val(x);
  require_rank3(in, "resize_nearest");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_nearest: target dims must be positive");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const int sy = static_cast<int>(static_cast<std::int64_t>(y) * h / out_h);
      for (int xo = 0; xo < out_w; ++xo) {
        const int sx = static_cast<int>(static_cast<std::int64_t>(xo) * w / out_w);
        out.at(ch, y, xo) = in.at(ch, sy, sx);
      }
    }
  return t.push(std::move(out), {x},
                [x, c, h, w, out_h, out_w](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  double* din = tp.in_grad(x);
                  if (!din) return;
                  for (int ch = 0; ch < c; ++ch)
                    for (int y = 0; y < out_h; ++y) {
                      const int sy = static_cast<int>(static_cast<std::int64_t>(y) * h / out_h);
                      for (int xo = 0; xo < out_w; ++xo) {
                        const int sx = static_cast<int>(static_cast<std::int64_t>(xo) * w / out_w);
                        din[(static_cast<std::size_t>(ch) * h + sy) * w + sx] +=
                            dout[(static_cast<std::size_t>(ch) * out_h + y) * out_w + xo];
                      }
                    }
                },
                "resize_nearest");
}

NodeId concat_channels(Tape& t, const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no parts given");
  const Tensor& first = t.val(parts[0]);
  require_rank3(first, "concat_channels");
  const int h = first.dim(1), w = first.dim(2);
  int ctotal = 0;
  for (NodeId p : parts) {
    const Tensor& tp = t.val(p);
    require_rank3(tp, "concat_channels");
    if (tp.dim(1) != h || tp.dim(2) != w)
      throw ShapeError("concat_channels: spatial mismatch on axes 1,2: expected " +
                       std::to_string(h) + "x" + std::to_string(w) + ", got " + tp.shape_str());
    ctotal += tp.dim(0);
  }
  Tensor out({ctotal, h, w});
  std::size_t off = 0;
  for (NodeId p : parts) {
    const Tensor& tp = t.val(p);
    std::memcpy(out.data.data() + off, tp.data.data(), tp.data.size() * sizeof(double));
    off += tp.data.size();
  }
  return t.push(std::move(out), parts,
                [parts](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  std::size_t off = 0;
                  for (NodeId p : parts) {
                    const std::size_t n = tp.val(p).data.size();
                    if (double* din = tp.in_grad(p))
                      for (std::size_t i = 0; i < n; ++i) din[i] += dout[off + i];
                    off += n;
                  }
                },
                "concat_channels");
}

NodeId reshape(Tape& t, NodeId x, std::vector<int> shape) {
  const Tensor& in = t.val(x);
  Tensor out = Tensor::from(std::move(shape), in.data);
  if (out.numel() != in.numel())
    throw ShapeError("reshape: element count mismatch " + in.shape_str());
  return t.push(std::move(out), {x},
                [x](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  if (double* din = tp.in_grad(x))
                    for (std::size_t i = 0; i < dout.size(); ++i) din[i] += dout[i];
                },
                "reshape");
}

// ---------------------------------------------------------------------------
// fully connected / channel scale

NodeId fully_connected(Tape& t, NodeId x, NodeId weight, NodeId bias) {
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(weight);
  const Tensor& bv = t.val(bias);
  if (xv.rank() != 1)
    throw ShapeError("fully_connected: input must be rank 1, got " + xv.shape_str());
  if (wv.rank() != 2)
    throw ShapeError("fully_connected: weight must be rank 2 [m,n], got " + wv.shape_str());
  const int m = wv.dim(0), n = wv.dim(1);
  if (xv.dim(0) != n)
    throw ShapeError("fully_connected: weight axis 1 (" + std::to_string(n) +
                     ") does not match input length " + std::to_string(xv.dim(0)));
  if (bv.rank() != 1 || bv.dim(0) != m)
    throw ShapeError("fully_connected: bias must be rank 1 of length " + std::to_string(m) +
                     ", got " + bv.shape_str());
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    double acc = bv.data[static_cast<std::size_t>(i)];
    const double* row = wv.data.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) acc += row[j] * xv.data[static_cast<std::size_t>(j)];
    out.data[static_cast<std::size_t>(i)] = acc;
  }
  return t.push(std::move(out), {x, weight, bias},
                [x, weight, bias, m, n](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  const Tensor& xv = tp.val(x);
                  const Tensor& wv = tp.val(weight);
                  double* dx = tp.in_grad(x);
                  double* dw = tp.in_grad(weight);
                  double* db = tp.in_grad(bias);
                  for (int i = 0; i < m; ++i) {
                    const double g = dout[static_cast<std::size_t>(i)];
                    if (db) db[i] += g;
                    const double* row = wv.data.data() + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                      if (dx) dx[j] += row[j] * g;
                      if (dw) dw[static_cast<std::size_t>(i) * n + j] +=
                          xv.data[static_cast<std::size_t>(j)] * g;
                    }
                  }
                },
                "fully_connected");
}

NodeId channel_scale(Tape& t, NodeId planes, NodeId gains) {
  const Tensor& p = t.val(planes);
  const Tensor& s = t.val(gains);
  require_rank3(p, "channel_scale");
  if (s.rank() != 1)
    throw ShapeError("channel_scale: gains must be rank 1, got " + s.shape_str());
  const int c = p.dim(0), h = p.dim(1), w = p.dim(2);
  if (s.dim(0) != c)
    throw ShapeError("channel_scale: gains length " + std::to_string(s.dim(0)) +
                     " does not match channel axis " + std::to_string(c));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const double g = s.data[static_cast<std::size_t>(ch)];
    const double* src = p.data.data() + static_cast<std::size_t>(ch) * plane;
    double* dst = out.data.data() + static_cast<std::size_t>(ch) * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = g * src[i];
  }
  return t.push(std::move(out), {planes, gains},
                [planes, gains, c, plane](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  const Tensor& p = tp.val(planes);
                  const Tensor& s = tp.val(gains);
                  double* dp = tp.in_grad(planes);
                  double* ds = tp.in_grad(gains);
                  for (int ch = 0; ch < c; ++ch) {
                    const std::size_t base = static_cast<std::size_t>(ch) * plane;
                    if (dp) {
                      const double g = s.data[static_cast<std::size_t>(ch)];
                      for (std::size_t i = 0; i < plane; ++i) dp[base + i] += g * dout[base + i];
                    }
                    if (ds) {
                      double acc = 0.0;
                      for (std::size_t i = 0; i < plane; ++i) acc += p.data[base + i] * dout[base + i];
                      ds[ch] += acc;
                    }
                  }
                },
                "channel_scale");
}

// ---------------------------------------------------------------------------
// arithmetic

NodeId add(Tape& t, NodeId a, NodeId b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.shape != bv.shape)
    throw ShapeError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out(av.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  return t.push(std::move(out), {a, b},
                [a, b](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  if (double* da = tp.in_grad(a))
                    for (std::size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
                  if (double* db = tp.in_grad(b))
                    for (std::size_t i = 0; i < dout.size(); ++i) db[i] += dout[i];
                },
                "add");
}

NodeId mul(Tape& t, NodeId a, NodeId b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.shape != bv.shape)
    throw ShapeError("mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out(av.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
  return t.push(std::move(out), {a, b},
                [a, b](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  const Tensor& av = tp.val(a);
                  const Tensor& bv = tp.val(b);
                  if (double* da = tp.in_grad(a))
                    for (std::size_t i = 0; i < dout.size(); ++i) da[i] += bv.data[i] * dout[i];
                  if (double* db = tp.in_grad(b))
                    for (std::size_t i = 0; i < dout.size(); ++i) db[i] += av.data[i] * dout[i];
                },
                "mul");
}

NodeId scale(Tape& t, NodeId x, double c) {
  const Tensor& in = t.val(x);
  Tensor out(in.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = c * in.data[i];
  return t.push(std::move(out), {x},
                [x, c](Tape& tp, NodeId self) {
                  const auto dout = tp.out_grad(self);
                  if (double* din = tp.in_grad(x))
                    for (std::size_t i = 0; i < dout.size(); ++i) din[i] += c * dout[i];
                },
                "scale");
}

NodeId sum(Tape& t, NodeId x) {
  const Tensor& in = t.val(x);
  double acc = 0.0;
  for (double v : in.data) acc += v;
  return t.push(Tensor::from({1}, {acc}), {x},
                [x](Tape& tp, NodeId self) {
                  const double g = tp.out_grad(self)[0];
                  if (double* din = tp.in_grad(x)) {
                    const std::size_t n = tp.val(x).data.size();
                    for (std::size_t i = 0; i < n; ++i) din[i] += g;
                  }
                },
                "sum");
}

// ---------------------------------------------------------------------------
// gradient check

double gradient_check(const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& f,
                      std::vector<Tensor> inputs, double eps) {
  const auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<NodeId> ids;
    ids.reserve(xs.size());
    for (const Tensor& x : xs) ids.push_back(t.constant(x));
    const NodeId out = f(t, ids);
    if (t.val(out).numel() != 1)
      throw ContractError("gradient_check: function must be scalar-valued");
    return t.val(out).data[0];
  };

  // analytic pass
  Tape t;
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const Tensor& x : inputs) ids.push_back(t.leaf(x));
  const NodeId out = f(t, ids);
  if (t.val(out).numel() != 1)
    throw ContractError("gradient_check: function must be scalar-valued");
  t.backward(out);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double>& analytic = t.grad(ids[k]);
    for (std::size_t e = 0; e < inputs[k].data.size(); ++e) {
      const double keep = inputs[k].data[e];
      inputs[k].data[e] = keep + eps;
      const double fp = eval(inputs);
      inputs[k].data[e] = keep - eps;
      const double fm = eval(inputs);
      inputs[k].data[e] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic.empty() ? 0.0 : analytic[e];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace msdnet
