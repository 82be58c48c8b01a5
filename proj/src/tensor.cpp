#include "fila/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace fila {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

void require_rank(const Tensor& t, int rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    fail(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got shape " +
         shape_str(t.shape));
  }
}

}  // namespace

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)) {
  data.assign(shape_numel(shape), fill);
}

Tensor Tensor::from(std::vector<int> s, std::vector<float> values) {
  require(shape_numel(s) == values.size(),
          "Tensor::from: " + std::to_string(values.size()) + " values do not fill shape " + shape_str(s));
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(values);
  return t;
}

bool Tensor::all_finite() const {
  for (float v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

float Tensor::scalar() const {
  require(numel() == 1, "Tensor::scalar: tensor of shape " + shape_str(shape) + " is not a scalar");
  return data[0];
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    require(d >= 0, "shape_numel: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "}";
  return os.str();
}

// ---- Tape ------------------------------------------------------------------

int Tape::push(Tensor value, std::vector<int> inputs, BackwardFn back, bool needs_grad) {
  Entry e;
  e.value = std::move(value);
  e.inputs = std::move(inputs);
  e.back = std::move(back);
  e.needs_grad = needs_grad;
  entries_.push_back(std::move(e));
  return static_cast<int>(entries_.size()) - 1;
}

int Tape::record(Tensor value, std::vector<int> inputs, BackwardFn back) {
  bool needs = false;
  for (int id : inputs) {
    require(id >= 0 && id < static_cast<int>(entries_.size()),
            "Tape::record: input node " + std::to_string(id) + " is not on this tape");
    needs = needs || entries_[static_cast<std::size_t>(id)].needs_grad;
  }
  return push(std::move(value), std::move(inputs), std::move(back), needs);
}

const std::vector<float>& Tape::grad(int id) const {
  const Entry& e = entries_[static_cast<std::size_t>(id)];
  require(e.needs_grad, "Tape::grad: node " + std::to_string(id) + " does not carry a gradient");
  if (!backward_ran_) throw std::runtime_error("Tape::grad: backward() has not run");
  return e.grad;
}

std::vector<float>& Tape::grad_buffer(int id) {
  return entries_[static_cast<std::size_t>(id)].grad;
}

void Tape::backward(int loss_id) {
  require(loss_id >= 0 && loss_id < static_cast<int>(entries_.size()),
          "Tape::backward: loss node is not on this tape");
  const Entry& loss = entries_[static_cast<std::size_t>(loss_id)];
  require(loss.value.numel() == 1,
          "Tape::backward: loss must be scalar, got shape " + shape_str(loss.value.shape));
  for (Entry& e : entries_) {
    if (e.needs_grad) {
      e.grad.assign(e.value.numel(), 0.0f);
    }
  }
  backward_ran_ = true;
  if (!loss.needs_grad) return;  // loss depends only on constants
  entries_[static_cast<std::size_t>(loss_id)].grad[0] = 1.0f;
  for (int id = loss_id; id >= 0; --id) {
    Entry& e = entries_[static_cast<std::size_t>(id)];
    if (e.needs_grad && e.back) e.back(*this, id);
  }
}

// ---- conv2d / conv_transpose2d ----------------------------------------------

namespace {

struct ConvDims {
  int cin, h, w, cout, k, ho, wo;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                   int pad, bool transposed) {
  const char* op = transposed ? "conv_transpose2d" : "conv2d";
  require_rank(input, 3, op, "input");
  require_rank(kernel, 4, op, "kernel");
  require_rank(bias, 1, op, "bias");
  ConvDims d{};
  d.cin = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  require(kernel.dim(2) == kernel.dim(3),
          std::string(op) + ": kernel must be square, got " + shape_str(kernel.shape));
  d.k = kernel.dim(2);
  require(stride >= 1, std::string(op) + ": stride must be >= 1, got " + std::to_string(stride));
  require(pad >= 0, std::string(op) + ": pad must be >= 0, got " + std::to_string(pad));
  if (!transposed) {
    require(kernel.dim(1) == d.cin, "conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                                        " input channels but input has " + std::to_string(d.cin));
    d.cout = kernel.dim(0);
    require(d.h + 2 * pad >= d.k && d.w + 2 * pad >= d.k,
            "conv2d: kernel size " + std::to_string(d.k) + " exceeds padded input " +
                std::to_string(d.h + 2 * pad) + "x" + std::to_string(d.w + 2 * pad));
    d.ho = (d.h + 2 * pad - d.k) / stride + 1;
    d.wo = (d.w + 2 * pad - d.k) / stride + 1;
  } else {
    require(kernel.dim(0) == d.cin,
            "conv_transpose2d: kernel expects " + std::to_string(kernel.dim(0)) +
                " input channels but input has " + std::to_string(d.cin));
    d.cout = kernel.dim(1);
    d.ho = (d.h - 1) * stride - 2 * pad + d.k;
    d.wo = (d.w - 1) * stride - 2 * pad + d.k;
    require(d.ho > 0 && d.wo > 0, "conv_transpose2d: output would be empty");
  }
  require(bias.dim(0) == d.cout, std::string(op) + ": bias length " + std::to_string(bias.dim(0)) +
                                     " does not match output channels " + std::to_string(d.cout));
  return d;
}

}  // namespace

int conv2d(Tape& t, int input, int kernel, int bias, int stride, int pad) {
  const Tensor& in = t.val(input);
  const Tensor& ker = t.val(kernel);
  const Tensor& b = t.val(bias);
  const ConvDims d = conv_dims(in, ker, b, stride, pad, false);

  Tensor out({d.cout, d.ho, d.wo});
  std::vector<double> plane(static_cast<std::size_t>(d.ho) * d.wo);
  for (int co = 0; co < d.cout; ++co) {
    std::fill(plane.begin(), plane.end(), static_cast<double>(b.data[static_cast<std::size_t>(co)]));
    for (int ci = 0; ci < d.cin; ++ci) {
      const float* in_ch = in.data.data() + static_cast<std::size_t>(ci) * d.h * d.w;
      for (int kh = 0; kh < d.k; ++kh) {
        for (int kw = 0; kw < d.k; ++kw) {
          const double kval =
              ker.data[((static_cast<std::size_t>(co) * d.cin + ci) * d.k + kh) * d.k + kw];
          for (int oh = 0; oh < d.ho; ++oh) {
            const int ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= d.h) continue;
            const float* in_row = in_ch + static_cast<std::size_t>(ih) * d.w;
            double* out_row = plane.data() + static_cast<std::size_t>(oh) * d.wo;
            for (int ow = 0; ow < d.wo; ++ow) {
              const int iw = ow * stride - pad + kw;
              if (iw < 0 || iw >= d.w) continue;
              out_row[ow] += kval * in_row[iw];
            }
          }
        }
      }
    }
    float* out_ch = out.data.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
    for (std::size_t i = 0; i < plane.size(); ++i) out_ch[i] = static_cast<float>(plane[i]);
  }

  auto back = [input, kernel, bias, d, stride, pad](Tape& tp, int self) {
    const std::vector<float>& go = tp.grad_buffer(self);
    const Tensor& inv = tp.val(input);
    const Tensor& kerv = tp.val(kernel);
    if (tp.needs_grad(input)) {
      std::vector<float>& gi = tp.grad_buffer(input);
      for (int co = 0; co < d.cout; ++co) {
        const float* go_ch = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
        for (int ci = 0; ci < d.cin; ++ci) {
          float* gi_ch = gi.data() + static_cast<std::size_t>(ci) * d.h * d.w;
          for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
              const float kval =
                  kerv.data[((static_cast<std::size_t>(co) * d.cin + ci) * d.k + kh) * d.k + kw];
              for (int oh = 0; oh < d.ho; ++oh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= d.h) continue;
                float* gi_row = gi_ch + static_cast<std::size_t>(ih) * d.w;
                const float* go_row = go_ch + static_cast<std::size_t>(oh) * d.wo;
                for (int ow = 0; ow < d.wo; ++ow) {
                  const int iw = ow * stride - pad + kw;
                  if (iw < 0 || iw >= d.w) continue;
                  gi_row[iw] += kval * go_row[ow];
                }
              }
            }
          }
        }
      }
    }
    if (tp.needs_grad(kernel)) {
      std::vector<float>& gk = tp.grad_buffer(kernel);
      for (int co = 0; co < d.cout; ++co) {
        const float* go_ch = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
        for (int ci = 0; ci < d.cin; ++ci) {
          const float* in_ch = inv.data.data() + static_cast<std::size_t>(ci) * d.h * d.w;
          for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
              double acc = 0.0;
              for (int oh = 0; oh < d.ho; ++oh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= d.h) continue;
                const float* in_row = in_ch + static_cast<std::size_t>(ih) * d.w;
                const float* go_row = go_ch + static_cast<std::size_t>(oh) * d.wo;
                for (int ow = 0; ow < d.wo; ++ow) {
                  const int iw = ow * stride - pad + kw;
                  if (iw < 0 || iw >= d.w) continue;
                  acc += static_cast<double>(in_row[iw]) * go_row[ow];
                }
              }
              gk[((static_cast<std::size_t>(co) * d.cin + ci) * d.k + kh) * d.k + kw] +=
                  static_cast<float>(acc);
            }
          }
        }
      }
    }
    if (tp.needs_grad(bias)) {
      std::vector<float>& gb = tp.grad_buffer(bias);
      for (int co = 0; co < d.cout; ++co) {
        const float* go_ch = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
        double acc = 0.0;
        for (int i = 0; i < d.ho * d.wo; ++i) acc += go_ch[i];
        gb[static_cast<std::size_t>(co)] += static_cast<float>(acc);
      }
    }
  };
  return t.record(std::move(out), {input, kernel, bias}, back);
}

int conv_transpose2d(Tape& t, int input, int kernel, int bias, int stride, int pad) {
  const Tensor& in = t.val(input);
  const Tensor& ker = t.val(kernel);
  const Tensor& b = t.val(bias);
  const ConvDims d = conv_dims(in, ker, b, stride, pad, true);

  Tensor out({d.cout, d.ho, d.wo});
  std::vector<double> plane(static_cast<std::size_t>(d.ho) * d.wo);
  for (int co = 0; co < d.cout; ++co) {
    std::fill(plane.begin(), plane.end(), static_cast<double>(b.data[static_cast<std::size_t>(co)]));
    for (int ci = 0; ci < d.cin; ++ci) {
      const float* in_ch = in.data.data() + static_cast<std::size_t>(ci) * d.h * d.w;
      for (int kh = 0; kh < d.k; ++kh) {
        for (int kw = 0; kw < d.k; ++kw) {
          const double kval =
              ker.data[((static_cast<std::size_t>(ci) * d.cout + co) * d.k + kh) * d.k + kw];
          for (int ih = 0; ih < d.h; ++ih) {
            const int oh = ih * stride - pad + kh;
            if (oh < 0 || oh >= d.ho) continue;
            const float* in_row = in_ch + static_cast<std::size_t>(ih) * d.w;
            double* out_row = plane.data() + static_cast<std::size_t>(oh) * d.wo;
            for (int iw = 0; iw < d.w; ++iw) {
              const int ow = iw * stride - pad + kw;
              if (ow < 0 || ow >= d.wo) continue;
              out_row[ow] += kval * in_row[iw];
            }
          }
        }
      }
    }
    float* out_ch = out.data.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
    for (std::size_t i = 0; i < plane.size(); ++i) out_ch[i] = static_cast<float>(plane[i]);
  }

  auto back = [input, kernel, bias, d, stride, pad](Tape& tp, int self) {
    const std::vector<float>& go = tp.grad_buffer(self);
    const Tensor& inv = tp.val(input);
    const Tensor& kerv = tp.val(kernel);
    if (tp.needs_grad(input)) {
      std::vector<float>& gi = tp.grad_buffer(input);
      for (int co = 0; co < d.cout; ++co) {
        const float* go_ch = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
        for (int ci = 0; ci < d.cin; ++ci) {
          float* gi_ch = gi.data() + static_cast<std::size_t>(ci) * d.h * d.w;
          for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
              const float kval =
                  kerv.data[((static_cast<std::size_t>(ci) * d.cout + co) * d.k + kh) * d.k + kw];
              for (int ih = 0; ih < d.h; ++ih) {
                const int oh = ih * stride - pad + kh;
                if (oh < 0 || oh >= d.ho) continue;
                float* gi_row = gi_ch + static_cast<std::size_t>(ih) * d.w;
                const float* go_row = go_ch + static_cast<std::size_t>(oh) * d.wo;
                for (int iw = 0; iw < d.w; ++iw) {
                  const int ow = iw * stride - pad + kw;
                  if (ow < 0 || ow >= d.wo) continue;
                  gi_row[iw] += kval * go_row[ow];
                }
              }
            }
          }
        }
      }
    }
    if (tp.needs_grad(kernel)) {
      std::vector<float>& gk = tp.grad_buffer(kernel);
      for (int co = 0; co < d.cout; ++co) {
        const float* go_ch = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
        for (int ci = 0; ci < d.cin; ++ci) {
          const float* in_ch = inv.data.data() + static_cast<std::size_t>(ci) * d.h * d.w;
          for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
              double acc = 0.0;
              for (int ih = 0; ih < d.h; ++ih) {
                const int oh = ih * stride - pad + kh;
                if (oh < 0 || oh >= d.ho) continue;
                const float* in_row = in_ch + static_cast<std::size_t>(ih) * d.w;
                const float* go_row = go_ch + static_cast<std::size_t>(oh) * d.wo;
                for (int iw = 0; iw < d.w; ++iw) {
                  const int ow = iw * stride - pad + kw;
                  if (ow < 0 || ow >= d.wo) continue;
                  acc += static_cast<double>(in_row[iw]) * go_row[ow];
                }
              }
              gk[((static_cast<std::size_t>(ci) * d.cout + co) * d.k + kh) * d.k + kw] +=
                  static_cast<float>(acc);
            }
          }
        }
      }
    }
    if (tp.needs_grad(bias)) {
      std::vector<float>& gb = tp.grad_buffer(bias);
      for (int co = 0; co < d.cout; ++co) {
        const float* go_ch = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
        double acc = 0.0;
        for (int i = 0; i < d.ho * d.wo; ++i) acc += go_ch[i];
        gb[static_cast<std::size_t>(co)] += static_cast<float>(acc);
      }
    }
  };
  return t.record(std::move(out), {input, kernel, bias}, back);
}

// ---- batch_norm --------------------------------------------------------------

int batch_norm(Tape& t, int x, int gamma, int beta, float eps, NormMode mode,
               Tensor* running_mean, Tensor* running_var, float momentum) {
  const Tensor& xv = t.val(x);
  const Tensor& gv = t.val(gamma);
  const Tensor& bv = t.val(beta);
  require_rank(xv, 3, "batch_norm", "x");
  require(eps > 0.0f, "batch_norm: eps must be > 0, got " + std::to_string(eps));
  const int c = xv.dim(0);
  const int n = xv.dim(1) * xv.dim(2);
  require(gv.numel() == static_cast<std::size_t>(c) && bv.numel() == static_cast<std::size_t>(c),
          "batch_norm: gamma/beta length must equal channel count " + std::to_string(c));
  require(running_mean != nullptr && running_var != nullptr,
          "batch_norm: running stats tensors are required");
  require(running_mean->numel() == static_cast<std::size_t>(c) &&
              running_var->numel() == static_cast<std::size_t>(c),
          "batch_norm: running stats length must equal channel count " + std::to_string(c));

  Tensor out(xv.shape);
  // Normalized activations and per-channel inverse stddev, saved for backward.
  std::vector<float> xhat(xv.numel());
  std::vector<float> inv_std(static_cast<std::size_t>(c));

  for (int ci = 0; ci < c; ++ci) {
    const float* xc = xv.data.data() + static_cast<std::size_t>(ci) * n;
    float* oc = out.data.data() + static_cast<std::size_t>(ci) * n;
    float* hc = xhat.data() + static_cast<std::size_t>(ci) * n;
    double mean, var;
    if (mode == NormMode::kTrain) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += xc[i];
      mean = s / n;
      double v = 0.0;
      for (int i = 0; i < n; ++i) {
        const double dd = xc[i] - mean;
        v += dd * dd;
      }
      var = v / n;
      running_mean->data[static_cast<std::size_t>(ci)] = static_cast<float>(
          momentum * running_mean->data[static_cast<std::size_t>(ci)] + (1.0 - momentum) * mean);
      running_var->data[static_cast<std::size_t>(ci)] = static_cast<float>(
          momentum * running_var->data[static_cast<std::size_t>(ci)] + (1.0 - momentum) * var);
    } else {
      mean = running_mean->data[static_cast<std::size_t>(ci)];
      var = running_var->data[static_cast<std::size_t>(ci)];
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ci)] = static_cast<float>(inv);
    const float g = gv.data[static_cast<std::size_t>(ci)];
    const float be = bv.data[static_cast<std::size_t>(ci)];
    for (int i = 0; i < n; ++i) {
      const float h = static_cast<float>((xc[i] - mean) * inv);
      hc[i] = h;
      oc[i] = g * h + be;
    }
  }

  auto back = [x, gamma, beta, c, n, mode, xhat = std::move(xhat),
               inv_std = std::move(inv_std)](Tape& tp, int self) {
    const std::vector<float>& go = tp.grad_buffer(self);
    const Tensor& gv = tp.val(gamma);
    for (int ci = 0; ci < c; ++ci) {
      const float* go_c = go.data() + static_cast<std::size_t>(ci) * n;
      const float* h_c = xhat.data() + static_cast<std::size_t>(ci) * n;
      double s1 = 0.0, s2 = 0.0;
      for (int i = 0; i < n; ++i) {
        s1 += go_c[i];
        s2 += static_cast<double>(go_c[i]) * h_c[i];
      }
      if (tp.needs_grad(beta)) {
        tp.grad_buffer(beta)[static_cast<std::size_t>(ci)] += static_cast<float>(s1);
      }
      if (tp.needs_grad(gamma)) {
        tp.grad_buffer(gamma)[static_cast<std::size_t>(ci)] += static_cast<float>(s2);
      }
      if (tp.needs_grad(x)) {
        float* gx_c = tp.grad_buffer(x).data() + static_cast<std::size_t>(ci) * n;
        const double g = gv.data[static_cast<std::size_t>(ci)];
        const double inv = inv_std[static_cast<std::size_t>(ci)];
        if (mode == NormMode::kTrain) {
          const double m1 = s1 / n;
          const double m2 = s2 / n;
          for (int i = 0; i < n; ++i) {
            gx_c[i] += static_cast<float>(g * inv * (go_c[i] - m1 - h_c[i] * m2));
          }
        } else {
          for (int i = 0; i < n; ++i) {
            gx_c[i] += static_cast<float>(g * inv * go_c[i]);
          }
        }
      }
    }
  };
  return t.record(std::move(out), {x, gamma, beta}, back);
}

// ---- elementwise -------------------------------------------------------------

int activation(Tape& t, int x, Act kind, float slope) {
  const Tensor& xv = t.val(x);
  Tensor out(xv.shape);
  switch (kind) {
    case Act::kLeakyRelu:
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        const float v = xv.data[i];
        out.data[i] = v >= 0.0f ? v : slope * v;
      }
      break;
    case Act::kTanh:
      for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = std::tanh(xv.data[i]);
      break;
    case Act::kSigmoid:
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        out.data[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(xv.data[i]))));
      }
      break;
  }
  auto back = [x, kind, slope](Tape& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const std::vector<float>& go = tp.grad_buffer(self);
    const Tensor& xv = tp.val(x);
    const Tensor& yv = tp.val(self);
    std::vector<float>& gx = tp.grad_buffer(x);
    switch (kind) {
      case Act::kLeakyRelu:
        for (std::size_t i = 0; i < go.size(); ++i) {
          gx[i] += go[i] * (xv.data[i] >= 0.0f ? 1.0f : slope);
        }
        break;
      case Act::kTanh:
        for (std::size_t i = 0; i < go.size(); ++i) {
          gx[i] += go[i] * (1.0f - yv.data[i] * yv.data[i]);
        }
        break;
      case Act::kSigmoid:
        for (std::size_t i = 0; i < go.size(); ++i) {
          gx[i] += go[i] * yv.data[i] * (1.0f - yv.data[i]);
        }
        break;
    }
  };
  return t.record(std::move(out), {x}, back);
}

int affine(Tape& t, int x, int weight, int bias) {
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(weight);
  const Tensor& bv = t.val(bias);
  require_rank(xv, 1, "affine", "x");
  require_rank(wv, 2, "affine", "weight");
  require_rank(bv, 1, "affine", "bias");
  const int m = wv.dim(0);
  const int n = wv.dim(1);
  require(xv.dim(0) == n, "affine: weight expects input of length " + std::to_string(n) + ", got " +
                              std::to_string(xv.dim(0)));
  require(bv.dim(0) == m, "affine: bias length " + std::to_string(bv.dim(0)) +
                              " does not match output length " + std::to_string(m));
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    const float* row = wv.data.data() + static_cast<std::size_t>(i) * n;
    double acc = bv.data[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * xv.data[static_cast<std::size_t>(j)];
    out.data[static_cast<std::size_t>(i)] = static_cast<float>(acc);
  }
  auto back = [x, weight, bias, m, n](Tape& tp, int self) {
    const std::vector<float>& go = tp.grad_buffer(self);
    const Tensor& xv = tp.val(x);
    const Tensor& wv = tp.val(weight);
    if (tp.needs_grad(x)) {
      std::vector<float>& gx = tp.grad_buffer(x);
      for (int i = 0; i < m; ++i) {
        const float g = go[static_cast<std::size_t>(i)];
        const float* row = wv.data.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(j)] += g * row[j];
      }
    }
    if (tp.needs_grad(weight)) {
      std::vector<float>& gw = tp.grad_buffer(weight);
      for (int i = 0; i < m; ++i) {
        const float g = go[static_cast<std::size_t>(i)];
        float* row = gw.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) row[j] += g * xv.data[static_cast<std::size_t>(j)];
      }
    }
    if (tp.needs_grad(bias)) {
      std::vector<float>& gb = tp.grad_buffer(bias);
      for (int i = 0; i < m; ++i) gb[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(i)];
    }
  };
  return t.record(std::move(out), {x, weight, bias}, back);
}

int concat_channels(Tape& t, int a, int b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require_rank(av, 3, "concat_channels", "a");
  require_rank(bv, 3, "concat_channels", "b");
  require(av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
          "concat_channels: spatial dims differ, " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  const int c1 = av.dim(0);
  const int c2 = bv.dim(0);
  Tensor out({c1 + c2, av.dim(1), av.dim(2)});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.numel()));
  const std::size_t na = av.numel();
  auto back = [a, b, na](Tape& tp, int self) {
    const std::vector<float>& go = tp.grad_buffer(self);
    if (tp.needs_grad(a)) {
      std::vector<float>& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += go[i];
    }
    if (tp.needs_grad(b)) {
      std::vector<float>& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na + i];
    }
  };
  return t.record(std::move(out), {a, b}, back);
}

int avg_pool2(Tape& t, int x) {
  const Tensor& xv = t.val(x);
  require_rank(xv, 3, "avg_pool2", "x");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(h % 2 == 0 && w % 2 == 0, "avg_pool2: spatial dims must be even, got " + shape_str(xv.shape));
  const int ho = h / 2, wo = w / 2;
  Tensor out({c, ho, wo});
  for (int ci = 0; ci < c; ++ci) {
    const float* xc = xv.data.data() + static_cast<std::size_t>(ci) * h * w;
    float* oc = out.data.data() + static_cast<std::size_t>(ci) * ho * wo;
    for (int oh = 0; oh < ho; ++oh) {
      for (int ow = 0; ow < wo; ++ow) {
        const float* p = xc + static_cast<std::size_t>(2 * oh) * w + 2 * ow;
        oc[static_cast<std::size_t>(oh) * wo + ow] = 0.25f * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  auto back = [x, c, h, w, ho, wo](Tape& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const std::vector<float>& go = tp.grad_buffer(self);
    std::vector<float>& gx = tp.grad_buffer(x);
    for (int ci = 0; ci < c; ++ci) {
      const float* go_c = go.data() + static_cast<std::size_t>(ci) * ho * wo;
      float* gx_c = gx.data() + static_cast<std::size_t>(ci) * h * w;
      for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
          const float g = 0.25f * go_c[static_cast<std::size_t>(oh) * wo + ow];
          float* p = gx_c + static_cast<std::size_t>(2 * oh) * w + 2 * ow;
          p[0] += g;
          p[1] += g;
          p[w] += g;
          p[w + 1] += g;
        }
      }
    }
  };
  return t.record(std::move(out), {x}, back);
}

int reshape(Tape& t, int x, std::vector<int> new_shape) {
  const Tensor& xv = t.val(x);
  require(shape_numel(new_shape) == xv.numel(), "reshape: cannot view " + shape_str(xv.shape) +
                                                    " as " + shape_str(new_shape));
  Tensor out;
  out.shape = std::move(new_shape);
  out.data = xv.data;
  auto back = [x](Tape& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const std::vector<float>& go = tp.grad_buffer(self);
    std::vector<float>& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  };
  return t.record(std::move(out), {x}, back);
}

int add(Tape& t, int a, int b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.same_shape(bv),
          "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor out(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
  auto back = [a, b](Tape& tp, int self) {
    const std::vector<float>& go = tp.grad_buffer(self);
    if (tp.needs_grad(a)) {
      std::vector<float>& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (tp.needs_grad(b)) {
      std::vector<float>& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  };
  return t.record(std::move(out), {a, b}, back);
}

int scale(Tape& t, int x, float c) {
  const Tensor& xv = t.val(x);
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = c * xv.data[i];
  auto back = [x, c](Tape& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const std::vector<float>& go = tp.grad_buffer(self);
    std::vector<float>& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
  };
  return t.record(std::move(out), {x}, back);
}

int mul_elem(Tape& t, int a, int b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.same_shape(bv),
          "mul_elem: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor out(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] * bv.data[i];
  auto back = [a, b](Tape& tp, int self) {
    const std::vector<float>& go = tp.grad_buffer(self);
    const Tensor& av = tp.val(a);
    const Tensor& bv = tp.val(b);
    if (tp.needs_grad(a)) {
      std::vector<float>& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv.data[i];
    }
    if (tp.needs_grad(b)) {
      std::vector<float>& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av.data[i];
    }
  };
  return t.record(std::move(out), {a, b}, back);
}

int sum(Tape& t, int x) {
  const Tensor& xv = t.val(x);
  double acc = 0.0;
  for (float v : xv.data) acc += v;
  Tensor out({1});
  out.data[0] = static_cast<float>(acc);
  auto back = [x](Tape& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const float g = tp.grad_buffer(self)[0];
    std::vector<float>& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  };
  return t.record(std::move(out), {x}, back);
}

namespace {

int abs_diff_reduce(Tape& t, int a, int b, bool mean, const char* op) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.same_shape(bv),
          std::string(op) + ": shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  double acc = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) acc += std::abs(static_cast<double>(av.data[i]) - bv.data[i]);
  const double norm = mean ? 1.0 / static_cast<double>(av.numel()) : 1.0;
  Tensor out({1});
  out.data[0] = static_cast<float>(acc * norm);
  auto back = [a, b, norm](Tape& tp, int self) {
    const float g = tp.grad_buffer(self)[0] * static_cast<float>(norm);
    const Tensor& av = tp.val(a);
    const Tensor& bv = tp.val(b);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      const float diff = av.data[i] - bv.data[i];
      const float s = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
      if (tp.needs_grad(a)) tp.grad_buffer(a)[i] += g * s;
      if (tp.needs_grad(b)) tp.grad_buffer(b)[i] -= g * s;
    }
  };
  return t.record(std::move(out), {a, b}, back);
}

}  // namespace

int mean_abs_diff(Tape& t, int a, int b) { return abs_diff_reduce(t, a, b, true, "mean_abs_diff"); }

int sum_abs_diff(Tape& t, int a, int b) { return abs_diff_reduce(t, a, b, false, "sum_abs_diff"); }

int frob_sq_diff(Tape& t, int a, int b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.same_shape(bv),
          "frob_sq_diff: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  double acc = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) {
    const double d = static_cast<double>(av.data[i]) - bv.data[i];
    acc += d * d;
  }
  Tensor out({1});
  out.data[0] = static_cast<float>(acc);
  auto back = [a, b](Tape& tp, int self) {
    const float g = tp.grad_buffer(self)[0];
    const Tensor& av = tp.val(a);
    const Tensor& bv = tp.val(b);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      const float d = 2.0f * (av.data[i] - bv.data[i]);
      if (tp.needs_grad(a)) tp.grad_buffer(a)[i] += g * d;
      if (tp.needs_grad(b)) tp.grad_buffer(b)[i] -= g * d;
    }
  };
  return t.record(std::move(out), {a, b}, back);
}

int log_clamped(Tape& t, int x, float lo, float hi) {
  const Tensor& xv = t.val(x);
  Tensor out(xv.shape);
  std::vector<float> clamped(xv.numel());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const float c = std::min(std::max(xv.data[i], lo), hi);
    clamped[i] = c;
    out.data[i] = std::log(c);
  }
  auto back = [x, lo, hi, clamped = std::move(clamped)](Tape& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const std::vector<float>& go = tp.grad_buffer(self);
    const Tensor& xv = tp.val(x);
    std::vector<float>& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (xv.data[i] > lo && xv.data[i] < hi) gx[i] += go[i] / clamped[i];
    }
  };
  return t.record(std::move(out), {x}, back);
}

int one_minus(Tape& t, int x) {
  const Tensor& xv = t.val(x);
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = 1.0f - xv.data[i];
  auto back = [x](Tape& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const std::vector<float>& go = tp.grad_buffer(self);
    std::vector<float>& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] -= go[i];
  };
  return t.record(std::move(out), {x}, back);
}

}  // namespace fila
