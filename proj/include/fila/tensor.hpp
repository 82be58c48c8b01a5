#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace fila {

// Dense row-major float32 array. Shapes used throughout: vectors {n},
// feature maps {C,H,W}, matrices {m,n}, conv kernels {Cout,Cin,k,k}
// (or {Cin,Cout,k,k} for transposed convolution), scalars {1}.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, float fill = 0.0f);
  static Tensor from(std::vector<int> s, std::vector<float> values);

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;
  float scalar() const;  // requires numel() == 1
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Reverse-mode tape. Operations append entries in topological order; each
// entry stores its forward value and a backward rule that scatters the
// entry's gradient into its inputs. Nodes created through `constant` (or
// reachable only from constants) are skipped during backward.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  int leaf(Tensor value) { return push(std::move(value), {}, nullptr, true); }
  int constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }
  // Used by operation implementations. `needs_grad` of the new node is
  // derived from its inputs.
  int record(Tensor value, std::vector<int> inputs, BackwardFn back);

  const Tensor& val(int id) const { return entries_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return entries_[static_cast<std::size_t>(id)].needs_grad; }
  // Gradient buffer of a node; valid after backward(). Same length as the
  // node's value. Zero for nodes the loss does not reach.
  const std::vector<float>& grad(int id) const;
  std::vector<float>& grad_buffer(int id);

  // Seeds the scalar loss with gradient 1 and walks the tape in reverse.
  void backward(int loss_id);

  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    Tensor value;
    std::vector<float> grad;
    std::vector<int> inputs;
    BackwardFn back;
    bool needs_grad = false;
  };

  int push(Tensor value, std::vector<int> inputs, BackwardFn back, bool needs_grad);

  std::vector<Entry> entries_;
  bool backward_ran_ = false;
};

// ---- differentiable operations -------------------------------------------

// input {Cin,H,W}, kernel {Cout,Cin,k,k}, bias {Cout}; zero padding.
int conv2d(Tape& t, int input, int kernel, int bias, int stride, int pad);

// input {Cin,H,W}, kernel {Cin,Cout,k,k}, bias {Cout}. Forward pass is the
// adjoint of conv2d's forward w.r.t. its input.
int conv_transpose2d(Tape& t, int input, int kernel, int bias, int stride, int pad);

enum class NormMode { kTrain, kInfer };

// Per-channel normalization over the spatial positions of one example
// (mini-batch of size 1). In train mode batch statistics are used and the
// running stats tensors {C} are updated in place with
// running = momentum * running + (1 - momentum) * batch.
int batch_norm(Tape& t, int x, int gamma, int beta, float eps, NormMode mode,
               Tensor* running_mean, Tensor* running_var, float momentum);

enum class Act { kLeakyRelu, kTanh, kSigmoid };

int activation(Tape& t, int x, Act kind, float slope = 0.2f);

// x {n}, weight {m,n}, bias {m} -> {m}.
int affine(Tape& t, int x, int weight, int bias);

// a {C1,H,W}, b {C2,H,W} -> {C1+C2,H,W}; backward splits the gradient.
int concat_channels(Tape& t, int a, int b);

// 2x2 average pooling, spatial dims must be even.
int avg_pool2(Tape& t, int x);

int reshape(Tape& t, int x, std::vector<int> new_shape);

int add(Tape& t, int a, int b);
int scale(Tape& t, int x, float c);
int mul_elem(Tape& t, int a, int b);
int sum(Tape& t, int x);                       // -> {1}
int mean_abs_diff(Tape& t, int a, int b);      // -> {1}
int sum_abs_diff(Tape& t, int a, int b);       // -> {1}
int frob_sq_diff(Tape& t, int a, int b);       // sum((a-b)^2) -> {1}
// Elementwise ln(clamp(x, lo, hi)); gradient is zero where the clamp binds.
int log_clamped(Tape& t, int x, float lo, float hi);
int one_minus(Tape& t, int x);                 // 1 - x elementwise

}  // namespace fila
