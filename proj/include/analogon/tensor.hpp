#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph is a tape: every op appends a node holding its value and, when any
// input requires a gradient, a closure that pushes the node's gradient back to
// its inputs. Rows are batch entries, columns are features. Parameters live in
// ParameterStores; `Graph::parameter` wraps one as a leaf whose gradient is
// accumulated into `Parameter::grad` by `backward`.
//
// The primitive set is closed. Inference-only primitives (argmax) refuse inputs
// that carry a gradient.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace analogon::tc {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Owns a flat list of parameters. References returned by `add`/`operator[]`
/// are invalidated when more parameters are added.
class ParameterStore {
 public:
  Parameter& add(std::string name, Matrix init);
  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t scalar_count() const;
  void zero_grad();
  void copy_values_from(const ParameterStore& other);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

class Graph {
 public:
  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var parameter(Parameter& p);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient of the last `backward` target w.r.t. `v` (empty if none flowed).
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every reachable Parameter::grad.
  void backward(Var loss);

  Var matmul(Var x, Var w);
  Var add_row(Var x, Var row);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double c);
  Var add_scalar(Var x, double c);
  Var mul_rows(Var x, Var column);
  Var gelu(Var x);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6);
  Var exp(Var x);
  Var square(Var x);
  Var rowwise_dot(Var a, Var b);
  Var bilinear_columns(Var anchor, Var displacement, int rows, int cols);
  Var concat_cols(std::initializer_list<Var> parts);
  Var sum(Var x);
  Var mean(Var x);
  Var expectile(Var residual, double tau);
  Var gaussian_log_prob(Var target, Var mean, double sigma);
  Var stop_gradient(Var x);
  Var argmax_onehot(Var x);

 private:
  using Backward = std::function<void(Graph&, std::int32_t)>;
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, Backward backward = {});
  Matrix& grad_of(std::int32_t id);
  void accumulate(std::int32_t id, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(std::int32_t id, const Expr& g);
  bool any_grad(std::initializer_list<Var> vs) const;

  std::vector<Node> nodes_;
};

// Shared numeric kernels, used by both graph ops and graph-free inference so
// that the two paths compute bit-identical values.
namespace kernel {
/// Tanh form of GELU.
double gelu(double x);
double gelu_grad(double x);
/// Elementwise GELU; `grad` receives the elementwise slope when given.
Matrix gelu(const Matrix& x, Matrix* grad = nullptr);
void layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias, double eps, Matrix& out,
                Matrix* normalized = nullptr, Eigen::VectorXd* inv_std = nullptr);
Matrix bilinear_columns(const Matrix& anchor, const Matrix& displacement, int rows, int cols);
double expectile(double residual, double tau);
}  // namespace kernel

}  // namespace analogon::tc
