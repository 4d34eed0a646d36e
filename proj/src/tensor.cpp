#include "analogon/tensor.hpp"

#include <cmath>
#include <numbers>

#include "analogon/errors.hpp"

namespace analogon::tc {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

// ---------------------------------------------------------------- kernels

namespace kernel {

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * x * (1.0 + t);
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Matrix gelu(const Matrix& x, Matrix* grad) {
  const auto a = x.array();
  // tanh(u) = 1 - 2 / (exp(2u) + 1) keeps the whole expression vectorized.
  const Eigen::ArrayXXd u = kGeluC * (a + kGeluA * a.cube());
  const Eigen::ArrayXXd t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
  Matrix out = (0.5 * a * (1.0 + t)).matrix();
  if (grad) {
    *grad = (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * a.square())).matrix();
  }
  return out;
}

void layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias, double eps, Matrix& out,
                Matrix* normalized, Eigen::VectorXd* inv_std) {
  const auto d = x.cols();
  const Eigen::VectorXd mu = x.rowwise().mean();
  Matrix xhat = x.colwise() - mu;
  const Eigen::VectorXd is =
      ((xhat.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt().matrix();
  xhat.array().colwise() *= is.array();
  out = (xhat.array().rowwise() * gain.array()).rowwise() + bias.array();
  if (normalized) *normalized = std::move(xhat);
  if (inv_std) *inv_std = is;
}

Matrix bilinear_columns(const Matrix& anchor, const Matrix& displacement, int rows, int cols) {
  require_same_shape(anchor, displacement, "bilinear_columns");
  if (anchor.cols() != static_cast<Eigen::Index>(rows) * cols) {
    throw UsageError("bilinear_columns: width " + std::to_string(anchor.cols()) + " is not " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix out = Matrix::Zero(anchor.rows(), cols);
  // Element (j, i) of a flattened rows x cols block sits at column j * cols + i.
  for (int j = 0; j < rows; ++j) {
    out.array() += anchor.middleCols(j * cols, cols).array() * displacement.middleCols(j * cols, cols).array();
  }
  return out;
}

double expectile(double residual, double tau) {
  const double w = residual < 0.0 ? (1.0 - tau) : tau;
  return w * residual * residual;
}

}  // namespace kernel

// ---------------------------------------------------------------- store

Parameter& ParameterStore::add(std::string name, Matrix init) {
  Matrix grad = Matrix::Zero(init.rows(), init.cols());
  params_.push_back({std::move(name), std::move(init), std::move(grad)});
  return params_.back();
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  if (other.size() != size()) throw UsageError("copy_values_from: parameter count mismatch");
  for (std::size_t i = 0; i < size(); ++i) {
    require_same_shape(params_[i].value, other.params_[i].value, "copy_values_from");
    params_[i].value = other.params_[i].value;
  }
}

// ---------------------------------------------------------------- graph core

Var Graph::push(Matrix value, bool requires_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Matrix& Graph::grad_of(std::int32_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::accumulate(std::int32_t id, const Matrix& g) { accumulate_expr(id, g); }

template <typename Expr>
void Graph::accumulate_expr(std::int32_t id, const Expr& g) {
  if (!nodes_[id].requires_grad) return;
  auto& n = nodes_[id];
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

bool Graph::any_grad(std::initializer_list<Var> vs) const {
  for (auto v : vs) {
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

Var Graph::constant(Matrix value) { return push(std::move(value), false); }

Var Graph::parameter(Parameter& p) {
  Var v = push(p.value, true, [](Graph&, std::int32_t) {});
  nodes_[v.id].param = &p;
  return v;
}

double Graph::scalar(Var v) const {
  const auto& m = value(v);
  if (m.size() != 1) throw UsageError("scalar: node is not 1x1");
  return m(0, 0);
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) throw UsageError("backward: loss must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Matrix::Constant(1, 1, 1.0);
  for (std::int32_t id = loss.id; id >= 0; --id) {
    auto& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param) {
      if (n.param->grad.size() == 0) n.param->grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.param->grad += n.grad;
      continue;
    }
    n.backward(*this, id);
  }
}

// ---------------------------------------------------------------- ops

Var Graph::matmul(Var x, Var w) {
  const auto& xv = value(x);
  const auto& wv = value(w);
  if (xv.cols() != wv.rows()) {
    throw UsageError("matmul: inner dimensions " + std::to_string(xv.cols()) + " and " + std::to_string(wv.rows()));
  }
  Matrix out;
  out.noalias() = xv * wv;
  return push(std::move(out), any_grad({x, w}), [x, w](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    if (g.requires_grad(x)) g.accumulate_expr(x.id, dy * g.value(w).transpose());
    if (g.requires_grad(w)) g.accumulate_expr(w.id, g.value(x).transpose() * dy);
  });
}

Var Graph::add_row(Var x, Var row) {
  const auto& xv = value(x);
  const auto& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != xv.cols()) throw UsageError("add_row: row width mismatch");
  Matrix out = xv.rowwise() + rv.row(0);
  return push(std::move(out), any_grad({x, row}), [x, row](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    if (g.requires_grad(x)) g.accumulate(x.id, dy);
    if (g.requires_grad(row)) g.accumulate_expr(row.id, dy.colwise().sum());
  });
}

Var Graph::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Matrix out = value(a) + value(b);
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    g.accumulate(a.id, dy);
    g.accumulate(b.id, dy);
  });
}

Var Graph::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  Matrix out = value(a) - value(b);
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    g.accumulate(a.id, dy);
    g.accumulate_expr(b.id, -dy);
  });
}

Var Graph::mul(Var a, Var b) {
  require_same_shape(value(a), value(b), "mul");
  Matrix out = value(a).cwiseProduct(value(b));
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    if (g.requires_grad(a)) g.accumulate_expr(a.id, dy.cwiseProduct(g.value(b)));
    if (g.requires_grad(b)) g.accumulate_expr(b.id, dy.cwiseProduct(g.value(a)));
  });
}

Var Graph::scale(Var x, double c) {
  Matrix out = value(x) * c;
  return push(std::move(out), any_grad({x}), [x, c](Graph& g, std::int32_t self) {
    g.accumulate_expr(x.id, g.nodes_[self].grad * c);
  });
}

Var Graph::add_scalar(Var x, double c) {
  Matrix out = value(x).array() + c;
  return push(std::move(out), any_grad({x}),
              [x](Graph& g, std::int32_t self) { g.accumulate(x.id, g.nodes_[self].grad); });
}

Var Graph::mul_rows(Var x, Var column) {
  const auto& xv = value(x);
  const auto& cv = value(column);
  if (cv.cols() != 1 || cv.rows() != xv.rows()) throw UsageError("mul_rows: expects an N x 1 column");
  Matrix out = xv.array().colwise() * cv.col(0).array();
  return push(std::move(out), any_grad({x, column}), [x, column](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    if (g.requires_grad(x)) g.accumulate_expr(x.id, (dy.array().colwise() * g.value(column).col(0).array()).matrix());
    if (g.requires_grad(column)) g.accumulate_expr(column.id, dy.cwiseProduct(g.value(x)).rowwise().sum());
  });
}

Var Graph::gelu(Var x) {
  const bool needs = any_grad({x});
  Matrix slope;
  Matrix out = kernel::gelu(value(x), needs ? &slope : nullptr);
  return push(std::move(out), needs, [x, slope = std::move(slope)](Graph& g, std::int32_t self) {
    g.accumulate_expr(x.id, g.nodes_[self].grad.cwiseProduct(slope));
  });
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const auto& xv = value(x);
  if (value(gain).cols() != xv.cols() || value(bias).cols() != xv.cols()) {
    throw UsageError("layer_norm: gain/bias width mismatch");
  }
  Matrix out, xhat;
  Eigen::VectorXd inv_std;
  kernel::layer_norm(xv, value(gain).row(0), value(bias).row(0), eps, out, &xhat, &inv_std);
  return push(std::move(out), any_grad({x, gain, bias}),
              [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, std::int32_t self) {
                const Matrix& dy = g.nodes_[self].grad;
                if (g.requires_grad(gain)) g.accumulate_expr(gain.id, dy.cwiseProduct(xhat).colwise().sum());
                if (g.requires_grad(bias)) g.accumulate_expr(bias.id, dy.colwise().sum());
                if (g.requires_grad(x)) {
                  const Matrix dxhat = dy.array().rowwise() * g.value(gain).row(0).array();
                  const auto d = static_cast<double>(dxhat.cols());
                  const Eigen::VectorXd m1 = dxhat.rowwise().sum() / d;
                  const Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / d;
                  Matrix dx = (dxhat - (xhat.array().colwise() * m2.array()).matrix()).colwise() - m1;
                  dx.array().colwise() *= inv_std.array();
                  g.accumulate(x.id, dx);
                }
              });
}

Var Graph::exp(Var x) {
  Matrix out = value(x).array().exp();
  return push(std::move(out), any_grad({x}), [x](Graph& g, std::int32_t self) {
    g.accumulate_expr(x.id, g.nodes_[self].grad.cwiseProduct(g.nodes_[self].value));
  });
}

Var Graph::square(Var x) {
  Matrix out = value(x).array().square();
  return push(std::move(out), any_grad({x}), [x](Graph& g, std::int32_t self) {
    g.accumulate_expr(x.id, (2.0 * g.nodes_[self].grad.cwiseProduct(g.value(x))));
  });
}

Var Graph::rowwise_dot(Var a, Var b) {
  require_same_shape(value(a), value(b), "rowwise_dot");
  Matrix out = value(a).cwiseProduct(value(b)).rowwise().sum();
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, std::int32_t self) {
    const auto dy = g.nodes_[self].grad.col(0).array();
    if (g.requires_grad(a)) g.accumulate_expr(a.id, (g.value(b).array().colwise() * dy).matrix());
    if (g.requires_grad(b)) g.accumulate_expr(b.id, (g.value(a).array().colwise() * dy).matrix());
  });
}

Var Graph::bilinear_columns(Var anchor, Var displacement, int rows, int cols) {
  Matrix out = kernel::bilinear_columns(value(anchor), value(displacement), rows, cols);
  return push(std::move(out), any_grad({anchor, displacement}),
              [anchor, displacement, rows, cols](Graph& g, std::int32_t self) {
                const Matrix& dy = g.nodes_[self].grad;
                const Matrix& av = g.value(anchor);
                const Matrix& dv = g.value(displacement);
                Matrix da(av.rows(), av.cols());
                Matrix dd(dv.rows(), dv.cols());
                for (int j = 0; j < rows; ++j) {
                  da.middleCols(j * cols, cols) = dy.cwiseProduct(dv.middleCols(j * cols, cols));
                  dd.middleCols(j * cols, cols) = dy.cwiseProduct(av.middleCols(j * cols, cols));
                }
                g.accumulate(anchor.id, da);
                g.accumulate(displacement.id, dd);
              });
}

Var Graph::concat_cols(std::initializer_list<Var> parts) {
  if (parts.size() == 0) throw UsageError("concat_cols: no inputs");
  const auto rows = value(*parts.begin()).rows();
  Eigen::Index width = 0;
  bool needs = false;
  for (auto p : parts) {
    if (value(p).rows() != rows) throw UsageError("concat_cols: row count mismatch");
    width += value(p).cols();
    needs = needs || requires_grad(p);
  }
  Matrix out(rows, width);
  Eigen::Index off = 0;
  std::vector<Var> ins(parts);
  for (auto p : ins) {
    out.middleCols(off, value(p).cols()) = value(p);
    off += value(p).cols();
  }
  return push(std::move(out), needs, [ins](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    Eigen::Index o = 0;
    for (auto p : ins) {
      const auto w = g.value(p).cols();
      if (g.requires_grad(p)) g.accumulate_expr(p.id, dy.middleCols(o, w));
      o += w;
    }
  });
}

Var Graph::sum(Var x) {
  Matrix out = Matrix::Constant(1, 1, value(x).sum());
  return push(std::move(out), any_grad({x}), [x](Graph& g, std::int32_t self) {
    const double dy = g.nodes_[self].grad(0, 0);
    g.accumulate_expr(x.id, Matrix::Constant(g.value(x).rows(), g.value(x).cols(), dy));
  });
}

Var Graph::mean(Var x) {
  const auto count = static_cast<double>(value(x).size());
  if (count == 0) throw UsageError("mean: empty input");
  Matrix out = Matrix::Constant(1, 1, value(x).sum() / count);
  return push(std::move(out), any_grad({x}), [x, count](Graph& g, std::int32_t self) {
    const double dy = g.nodes_[self].grad(0, 0) / count;
    g.accumulate_expr(x.id, Matrix::Constant(g.value(x).rows(), g.value(x).cols(), dy));
  });
}

Var Graph::expectile(Var residual, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw UsageError("expectile: tau must lie in (0, 1)");
  Matrix out = value(residual).unaryExpr([tau](double r) { return kernel::expectile(r, tau); });
  return push(std::move(out), any_grad({residual}), [residual, tau](Graph& g, std::int32_t self) {
    const Matrix& dy = g.nodes_[self].grad;
    // Zero residual takes the nonnegative branch; its derivative is 0 either way.
    Matrix d = g.value(residual).unaryExpr([tau](double r) { return 2.0 * (r < 0.0 ? 1.0 - tau : tau) * r; });
    g.accumulate_expr(residual.id, dy.cwiseProduct(d));
  });
}

Var Graph::gaussian_log_prob(Var target, Var mean, double sigma) {
  require_same_shape(value(target), value(mean), "gaussian_log_prob");
  if (!(sigma > 0.0)) throw UsageError("gaussian_log_prob: sigma must be positive");
  const double inv_var = 1.0 / (sigma * sigma);
  const auto dim = static_cast<double>(value(mean).cols());
  const double log_norm = -0.5 * dim * std::log(2.0 * std::numbers::pi * sigma * sigma);
  Matrix diff = value(target) - value(mean);
  Matrix out = (-0.5 * inv_var * diff.array().square().rowwise().sum() + log_norm).matrix();
  return push(std::move(out), any_grad({target, mean}),
              [target, mean, inv_var, diff = std::move(diff)](Graph& g, std::int32_t self) {
                const auto dy = g.nodes_[self].grad.col(0).array();
                const Matrix d_mean = ((diff * inv_var).array().colwise() * dy).matrix();
                if (g.requires_grad(mean)) g.accumulate(mean.id, d_mean);
                if (g.requires_grad(target)) g.accumulate_expr(target.id, -d_mean);
              });
}

Var Graph::stop_gradient(Var x) { return push(value(x), false); }

Var Graph::argmax_onehot(Var x) {
  if (requires_grad(x)) throw UsageError("argmax_onehot: not differentiable; apply stop_gradient first");
  const auto& xv = value(x);
  Matrix out = Matrix::Zero(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < xv.cols(); ++c) {
      if (xv(r, c) > xv(r, best)) best = c;
    }
    out(r, best) = 1.0;
  }
  return push(std::move(out), false);
}

}  // namespace analogon::tc
