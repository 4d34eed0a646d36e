#include "analogon/nn.hpp"

#include <cmath>
#include <fstream>
#include <mutex>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "analogon/binio.hpp"
#include "analogon/errors.hpp"

namespace analogon::tc {

namespace {

constexpr char kCheckpointMagic[9] = "ANLGCKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

Matrix glorot_uniform(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return w;
}

}  // namespace

Mlp::Mlp(std::string name, MlpConfig config, std::uint64_t seed) : name_(std::move(name)), config_(std::move(config)) {
  if (config_.input <= 0 || config_.output <= 0) throw UsageError("Mlp " + name_ + ": widths must be positive");
  std::mt19937_64 rng(seed);
  int in = config_.input;
  auto add_linear = [&](int out, bool hidden) {
    const auto idx = layers_.size();
    Layer layer;
    layer.hidden = hidden;
    layer.weight = params_.size();
    params_.add("l" + std::to_string(idx) + ".w", glorot_uniform(in, out, rng));
    layer.bias = params_.size();
    params_.add("l" + std::to_string(idx) + ".b", Matrix::Zero(1, out));
    if (hidden && config_.layer_norm) {
      layer.ln_gain = params_.size();
      params_.add("l" + std::to_string(idx) + ".ln_g", Matrix::Ones(1, out));
      layer.ln_bias = params_.size();
      params_.add("l" + std::to_string(idx) + ".ln_b", Matrix::Zero(1, out));
    }
    layers_.push_back(layer);
    in = out;
  };
  for (int h : config_.hidden) {
    if (h <= 0) throw UsageError("Mlp " + name_ + ": hidden widths must be positive");
    add_linear(h, true);
  }
  add_linear(config_.output, false);
}

Var Mlp::forward(Graph& g, Var x) {
  if (g.value(x).cols() != config_.input) {
    throw UsageError("Mlp " + name_ + ": input width " + std::to_string(g.value(x).cols()) + ", expected " +
                     std::to_string(config_.input));
  }
  Var h = x;
  for (const auto& layer : layers_) {
    h = g.add_row(g.matmul(h, g.parameter(params_[layer.weight])), g.parameter(params_[layer.bias]));
    if (layer.hidden) {
      h = g.gelu(h);
      if (config_.layer_norm) {
        h = g.layer_norm(h, g.parameter(params_[layer.ln_gain]), g.parameter(params_[layer.ln_bias]));
      }
    }
  }
  return h;
}

Matrix Mlp::eval(const Matrix& x) const {
  if (x.cols() != config_.input) {
    throw UsageError("Mlp " + name_ + ": input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(config_.input));
  }
  Matrix h = x;
  for (const auto& layer : layers_) {
    Matrix z;
    z.noalias() = h * params_[layer.weight].value;
    z.rowwise() += params_[layer.bias].value.row(0);
    if (layer.hidden) {
      z = kernel::gelu(z);
      if (config_.layer_norm) {
        Matrix out;
        kernel::layer_norm(z, params_[layer.ln_gain].value.row(0), params_[layer.ln_bias].value.row(0), 1e-6, out);
        z = std::move(out);
      }
    }
    h = std::move(z);
  }
  return h;
}

void Mlp::zero() {
  for (auto& p : params_) p.value.setZero();
}

void Mlp::set_identity() {
  if (!config_.hidden.empty() || config_.input != config_.output) {
    throw UsageError("Mlp " + name_ + ": identity needs a single square linear layer");
  }
  params_[layers_[0].weight].value.setIdentity();
  params_[layers_[0].bias].value.setZero();
}

Adam::Adam(std::vector<ParameterStore*> stores, AdamConfig config) : stores_(std::move(stores)), config_(config) {
  keep_heap_mapped();
  for (auto* s : stores_) {
    std::vector<Matrix> m, v;
    for (const auto& p : *s) {
      m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
    m_.push_back(std::move(m));
    v_.push_back(std::move(v));
  }
}

void Adam::zero_grad() {
  for (auto* s : stores_) s->zero_grad();
}

void Adam::step() {
  for (std::size_t si = 0; si < stores_.size(); ++si) {
    for (const auto& p : *stores_[si]) {
      if (p.grad.size() != 0 && !p.grad.allFinite()) {
        throw NumericError("Adam: non-finite gradient in parameter '" + p.name + "' at step " +
                           std::to_string(steps_ + 1));
      }
    }
  }
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t si = 0; si < stores_.size(); ++si) {
    auto& store = *stores_[si];
    for (std::size_t pi = 0; pi < store.size(); ++pi) {
      auto& p = store[pi];
      auto& m = m_[si][pi];
      auto& v = v_[si][pi];
      if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
      m = b1 * m + (1.0 - b1) * p.grad;
      v = b2 * v + (1.0 - b2) * p.grad.cwiseAbs2();
      p.value.array() -= config_.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps);
      p.grad.setZero();
    }
  }
}

void ema_update(ParameterStore& shadow, const ParameterStore& source, double tau) {
  if (shadow.size() != source.size()) throw UsageError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    auto& s = shadow[i].value;
    const auto& src = source[i].value;
    if (s.rows() != src.rows() || s.cols() != src.cols()) throw UsageError("ema_update: shape mismatch");
    s = tau * src + (1.0 - tau) * s;
  }
}

void save_checkpoint(const std::filesystem::path& path, const NamedStores& stores) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  binio::put_magic(os, kCheckpointMagic);
  binio::put<std::uint32_t>(os, kCheckpointVersion);
  std::uint32_t count = 0;
  for (const auto& [prefix, store] : stores) count += static_cast<std::uint32_t>(store->size());
  binio::put<std::uint32_t>(os, count);
  for (const auto& [prefix, store] : stores) {
    for (const auto& p : *store) {
      binio::put_string(os, prefix + "/" + p.name);
      binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rows()));
      binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.cols()));
    }
  }
  for (const auto& [prefix, store] : stores) {
    for (const auto& p : *store) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) binio::put<double>(os, p.value.data()[i]);
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, const MutableNamedStores& stores) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  binio::expect_magic(is, kCheckpointMagic, "checkpoint");
  const auto version = binio::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = binio::get<std::uint32_t>(is);
  std::vector<Parameter*> targets;
  for (const auto& [prefix, store] : stores) {
    for (auto& p : *store) targets.push_back(&p);
  }
  if (count != targets.size()) {
    throw IoError("checkpoint manifest has " + std::to_string(count) + " tensors, model expects " +
                  std::to_string(targets.size()));
  }
  std::size_t k = 0;
  for (const auto& [prefix, store] : stores) {
    for (auto& p : *store) {
      const auto name = binio::get_string(is);
      const auto rows = binio::get<std::uint32_t>(is);
      const auto cols = binio::get<std::uint32_t>(is);
      const auto expected = prefix + "/" + p.name;
      if (name != expected || rows != p.value.rows() || cols != p.value.cols()) {
        throw IoError("checkpoint manifest mismatch at entry " + std::to_string(k) + ": file has " + name + " " +
                      std::to_string(rows) + "x" + std::to_string(cols) + ", model expects " + expected + " " +
                      std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()));
      }
      ++k;
    }
  }
  for (auto* p : targets) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = binio::get<double>(is);
  }
}

void keep_heap_mapped() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
}

Matrix gather_rows(const Matrix& table, const std::vector<std::uint32_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(rows[i]);
  return out;
}

}  // namespace analogon::tc
