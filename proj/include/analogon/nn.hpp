#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "analogon/tensor.hpp"

namespace analogon::tc {

struct MlpConfig {
  int input = 0;
  std::vector<int> hidden;
  int output = 0;
  bool layer_norm = true;
};

/// Dense network: hidden layers are Linear -> GELU -> LayerNorm, the output
/// layer is linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, MlpConfig config, std::uint64_t seed);

  Var forward(Graph& g, Var x);
  /// Same computation as `forward`, without building a graph.
  Matrix eval(const Matrix& x) const;

  const MlpConfig& config() const noexcept { return config_; }
  const std::string& name() const noexcept { return name_; }
  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  /// Overwrite every parameter with zeros (gains included).
  void zero();
  /// Single linear layer only: W = I, b = 0.
  void set_identity();

 private:
  struct Layer {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t ln_gain = 0;
    std::size_t ln_bias = 0;
    bool hidden = false;
  };

  std::string name_;
  MlpConfig config_;
  ParameterStore params_;
  std::vector<Layer> layers_;
};

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam instance over several parameter stores. Stores must not gain
/// parameters after construction.
class Adam {
 public:
  Adam(std::vector<ParameterStore*> stores, AdamConfig config);

  /// Applies one update from the accumulated gradients, then zeroes them.
  /// Throws NumericError if any gradient is non-finite.
  void step();
  void zero_grad();

  std::int64_t step_count() const noexcept { return steps_; }
  const AdamConfig& config() const noexcept { return config_; }
  const Matrix& first_moment(std::size_t store, std::size_t param) const { return m_[store][param]; }
  const Matrix& second_moment(std::size_t store, std::size_t param) const { return v_[store][param]; }

 private:
  std::vector<ParameterStore*> stores_;
  AdamConfig config_;
  std::vector<std::vector<Matrix>> m_;
  std::vector<std::vector<Matrix>> v_;
  std::int64_t steps_ = 0;
};

/// shadow <- tau * source + (1 - tau) * shadow
void ema_update(ParameterStore& shadow, const ParameterStore& source, double tau);

/// Shadow copy of a network updated by exponential moving average.
template <typename Net>
struct EmaTarget {
  Net shadow;
  double tau = 0.005;

  EmaTarget() = default;
  EmaTarget(const Net& source, double rate) : shadow(source), tau(rate) {}
  void update(const Net& source) { ema_update(shadow.params(), source.params(), tau); }
};

using NamedStores = std::vector<std::pair<std::string, const ParameterStore*>>;
using MutableNamedStores = std::vector<std::pair<std::string, ParameterStore*>>;

/// Versioned binary blob: header, shape manifest (name, rows, cols), then
/// little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const NamedStores& stores);
/// Rejects files whose manifest differs from the target stores.
void load_checkpoint(const std::filesystem::path& path, const MutableNamedStores& stores);

/// Gathers a mini-batch of rows from a lookup table.
Matrix gather_rows(const Matrix& table, const std::vector<std::uint32_t>& rows);

/// Training allocates and frees the same large buffers every step; by default
/// glibc serves those with mmap and hands them back immediately, which costs
/// about as much as the arithmetic. Raises the thresholds once per process.
/// Called by the Adam constructor; a no-op on other C libraries.
void keep_heap_mapped();

}  // namespace analogon::tc
