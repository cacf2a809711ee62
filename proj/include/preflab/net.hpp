// Dense nets with explicit traces and reverse-mode gradients, Adam, and a
// flat float64 checkpoint format with a JSON header. Everything is double
// precision and deterministic given the seeds.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "preflab/common.hpp"

namespace preflab::nn {

enum class Activation { kTanh, kRelu };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

// Parameter-shaped gradient (or accumulator) container.
struct Grads {
  std::vector<MatrixXd> w;
  std::vector<VectorXd> b;
};

// Cached forward pass. Tied to the parameter version it was produced under;
// backprop through a stale trace is a contract violation.
struct Trace {
  uint64_t param_version = 0;
  MatrixXd input;               // rows are samples
  std::vector<MatrixXd> pre;    // pre-activation per layer
  std::vector<MatrixXd> post;   // post-activation per hidden layer
};

class Mlp {
 public:
  // Zero-initialized net. layer_sizes = {in, hidden..., out}, at least one
  // hidden layer is required.
  Mlp(std::vector<int> layer_sizes, Activation act);

  // Xavier-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
  static Mlp xavier_init(std::vector<int> layer_sizes, Activation act, Rng& rng);

  int input_dim() const { return layer_sizes_.front(); }
  int output_dim() const { return layer_sizes_.back(); }
  const std::vector<int>& layer_sizes() const { return layer_sizes_; }
  Activation activation() const { return act_; }
  uint64_t param_version() const { return param_version_; }
  int param_count() const;

  VectorXd forward(const VectorXd& x) const;
  // X has one sample per row; returns one output row per sample.
  MatrixXd forward_batch(const MatrixXd& x, Trace* trace = nullptr) const;

  // d_out has one dL/d(output) row per sample. Gradient shapes mirror the
  // parameter shapes. If d_input is non-null it receives dL/d(input).
  Grads backprop(const Trace& trace, const MatrixXd& d_out,
                 MatrixXd* d_input = nullptr) const;

  Grads zero_grads() const;

  VectorXd flatten_params() const;
  void set_params(const VectorXd& flat);

  // In-place parameter update: p += scale * g. Bumps the parameter version.
  void add_scaled(const Grads& g, double scale);

  const std::vector<MatrixXd>& weights() const { return w_; }
  const std::vector<VectorXd>& biases() const { return b_; }

  // Checkpoint: one JSON header line, then param_count little-endian
  // float64 values in flatten order. extra_tags are carried verbatim.
  void save(const std::string& path,
            const std::map<std::string, std::string>& extra_tags = {}) const;
  static Mlp load(const std::string& path,
                  std::map<std::string, std::string>* extra_tags = nullptr);

 private:
  std::vector<int> layer_sizes_;
  Activation act_;
  std::vector<MatrixXd> w_;  // w_[l] is (out x in)
  std::vector<VectorXd> b_;
  uint64_t param_version_ = 0;

  friend class Adam;
};

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // One step on `net` given gradients of the loss to minimize.
  void update(Mlp& net, const Grads& g);

  int64_t steps() const { return steps_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t steps_ = 0;
  Grads m_, v_;
  bool initialized_ = false;
};

// Flat float64 array with a JSON header; shared by net checkpoints and
// table-valued artifacts (Q tables and friends).
void save_array_checkpoint(const std::string& path, const std::string& kind,
                           const std::map<std::string, std::string>& header_fields,
                           const std::vector<double>& payload);
std::vector<double> load_array_checkpoint(const std::string& path, const std::string& kind,
                                          std::map<std::string, std::string>* header_fields);

}  // namespace preflab::nn
