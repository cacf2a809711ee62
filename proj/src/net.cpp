#include "preflab/net.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace preflab::nn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian float64");

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
  }
  throw ContractError("activation_name: unknown activation");
}

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw ContractError("activation_from_name: expected tanh or relu, got '" + name + "'");
}

Mlp::Mlp(std::vector<int> layer_sizes, Activation act)
    : layer_sizes_(std::move(layer_sizes)), act_(act) {
  if (layer_sizes_.size() < 3)
    throw ContractError("Mlp: need at least {in, hidden, out} layer sizes, got " +
                        std::to_string(layer_sizes_.size()));
  for (int n : layer_sizes_)
    if (n <= 0) throw ContractError("Mlp: layer sizes must be positive");
  for (size_t l = 0; l + 1 < layer_sizes_.size(); ++l) {
    w_.emplace_back(MatrixXd::Zero(layer_sizes_[l + 1], layer_sizes_[l]));
    b_.emplace_back(VectorXd::Zero(layer_sizes_[l + 1]));
  }
}

Mlp Mlp::xavier_init(std::vector<int> layer_sizes, Activation act, Rng& rng) {
  Mlp net(std::move(layer_sizes), act);
  for (auto& w : net.w_) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-limit, limit);
  }
  ++net.param_version_;
  return net;
}

int Mlp::param_count() const {
  int n = 0;
  for (size_t l = 0; l < w_.size(); ++l)
    n += static_cast<int>(w_[l].size() + b_[l].size());
  return n;
}

VectorXd Mlp::forward(const VectorXd& x) const {
  if (x.size() != input_dim())
    throw ContractError("Mlp::forward: expected input dim " + std::to_string(input_dim()) +
                        ", got " + std::to_string(x.size()));
  return forward_batch(x.transpose()).row(0);
}

MatrixXd Mlp::forward_batch(const MatrixXd& x, Trace* trace) const {
  if (x.cols() != input_dim())
    throw ContractError("Mlp::forward_batch: expected " + std::to_string(input_dim()) +
                        " columns, got " + std::to_string(x.cols()));
  check_finite(x, "Mlp::forward_batch input");
  if (trace != nullptr) {
    trace->param_version = param_version_;
    trace->input = x;
    trace->pre.clear();
    trace->post.clear();
  }
  MatrixXd h = x;
  const size_t n_layers = w_.size();
  for (size_t l = 0; l < n_layers; ++l) {
    MatrixXd z = h * w_[l].transpose();
    z.rowwise() += b_[l].transpose();
    if (trace != nullptr) trace->pre.push_back(z);
    if (l + 1 < n_layers) {
      if (act_ == Activation::kTanh)
        h = z.array().tanh();
      else
        h = z.cwiseMax(0.0);
      if (trace != nullptr) trace->post.push_back(h);
    } else {
      h = std::move(z);
    }
  }
  return h;
}

Grads Mlp::backprop(const Trace& trace, const MatrixXd& d_out, MatrixXd* d_input) const {
  if (trace.param_version != param_version_)
    throw ContractError("Mlp::backprop: stale trace (params changed since forward)");
  const size_t n_layers = w_.size();
  if (trace.pre.size() != n_layers)
    throw ContractError("Mlp::backprop: trace layer count mismatch");
  if (d_out.rows() != trace.input.rows() || d_out.cols() != output_dim())
    throw ContractError("Mlp::backprop: d_out shape mismatch");

  Grads g = zero_grads();
  MatrixXd delta = d_out;  // output layer is linear
  for (size_t l = n_layers; l-- > 0;) {
    const MatrixXd& layer_in = (l == 0) ? trace.input : trace.post[l - 1];
    g.w[l] = delta.transpose() * layer_in;
    g.b[l] = delta.colwise().sum();
    if (l == 0) {
      if (d_input != nullptr) *d_input = delta * w_[0];
      break;
    }
    MatrixXd back = delta * w_[l];
    if (act_ == Activation::kTanh)
      delta = back.array() * (1.0 - trace.post[l - 1].array().square());
    else
      delta = back.array() * (trace.pre[l - 1].array() > 0.0).cast<double>();
  }
  return g;
}

Grads Mlp::zero_grads() const {
  Grads g;
  for (size_t l = 0; l < w_.size(); ++l) {
    g.w.emplace_back(MatrixXd::Zero(w_[l].rows(), w_[l].cols()));
    g.b.emplace_back(VectorXd::Zero(b_[l].size()));
  }
  return g;
}

VectorXd Mlp::flatten_params() const {
  VectorXd flat(param_count());
  Eigen::Index k = 0;
  for (size_t l = 0; l < w_.size(); ++l) {
    for (Eigen::Index r = 0; r < w_[l].rows(); ++r)
      for (Eigen::Index c = 0; c < w_[l].cols(); ++c) flat[k++] = w_[l](r, c);
    for (Eigen::Index i = 0; i < b_[l].size(); ++i) flat[k++] = b_[l][i];
  }
  return flat;
}

void Mlp::set_params(const VectorXd& flat) {
  if (flat.size() != param_count())
    throw ContractError("Mlp::set_params: expected " + std::to_string(param_count()) +
                        " values, got " + std::to_string(flat.size()));
  Eigen::Index k = 0;
  for (size_t l = 0; l < w_.size(); ++l) {
    for (Eigen::Index r = 0; r < w_[l].rows(); ++r)
      for (Eigen::Index c = 0; c < w_[l].cols(); ++c) w_[l](r, c) = flat[k++];
    for (Eigen::Index i = 0; i < b_[l].size(); ++i) b_[l][i] = flat[k++];
  }
  ++param_version_;
}

void Mlp::add_scaled(const Grads& g, double scale) {
  if (g.w.size() != w_.size())
    throw ContractError("Mlp::add_scaled: gradient layer count mismatch");
  for (size_t l = 0; l < w_.size(); ++l) {
    w_[l] += scale * g.w[l];
    b_[l] += scale * g.b[l];
  }
  ++param_version_;
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr <= 0.0) throw ContractError("Adam: lr must be positive");
}

void Adam::update(Mlp& net, const Grads& g) {
  if (!initialized_) {
    m_ = net.zero_grads();
    v_ = net.zero_grads();
    initialized_ = true;
  }
  if (g.w.size() != net.w_.size() || m_.w.size() != net.w_.size())
    throw ContractError("Adam::update: layer count mismatch");
  for (size_t l = 0; l < net.w_.size(); ++l) {
    if (g.w[l].rows() != net.w_[l].rows() || g.w[l].cols() != net.w_[l].cols() ||
        g.b[l].size() != net.b_[l].size() || m_.w[l].rows() != net.w_[l].rows() ||
        m_.w[l].cols() != net.w_[l].cols() || m_.b[l].size() != net.b_[l].size())
      throw ContractError("Adam::update: accumulator/gradient shape mismatch at layer " +
                          std::to_string(l));
    check_finite(g.w[l], "Adam gradient");
    check_finite(g.b[l], "Adam gradient");
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (size_t l = 0; l < net.w_.size(); ++l) {
    m_.w[l] = beta1_ * m_.w[l] + (1.0 - beta1_) * g.w[l];
    m_.b[l] = beta1_ * m_.b[l] + (1.0 - beta1_) * g.b[l];
    v_.w[l] = beta2_ * v_.w[l].array() + (1.0 - beta2_) * g.w[l].array().square();
    v_.b[l] = beta2_ * v_.b[l].array() + (1.0 - beta2_) * g.b[l].array().square();
    net.w_[l].array() -= lr_ * (m_.w[l].array() / c1) / ((v_.w[l].array() / c2).sqrt() + eps_);
    net.b_[l].array() -= lr_ * (m_.b[l].array() / c1) / ((v_.b[l].array() / c2).sqrt() + eps_);
  }
  ++net.param_version_;
}

namespace {

constexpr int kCheckpointVersion = 1;

void append_payload(std::string& out, const std::vector<double>& payload) {
  const size_t bytes = payload.size() * sizeof(double);
  const size_t base = out.size();
  out.resize(base + bytes);
  std::memcpy(out.data() + base, payload.data(), bytes);
}

}  // namespace

void save_array_checkpoint(const std::string& path, const std::string& kind,
                           const std::map<std::string, std::string>& header_fields,
                           const std::vector<double>& payload) {
  json header;
  header["format"] = "preflab.array";
  header["version"] = kCheckpointVersion;
  header["kind"] = kind;
  header["count"] = payload.size();
  header["fields"] = header_fields;
  std::string out = header.dump();
  out.push_back('\n');
  append_payload(out, payload);
  write_file(path, out);
}

std::vector<double> load_array_checkpoint(const std::string& path, const std::string& kind,
                                          std::map<std::string, std::string>* header_fields) {
  const std::string raw = read_file(path);
  const size_t nl = raw.find('\n');
  if (nl == std::string::npos)
    throw ContractError("load_array_checkpoint: missing header line in " + path);
  json header;
  try {
    header = json::parse(raw.substr(0, nl));
  } catch (const json::exception& e) {
    throw ContractError("load_array_checkpoint: bad header in " + path + ": " + e.what());
  }
  if (header.value("format", "") != "preflab.array")
    throw ContractError("load_array_checkpoint: not a preflab.array file: " + path);
  if (header.value("version", -1) != kCheckpointVersion)
    throw ContractError("load_array_checkpoint: unsupported version in " + path);
  if (header.value("kind", "") != kind)
    throw ContractError("load_array_checkpoint: expected kind '" + kind + "', got '" +
                        header.value("kind", "") + "' in " + path);
  const size_t count = header.at("count").get<size_t>();
  if (raw.size() - nl - 1 != count * sizeof(double))
    throw ContractError("load_array_checkpoint: payload size mismatch in " + path);
  std::vector<double> payload(count);
  std::memcpy(payload.data(), raw.data() + nl + 1, count * sizeof(double));
  if (header_fields != nullptr) {
    header_fields->clear();
    for (auto& [k, v] : header.at("fields").items())
      (*header_fields)[k] = v.get<std::string>();
  }
  return payload;
}

void Mlp::save(const std::string& path,
               const std::map<std::string, std::string>& extra_tags) const {
  std::map<std::string, std::string> fields = extra_tags;
  std::string sizes;
  for (size_t i = 0; i < layer_sizes_.size(); ++i) {
    if (i > 0) sizes.push_back(' ');
    sizes += std::to_string(layer_sizes_[i]);
  }
  fields["layer_sizes"] = sizes;
  fields["activation"] = activation_name(act_);
  const VectorXd flat = flatten_params();
  save_array_checkpoint(path, "net", fields,
                        std::vector<double>(flat.data(), flat.data() + flat.size()));
}

Mlp Mlp::load(const std::string& path, std::map<std::string, std::string>* extra_tags) {
  std::map<std::string, std::string> fields;
  const std::vector<double> payload = load_array_checkpoint(path, "net", &fields);
  std::vector<int> sizes;
  {
    std::string tok;
    for (char c : fields.at("layer_sizes") + " ") {
      if (c == ' ') {
        if (!tok.empty()) sizes.push_back(static_cast<int>(parse_long(tok)));
        tok.clear();
      } else {
        tok.push_back(c);
      }
    }
  }
  Mlp net(sizes, activation_from_name(fields.at("activation")));
  if (static_cast<int>(payload.size()) != net.param_count())
    throw ContractError("Mlp::load: parameter count mismatch in " + path);
  net.set_params(Eigen::Map<const VectorXd>(payload.data(), payload.size()));
  if (extra_tags != nullptr) {
    fields.erase("layer_sizes");
    fields.erase("activation");
    *extra_tags = fields;
  }
  return net;
}

}  // namespace preflab::nn
