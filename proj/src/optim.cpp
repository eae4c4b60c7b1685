#include "tars/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tars {

void OptimizerConfig::validate() const {
  if (kind != "rmsprop" && kind != "adam" && kind != "sgd") {
    throw std::invalid_argument("optimizer: unknown kind '" + kind + "'");
  }
  if (!(lr > 0.0) || !(decay > 0.0) || decay_every < 1) {
    throw std::invalid_argument("optimizer: learning-rate schedule must be positive");
  }
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

double Optimizer::current_lr() const {
  return cfg_.lr * std::pow(cfg_.decay, steps_ / cfg_.decay_every);
}

double Optimizer::step(ParamStore& params) {
  const double norm = params.grad_norm();
  if (!std::isfinite(norm)) throw std::runtime_error("optimizer: non-finite gradient norm");
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  const double lr = current_lr();
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, steps_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, steps_);
  for (auto& e : params.entries()) {
    if (e.frozen || e.grad.empty()) continue;
    auto& m = first_.add(e.name, e.value.rows, e.value.cols).value;
    auto& v = second_.add(e.name, e.value.rows, e.value.cols).value;
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad.data[i] * clip;
      if (cfg_.kind == "sgd") {
        e.value.data[i] -= lr * g;
      } else if (cfg_.kind == "rmsprop") {
        v.data[i] = cfg_.rho * v.data[i] + (1.0 - cfg_.rho) * g * g;
        e.value.data[i] -= lr * g / (std::sqrt(v.data[i]) + cfg_.eps);
      } else {
        m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g;
        v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g * g;
        e.value.data[i] -= lr * (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + cfg_.eps);
      }
    }
  }
  params.zero_grad();
  return norm;
}

void Optimizer::export_state(ParamStore& out) const {
  out.add("opt/steps", 1, 1).value.data[0] = steps_;
  for (const auto& e : first_.entries()) out.add("opt/m/" + e.name, e.value.rows, e.value.cols).value = e.value;
  for (const auto& e : second_.entries()) out.add("opt/v/" + e.name, e.value.rows, e.value.cols).value = e.value;
}

void Optimizer::import_state(const ParamStore& in) {
  first_ = ParamStore();
  second_ = ParamStore();
  steps_ = in.contains("opt/steps") ? static_cast<int>(in.value("opt/steps").data[0]) : 0;
  for (const auto& e : in.entries()) {
    if (e.name.rfind("opt/m/", 0) == 0) {
      first_.add(e.name.substr(6), e.value.rows, e.value.cols).value = e.value;
    } else if (e.name.rfind("opt/v/", 0) == 0) {
      second_.add(e.name.substr(6), e.value.rows, e.value.cols).value = e.value;
    }
  }
}

}  // namespace tars
