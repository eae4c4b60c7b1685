// First-order optimizers over a ParamStore. Frozen entries are never touched.

#ifndef TARS_OPTIM_HPP
#define TARS_OPTIM_HPP

#include <string>

#include "tars/param_store.hpp"

namespace tars {

struct OptimizerConfig {
  std::string kind = "rmsprop";  // "rmsprop" | "adam" | "sgd"
  double lr = 1e-3;
  double decay = 0.9;       // multiplicative lr decay applied every `decay_every` steps
  int decay_every = 100;
  double clip_norm = 5.0;   // <= 0 disables clipping
  double rho = 0.9;         // rmsprop second-moment rate
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg);

  /// Applies one update from the accumulated gradients, then zeroes them.
  /// Returns the (pre-clip) global gradient norm.
  double step(ParamStore& params);
  double current_lr() const;
  int steps() const { return steps_; }

  /// Optimizer state lives in a separate store so it can ride along in a checkpoint.
  void export_state(ParamStore& out) const;
  void import_state(const ParamStore& in);

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  int steps_ = 0;
  ParamStore first_;
  ParamStore second_;
};

}  // namespace tars

#endif  // TARS_OPTIM_HPP
