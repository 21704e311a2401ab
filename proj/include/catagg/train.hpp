#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "catagg/dataset.hpp"
#include "catagg/model.hpp"

namespace catagg {

struct TrainConfig {
  double lr_aggregator = 3e-5;
  double lr_backbone = 3e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t steps = 1000;
  std::int64_t batch = 1;
  double min_lr_ratio = 0.1;
  double stop_aepe = 0.0;
  std::int64_t log_every = 0;

  static TrainConfig from(const RunConfig& config);
};

// Adaptive moments with decoupled weight decay. Decay applies to parameters
// of rank >= 2 only.
class AdamW {
 public:
  struct Moments {
    Tensor m, v;
  };

  AdamW(ParamStore& params, const TrainConfig& cfg);
  // One update; `lr_of(name)` gives each parameter's current rate.
  void step(const std::function<double(const std::string&)>& lr_of);

  std::int64_t t() const { return t_; }
  void set_t(std::int64_t t) { t_ = t; }
  Moments& moments(const std::string& name) { return moments_.at(name); }
  const Moments& moments(const std::string& name) const { return moments_.at(name); }

 private:
  ParamStore* params_;
  TrainConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// Cosine decay from 1 to min_ratio over `total` steps.
double cosine_factor(std::int64_t step, std::int64_t total, double min_ratio);

class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg, std::vector<PairData> data, std::uint64_t seed);

  // Draws a pair (per batch element), runs forward / AEPE / backward and
  // updates. Returns the pre-update mean loss. Throws NumericError naming the
  // first op that produced a non-finite value.
  double train_step();
  // Runs until cfg.steps (or the early-stop threshold); returns last loss.
  double run(const std::function<void(std::int64_t, double)>& on_step = {});

  std::int64_t step() const { return step_; }
  double learning_rate(const std::string& name) const;
  const TrainConfig& config() const { return cfg_; }

  // Magic "CATK", version, config text, step, RNG state, then every
  // parameter with its two moments.
  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  Model* model_;
  TrainConfig cfg_;
  std::vector<PairData> data_;
  std::mt19937_64 rng_;
  AdamW optimizer_;
  std::int64_t step_ = 0;
};

constexpr std::uint32_t kCheckpointVersion = 1;

// Loads only the parameters of a checkpoint into `model` (for eval / infer).
// Returns the stored config text.
std::string load_model_parameters(Model& model, const std::string& path);
// Reads the config text stored in a checkpoint.
std::string checkpoint_config(const std::string& path);

}  // namespace catagg
