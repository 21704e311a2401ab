#include "catagg/train.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "catagg/flow.hpp"
#include "catagg/ops.hpp"
#include "catagg/tensor_io.hpp"

namespace catagg {

TrainConfig TrainConfig::from(const RunConfig& c) {
  TrainConfig t;
  t.lr_aggregator = c.get_double("train.lr_aggregator");
  t.lr_backbone = c.get_double("train.lr_backbone");
  t.weight_decay = c.get_double("train.weight_decay");
  t.steps = c.get_int("train.steps");
  t.batch = c.get_int("train.batch");
  t.min_lr_ratio = c.get_double("train.min_lr_ratio");
  t.stop_aepe = c.get_double("train.stop_aepe");
  t.log_every = c.get_int("train.log_every");
  if (t.steps < 0 || t.batch < 1) throw ConfigError("train.steps must be >= 0 and train.batch >= 1");
  if (t.lr_aggregator < 0 || t.lr_backbone < 0) throw ConfigError("learning rates must be >= 0");
  return t;
}

AdamW::AdamW(ParamStore& params, const TrainConfig& cfg) : params_(&params), cfg_(cfg) {
  for (const auto& name : params.names()) {
    const Tensor& p = params.get(name);
    moments_.emplace(name, Moments{Tensor(p.shape(), p.dtype()), Tensor(p.shape(), p.dtype())});
  }
}

void AdamW::step(const std::function<double(const std::string&)>& lr_of) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& name : params_->names()) {
    Tensor p = params_->get(name);
    const Tensor g = p.grad();
    if (!g.defined()) continue;
    const double lr = lr_of(name);
    const double decay = p.rank() >= 2 ? cfg_.weight_decay : 0.0;
    auto& mom = moments_.at(name);
    dispatch(p.dtype(), [&]<class T>() {
      auto pv = p.data_mut<T>();
      auto gv = g.data<T>();
      auto mv = mom.m.data_mut<T>();
      auto vv = mom.v.data_mut<T>();
      const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      for (std::size_t i = 0; i < pv.size(); ++i) {
        mv[i] = b1 * mv[i] + (T(1) - b1) * gv[i];
        vv[i] = b2 * vv[i] + (T(1) - b2) * gv[i] * gv[i];
        const double mhat = mv[i] / bc1;
        const double vhat = vv[i] / bc2;
        const double updated = pv[i] - lr * decay * pv[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        pv[i] = static_cast<T>(updated);
      }
    });
  }
}

double cosine_factor(std::int64_t step, std::int64_t total, double min_ratio) {
  if (total <= 1) return 1.0;
  constexpr double kPi = 3.14159265358979323846;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  return min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + std::cos(kPi * progress));
}

Trainer::Trainer(Model& model, TrainConfig cfg, std::vector<PairData> data, std::uint64_t seed)
    : model_(&model), cfg_(cfg), data_(std::move(data)), rng_(seed), optimizer_(model.params(), cfg) {
  if (data_.empty()) throw ArgumentError("trainer: no training pairs");
}

double Trainer::learning_rate(const std::string& name) const {
  const double base = model_->is_backbone_param(name) ? cfg_.lr_backbone : cfg_.lr_aggregator;
  return base * cosine_factor(step_, cfg_.steps, cfg_.min_lr_ratio);
}

double Trainer::train_step() {
  ModeGuard mode(Mode::train);
  DenormalGuard ftz;
  ParamStore& params = model_->params();
  params.zero_grad();
  reset_nonfinite_tracker();
  double total = 0.0;
  for (std::int64_t b = 0; b < cfg_.batch; ++b) {
    std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
    const PairData& pair = data_[pick(rng_)];
    const Tensor src = pair.source.to(params.dtype());
    const Tensor tgt = pair.target.to(params.dtype());
    const auto origin = [this] {
      const auto op = first_nonfinite_op();
      return " at step " + std::to_string(step_) +
             "; first non-finite op: " + (op ? *op : std::string("unknown"));
    };
    Tensor loss;
    try {
      const auto out = model_->forward(src, tgt);
      loss = aepe(out.flow, pair.flow.to(params.dtype()), pair.mask);
    } catch (const NumericError& e) {
      throw NumericError(e.what() + origin());
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("non-finite loss" + origin());
    total += value;
    backward(cfg_.batch == 1 ? loss : scale(loss, 1.0 / static_cast<double>(cfg_.batch)));
  }
  optimizer_.step([this](const std::string& name) { return learning_rate(name); });
  ++step_;
  return total / static_cast<double>(cfg_.batch);
}

double Trainer::run(const std::function<void(std::int64_t, double)>& on_step) {
  double loss = 0.0;
  while (step_ < cfg_.steps) {
    loss = train_step();
    if (on_step) on_step(step_, loss);
    if (cfg_.stop_aepe > 0.0 && loss < cfg_.stop_aepe) break;
  }
  return loss;
}

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'A', 'T', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void get_exact(std::istream& in, void* dst, std::size_t n) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw LoadError("checkpoint truncated");
}
std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  get_exact(in, &v, 4);
  return v;
}
std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  get_exact(in, &v, 8);
  return v;
}
std::string get_string(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1u << 28)) throw LoadError("checkpoint string too long");
  std::string s(n, '\0');
  get_exact(in, s.data(), n);
  return s;
}

struct CheckpointEntry {
  Tensor value, m, v;
};

struct CheckpointData {
  std::string config;
  std::uint64_t step = 0;
  std::uint64_t adam_t = 0;
  std::string rng;
  std::vector<std::pair<std::string, CheckpointEntry>> entries;
};

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4];
  get_exact(in, magic, 4);
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) throw LoadError("not a checkpoint (bad magic)");
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw LoadError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointData d;
  d.config = get_string(in);
  d.step = get_u64(in);
  d.adam_t = get_u64(in);
  d.rng = get_string(in);
  const std::uint32_t count = get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in);
    CheckpointEntry e;
    try {
      e.value = read_tensor(in);
      e.m = read_tensor(in);
      e.v = read_tensor(in);
    } catch (const LoadError& err) {
      throw LoadError("checkpoint parameter '" + name + "': " + err.what());
    }
    d.entries.emplace_back(std::move(name), std::move(e));
  }
  char extra;
  if (in.read(&extra, 1)) throw LoadError("checkpoint has trailing bytes");
  return d;
}

void check_entries(const ParamStore& params, const CheckpointData& d) {
  for (const auto& [name, e] : d.entries) {
    if (!params.contains(name)) throw LoadError("checkpoint has unknown parameter '" + name + "'");
    if (e.value.shape() != params.get(name).shape()) {
      throw LoadError("checkpoint parameter '" + name + "' has shape " + shape_str(e.value.shape()));
    }
  }
  if (d.entries.size() != params.names().size()) {
    throw LoadError("checkpoint holds " + std::to_string(d.entries.size()) + " parameters, model has " +
                    std::to_string(params.names().size()));
  }
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  std::ostringstream buf(std::ios::binary);
  buf.write(kCheckpointMagic, 4);
  put_u32(buf, kCheckpointVersion);
  put_string(buf, model_->config().text());
  put_u64(buf, static_cast<std::uint64_t>(step_));
  put_u64(buf, static_cast<std::uint64_t>(optimizer_.t()));
  std::ostringstream rng;
  rng << rng_;
  put_string(buf, rng.str());
  const ParamStore& params = model_->params();
  put_u32(buf, static_cast<std::uint32_t>(params.names().size()));
  for (const auto& name : params.names()) {
    put_string(buf, name);
    write_tensor(buf, params.get(name));
    const auto& mom = optimizer_.moments(name);
    write_tensor(buf, mom.m);
    write_tensor(buf, mom.v);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = buf.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

void Trainer::load_checkpoint(const std::string& path) {
  CheckpointData d = read_checkpoint(path);
  ParamStore& params = model_->params();
  check_entries(params, d);
  std::istringstream rng(d.rng);
  std::mt19937_64 restored;
  if (!(rng >> restored)) throw LoadError("checkpoint RNG state is malformed");
  for (auto& [name, e] : d.entries) {
    params.set(name, e.value);
    auto& mom = optimizer_.moments(name);
    mom.m.assign(e.m.to(params.dtype()));
    mom.v.assign(e.v.to(params.dtype()));
  }
  rng_ = restored;
  step_ = static_cast<std::int64_t>(d.step);
  optimizer_.set_t(static_cast<std::int64_t>(d.adam_t));
}

std::string load_model_parameters(Model& model, const std::string& path) {
  CheckpointData d = read_checkpoint(path);
  check_entries(model.params(), d);
  for (auto& [name, e] : d.entries) model.params().set(name, e.value);
  return d.config;
}

std::string checkpoint_config(const std::string& path) { return read_checkpoint(path).config; }

}  // namespace catagg
