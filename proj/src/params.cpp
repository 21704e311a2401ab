#include "catagg/params.hpp"

#include <cmath>
#include <random>

namespace catagg {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

ParamStore::ParamStore(std::uint64_t seed, DType dtype) : seed_(seed), dtype_(dtype) {}

const Tensor& ParamStore::create(const std::string& name, Shape shape, Init init,
                                 std::int64_t fan_in, double gain) {
  if (params_.count(name)) throw ArgumentError("parameter '" + name + "' already exists");
  Tensor t(shape, dtype_);
  if (init == Init::ones) {
    t.fill(1.0);
  } else if (init == Init::kaiming_uniform) {
    if (fan_in <= 0) throw ArgumentError("parameter '" + name + "': fan_in must be positive");
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
    std::mt19937_64 rng(seed_ ^ fnv1a(name));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, dist(rng));
  }
  t.set_requires_grad(true);
  order_.push_back(name);
  return params_.emplace(name, std::move(t)).first->second;
}

bool ParamStore::contains(const std::string& name) const { return params_.count(name) != 0; }

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  if (tracing_) trace_.emplace_back(name, it->second.id());
  return it->second;
}

std::int64_t ParamStore::count(const std::string& prefix) const {
  std::int64_t total = 0;
  for (const auto& [name, t] : params_) {
    if (name.compare(0, prefix.size(), prefix) == 0) total += t.numel();
  }
  return total;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void ParamStore::fill(const std::string& name, double value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  it->second.fill(value);
}

void ParamStore::set(const std::string& name, const Tensor& value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  if (value.shape() != it->second.shape()) {
    throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                         ", got " + shape_str(value.shape()));
  }
  it->second.assign(value.to(dtype_));
}

void ParamStore::convert(DType dtype) {
  dtype_ = dtype;
  for (auto& [name, t] : params_) {
    if (t.dtype() == dtype) continue;
    Tensor c = t.to(dtype);
    c.set_requires_grad(true);
    t = c;
  }
}

void ParamStore::start_trace() {
  trace_.clear();
  tracing_ = true;
}

std::vector<std::pair<std::string, const void*>> ParamStore::stop_trace() {
  tracing_ = false;
  return std::move(trace_);
}

}  // namespace catagg
