#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "catagg/tensor.hpp"

namespace catagg {

enum class Init { kaiming_uniform, zeros, ones };

// Named learnable tensors. Entries keep their identity for the lifetime of
// the store, so graph nodes and optimizer state can refer to them directly.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0, DType dtype = DType::f32);

  // Kaiming-style uniform init draws from U(-b, b) with b = gain * sqrt(3 / fan_in).
  // The draw is seeded by (store seed, name), independent of creation order.
  const Tensor& create(const std::string& name, Shape shape, Init init,
                       std::int64_t fan_in = 0, double gain = 1.0);

  bool contains(const std::string& name) const;
  // Throws ArgumentError for unknown names.
  const Tensor& get(const std::string& name) const;
  // Names in creation order.
  const std::vector<std::string>& names() const { return order_; }
  std::int64_t count(const std::string& prefix = "") const;

  DType dtype() const { return dtype_; }
  std::uint64_t seed() const { return seed_; }

  void zero_grad();
  // Overwrites values in place; entry identity is unchanged.
  void fill(const std::string& name, double value);
  void set(const std::string& name, const Tensor& value);
  // Converts every entry (and new entries) to `dtype`. Identities change.
  void convert(DType dtype);

  // Every get() between start_trace() and stop_trace() is recorded.
  void start_trace();
  std::vector<std::pair<std::string, const void*>> stop_trace();

 private:
  std::uint64_t seed_;
  DType dtype_;
  std::map<std::string, Tensor> params_;
  std::vector<std::string> order_;
  bool tracing_ = false;
  mutable std::vector<std::pair<std::string, const void*>> trace_;
};

}  // namespace catagg
