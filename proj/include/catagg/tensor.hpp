#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "catagg/errors.hpp"

namespace catagg {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

// Bytes held by live tensor buffers and kernel scratch, process wide.
struct MemoryStats {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
};
MemoryStats memory_stats();
// Resets the peak to the current live byte count.
void reset_peak_memory();

namespace detail {

void note_alloc(std::size_t bytes);
void note_free(std::size_t bytes);

template <class T>
struct TrackedAllocator {
  using value_type = T;
  TrackedAllocator() = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    note_alloc(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    note_free(n * sizeof(T));
    ::operator delete(p);
  }
  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

}  // namespace detail

// Heap vector whose bytes count towards memory_stats().
template <class T>
using TrackedVector = std::vector<T, detail::TrackedAllocator<T>>;

using Buffer = std::variant<TrackedVector<float>, TrackedVector<double>>;

template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

template <class T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Buffer> data;
  std::shared_ptr<Buffer> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

}  // namespace detail

// Dense row-major tensor handle. Copies share the underlying buffer; use
// clone() for a deep copy. Leaf tensors with requires_grad carry a gradient
// slot that backward() accumulates into.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  // Extent of an axis; negative axes count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    const auto& v = std::get<TrackedVector<T>>(*impl_->data);
    return {v.data(), v.size()};
  }
  template <class T>
  std::span<T> data_mut() {
    auto& v = std::get<TrackedVector<T>>(*impl_->data);
    return {v.data(), v.size()};
  }

  double item() const;
  double flat(std::int64_t index) const;
  void set_flat(std::int64_t index, double value);
  double at(std::initializer_list<std::int64_t> index) const;
  std::vector<double> values() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  // Gradient slot of a leaf; undefined when nothing has been accumulated.
  Tensor grad() const;
  void zero_grad();
  bool is_leaf() const;
  std::string producer() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;
  // Overwrites the values in place (same shape and dtype); keeps identity.
  void assign(const Tensor& other);
  void fill(double value);

  bool bit_equal(const Tensor& other) const;
  const void* id() const { return impl_.get(); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Train mode records the graph; infer mode retains no activations.
enum class Mode { train, infer };
Mode current_mode();

class ModeGuard {
 public:
  explicit ModeGuard(Mode mode);
  ~ModeGuard();
  ModeGuard(const ModeGuard&) = delete;
  ModeGuard& operator=(const ModeGuard&) = delete;

 private:
  Mode previous_;
};

struct InferenceGuard : ModeGuard {
  InferenceGuard() : ModeGuard(Mode::infer) {}
};

// Flushes subnormal floats to zero on the calling thread while alive. Tiny
// gradients otherwise drop the kernels onto the slow microcode path.
class DenormalGuard {
 public:
  DenormalGuard();
  ~DenormalGuard();
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
  unsigned previous_ = 0;
};

// Reverse-mode accumulation from a scalar loss into every reachable leaf
// requiring a gradient. The recorded graph is released afterwards.
void backward(const Tensor& loss);

// First op (since the last reset) whose output contained a non-finite value.
void reset_nonfinite_tracker();
std::optional<std::string> first_nonfinite_op();

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  const char* op = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

bool grad_enabled();
bool any_requires_grad(std::initializer_list<const Tensor*> inputs);
bool any_requires_grad(const std::vector<Tensor>& inputs);
// Attaches a graph node to `out` when recording and any input needs a gradient.
// Backward returns one gradient per input (undefined for "no gradient").
void attach(Tensor& out, const char* op, std::vector<Tensor> inputs, BackwardFn fn);
// Flags `out` in the non-finite tracker if it holds NaN/Inf.
void check_finite(const Tensor& out, const char* op);

}  // namespace detail

}  // namespace catagg
