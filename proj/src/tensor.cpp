#include "catagg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace catagg {

namespace {

std::atomic<std::int64_t> g_live_bytes{0};
std::atomic<std::int64_t> g_peak_bytes{0};

thread_local Mode t_mode = Mode::train;
thread_local bool t_in_backward = false;
thread_local std::optional<std::string> t_first_nonfinite;

Buffer make_buffer(DType dtype, std::int64_t n) {
  if (dtype == DType::f32) return Buffer{TrackedVector<float>(static_cast<std::size_t>(n), 0.0f)};
  return Buffer{TrackedVector<double>(static_cast<std::size_t>(n), 0.0)};
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

MemoryStats memory_stats() { return {g_live_bytes.load(), g_peak_bytes.load()}; }

void reset_peak_memory() { g_peak_bytes.store(g_live_bytes.load()); }

namespace detail {

void note_alloc(std::size_t bytes) {
  const auto live = g_live_bytes.fetch_add(static_cast<std::int64_t>(bytes)) +
                    static_cast<std::int64_t>(bytes);
  auto peak = g_peak_bytes.load();
  while (live > peak && !g_peak_bytes.compare_exchange_weak(peak, live)) {
  }
}

void note_free(std::size_t bytes) { g_live_bytes.fetch_sub(static_cast<std::int64_t>(bytes)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, DType dtype) {
  for (auto e : shape) {
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->dtype = dtype;
  impl_->data = std::make_shared<Buffer>(make_buffer(dtype, shape_numel(shape)));
  impl_->shape = std::move(shape);
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(t.shape()));
  }
  dispatch(dtype, [&]<class T>() {
    auto d = t.data_mut<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                     dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

const Shape& Tensor::shape() const {
  if (!impl_) throw StateError("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(r));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw StateError("use of undefined tensor");
  return impl_->dtype;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return flat(0);
}

double Tensor::flat(std::int64_t index) const {
  return dispatch(dtype(), [&]<class T>() -> double { return data<T>()[index]; });
}

void Tensor::set_flat(std::int64_t index, double value) {
  dispatch(dtype(), [&]<class T>() { data_mut<T>()[index] = static_cast<T>(value); });
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw DimensionError("at(): wrong index rank");
  std::int64_t off = 0;
  std::size_t a = 0;
  for (auto i : index) {
    const auto e = impl_->shape[a++];
    if (i < 0 || i >= e) throw DimensionError("at(): index out of range");
    off = off * e + i;
  }
  return flat(off);
}

std::vector<double> Tensor::values() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (impl_->grad_fn) throw StateError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl_ || !impl_->grad) return {};
  auto g = std::make_shared<detail::TensorImpl>();
  g->shape = impl_->shape;
  g->dtype = impl_->dtype;
  g->data = impl_->grad;
  return Tensor(std::move(g));
}

void Tensor::zero_grad() {
  if (!impl_->grad) {
    impl_->grad = std::make_shared<Buffer>(make_buffer(dtype(), numel()));
    return;
  }
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, *impl_->grad);
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

std::string Tensor::producer() const {
  return impl_ && impl_->grad_fn ? impl_->grad_fn->op : "";
}

Tensor Tensor::detach() const {
  auto d = std::make_shared<detail::TensorImpl>();
  d->shape = impl_->shape;
  d->dtype = impl_->dtype;
  d->data = impl_->data;
  return Tensor(std::move(d));
}

Tensor Tensor::clone() const {
  auto d = std::make_shared<detail::TensorImpl>();
  d->shape = impl_->shape;
  d->dtype = impl_->dtype;
  d->data = std::make_shared<Buffer>(*impl_->data);
  return Tensor(std::move(d));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  Tensor out(shape(), target);
  dispatch(dtype(), [&]<class S>() {
    dispatch(target, [&]<class D>() {
      auto src = data<S>();
      auto dst = out.data_mut<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

void Tensor::assign(const Tensor& other) {
  if (other.shape() != shape() || other.dtype() != dtype()) {
    throw DimensionError("assign: shape/dtype mismatch " + shape_str(shape()) + " vs " +
                         shape_str(other.shape()));
  }
  dispatch(dtype(), [&]<class T>() {
    auto src = other.data<T>();
    auto dst = data_mut<T>();
    std::copy(src.begin(), src.end(), dst.begin());
  });
}

void Tensor::fill(double value) {
  dispatch(dtype(), [&]<class T>() {
    auto d = data_mut<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape() != other.shape() || dtype() != other.dtype()) return false;
  return dispatch(dtype(), [&]<class T>() {
    auto a = data<T>();
    auto b = other.data<T>();
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
  });
}

// ---------------------------------------------------------------------------
// Modes and autograd

Mode current_mode() { return t_mode; }

ModeGuard::ModeGuard(Mode mode) : previous_(t_mode) { t_mode = mode; }
ModeGuard::~ModeGuard() { t_mode = previous_; }

#if defined(__SSE__)
DenormalGuard::DenormalGuard() : previous_(_mm_getcsr()) { _mm_setcsr(previous_ | 0x8040u); }
DenormalGuard::~DenormalGuard() { _mm_setcsr(previous_); }
#else
DenormalGuard::DenormalGuard() = default;
DenormalGuard::~DenormalGuard() = default;
#endif

void reset_nonfinite_tracker() { t_first_nonfinite.reset(); }
std::optional<std::string> first_nonfinite_op() { return t_first_nonfinite; }

namespace detail {

bool grad_enabled() { return t_mode == Mode::train && !t_in_backward; }

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

void check_finite(const Tensor& out, const char* op) {
  if (t_first_nonfinite) return;
  const bool finite = dispatch(out.dtype(), [&]<class T>() {
    for (T v : out.data<T>()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  });
  if (!finite) t_first_nonfinite = op;
}

void attach(Tensor& out, const char* op, std::vector<Tensor> inputs, BackwardFn fn) {
  check_finite(out, op);
  if (!grad_enabled() || !any_requires_grad(inputs)) return;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(fn);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
}

}  // namespace detail

namespace {

void accumulate_into(Buffer& dst, const Tensor& g) {
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        auto src = g.data<T>();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += src[i];
      },
      dst);
}

struct BackwardScope {
  BackwardScope() { t_in_backward = true; }
  ~BackwardScope() { t_in_backward = false; }
};

}  // namespace

void backward(const Tensor& loss) {
  if (t_mode != Mode::train) throw StateError("backward() called in infer mode");
  if (t_in_backward) throw StateError("re-entrant backward()");
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw StateError("backward(): loss was not produced from tensors requiring gradients");
  }

  using Impl = detail::TensorImpl;
  // Iterative DFS post-order gives a topological order (inputs before users).
  // Strong references: consumed nodes drop their inputs before those inputs are visited.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->grad_fn.get();
    if (node && next < node->inputs.size()) {
      const auto& child = node->inputs[next++].impl();
      if (child && child->requires_grad && visited.insert(child.get()).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(std::move(impl));
    stack.pop_back();
  }

  BackwardScope scope;
  std::unordered_map<Impl*, Tensor> grads;
  grads.emplace(loss.impl().get(), Tensor::full(loss.shape(), 1.0, loss.dtype()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = it->get();
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    Tensor g = std::move(found->second);
    grads.erase(found);
    if (!impl->grad_fn) {
      if (!impl->grad) impl->grad = std::make_shared<Buffer>(make_buffer(impl->dtype, shape_numel(impl->shape)));
      accumulate_into(*impl->grad, g);
      continue;
    }
    auto node = impl->grad_fn;
    std::vector<Tensor> input_grads = node->backward(g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const Tensor& in = node->inputs[i];
      if (!in.defined() || !in.requires_grad() || i >= input_grads.size() ||
          !input_grads[i].defined()) {
        continue;
      }
      if (input_grads[i].shape() != in.shape()) {
        throw DimensionError(std::string("backward of '") + node->op +
                             "' produced gradient of shape " + shape_str(input_grads[i].shape()) +
                             " for input " + shape_str(in.shape()));
      }
      Impl* key = in.impl().get();
      auto slot = grads.find(key);
      if (slot == grads.end()) {
        grads.emplace(key, input_grads[i].clone());
      } else {
        accumulate_into(*slot->second.impl()->data, input_grads[i]);
      }
    }
    // Release saved activations once consumed.
    node->backward = nullptr;
    node->inputs.clear();
    impl->grad_fn.reset();
    impl->requires_grad = false;
  }
}

}  // namespace catagg
