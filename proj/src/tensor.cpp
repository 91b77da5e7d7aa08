#include "geomf/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace geomf {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "×";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (std::size_t e : shape_) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(element_count(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (element_count(shape_) != values.size()) {
    throw DimensionError("tensor shape " + to_string(shape_) + " holds " + std::to_string(element_count(shape_)) +
                         " values, got " + std::to_string(values.size()));
  }
  for (std::size_t e : shape_) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape()); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

std::span<const double> Tensor::values() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

std::span<double> Tensor::mutable_values() {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape_));
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw IndexError("index rank does not match tensor rank");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw IndexError("index out of range for shape " + to_string(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[flat];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  if (!data_) return {};
  return Tensor(shape_, *data_);
}

// ---------------------------------------------------------------------------

std::span<double> GradientSink::operator[](std::size_t k) {
  const std::size_t id = inputs_.at(k);
  if (id == Tape::kUntracked) return {};
  return tape_.gradient_buffer(id);
}

std::span<double> Tape::gradient_buffer(std::size_t id) {
  auto& g = grads_[id];
  if (g.empty()) g.assign(element_count(nodes_[id].shape), 0.0);
  return {g.data(), g.size()};
}

Tensor Tape::watch(const Tensor& leaf) {
  if (!leaf.defined()) throw ShapeError("cannot watch an undefined tensor");
  if (finished_) throw Error("tape already swept; tapes are single-use");
  Tensor alias = leaf.detach();
  alias.tape_ = this;
  alias.id_ = nodes_.size();
  nodes_.push_back(Node{alias.shape_, {}, {}});
  grads_.emplace_back();
  return alias;
}

Tensor Tape::record(Tensor result, const std::vector<const Tensor*>& inputs, BackwardFn backward) {
  if (finished_) throw Error("tape already swept; tapes are single-use");
  Node node;
  node.shape = result.shape_;
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (in->tape_ == nullptr) {
      node.inputs.push_back(kUntracked);
    } else if (in->tape_ != this) {
      throw Error("op input belongs to a different tape");
    } else {
      node.inputs.push_back(in->id_);
    }
  }
  node.backward = std::move(backward);
  result.tape_ = this;
  result.id_ = nodes_.size();
  nodes_.push_back(std::move(node));
  grads_.emplace_back();
  return result;
}

void Tape::backward(const Tensor& loss) {
  if (loss.rank() != 0) throw ShapeError("backward needs a rank-0 loss, got shape " + to_string(loss.shape()));
  if (loss.tape_ != this) throw Error("loss is not recorded on this tape");
  if (finished_) throw Error("tape already swept; tapes are single-use");
  finished_ = true;
  grads_[loss.id_].assign(1, 1.0);
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (grads_[id].empty() || !node.backward) continue;
    GradientSink sink(*this, node.inputs);
    // The node's own buffer is stable: backward rules only touch inputs, which
    // precede the node.
    std::span<const double> g{grads_[id].data(), grads_[id].size()};
    node.backward(g, sink);
  }
}

std::span<const double> Tape::grad_values(const Tensor& t) const {
  if (t.tape_ != this) throw Error("tensor is not recorded on this tape");
  const auto& g = grads_[t.id_];
  return {g.data(), g.size()};
}

Tensor Tape::grad(const Tensor& t) const {
  auto g = grad_values(t);
  if (g.empty()) return Tensor(t.shape());
  return Tensor(t.shape(), std::vector<double>(g.begin(), g.end()));
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (t->tape() == nullptr) continue;
    if (tape != nullptr && t->tape() != tape) throw Error("op inputs belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw NumericError("finite difference step must be positive");
  Tensor probe = x.clone();
  std::vector<double> grad(x.size());
  auto v = probe.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double up = f(probe);
    v[i] = saved - h;
    const double down = f(probe);
    v[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(grad));
}

}  // namespace geomf
