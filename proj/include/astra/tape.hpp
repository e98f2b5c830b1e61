#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "astra/tensor.hpp"

namespace astra {

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so parents always
// precede children and a single reverse sweep visits each node once.
//
// A tape created with record=false keeps forward values only; use it for
// inference where no gradient is needed.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an op result. `backward` runs only if some parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward);

  void backward(Var root);
  void zero_grad();

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  void accumulate(int id, const Tensor& g);
  void accumulate_scaled(int id, const Tensor& g, double scale);
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Stop-gradient bookkeeping. Every stop_gradient() call appends its forward
  // value to the record; when a replay list is installed, the n-th call returns
  // replay[n] instead. Finite-difference checks use this to hold sg() terms
  // constant while perturbing parameters.
  Tensor next_stop_gradient(const Tensor& computed);
  void set_stop_gradient_replay(std::vector<Tensor> values);
  const std::vector<Tensor>& stop_gradient_record() const { return sg_record_; }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    Backward backward;
    bool requires_grad = false;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::vector<Tensor> sg_record_;
  std::optional<std::vector<Tensor>> sg_replay_;
  std::size_t sg_cursor_ = 0;
};

}  // namespace astra
