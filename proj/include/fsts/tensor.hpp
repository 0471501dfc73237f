#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "fsts/error.hpp"

namespace fsts {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;    // empty until first written to
  bool requires_grad = false;  // leaf flag set at construction
  bool track = false;          // participates in gradient computation

  std::size_t numel() const { return data.size(); }
  std::vector<double>& grad_buffer();  // lazily allocates zeros
};

}  // namespace detail

// Dense row-major f64 tensor. Value-semantic handle; copies share storage.
// Ops executed while a GradientTape is alive record backward rules on it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                        bool requires_grad = false);
  // Glorot-style uniform with the given fan sizes, zero-mean.
  static Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out,
                       std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }

  const std::vector<double>& values() const;
  std::vector<double>& values();  // in-place mutation (optimizer updates)
  double item() const;            // scalar tensors only
  double at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if absent
  void clear_grad();

  // Deep copy with fresh storage (no tape participation carried over).
  Tensor clone() const;

  std::shared_ptr<detail::Storage> storage() const { return st_; }

 private:
  std::shared_ptr<detail::Storage> st_;
};

// Small integer tensor used for embedding/table lookups.
struct IntTensor {
  Shape shape;
  std::vector<std::int64_t> values;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<std::int64_t> v);
  std::size_t numel() const { return values.size(); }
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; ops record themselves while it is active. backward()
// replays the records in reverse and then clears the tape, so a second
// backward without re-running the forward pass is an error.
class GradientTape {
 public:
  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  void backward(const Tensor& loss);
  std::size_t num_records() const { return records_.size(); }
  bool recorded(const Tensor& t) const;

  static GradientTape* current();

 private:
  friend void record_op(const char* name, std::initializer_list<Tensor> inputs,
                        Tensor& out,
                        std::function<void(const std::vector<double>&)> pull);

  struct Record {
    std::shared_ptr<detail::Storage> out;
    std::function<void(const std::vector<double>&)> pull;
  };

  std::vector<Record> records_;
  std::unordered_set<const detail::Storage*> produced_;
  GradientTape* prev_ = nullptr;
};

// --- operations -----------------------------------------------------------
// All ops validate shapes, refuse to emit non-finite values on finite input,
// and register a backward rule when any input participates in the tape.

// Batched matrix product [.., M, K] x [.., K, P] -> [.., M, P]. Leading axes
// broadcast (missing or size-1 dims stretch).
Tensor matmul(const Tensor& a, const Tensor& b);

// Node-axis contraction: out[b,k,t,c] = sum_i graph[(c,)i,k] * x[b,i,t,c].
// graph is [N,n] (shared across channels) or [C,N,n] (one slice per channel).
Tensor contract_nodes(const Tensor& graph, const Tensor& x);

// Inverse of the aggregation step: out[b,j,t,c] = sum_k w[(c,)k,j]*agg[b,k,t,c]
// + bias[j]. weight is [n,N] shared or [C,n,N] per channel.
Tensor project_nodes(const Tensor& weight, const Tensor& bias, const Tensor& agg);

// Full-rank node mixing: out[b,j,t,c] = sum_i adj[j,i] * x[b,i,t,c].
Tensor dense_graph_apply(const Tensor& adj, const Tensor& x);

// Softmax over the second-to-last axis, independently per trailing column.
// Max-subtraction keeps exp() in range for any finite input.
Tensor softmax_columns(const Tensor& z);

// Layer normalization over the last axis, epsilon 1e-5 inside the sqrt.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);       // broadcasting
Tensor sub(const Tensor& a, const Tensor& b);       // broadcasting
Tensor hadamard(const Tensor& a, const Tensor& b);  // broadcasting
Tensor scale(const Tensor& x, double factor);
Tensor abs_val(const Tensor& x);  // subgradient 0 at ties
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose_axes(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor embedding_lookup(const Tensor& table, const IntTensor& idx);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Backward through the tape the loss was recorded on (the active one).
void backward(const Tensor& loss);

}  // namespace fsts
