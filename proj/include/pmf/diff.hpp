#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation applied during one forward pass. Calling
// backward() on a scalar node walks the record in exact reverse order and
// accumulates gradients additively into intermediate nodes and into any bound
// DiffTensor (the persistent parameters). Tapes are single-use and confined
// to one thread.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace pmf::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Per-row 0/1 mask. 0 marks a row whose gradient is stopped.
using RowMask = std::vector<std::uint8_t>;

// A persistent tensor (typically a parameter) that outlives individual tapes.
struct DiffTensor {
  Matrix values;
  Matrix grad;
  bool requires_grad = true;

  DiffTensor() = default;
  explicit DiffTensor(Matrix v, bool trainable = true);

  [[nodiscard]] Eigen::Index rows() const { return values.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return values.cols(); }
  void zero_grad();
};

// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;

  // With record_gradients = false every node is a constant (inference mode).
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Leaf that never receives gradient.
  Var constant(Matrix value);
  // Leaf bound to a persistent tensor; backward accumulates into tensor.grad.
  Var watch(DiffTensor& tensor);

  // Records an operation output. `fn` receives the gradient of the output
  // and must push contributions to its inputs via accumulate().
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn);

  [[nodiscard]] const Matrix& value(Var v) const;
  [[nodiscard]] const Matrix& grad(Var v) const;
  [[nodiscard]] bool needs_grad(Var v) const;
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Adds `g` into the gradient of `v` (no-op for constant subgraphs).
  void accumulate(Var v, const Matrix& g);

  // Seeds d(out)/d(out) = 1 for a 1x1 node and propagates in reverse order.
  void backward(Var scalar_output);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    DiffTensor* bound = nullptr;
    BackwardFn fn;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
  bool recording_ = true;
};

// Differentiable primitives. All throw DimensionError naming the operation on
// shape mismatch.

Var matmul(Tape& t, Var a, Var b);
// a * b^T
Var matmul_transposed(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
// Adds a 1 x c row vector to every row of an r x c matrix.
Var add_row_broadcast(Tape& t, Var a, Var row);
// out(i, j) = col(i) + row(j) for an n x 1 column and an m x 1 column.
Var outer_sum(Tape& t, Var col, Var row);
// Adds a constant matrix (no gradient to the constant).
Var add_constant(Tape& t, Var a, const Matrix& c);
Var scale(Tape& t, Var a, double factor);
Var mul(Tape& t, Var a, Var b);
// Multiplies row i by the constant weights(i).
Var scale_rows(Tape& t, Var a, const Vector& weights);
Var relu(Tape& t, Var a);
Var leaky_relu(Tape& t, Var a, double slope);
Var softmax_rows(Tape& t, Var a);
// Row softmax restricted to entries where mask(i, j) != 0; masked entries are 0.
// Every row must keep at least one entry.
Var masked_softmax_rows(Tape& t, Var a, const Matrix& mask);
// Rows divided by their L2 norm; zero rows map to zero rows with zero gradient.
Var l2_normalize_rows(Tape& t, Var a);
Var hconcat(Tape& t, std::span<const Var> parts);
Var exp(Tape& t, Var a);
Var log(Tape& t, Var a);
Var gather_rows(Tape& t, Var a, std::span<const std::size_t> rows);
// 1 x c sum of rows whose mask entry is nonzero.
Var masked_row_sum(Tape& t, Var a, const RowMask& mask);
// 1 x 1 sum of all entries.
Var sum(Tape& t, Var a);
// n x 1 stabilised log-sum-exp of each row. -inf entries contribute nothing.
Var logsumexp_rows(Tape& t, Var a);
// n x 1 main diagonal of a square matrix.
Var diagonal(Tape& t, Var a);
// Identity forward; backward zeroes the gradient of rows with mask 0.
Var stop_gradient_rows(Tape& t, Var a, const RowMask& mask);

// Plain (off-tape) cosine similarity matrix; zero-norm rows give 0.
Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b);

// Copy with every row scaled to unit L2 norm; zero rows stay zero.
Matrix normalized_rows(const Matrix& a);

// Builds a scalar on a fresh tape from the watched parameters.
using ScalarProgram = std::function<Var(Tape&)>;

// Compares reverse-mode gradients against central finite differences.
// Returns max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over the
// checked coordinates. `max_coords_per_tensor` = 0 checks every coordinate;
// otherwise a deterministic sample of that many per tensor.
double finite_difference_check(const ScalarProgram& f, std::span<DiffTensor* const> params,
                               double eps = 1e-5, std::size_t max_coords_per_tensor = 0,
                               std::uint64_t sample_seed = 0);

}  // namespace pmf::diff
