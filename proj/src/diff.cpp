#include "pmf/diff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "pmf/errors.hpp"

namespace pmf::diff {

namespace {

[[noreturn]] void shape_error(std::string_view op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows() << "x"
     << b.cols();
  throw DimensionError(os.str());
}

void require_same_shape(std::string_view op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

std::size_t check_mask(std::string_view op, const Matrix& a, std::size_t mask_len) {
  if (static_cast<Eigen::Index>(mask_len) != a.rows()) {
    std::ostringstream os;
    os << op << ": mask length " << mask_len << " does not match " << a.rows() << " rows";
    throw DimensionError(os.str());
  }
  return mask_len;
}

}  // namespace

DiffTensor::DiffTensor(Matrix v, bool trainable)
    : values(std::move(v)), grad(Matrix::Zero(values.rows(), values.cols())), requires_grad(trainable) {}

void DiffTensor::zero_grad() { grad.setZero(values.rows(), values.cols()); }

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: invalid variable handle");
  return nodes_[v.id];
}

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: invalid variable handle");
  return nodes_[v.id];
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::watch(DiffTensor& tensor) {
  Node n;
  n.value = tensor.values;
  n.needs_grad = recording_ && tensor.requires_grad;
  n.bound = n.needs_grad ? &tensor : nullptr;
  if (n.needs_grad &&
      (tensor.grad.rows() != tensor.values.rows() || tensor.grad.cols() != tensor.values.cols())) {
    tensor.zero_grad();
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = std::any_of(inputs.begin(), inputs.end(), [&](Var v) { return node(v).needs_grad; });
  if (n.needs_grad) n.fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

const Matrix& Tape::grad(Var v) const { return node(v).grad; }

bool Tape::needs_grad(Var v) const { return node(v).needs_grad; }

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = node(v);
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var scalar_output) {
  Node& out = node(scalar_output);
  if (out.value.rows() != 1 || out.value.cols() != 1) {
    throw DimensionError("backward: output must be 1x1");
  }
  if (!out.needs_grad) return;
  accumulate(scalar_output, Matrix::Ones(1, 1));
  for (std::size_t i = scalar_output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.fn) {
      const Matrix upstream = n.grad;
      n.fn(*this, upstream);
    }
    if (n.bound != nullptr) n.bound->grad += n.grad;
  }
}

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Matrix out = av * bv;
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var matmul_transposed(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.cols()) shape_error("matmul_transposed", av, bv);
  Matrix out = av * bv.transpose();
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b));
    if (tp.needs_grad(b)) tp.accumulate(b, g.transpose() * tp.value(a));
  });
}

Var transpose(Tape& t, Var a) {
  Matrix out = t.value(a).transpose();
  const Var in[] = {a};
  return t.record(std::move(out), in,
                  [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g.transpose()); });
}

Var add(Tape& t, Var a, Var b) {
  require_same_shape("add", t.value(a), t.value(b));
  Matrix out = t.value(a) + t.value(b);
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same_shape("sub", t.value(a), t.value(b));
  Matrix out = t.value(a) - t.value(b);
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var add_row_broadcast(Tape& t, Var a, Var row) {
  const Matrix& av = t.value(a);
  const Matrix& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) shape_error("add_row_broadcast", av, rv);
  Matrix out = av.rowwise() + rv.row(0);
  const Var in[] = {a, row};
  return t.record(std::move(out), in, [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var outer_sum(Tape& t, Var col, Var row) {
  const Matrix& cv = t.value(col);
  const Matrix& rv = t.value(row);
  if (cv.cols() != 1 || rv.cols() != 1) shape_error("outer_sum", cv, rv);
  Matrix out(cv.rows(), rv.rows());
  for (Eigen::Index i = 0; i < cv.rows(); ++i) {
    for (Eigen::Index j = 0; j < rv.rows(); ++j) out(i, j) = cv(i, 0) + rv(j, 0);
  }
  const Var in[] = {col, row};
  return t.record(std::move(out), in, [col, row](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(col)) tp.accumulate(col, g.rowwise().sum());
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum().transpose());
  });
}

Var add_constant(Tape& t, Var a, const Matrix& c) {
  require_same_shape("add_constant", t.value(a), c);
  Matrix out = t.value(a) + c;
  const Var in[] = {a};
  return t.record(std::move(out), in, [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g); });
}

Var scale(Tape& t, Var a, double factor) {
  Matrix out = t.value(a) * factor;
  const Var in[] = {a};
  return t.record(std::move(out), in,
                  [a, factor](Tape& tp, const Matrix& g) { tp.accumulate(a, g * factor); });
}

Var mul(Tape& t, Var a, Var b) {
  require_same_shape("mul", t.value(a), t.value(b));
  Matrix out = t.value(a).cwiseProduct(t.value(b));
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

Var scale_rows(Tape& t, Var a, const Vector& weights) {
  const Matrix& av = t.value(a);
  if (weights.size() != av.rows()) {
    throw DimensionError("scale_rows: weight count does not match row count");
  }
  Matrix out = weights.asDiagonal() * av;
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, weights](Tape& tp, const Matrix& g) {
    tp.accumulate(a, weights.asDiagonal() * g);
  });
}

Var relu(Tape& t, Var a) {
  Matrix out = t.value(a).cwiseMax(0.0);
  const Var in[] = {a};
  return t.record(std::move(out), in, [a](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    tp.accumulate(a, g.cwiseProduct((x.array() > 0.0).cast<double>().matrix()));
  });
}

Var leaky_relu(Tape& t, Var a, double slope) {
  const Matrix& x = t.value(a);
  Matrix out = x.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, slope](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(a);
    Matrix d = xv.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

namespace {

// Shared backward for softmax outputs: dx = y * (g - rowsum(g * y)).
Matrix softmax_backward(const Matrix& y, const Matrix& g) {
  const Vector dots = g.cwiseProduct(y).rowwise().sum();
  Matrix dx = g;
  dx.colwise() -= dots;
  return dx.cwiseProduct(y);
}

}  // namespace

Var softmax_rows(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  const Var in[] = {a};
  const std::size_t self = t.size();
  return t.record(std::move(y), in, [a, self](Tape& tp, const Matrix& g) {
    tp.accumulate(a, softmax_backward(tp.value(Var{self}), g));
  });
}

Var masked_softmax_rows(Tape& t, Var a, const Matrix& mask) {
  const Matrix& x = t.value(a);
  require_same_shape("masked_softmax_rows", x, mask);
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (mask(i, j) != 0.0) m = std::max(m, x(i, j));
    }
    if (!std::isfinite(m)) throw DimensionError("masked_softmax_rows: row with empty mask");
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (mask(i, j) != 0.0) {
        y(i, j) = std::exp(x(i, j) - m);
        z += y(i, j);
      }
    }
    y.row(i) /= z;
  }
  const Var in[] = {a};
  const std::size_t self = t.size();
  return t.record(std::move(y), in, [a, self](Tape& tp, const Matrix& g) {
    tp.accumulate(a, softmax_backward(tp.value(Var{self}), g));
  });
}

Var l2_normalize_rows(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  Vector norms = x.rowwise().norm();
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (norms(i) > 0.0) y.row(i) = x.row(i) / norms(i);
  }
  const Var in[] = {a};
  const std::size_t self = t.size();
  return t.record(std::move(y), in, [a, self, norms](Tape& tp, const Matrix& g) {
    const Matrix& yv = tp.value(Var{self});
    Matrix dx = Matrix::Zero(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if (norms(i) <= 0.0) continue;
      const double proj = g.row(i).dot(yv.row(i));
      dx.row(i) = (g.row(i) - proj * yv.row(i)) / norms(i);
    }
    tp.accumulate(a, dx);
  });
}

Var hconcat(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("hconcat: no inputs");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) shape_error("hconcat", t.value(parts[0]), t.value(p));
    cols += t.value(p).cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (Var p : parts) {
    offsets.push_back(off);
    out.middleCols(off, t.value(p).cols()) = t.value(p);
    off += t.value(p).cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs, offsets](Tape& tp, const Matrix& g) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!tp.needs_grad(inputs[k])) continue;
      tp.accumulate(inputs[k], g.middleCols(offsets[k], tp.value(inputs[k]).cols()));
    }
  });
}

Var exp(Tape& t, Var a) {
  Matrix out = t.value(a).array().exp().matrix();
  const Var in[] = {a};
  const std::size_t self = t.size();
  return t.record(std::move(out), in, [a, self](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseProduct(tp.value(Var{self})));
  });
}

Var log(Tape& t, Var a) {
  Matrix out = t.value(a).array().log().matrix();
  const Var in[] = {a};
  return t.record(std::move(out), in, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseQuotient(tp.value(a)));
  });
}

Var gather_rows(Tape& t, Var a, std::span<const std::size_t> rows) {
  const Matrix& x = t.value(a);
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (static_cast<Eigen::Index>(rows[k]) >= x.rows()) {
      throw DimensionError("gather_rows: row index " + std::to_string(rows[k]) + " out of range");
    }
    out.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(rows[k]));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, idx](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(a);
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      dx.row(static_cast<Eigen::Index>(idx[k])) += g.row(static_cast<Eigen::Index>(k));
    }
    tp.accumulate(a, dx);
  });
}

Var masked_row_sum(Tape& t, Var a, const RowMask& mask) {
  const Matrix& x = t.value(a);
  check_mask("masked_row_sum", x, mask.size());
  Matrix out = Matrix::Zero(1, x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (mask[static_cast<std::size_t>(i)] != 0) out.row(0) += x.row(i);
  }
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, mask](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(a);
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      if (mask[static_cast<std::size_t>(i)] != 0) dx.row(i) = g.row(0);
    }
    tp.accumulate(a, dx);
  });
}

Var sum(Tape& t, Var a) {
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum();
  const Var in[] = {a};
  return t.record(std::move(out), in, [a](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(a);
    tp.accumulate(a, Matrix::Constant(xv.rows(), xv.cols(), g(0, 0)));
  });
}

Var logsumexp_rows(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  Matrix out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    if (!std::isfinite(m)) {
      out(i, 0) = m;
      continue;
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) z += std::exp(x(i, j) - m);
    out(i, 0) = m + std::log(z);
  }
  const Var in[] = {a};
  const std::size_t self = t.size();
  return t.record(std::move(out), in, [a, self](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(a);
    const Matrix& lse = tp.value(Var{self});
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      if (!std::isfinite(lse(i, 0))) continue;
      // Scalar exp: the vectorised one maps -inf to a denormal, not 0.
      for (Eigen::Index j = 0; j < xv.cols(); ++j) dx(i, j) = std::exp(xv(i, j) - lse(i, 0)) * g(i, 0);
    }
    tp.accumulate(a, dx);
  });
}

Var diagonal(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  if (x.rows() != x.cols()) shape_error("diagonal", x, x);
  Matrix out = x.diagonal();
  const Var in[] = {a};
  return t.record(std::move(out), in, [a](Tape& tp, const Matrix& g) {
    const Eigen::Index n = tp.value(a).rows();
    Matrix dx = Matrix::Zero(n, n);
    dx.diagonal() = g.col(0);
    tp.accumulate(a, dx);
  });
}

Var stop_gradient_rows(Tape& t, Var a, const RowMask& mask) {
  const Matrix& x = t.value(a);
  check_mask("stop_gradient_rows", x, mask.size());
  Matrix out = x;
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, mask](Tape& tp, const Matrix& g) {
    Matrix dx = g;
    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
      if (mask[static_cast<std::size_t>(i)] == 0) dx.row(i).setZero();
    }
    tp.accumulate(a, dx);
  });
}

Matrix normalized_rows(const Matrix& a) {
  Matrix out = Matrix::Zero(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double n = a.row(i).norm();
    if (n > 0.0) out.row(i) = a.row(i) / n;
  }
  return out;
}

Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) shape_error("cosine_similarity_matrix", a, b);
  return normalized_rows(a) * normalized_rows(b).transpose();
}

double finite_difference_check(const ScalarProgram& f, std::span<DiffTensor* const> params,
                               double eps, std::size_t max_coords_per_tensor,
                               std::uint64_t sample_seed) {
  for (DiffTensor* p : params) p->zero_grad();
  {
    Tape tape;
    const Var out = f(tape);
    tape.backward(out);
  }
  auto evaluate = [&]() {
    Tape tape;
    const Var out = f(tape);
    return tape.value(out)(0, 0);
  };

  std::mt19937_64 rng(sample_seed);
  double worst = 0.0;
  for (DiffTensor* p : params) {
    const auto total = static_cast<std::size_t>(p->values.size());
    std::vector<std::size_t> coords(total);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_tensor != 0 && max_coords_per_tensor < total) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_tensor);
    }
    const Matrix analytic = p->grad;
    for (std::size_t c : coords) {
      double& x = p->values.data()[c];
      const double saved = x;
      x = saved + eps;
      const double up = evaluate();
      x = saved - eps;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.data()[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace pmf::diff
