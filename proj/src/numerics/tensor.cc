#include "psyt/tensor.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace psyt {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& r : rows) {
    if (r.size() != m) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({n, m}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(std::string_view what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      std::ostringstream os;
      os << "non-finite value " << data_[i] << " at flat index " << i << " of " << what << " (shape "
         << shape_string(shape_) << ")";
      throw NumericError(os.str());
    }
  }
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (shape_ != other.shape_) {
    throw DimensionError("cannot add " + shape_string(other.shape_) + " into " + shape_string(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (auto& v : data_) v *= scale;
  return *this;
}

namespace {

void gemm(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t n = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t m = b.shape()[b.rank() - 1];

  // Broadcast the leading (batch) axes numpy-style.
  const Shape a_lead(a.shape().begin(), a.shape().end() - 2);
  const Shape b_lead(b.shape().begin(), b.shape().end() - 2);
  const std::size_t lead_rank = std::max(a_lead.size(), b_lead.size());
  Shape lead(lead_rank, 1);
  for (std::size_t i = 0; i < lead_rank; ++i) {
    const std::size_t ai = i + a_lead.size() >= lead_rank ? a_lead[i + a_lead.size() - lead_rank] : 1;
    const std::size_t bi = i + b_lead.size() >= lead_rank ? b_lead[i + b_lead.size() - lead_rank] : 1;
    if (ai != bi && ai != 1 && bi != 1) {
      throw DimensionError("matmul batch shapes not broadcastable: " + shape_string(a.shape()) + " x " +
                           shape_string(b.shape()));
    }
    lead[i] = std::max(ai, bi);
  }
  Shape out_shape = lead;
  out_shape.push_back(n);
  out_shape.push_back(m);
  Tensor out(out_shape);

  const std::size_t batches = shape_size(lead);
  std::vector<std::size_t> index(lead_rank, 0);
  for (std::size_t bidx = 0; bidx < batches; ++bidx) {
    std::size_t a_off = 0, b_off = 0;
    for (std::size_t i = 0; i < lead_rank; ++i) {
      if (i + a_lead.size() >= lead_rank) {
        const std::size_t ad = a_lead[i + a_lead.size() - lead_rank];
        a_off = a_off * ad + (ad == 1 ? 0 : index[i]);
      }
      if (i + b_lead.size() >= lead_rank) {
        const std::size_t bd = b_lead[i + b_lead.size() - lead_rank];
        b_off = b_off * bd + (bd == 1 ? 0 : index[i]);
      }
    }
    gemm(a.data().data() + a_off * n * k, b.data().data() + b_off * k * m, out.data().data() + bidx * n * m, n,
         k, m);
    for (std::size_t i = lead_rank; i-- > 0;) {
      if (++index[i] < lead[i]) break;
      index[i] = 0;
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw DimensionError("matmul_nt shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(j, p);
      out(i, j) = s;
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
    throw DimensionError("matmul_tn shape mismatch: " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
  }
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  Tensor out({n, m});
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a(p, i);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out(i, j) += av * b(p, j);
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_string(a.shape()));
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  out += b;
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  x.check_finite("softmax input");
  const auto& s = x.shape();
  const std::size_t n = s[axis];
  const std::size_t inner = shape_size(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t outer = shape_size(Shape(s.begin(), s.begin() + axis));
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(x[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not match last axis of " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t j = 0; j < d; ++j) o[j] = gain[j] * (in[j] - mean) * inv + bias[j];
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("max_abs_diff shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace psyt
