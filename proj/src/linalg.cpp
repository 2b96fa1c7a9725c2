#include "evklab/linalg.hpp"

#include <cmath>
#include <cstring>
#include <iostream>
#include <numbers>
#include <stdexcept>

namespace evklab {

// ----------------------------- Matrix -----------------------------

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return Matrix();
  Matrix m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols()) throw std::invalid_argument("from_rows: ragged rows");
    std::memcpy(m.row_ptr(i), rows[i].data(), m.cols() * sizeof(double));
  }
  return m;
}

Vector Matrix::row_vector(std::size_t r) const {
  return Vector(row_ptr(r), row_ptr(r) + cols_);
}

void Matrix::set_row(std::size_t r, std::span<const double> v) {
  if (v.size() != cols_) throw std::invalid_argument("set_row: length mismatch");
  std::memcpy(row_ptr(r), v.data(), cols_ * sizeof(double));
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::column(std::size_t c) const {
  Matrix m(rows_, 1);
  for (std::size_t i = 0; i < rows_; ++i) m(i, 0) = (*this)(i, c);
  return m;
}

// ----------------------------- RngStream -----------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
  std::uint64_t sm = seed ^ rotl(stream_id, 32) ^ 0xa0761d6478bd642fULL;
  for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t RngStream::next_u64() {
  // xoshiro256**
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_gaussian() {
  if (has_gauss_spare_) {
    has_gauss_spare_ = false;
    return gauss_spare_;
  }
  // u in (0, 1] keeps log finite
  const double u = 1.0 - next_double();
  const double r = std::sqrt(-2.0 * std::log(u));
  const double theta = 2.0 * std::numbers::pi * next_double();
  gauss_spare_ = r * std::sin(theta);
  has_gauss_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t RngStream::next_below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("next_below: n must be positive");
  // rejection sampling for an unbiased draw
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

RngStream RngStream::derive(std::uint64_t salt) const {
  std::uint64_t sm = stream_id_ ^ rotl(salt, 17) ^ 0x8ebc6af09c88c6e3ULL;
  return RngStream(seed_, splitmix64(sm));
}

RngStream RngStream::derive(const std::string& name) const {
  return derive(fnv1a64(name));
}

// ----------------------------- sampling -----------------------------

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, RngStream& rng) {
  if (sigma < 0.0 || !std::isfinite(sigma))
    throw std::invalid_argument("gaussian_matrix: sigma must be finite and >= 0");
  Matrix m(rows, cols);
  for (double& x : m.data()) x = sigma * rng.next_gaussian();
  return m;
}

Vector gaussian_vector(std::size_t dim, double sigma, RngStream& rng) {
  if (sigma < 0.0 || !std::isfinite(sigma))
    throw std::invalid_argument("gaussian_vector: sigma must be finite and >= 0");
  Vector v(dim);
  for (double& x : v) x = sigma * rng.next_gaussian();
  return v;
}

// ----------------------------- vector ops -----------------------------

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine: dimension mismatch");
  if (u.empty()) throw std::invalid_argument("cosine: empty input");
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0 || nv == 0.0)
    throw std::invalid_argument("cosine: zero-norm input (similarity undefined)");
  if (std::memcmp(u.data(), v.data(), u.size() * sizeof(double)) == 0) return 1.0;
  const double c = dot(u, v) / (nu * nv);
  return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

// ----------------------------- matrix ops -----------------------------

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row_ptr(i);
    double* ci = c.row_ptr(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.row_ptr(k);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row_ptr(i);
    double* ci = c.row_ptr(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* bj = b.row_ptr(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
      ci[j] = s;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn: inner dimension mismatch");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* ak = a.row_ptr(k);
    const double* bk = b.row_ptr(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* ci = c.row_ptr(i);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

void add_inplace(Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "add: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

void sub_inplace(Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "sub: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] -= b.data()[i];
}

void scale_inplace(Matrix& a, double s) {
  for (double& x : a.data()) x *= s;
}

void axpy_inplace(Matrix& y, double a, const Matrix& x) {
  require(y.same_shape(x), "axpy: shape mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] += a * x.data()[i];
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double x : a.data()) s += x * x;
  return std::sqrt(s);
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const Matrix& a) { return all_finite(std::span<const double>(a.data())); }

// ----------------------------- SPD solve -----------------------------

namespace {

// In-place lower Cholesky; returns false on a non-positive or non-finite pivot.
bool cholesky(Matrix& a) {
  const std::size_t n = a.rows();
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    const double* lj = a.row_ptr(j);
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      const double* li = a.row_ptr(i);
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      a(i, j) = s / ljj;
    }
  }
  return true;
}

// Solves L L^T X = B column by column given the factored lower triangle.
Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  const std::size_t n = l.rows();
  Matrix x = b;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    // forward: L y = b
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      const double* li = l.row_ptr(i);
      for (std::size_t k = 0; k < i; ++k) s -= li[k] * x(k, c);
      x(i, c) = s / li[i];
    }
    // backward: L^T x = y
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
      x(ii, c) = s / l(ii, ii);
    }
  }
  return x;
}

double residual_norm(const Matrix& a, const Matrix& x, const Matrix& b) {
  Matrix r = matmul(a, x);
  sub_inplace(r, b);
  return frobenius_norm(r);
}

}  // namespace

Matrix solve_spd(const Matrix& a, const Matrix& b, SpdInfo* info, double jitter_rel) {
  require(a.rows() == a.cols(), "solve_spd: A must be square");
  require(a.rows() == b.rows(), "solve_spd: row count of B must match A");
  SpdInfo local;
  SpdInfo& out = info ? *info : local;
  out = SpdInfo{};

  const std::size_t n = a.rows();
  if (n == 0) return Matrix(0, b.cols());

  Matrix factor = a;
  bool ok = cholesky(factor);
  if (!ok) {
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i) trace += a(i, i);
    const double eps = jitter_rel * trace / static_cast<double>(n);
    factor = a;
    for (std::size_t i = 0; i < n; ++i) factor(i, i) += eps;
    if (eps <= 0.0 || !cholesky(factor))
      throw std::runtime_error("solve_spd: singular system (factorization failed after jitter)");
    out.jitter_applied = true;
    out.jitter = eps;
    std::cerr << "[evklab] solve_spd: factorization needed diagonal jitter " << eps << "\n";
  }

  Matrix x = cholesky_solve(factor, b);

  const double bnorm = frobenius_norm(b);
  if (bnorm > 0.0) {
    double res = residual_norm(a, x, b) / bnorm;
    // When the jittered factorization stands in for a rank-deficient A, a few
    // refinement sweeps against the original A recover the residual contract
    // on consistent systems.
    if (out.jitter_applied) {
      for (int sweep = 0; sweep < 3 && res > 1e-12; ++sweep) {
        Matrix r = matmul(a, x);
        sub_inplace(r, b);
        scale_inplace(r, -1.0);
        Matrix dx = cholesky_solve(factor, r);
        Matrix x_next = x;
        add_inplace(x_next, dx);
        const double res_next = residual_norm(a, x_next, b) / bnorm;
        if (res_next >= res) break;
        x = std::move(x_next);
        res = res_next;
        out.refinement_sweeps = sweep + 1;
      }
    }
    out.relative_residual = res;
  }

  if (!all_finite(x)) throw std::runtime_error("solve_spd: non-finite solution");
  return x;
}

}  // namespace evklab
