#ifndef EVKLAB_LINALG_HPP_
#define EVKLAB_LINALG_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace evklab {

using Vector = std::vector<double>;

// Dense row-major matrix of 64-bit reals. All public factory/solve routines
// leave only finite entries behind; violations throw.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<Vector>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<double> row(std::size_t r) { return {row_ptr(r), cols_}; }
  std::span<const double> row(std::size_t r) const { return {row_ptr(r), cols_}; }
  Vector row_vector(std::size_t r) const;
  void set_row(std::size_t r, std::span<const double> v);

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Matrix transposed() const;
  Matrix column(std::size_t c) const;  // n x 1 slice

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Counter-style seeded generator: (seed, stream_id) fully determines the draw
// sequence. Streams are split by deriving a new stream_id, never by sharing
// state. Uniform draws are pure integer ops (bit-exact everywhere); Gaussian
// draws go through Box-Muller on top of them.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64();
  // in [0, 1)
  double next_double();
  // N(0, 1), Box-Muller with cached spare
  double next_gaussian();
  // in [0, n)
  std::uint64_t next_below(std::uint64_t n);

  // Child stream fully determined by (seed, stream_id, salt); independent of
  // how much the parent has been consumed.
  RngStream derive(std::uint64_t salt) const;
  RngStream derive(const std::string& name) const;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t state_[4] = {};
  double gauss_spare_ = 0.0;
  bool has_gauss_spare_ = false;
};

std::uint64_t fnv1a64(std::string_view s);

// ---- sampling ----

// Entries i.i.d. N(0, sigma^2); sigma = 0 gives an (arithmetically) zero
// matrix. Entries are sigma * z with z standard normal, so scaling sigma by a
// power of two rescales the draws bit-exactly.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, RngStream& rng);
Vector gaussian_vector(std::size_t dim, double sigma, RngStream& rng);

// ---- vector ops ----

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> u);
// Throws on dimension mismatch or zero-norm input. Bitwise-equal inputs
// return exactly 1.0; otherwise the quotient is clamped to [-1, 1].
double cosine(std::span<const double> u, std::span<const double> v);

// ---- matrix ops ----

Matrix matmul(const Matrix& a, const Matrix& b);               // A * B
Matrix matmul_nt(const Matrix& a, const Matrix& b);            // A * B^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);            // A^T * B
void add_inplace(Matrix& a, const Matrix& b);
void sub_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, double s);
void axpy_inplace(Matrix& y, double a, const Matrix& x);       // y += a*x
double frobenius_norm(const Matrix& a);
bool all_finite(const Matrix& a);
bool all_finite(std::span<const double> v);

// ---- SPD solve ----

struct SpdInfo {
  bool jitter_applied = false;
  double jitter = 0.0;
  int refinement_sweeps = 0;
  double relative_residual = 0.0;
};

// Solves A X = B for symmetric positive (semi)definite A via Cholesky.
// If the plain factorization fails, one diagonal jitter eps*I is added
// (eps = jitter_rel * trace(A)/n), the event is reported through `info` and a
// stderr note, and the solution is polished by iterative refinement against
// the original A. Throws if A is still singular after the jitter.
Matrix solve_spd(const Matrix& a, const Matrix& b, SpdInfo* info = nullptr,
                 double jitter_rel = 1e-8);

}  // namespace evklab

#endif  // EVKLAB_LINALG_HPP_
