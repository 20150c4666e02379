#pragma once

// Small dense-matrix helpers: half-vectorization of symmetric matrices,
// the duplication-matrix pseudoinverse, Cholesky, PSD repair and the
// Kronecker vec identity.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstddef>
#include <string>

#include "upn/errors.hpp"

namespace upn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

namespace tolerance {
inline constexpr double symmetry = 1e-12;
inline constexpr double duplication = 1e-10;
inline constexpr double psd_fixed_point = 1e-10;
inline constexpr double psd_idempotence = 1e-9;
inline constexpr double cholesky = 1e-10;
inline constexpr double kronecker = 1e-10;
}  // namespace tolerance

inline constexpr int triangular_number(int n) { return n * (n + 1) / 2; }

// Inverse of triangular_number; returns -1 when `len` is not triangular.
inline int triangular_root(std::size_t len) {
  int n = static_cast<int>(std::lround((std::sqrt(8.0 * static_cast<double>(len) + 1.0) - 1.0) / 2.0));
  return static_cast<std::size_t>(triangular_number(n)) == len ? n : -1;
}

// Position of the lower-triangular entry (row, col), row >= col, in the
// stacking order [S11, S21, S22, S31, S32, S33, ...].
inline constexpr int vech_index(int row, int col) { return row * (row + 1) / 2 + col; }

inline bool all_finite(const Mat& m) { return m.allFinite(); }

/// Symmetric dense matrix. Construction symmetrizes the input as (S + S^T)/2,
/// so entries are exactly mirrored afterwards.
class SymMatrix {
public:
  SymMatrix() = default;

  explicit SymMatrix(const Mat& m) {
    detail::require_dims(m.rows() == m.cols(), "SymMatrix: input is " + std::to_string(m.rows()) +
                                                    "x" + std::to_string(m.cols()) + ", not square");
    m_ = 0.5 * (m + m.transpose());
  }

  static SymMatrix identity(int n) { return SymMatrix(Mat::Identity(n, n)); }
  static SymMatrix zero(int n) { return SymMatrix(Mat::Zero(n, n)); }
  static SymMatrix diagonal(const Vec& d) { return SymMatrix(Mat(d.asDiagonal())); }

  int dim() const { return static_cast<int>(m_.rows()); }
  const Mat& matrix() const { return m_; }
  double operator()(int i, int j) const { return m_(i, j); }
  Vec diagonal() const { return m_.diagonal(); }
  double trace() const { return m_.trace(); }

  double min_eigenvalue() const {
    if (m_.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Mat> es(m_, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  }

private:
  Mat m_;
};

/// Half-vectorized symmetric matrix.
struct VechVector {
  int n = 0;
  Vec data;
};

struct DuplicationPinv {
  int n = 0;
  Mat matrix;

  Vec apply(const Vec& vec_s) const {
    detail::require_dims(vec_s.size() == matrix.cols(), "DuplicationPinv: vec length mismatch");
    return matrix * vec_s;
  }
};

/// Stacks the lower triangle of a square matrix. Only the lower triangle is
/// read; callers pass symmetric input.
inline VechVector vech(const Mat& s) {
  detail::require_dims(s.rows() == s.cols(), "vech: input is " + std::to_string(s.rows()) + "x" +
                                                 std::to_string(s.cols()) + ", not square");
  const int n = static_cast<int>(s.rows());
  VechVector out{n, Vec(triangular_number(n))};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) out.data(vech_index(i, j)) = s(i, j);
  return out;
}

inline VechVector vech(const SymMatrix& s) { return vech(s.matrix()); }

inline Mat unvech_matrix(const Vec& data, int n) {
  Mat s(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) s(i, j) = s(j, i) = data(vech_index(i, j));
  return s;
}

inline SymMatrix unvech(const VechVector& v) {
  detail::require_dims(v.data.size() == triangular_number(v.n),
                       "unvech: length " + std::to_string(v.data.size()) + " does not match n=" +
                           std::to_string(v.n));
  return SymMatrix(unvech_matrix(v.data, v.n));
}

// Infers n from the length; throws when the length is not triangular.
inline SymMatrix unvech(const Vec& data) {
  const int n = triangular_root(static_cast<std::size_t>(data.size()));
  detail::require_dims(n >= 0, "unvech: length " + std::to_string(data.size()) + " is not a triangular number");
  return unvech(VechVector{n, data});
}

/// Explicit pseudoinverse of the duplication matrix: maps column-major vec(S)
/// to vech(S). Diagonal rows pick the entry, off-diagonal rows average the
/// two mirror entries.
inline DuplicationPinv duplication_pinv(int n) {
  detail::require_dims(n >= 1, "duplication_pinv: n must be >= 1");
  DuplicationPinv d{n, Mat::Zero(triangular_number(n), n * n)};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const int row = vech_index(i, j);
      if (i == j) {
        d.matrix(row, j * n + i) = 1.0;
      } else {
        d.matrix(row, j * n + i) = 0.5;
        d.matrix(row, i * n + j) = 0.5;
      }
    }
  }
  return d;
}

inline Vec vec(const Mat& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }

/// Projects onto symmetric matrices with eigenvalues >= floor.
inline SymMatrix psd_repair(const Mat& s, double floor) {
  detail::require_dims(s.rows() == s.cols(), "psd_repair: input not square");
  if (floor < 0.0) throw DomainError("psd_repair: floor must be nonnegative");
  if (!s.allFinite()) throw NumericalError("psd_repair: non-finite entries");
  const Mat sym = 0.5 * (s + s.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("psd_repair: eigendecomposition failed");
  if (es.eigenvalues().minCoeff() >= floor) return SymMatrix(sym);
  const Vec clamped = es.eigenvalues().cwiseMax(floor);
  return SymMatrix(es.eigenvectors() * clamped.asDiagonal() * es.eigenvectors().transpose());
}

inline SymMatrix psd_repair(const SymMatrix& s, double floor) { return psd_repair(s.matrix(), floor); }

/// vec(A X B) without forming (B^T kron A).
inline Vec kron_vec_apply(const Mat& a, const Mat& x, const Mat& b) {
  detail::require_dims(a.cols() == x.rows() && x.cols() == b.rows(),
                       "kron_vec_apply: nonconformable operands");
  const Mat axb = a * x * b;
  return vec(axb);
}

inline Mat kronecker(const Mat& a, const Mat& b) {
  Mat k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

/// Lower Cholesky factor; throws FactorizationError for non-PD input.
inline Mat cholesky(const Mat& s) {
  detail::require_dims(s.rows() == s.cols(), "cholesky: input not square");
  if (!s.allFinite()) throw FactorizationError("cholesky: non-finite entries");
  Eigen::LLT<Mat> llt(s);
  if (llt.info() != Eigen::Success) throw FactorizationError("cholesky: matrix is not positive definite");
  Mat l = llt.matrixL();
  return l;
}

inline Mat cholesky(const SymMatrix& s) { return cholesky(s.matrix()); }

}  // namespace upn
