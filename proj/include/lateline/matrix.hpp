#pragma once

#include <cstddef>
#include <vector>

#include "lateline/rng.hpp"

namespace lateline {

/// Dense row-major matrix of doubles. The training path runs entirely in
/// double precision so finite-difference gradient checks are meaningful;
/// single precision appears only inside index/file storage.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, double fill = 0.0);

    static Matrix identity(int n);
    static Matrix gaussian(int rows, int cols, Rng& rng, double scale = 1.0);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    double* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const;

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

/// Standard matrix product. Throws ShapeError naming both shapes when the
/// inner dimensions disagree.
Matrix matmul(const Matrix& a, const Matrix& b);

/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// Each row scaled to unit L2 norm; rows with norm < eps come back all-zero.
Matrix l2_normalize_rows(const Matrix& a, double eps = 1e-12);

/// Row-wise softmax with max-subtraction; rows sum to 1.
Matrix softmax_rows(const Matrix& a);

Matrix transpose(const Matrix& a);

void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, double s);
void axpy_inplace(Matrix& a, double s, const Matrix& b);  // a += s * b

double dot(const double* a, const double* b, int n);
double frobenius_norm_sq(const Matrix& a);

}  // namespace lateline
