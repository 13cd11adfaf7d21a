#include "lateline/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lateline/errors.hpp"

namespace lateline {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix Matrix::gaussian(int rows, int cols, Rng& rng, double scale) {
    Matrix m(rows, cols);
    for (double& v : m.data_) v = rng.next_gaussian() * scale;
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a) +
                         " * " + shape_str(b));
    }
    Matrix out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.row(k);
            for (int j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a) +
                         " * " + shape_str(b) + "^T");
    }
    Matrix out(a.rows(), b.rows());
    for (int i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        for (int j = 0; j < b.rows(); ++j) {
            out.at(i, j) = dot(arow, b.row(j), a.cols());
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: inner dimensions disagree, " + shape_str(a) +
                         "^T * " + shape_str(b));
    }
    Matrix out(a.cols(), b.cols());
    for (int k = 0; k < a.rows(); ++k) {
        const double* arow = a.row(k);
        const double* brow = b.row(k);
        for (int i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* orow = out.row(i);
            for (int j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

Matrix l2_normalize_rows(const Matrix& a, double eps) {
    Matrix out(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const double* src = a.row(i);
        double* dst = out.row(i);
        const double norm = std::sqrt(dot(src, src, a.cols()));
        if (norm < eps) continue;  // row stays zero
        const double inv = 1.0 / norm;
        for (int j = 0; j < a.cols(); ++j) dst[j] = src[j] * inv;
    }
    return out;
}

Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const double* src = a.row(i);
        double* dst = out.row(i);
        double mx = src[0];
        for (int j = 1; j < a.cols(); ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (int j = 0; j < a.cols(); ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < a.cols(); ++j) dst[j] *= inv;
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add: shape mismatch, " + shape_str(a) + " vs " + shape_str(b));
    }
    double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

void scale_inplace(Matrix& a, double s) {
    double* pa = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) pa[i] *= s;
}

void axpy_inplace(Matrix& a, double s, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("axpy: shape mismatch, " + shape_str(a) + " vs " + shape_str(b));
    }
    double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) pa[i] += s * pb[i];
}

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

double frobenius_norm_sq(const Matrix& a) {
    const double* p = a.data();
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += p[i] * p[i];
    return s;
}

}  // namespace lateline
