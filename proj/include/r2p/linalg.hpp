#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace r2p {

// Dense row-major matrix of doubles. Rows are samples, columns are features.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return {};
        Matrix m(rows.size(), rows.front().size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != m.cols_)
                throw std::invalid_argument("ragged row in matrix literal");
            for (std::size_t j = 0; j < m.cols_; ++j) m(i, j) = rows[i][j];
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return rows_ == 0; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<const double> row(std::size_t i) const {
        return {data_.data() + i * cols_, cols_};
    }

    Matrix take_rows(std::span<const std::size_t> idx) const {
        Matrix out(idx.size(), cols_);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < cols_; ++j) out(r, j) = (*this)(idx[r], j);
        return out;
    }

    const std::vector<double>& data() const { return data_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - b[j];
        s += d * d;
    }
    return s;
}

// Cholesky factorization of a symmetric positive-definite matrix, kept as the
// lower triangle. Factorization failure is reported through ok() so callers
// can decide between throwing and falling back.
class Cholesky {
public:
    Cholesky() = default;

    bool factor(const Matrix& a) {
        n_ = a.rows();
        if (a.cols() != n_) throw std::invalid_argument("cholesky needs a square matrix");
        l_.assign(n_ * n_, 0.0);
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double s = a(i, j);
                for (std::size_t k = 0; k < j; ++k) s -= l_[i * n_ + k] * l_[j * n_ + k];
                if (i == j) {
                    // relative pivot floor flags rank-deficient systems
                    const double tol = 1e-12 * std::max(1.0, std::abs(a(i, i)));
                    if (s <= tol || !std::isfinite(s)) return ok_ = false;
                    l_[i * n_ + i] = std::sqrt(s);
                } else {
                    l_[i * n_ + j] = s / l_[j * n_ + j];
                }
            }
        }
        return ok_ = true;
    }

    bool ok() const { return ok_; }
    std::size_t size() const { return n_; }

    // Solves A x = b given the factorization A = L L^T.
    std::vector<double> solve(std::span<const double> b) const {
        if (!ok_) throw std::logic_error("solve on failed factorization");
        std::vector<double> x(b.begin(), b.end());
        for (std::size_t i = 0; i < n_; ++i) {
            double s = x[i];
            for (std::size_t k = 0; k < i; ++k) s -= l_[i * n_ + k] * x[k];
            x[i] = s / l_[i * n_ + i];
        }
        for (std::size_t ii = n_; ii-- > 0;) {
            double s = x[ii];
            for (std::size_t k = ii + 1; k < n_; ++k) s -= l_[k * n_ + ii] * x[k];
            x[ii] = s / l_[ii * n_ + ii];
        }
        return x;
    }

    double log_det() const {
        double s = 0.0;
        for (std::size_t i = 0; i < n_; ++i) s += std::log(l_[i * n_ + i]);
        return 2.0 * s;
    }

private:
    std::size_t n_ = 0;
    bool ok_ = false;
    std::vector<double> l_;
};

}  // namespace r2p
