#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace msdiff {

// Row-major dense matrix.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v((size_t)r * c, 0.0) {}

    double& at(int r, int c) { return v[(size_t)r * cols + c]; }
    double at(int r, int c) const { return v[(size_t)r * cols + c]; }
    double* row(int r) { return v.data() + (size_t)r * cols; }
    const double* row(int r) const { return v.data() + (size_t)r * cols; }
    size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// C = A * B, A: m x k, B: k x n. i-k-j loop order keeps the inner loop
// contiguous in both B and C.
inline void matmul(const Mat& a, const Mat& b, Mat& c) {
    assert(a.cols == b.rows);
    c.rows = a.rows;
    c.cols = b.cols;
    c.v.assign((size_t)a.rows * b.cols, 0.0);
    const int m = a.rows, k = a.cols, n = b.cols;
    for (int i = 0; i < m; ++i) {
        double* crow = c.row(i);
        const double* arow = a.row(i);
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b.row(p);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A^T * B, A: k x m, B: k x n  (accumulates; used for weight grads)
inline void matmul_tn_acc(const Mat& a, const Mat& b, Mat& c) {
    assert(a.rows == b.rows);
    assert(c.rows == a.cols && c.cols == b.cols);
    const int k = a.rows, m = a.cols, n = b.cols;
    for (int p = 0; p < k; ++p) {
        const double* arow = a.row(p);
        const double* brow = b.row(p);
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c.row(i);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C = A * B^T, A: m x k, B: n x k
inline void matmul_nt(const Mat& a, const Mat& b, Mat& c) {
    assert(a.cols == b.cols);
    c.rows = a.rows;
    c.cols = b.rows;
    c.v.assign((size_t)a.rows * b.rows, 0.0);
    const int m = a.rows, k = a.cols, n = b.rows;
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (int j = 0; j < n; ++j) {
            const double* brow = b.row(j);
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = s;
        }
    }
}

// y = W * x (+ y if acc), W: m x n, x: n
inline void matvec(const Mat& w, const double* x, double* y, bool acc = false) {
    for (int i = 0; i < w.rows; ++i) {
        const double* wr = w.row(i);
        double s = acc ? y[i] : 0.0;
        for (int j = 0; j < w.cols; ++j) s += wr[j] * x[j];
        y[i] = s;
    }
}

}  // namespace msdiff
