#pragma once

// Two-step functional PCA over P1 coefficient arrays.
//
// Step 1 pools every coordinate function into one sample and finds an
// L2-orthonormal basis psi_h = sum_j w_hj e_j. Step 2 diagonalizes the
// covariance of the (h, q) scores, giving vector-valued components V_k.

#include "mda/io.hpp"

namespace mda {

/// Z = G^T G with G the symmetric square root of the mass matrix.
struct GramFactor {
    Matrix Z;
    Matrix G;
    Matrix G_inv;
};

inline GramFactor make_gram(const Eigen::Ref<const Matrix>& z)
{
    require(z.rows() == z.cols() && z.rows() > 0, "Gram matrix must be square");
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(z));
    if (es.info() != Eigen::Success) throw NumericalError("Gram eigen-decomposition failed");
    const Vector s = es.eigenvalues();
    if (!(s.minCoeff() > 1e-14 * s.maxCoeff()))
        throw ValidationError("singular Gram matrix (zero-area mesh artifacts?)");
    const Matrix& q = es.eigenvectors();
    GramFactor g;
    g.Z = symmetrized(z);
    g.G = q * s.cwiseSqrt().asDiagonal() * q.transpose();
    g.G_inv = q * s.cwiseSqrt().cwiseInverse().asDiagonal() * q.transpose();
    return g;
}

inline GramFactor make_gram(const SparseMatrix& mass)
{
    return make_gram(Matrix(mass));
}

struct CenteredCoefficients {
    Array3 coeffs; // N x J x D
    Matrix mean;   // J x D
};

inline CenteredCoefficients center(const Array3& coeffs)
{
    require(coeffs.dims[0] >= 2, "centering needs at least two units");
    const std::size_t n = coeffs.dims[0], j = coeffs.dims[1], d = coeffs.dims[2];
    CenteredCoefficients out{coeffs, Matrix::Zero(static_cast<Index>(j), static_cast<Index>(d))};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < j; ++a)
            for (std::size_t q = 0; q < d; ++q) out.mean(a, q) += coeffs(i, a, q);
    out.mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < j; ++a)
            for (std::size_t q = 0; q < d; ++q) out.coeffs(i, a, q) -= out.mean(a, q);
    return out;
}

struct PooledPCBasis {
    Vector eta; // H, descending
    Matrix a;   // J x H, column h = a_h (unit norm)
    Matrix w;   // J x H, column h = w_h, psi_h = sum_j w_jh e_j
    Index H = 0;
};

/// Rows l = q*N + n of the stacked coefficient matrix (L = N*D rows).
inline Matrix stack_coordinates(const Array3& coeffs)
{
    const Index n = coeffs.dims[0], j = coeffs.dims[1], d = coeffs.dims[2];
    Matrix s(n * d, j);
    for (Index q = 0; q < d; ++q)
        for (Index i = 0; i < n; ++i)
            for (Index a = 0; a < j; ++a) s(q * n + i, a) = coeffs(i, a, q);
    return s;
}

/// Pooled covariance Pi = (1/(D(N-1))) sum_l b_l b_l^T.
inline Matrix pooled_covariance(const Array3& centered)
{
    const Matrix s = stack_coordinates(centered);
    const double div = static_cast<double>(centered.dims[2]) * static_cast<double>(centered.dims[0] - 1);
    return s.transpose() * s / div;
}

namespace detail {

/// Replaces columns from `first` onward by an orthonormal completion of the
/// leading ones, scanning standard basis vectors in index order.
inline void complete_orthonormal(Matrix& q, Index first)
{
    const Index n = q.rows();
    Index col = first;
    for (Index e = 0; e < n && col < q.cols(); ++e) {
        Vector v = Vector::Unit(n, e);
        for (int pass = 0; pass < 2; ++pass)
            for (Index c = 0; c < col; ++c) v -= q.col(c).dot(v) * q.col(c);
        const double nv = v.norm();
        if (nv > 1e-8) q.col(col++) = v / nv;
    }
}

/// Top eigenpairs of M^T M / div, taking the smaller Gram side when M is wide.
inline EigenPairs top_eigenpairs_of_crossproduct(const Matrix& m, double div, Index count)
{
    if (m.rows() >= m.cols()) return top_eigenpairs(m.transpose() * m / div, count);
    const EigenPairs small = top_eigenpairs(m * m.transpose() / div, std::min(count, m.rows()));
    EigenPairs out;
    out.values = Vector::Zero(count);
    out.vectors = Matrix::Zero(m.cols(), count);
    const double top = small.values.size() ? std::max(small.values(0), 0.0) : 0.0;
    Index good = 0;
    for (Index h = 0; h < small.values.size(); ++h) {
        if (!(small.values(h) > 1e-12 * top) || top == 0.0) break;
        Vector v = m.transpose() * small.vectors.col(h);
        out.vectors.col(good) = v / v.norm();
        out.values(good) = small.values(h);
        ++good;
    }
    complete_orthonormal(out.vectors, good);
    fix_signs(out.vectors);
    return out;
}

} // namespace detail

inline PooledPCBasis pooled_fpca(const Array3& centered, const GramFactor& gram, Index h)
{
    const Index n = centered.dims[0], j = centered.dims[1], d = centered.dims[2];
    require(gram.Z.rows() == j, "Gram matrix size does not match J");
    require(n >= 2, "FPCA needs at least two units");
    if (h < 1 || h > std::min(j, n * d))
        throw ValidationError("H = " + std::to_string(h) + " out of range [1, " + std::to_string(std::min(j, n * d)) +
                              "]");
    const Matrix stacked_g = stack_coordinates(centered) * gram.G;
    const double div = static_cast<double>(d) * static_cast<double>(n - 1);
    const EigenPairs eig = detail::top_eigenpairs_of_crossproduct(stacked_g, div, h);
    PooledPCBasis b;
    b.H = h;
    b.eta = eig.values.cwiseMax(0.0);
    b.a = eig.vectors;
    b.w = gram.G_inv * b.a;
    return b;
}

struct ScoreArray {
    Array3 c; // N x H x D
};

/// c_nhq = b_nq^T Z w_h.
inline ScoreArray project_scores(const Array3& centered, const PooledPCBasis& basis, const GramFactor& gram)
{
    const Index n = centered.dims[0], j = centered.dims[1], d = centered.dims[2];
    require(basis.w.rows() == j, "basis and coefficients disagree on J");
    const Matrix zw = gram.Z * basis.w; // J x H
    ScoreArray s{Array3(static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(basis.H), static_cast<std::uint32_t>(d))};
    parallel_for(n, [&](Index i) { s.c.set_slice(static_cast<std::size_t>(i), zw.transpose() * centered.slice(i)); });
    return s;
}

/// Row n holds c_n flattened with index h*D + q.
inline Matrix flatten_scores(const ScoreArray& s)
{
    const Index n = s.c.dims[0], hd = static_cast<Index>(s.c.dims[1]) * s.c.dims[2];
    Matrix m(n, hd);
    for (Index i = 0; i < n; ++i)
        for (Index f = 0; f < hd; ++f) m(i, f) = s.c.data[static_cast<std::size_t>(i * hd + f)];
    return m;
}

struct PCSystem {
    Vector lambda; // K, descending
    Array3 v;      // K x H x D
    Matrix sigma;  // (H*D) x (H*D) score covariance, index h*D + q

    Index K() const { return lambda.size(); }

    /// (H*D) x K, column k = v_k flattened.
    Matrix flat_vectors() const
    {
        const Index k = v.dims[0], hd = static_cast<Index>(v.dims[1]) * v.dims[2];
        Matrix m(hd, k);
        for (Index c = 0; c < k; ++c)
            for (Index f = 0; f < hd; ++f) m(f, c) = v.data[static_cast<std::size_t>(c * hd + f)];
        return m;
    }
};

inline PCSystem second_step_fpca(const ScoreArray& scores, Index k)
{
    const Index n = scores.c.dims[0], h = scores.c.dims[1], d = scores.c.dims[2];
    require(n >= 2, "FPCA needs at least two units");
    if (k < 1 || k > h * d)
        throw ValidationError("K = " + std::to_string(k) + " out of range [1, " + std::to_string(h * d) + "]");
    const Matrix c = flatten_scores(scores);
    PCSystem sys;
    sys.sigma = c.transpose() * c / static_cast<double>(n - 1);
    const EigenPairs eig = top_eigenpairs(sys.sigma, k);
    sys.lambda = eig.values.cwiseMax(0.0);
    sys.v = Array3(static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(d));
    for (Index kk = 0; kk < k; ++kk)
        for (Index f = 0; f < h * d; ++f) sys.v.data[static_cast<std::size_t>(kk * h * d + f)] = eig.vectors(f, kk);
    return sys;
}

/// y_nk = sum_{h,q} c_nhq v_khq.
inline Matrix pc_scores(const ScoreArray& scores, const PCSystem& system)
{
    require(scores.c.dims[1] == system.v.dims[1] && scores.c.dims[2] == system.v.dims[2],
            "scores and PC system disagree on H x D");
    return flatten_scores(scores) * system.flat_vectors();
}

inline Vector explained_variance(const Eigen::Ref<const Vector>& lambda)
{
    require(lambda.size() > 0, "no eigenvalues");
    Vector cum(lambda.size());
    double s = 0.0;
    for (Index k = 0; k < lambda.size(); ++k) cum(k) = (s += lambda(k));
    require(s > 0.0, "eigenvalues sum to zero");
    return cum / s;
}

/// FE coefficients (J x D) of each V_k.
inline std::vector<Matrix> component_fields(const PCSystem& system, const PooledPCBasis& basis)
{
    std::vector<Matrix> out;
    for (Index k = 0; k < system.K(); ++k) out.push_back(basis.w * system.v.slice(static_cast<std::size_t>(k)));
    return out;
}

/// Coefficients of mean + sum_k y_nk V_k for every row of y.
inline Array3 reconstruct(const Eigen::Ref<const Matrix>& y, const PCSystem& system, const PooledPCBasis& basis,
                          const Eigen::Ref<const Matrix>& mean)
{
    require(y.cols() <= system.K(), "more scores than components");
    const auto fields = component_fields(system, basis);
    std::vector<Matrix> out(y.rows());
    parallel_for(y.rows(), [&](Index n) {
        Matrix m = mean;
        for (Index k = 0; k < y.cols(); ++k) m += y(n, k) * fields[k];
        out[n] = m;
    });
    return Array3::from_slices(out);
}

// ---------------------------------------------------------------------------
// Persistence as an MDAB bundle

struct FpcaModel {
    Matrix mean; // J x D
    PooledPCBasis basis;
    PCSystem system;
    ScoreArray scores;
    Matrix y; // N x K
};

inline FpcaModel run_fpca(const Array3& coeffs, const GramFactor& gram, Index h, Index k)
{
    const auto centered = center(coeffs);
    FpcaModel m;
    m.mean = centered.mean;
    m.basis = pooled_fpca(centered.coeffs, gram, h);
    m.scores = project_scores(centered.coeffs, m.basis, gram);
    m.system = second_step_fpca(m.scores, k);
    m.y = pc_scores(m.scores, m.system);
    return m;
}

inline Bundle fpca_bundle(const FpcaModel& m)
{
    Bundle b;
    b.put("mean", m.mean);
    b.put("eta", Matrix(m.basis.eta));
    b.put("a", m.basis.a);
    b.put("w", m.basis.w);
    b.put("lambda", Matrix(m.system.lambda));
    b.put("v", m.system.v);
    b.put("sigma", m.system.sigma);
    b.put("c", m.scores.c);
    b.put("y", m.y);
    return b;
}

inline void save_fpca(const std::filesystem::path& path, const FpcaModel& m)
{
    fpca_bundle(m).save(path);
}

inline FpcaModel load_fpca(const std::filesystem::path& path)
{
    const Bundle b = Bundle::load(path);
    FpcaModel m;
    m.mean = b.matrix("mean");
    m.basis.eta = b.matrix("eta").col(0);
    m.basis.a = b.matrix("a");
    m.basis.w = b.matrix("w");
    m.basis.H = m.basis.w.cols();
    m.system.lambda = b.matrix("lambda").col(0);
    m.system.v = b.array("v");
    m.system.sigma = b.matrix("sigma");
    m.scores.c = b.array("c");
    m.y = b.matrix("y");
    require(m.system.v.dims[0] == m.system.lambda.size() && m.system.v.dims[1] == m.basis.H,
            "inconsistent FPCA bundle '" + path.string() + "'");
    return m;
}

} // namespace mda
