#pragma once

// Function-on-scalar regression in PC-score space with a Laplacian
// roughness penalty on each coefficient field.

#include "mda/fem.hpp"
#include "mda/fpca.hpp"

namespace mda {

struct DesignMatrix {
    Matrix X; // N x R
    std::vector<std::string> names;
    Index rank = 0;

    Index rows() const { return X.rows(); }
    Index cols() const { return X.cols(); }

    Index column(const std::string& name) const
    {
        for (std::size_t r = 0; r < names.size(); ++r)
            if (names[r] == name) return static_cast<Index>(r);
        throw ValidationError("unknown predictor '" + name + "'");
    }
};

/// Validates full column rank; names default to x1..xR.
inline DesignMatrix make_design(Matrix x, std::vector<std::string> names = {})
{
    require(x.rows() >= 1 && x.cols() >= 1, "design matrix is empty");
    require(x.allFinite(), "design matrix has non-finite entries");
    if (names.empty())
        for (Index r = 0; r < x.cols(); ++r) names.push_back("x" + std::to_string(r + 1));
    require(static_cast<Index>(names.size()) == x.cols(), "design column names do not match column count");
    Eigen::ColPivHouseholderQR<Matrix> qr(x);
    qr.setThreshold(1e-10);
    DesignMatrix d{std::move(x), std::move(names), qr.rank()};
    if (d.rank < d.cols())
        throw ValidationError("design matrix is rank deficient (rank " + std::to_string(d.rank) + " < " +
                              std::to_string(d.cols()) + ")");
    return d;
}

/// CSV with a header of covariate names; an "intercept" column of ones is
/// prepended unless disabled or already present.
inline DesignMatrix read_design(const std::filesystem::path& path, bool add_intercept = true)
{
    NamedTable t = read_named_csv(path);
    bool has = false;
    for (const auto& n : t.names)
        if (n == "intercept") has = true;
    if (add_intercept && !has) {
        Matrix x(t.values.rows(), t.values.cols() + 1);
        x.col(0).setOnes();
        x.rightCols(t.values.cols()) = t.values;
        t.names.insert(t.names.begin(), "intercept");
        return make_design(std::move(x), std::move(t.names));
    }
    return make_design(std::move(t.values), std::move(t.names));
}

struct CoefficientField {
    Matrix B; // R x K
};

struct RoughnessPenalty {
    Matrix U;      // K x K
    Vector lambda; // R
};

inline CoefficientField ols_beta(const DesignMatrix& x, const Eigen::Ref<const Matrix>& y)
{
    require(y.rows() == x.rows(), "scores and design disagree on N");
    const Matrix xtx = x.X.transpose() * x.X;
    Eigen::LDLT<Matrix> ldlt(xtx);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw NumericalError("X^T X is not positive definite");
    return {ldlt.solve(x.X.transpose() * y)};
}

/// U_{k1 k2} = sum_q Phi_{k1,q}^T penalty Phi_{k2,q} with Phi_k = W v_k.
inline Matrix roughness_U(const PCSystem& system, const PooledPCBasis& basis, const FemMatrices& fem)
{
    const auto fields = component_fields(system, basis);
    const Index k = system.K();
    require(k >= 1, "PC system is empty");
    const Index j = fields[0].rows(), d = fields[0].cols();
    require(fem.penalty.rows() == j, "penalty and PC basis disagree on J");
    Matrix u = Matrix::Zero(k, k);
    for (Index q = 0; q < d; ++q) {
        Matrix f(j, k);
        for (Index c = 0; c < k; ++c) f.col(c) = fields[c].col(q);
        u += f.transpose() * (fem.penalty * f);
    }
    return symmetrized(u);
}

enum class PenaltySolver { automatic, direct, structured };

namespace detail {

/// Direct solve of (X^T X (x) I_K + Lambda (x) U^T) vec(B^T) = vec(y^T X).
inline Matrix kronecker_solve(const Matrix& xtx, const Matrix& xty, const Matrix& u, const Vector& lambda)
{
    const Index r = xtx.rows(), k = u.rows();
    Matrix sys = Matrix::Zero(r * k, r * k);
    for (Index a = 0; a < r; ++a)
        for (Index b = 0; b < r; ++b) {
            sys.block(a * k, b * k, k, k).diagonal().array() += xtx(a, b);
            if (a == b) sys.block(a * k, b * k, k, k) += lambda(a) * u.transpose();
        }
    Vector rhs(r * k);
    for (Index a = 0; a < r; ++a) rhs.segment(a * k, k) = xty.row(a).transpose();
    Eigen::PartialPivLU<Matrix> lu(sys);
    if (!(lu.rcond() > 1e-15)) throw NumericalError("penalized regression system is singular");
    const Vector sol = lu.solve(rhs);
    if (!sol.allFinite())
        throw NumericalError("penalized regression system is singular");
    Matrix b(r, k);
    for (Index a = 0; a < r; ++a) b.row(a) = sol.segment(a * k, k).transpose();
    return b;
}

/// Eigenbasis of U shared by structured solves.
struct PenaltyEigen {
    Vector mu;
    Matrix Q;
};

inline PenaltyEigen penalty_eigen(const Matrix& u)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(u));
    if (es.info() != Eigen::Success) throw NumericalError("eigen-decomposition of U failed");
    return {es.eigenvalues(), es.eigenvectors()};
}

/// Per column of the U-eigenbasis: (X^T X + mu_k diag(lambda)) b~_k = (X^T y Q)_k.
inline Matrix structured_solve(const Matrix& xtx, const Matrix& xty, const PenaltyEigen& pe, const Vector& lambda)
{
    const Index r = xtx.rows(), k = pe.Q.rows();
    const Matrix rhs = xty * pe.Q;
    Matrix bt(r, k);
    for (Index c = 0; c < k; ++c) {
        Matrix a = xtx;
        a.diagonal() += pe.mu(c) * lambda;
        Eigen::LDLT<Matrix> ldlt(a);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw NumericalError("penalized regression system is singular");
        bt.col(c) = ldlt.solve(rhs.col(c));
    }
    return bt * pe.Q.transpose();
}

} // namespace detail

inline CoefficientField penalized_beta(const DesignMatrix& x, const Eigen::Ref<const Matrix>& y,
                                       const RoughnessPenalty& pen, PenaltySolver solver = PenaltySolver::automatic)
{
    require(y.rows() == x.rows(), "scores and design disagree on N");
    require(pen.U.rows() == y.cols() && pen.U.cols() == y.cols(), "U must be K x K");
    require(pen.lambda.size() == x.cols(), "need one lambda per predictor");
    require((pen.lambda.array() >= 0.0).all() && pen.lambda.allFinite(), "lambdas must be finite and >= 0");
    const Matrix xtx = x.X.transpose() * x.X;
    const Matrix xty = x.X.transpose() * y;
    const bool direct = solver == PenaltySolver::direct ||
                        (solver == PenaltySolver::automatic && x.cols() * y.cols() <= 5000);
    if (direct) return {detail::kronecker_solve(xtx, xty, pen.U, pen.lambda)};
    return {detail::structured_solve(xtx, xty, detail::penalty_eigen(pen.U), pen.lambda)};
}

// ---------------------------------------------------------------------------
// Cross-validation of the per-predictor lambdas

struct CvStep {
    int sweep = 0;
    Index predictor = 0;
    double lambda = 0.0;
    double error = 0.0;
};

struct CvResult {
    Vector lambda;
    std::vector<CvStep> table;
    std::vector<Index> fold_of; // fold label per unit
    int sweeps = 0;
};

struct CvOptions {
    Index folds = 4;
    int max_sweeps = 10;
    bool shared_lambda = false;
    std::uint64_t seed = 0;
};

/// Candidate grid {0} U {x_range * 10^-e : e = 2..8}, ascending.
inline std::vector<double> default_lambda_grid(double x_range)
{
    std::vector<double> g{0.0};
    for (int e = 8; e >= 2; --e) g.push_back(x_range * std::pow(10.0, -e));
    return g;
}

inline std::vector<Index> fold_assignment(Index n, Index folds, std::uint64_t seed)
{
    const auto perm = seeded_permutation(n, seed, 0x43'56'46'4f'4c'44ULL);
    std::vector<Index> fold(n);
    for (Index i = 0; i < n; ++i) fold[perm[i]] = i % folds;
    return fold;
}

/// Coordinate descent over lambda_r on the grid; each candidate scored by
/// held-out squared error summed over folds. Ties keep the earlier grid value.
inline CvResult cross_validate_lambda(const DesignMatrix& x, const Eigen::Ref<const Matrix>& y,
                                      const Eigen::Ref<const Matrix>& u, std::vector<double> grid,
                                      const CvOptions& opt = {})
{
    if (grid.empty()) throw ValidationError("empty lambda grid");
    for (double g : grid) require(g >= 0.0 && std::isfinite(g), "grid values must be finite and >= 0");
    require(opt.folds >= 2, "need at least two folds");
    require(x.rows() >= opt.folds, "fewer units than folds");
    require(y.rows() == x.rows() && u.rows() == y.cols(), "CV inputs disagree in size");
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

    const Index n = x.rows(), r = x.cols();
    CvResult res;
    res.fold_of = fold_assignment(n, opt.folds, opt.seed);
    const auto pe = detail::penalty_eigen(Matrix(u));

    struct Fold {
        Matrix xtx, xty, x_test, y_test;
    };
    std::vector<Fold> folds(opt.folds);
    for (Index f = 0; f < opt.folds; ++f) {
        std::vector<Index> train, test;
        for (Index i = 0; i < n; ++i) (res.fold_of[i] == f ? test : train).push_back(i);
        const Matrix xt = x.X(train, Eigen::all);
        const Matrix yt = y(train, Eigen::all);
        folds[f] = {xt.transpose() * xt, xt.transpose() * yt, x.X(test, Eigen::all),
                    y(test, Eigen::all)};
    }
    auto cv_error = [&](const Vector& lambda) {
        double err = 0.0;
        for (const auto& f : folds) {
            const Matrix b = detail::structured_solve(f.xtx, f.xty, pe, lambda);
            err += (f.y_test - f.x_test * b).squaredNorm();
        }
        return err;
    };

    Vector lambda = Vector::Constant(r, grid.front());
    const Index coords = opt.shared_lambda ? 1 : r;
    for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
        bool changed = false;
        for (Index c = 0; c < coords; ++c) {
            std::vector<double> errs(grid.size());
            parallel_for(static_cast<Index>(grid.size()), [&](Index g) {
                Vector trial = lambda;
                if (opt.shared_lambda)
                    trial.setConstant(grid[g]);
                else
                    trial(c) = grid[g];
                errs[g] = cv_error(trial);
            });
            std::size_t best = 0;
            for (std::size_t g = 0; g < grid.size(); ++g) {
                res.table.push_back({sweep, opt.shared_lambda ? -1 : c, grid[g], errs[g]});
                if (errs[g] < errs[best]) best = g;
            }
            const double current = opt.shared_lambda ? lambda(0) : lambda(c);
            if (grid[best] != current) {
                changed = true;
                if (opt.shared_lambda)
                    lambda.setConstant(grid[best]);
                else
                    lambda(c) = grid[best];
            }
        }
        res.sweeps = sweep;
        if (!changed) break;
    }
    res.lambda = lambda;
    return res;
}

inline Matrix residual_covariance(const DesignMatrix& x, const Eigen::Ref<const Matrix>& y, const CoefficientField& b)
{
    const Index n = x.rows(), r = x.cols();
    if (n <= r) throw ValidationError("residual covariance needs N > R");
    const Matrix e = y - x.X * b.B;
    return e.transpose() * e / static_cast<double>(n - r);
}

/// Vertex coefficients (J x D) of mean + sum_k (x_new B)_k V_k for each row.
inline std::vector<Matrix> predict_coefficients(const Eigen::Ref<const Matrix>& x_new, const CoefficientField& b,
                                                const std::vector<Matrix>& fields, const Eigen::Ref<const Matrix>& mean)
{
    require(x_new.cols() == b.B.rows(), "new covariate rows have the wrong width");
    require(static_cast<Index>(fields.size()) == b.B.cols(), "coefficient field and PC system disagree on K");
    const Matrix s = x_new * b.B;
    std::vector<Matrix> out(x_new.rows(), mean);
    for (Index i = 0; i < x_new.rows(); ++i)
        for (Index k = 0; k < s.cols(); ++k) out[i] += s(i, k) * fields[k];
    return out;
}

/// P x D shapes at the data sites for each covariate row.
inline std::vector<Matrix> predict(const Eigen::Ref<const Matrix>& x_new, const CoefficientField& b,
                                   const std::vector<Matrix>& fields, const Eigen::Ref<const Matrix>& mean,
                                   const SparseMatrix& e)
{
    auto coeffs = predict_coefficients(x_new, b, fields, mean);
    for (auto& c : coeffs) c = e * c;
    return coeffs;
}

/// Values of beta_r at the data sites from point values of V_k (K x P x D).
inline Matrix beta_at_points(const Eigen::Ref<const Vector>& b_r, const Array3& vpoints)
{
    require(static_cast<Index>(vpoints.dims[0]) == b_r.size(), "coefficient row and component values disagree on K");
    Matrix out = Matrix::Zero(vpoints.dims[1], vpoints.dims[2]);
    for (Index k = 0; k < b_r.size(); ++k) out += b_r(k) * vpoints.slice(static_cast<std::size_t>(k));
    return out;
}

} // namespace mda
