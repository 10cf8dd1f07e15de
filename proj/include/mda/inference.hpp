#pragma once

// Asymptotic inference for coefficient fields: pointwise chi-square tests,
// global L2 / PC / Choi tests against weighted chi-square nulls, and
// simultaneous confidence bubbles.

#include "mda/regression.hpp"
#include "mda/shape.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>

namespace mda {

/// N (X^T X)^{-1}_{rr} C_eps in score coordinates, with its eigensystem.
struct BetaCovariance {
    double scale = 0.0;
    Matrix c_eps;  // K x K
    Matrix c_beta; // K x K
    Vector lambda; // descending, negatives clipped to 0
    Matrix U;      // K x K, column j pairs with lambda(j)
    Index N = 0;
};

inline BetaCovariance beta_covariance(const DesignMatrix& x, const Eigen::Ref<const Matrix>& c_eps, Index r)
{
    require(r >= 0 && r < x.cols(), "predictor index out of range");
    require(c_eps.rows() == c_eps.cols(), "residual covariance must be square");
    const Matrix inv = Matrix(x.X.transpose() * x.X).ldlt().solve(Matrix::Identity(x.cols(), x.cols()));
    BetaCovariance c;
    c.N = x.rows();
    c.scale = static_cast<double>(x.rows()) * inv(r, r);
    c.c_eps = symmetrized(c_eps);
    c.c_beta = c.scale * c.c_eps;
    const EigenPairs eig = top_eigenpairs(c.c_beta);
    c.lambda = eig.values.cwiseMax(0.0);
    c.U = eig.vectors;
    return c;
}

inline double chi2_upper(double df, double x)
{
    if (!(x > 0.0)) return 1.0;
    return boost::math::gamma_q(0.5 * df, 0.5 * x);
}

// ---------------------------------------------------------------------------
// Pointwise tests

struct PointwiseResult {
    double statistic = 0.0;
    double p_value = 1.0;
    bool testable = true;
};

/// N b^T C^{-1} b against chi2(D); untestable when C is singular.
inline PointwiseResult pointwise_test(const Eigen::Ref<const Vector>& beta_p, const Eigen::Ref<const Matrix>& local_cov,
                                      Index n)
{
    require(local_cov.rows() == beta_p.size() && local_cov.cols() == beta_p.size(), "local covariance has wrong size");
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(local_cov));
    const Vector ev = es.eigenvalues();
    const double top = ev.cwiseAbs().maxCoeff();
    if (!(top > 0.0) || ev.minCoeff() <= 1e-12 * top)
        return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(), false};
    const Vector z = es.eigenvectors().transpose() * beta_p;
    const double stat = static_cast<double>(n) * (z.array().square() / ev.array()).sum();
    return {stat, chi2_upper(static_cast<double>(beta_p.size()), stat), true};
}

/// Local D x D covariance C^r_beta(m_p, m_p) from point values V_k(m_p).
inline Matrix local_covariance(const BetaCovariance& cov, const Array3& vpoints, Index p)
{
    const Index k = vpoints.dims[0], d = vpoints.dims[2];
    Matrix vp(d, k);
    for (Index c = 0; c < k; ++c)
        for (Index q = 0; q < d; ++q) vp(q, c) = vpoints(c, p, q);
    return vp * cov.c_beta * vp.transpose();
}

inline std::vector<PointwiseResult> pointwise_field(const Eigen::Ref<const Vector>& b_r, const BetaCovariance& cov,
                                                    const Array3& vpoints)
{
    const Matrix beta = beta_at_points(b_r, vpoints);
    std::vector<PointwiseResult> out(beta.rows());
    parallel_for(beta.rows(), [&](Index p) {
        out[p] = pointwise_test(beta.row(p).transpose(), local_covariance(cov, vpoints, p), cov.N);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Weighted chi-square tails

/// Monte Carlo estimate of P(sum w_j Z_j^2 > x); draw i uses its own stream.
inline double weighted_chisq_tail_mc(const std::vector<double>& w, double x, Index draws, std::uint64_t seed)
{
    std::vector<char> hit(draws);
    parallel_for(draws, [&](Index i) {
        RandomStream rng(seed, static_cast<std::uint64_t>(i));
        double s = 0.0;
        for (double wj : w) {
            const double z = rng.normal();
            s += wj * z * z;
        }
        hit[i] = s > x;
    });
    Index c = 0;
    for (char h : hit) c += h;
    return static_cast<double>(c) / static_cast<double>(draws);
}

struct ImhofOptions {
    double envelope_tol = 1e-8;
    double panel_tol = 1e-11;
    Index max_panels = 2'000'000;
    Index fallback_draws = 2'000'000;
    std::uint64_t fallback_seed = 0x1a40f;
};

namespace detail {

/// Chernoff bound min_t e^{-tx} prod (1 - 2 t w)^{-1/2}, weights scaled so max = 1.
inline double chernoff_upper(const std::vector<double>& w, double x)
{
    double best = 1.0;
    for (int i = 1; i < 200; ++i) {
        const double t = 0.5 * static_cast<double>(i) / 200.0;
        double logb = -t * x;
        for (double wj : w) logb -= 0.5 * std::log1p(-2.0 * t * wj);
        best = std::min(best, std::exp(logb));
    }
    return best;
}

} // namespace detail

/// P(sum w_j chi2_1 > x) by Imhof's inversion formula.
inline double imhof_pvalue(const std::vector<double>& weights, double x, const ImhofOptions& opt = {})
{
    require(!weights.empty(), "Imhof needs at least one weight");
    double top = 0.0;
    for (double w : weights) {
        require(std::isfinite(w) && w >= 0.0, "Imhof weights must be finite and non-negative");
        top = std::max(top, w);
    }
    if (!(top > 0.0)) throw ValidationError("Imhof weights are all zero");
    require(!std::isnan(x), "Imhof threshold is NaN");
    if (x <= 0.0) return 1.0;

    std::vector<double> w;
    double total = 0.0;
    for (double v : weights)
        if (v > 0.0) {
            w.push_back(v / top);
            total += v / top;
        }
    const double xs = x / top;
    if (detail::chernoff_upper(w, xs) < 1e-10) return 0.0;

    auto log_rho = [&](double u) {
        double s = 0.0;
        for (double wj : w) s += 0.25 * std::log1p(wj * wj * u * u);
        return s;
    };
    auto integrand = [&](double u) {
        if (u == 0.0) return 0.5 * (total - xs);
        double theta = -0.5 * xs * u;
        for (double wj : w) theta += 0.5 * std::atan(wj * u);
        return std::sin(theta) / (u * std::exp(log_rho(u)));
    };

    // Panels are half-periods of the asymptotic phase -x u / 2. Once the
    // arctan terms have saturated, panel integrals alternate with smoothly
    // decaying magnitude and repeated averaging of partial sums converges
    // long before the envelope itself is small.
    const double width = 2.0 * std::numbers::pi / xs;
    auto panel_integral = [&](double a, double b) {
        return boost::math::quadrature::gauss_kronrod<double, 15>::integrate(integrand, a, b, 10, opt.panel_tol);
    };
    constexpr std::size_t levels = 12;
    double integral = 0.0;
    std::vector<double> partial;
    double previous_estimate = std::numeric_limits<double>::quiet_NaN();
    for (Index panel = 0;; ++panel) {
        if (panel >= opt.max_panels)
            return weighted_chisq_tail_mc(weights, x, opt.fallback_draws, opt.fallback_seed);
        const double a = width * static_cast<double>(panel);
        const double b = a + width;
        integral += panel_integral(a, b);
        const double envelope = 1.0 / (b * std::exp(log_rho(b)));
        if (envelope < opt.envelope_tol) break;

        double drift = 0.0;
        for (double wj : w) drift += wj / (1.0 + wj * wj * b * b);
        if (drift > 0.01 * xs) continue;
        partial.push_back(integral);
        if (partial.size() < levels) continue;
        std::vector<double> t(partial.end() - levels, partial.end());
        for (std::size_t lvl = 1; lvl < levels; ++lvl)
            for (std::size_t i = 0; i + lvl < levels; ++i) t[i] = 0.5 * (t[i] + t[i + 1]);
        const double estimate = t[0];
        if (std::abs(estimate - previous_estimate) < 1e-3 * opt.envelope_tol * std::max(1.0, width)) {
            integral = estimate;
            break;
        }
        previous_estimate = estimate;
    }
    const double p = 0.5 + integral / std::numbers::pi;
    return std::clamp(p, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Global tests

enum class TestKind { pointwise, norm, pc, choi };

inline std::string to_string(TestKind k)
{
    switch (k) {
    case TestKind::pointwise: return "pointwise";
    case TestKind::norm: return "norm";
    case TestKind::pc: return "pc";
    case TestKind::choi: return "choi";
    }
    return "?";
}

struct TestReport {
    TestKind kind = TestKind::norm;
    double statistic = 0.0;
    double p_value = 1.0;
    Index truncation = 0;
};

struct GlobalTestOptions {
    double energy = 0.99;
    /// Fixed truncation for the PC test; 0 selects it from `energy`.
    Index truncation = 0;
    ImhofOptions imhof;
};

/// Nonzero part of a descending spectrum: entries above 1e-12 * lambda_1.
inline Index positive_rank(const Eigen::Ref<const Vector>& lambda)
{
    if (lambda.size() == 0 || !(lambda(0) > 0.0)) return 0;
    Index r = 0;
    while (r < lambda.size() && lambda(r) > 1e-12 * lambda(0)) ++r;
    return r;
}

/// Smallest J with cumulative energy >= threshold over the positive spectrum.
inline Index energy_truncation(const Eigen::Ref<const Vector>& lambda, double threshold)
{
    const Index r = positive_rank(lambda);
    if (r == 0) return 0;
    const double total = lambda.head(r).sum();
    double s = 0.0;
    for (Index j = 0; j < r; ++j) {
        s += lambda(j);
        if (s >= threshold * total * (1.0 - 1e-14)) return j + 1;
    }
    return r;
}

/// Norm, PC and Choi tests of H0: beta_r = 0 from its score vector b_r.
/// Statistics are built from the spectrum (lambda, U) of C^r_beta.
inline std::array<TestReport, 3> global_tests(const Eigen::Ref<const Vector>& b_r, const Eigen::Ref<const Vector>& lambda,
                                              const Eigen::Ref<const Matrix>& u, Index n,
                                              const GlobalTestOptions& opt = {})
{
    require(b_r.size() == u.rows() && lambda.size() == u.cols(), "test inputs disagree in size");
    const Index rank = positive_rank(lambda);
    if (rank == 0) throw NumericalError("zero coefficient covariance; tests undefined");
    const Index j0 = opt.truncation > 0 ? std::min(opt.truncation, rank) : energy_truncation(lambda, opt.energy);
    if (j0 == 0) throw NumericalError("PC truncation selected zero components");
    const double nn = static_cast<double>(n);
    const Vector proj = u.transpose() * b_r;

    std::array<TestReport, 3> out;
    std::vector<double> w(lambda.data(), lambda.data() + rank), sw(rank);
    for (Index j = 0; j < rank; ++j) sw[j] = std::sqrt(lambda(j));

    out[0].kind = TestKind::norm;
    out[0].statistic = nn * b_r.squaredNorm();
    out[0].p_value = imhof_pvalue(w, out[0].statistic, opt.imhof);
    out[0].truncation = rank;

    out[1].kind = TestKind::pc;
    double pc = 0.0;
    for (Index j = 0; j < j0; ++j) pc += proj(j) * proj(j) / lambda(j);
    out[1].statistic = nn * pc;
    out[1].p_value = chi2_upper(static_cast<double>(j0), out[1].statistic);
    out[1].truncation = j0;

    out[2].kind = TestKind::choi;
    double choi = 0.0;
    for (Index j = 0; j < rank; ++j) choi += proj(j) * proj(j) / sw[j];
    out[2].statistic = nn * choi;
    out[2].p_value = imhof_pvalue(sw, out[2].statistic, opt.imhof);
    out[2].truncation = rank;
    return out;
}

inline std::array<TestReport, 3> global_tests(const Eigen::Ref<const Vector>& b_r, const BetaCovariance& cov,
                                              const GlobalTestOptions& opt = {})
{
    return global_tests(b_r, cov.lambda, cov.U, cov.N, opt);
}

// ---------------------------------------------------------------------------
// Simultaneous confidence bubbles

struct BubbleSpec {
    double alpha = 0.05;
    double xi_alpha = 0.0;
    Vector radius; // per data site
};

/// Empirical (1 - alpha) quantile of sum sqrt(lambda_j) Z_j^2.
inline double bubble_quantile(const Eigen::Ref<const Vector>& lambda, double alpha, Index draws, std::uint64_t seed)
{
    require(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    require(draws >= 1, "need at least one Monte Carlo draw");
    const Index rank = positive_rank(lambda);
    if (rank == 0) return 0.0;
    std::vector<double> sw(rank);
    for (Index j = 0; j < rank; ++j) sw[j] = std::sqrt(lambda(j));
    std::vector<double> v(draws);
    parallel_for(draws, [&](Index i) {
        RandomStream rng(seed, static_cast<std::uint64_t>(i));
        double s = 0.0;
        for (double w : sw) {
            const double z = rng.normal();
            s += w * z * z;
        }
        v[i] = s;
    });
    std::sort(v.begin(), v.end());
    const auto idx = static_cast<Index>(std::ceil((1.0 - alpha) * static_cast<double>(draws))) - 1;
    return v[std::clamp<Index>(idx, 0, draws - 1)];
}

/// Radius sqrt(xi sum_j sqrt(lambda_j) |U_j(m_p)|^2) / sqrt(N) at each site.
inline Vector bubble_radius(const BetaCovariance& cov, double xi, const Array3& vpoints)
{
    const Index k = vpoints.dims[0], p = vpoints.dims[1], d = vpoints.dims[2];
    require(k == cov.U.rows(), "component values and covariance disagree on K");
    const Index rank = positive_rank(cov.lambda);
    Vector r(p);
    for (Index i = 0; i < p; ++i) {
        Matrix vp(d, k);
        for (Index c = 0; c < k; ++c)
            for (Index q = 0; q < d; ++q) vp(q, c) = vpoints(c, i, q);
        double s = 0.0;
        for (Index j = 0; j < rank; ++j) s += std::sqrt(cov.lambda(j)) * (vp * cov.U.col(j)).squaredNorm();
        r(i) = std::sqrt(xi * s) / std::sqrt(static_cast<double>(cov.N));
    }
    return r;
}

inline BubbleSpec confidence_bubble(const BetaCovariance& cov, double alpha, const Array3& vpoints,
                                    Index mc_draws = 200000, std::uint64_t seed = 0)
{
    BubbleSpec b;
    b.alpha = alpha;
    b.xi_alpha = bubble_quantile(cov.lambda, alpha, mc_draws, seed);
    b.radius = bubble_radius(cov, b.xi_alpha, vpoints);
    return b;
}

/// Signed normal components <beta(m_p), t_p>.
inline Vector directional_field(const Eigen::Ref<const Matrix>& beta, const NormalField& normals)
{
    require(beta.rows() == normals.normals.rows() && beta.cols() == normals.normals.cols(),
            "field and normals disagree in shape");
    return (beta.array() * normals.normals.array()).rowwise().sum();
}

} // namespace mda
