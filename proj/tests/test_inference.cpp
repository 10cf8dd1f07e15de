#include "support.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

using namespace mda;
using namespace mda::testing;

namespace {

// Each weight repeated twice gives a hypoexponential law with a closed
// form tail: sum_j prod_{k != j} w_j / (w_j - w_k) exp(-x / (2 w_j)).
double paired_weights_tail(const std::vector<double>& distinct, double x)
{
    double p = 0.0;
    for (std::size_t j = 0; j < distinct.size(); ++j) {
        double c = 1.0;
        for (std::size_t k = 0; k < distinct.size(); ++k)
            if (k != j) c *= distinct[j] / (distinct[j] - distinct[k]);
        p += c * std::exp(-x / (2.0 * distinct[j]));
    }
    return p;
}

double chi2_quantile(double df, double p)
{
    return boost::math::quantile(boost::math::chi_squared(df), p);
}

BetaCovariance known_covariance(const Vector& lambda, std::uint64_t seed, Index n)
{
    BetaCovariance c;
    const Index k = lambda.size();
    c.N = n;
    c.scale = 1.0;
    c.U = random_rotation(static_cast<int>(k), seed);
    c.lambda = lambda;
    c.c_beta = c.U * lambda.asDiagonal() * c.U.transpose();
    c.c_eps = c.c_beta;
    return c;
}

// Draw b ~ N(0, C / N) using the spectral factor.
Vector draw_null(const BetaCovariance& c, RandomStream& rng)
{
    Vector z(c.lambda.size());
    for (Index j = 0; j < z.size(); ++j) z(j) = rng.normal() * std::sqrt(c.lambda(j));
    return c.U * z / std::sqrt(static_cast<double>(c.N));
}

Array3 random_vpoints(Index k, Index p, Index d, std::uint64_t seed)
{
    Array3 a(static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(d));
    for (Index c = 0; c < k; ++c) a.set_slice(static_cast<std::size_t>(c), random_matrix(p, d, seed, static_cast<std::uint64_t>(c)));
    return a;
}

} // namespace

TEST(BetaCov, ScalingIdentityAndIsotropy)
{
    const Index n = 16;
    // orthogonal +-1 columns give X^T X = N I
    Matrix x(n, 2);
    for (Index i = 0; i < n; ++i) x.row(i) << 1.0, (i % 2 ? 1.0 : -1.0);
    const DesignMatrix d = make_design(x);
    const Matrix ce = random_spd(5, 1);
    const BetaCovariance c = beta_covariance(d, ce, 1);
    EXPECT_LT((c.c_beta - ce).cwiseAbs().maxCoeff(), 1e-12);

    const DesignMatrix g = make_design(random_matrix(20, 3, 2));
    const BetaCovariance iso = beta_covariance(g, Matrix::Identity(4, 4), 2);
    const Matrix inv = (g.X.transpose() * g.X).inverse();
    for (Index j = 0; j < 4; ++j) EXPECT_NEAR(iso.lambda(j), 20.0 * inv(2, 2), 1e-12);
    EXPECT_THROW(beta_covariance(g, Matrix::Identity(4, 4), 3), ValidationError);
}

TEST(BetaCov, EigenMatchesDenseOracle)
{
    const DesignMatrix g = make_design(random_matrix(30, 3, 3));
    const Matrix ce = random_spd(7, 4);
    const BetaCovariance c = beta_covariance(g, ce, 0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(c.c_beta);
    const Vector ev = es.eigenvalues().reverse();
    EXPECT_LT((c.lambda - ev).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((c.U.transpose() * c.U - Matrix::Identity(7, 7)).cwiseAbs().maxCoeff(), 1e-10);
    for (Index j = 1; j < 7; ++j) EXPECT_GE(c.lambda(j - 1), c.lambda(j));
}

TEST(Pointwise, Examples)
{
    const Matrix i3 = Matrix::Identity(3, 3);
    const PointwiseResult zero = pointwise_test(Vector::Zero(3), i3, 10);
    EXPECT_EQ(zero.statistic, 0.0);
    EXPECT_EQ(zero.p_value, 1.0);
    const PointwiseResult three = pointwise_test(Vector::Constant(3, 0.5), i3, 4);
    EXPECT_NEAR(three.statistic, 3.0, 1e-14);
    EXPECT_NEAR(three.p_value, 0.3916, 1e-4);
    EXPECT_NEAR(three.p_value, 1.0 - boost::math::cdf(boost::math::chi_squared(3), 3.0), 1e-12);
    const PointwiseResult q = pointwise_test(Vector::Constant(3, std::sqrt(7.8147 / 3)), i3, 1);
    EXPECT_NEAR(q.p_value, 0.05, 1e-4);
    Matrix sing = Matrix::Zero(3, 3);
    sing(0, 0) = 1;
    const PointwiseResult s = pointwise_test(Vector::Ones(3), sing, 5);
    EXPECT_FALSE(s.testable);
    EXPECT_TRUE(std::isnan(s.p_value));
}

TEST(Pointwise, FieldMatchesLocalLoop)
{
    const Index k = 6, p = 12, n = 40;
    const Array3 vp = random_vpoints(k, p, 3, 5);
    const BetaCovariance c = known_covariance(Vector::LinSpaced(k, 2.0, 0.2), 6, n);
    const Vector b = random_matrix(k, 1, 7).col(0) * 0.3;
    const auto field = pointwise_field(b, c, vp);
    for (Index i = 0; i < p; ++i) {
        Matrix vm(3, k);
        Vector beta = Vector::Zero(3);
        for (Index kk = 0; kk < k; ++kk)
            for (Index q = 0; q < 3; ++q) {
                vm(q, kk) = vp(kk, i, q);
                beta(q) += b(kk) * vp(kk, i, q);
            }
        const Matrix local = vm * c.c_beta * vm.transpose();
        const double stat = n * beta.dot(local.inverse() * beta);
        EXPECT_NEAR(field[i].statistic, stat, 1e-9 * std::max(1.0, stat));
    }
}

TEST(Chi2, UpperTail)
{
    EXPECT_EQ(chi2_upper(3, 0), 1.0);
    EXPECT_NEAR(chi2_upper(3, 7.814727903251178), 0.05, 1e-12);
    EXPECT_NEAR(chi2_upper(2, 4.0), std::exp(-2.0), 1e-14);
}

TEST(Imhof, EqualWeightsMatchChiSquare)
{
    EXPECT_NEAR(imhof_pvalue({1, 1, 1}, 7.8147), 0.05, 1e-4);
    for (int df : {1, 2, 5, 12})
        for (double p : {0.5, 0.1, 0.01})
            EXPECT_NEAR(imhof_pvalue(std::vector<double>(df, 1.0), chi2_quantile(df, 1 - p)), p, 1e-6)
                << "df=" << df << " p=" << p;
}

TEST(Imhof, SingleWeightNormalTail)
{
    const boost::math::normal z;
    for (double w : {0.1, 1.0, 7.0})
        for (double x : {0.2, 1.0, 3.0, 10.0}) {
            const double expect = 2.0 * (1.0 - boost::math::cdf(z, std::sqrt(x / w)));
            EXPECT_NEAR(imhof_pvalue({w}, x), expect, 1e-6) << w << " " << x;
        }
}

TEST(Imhof, PairedWeightsClosedForm)
{
    const std::vector<double> d{2.0, 1.0, 0.5, 0.1};
    std::vector<double> w;
    for (double v : d) w.insert(w.end(), {v, v});
    for (double x : {0.5, 2.0, 6.0, 15.0, 30.0}) EXPECT_NEAR(imhof_pvalue(w, x), paired_weights_tail(d, x), 1e-6) << x;
}

TEST(Imhof, MatchesMonteCarlo)
{
    const Index draws = 2'000'000;
    const std::vector<double> w{2, 1, 0.5};
    const double mc = weighted_chisq_tail_mc(w, 5.0, draws, 11);
    const double se = std::sqrt(mc * (1 - mc) / draws);
    EXPECT_LT(std::abs(imhof_pvalue(w, 5.0) - mc), 3 * se);
}

TEST(Imhof, ErrorsAndEdges)
{
    EXPECT_THROW(imhof_pvalue({}, 1.0), ValidationError);
    EXPECT_THROW(imhof_pvalue({0.0, 0.0}, 1.0), ValidationError);
    EXPECT_THROW(imhof_pvalue({1.0, -1.0}, 1.0), ValidationError);
    EXPECT_EQ(imhof_pvalue({1.0, 2.0}, 0.0), 1.0);
    EXPECT_EQ(imhof_pvalue({1.0}, 1e4), 0.0);
    // zero weights are ignored
    EXPECT_NEAR(imhof_pvalue({1.0, 0.0, 1.0}, 3.0), std::exp(-1.5), 1e-6);
}

// Property: the tail is non-increasing in x and continuous.
TEST(ImhofProperty, MonotoneAndContinuous)
{
    const std::vector<double> w{3.0, 1.2, 0.7, 0.05, 0.01};
    double prev = 1.0;
    for (double x = 0.0; x <= 40.0; x += 0.25) {
        const double p = imhof_pvalue(w, x);
        EXPECT_LE(p, prev + 1e-9);
        EXPECT_GE(p, 0.0);
        prev = p;
    }
    EXPECT_NEAR(imhof_pvalue(w, 5.0), imhof_pvalue(w, 5.0 + 1e-7), 1e-6);
}

TEST(Truncation, EnergyAndRank)
{
    Vector l(5);
    l << 5, 3, 1.5, 0.5, 0;
    EXPECT_EQ(positive_rank(l), 4);
    EXPECT_EQ(energy_truncation(l, 0.5), 1);
    EXPECT_EQ(energy_truncation(l, 0.8), 2);
    EXPECT_EQ(energy_truncation(l, 0.95), 3);
    EXPECT_EQ(energy_truncation(l, 1.0), 4);
    EXPECT_EQ(positive_rank(Vector::Zero(3)), 0);
}

TEST(GlobalTests, NullPointAndEqualWeights)
{
    const BetaCovariance c = known_covariance(Vector::LinSpaced(6, 3.0, 0.5), 20, 50);
    for (const auto& r : global_tests(Vector::Zero(6), c)) EXPECT_EQ(r.p_value, 1.0);

    const BetaCovariance iso = known_covariance(Vector::Ones(5), 21, 30);
    const Vector b = random_matrix(5, 1, 22).col(0) * 0.2;
    const auto t = global_tests(b, iso);
    EXPECT_EQ(t[1].truncation, 5);
    EXPECT_NEAR(t[0].statistic, t[1].statistic, 1e-10);
    EXPECT_NEAR(t[0].p_value, t[1].p_value, 1e-6);
    EXPECT_EQ(to_string(t[2].kind), "choi");
}

TEST(GlobalTests, StatisticsMatchDefinitions)
{
    Vector l(4);
    l << 4, 1, 0.25, 0.0;
    const BetaCovariance c = known_covariance(l, 23, 25);
    const Vector b = random_matrix(4, 1, 24).col(0);
    const auto t = global_tests(b, c);
    const Vector proj = c.U.transpose() * b;
    EXPECT_NEAR(t[0].statistic, 25 * b.squaredNorm(), 1e-10);
    EXPECT_EQ(t[1].truncation, energy_truncation(l, 0.99));
    double pc = 0, choi = 0;
    for (Index j = 0; j < t[1].truncation; ++j) pc += proj(j) * proj(j) / l(j);
    for (Index j = 0; j < 3; ++j) choi += proj(j) * proj(j) / std::sqrt(l(j));
    EXPECT_NEAR(t[1].statistic, 25 * pc, 1e-10);
    EXPECT_NEAR(t[2].statistic, 25 * choi, 1e-10);
    EXPECT_NEAR(t[1].p_value, chi2_upper(static_cast<double>(t[1].truncation), t[1].statistic), 1e-15);
    EXPECT_THROW(global_tests(b, known_covariance(Vector::Zero(4), 25, 10)), NumericalError);
}

TEST(GlobalTests, SizeUnderSimulatedNull)
{
    const Index k = 10, reps = 2000;
    Vector l(k);
    for (Index j = 0; j < k; ++j) l(j) = std::pow(0.6, static_cast<double>(j));
    const BetaCovariance c = known_covariance(l, 30, 100);
    std::array<int, 3> rejects{};
    RandomStream rng(31, 0);
    for (Index r = 0; r < reps; ++r) {
        const auto t = global_tests(draw_null(c, rng), c);
        for (int i = 0; i < 3; ++i) rejects[i] += t[i].p_value < 0.05;
    }
    for (int i = 0; i < 3; ++i) {
        const double rate = rejects[i] / static_cast<double>(reps);
        EXPECT_GE(rate, 0.035) << i;
        EXPECT_LE(rate, 0.065) << i;
    }
}

// Property: PC statistic is self-normalizing under a joint rescale of the
// spectrum; the norm p-value is invariant when the statistic scales too.
TEST(GlobalTestsProperty, ScaleInvariance)
{
    const Vector l = Vector::LinSpaced(5, 2.0, 0.1);
    const BetaCovariance a = known_covariance(l, 32, 40);
    BetaCovariance s = a;
    s.lambda *= 9.0;
    const Vector b = random_matrix(5, 1, 33).col(0) * 0.3;
    const auto ta = global_tests(b, a);
    const auto ts = global_tests(3.0 * b, s);
    EXPECT_NEAR(ta[1].statistic, ts[1].statistic, 1e-10);
    EXPECT_NEAR(ta[0].p_value, ts[0].p_value, 1e-8);
}

TEST(Bubble, SingleEigenvalueQuantile)
{
    BetaCovariance c = known_covariance(Vector::Ones(1), 40, 25);
    c.U.setOnes();
    Array3 vp(1, 4, 1);
    for (int i = 0; i < 4; ++i) vp(0, i, 0) = 1.0;
    const BubbleSpec b = confidence_bubble(c, 0.05, vp, 200000, 41);
    // Monte Carlo quantile error: sqrt(a(1-a)/n) / density at the quantile
    const double dens = std::exp(-3.8415 / 2) / std::sqrt(2 * std::numbers::pi * 3.8415);
    const double tol = 4 * std::sqrt(0.05 * 0.95 / 200000) / dens;
    EXPECT_NEAR(b.xi_alpha, 3.8415, tol);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(b.radius(i), std::sqrt(b.xi_alpha) / 5.0, 1e-14);
    const BubbleSpec one = confidence_bubble(c, 1.0, vp, 10000, 41);
    EXPECT_LT(one.xi_alpha, 1e-6);
    EXPECT_LT(one.radius.maxCoeff(), 1e-3);
}

TEST(Bubble, NonCoverageUnderGaussianNull)
{
    const Index k = 8, p = 40, reps = 500;
    Vector l(k);
    for (Index j = 0; j < k; ++j) l(j) = std::pow(0.5, static_cast<double>(j));
    const BetaCovariance c = known_covariance(l, 42, 60);
    const Array3 vp = random_vpoints(k, p, 3, 43);
    const BubbleSpec b = confidence_bubble(c, 0.05, vp, 100000, 44);
    RandomStream rng(45, 0);
    int exits = 0;
    for (Index r = 0; r < reps; ++r) {
        const Matrix beta = beta_at_points(draw_null(c, rng), vp);
        bool out = false;
        for (Index i = 0; i < p; ++i) out |= beta.row(i).norm() > b.radius(i);
        exits += out;
    }
    EXPECT_LE(exits / static_cast<double>(reps), 0.07);
}

// Property: radii are positive, shrink as alpha grows and scale as 1/sqrt(N).
TEST(BubbleProperty, MonotoneAndScaling)
{
    const BetaCovariance c = known_covariance(Vector::LinSpaced(5, 1.0, 0.1), 46, 30);
    const Array3 vp = random_vpoints(5, 10, 3, 47);
    Vector prev;
    for (double a : {0.01, 0.05, 0.2, 0.5}) {
        const BubbleSpec b = confidence_bubble(c, a, vp, 50000, 48);
        EXPECT_GT(b.radius.minCoeff(), 0.0);
        if (prev.size()) EXPECT_TRUE((b.radius.array() <= prev.array()).all());
        prev = b.radius;
    }
    BetaCovariance c4 = c;
    c4.N = 4 * c.N;
    const double xi = bubble_quantile(c.lambda, 0.05, 50000, 48);
    EXPECT_LT((bubble_radius(c4, xi, vp) * 2.0 - bubble_radius(c, xi, vp)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Bubble, ThreadIndependent)
{
    const Vector l = Vector::LinSpaced(6, 1.0, 0.1);
    set_thread_count(1);
    const double a = bubble_quantile(l, 0.05, 20000, 7);
    set_thread_count(8);
    const double b = bubble_quantile(l, 0.05, 20000, 7);
    set_thread_count(1);
    EXPECT_EQ(a, b);
}

TEST(Directional, Examples)
{
    NormalField nf;
    nf.normals.resize(3, 3);
    nf.normals << 0, 0, 1, 1, 0, 0, 0, 1, 0;
    Matrix beta(3, 3);
    beta << 0, 0, 2, 0, 0, -2, 0.3, 0.0, 0.7;
    const Vector d = directional_field(beta, nf);
    EXPECT_EQ(d(0), 2.0);
    EXPECT_LT(std::abs(d(1)), 1e-10);
    EXPECT_EQ(d(2), 0.0);
    NormalField rn;
    rn.normals = random_matrix(20, 3, 50).rowwise().normalized();
    const Matrix rb = random_matrix(20, 3, 51);
    const Vector rd = directional_field(rb, rn);
    for (Index i = 0; i < 20; ++i) EXPECT_NEAR(rd(i), rb.row(i).dot(rn.normals.row(i)), 1e-15);
}

// Property: the pointwise statistic is invariant under an invertible linear
// change of ambient coordinates.
TEST(PointwiseProperty, MahalanobisInvariance)
{
    const Vector b = random_matrix(3, 1, 60).col(0);
    const Matrix cov = random_spd(3, 61);
    const Matrix a = random_matrix(3, 3, 62) + 3.0 * Matrix::Identity(3, 3);
    const double s0 = pointwise_test(b, cov, 12).statistic;
    const double s1 = pointwise_test(a * b, a * cov * a.transpose(), 12).statistic;
    EXPECT_NEAR(s0, s1, 1e-8 * std::max(1.0, s0));
}
