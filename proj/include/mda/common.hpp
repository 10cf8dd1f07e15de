#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <array>
#include <charconv>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mda {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input, violated precondition, or unparsable file. CLI exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Singular system, failed convergence, or other numerical breakdown. CLI exit code 3.
class NumericalError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string& msg)
{
    if (!cond) throw ValidationError(msg);
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m)
{
    return m.allFinite();
}

// ---------------------------------------------------------------------------
// Threading

namespace detail {
inline std::atomic<int>& thread_count_storage()
{
    static std::atomic<int> n{1};
    return n;
}

inline bool& inside_parallel_region()
{
    thread_local bool flag = false;
    return flag;
}
} // namespace detail

inline void set_thread_count(int n)
{
    detail::thread_count_storage() = std::max(1, n);
}

inline int thread_count()
{
    return detail::thread_count_storage();
}

/// Runs body(i) for i in [0, n). Work is split in contiguous blocks; the
/// caller writes results into per-index slots, so output never depends on the
/// number of threads. Nested calls run serially on the calling worker.
template <typename Body>
void parallel_for(Index n, Body&& body)
{
    const int threads = detail::inside_parallel_region() ? 1 : static_cast<int>(std::min<Index>(thread_count(), n));
    if (threads <= 1) {
        for (Index i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            detail::inside_parallel_region() = true;
            const Index begin = n * t / threads;
            const Index end = n * (t + 1) / threads;
            try {
                for (Index i = begin; i < end; ++i) body(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Random numbers
//
// Counter-based streams: every stream is keyed by (seed, stream id), so a
// draw never depends on how work was scheduled. SplitMix64 is used both as
// the key mixer and the generator; Gaussians come from Box-Muller so the
// sequence is identical across standard libraries.

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream)
{
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

class RandomStream {
public:
    RandomStream(std::uint64_t seed, std::uint64_t stream) : state_(mix_seed(seed, stream)) {}

    std::uint64_t next_u64()
    {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform on the open interval (0, 1).
    double uniform()
    {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n)
    {
        // Lemire-style rejection keeps the draw unbiased.
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Fisher-Yates permutation of 0..n-1 from a keyed stream.
inline std::vector<Index> seeded_permutation(Index n, std::uint64_t seed, std::uint64_t stream)
{
    std::vector<Index> perm(n);
    for (Index i = 0; i < n; ++i) perm[i] = i;
    RandomStream rng(seed, stream);
    for (Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(perm[i], perm[j]);
    }
    return perm;
}

// ---------------------------------------------------------------------------
// Symmetric eigen-decomposition with a deterministic convention

struct EigenPairs {
    Vector values;  // sorted per request
    Matrix vectors; // column i pairs with values(i)
};

/// Flips the sign of each column so its largest-magnitude entry is positive
/// (first such entry on exact ties).
inline void fix_signs(Matrix& vectors)
{
    for (Index c = 0; c < vectors.cols(); ++c) {
        Index best = 0;
        double mag = -1.0;
        for (Index r = 0; r < vectors.rows(); ++r) {
            const double a = std::abs(vectors(r, c));
            if (a > mag * (1.0 + 1e-12)) {
                mag = a;
                best = r;
            }
        }
        if (vectors(best, c) < 0.0) vectors.col(c) *= -1.0;
    }
}

inline Matrix symmetrized(const Eigen::Ref<const Matrix>& a)
{
    return 0.5 * (a + a.transpose());
}

/// Eigenpairs of a symmetric matrix, largest first, `count` of them
/// (all when count < 0).
inline EigenPairs top_eigenpairs(const Eigen::Ref<const Matrix>& a, Index count = -1)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(a));
    if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver failed");
    const Index n = a.rows();
    if (count < 0 || count > n) count = n;
    EigenPairs out;
    out.values = es.eigenvalues().reverse().head(count);
    out.vectors = es.eigenvectors().rowwise().reverse().leftCols(count);
    fix_signs(out.vectors);
    return out;
}

/// Eigenpairs of a symmetric matrix, smallest first.
inline EigenPairs bottom_eigenpairs(const Eigen::Ref<const Matrix>& a, Index count = -1)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(a));
    if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver failed");
    const Index n = a.rows();
    if (count < 0 || count > n) count = n;
    EigenPairs out;
    out.values = es.eigenvalues().head(count);
    out.vectors = es.eigenvectors().leftCols(count);
    fix_signs(out.vectors);
    return out;
}

/// Symmetric PSD square root; tiny negative eigenvalues are clipped to zero.
inline Matrix sym_sqrt(const Eigen::Ref<const Matrix>& a)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(a));
    if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver failed");
    const Vector s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

/// Shortest decimal form that parses back to the same value.
inline std::string format_double(double v)
{
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

} // namespace mda
