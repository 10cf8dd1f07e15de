#pragma once

#include "mda/mda.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

namespace mda::testing {

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, std::uint64_t stream = 0)
{
    RandomStream rng(seed, stream);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

inline Matrix random_uniform(Index rows, Index cols, double lo, double hi, std::uint64_t seed)
{
    RandomStream rng(seed, 1);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = lo + (hi - lo) * rng.uniform();
    return m;
}

/// Proper rotation from the QR factor of a Gaussian matrix.
inline Matrix random_rotation(Index d, std::uint64_t seed)
{
    Eigen::HouseholderQR<Matrix> qr(random_matrix(d, d, seed, 7));
    Matrix q = qr.householderQ();
    if (q.determinant() < 0) q.col(0) *= -1.0;
    return q;
}

inline Matrix random_spd(Index k, std::uint64_t seed)
{
    const Matrix a = random_matrix(k, k + 3, seed, 3);
    return a * a.transpose() / static_cast<double>(k) + 0.1 * Matrix::Identity(k, k);
}

/// Fresh scratch directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto p = std::filesystem::temp_directory_path() / ("mda_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline std::string read_file(const std::filesystem::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& s)
{
    std::ofstream os(p, std::ios::binary);
    os << s;
}

/// Unit square split into an n x n grid of right triangles.
inline TriangulatedDomain grid_square(Index n)
{
    TriangulatedDomain d;
    d.vertices.resize((n + 1) * (n + 1), 2);
    for (Index i = 0; i <= n; ++i)
        for (Index j = 0; j <= n; ++j)
            d.vertices.row(i * (n + 1) + j) << static_cast<double>(j) / n, static_cast<double>(i) / n;
    d.triangles.resize(2 * n * n, 3);
    Index t = 0;
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
            const Index a = i * (n + 1) + j, b = a + 1, c = a + n + 1, e = c + 1;
            d.triangles.row(t++) << a, b, e;
            d.triangles.row(t++) << a, e, c;
        }
    finalize_domain(d);
    return d;
}

} // namespace mda::testing
