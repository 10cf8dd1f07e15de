#pragma once

// Samples of corresponded point clouds: ingest, Procrustes alignment,
// reference shape and per-vertex normals.

#include "mda/io.hpp"

#include <optional>

namespace mda {

/// N corresponded units, each a P x D point matrix.
class ShapeSample {
public:
    ShapeSample() = default;

    explicit ShapeSample(std::vector<Matrix> units, std::vector<std::string> unit_ids = {})
        : units_(std::move(units)), ids_(std::move(unit_ids))
    {
        require(!units_.empty(), "shape sample needs at least one unit");
        const Index p = units_[0].rows();
        const Index d = units_[0].cols();
        require(d >= 1, "shape sample needs at least one coordinate");
        require(p >= d + 1, "each unit needs at least D+1 points");
        for (std::size_t n = 0; n < units_.size(); ++n) {
            if (units_[n].rows() != p)
                throw ValidationError("inconsistent point count: unit " + std::to_string(n + 1) + " has " +
                                      std::to_string(units_[n].rows()) + " points, expected " +
                                      std::to_string(p));
            if (units_[n].cols() != d)
                throw ValidationError("inconsistent dimension: unit " + std::to_string(n + 1));
            if (!units_[n].allFinite())
                throw ValidationError("non-finite coordinate in unit " + std::to_string(n + 1));
        }
        if (ids_.empty())
            for (std::size_t n = 0; n < units_.size(); ++n) ids_.push_back(std::to_string(n + 1));
        require(ids_.size() == units_.size(), "unit id count does not match unit count");
    }

    Index size() const { return static_cast<Index>(units_.size()); }
    Index point_count() const { return units_[0].rows(); }
    Index ambient_dim() const { return units_[0].cols(); }

    const Matrix& unit(Index n) const { return units_[n]; }
    const std::vector<Matrix>& units() const { return units_; }
    const std::vector<std::string>& unit_ids() const { return ids_; }

    Array3 to_array() const { return Array3::from_slices(units_); }

    static ShapeSample from_array(const Array3& a)
    {
        require(a.dims[0] >= 1, "binary sample has N = 0");
        return ShapeSample(a.slices());
    }

private:
    std::vector<Matrix> units_;
    std::vector<std::string> ids_;
};

struct ReferenceShape {
    Matrix points; // P x D
};

/// x -> scale * rotation * x + translation (column-vector convention).
struct SimilarityTransform {
    Matrix rotation;
    double scale = 1.0;
    Vector translation;

    Matrix apply(const Eigen::Ref<const Matrix>& rows) const
    {
        return ((scale * rows) * rotation.transpose()).rowwise() + translation.transpose();
    }
};

struct NormalField {
    Matrix normals; // P x D, unit rows
    double neighborhood_radius = 0.0;
};

enum class SampleFormat { csv, binary };

/// CSV: `path` is a manifest with one per-unit CSV path per line (relative
/// paths resolve against the manifest's directory). Binary: MDA1 array.
inline ShapeSample load_shape_sample(const std::filesystem::path& path, SampleFormat format)
{
    if (format == SampleFormat::binary) return ShapeSample::from_array(read_mda1(path));

    auto is = detail::open_in(path, false);
    std::vector<Matrix> units;
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(is, line)) {
        const std::string entry = trim(line);
        if (entry.empty() || entry[0] == '#') continue;
        std::filesystem::path unit_path(entry);
        if (unit_path.is_relative()) unit_path = path.parent_path() / unit_path;
        units.push_back(read_matrix_csv(unit_path));
        ids.push_back(entry);
    }
    if (units.empty()) throw ValidationError("manifest '" + path.string() + "' lists no units");
    return ShapeSample(std::move(units), std::move(ids));
}

inline void save_shape_sample_binary(const std::filesystem::path& path, const ShapeSample& s)
{
    write_mda1(path, s.to_array());
}

inline SampleFormat guess_format(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    char magic[4] = {};
    is.read(magic, 4);
    return (is && std::memcmp(magic, "MDA1", 4) == 0) ? SampleFormat::binary : SampleFormat::csv;
}

inline ReferenceShape mean_shape(const ShapeSample& sample)
{
    Matrix acc = Matrix::Zero(sample.point_count(), sample.ambient_dim());
    for (const auto& u : sample.units()) acc += u;
    return {acc / static_cast<double>(sample.size())};
}

// ---------------------------------------------------------------------------
// Procrustes

namespace detail {

inline double centroid_size(const Eigen::Ref<const Matrix>& centered)
{
    return std::sqrt(centered.squaredNorm());
}

/// Orthogonal Q minimizing |X Q - Y|_F, optionally restricted to det(Q) = +1.
inline Matrix procrustes_rotation(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& y,
                                  bool allow_reflection)
{
    Eigen::JacobiSVD<Matrix> svd(x.transpose() * y, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Matrix u = svd.matrixU();
    const Matrix& v = svd.matrixV();
    if (!allow_reflection && (u * v.transpose()).determinant() < 0.0) u.col(u.cols() - 1) *= -1.0;
    return u * v.transpose();
}

struct Normalized {
    Matrix shape;
    Vector centroid;
    double scale;
};

inline Normalized normalize_unit(const Eigen::Ref<const Matrix>& raw, Index unit)
{
    Normalized out;
    out.centroid = raw.colwise().mean().transpose();
    Matrix centered = raw.rowwise() - out.centroid.transpose();
    const double cs = centroid_size(centered);
    const double extent = std::max(1.0, raw.cwiseAbs().maxCoeff());
    if (!(cs > 1e-12 * extent * std::sqrt(static_cast<double>(raw.rows()))))
        throw ValidationError("degenerate configuration: unit " + std::to_string(unit + 1) +
                              " has zero centroid size");
    Eigen::JacobiSVD<Matrix> svd(centered);
    const Vector sv = svd.singularValues();
    if (raw.cols() >= 2 && sv(1) <= 1e-10 * sv(0))
        throw ValidationError("degenerate configuration: unit " + std::to_string(unit + 1) +
                              " is rank-deficient (collinear points)");
    out.scale = 1.0 / cs;
    out.shape = centered * out.scale;
    return out;
}

} // namespace detail

struct ProcrustesOptions {
    bool allow_reflection = false;
    double tol = 1e-10;
    int max_iter = 100;
};

struct ProcrustesResult {
    ShapeSample aligned;
    std::vector<SimilarityTransform> transforms;
    ReferenceShape consensus;           // unit centroid size
    std::vector<double> objective_trace; // sum of squared distances to the mean, per iteration
    int iterations = 0;
};

/// Generalized Procrustes alignment: center and scale every unit to unit
/// centroid size, rotate each onto the running consensus, recompute the
/// consensus, stop when the normalized consensus moves less than tol.
inline ProcrustesResult generalized_procrustes_align(const ShapeSample& sample, const ProcrustesOptions& opt = {})
{
    require(opt.tol > 0.0, "Procrustes tolerance must be positive");
    require(opt.max_iter >= 1, "Procrustes max_iter must be at least 1");
    const Index n_units = sample.size();
    const Index d = sample.ambient_dim();

    std::vector<detail::Normalized> base(n_units);
    parallel_for(n_units, [&](Index n) { base[n] = detail::normalize_unit(sample.unit(n), n); });

    std::vector<Matrix> rot(n_units, Matrix::Identity(d, d));
    auto consensus_of = [&] {
        Matrix acc = Matrix::Zero(sample.point_count(), d);
        for (Index n = 0; n < n_units; ++n) acc += base[n].shape * rot[n];
        return Matrix(acc / static_cast<double>(n_units));
    };
    auto objective_of = [&](const Matrix& mean) {
        double s = 0.0;
        for (Index n = 0; n < n_units; ++n) s += (base[n].shape * rot[n] - mean).squaredNorm();
        return s;
    };

    ProcrustesResult res;
    Matrix consensus = base[0].shape;
    double residual = std::numeric_limits<double>::infinity();
    bool converged = false;
    for (int it = 1; it <= opt.max_iter; ++it) {
        parallel_for(n_units, [&](Index n) {
            rot[n] = detail::procrustes_rotation(base[n].shape, consensus, opt.allow_reflection);
        });
        Matrix mean = consensus_of();
        res.objective_trace.push_back(objective_of(mean));
        const double size = detail::centroid_size(mean);
        if (!(size > 0.0)) throw NumericalError("Procrustes consensus collapsed to a point");
        Matrix next = mean / size;
        residual = (next - consensus).norm();
        consensus = std::move(next);
        res.iterations = it;
        if (residual < opt.tol) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw NumericalError("Procrustes alignment did not converge in " + std::to_string(opt.max_iter) +
                             " iterations (final consensus change " + format_double(residual) + ")");

    std::vector<Matrix> aligned(n_units);
    res.transforms.resize(n_units);
    for (Index n = 0; n < n_units; ++n) {
        aligned[n] = base[n].shape * rot[n];
        SimilarityTransform& t = res.transforms[n];
        t.rotation = rot[n].transpose();
        t.scale = base[n].scale;
        t.translation = -t.scale * (t.rotation * base[n].centroid);
    }
    res.aligned = ShapeSample(std::move(aligned), sample.unit_ids());
    res.consensus = {consensus};
    return res;
}

/// Single pass: normalize every unit and rotate it onto a fixed reference
/// (itself centered and scaled first).
inline ProcrustesResult align_to_reference(const ShapeSample& sample, const ReferenceShape& reference,
                                           bool allow_reflection = false)
{
    require(reference.points.rows() == sample.point_count() && reference.points.cols() == sample.ambient_dim(),
            "reference shape does not match the sample's P x D");
    const auto ref = detail::normalize_unit(reference.points, 0);
    const Index n_units = sample.size();
    std::vector<Matrix> aligned(n_units);
    ProcrustesResult res;
    res.transforms.resize(n_units);
    parallel_for(n_units, [&](Index n) {
        const auto b = detail::normalize_unit(sample.unit(n), n);
        const Matrix q = detail::procrustes_rotation(b.shape, ref.shape, allow_reflection);
        aligned[n] = b.shape * q;
        SimilarityTransform& t = res.transforms[n];
        t.rotation = q.transpose();
        t.scale = b.scale;
        t.translation = -t.scale * (t.rotation * b.centroid);
    });
    double obj = 0.0;
    Matrix mean = Matrix::Zero(sample.point_count(), sample.ambient_dim());
    for (const auto& a : aligned) mean += a;
    mean /= static_cast<double>(n_units);
    for (const auto& a : aligned) obj += (a - mean).squaredNorm();
    res.objective_trace.push_back(obj);
    res.iterations = 1;
    res.aligned = ShapeSample(std::move(aligned), sample.unit_ids());
    res.consensus = {ref.shape};
    return res;
}

/// Procrustes distance between two configurations after optimal similarity
/// superimposition of `b` onto `a` (both centered; `a` keeps its scale).
inline double procrustes_residual(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b,
                                  bool allow_reflection = false)
{
    const Matrix ac = a.rowwise() - a.colwise().mean();
    const Matrix bc = b.rowwise() - b.colwise().mean();
    const Matrix q = detail::procrustes_rotation(bc, ac, allow_reflection);
    const Matrix br = bc * q;
    const double denom = br.squaredNorm();
    const double s = denom > 0.0 ? (br.cwiseProduct(ac)).sum() / denom : 0.0;
    return (s * br - ac).cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Normals

/// Per-point unit normal from local PCA in a closed ball of `radius`; the
/// smallest-variance axis, oriented away from the shape's centroid.
inline NormalField estimate_vertex_normals(const ReferenceShape& reference, double radius)
{
    require(radius > 0.0, "normal neighborhood radius must be positive");
    const Matrix& pts = reference.points;
    const Index p = pts.rows();
    const Index d = pts.cols();
    const Vector centroid = pts.colwise().mean().transpose();
    const double r2 = radius * radius;

    NormalField field;
    field.neighborhood_radius = radius;
    field.normals.resize(p, d);
    std::vector<Index> too_small;
    std::vector<char> bad(p, 0);
    parallel_for(p, [&](Index i) {
        std::vector<Index> nb;
        for (Index j = 0; j < p; ++j)
            if ((pts.row(j) - pts.row(i)).squaredNorm() <= r2) nb.push_back(j);
        if (static_cast<Index>(nb.size()) - 1 < 3) {
            bad[i] = 1;
            return;
        }
        Matrix local(static_cast<Index>(nb.size()), d);
        for (std::size_t k = 0; k < nb.size(); ++k) local.row(static_cast<Index>(k)) = pts.row(nb[k]);
        const Matrix centered = local.rowwise() - local.colwise().mean();
        Eigen::SelfAdjointEigenSolver<Matrix> es(centered.transpose() * centered);
        Vector t = es.eigenvectors().col(0);
        t.normalize();
        const double side = t.dot(pts.row(i).transpose() - centroid);
        if (side < 0.0) {
            t = -t;
        } else if (side == 0.0) {
            Index arg;
            t.cwiseAbs().maxCoeff(&arg);
            if (t(arg) < 0.0) t = -t;
        }
        field.normals.row(i) = t.transpose();
    });
    for (Index i = 0; i < p; ++i)
        if (bad[i])
            throw ValidationError("insufficient neighborhood: point " + std::to_string(i) + " has fewer than 3 "
                                  "neighbors within radius " + format_double(radius));
    return field;
}

} // namespace mda
