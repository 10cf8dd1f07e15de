#pragma once

// File formats shared by the library and the CLI.
//
//   MDA1 array:  "MDA1" | u32 N | u32 P | u32 D | N*P*D f64, (n, p, q) row-major.
//   MDAB bundle: "MDAB" | u32 count | entries...
//                entry = u32 name_len | name | u8 kind
//                        kind 0: u32 d0 | u32 d1 | u32 d2 | d0*d1*d2 f64 (row-major)
//                        kind 1: u32 len | utf-8 bytes
//   All integers and reals little-endian.
//   Matrix CSV:  one row per line, comma-separated decimals, no header.

#include "mda/common.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace mda {

/// Dense 3-way array in (i, j, k) row-major order.
struct Array3 {
    std::array<std::uint32_t, 3> dims{0, 0, 0};
    std::vector<double> data;

    Array3() = default;
    Array3(std::uint32_t d0, std::uint32_t d1, std::uint32_t d2)
        : dims{d0, d1, d2}, data(std::size_t(d0) * d1 * d2, 0.0)
    {}

    double& operator()(std::size_t i, std::size_t j, std::size_t k)
    {
        return data[(i * dims[1] + j) * dims[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const
    {
        return data[(i * dims[1] + j) * dims[2] + k];
    }

    /// Slice i as a d1 x d2 matrix.
    Matrix slice(std::size_t i) const
    {
        Matrix m(dims[1], dims[2]);
        for (std::size_t j = 0; j < dims[1]; ++j)
            for (std::size_t k = 0; k < dims[2]; ++k) m(j, k) = (*this)(i, j, k);
        return m;
    }

    void set_slice(std::size_t i, const Eigen::Ref<const Matrix>& m)
    {
        for (std::size_t j = 0; j < dims[1]; ++j)
            for (std::size_t k = 0; k < dims[2]; ++k) (*this)(i, j, k) = m(j, k);
    }

    static Array3 from_matrix(const Eigen::Ref<const Matrix>& m)
    {
        Array3 a(1, static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()));
        a.set_slice(0, m);
        return a;
    }

    static Array3 from_slices(const std::vector<Matrix>& slices)
    {
        require(!slices.empty(), "cannot build an array from zero slices");
        Array3 a(static_cast<std::uint32_t>(slices.size()), static_cast<std::uint32_t>(slices[0].rows()),
                 static_cast<std::uint32_t>(slices[0].cols()));
        for (std::size_t i = 0; i < slices.size(); ++i) {
            require(slices[i].rows() == slices[0].rows() && slices[i].cols() == slices[0].cols(),
                    "slices differ in shape");
            a.set_slice(i, slices[i]);
        }
        return a;
    }

    std::vector<Matrix> slices() const
    {
        std::vector<Matrix> out;
        out.reserve(dims[0]);
        for (std::size_t i = 0; i < dims[0]; ++i) out.push_back(slice(i));
        return out;
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_big(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        std::array<unsigned char, sizeof(T)> b;
        std::memcpy(b.data(), &v, sizeof(T));
        std::reverse(b.begin(), b.end());
        std::memcpy(&v, b.data(), sizeof(T));
    }
    return v;
}

template <typename T>
void put(std::ostream& os, T v)
{
    v = byteswap_if_big(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what)
{
    T v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw ValidationError("truncated binary file while reading " + what);
    return byteswap_if_big(v);
}

inline void put_array_body(std::ostream& os, const Array3& a)
{
    for (auto d : a.dims) put<std::uint32_t>(os, d);
    for (double v : a.data) put<double>(os, v);
}

inline Array3 get_array_body(std::istream& is)
{
    Array3 a;
    for (auto& d : a.dims) d = get<std::uint32_t>(is, "dimensions");
    const std::size_t count = std::size_t(a.dims[0]) * a.dims[1] * a.dims[2];
    if (count > (std::size_t(1) << 34)) throw ValidationError("binary array too large");
    a.data.resize(count);
    for (auto& v : a.data) v = get<double>(is, "values");
    return a;
}

inline std::ifstream open_in(const std::filesystem::path& path, bool binary)
{
    std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
    if (!is) throw ValidationError("cannot open '" + path.string() + "'");
    return is;
}

inline std::ofstream open_out(const std::filesystem::path& path, bool binary)
{
    std::ofstream os(path, binary ? (std::ios::binary | std::ios::trunc) : std::ios::trunc);
    if (!os) throw ValidationError("cannot write '" + path.string() + "'");
    return os;
}

} // namespace detail

inline void write_mda1(const std::filesystem::path& path, const Array3& a)
{
    auto os = detail::open_out(path, true);
    os.write("MDA1", 4);
    detail::put_array_body(os, a);
    if (!os) throw ValidationError("write failed for '" + path.string() + "'");
}

inline Array3 read_mda1(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, true);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MDA1", 4) != 0)
        throw ValidationError("'" + path.string() + "' is not an MDA1 file (bad magic)");
    Array3 a = detail::get_array_body(is);
    if (is.peek() != std::char_traits<char>::eof())
        throw ValidationError("trailing bytes in '" + path.string() + "'");
    return a;
}

/// Named arrays and strings persisted together (the MDAB container).
class Bundle {
public:
    void put(const std::string& name, Array3 a) { arrays_[name] = std::move(a); }
    void put(const std::string& name, const Eigen::Ref<const Matrix>& m) { arrays_[name] = Array3::from_matrix(m); }
    void put_text(const std::string& name, std::string s) { texts_[name] = std::move(s); }

    bool has(const std::string& name) const { return arrays_.count(name) != 0; }
    bool has_text(const std::string& name) const { return texts_.count(name) != 0; }

    const Array3& array(const std::string& name) const
    {
        auto it = arrays_.find(name);
        if (it == arrays_.end()) throw ValidationError("bundle has no array '" + name + "'");
        return it->second;
    }

    Matrix matrix(const std::string& name) const
    {
        const Array3& a = array(name);
        if (a.dims[0] != 1) throw ValidationError("bundle entry '" + name + "' is not a matrix");
        return a.slice(0);
    }

    const std::string& text(const std::string& name) const
    {
        auto it = texts_.find(name);
        if (it == texts_.end()) throw ValidationError("bundle has no text '" + name + "'");
        return it->second;
    }

    void save(const std::filesystem::path& path) const
    {
        auto os = detail::open_out(path, true);
        os.write("MDAB", 4);
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays_.size() + texts_.size()));
        // std::map iteration gives a fixed byte layout for identical content.
        for (const auto& [name, a] : arrays_) {
            put_name(os, name);
            detail::put<std::uint8_t>(os, 0);
            detail::put_array_body(os, a);
        }
        for (const auto& [name, s] : texts_) {
            put_name(os, name);
            detail::put<std::uint8_t>(os, 1);
            detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
            os.write(s.data(), static_cast<std::streamsize>(s.size()));
        }
        if (!os) throw ValidationError("write failed for '" + path.string() + "'");
    }

    static Bundle load(const std::filesystem::path& path)
    {
        auto is = detail::open_in(path, true);
        char magic[4];
        if (!is.read(magic, 4) || std::memcmp(magic, "MDAB", 4) != 0)
            throw ValidationError("'" + path.string() + "' is not an MDAB bundle (bad magic)");
        Bundle b;
        const auto count = detail::get<std::uint32_t>(is, "entry count");
        for (std::uint32_t e = 0; e < count; ++e) {
            const std::string name = get_string(is);
            const auto kind = detail::get<std::uint8_t>(is, "entry kind");
            if (kind == 0)
                b.arrays_[name] = detail::get_array_body(is);
            else if (kind == 1)
                b.texts_[name] = get_string(is);
            else
                throw ValidationError("unknown bundle entry kind in '" + path.string() + "'");
        }
        return b;
    }

private:
    static void put_name(std::ostream& os, const std::string& name)
    {
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
    }

    static std::string get_string(std::istream& is)
    {
        const auto len = detail::get<std::uint32_t>(is, "string length");
        if (len > (1u << 28)) throw ValidationError("bundle string too long");
        std::string s(len, '\0');
        if (!is.read(s.data(), len)) throw ValidationError("truncated bundle string");
        return s;
    }

    std::map<std::string, Array3> arrays_;
    std::map<std::string, std::string> texts_;
};

// ---------------------------------------------------------------------------
// CSV

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep)) out.push_back(trim(cur));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

inline double parse_double(const std::string& tok, const std::string& where)
{
    if (tok.empty()) throw ValidationError("empty field in " + where);
    std::size_t used = 0;
    double v;
    try {
        v = std::stod(tok, &used);
    } catch (const std::exception&) {
        throw ValidationError("cannot parse '" + tok + "' as a number in " + where);
    }
    if (used != tok.size()) throw ValidationError("cannot parse '" + tok + "' as a number in " + where);
    if (!std::isfinite(v)) throw ValidationError("non-finite value in " + where);
    return v;
}

/// Reads a headerless numeric CSV. Blank lines are skipped.
inline Matrix read_matrix_csv(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, false);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto toks = split(line, ',');
        std::vector<double> row;
        row.reserve(toks.size());
        const std::string where = path.string() + ":" + std::to_string(line_no);
        for (const auto& t : toks) row.push_back(parse_double(t, where));
        if (!rows.empty() && row.size() != rows[0].size())
            throw ValidationError("inconsistent column count at " + where);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ValidationError("'" + path.string() + "' has no data rows");
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
    for (Index r = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c];
    return m;
}

inline void write_matrix_csv(const std::filesystem::path& path, const Eigen::Ref<const Matrix>& m)
{
    auto os = detail::open_out(path, false);
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            if (c) os << ',';
            os << format_double(m(r, c));
        }
        os << '\n';
    }
    if (!os) throw ValidationError("write failed for '" + path.string() + "'");
}

/// Table with a header row of names followed by numeric rows.
struct NamedTable {
    std::vector<std::string> names;
    Matrix values;
};

inline NamedTable read_named_csv(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, false);
    std::string line;
    NamedTable t;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!trim(line).empty()) break;
    }
    if (trim(line).empty()) throw ValidationError("'" + path.string() + "' is empty");
    t.names = split(line, ',');
    for (const auto& n : t.names)
        if (n.empty()) throw ValidationError("empty column name in '" + path.string() + "'");
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto toks = split(line, ',');
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (toks.size() != t.names.size()) throw ValidationError("column count mismatch at " + where);
        std::vector<double> row;
        for (const auto& tok : toks) row.push_back(parse_double(tok, where));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ValidationError("'" + path.string() + "' has no data rows");
    t.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(t.names.size()));
    for (Index r = 0; r < t.values.rows(); ++r)
        for (Index c = 0; c < t.values.cols(); ++c) t.values(r, c) = rows[r][c];
    return t;
}

} // namespace mda
