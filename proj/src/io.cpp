#include "coexmap/io.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace coexmap {
namespace io {

namespace {

std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream in(path, mode);
    if (!in) throw DataError("cannot open file: " + path.string());
    return in;
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, mode);
    if (!out) throw DataError("cannot write file: " + path.string());
    return out;
}

} // namespace

void write_mtx(const std::filesystem::path& path, const CountSpMat& m,
               const std::vector<std::pair<std::string, std::string>>& meta) {
    std::ofstream out = open_out(path);
    out << "%%MatrixMarket matrix coordinate integer general\n";
    for (const auto& [k, v] : meta) out << "%meta " << k << "=" << v << "\n";
    out << m.rows() << " " << m.cols() << " " << m.nonZeros() << "\n";
    for (int col = 0; col < m.outerSize(); ++col) {
        for (CountSpMat::InnerIterator it(m, col); it; ++it) {
            out << (it.row() + 1) << " " << (it.col() + 1) << " " << it.value() << "\n";
        }
    }
}

CountSpMat read_mtx(const std::filesystem::path& path) {
    std::ifstream in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty mtx file: " + path.string());
    if (line.rfind("%%MatrixMarket", 0) != 0 || line.find("coordinate") == std::string::npos)
        throw DataError("unsupported MatrixMarket banner in " + path.string());
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] != '%') break;
    }
    std::istringstream head(line);
    std::int64_t rows = 0, cols = 0, nnz = 0;
    if (!(head >> rows >> cols >> nnz) || rows < 0 || cols < 0 || nnz < 0)
        throw DataError("bad mtx size line in " + path.string());
    std::vector<Eigen::Triplet<Count, std::int64_t>> trips;
    trips.reserve(static_cast<std::size_t>(nnz));
    for (std::int64_t t = 0; t < nnz; ++t) {
        std::int64_t r = 0, c = 0;
        double v = 0;
        if (!(in >> r >> c >> v)) throw DataError("truncated mtx body in " + path.string());
        if (r < 1 || r > rows || c < 1 || c > cols)
            throw DataError("mtx index out of range in " + path.string());
        if (v < 0) throw DataError("negative count entry in " + path.string());
        if (v != std::floor(v)) throw DataError("non-integer count entry in " + path.string());
        trips.emplace_back(r - 1, c - 1, static_cast<Count>(v));
    }
    CountSpMat m(rows, cols);
    m.setFromTriplets(trips.begin(), trips.end());
    m.makeCompressed();
    return m;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream out = open_out(path);
    for (const auto& l : lines) out << l << "\n";
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in = open_in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

void write_coords(const std::filesystem::path& path, const Mat& coords) {
    if (coords.cols() != 2) throw DataError("coordinates must have two columns");
    std::ofstream out = open_out(path);
    out << "x\ty\n";
    for (Index i = 0; i < coords.rows(); ++i)
        out << format_double(coords(i, 0)) << "\t" << format_double(coords(i, 1)) << "\n";
}

Mat read_coords(const std::filesystem::path& path) {
    std::vector<std::string> lines = read_lines(path);
    std::vector<std::array<double, 2>> rows;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::istringstream ss(lines[i]);
        double x = 0, y = 0;
        if (!(ss >> x >> y)) {
            if (i == 0) continue; // header row
            throw DataError("bad coordinate row in " + path.string());
        }
        rows.push_back({x, y});
    }
    Mat coords(static_cast<Index>(rows.size()), 2);
    for (Index i = 0; i < coords.rows(); ++i) {
        coords(i, 0) = rows[static_cast<std::size_t>(i)][0];
        coords(i, 1) = rows[static_cast<std::size_t>(i)][1];
    }
    return coords;
}

void write_dense(const std::filesystem::path& path, const Mat& m,
                 const std::vector<std::string>& names) {
    nlohmann::json header;
    header["rows"] = m.rows();
    header["cols"] = m.cols();
    header["names"] = names;
    std::ofstream out = open_out(path, std::ios::binary);
    const std::string h = header.dump();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.put('\n');
    // Row-major on disk regardless of in-memory layout.
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            out.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }
    }
}

Mat read_dense(const std::filesystem::path& path, std::vector<std::string>* names) {
    std::ifstream in = open_in(path, std::ios::binary);
    std::string header_line;
    if (!std::getline(in, header_line)) throw DataError("missing dense header in " + path.string());
    nlohmann::json header = nlohmann::json::parse(header_line, nullptr, false);
    if (header.is_discarded()) throw DataError("bad dense header in " + path.string());
    const Index rows = header.at("rows").get<Index>();
    const Index cols = header.at("cols").get<Index>();
    if (names) *names = header.at("names").get<std::vector<std::string>>();
    Mat m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            double v = 0;
            in.read(reinterpret_cast<char*>(&v), sizeof(double));
            if (!in) throw DataError("truncated dense body in " + path.string());
            m(i, j) = v;
        }
    }
    return m;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out = open_out(path);
    out << text;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in = open_in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string format_double(double v) {
    char buf[64];
    // %.17g round-trips every finite double.
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t hash_file(const std::filesystem::path& path, std::uint64_t seed) {
    const std::string content = read_text(path);
    return fnv1a(content.data(), content.size(), seed);
}

std::uint64_t hash_string(const std::string& s, std::uint64_t seed) {
    return fnv1a(s.data(), s.size(), seed);
}

} // namespace io
} // namespace coexmap
