#ifndef COEXMAP_IO_HPP
#define COEXMAP_IO_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "coexmap/types.hpp"

namespace coexmap {
namespace io {

// All text files are UTF-8 with LF line endings.

// Matrix Market coordinate-integer format, 1-based indices, rows = cells,
// columns = genes. Comment lines after the banner carry artifact metadata
// ("%meta key=value").
void write_mtx(const std::filesystem::path& path, const CountSpMat& m,
               const std::vector<std::pair<std::string, std::string>>& meta = {});
CountSpMat read_mtx(const std::filesystem::path& path);

// One name per line.
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);
std::vector<std::string> read_lines(const std::filesystem::path& path);

// Coordinates: TSV with header "x\ty", one row per barcode.
void write_coords(const std::filesystem::path& path, const Mat& coords);
Mat read_coords(const std::filesystem::path& path);

// Dense matrix container: one JSON header line {"rows","cols","names"}
// followed by rows*cols little-endian doubles, row-major.
void write_dense(const std::filesystem::path& path, const Mat& m,
                 const std::vector<std::string>& names);
Mat read_dense(const std::filesystem::path& path, std::vector<std::string>* names = nullptr);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// Shortest round-trippable decimal rendering of a double; used everywhere a
// floating value lands in a text artifact so reruns are byte-identical.
std::string format_double(double v);

// FNV-1a over bytes; used for input-cache fingerprints.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 1469598103934665603ULL);
std::uint64_t hash_file(const std::filesystem::path& path, std::uint64_t seed = 1469598103934665603ULL);
std::uint64_t hash_string(const std::string& s, std::uint64_t seed = 1469598103934665603ULL);

} // namespace io
} // namespace coexmap

#endif
