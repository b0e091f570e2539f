#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msce/geo.hpp"

namespace msce::io {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column; throws InputError naming the file when absent.
  std::size_t column(const std::string& name) const;
  std::string source;
};

// Comma-separated, no quoting. Every data row must have as many fields as
// the header; errors name the 1-based data row.
CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(const std::string& text, const std::string& source);

double parse_double(const std::string& field, std::size_t row, const std::string& column);

// Shortest representation that round-trips.
std::string format_double(double v);

std::string read_file(const std::filesystem::path& path);
// Writes to a temporary sibling then renames over the target.
void write_atomic(const std::filesystem::path& path, const std::string& content);
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

// Track CSV: pass_id,time_iso8601,lat,lon,value,direction. Passes keep the
// order of their first appearance.
std::vector<geo::Pass> read_tracks(const std::filesystem::path& path);
std::string tracks_csv(const std::vector<geo::Pass>& passes);

// Registered CSV: time_iso8601,season_deg, then q{k}_loc{j}_value and
// q{k}_loc{j}_dir for k = 1..m (outer) and j = 0..p.
std::string registered_csv(const geo::RegisteredDataset& data);
geo::RegisteredDataset read_registered(const std::filesystem::path& path, const geo::Transect& transect,
                                       const std::vector<std::string>& quantities);

}  // namespace msce::io
