#include "msce/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <system_error>
#include <unistd.h>

#include "msce/error.hpp"
#include "msce/rng.hpp"

namespace msce::io {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string slot_name(std::size_t k, std::size_t j, const char* what) {
  return "q" + std::to_string(k + 1) + "_loc" + std::to_string(j) + "_" + what;
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw InputError(source + ": missing column '" + name + "'");
}

CsvTable parse_csv(const std::string& text, const std::string& source) {
  CsvTable t;
  t.source = source;
  std::istringstream in(text);
  std::string line;
  bool have_header = false;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (!have_header) {
      t.header = split(line);
      have_header = true;
      continue;
    }
    ++row;
    auto fields = split(line);
    if (fields.size() != t.header.size())
      throw InputError(source + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                           " fields, expected " + std::to_string(t.header.size()),
                       row);
    t.rows.push_back(std::move(fields));
  }
  if (!have_header) throw InputError(source + ": empty file, expected a header row");
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(read_file(path), path.string()); }

double parse_double(const std::string& field, std::size_t row, const std::string& column) {
  double v = 0.0;
  const char* b = field.data();
  const char* e = b + field.size();
  const auto res = std::from_chars(b, e, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != e || !std::isfinite(v))
    throw InputError("row " + std::to_string(row) + ", column '" + column + "': '" + field + "' is not a finite number",
                     row);
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw InputError("failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a64(read_file(path)); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<geo::Pass> read_tracks(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.column("pass_id"), c_time = t.column("time_iso8601"), c_lat = t.column("lat"),
                    c_lon = t.column("lon"), c_val = t.column("value"), c_dir = t.column("direction");
  std::vector<geo::Pass> passes;
  std::map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& f = t.rows[r];
    const std::size_t row = r + 1;
    geo::TrackObservation obs;
    try {
      obs.time = geo::parse_iso8601(f[c_time]);
      obs.location = geo::GeoPoint(parse_double(f[c_lat], row, "lat"), parse_double(f[c_lon], row, "lon"));
    } catch (const InputError&) {
      throw;
    } catch (const std::exception& e) {
      throw InputError(path.string() + ": row " + std::to_string(row) + ": " + e.what(), row);
    }
    obs.value = parse_double(f[c_val], row, "value");
    obs.direction_deg = parse_double(f[c_dir], row, "direction");
    if (!(obs.direction_deg > 0.0 && obs.direction_deg <= 360.0))
      throw InputError(path.string() + ": row " + std::to_string(row) + ": direction outside (0, 360]", row);
    auto [it, fresh] = index.emplace(f[c_id], passes.size());
    if (fresh) passes.push_back({f[c_id], {}});
    passes[it->second].observations.push_back(obs);
  }
  return passes;
}

std::string tracks_csv(const std::vector<geo::Pass>& passes) {
  std::string s = "pass_id,time_iso8601,lat,lon,value,direction\n";
  for (const auto& p : passes)
    for (const auto& o : p.observations)
      s += p.id + ',' + geo::format_iso8601(o.time) + ',' + format_double(o.location.lat_deg()) + ',' +
           format_double(o.location.lon_deg()) + ',' + format_double(o.value) + ',' + format_double(o.direction_deg) + '\n';
  return s;
}

std::string registered_csv(const geo::RegisteredDataset& data) {
  const std::size_t m = data.quantity_count(), n_loc = data.location_count();
  std::string s = "time_iso8601,season_deg";
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t j = 0; j < n_loc; ++j) s += ',' + slot_name(k, j, "value") + ',' + slot_name(k, j, "dir");
  s += '\n';
  for (const auto& ev : data.events) {
    s += geo::format_iso8601(ev.time) + ',' + format_double(ev.season_deg);
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t j = 0; j < n_loc; ++j)
        s += ',' + format_double(ev.values[data.slot(k, j)]) + ',' + format_double(ev.directions[data.slot(k, j)]);
    s += '\n';
  }
  return s;
}

geo::RegisteredDataset read_registered(const std::filesystem::path& path, const geo::Transect& transect,
                                       const std::vector<std::string>& quantities) {
  const CsvTable t = read_csv(path);
  const std::size_t m = quantities.size(), n_loc = transect.size();
  std::vector<std::string> expected{"time_iso8601", "season_deg"};
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t j = 0; j < n_loc; ++j) {
      expected.push_back(slot_name(k, j, "value"));
      expected.push_back(slot_name(k, j, "dir"));
    }
  if (t.header != expected)
    throw InputError(path.string() + ": header does not match " + std::to_string(m) + " quantities at " +
                     std::to_string(n_loc) + " locations");
  geo::RegisteredDataset data{quantities, transect, {}};
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& f = t.rows[r];
    const std::size_t row = r + 1;
    geo::RegisteredEvent ev;
    try {
      ev.time = geo::parse_iso8601(f[0]);
    } catch (const std::exception& e) {
      throw InputError(path.string() + ": row " + std::to_string(row) + ": " + e.what(), row);
    }
    ev.season_deg = parse_double(f[1], row, "season_deg");
    ev.values.resize(m * n_loc);
    ev.directions.resize(m * n_loc);
    std::size_t c = 2;
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t j = 0; j < n_loc; ++j) {
        ev.values[data.slot(k, j)] = parse_double(f[c], row, t.header[c]);
        ++c;
        ev.directions[data.slot(k, j)] = parse_double(f[c], row, t.header[c]);
        ++c;
      }
    data.events.push_back(std::move(ev));
  }
  return data;
}

}  // namespace msce::io
