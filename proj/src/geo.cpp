#include "msce/geo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "msce/log.hpp"

namespace msce::geo {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Unit3 {
  double x, y, z;
};

Unit3 to_unit(const GeoPoint& p) {
  const double la = p.lat_deg() * kDeg, lo = p.lon_deg() * kDeg;
  return {std::cos(la) * std::cos(lo), std::cos(la) * std::sin(lo), std::sin(la)};
}

GeoPoint from_unit(const Unit3& u) {
  const double n = std::sqrt(u.x * u.x + u.y * u.y + u.z * u.z);
  const double lat = std::asin(std::clamp(u.z / n, -1.0, 1.0)) / kDeg;
  const double lon = std::atan2(u.y, u.x) / kDeg;
  return GeoPoint(lat, lon);
}

}  // namespace

GeoPoint::GeoPoint(double lat_deg, double lon_deg) {
  if (!std::isfinite(lat_deg) || !std::isfinite(lon_deg))
    throw std::invalid_argument("GeoPoint: coordinates must be finite");
  if (lat_deg < -90.0 || lat_deg > 90.0)
    throw std::invalid_argument("GeoPoint: latitude outside [-90, 90]");
  double lon = std::fmod(lon_deg, 360.0);
  if (lon <= -180.0) lon += 360.0;
  if (lon > 180.0) lon -= 360.0;
  lat_ = lat_deg;
  lon_ = lon;
}

double great_circle_distance(const GeoPoint& a, const GeoPoint& b) {
  const double pa = a.lat_deg() * kDeg, pb = b.lat_deg() * kDeg;
  const double dl = (b.lon_deg() - a.lon_deg()) * kDeg;
  const double c = std::sin(pa) * std::sin(pb) + std::cos(pa) * std::cos(pb) * std::cos(dl);
  return kEarthRadiusKm * std::acos(std::clamp(c, -1.0, 1.0));
}

Transect::Transect(std::vector<GeoPoint> points) : points_(std::move(points)) {
  if (points_.size() < 2) throw std::invalid_argument("Transect: need at least two points");
  distances_.resize(static_cast<Eigen::Index>(points_.size()));
  for (std::size_t j = 0; j < points_.size(); ++j)
    distances_(static_cast<Eigen::Index>(j)) = great_circle_distance(points_.front(), points_[j]);
  for (Eigen::Index j = 1; j < distances_.size(); ++j)
    if (!(distances_(j) > distances_(j - 1)))
      throw std::invalid_argument("Transect: distances from r_0 must be strictly increasing");
  const double mean_spacing = distances_(distances_.size() - 1) / static_cast<double>(distances_.size() - 1);
  for (std::size_t j = 1; j < points_.size(); ++j) {
    const double s = great_circle_distance(points_[j - 1], points_[j]);
    if (std::abs(s - mean_spacing) > 0.01 * mean_spacing)
      throw std::invalid_argument("Transect: registration locations are not equally spaced");
  }
}

MatrixXd Transect::pairwise_km() const {
  const auto n = static_cast<Eigen::Index>(points_.size());
  MatrixXd d = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      d(i, j) = d(j, i) = great_circle_distance(points_[static_cast<std::size_t>(i)],
                                                points_[static_cast<std::size_t>(j)]);
  return d;
}

Transect build_transect(const GeoPoint& start, const GeoPoint& end, std::size_t n_points) {
  if (n_points < 2) throw std::invalid_argument("build_transect: n_points must be at least 2");
  const Unit3 a = to_unit(start), b = to_unit(end);
  const double dot = std::clamp(a.x * b.x + a.y * b.y + a.z * b.z, -1.0, 1.0);
  const double omega = std::acos(dot);
  if (omega < 1e-9) throw std::invalid_argument("build_transect: coincident endpoints");
  if (std::numbers::pi - omega < 1e-9) throw std::invalid_argument("build_transect: antipodal endpoints");
  const double so = std::sin(omega);
  std::vector<GeoPoint> pts;
  pts.reserve(n_points);
  pts.push_back(start);
  for (std::size_t i = 1; i + 1 < n_points; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n_points - 1);
    const double wa = std::sin((1.0 - t) * omega) / so, wb = std::sin(t * omega) / so;
    pts.push_back(from_unit({wa * a.x + wb * b.x, wa * a.y + wb * b.y, wa * a.z + wb * b.z}));
  }
  pts.push_back(end);
  return Transect(std::move(pts));
}

TimePoint Pass::time() const {
  if (observations.empty()) throw std::invalid_argument("Pass::time: empty pass");
  TimePoint t = observations.front().time;
  for (const auto& o : observations) t = std::min(t, o.time);
  return t;
}

NearestMatch nearest_observation(const GeoPoint& site, const std::vector<TrackObservation>& obs) {
  NearestMatch best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double d = great_circle_distance(site, obs[i].location);
    if (d < best.distance_km) best = {i, d};
  }
  return best;
}

namespace {

struct MatchedPass {
  std::vector<double> values, directions;
  double max_km = 0.0;
};

MatchedPass match_pass(const Pass& pass, const Transect& transect) {
  MatchedPass m;
  for (const auto& site : transect.points()) {
    const NearestMatch nm = nearest_observation(site, pass.observations);
    m.values.push_back(pass.observations[nm.index].value);
    m.directions.push_back(pass.observations[nm.index].direction_deg);
    m.max_km = std::max(m.max_km, nm.distance_km);
  }
  return m;
}

}  // namespace

Registration register_events(const std::vector<std::vector<Pass>>& tracks,
                             const std::vector<std::string>& quantity_names,
                             const Transect& transect, const RegistrationOptions& options) {
  if (!(options.max_dist_km > 0.0)) throw std::invalid_argument("register_events: max_dist_km must be positive");
  if (tracks.empty()) throw std::invalid_argument("register_events: no quantities supplied");
  if (quantity_names.size() != tracks.size())
    throw std::invalid_argument("register_events: quantity name count does not match track sets");

  Registration out{RegisteredDataset{quantity_names, transect, {}}, {}};
  RegistrationReport& rep = out.report;
  const std::size_t n_loc = transect.size();
  const std::size_t m = tracks.size();
  const auto window = std::chrono::duration<double, std::ratio<3600>>(options.time_window_hours);

  // Secondary passes sorted by time for nearest-time lookup.
  std::vector<std::vector<const Pass*>> secondary(m);
  for (std::size_t k = 1; k < m; ++k) {
    for (const auto& p : tracks[k])
      if (!p.observations.empty()) secondary[k].push_back(&p);
    std::stable_sort(secondary[k].begin(), secondary[k].end(),
                     [](const Pass* a, const Pass* b) { return a->time() < b->time(); });
  }

  struct Accepted {
    RegisteredEvent event;
    double max_km;
  };
  std::vector<Accepted> accepted;
  rep.input_passes = tracks[0].size();
  for (const Pass& pass : tracks[0]) {
    if (pass.observations.empty()) {
      ++rep.skipped_empty;
      continue;
    }
    MatchedPass primary = match_pass(pass, transect);
    if (primary.max_km > options.max_dist_km) {
      ++rep.rejected_distance;
      continue;
    }
    RegisteredEvent ev;
    ev.time = pass.time();
    ev.season_deg = season_degrees(ev.time);
    ev.values.assign(m * n_loc, std::numeric_limits<double>::quiet_NaN());
    ev.directions.assign(m * n_loc, std::numeric_limits<double>::quiet_NaN());
    std::copy(primary.values.begin(), primary.values.end(), ev.values.begin());
    std::copy(primary.directions.begin(), primary.directions.end(), ev.directions.begin());
    double max_km = primary.max_km;
    bool complete = true;
    for (std::size_t k = 1; k < m && complete; ++k) {
      const Pass* best = nullptr;
      double best_dt = std::numeric_limits<double>::infinity();
      for (const Pass* p : secondary[k]) {
        const double dt = std::abs(std::chrono::duration<double, std::ratio<3600>>(p->time() - ev.time).count());
        if (dt < best_dt) {
          best_dt = dt;
          best = p;
        }
      }
      if (best == nullptr || best_dt > window.count()) {
        complete = false;
        break;
      }
      MatchedPass sec = match_pass(*best, transect);
      if (sec.max_km > options.max_dist_km) {
        complete = false;
        break;
      }
      max_km = std::max(max_km, sec.max_km);
      std::copy(sec.values.begin(), sec.values.end(), ev.values.begin() + static_cast<std::ptrdiff_t>(k * n_loc));
      std::copy(sec.directions.begin(), sec.directions.end(),
                ev.directions.begin() + static_cast<std::ptrdiff_t>(k * n_loc));
    }
    if (complete) {
      for (double v : ev.values)
        if (!std::isfinite(v)) complete = false;
    }
    if (!complete) {
      ++rep.dropped_incomplete;
      continue;
    }
    accepted.push_back({std::move(ev), max_km});
  }
  std::stable_sort(accepted.begin(), accepted.end(),
                   [](const Accepted& a, const Accepted& b) { return a.event.time < b.event.time; });
  for (auto& a : accepted) {
    out.dataset.events.push_back(std::move(a.event));
    rep.max_matched_km.push_back(a.max_km);
  }
  rep.accepted = out.dataset.events.size();
  if (rep.skipped_empty > 0) log_warning("registration: skipped " + std::to_string(rep.skipped_empty) + " empty passes");
  if (rep.dropped_incomplete > 0)
    log_warning("registration: dropped " + std::to_string(rep.dropped_incomplete) + " incomplete events");
  return out;
}

double season_degrees(TimePoint t) {
  using namespace std::chrono;
  const auto day = floor<days>(t);
  const year_month_day ymd{day};
  const auto jan1 = sys_days{ymd.year() / January / 1};
  const double doy = static_cast<double>((day - jan1).count() + 1);
  const double year_len = ymd.year().is_leap() ? 366.0 : 365.0;
  return doy * 360.0 / year_len;
}

TimePoint parse_iso8601(const std::string& text) {
  using namespace std::chrono;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char tail[8] = {0};
  int n = std::sscanf(text.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%7s", &y, &mo, &d, &h, &mi, &s, tail);
  if (n < 5) {
    n = std::sscanf(text.c_str(), "%4d-%2d-%2d %2d:%2d:%2d%7s", &y, &mo, &d, &h, &mi, &s, tail);
    if (n < 5) throw std::invalid_argument("invalid ISO-8601 timestamp '" + text + "'");
  }
  if (n == 7 && std::string(tail) != "Z") throw std::invalid_argument("unsupported timezone in '" + text + "'");
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 60)
    throw std::invalid_argument("invalid ISO-8601 timestamp '" + text + "'");
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
}

std::string format_iso8601(TimePoint t) {
  using namespace std::chrono;
  const auto day = floor<days>(t);
  const year_month_day ymd{day};
  const hh_mm_ss hms{t - day};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                static_cast<int>(hms.seconds().count()));
  return buf;
}

}  // namespace msce::geo
