#pragma once

#include <chrono>
#include <cstddef>
#include <string>
#include <vector>

#include "msce/types.hpp"

namespace msce::geo {

inline constexpr double kEarthRadiusKm = 6371.0;

using TimePoint = std::chrono::sys_seconds;

// Latitude in [-90, 90]; longitude normalized into (-180, 180].
class GeoPoint {
 public:
  GeoPoint() = default;
  // Throws std::invalid_argument for non-finite input or |lat| > 90.
  GeoPoint(double lat_deg, double lon_deg);

  double lat_deg() const { return lat_; }
  double lon_deg() const { return lon_; }

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;

 private:
  double lat_ = 0.0;
  double lon_ = 0.0;
};

// Spherical law of cosines on a sphere of radius 6371 km.
double great_circle_distance(const GeoPoint& a, const GeoPoint& b);

// Ordered registration locations r_0 ... r_p.
class Transect {
 public:
  // Validates: at least two points, strictly increasing distance from r_0,
  // consecutive spacings equal within 1 % relative.
  explicit Transect(std::vector<GeoPoint> points);

  const std::vector<GeoPoint>& points() const { return points_; }
  std::size_t size() const { return points_.size(); }
  // Number of remote locations, p.
  std::size_t remote_count() const { return points_.size() - 1; }
  // dist(r_0, r_j), j = 0..p
  const VectorXd& distances_km() const { return distances_; }
  // dist(r_j, r_j') for all pairs.
  MatrixXd pairwise_km() const;

 private:
  std::vector<GeoPoint> points_;
  VectorXd distances_;
};

// Equally spaced points along the great circle from start to end.
// Throws std::invalid_argument for n_points < 2 or coincident/antipodal ends.
Transect build_transect(const GeoPoint& start, const GeoPoint& end, std::size_t n_points);

struct TrackObservation {
  TimePoint time;
  GeoPoint location;
  double value = 0.0;
  double direction_deg = 360.0;  // (0, 360]
};

// Observations sharing one track identifier (a satellite pass or a
// hindcast time slice).
struct Pass {
  std::string id;
  std::vector<TrackObservation> observations;

  // Earliest observation time; passes must be non-empty.
  TimePoint time() const;
};

struct RegisteredEvent {
  TimePoint time;
  double season_deg = 360.0;
  // Indexed [k * (p + 1) + j] for quantity k and location j.
  std::vector<double> values;
  std::vector<double> directions;
};

struct RegisteredDataset {
  std::vector<std::string> quantities;
  Transect transect;
  std::vector<RegisteredEvent> events;

  std::size_t quantity_count() const { return quantities.size(); }
  std::size_t location_count() const { return transect.size(); }
  std::size_t slot(std::size_t k, std::size_t j) const { return k * location_count() + j; }
};

struct RegistrationOptions {
  double max_dist_km = 50.0;
  // Secondary quantities are taken from the pass nearest in time within
  // this tolerance of the conditioning pass.
  double time_window_hours = 2.0;
};

struct RegistrationReport {
  std::size_t input_passes = 0;
  std::size_t accepted = 0;
  std::size_t rejected_distance = 0;
  std::size_t dropped_incomplete = 0;
  std::size_t skipped_empty = 0;
  // Largest matched distance of every accepted event, in event order.
  std::vector<double> max_matched_km;
};

struct Registration {
  RegisteredDataset dataset;
  RegistrationReport report;
};

// Index of the observation nearest to `site`, with its distance.
struct NearestMatch {
  std::size_t index = 0;
  double distance_km = 0.0;
};
NearestMatch nearest_observation(const GeoPoint& site, const std::vector<TrackObservation>& obs);

// tracks[0] holds the conditioning quantity; its accepted passes define the
// events. Remaining quantities are matched at those event times. Output is
// sorted by event time.
Registration register_events(const std::vector<std::vector<Pass>>& tracks,
                             const std::vector<std::string>& quantity_names,
                             const Transect& transect, const RegistrationOptions& options = {});

// Day of year mapped linearly on to (0, 360].
double season_degrees(TimePoint t);

// "YYYY-MM-DDTHH:MM:SS[Z]" (seconds optional).
TimePoint parse_iso8601(const std::string& text);
std::string format_iso8601(TimePoint t);

}  // namespace msce::geo
