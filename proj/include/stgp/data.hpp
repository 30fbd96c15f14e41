#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stgp/errors.hpp"
#include "stgp/util.hpp"

namespace stgp {

// Aligned panel of counts, coordinates and populations. Matrices are
// locations x weeks; cells absent from the counts file are masked out and
// excluded from the likelihood rather than imputed as zero.

struct location {
  std::string id;
  double lon = 0.0;
  double lat = 0.0;
};

struct cell_index {
  int loc;  // row into locations
  int week; // column into weeks
};

struct dataset {
  std::vector<location> locations;
  std::vector<int> weeks; // sorted, distinct
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> observed;
  Eigen::MatrixXd populations;

  Eigen::Index n_locations() const { return static_cast<Eigen::Index>(locations.size()); }
  Eigen::Index n_weeks() const { return static_cast<Eigen::Index>(weeks.size()); }

  // Observed cells in location-major order; the canonical cell ordering used
  // by latent vectors, log-likelihood matrices and scoring.
  std::vector<cell_index> observed_cells() const {
    std::vector<cell_index> cells;
    for (Eigen::Index i = 0; i < n_locations(); ++i)
      for (Eigen::Index j = 0; j < n_weeks(); ++j)
        if (observed(i, j)) cells.push_back({static_cast<int>(i), static_cast<int>(j)});
    return cells;
  }

  std::int64_t total_counts() const {
    std::int64_t s = 0;
    for (Eigen::Index i = 0; i < n_locations(); ++i)
      for (Eigen::Index j = 0; j < n_weeks(); ++j)
        if (observed(i, j)) s += counts(i, j);
    return s;
  }
};

// Space-time input rows (week, lon, lat) for a list of cells.
inline Eigen::MatrixXd build_inputs(const dataset& d, const std::vector<cell_index>& cells) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(cells.size()), 3);
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& cell = cells[c];
    X(static_cast<Eigen::Index>(c), 0) = static_cast<double>(d.weeks[static_cast<std::size_t>(cell.week)]);
    X(static_cast<Eigen::Index>(c), 1) = d.locations[static_cast<std::size_t>(cell.loc)].lon;
    X(static_cast<Eigen::Index>(c), 2) = d.locations[static_cast<std::size_t>(cell.loc)].lat;
  }
  return X;
}

namespace detail {

struct csv_table {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows; // row r corresponds to line r+2
};

inline std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline csv_table read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw validation_error(path + ": cannot open file");
  csv_table t;
  t.path = path;
  std::string line;
  if (!std::getline(in, line)) throw validation_error(path + ": empty file");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    t.rows.push_back(split_csv_line(line));
  }
  return t;
}

inline void expect_header(const csv_table& t, const std::vector<std::string>& expected) {
  if (t.header != expected) {
    std::string want;
    for (std::size_t i = 0; i < expected.size(); ++i) want += (i ? "," : "") + expected[i];
    std::string got;
    for (std::size_t i = 0; i < t.header.size(); ++i) got += (i ? "," : "") + t.header[i];
    throw validation_error(t.path + ": expected header '" + want + "', got '" + got + "'");
  }
}

inline std::string row_context(const csv_table& t, std::size_t row) {
  return t.path + ":" + std::to_string(row + 2);
}

inline std::int64_t parse_int(const csv_table& t, std::size_t row, std::size_t col) {
  const std::string& s = t.rows[row][col];
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw validation_error(row_context(t, row) + ": '" + s + "' is not an integer");
  return v;
}

inline double parse_double(const csv_table& t, std::size_t row, std::size_t col) {
  const std::string& s = t.rows[row][col];
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw validation_error(row_context(t, row) + ": '" + s + "' is not a number");
  return v;
}

inline void expect_cols(const csv_table& t, std::size_t row, std::size_t n) {
  if (t.rows[row].size() != n)
    throw validation_error(row_context(t, row) + ": expected " + std::to_string(n) +
                           " fields, got " + std::to_string(t.rows[row].size()));
}

} // namespace detail

// Reads the three-file dataset schema:
//   locations.csv  location_id,lon,lat
//   counts.csv     location_id,week,count
//   population.csv location_id,population            (static, broadcast)
//                  location_id,week,population       (time-varying)
inline dataset load_dataset(const std::string& counts_path, const std::string& locations_path,
                            const std::string& population_path) {
  using namespace detail;

  dataset d;

  csv_table locs = read_csv(locations_path);
  expect_header(locs, {"location_id", "lon", "lat"});
  std::map<std::string, int> loc_index;
  for (std::size_t r = 0; r < locs.rows.size(); ++r) {
    expect_cols(locs, r, 3);
    location L;
    L.id = locs.rows[r][0];
    if (L.id.empty()) throw validation_error(row_context(locs, r) + ": empty location_id");
    L.lon = parse_double(locs, r, 1);
    L.lat = parse_double(locs, r, 2);
    if (!std::isfinite(L.lon) || !std::isfinite(L.lat))
      throw validation_error(row_context(locs, r) + ": non-finite coordinate");
    if (!loc_index.emplace(L.id, static_cast<int>(d.locations.size())).second)
      throw validation_error(row_context(locs, r) + ": duplicate location_id '" + L.id + "'");
    d.locations.push_back(L);
  }
  if (d.locations.empty()) throw validation_error(locations_path + ": no locations");

  csv_table cnt = read_csv(counts_path);
  expect_header(cnt, {"location_id", "week", "count"});
  std::set<int> week_set;
  struct raw_count {
    int loc;
    int week;
    std::int64_t count;
  };
  std::vector<raw_count> raw;
  for (std::size_t r = 0; r < cnt.rows.size(); ++r) {
    expect_cols(cnt, r, 3);
    const std::string& id = cnt.rows[r][0];
    const auto it = loc_index.find(id);
    if (it == loc_index.end())
      throw validation_error(row_context(cnt, r) + ": unknown location_id '" + id + "'");
    const std::int64_t week = parse_int(cnt, r, 1);
    const std::int64_t y = parse_int(cnt, r, 2);
    if (y < 0) throw validation_error(row_context(cnt, r) + ": negative count");
    week_set.insert(static_cast<int>(week));
    raw.push_back({it->second, static_cast<int>(week), y});
  }
  if (raw.empty()) throw validation_error(counts_path + ": no count rows");
  d.weeks.assign(week_set.begin(), week_set.end());

  const Eigen::Index L = d.n_locations();
  const Eigen::Index W = d.n_weeks();
  d.counts.setZero(L, W);
  d.observed.setConstant(L, W, false);
  std::map<int, int> week_index;
  for (std::size_t j = 0; j < d.weeks.size(); ++j) week_index[d.weeks[j]] = static_cast<int>(j);
  for (const auto& rc : raw) {
    const int j = week_index.at(rc.week);
    if (d.observed(rc.loc, j))
      throw validation_error(counts_path + ": duplicate cell (location '" +
                             d.locations[static_cast<std::size_t>(rc.loc)].id + "', week " +
                             std::to_string(rc.week) + ")");
    d.counts(rc.loc, j) = rc.count;
    d.observed(rc.loc, j) = true;
  }

  csv_table pop = read_csv(population_path);
  d.populations.setZero(L, W);
  if (pop.header == std::vector<std::string>{"location_id", "population"}) {
    std::vector<bool> seen(static_cast<std::size_t>(L), false);
    for (std::size_t r = 0; r < pop.rows.size(); ++r) {
      expect_cols(pop, r, 2);
      const auto it = loc_index.find(pop.rows[r][0]);
      if (it == loc_index.end())
        throw validation_error(row_context(pop, r) + ": unknown location_id '" + pop.rows[r][0] + "'");
      const double p = parse_double(pop, r, 1);
      if (!(p > 0.0)) throw validation_error(row_context(pop, r) + ": population must be positive");
      if (seen[static_cast<std::size_t>(it->second)])
        throw validation_error(row_context(pop, r) + ": duplicate population for '" + pop.rows[r][0] + "'");
      seen[static_cast<std::size_t>(it->second)] = true;
      d.populations.row(it->second).setConstant(p);
    }
    for (Eigen::Index i = 0; i < L; ++i)
      if (!seen[static_cast<std::size_t>(i)])
        throw validation_error(population_path + ": no population for location '" +
                               d.locations[static_cast<std::size_t>(i)].id + "'");
  } else if (pop.header == std::vector<std::string>{"location_id", "week", "population"}) {
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> seen(L, W);
    seen.setConstant(false);
    for (std::size_t r = 0; r < pop.rows.size(); ++r) {
      expect_cols(pop, r, 3);
      const auto it = loc_index.find(pop.rows[r][0]);
      if (it == loc_index.end())
        throw validation_error(row_context(pop, r) + ": unknown location_id '" + pop.rows[r][0] + "'");
      const std::int64_t week = parse_int(pop, r, 1);
      const auto wit = week_index.find(static_cast<int>(week));
      if (wit == week_index.end()) continue; // weeks outside the count panel are ignored
      const double p = parse_double(pop, r, 2);
      if (!(p > 0.0)) throw validation_error(row_context(pop, r) + ": population must be positive");
      d.populations(it->second, wit->second) = p;
      seen(it->second, wit->second) = true;
    }
    for (Eigen::Index i = 0; i < L; ++i)
      for (Eigen::Index j = 0; j < W; ++j)
        if (!seen(i, j))
          throw validation_error(population_path + ": no population for location '" +
                                 d.locations[static_cast<std::size_t>(i)].id + "' week " +
                                 std::to_string(d.weeks[static_cast<std::size_t>(j)]));
  } else {
    throw validation_error(population_path +
                           ": expected header 'location_id,population' or 'location_id,week,population'");
  }

  return d;
}

inline void save_dataset(const dataset& d, const std::string& counts_path,
                         const std::string& locations_path, const std::string& population_path) {
  {
    std::ofstream out(locations_path);
    if (!out) throw validation_error(locations_path + ": cannot write");
    out << "location_id,lon,lat\n";
    for (const auto& L : d.locations)
      out << L.id << ',' << format_double(L.lon) << ',' << format_double(L.lat) << '\n';
  }
  {
    std::ofstream out(counts_path);
    if (!out) throw validation_error(counts_path + ": cannot write");
    out << "location_id,week,count\n";
    for (Eigen::Index i = 0; i < d.n_locations(); ++i)
      for (Eigen::Index j = 0; j < d.n_weeks(); ++j)
        if (d.observed(i, j))
          out << d.locations[static_cast<std::size_t>(i)].id << ',' << d.weeks[static_cast<std::size_t>(j)]
              << ',' << d.counts(i, j) << '\n';
  }
  {
    std::ofstream out(population_path);
    if (!out) throw validation_error(population_path + ": cannot write");
    bool static_pop = true;
    for (Eigen::Index i = 0; i < d.n_locations() && static_pop; ++i)
      for (Eigen::Index j = 1; j < d.n_weeks(); ++j)
        if (d.populations(i, j) != d.populations(i, 0)) {
          static_pop = false;
          break;
        }
    if (static_pop) {
      out << "location_id,population\n";
      for (Eigen::Index i = 0; i < d.n_locations(); ++i)
        out << d.locations[static_cast<std::size_t>(i)].id << ',' << format_double(d.populations(i, 0))
            << '\n';
    } else {
      out << "location_id,week,population\n";
      for (Eigen::Index i = 0; i < d.n_locations(); ++i)
        for (Eigen::Index j = 0; j < d.n_weeks(); ++j)
          out << d.locations[static_cast<std::size_t>(i)].id << ','
              << d.weeks[static_cast<std::size_t>(j)] << ',' << format_double(d.populations(i, j))
              << '\n';
    }
  }
}

// Last `horizon` weeks become the held-out panel; cells partition exactly.
inline std::pair<dataset, dataset> train_test_split(const dataset& d, int horizon) {
  if (horizon < 0) throw validation_error("train_test_split: negative horizon");
  if (horizon >= d.n_weeks())
    throw validation_error("train_test_split: horizon " + std::to_string(horizon) +
                           " must be smaller than the " + std::to_string(d.n_weeks()) + "-week panel");
  const Eigen::Index W = d.n_weeks();
  const Eigen::Index Wtr = W - horizon;

  auto take = [&](Eigen::Index j0, Eigen::Index nw) {
    dataset out;
    out.locations = d.locations;
    out.weeks.assign(d.weeks.begin() + j0, d.weeks.begin() + j0 + nw);
    out.counts = d.counts.middleCols(j0, nw);
    out.observed = d.observed.middleCols(j0, nw);
    out.populations = d.populations.middleCols(j0, nw);
    return out;
  };

  return {take(0, Wtr), take(Wtr, static_cast<Eigen::Index>(horizon))};
}

// Canonical content serialization; hashed into manifests so artifacts can be
// checked against the dataset they came from.
inline std::uint64_t dataset_hash(const dataset& d) {
  std::ostringstream s;
  s << "locations\n";
  for (const auto& L : d.locations)
    s << L.id << ',' << format_double(L.lon) << ',' << format_double(L.lat) << '\n';
  s << "weeks\n";
  for (int w : d.weeks) s << w << '\n';
  s << "cells\n";
  for (Eigen::Index i = 0; i < d.n_locations(); ++i)
    for (Eigen::Index j = 0; j < d.n_weeks(); ++j) {
      if (d.observed(i, j))
        s << i << ',' << j << ',' << d.counts(i, j) << ',' << format_double(d.populations(i, j)) << '\n';
      else
        s << i << ',' << j << ",-," << format_double(d.populations(i, j)) << '\n';
    }
  return fnv1a(s.str());
}

} // namespace stgp
