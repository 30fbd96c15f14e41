#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "helpers.hpp"
#include "stgp/data.hpp"
#include "stgp/forecast.hpp"
#include "stgp/posterior.hpp"

using namespace stgp;

namespace {

struct temp_dir {
  std::filesystem::path path;
  explicit temp_dir(const std::string& name) : path(name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~temp_dir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

void write_fixture(const temp_dir& dir, bool static_pop = false, bool bad_id = false) {
  write_file(dir.file("counts.csv"), std::string("location_id,week,count\n") +
                                         "A,1,3\n"
                                         "A,2,0\n"
                                         "A,3,5\n"
                                         "B,1,2\n" +
                                         (bad_id ? "X99,2,4\n" : "B,2,4\n") + "B,3,1\n");
  write_file(dir.file("locations.csv"), "location_id,lon,lat\nA,0.5,1.5\nB,2.0,0.25\n");
  if (static_pop)
    write_file(dir.file("population.csv"), "location_id,population\nA,1000\nB,2000\n");
  else
    write_file(dir.file("population.csv"), "location_id,week,population\n"
                                           "A,1,1000\nA,2,1000\nA,3,1100\n"
                                           "B,1,2000\nB,2,2000\nB,3,2000\n");
}

dataset load_fixture(const temp_dir& dir) {
  return load_dataset(dir.file("counts.csv"), dir.file("locations.csv"),
                      dir.file("population.csv"));
}

} // namespace

TEST_CASE("panel loader assembles counts, coordinates and exposure", "[data]") {
  temp_dir dir("data_tmp_load");
  write_fixture(dir);
  const dataset d = load_fixture(dir);

  REQUIRE(d.n_locations() == 2);
  REQUIRE(d.n_weeks() == 3);
  CHECK(d.weeks == std::vector<int>{1, 2, 3});
  CHECK(d.locations[0].id == "A");
  CHECK(d.locations[1].lon == 2.0);
  CHECK(d.counts(0, 0) == 3);
  CHECK(d.counts(1, 2) == 1);
  CHECK(d.observed.all());
  CHECK(d.populations(0, 2) == 1100.0);
  CHECK(d.total_counts() == 15);
  CHECK(d.observed_cells().size() == 6);
}

TEST_CASE("missing cells stay masked rather than imputed", "[data]") {
  temp_dir dir("data_tmp_mask");
  write_fixture(dir);
  // drop one row
  write_file(dir.file("counts.csv"), "location_id,week,count\n"
                                     "A,1,3\nA,3,5\nB,1,2\nB,2,4\nB,3,1\n");
  const dataset d = load_fixture(dir);
  CHECK_FALSE(d.observed(0, 1));
  CHECK(d.observed_cells().size() == 5);
  CHECK(d.total_counts() == 15);
}

TEST_CASE("counts for unknown locations are named in the error", "[data]") {
  temp_dir dir("data_tmp_badid");
  write_fixture(dir, false, true);
  try {
    load_fixture(dir);
    FAIL("expected a validation error");
  } catch (const validation_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("X99") != std::string::npos);
    CHECK(msg.find("counts.csv") != std::string::npos);
  }
}

TEST_CASE("static population broadcasts across weeks", "[data]") {
  temp_dir dir("data_tmp_static");
  write_fixture(dir, true);
  const dataset d = load_fixture(dir);
  for (Eigen::Index j = 0; j < d.n_weeks(); ++j) {
    CHECK(d.populations(0, j) == 1000.0);
    CHECK(d.populations(1, j) == 2000.0);
  }
}

TEST_CASE("save and reload preserves the panel bit for bit", "[data]") {
  temp_dir dir("data_tmp_round");
  dataset d = testutil::tiny_panel(4, 9);
  d.observed(2, 3) = false;
  save_dataset(d, dir.file("c.csv"), dir.file("l.csv"), dir.file("p.csv"));
  const dataset back = load_dataset(dir.file("c.csv"), dir.file("l.csv"), dir.file("p.csv"));

  CHECK(back.weeks == d.weeks);
  REQUIRE(back.n_locations() == d.n_locations());
  for (Eigen::Index i = 0; i < d.n_locations(); ++i) {
    CHECK(back.locations[static_cast<std::size_t>(i)].id ==
          d.locations[static_cast<std::size_t>(i)].id);
    for (Eigen::Index j = 0; j < d.n_weeks(); ++j) {
      CHECK(back.observed(i, j) == d.observed(i, j));
      if (d.observed(i, j)) CHECK(back.counts(i, j) == d.counts(i, j));
      CHECK(back.populations(i, j) == d.populations(i, j));
    }
  }
  CHECK(dataset_hash(back) == dataset_hash(d));

  dataset changed = d;
  changed.counts(0, 0) += 1;
  CHECK(dataset_hash(changed) != dataset_hash(d));
}

TEST_CASE("chronological split peels off the final weeks", "[data]") {
  dataset d = testutil::tiny_panel(3, 104);
  const auto [train, test] = train_test_split(d, 4);
  CHECK(train.n_weeks() == 100);
  CHECK(test.n_weeks() == 4);
  CHECK(train.weeks.back() == 100);
  CHECK(test.weeks.front() == 101);
  CHECK(test.counts(1, 0) == d.counts(1, 100));

  const auto [all, none] = train_test_split(d, 0);
  CHECK(all.n_weeks() == 104);
  CHECK(none.n_weeks() == 0);

  CHECK_THROWS_AS(train_test_split(d, -1), validation_error);
  CHECK_THROWS_AS(train_test_split(d, 104), validation_error);
}

TEST_CASE("posterior sample files round-trip with chain structure", "[data]") {
  temp_dir dir("data_tmp_samples");
  posterior_samples s;
  s.names = {"len_time", "sigma_time", "v[0]"};
  Eigen::MatrixXd c0(3, 3), c1(3, 3);
  c0 << 1.5, 0.5, -0.25, 1.6, 0.55, 0.0, 1.7, 0.6, 0.125;
  c1 = c0.array() + 0.01;
  s.chains = {c0, c1};

  const std::string path = dir.file("samples.csv");
  write_samples_csv(path, s);
  const posterior_samples back = read_samples_csv(path);
  REQUIRE(back.n_chains() == 2);
  REQUIRE(back.n_draws() == 3);
  CHECK(back.names == s.names);
  CHECK(back.chains[0] == c0);
  CHECK(back.chains[1] == c1);

  // header must announce chain and iteration columns
  write_file(path, "chain,step,len_time\n0,0,1.0\n");
  CHECK_THROWS_AS(read_samples_csv(path), validation_error);
  // iterations must be contiguous from zero
  write_file(path, "chain,iteration,len_time\n0,0,1.0\n0,2,1.1\n");
  CHECK_THROWS_AS(read_samples_csv(path), validation_error);
  // ragged chains are rejected
  write_file(path, "chain,iteration,len_time\n0,0,1.0\n0,1,1.1\n1,0,0.9\n");
  CHECK_THROWS_AS(read_samples_csv(path), validation_error);
}

TEST_CASE("forecast exports use the pinned header and valid geometry", "[data]") {
  temp_dir dir("data_tmp_forecast");
  forecast_result fc;
  fc.location_ids = {"A", "B"};
  fc.weeks = {27, 28};
  fc.count_draws.setZero(4, 4);
  fc.q025.setConstant(4, 1.0);
  fc.q50.setConstant(4, 2.0);
  fc.q975.setConstant(4, 9.0);
  fc.mean.setConstant(4, 3.25);

  write_forecast_csv(dir.file("forecast.csv"), fc);
  std::ifstream in(dir.file("forecast.csv"));
  std::string header, row;
  std::getline(in, header);
  CHECK(header == "location_id,week,q02.5,q50,q97.5,mean");
  int rows = 0;
  while (std::getline(in, row))
    if (!row.empty()) ++rows;
  CHECK(rows == 4);

  const std::vector<location> locs = {{"A", 0.5, 1.5}, {"B", 2.0, 0.25}};
  write_forecast_geojson(dir.file("forecast.geojson"), fc, locs);
  std::ifstream gin(dir.file("forecast.geojson"));
  nlohmann::json gj;
  gin >> gj;
  REQUIRE(gj["type"] == "FeatureCollection");
  REQUIRE(gj["features"].size() == 4);
  const auto& f0 = gj["features"][0];
  CHECK(f0["type"] == "Feature");
  CHECK(f0["geometry"]["type"] == "Point");
  CHECK(f0["geometry"]["coordinates"][0] == 0.5);
  CHECK(f0["geometry"]["coordinates"][1] == 1.5);
  CHECK(f0["properties"]["location_id"] == "A");
  CHECK(f0["properties"]["week"] == 27);
  CHECK(f0["properties"]["q50"] == 2.0);

  const std::vector<location> wrong = {{"A", 0.0, 0.0}};
  CHECK_THROWS_AS(write_forecast_geojson(dir.file("x.geojson"), fc, wrong), validation_error);
}
