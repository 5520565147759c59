#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cli_io.hpp"
#include "test_support.hpp"

using namespace milforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("milforge_cli_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::vector<std::string>> read_csv(std::istream& in) {
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(ModelFile, RoundTripIsExactForEveryKind) {
  Rng rng(1);
  for (ModelKind kind : kAllModelKinds) {
    Model m = init_model(kind, 5, 3, 7, 4);
    for (auto& w : m.weights)
      for (auto& x : w.values()) x = rng.normal() * 1e-3 + x;  // non-representable decimals
    m.standardizer.mean = {0.1, -2.0, 1.0 / 3.0, 5.0, 0.0};
    m.standardizer.scale = {1.0, 0.7, 2.5, 1e-3, 1.0};
    std::stringstream buf;
    cli::write_model(buf, m);
    const Model back = cli::read_model(buf);
    EXPECT_EQ(back.kind, m.kind);
    EXPECT_EQ(back.feature_dim, 5u);
    EXPECT_EQ(back.channels, 3u);
    EXPECT_EQ(back.weights, m.weights);
    EXPECT_EQ(back.standardizer.mean, m.standardizer.mean);
    EXPECT_EQ(back.standardizer.scale, m.standardizer.scale);
  }
}

TEST(ModelFile, DocumentLayout) {
  const Model m{ModelKind::Max, 2, 1, {Matrix{{0.1, -3.0}}}, {}};
  std::stringstream buf;
  cli::write_model(buf, m);
  const auto j = nlohmann::json::parse(buf.str());
  EXPECT_EQ(j["format"], "milforge-model");
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["kind"], "max");
  EXPECT_EQ(j["weights"][0]["name"], "w");
  EXPECT_TRUE(j["standardizer"].is_null());
  EXPECT_NE(buf.str().find("0.10000000000000001"), std::string::npos);  // 17 significant digits
}

TEST(ModelFile, RejectsBadDocuments) {
  std::stringstream not_json("{nope");
  EXPECT_THROW(cli::read_model(not_json), Error);
  std::stringstream wrong_format(R"({"format":"other","version":1})");
  EXPECT_THROW(cli::read_model(wrong_format), Error);
  std::stringstream wrong_shape(
      R"({"format":"milforge-model","version":1,"kind":"max","feature_dim":2,"channels":1,)"
      R"("weights":[{"name":"w","rows":1,"cols":3,"values":[1,2,3]}],"standardizer":null})");
  EXPECT_THROW(cli::read_model(wrong_shape), DimensionError);
  std::stringstream missing(R"({"format":"milforge-model","version":1,"kind":"max"})");
  EXPECT_THROW(cli::read_model(missing), Error);
}

TEST(MinMax, Examples) {
  EXPECT_EQ(cli::minmax_rescale(std::vector<double>{1.0}), std::vector<double>{0.0});
  EXPECT_EQ(cli::minmax_rescale(std::vector<double>{0.3, 0.7}), (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(cli::minmax_rescale(std::vector<double>{0.25, 0.25, 0.25, 0.25}), std::vector<double>(4, 0.0));
  EXPECT_EQ(cli::minmax_rescale(std::vector<double>{2.0, 4.0, 3.0}), (std::vector<double>{0.0, 1.0, 0.5}));
}

TEST(AttentionCsv, SingleAndTwoInstanceBags) {
  Rng rng(2);
  const DsmilParams p = fixtures::random_dsmil(3, 1, rng);
  const Model m{ModelKind::Dsmil, 3, 1, p.to_list(), {}};
  MilDataset ds{"d", 2, 3, {}};
  ds.bags.push_back(fixtures::random_bag(1, 3, rng));
  ds.bags[0].bag_id = "one";
  ds.bags.push_back(Bag{"two", 0, Matrix{{1.0, 0.0, 0.0}, {0.0, 2.0, -1.0}}, {}});
  std::stringstream out;
  cli::write_attention_csv(out, m, ds);
  const auto rows = read_csv(out);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"bag_id", "instance_index", "raw_attention", "minmax_attention",
                                               "instance_score"}));
  EXPECT_EQ(rows[1][0], "one");
  EXPECT_EQ(std::stod(rows[1][2]), 1.0);
  EXPECT_EQ(std::stod(rows[1][3]), 0.0);
  const std::set<double> ends{std::stod(rows[2][3]), std::stod(rows[3][3])};
  EXPECT_EQ(ends, (std::set<double>{0.0, 1.0}));
  const ForwardTrace tr = dsmil_forward(p, ds.bags[1]);
  EXPECT_EQ(std::stod(rows[3][2]), tr.attention_weights(1, 0));
  EXPECT_EQ(std::stod(rows[3][4]), tr.instance_scores(1, 0));
}

TEST(AttentionCsv, UniformAttentionAndDimensionMismatch) {
  const Model mean{ModelKind::Mean, 2, 1, {Matrix{{1.0, 1.0}}}, {}};
  MilDataset ds{"d", 2, 2, {Bag{"b", 1, Matrix{{1.0, 0.0}, {0.0, 1.0}, {3.0, 3.0}}, {}}}};
  std::stringstream out;
  cli::write_attention_csv(out, mean, ds);
  const auto rows = read_csv(out);
  for (std::size_t r = 1; r < rows.size(); ++r) EXPECT_EQ(std::stod(rows[r][3]), 0.0);
  MilDataset wide{"d", 2, 3, {Bag{"b", 1, Matrix(2, 3), {}}}};
  EXPECT_THROW(cli::write_attention_csv(out, mean, wide), DimensionError);
}

TEST(Fingerprint, Sha256OfKnownContent) {
  const fs::path dir = scratch_dir("fp");
  std::ofstream(dir / "abc.txt", std::ios::binary) << "abc";
  EXPECT_EQ(cli::file_fingerprint(dir / "abc.txt"),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_THROW(cli::file_fingerprint(dir / "missing"), Error);
}

TEST(Report, EnvelopeCarriesVersionsAndRng) {
  const auto j = cli::report_envelope("train");
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_EQ(j["command"], "train");
  EXPECT_EQ(j["library_version"], std::string(kVersion));
  EXPECT_EQ(j["rng_algorithm"], std::string(Rng::kAlgorithm));
}
