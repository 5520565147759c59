#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "milforge/error.hpp"
#include "milforge/matrix.hpp"
#include "milforge/rng.hpp"

namespace milforge {

using FeatureVector = std::vector<double>;

/// One instance with its (usually hidden) label.
struct Instance {
  FeatureVector features;
  std::optional<int> instance_label;
};

/// A labelled bag. Instance features are stored as the rows of an N x L
/// matrix; `instance_labels` is either empty or holds one 0/1 entry per row.
struct Bag {
  std::string bag_id;
  int label = 0;
  Matrix features;
  std::vector<int> instance_labels;

  std::size_t size() const noexcept { return features.rows(); }
  std::size_t feature_dim() const noexcept { return features.cols(); }
  bool has_instance_labels() const noexcept { return !instance_labels.empty(); }

  Instance instance(std::size_t i) const {
    const auto r = features.row_span(i);
    Instance out{FeatureVector(r.begin(), r.end()), std::nullopt};
    if (has_instance_labels()) out.instance_label = instance_labels[i];
    return out;
  }

  static Bag from_instances(std::string id, int label, const std::vector<Instance>& instances) {
    if (instances.empty()) throw InvalidArgument("bag '" + id + "' has no instances");
    const std::size_t dim = instances.front().features.size();
    Bag bag{std::move(id), label, Matrix(instances.size(), dim), {}};
    const bool labelled = instances.front().instance_label.has_value();
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const auto& inst = instances[i];
      if (inst.features.size() != dim) throw DimensionError("bag '" + bag.bag_id + "' mixes feature dimensions");
      std::copy(inst.features.begin(), inst.features.end(), bag.features.row_span(i).begin());
      if (inst.instance_label.has_value() != labelled)
        throw InvalidArgument("bag '" + bag.bag_id + "' mixes labelled and unlabelled instances");
      if (labelled) bag.instance_labels.push_back(*inst.instance_label);
    }
    return bag;
  }
};

/// Named collection of bags sharing one feature dimensionality.
///
/// `num_classes` counts classes (>= 2). Binary problems use a single output
/// channel holding the positive-class logit, so output_channels() is 1 when
/// num_classes == 2 and num_classes otherwise.
struct MilDataset {
  std::string name;
  int num_classes = 2;
  std::size_t feature_dim = 0;
  std::vector<Bag> bags;

  std::size_t output_channels() const noexcept {
    return num_classes <= 2 ? 1 : static_cast<std::size_t>(num_classes);
  }

  std::size_t num_instances() const noexcept {
    std::size_t n = 0;
    for (const auto& b : bags) n += b.size();
    return n;
  }

  /// Same metadata, bags picked by index in the given order.
  MilDataset subset(std::span<const std::size_t> indices) const {
    MilDataset out{name, num_classes, feature_dim, {}};
    out.bags.reserve(indices.size());
    for (std::size_t i : indices) out.bags.push_back(bags.at(i));
    return out;
  }
};

/// Throws if any dataset or bag invariant is violated.
inline void validate(const MilDataset& ds) {
  if (ds.num_classes < 2) throw InvalidArgument("num_classes must be >= 2");
  if (ds.feature_dim == 0) throw InvalidArgument("feature_dim must be > 0");
  for (const auto& bag : ds.bags) {
    if (bag.size() == 0) throw InvalidArgument("bag '" + bag.bag_id + "' has no instances");
    if (bag.feature_dim() != ds.feature_dim)
      throw DimensionError("bag '" + bag.bag_id + "' has feature dimension " + std::to_string(bag.feature_dim()) +
                           ", dataset expects " + std::to_string(ds.feature_dim));
    if (bag.label < 0 || bag.label >= ds.num_classes)
      throw InvalidArgument("bag '" + bag.bag_id + "' label out of range");
    if (!bag.features.all_finite()) throw NumericError("bag '" + bag.bag_id + "' has non-finite features");
    if (bag.has_instance_labels()) {
      if (bag.instance_labels.size() != bag.size())
        throw InvalidArgument("bag '" + bag.bag_id + "' instance label count mismatch");
      for (int y : bag.instance_labels)
        if (y != 0 && y != 1) throw InvalidArgument("bag '" + bag.bag_id + "' instance label not in {0,1}");
    }
  }
}

// ---------------------------------------------------------------------------
// MILCSV
//
//   bag_id,label,f0,...,f{L-1}[,@y]
//
// One instance per line, '#' starts a comment line, lines of one bag are
// contiguous and share the bag label.

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses MILCSV text. Bags appear in first-appearance order.
inline MilDataset parse_milcsv(std::istream& in, std::string name = "dataset") {
  MilDataset ds;
  ds.name = std::move(name);
  std::unordered_set<std::string> closed_ids;
  std::vector<Instance> pending;
  std::string pending_id;
  int pending_label = 0;
  std::size_t pending_first_line = 0;
  int max_label = 1;
  bool saw_row = false;

  auto flush = [&] {
    if (pending.empty()) return;
    try {
      ds.bags.push_back(Bag::from_instances(pending_id, pending_label, pending));
    } catch (const Error& e) {
      throw ParseError(pending_first_line, e.what());
    }
    closed_ids.insert(pending_id);
    pending.clear();
  };

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    saw_row = true;

    auto fields = detail::split_commas(line);
    std::optional<int> inst_label;
    if (fields.size() >= 3 && !fields.back().empty() && fields.back().front() == '@') {
      const auto y = detail::parse_int(fields.back().substr(1));
      if (!y || (*y != 0 && *y != 1)) throw ParseError(lineno, "instance label must be @0 or @1");
      inst_label = static_cast<int>(*y);
      fields.pop_back();
    }
    if (fields.size() < 3) throw ParseError(lineno, "malformed row: expected bag_id,label and at least one feature");
    if (fields[0].empty()) throw ParseError(lineno, "empty bag_id");

    const auto label = detail::parse_int(fields[1]);
    if (!label || *label < 0 || *label > 1'000'000) throw ParseError(lineno, "invalid bag label");

    FeatureVector features;
    features.reserve(fields.size() - 2);
    for (std::size_t i = 2; i < fields.size(); ++i) {
      const auto v = detail::parse_double(fields[i]);
      if (!v) throw ParseError(lineno, "non-numeric feature '" + std::string(fields[i]) + "'");
      if (!std::isfinite(*v)) throw ParseError(lineno, "non-finite feature");
      features.push_back(*v);
    }
    if (ds.feature_dim == 0) {
      ds.feature_dim = features.size();
    } else if (features.size() != ds.feature_dim) {
      throw ParseError(lineno, "inconsistent feature dimension");
    }

    const std::string id(fields[0]);
    if (pending.empty() || id != pending_id) {
      flush();
      if (closed_ids.contains(id)) throw ParseError(lineno, "rows of bag '" + id + "' are not contiguous");
      pending_id = id;
      pending_label = static_cast<int>(*label);
      pending_first_line = lineno;
    } else if (*label != pending_label) {
      throw ParseError(lineno, "inconsistent label within bag '" + id + "'");
    }
    if (!pending.empty() && inst_label.has_value() != pending.front().instance_label.has_value())
      throw ParseError(lineno, "bag '" + id + "' mixes labelled and unlabelled instances");
    max_label = std::max(max_label, static_cast<int>(*label));
    pending.push_back({std::move(features), inst_label});
  }
  flush();
  if (!saw_row) throw ParseError(0, "empty file: no data rows");

  ds.num_classes = std::max(2, max_label + 1);
  validate(ds);
  return ds;
}

/// Loads a MILCSV file; the dataset is named after the file stem.
inline MilDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return parse_milcsv(in, path.stem().string());
}

/// Shortest-safe decimal for round-tripping: 17 significant digits.
inline std::string format_double(double x) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", x);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline void write_milcsv(std::ostream& out, const MilDataset& ds) {
  for (const auto& bag : ds.bags) {
    for (std::size_t i = 0; i < bag.size(); ++i) {
      out << bag.bag_id << ',' << bag.label;
      for (double v : bag.features.row_span(i)) out << ',' << format_double(v);
      if (bag.has_instance_labels()) out << ",@" << bag.instance_labels[i];
      out << '\n';
    }
  }
}

inline void save_dataset(const MilDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_milcsv(out, ds);
  if (!out) throw Error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic unbalanced bags

struct SyntheticSpec {
  std::size_t feature_dim = 2;
  std::size_t num_pos_bags = 50;
  std::size_t num_neg_bags = 50;
  std::size_t instances_per_bag = 10;
  double positive_ratio = 0.1;
  double class_separation = 2.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

/// Number of positive instances in each positive bag:
/// ceil(instances_per_bag * positive_ratio), clamped to the bag size.
inline std::size_t positives_per_bag(const SyntheticSpec& spec) {
  // The small slack absorbs representation error, e.g. 10 * 0.1.
  const double raw = static_cast<double>(spec.instances_per_bag) * spec.positive_ratio;
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(k, spec.instances_per_bag);
}

/// Positive instances ~ N(+sep/2 e0, sigma^2 I), negatives ~ N(-sep/2 e0,
/// sigma^2 I). Positive bags hold positives_per_bag() positives at random
/// positions; negative bags hold none. Positive bags come first.
inline MilDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_pos_bags + spec.num_neg_bags == 0) throw InvalidArgument("zero bags requested");
  if (spec.feature_dim == 0) throw InvalidArgument("feature_dim must be > 0");
  if (spec.instances_per_bag == 0) throw InvalidArgument("instances_per_bag must be > 0");
  if (!(spec.positive_ratio >= 0.0 && spec.positive_ratio <= 1.0))
    throw InvalidArgument("positive_ratio must lie in [0, 1]");
  if (!(spec.class_separation >= 0.0) || !std::isfinite(spec.class_separation))
    throw InvalidArgument("class_separation must be a finite value >= 0");
  if (!(spec.noise_sigma > 0.0) || !std::isfinite(spec.noise_sigma))
    throw InvalidArgument("noise_sigma must be a finite value > 0");
  if (spec.num_pos_bags > 0 && positives_per_bag(spec) == 0)
    throw InvalidArgument("positive bags requested but positive_ratio yields no positive instance");

  Rng rng(spec.seed);
  MilDataset ds{"synthetic", 2, spec.feature_dim, {}};
  const std::size_t n = spec.instances_per_bag;
  const std::size_t k = positives_per_bag(spec);
  const double half = spec.class_separation / 2.0;

  auto make_bag = [&](std::string id, bool positive) {
    std::vector<int> labels(n, 0);
    if (positive) {
      std::fill_n(labels.begin(), k, 1);
      rng.shuffle(labels);
    }
    Bag bag{std::move(id), positive ? 1 : 0, Matrix(n, spec.feature_dim), labels};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < spec.feature_dim; ++d) bag.features(i, d) = spec.noise_sigma * rng.normal();
      bag.features(i, 0) += labels[i] == 1 ? half : -half;
    }
    return bag;
  };

  char id[32];
  for (std::size_t b = 0; b < spec.num_pos_bags; ++b) {
    std::snprintf(id, sizeof id, "pos%05zu", b);
    ds.bags.push_back(make_bag(id, true));
  }
  for (std::size_t b = 0; b < spec.num_neg_bags; ++b) {
    std::snprintf(id, sizeof id, "neg%05zu", b);
    ds.bags.push_back(make_bag(id, false));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Pyramidal multiscale concatenation

/// For every low-magnification vector, prefixes it to each of its
/// high-magnification children. Output is parent-major with child order
/// preserved; parents without children emit nothing. Apply repeatedly to
/// stack more than two magnifications.
inline std::vector<FeatureVector> pyramid_concat(std::span<const FeatureVector> low_mag,
                                                 std::span<const std::vector<FeatureVector>> children) {
  if (low_mag.size() != children.size())
    throw DimensionError("pyramid_concat: " + std::to_string(children.size()) + " child groups for " +
                         std::to_string(low_mag.size()) + " parents");
  std::optional<std::size_t> low_dim, high_dim;
  std::size_t total = 0;
  for (std::size_t i = 0; i < low_mag.size(); ++i) {
    if (low_mag[i].empty()) throw DimensionError("pyramid_concat: empty low-magnification vector");
    if (low_dim && *low_dim != low_mag[i].size())
      throw DimensionError("pyramid_concat: low-magnification dimension mismatch at parent " + std::to_string(i));
    low_dim = low_mag[i].size();
    for (const auto& child : children[i]) {
      if (child.empty()) throw DimensionError("pyramid_concat: empty high-magnification vector");
      if (high_dim && *high_dim != child.size())
        throw DimensionError("pyramid_concat: high-magnification dimension mismatch under parent " +
                             std::to_string(i));
      high_dim = child.size();
    }
    total += children[i].size();
  }

  std::vector<FeatureVector> out;
  out.reserve(total);
  for (std::size_t i = 0; i < low_mag.size(); ++i) {
    for (const auto& child : children[i]) {
      FeatureVector v;
      v.reserve(low_mag[i].size() + child.size());
      v.insert(v.end(), low_mag[i].begin(), low_mag[i].end());
      v.insert(v.end(), child.begin(), child.end());
      out.push_back(std::move(v));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature standardization

/// Per-feature z-scoring with statistics taken over all instances of the
/// bags it was fitted on. Constant features keep scale 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  bool fitted() const noexcept { return !mean.empty(); }

  static Standardizer fit(const MilDataset& ds) {
    Standardizer s;
    const std::size_t dim = ds.feature_dim;
    s.mean.assign(dim, 0.0);
    s.scale.assign(dim, 0.0);
    const auto n = static_cast<double>(ds.num_instances());
    if (n == 0) throw InvalidArgument("cannot fit a standardizer on an empty dataset");
    for (const auto& bag : ds.bags)
      for (std::size_t i = 0; i < bag.size(); ++i)
        for (std::size_t d = 0; d < dim; ++d) s.mean[d] += bag.features(i, d);
    for (auto& m : s.mean) m /= n;
    for (const auto& bag : ds.bags)
      for (std::size_t i = 0; i < bag.size(); ++i)
        for (std::size_t d = 0; d < dim; ++d) {
          const double c = bag.features(i, d) - s.mean[d];
          s.scale[d] += c * c;
        }
    for (auto& v : s.scale) {
      v = std::sqrt(v / n);
      if (!(v > 1e-12)) v = 1.0;
    }
    return s;
  }

  void apply(Bag& bag) const {
    if (bag.feature_dim() != mean.size()) throw DimensionError("standardizer dimension mismatch");
    for (std::size_t i = 0; i < bag.size(); ++i)
      for (std::size_t d = 0; d < mean.size(); ++d) bag.features(i, d) = (bag.features(i, d) - mean[d]) / scale[d];
  }

  void apply(MilDataset& ds) const {
    for (auto& bag : ds.bags) apply(bag);
  }
};

}  // namespace milforge
