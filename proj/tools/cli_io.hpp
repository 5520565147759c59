#pragma once

// Model and report serialization for the milforge CLI.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <json.hpp>

#include "milforge/milforge.hpp"

namespace milforge::cli {

inline constexpr int kModelFormatVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

/// "sha256:<hex>" of the file contents.
inline std::string file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256 init failed");
  }
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest.data(), &len);
  EVP_MD_CTX_free(ctx);
  std::string hex = "sha256:";
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

// ---------------------------------------------------------------------------
// model.json
//
// {
//   "format": "milforge-model", "version": 1, "kind": "dsmil",
//   "feature_dim": L, "channels": C,
//   "weights": [{"name": "w0", "rows": C, "cols": L, "values": [...]}, ...],
//   "standardizer": {"mean": [...], "scale": [...]} | null
// }
//
// Numbers are written by hand with 17 significant digits, arrays row-major.

namespace detail {

inline void write_array(std::ostream& out, std::span<const double> values) {
  out << '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out << ',';
    out << format_double(values[i]);
  }
  out << ']';
}

}  // namespace detail

inline void write_model(std::ostream& out, const Model& model) {
  model.validate();
  const auto names = Model::weight_names(model.kind);
  out << "{\n  \"format\": \"milforge-model\",\n  \"version\": " << kModelFormatVersion << ",\n  \"kind\": \""
      << to_string(model.kind) << "\",\n  \"feature_dim\": " << model.feature_dim
      << ",\n  \"channels\": " << model.channels << ",\n  \"weights\": [";
  for (std::size_t i = 0; i < model.weights.size(); ++i) {
    const Matrix& w = model.weights[i];
    out << (i ? ",\n    " : "\n    ") << "{\"name\": \"" << names[i] << "\", \"rows\": " << w.rows()
        << ", \"cols\": " << w.cols() << ", \"values\": ";
    detail::write_array(out, w.values());
    out << '}';
  }
  out << "\n  ],\n  \"standardizer\": ";
  if (model.standardizer.fitted()) {
    out << "{\"mean\": ";
    detail::write_array(out, model.standardizer.mean);
    out << ", \"scale\": ";
    detail::write_array(out, model.standardizer.scale);
    out << '}';
  } else {
    out << "null";
  }
  out << "\n}\n";
}

inline Model read_model(std::istream& in) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "milforge-model") throw Error("not a milforge model file");
    if (j.at("version").get<int>() != kModelFormatVersion)
      throw Error("unsupported model format version " + j.at("version").dump());
    const auto kind = parse_model_kind(j.at("kind").get<std::string>());
    if (!kind) throw Error("unknown model kind " + j.at("kind").dump());
    Model m;
    m.kind = *kind;
    m.feature_dim = j.at("feature_dim").get<std::size_t>();
    m.channels = j.at("channels").get<std::size_t>();
    const auto names = Model::weight_names(m.kind);
    const auto& weights = j.at("weights");
    if (weights.size() != names.size()) throw DimensionError("wrong number of weight blocks");
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const auto& w = weights[i];
      if (w.at("name") != names[i]) throw Error("unexpected weight block " + w.at("name").dump());
      Matrix mat(w.at("rows").get<std::size_t>(), w.at("cols").get<std::size_t>());
      const auto values = w.at("values").get<std::vector<double>>();
      if (values.size() != mat.size()) throw DimensionError("weight '" + names[i] + "' has the wrong value count");
      std::copy(values.begin(), values.end(), mat.values().begin());
      m.weights.push_back(std::move(mat));
    }
    if (!j.at("standardizer").is_null()) {
      m.standardizer.mean = j["standardizer"].at("mean").get<std::vector<double>>();
      m.standardizer.scale = j["standardizer"].at("scale").get<std::vector<double>>();
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed model file: ") + e.what());
  }
}

inline void save_model(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_model(out, model);
}

inline Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_model(in);
}

// ---------------------------------------------------------------------------
// report.json pieces

inline nlohmann::json config_json(const TrainConfig& cfg, ModelKind kind) {
  return {{"model", std::string(to_string(kind))},
          {"seed", cfg.seed},
          {"epochs", cfg.epochs},
          {"learning_rate", cfg.learning_rate},
          {"adam_beta1", cfg.adam_beta1},
          {"adam_beta2", cfg.adam_beta2},
          {"adam_epsilon", cfg.adam_epsilon},
          {"abmil_hidden", cfg.abmil_hidden},
          {"standardize", cfg.standardize},
          {"batch_size", 1},
          {"weight_init", "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))"}};
}

inline nlohmann::json dataset_json(const MilDataset& ds, const std::filesystem::path& path) {
  std::size_t positives = 0;
  for (const auto& b : ds.bags) positives += b.label == 1 ? 1 : 0;
  return {{"path", path.string()},
          {"name", ds.name},
          {"fingerprint", file_fingerprint(path)},
          {"bags", ds.bags.size()},
          {"positive_bags", positives},
          {"instances", ds.num_instances()},
          {"feature_dim", ds.feature_dim},
          {"num_classes", ds.num_classes}};
}

inline nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json j{{"accuracy", m.accuracy}, {"auc", m.auc}};
  j["localization_auc"] = m.localization_auc ? nlohmann::json(*m.localization_auc) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json cv_json(const CvReport& r, const CvConfig& cv) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"run", f.run},
                     {"fold", f.fold},
                     {"train_bags", f.train_bags},
                     {"test_bags", f.test_bags},
                     {"accuracy", f.accuracy},
                     {"auc", f.auc ? nlohmann::json(*f.auc) : nlohmann::json(nullptr)},
                     {"final_train_loss", f.epoch_loss.empty() ? 0.0 : f.epoch_loss.back()}});
  }
  return {{"folds", cv.folds},
          {"runs", cv.runs},
          {"stratified", cv.stratified},
          {"mean_accuracy", r.mean_accuracy},
          {"std_accuracy", r.std_accuracy},
          {"std_formula", CvReport::kStdFormula},
          {"fold_std_accuracy", r.fold_std_accuracy},
          {"mean_auc", r.mean_auc},
          {"std_auc", r.std_auc},
          {"run_accuracy", r.run_accuracy},
          {"run_auc", r.run_auc},
          {"run_seeds", r.run_seeds},
          {"fold_assignment", r.fold_assignment},
          {"fold_results", folds}};
}

/// Wraps a command-specific body with the fields every report carries.
inline nlohmann::json report_envelope(std::string_view command) {
  return {{"schema_version", kReportSchemaVersion},
          {"command", std::string(command)},
          {"library_version", kVersion},
          {"rng_algorithm", std::string(Rng::kAlgorithm)}};
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// attention.csv

/// Per-bag min-max rescaling to [0, 1]; a bag whose values are all equal
/// maps to zeros.
inline std::vector<double> minmax_rescale(std::span<const double> v) {
  std::vector<double> out(v.size(), 0.0);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

/// Rows `bag_id,instance_index,raw_attention,minmax_attention,instance_score`
/// after a header line. For C > 1 the column of the predicted class is used.
inline void write_attention_csv(std::ostream& out, const Model& model, const MilDataset& ds) {
  if (ds.feature_dim != model.feature_dim)
    throw DimensionError("dataset feature dimension " + std::to_string(ds.feature_dim) +
                         " does not match model feature dimension " + std::to_string(model.feature_dim));
  out << "bag_id,instance_index,raw_attention,minmax_attention,instance_score\n";
  for (const auto& bag : ds.bags) {
    const BagOutput o = model_forward(model, bag);
    const std::size_t col = model.channels == 1 ? 0 : static_cast<std::size_t>(predict_label(o.logits));
    std::vector<double> raw(bag.size());
    for (std::size_t i = 0; i < bag.size(); ++i) raw[i] = o.attention(i, col);
    const auto scaled = minmax_rescale(raw);
    for (std::size_t i = 0; i < bag.size(); ++i)
      out << bag.bag_id << ',' << i << ',' << format_double(raw[i]) << ',' << format_double(scaled[i]) << ','
          << format_double(o.instance_scores(i, col)) << '\n';
  }
}

}  // namespace milforge::cli
