#pragma once

// JSON persistence of fitted calibration models.

#include <cmath>
#include <limits>
#include <string>

#include <json.hpp>

#include "wxpipe/error.hpp"
#include "wxpipe/learners.hpp"

namespace wxpipe::calibration {

using nlohmann::json;

inline json spec_to_json(const LearnerSpec& s) {
  json j{{"kind", std::string(to_string(s.kind))},
         {"ridge_lambda", s.ridge_lambda},
         {"knn_k", s.knn_k},
         {"tree_min_leaf", s.tree_min_leaf},
         {"tree_max_depth", s.tree_max_depth},
         {"forest_trees", s.forest_trees},
         {"forest_mtry", s.forest_mtry}};
  if (!s.candidates.empty()) {
    j["candidates"] = json::array();
    for (const auto& c : s.candidates) j["candidates"].push_back(spec_to_json(c));
  }
  return j;
}

inline LearnerSpec spec_from_json(const json& j) {
  LearnerSpec s;
  s.kind = parse_learner_kind(j.at("kind").get<std::string>());
  s.ridge_lambda = j.at("ridge_lambda").get<double>();
  s.knn_k = j.at("knn_k").get<int>();
  s.tree_min_leaf = j.at("tree_min_leaf").get<int>();
  s.tree_max_depth = j.at("tree_max_depth").get<int>();
  s.forest_trees = j.at("forest_trees").get<int>();
  s.forest_mtry = j.at("forest_mtry").get<int>();
  if (j.contains("candidates")) {
    for (const auto& c : j.at("candidates")) s.candidates.push_back(spec_from_json(c));
  }
  return s;
}

namespace detail {

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double number_or_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline FeatureSet parse_feature_set(const std::string& s) {
  for (auto f : {FeatureSet::None, FeatureSet::SameSensor, FeatureSet::AllSensors}) {
    if (to_string(f) == s) return f;
  }
  throw Error(ErrorCode::MalformedRecord, "unknown feature set '" + s + "'");
}

}  // namespace detail

inline json model_to_json(const FittedModel& m) {
  json j{{"learner", spec_to_json(m.spec)},
         {"sensor", std::string(to_string(m.sensor))},
         {"features", std::string(to_string(m.features))},
         {"columns", m.columns}};
  json meta{{"seed", m.meta.seed},
            {"folds", m.meta.folds},
            {"cv_mse", detail::number_or_null(m.meta.cv_mse)},
            {"singular", m.meta.singular},
            {"n_train", m.meta.n_train}};
  meta["candidate_cv_mse"] = json::array();
  for (double v : m.meta.candidate_cv_mse) meta["candidate_cv_mse"].push_back(detail::number_or_null(v));
  j["training_meta"] = meta;

  switch (m.spec.kind) {
    case LearnerKind::Mean: j["constant"] = m.constant; break;
    case LearnerKind::LM:
    case LearnerKind::MLR:
    case LearnerKind::Ridge: j["coefficients"] = m.coef; break;
    case LearnerKind::KNN:
      j["center"] = m.center;
      j["scale"] = m.scale;
      j["train_x"] = m.train_x;
      j["train_y"] = m.train_y;
      break;
    case LearnerKind::Tree:
    case LearnerKind::Forest: {
      json trees = json::array();
      for (const auto& t : m.trees) {
        json nodes = json::array();
        for (const auto& n : t) nodes.push_back(json::array({n.feature, n.threshold, n.left, n.right, n.value}));
        trees.push_back(std::move(nodes));
      }
      j["trees"] = std::move(trees);
      break;
    }
    case LearnerKind::Ensemble: {
      j["weights"] = m.weights;
      json members = json::array();
      for (const auto& mm : m.members) members.push_back(model_to_json(mm));
      j["members"] = std::move(members);
      break;
    }
    case LearnerKind::Raw: break;
  }
  return j;
}

inline FittedModel model_from_json(const json& j) {
  try {
    FittedModel m;
    m.spec = spec_from_json(j.at("learner"));
    m.sensor = parse_sensor(j.at("sensor").get<std::string>());
    m.features = detail::parse_feature_set(j.at("features").get<std::string>());
    m.columns = j.at("columns").get<std::vector<int>>();
    const auto& meta = j.at("training_meta");
    m.meta.seed = meta.at("seed").get<std::uint64_t>();
    m.meta.folds = meta.at("folds").get<int>();
    m.meta.cv_mse = detail::number_or_nan(meta.at("cv_mse"));
    m.meta.singular = meta.at("singular").get<bool>();
    m.meta.n_train = meta.at("n_train").get<std::size_t>();
    for (const auto& v : meta.at("candidate_cv_mse")) m.meta.candidate_cv_mse.push_back(detail::number_or_nan(v));

    switch (m.spec.kind) {
      case LearnerKind::Mean: m.constant = j.at("constant").get<double>(); break;
      case LearnerKind::LM:
      case LearnerKind::MLR:
      case LearnerKind::Ridge: m.coef = j.at("coefficients").get<std::vector<double>>(); break;
      case LearnerKind::KNN:
        m.center = j.at("center").get<std::vector<double>>();
        m.scale = j.at("scale").get<std::vector<double>>();
        m.train_x = j.at("train_x").get<std::vector<std::vector<double>>>();
        m.train_y = j.at("train_y").get<std::vector<double>>();
        break;
      case LearnerKind::Tree:
      case LearnerKind::Forest:
        for (const auto& t : j.at("trees")) {
          RegressionTree tree;
          for (const auto& n : t) {
            tree.push_back(TreeNode{n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(),
                                    n.at(3).get<int>(), n.at(4).get<double>()});
          }
          m.trees.push_back(std::move(tree));
        }
        break;
      case LearnerKind::Ensemble:
        m.weights = j.at("weights").get<std::vector<double>>();
        for (const auto& mm : j.at("members")) m.members.push_back(model_from_json(mm));
        if (m.weights.size() != m.members.size()) throw Error(ErrorCode::MalformedRecord, "weights/members differ");
        break;
      case LearnerKind::Raw: break;
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("model json: ") + e.what());
  }
}

inline std::string serialize_model(const FittedModel& m) { return model_to_json(m).dump(2) + "\n"; }

inline FittedModel parse_model(std::string_view s) {
  try {
    return model_from_json(json::parse(s));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("model json: ") + e.what());
  }
}

}  // namespace wxpipe::calibration
