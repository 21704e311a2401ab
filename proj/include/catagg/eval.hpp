#pragma once

#include <string>
#include <vector>

#include "catagg/dataset.hpp"
#include "catagg/flow.hpp"
#include "catagg/model.hpp"

namespace catagg {

struct Prediction {
  Tensor flow;            // model flow on the model grid
  Tensor wta_flow;        // raw-correlation argmax flow
  KeypointSet keypoints;  // transferred by the model
  KeypointSet wta_keypoints;
};

// Inference-mode forward for one pair.
Prediction predict(const Model& model, const PairData& pair);

struct PairMetrics {
  std::string id;
  double aepe = 0.0;
  std::vector<double> pck;
  std::vector<double> wta_pck;
};

struct Report {
  std::string config_text;
  std::vector<double> alphas;
  PckBasis basis = PckBasis::img;
  std::vector<PairMetrics> pairs;

  double mean_aepe() const;
  double mean_pck(std::size_t alpha_index) const;
  double mean_wta_pck(std::size_t alpha_index) const;
  // "# key = value" lines, one `pair=...` line per pair, then `summary ...`.
  std::string text() const;
};

PairMetrics score_pair(const PairData& pair, const Prediction& p, const std::vector<double>& alphas,
                       PckBasis basis);

// Pairs are scored on up to `threads` threads; results keep input order.
Report evaluate(const Model& model, const std::vector<PairData>& pairs,
                const std::vector<double>& alphas, PckBasis basis = PckBasis::img,
                int threads = 1);

}  // namespace catagg
