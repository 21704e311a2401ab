#include "catagg/eval.hpp"

#include <cstdio>
#include <exception>
#include <sstream>
#include <thread>

namespace catagg {

Prediction predict(const Model& model, const PairData& pair) {
  InferenceGuard guard;
  DenormalGuard ftz;
  const DType dt = model.params().dtype();
  const Tensor src = pair.source.to(dt);
  const Tensor tgt = pair.target.to(dt);
  Prediction p;
  p.flow = model.forward(src, tgt).flow;
  p.wta_flow = model.wta_flow(src, tgt);
  const KeypointSet source = pair.source_keypoints();
  p.keypoints = transfer_keypoints(p.flow, source);
  p.wta_keypoints = transfer_keypoints(p.wta_flow, source);
  return p;
}

PairMetrics score_pair(const PairData& pair, const Prediction& p, const std::vector<double>& alphas,
                       PckBasis basis) {
  InferenceGuard guard;
  PairMetrics m;
  m.id = pair.id;
  m.aepe = aepe(p.flow.to(DType::f64), pair.flow.to(DType::f64), pair.mask).item();
  const KeypointSet gt = pair.target_keypoints();
  for (double a : alphas) {
    m.pck.push_back(pck(p.keypoints, gt, a, basis));
    m.wta_pck.push_back(pck(p.wta_keypoints, gt, a, basis));
  }
  return m;
}

Report evaluate(const Model& model, const std::vector<PairData>& pairs,
                const std::vector<double>& alphas, PckBasis basis, int threads) {
  if (pairs.empty()) throw ArgumentError("evaluate: no pairs");
  if (alphas.empty()) throw ArgumentError("evaluate: no alphas");
  Report r;
  r.config_text = model.config().text();
  r.alphas = alphas;
  r.basis = basis;
  r.pairs.resize(pairs.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), pairs.size()));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < pairs.size(); i += workers) {
        r.pairs[i] = score_pair(pairs[i], predict(model, pairs[i]), alphas, basis);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return r;
}

double Report::mean_aepe() const {
  double s = 0.0;
  for (const auto& p : pairs) s += p.aepe;
  return pairs.empty() ? 0.0 : s / static_cast<double>(pairs.size());
}

double Report::mean_pck(std::size_t a) const {
  double s = 0.0;
  for (const auto& p : pairs) s += p.pck[a];
  return pairs.empty() ? 0.0 : s / static_cast<double>(pairs.size());
}

double Report::mean_wta_pck(std::size_t a) const {
  double s = 0.0;
  for (const auto& p : pairs) s += p.wta_pck[a];
  return pairs.empty() ? 0.0 : s / static_cast<double>(pairs.size());
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string alpha_str(double a) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", a);
  return buf;
}

}  // namespace

std::string Report::text() const {
  std::ostringstream out;
  std::istringstream cfg(config_text);
  std::string line;
  while (std::getline(cfg, line)) out << "# " << line << "\n";
  out << "# pck_basis = " << (basis == PckBasis::img ? "img" : "bbox") << "\n";
  for (const auto& p : pairs) {
    out << "pair=" << p.id << " aepe=" << num(p.aepe);
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      out << " pck@" << alpha_str(alphas[a]) << "=" << num(p.pck[a]) << " wta_pck@"
          << alpha_str(alphas[a]) << "=" << num(p.wta_pck[a]);
    }
    out << "\n";
  }
  out << "summary pairs=" << pairs.size() << " aepe=" << num(mean_aepe());
  for (std::size_t a = 0; a < alphas.size(); ++a) {
    out << " pck@" << alpha_str(alphas[a]) << "=" << num(mean_pck(a)) << " wta_pck@"
        << alpha_str(alphas[a]) << "=" << num(mean_wta_pck(a));
  }
  out << "\n";
  return out.str();
}

}  // namespace catagg
