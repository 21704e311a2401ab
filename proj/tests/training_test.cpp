#include <doctest.h>

#include <string>
#include <vector>

#include "catagg/train.hpp"
#include "toy.hpp"

using namespace catagg;

namespace {

// Means of consecutive 10-step windows over 50 steps of single-pair training.
std::vector<double> window_means(const std::string& model, int seed) {
  RunConfig c = toy::config(model);
  c.set("seed", std::to_string(seed));
  c.set("train.steps", "50");
  Model m(c);
  const std::vector<PairData> data{
      to_pair_data(generate_pair(100 + seed), 16, "p" + std::to_string(seed))};
  Trainer t(m, TrainConfig::from(c), data, seed);
  std::vector<double> means(5, 0.0);
  for (int i = 0; i < 50; ++i) means[i / 10] += t.train_step() / 10.0;
  return means;
}

bool strictly_decreasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1])) return false;
  return true;
}

}  // namespace

// Adam steps are noisy one by one; the trend over windows is what is checked.
TEST_CASE("single-pair loss falls over the first 50 steps on at least 4 of 5 seeds") {
  int ok = 0;
  for (int seed = 0; seed < 5; ++seed) {
    const auto w = window_means("cats", seed);
    INFO("seed " << seed << " windows " << w[0] << " " << w[1] << " " << w[2] << " " << w[3]
                 << " " << w[4]);
    ok += strictly_decreasing(w);
    CHECK(w[4] < w[0]);
  }
  CHECK(ok >= 4);
}
