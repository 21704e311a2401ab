#pragma once

#include <string>

#include "catagg/config.hpp"

// Reduced model sizes that train in well under a second per step on one core.
namespace toy {

inline catagg::RunConfig config(const std::string& model) {
  catagg::RunConfig c;
  c.set("model", model);
  if (model == "cats") {
    c.set("cats.p", "16");
    c.set("cats.ffn_ratio", "2");
    c.set("cats.levels", "0,2");
  } else {
    c.set("catspp.d", "4");
    c.set("catspp.p", "16");
    c.set("catspp.attn_dim", "32");
  }
  c.set("train.lr_aggregator", "3e-4");
  c.set("train.lr_backbone", "3e-5");
  c.set("train.log_every", "0");
  return c;
}

}  // namespace toy
