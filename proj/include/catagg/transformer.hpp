#pragma once

#include <string>

#include "catagg/params.hpp"

namespace catagg {

// Multi-head scaled dot-product attention over [B, T, F] inputs.
// q, k: [B, T, Fqk]; v: [B, T, Fv]; both feature extents split into `heads`.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads);

// Pre-LN encoder block:
//   z_pos = x + pos;  z = proj(SA(qkv(LN1(z_pos)))) + z_pos;
//   y = ffn2(GELU(ffn1(LN2(z)))) + z
// Parameters live under `prefix` (ln1, qkv, proj, ln2, ffn1, ffn2).
void create_transformer_block(ParamStore& store, const std::string& prefix,
                              std::int64_t features, std::int64_t ffn_ratio);
// x: [B, T, F]; pos: [T, F] or undefined.
Tensor transformer_block(const ParamStore& store, const std::string& prefix, const Tensor& x,
                         const Tensor& pos, std::int64_t heads);

// Names of the block's output projections (zeroing them makes it an identity
// on x + pos).
std::vector<std::string> transformer_block_output_projections(const std::string& prefix);

}  // namespace catagg
