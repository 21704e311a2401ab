#include "catagg/correlation.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "catagg/ops.hpp"
#include "catagg/tensor_io.hpp"

namespace catagg {

Tensor CorrelationStack::level(std::int64_t l) const {
  return reshape(slice(volume, 0, l, 1), {tokens(), tokens()});
}

Tensor cosine_correlation(const Tensor& ds, const Tensor& dt) {
  if (ds.rank() != 3 || dt.rank() != 3) {
    throw DimensionError("cosine_correlation expects [h, w, c] grids, got " +
                         shape_str(ds.shape()) + " and " + shape_str(dt.shape()));
  }
  if (ds.dim(2) != dt.dim(2)) {
    throw DimensionError("cosine_correlation: channel mismatch " + std::to_string(ds.dim(2)) +
                         " vs " + std::to_string(dt.dim(2)));
  }
  const Tensor s = l2_normalize(reshape(ds, {ds.dim(0) * ds.dim(1), ds.dim(2)}));
  const Tensor t = l2_normalize(reshape(dt, {dt.dim(0) * dt.dim(1), dt.dim(2)}));
  return relu(matmul_nt(s, t));
}

CorrelationStack build_stack(const std::vector<FeatureMap>& features_s,
                             const std::vector<FeatureMap>& features_t, std::int64_t h,
                             std::int64_t w) {
  if (features_s.empty()) throw ArgumentError("build_stack: empty feature list");
  if (features_s.size() != features_t.size()) {
    throw ArgumentError("build_stack: source and target lists differ in length");
  }
  std::vector<Tensor> maps;
  for (std::size_t i = 0; i < features_s.size(); ++i) {
    const auto& fs = features_s[i];
    const auto& ft = features_t[i];
    if (fs.level != ft.level) throw ArgumentError("build_stack: lists not aligned by level");
    if (fs.height() < h || fs.width() < w || ft.height() < h || ft.width() < w) {
      throw DimensionError("build_stack: level " + std::to_string(fs.level) +
                           " is smaller than the target grid");
    }
    const Tensor c = cosine_correlation(resize_bilinear(fs.grid, h, w),
                                        resize_bilinear(ft.grid, h, w));
    maps.push_back(reshape(c, {1, h * w, h * w}));
  }
  CorrelationStack out;
  out.volume = maps.size() == 1 ? maps.front() : concat(maps, 0);
  out.h = h;
  out.w = w;
  return out;
}

std::vector<Hypercorrelation> build_hypercorrelation(const std::vector<FeatureMap>& features_s,
                                                     const std::vector<FeatureMap>& features_t,
                                                     const std::vector<int>& layers) {
  if (features_s.size() != features_t.size()) {
    throw ArgumentError("build_hypercorrelation: source and target lists differ in length");
  }
  std::vector<Hypercorrelation> out;
  for (int q : layers) {
    Hypercorrelation hc;
    hc.layer = q;
    std::vector<Tensor> channels;
    for (std::size_t i = 0; i < features_s.size(); ++i) {
      const auto& fs = features_s[i];
      const auto& ft = features_t[i];
      if (fs.layer != q) continue;
      if (ft.layer != q || ft.level != fs.level) {
        throw ArgumentError("build_hypercorrelation: lists not aligned");
      }
      const Tensor c = cosine_correlation(fs, ft);
      channels.push_back(reshape(c, {fs.height(), fs.width(), ft.height(), ft.width(), 1}));
      if (channels.size() > 1 && channels.back().shape() != channels.front().shape()) {
        throw DimensionError("build_hypercorrelation: layer " + std::to_string(q) +
                             " mixes spatial extents");
      }
      hc.levels.push_back(fs.level);
    }
    if (channels.empty()) {
      throw ArgumentError("build_hypercorrelation: layer " + std::to_string(q) +
                          " has no feature maps");
    }
    hc.volume = channels.size() == 1 ? channels.front() : concat(channels, 4);
    out.push_back(std::move(hc));
  }
  return out;
}

CorrelationStack swap(const CorrelationStack& c) {
  CorrelationStack out = c;
  out.volume = permute(c.volume, {0, 2, 1});
  out.token_axis = c.token_axis == TokenAxis::source ? TokenAxis::target : TokenAxis::source;
  return out;
}

Tensor swap_pairs(const Tensor& volume) {
  if (volume.rank() != 5) throw DimensionError("swap expects a 5-d volume, got " + shape_str(volume.shape()));
  return permute(volume, {2, 3, 0, 1, 4});
}

Hypercorrelation swap(const Hypercorrelation& c) {
  Hypercorrelation out = c;
  out.volume = swap_pairs(c.volume);
  return out;
}

std::vector<FeatureMap> read_feature_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feature manifest '" + path + "'");
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<FeatureMap> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::map<std::string, std::string> kv;
    std::string tok;
    while (ss >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) {
        throw LoadError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + tok + "'");
      }
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    if (!kv.count("level") || !kv.count("layer") || !kv.count("file")) {
      throw LoadError(path + ":" + std::to_string(lineno) + ": needs level, layer and file");
    }
    FeatureMap f;
    try {
      f.level = std::stoi(kv["level"]);
      f.layer = std::stoi(kv["layer"]);
    } catch (const std::exception&) {
      throw LoadError(path + ":" + std::to_string(lineno) + ": bad integer");
    }
    std::filesystem::path file(kv["file"]);
    if (file.is_relative()) file = base / file;
    f.grid = load_tensor(file.string());
    if (f.grid.rank() != 3 || f.grid.dim(0) < 2 || f.grid.dim(1) < 2 || f.grid.dim(2) < 1) {
      throw LoadError(file.string() + ": feature grid must be [h>=2, w>=2, c>=1]");
    }
    out.push_back(std::move(f));
  }
  return out;
}

void write_feature_manifest(const std::string& path, const std::vector<FeatureMap>& features,
                            const std::string& file_prefix) {
  const auto base = std::filesystem::path(path).parent_path();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& f : features) {
    const std::string name = file_prefix + "_l" + std::to_string(f.level) + ".catt";
    save_tensor((base / name).string(), f.grid);
    out << "level=" << f.level << " layer=" << f.layer << " file=" << name << "\n";
  }
}

}  // namespace catagg
