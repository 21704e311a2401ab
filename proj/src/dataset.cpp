#include "catagg/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "catagg/tensor_io.hpp"

namespace catagg {

namespace fs = std::filesystem;

KeypointSet PairData::source_keypoints() const {
  KeypointSet s, t;
  grid_keypoints(flow, source.dim(0), source.dim(1), s, t);
  return s;
}

KeypointSet PairData::target_keypoints() const {
  KeypointSet s, t;
  grid_keypoints(flow, source.dim(0), source.dim(1), s, t);
  return t;
}

PairData to_pair_data(const SyntheticPair& pair, std::int64_t grid, const std::string& id) {
  PairData d;
  d.id = id;
  d.seed = pair.seed;
  d.source = pair.source;
  d.target = pair.target;
  d.flow = analytic_flow(pair.warp, pair.source.dim(0), pair.source.dim(1), grid, grid);
  d.mask = valid_mask(d.flow);
  return d;
}

void generate_dataset(const std::string& dir, std::int64_t count, std::uint64_t seed,
                      double magnitude, std::int64_t image_size, std::int64_t grid,
                      const std::string& header) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in '" + dir + "'");
  std::istringstream lines(header);
  for (std::string line; std::getline(lines, line);) manifest << "# " << line << "\n";
  for (std::int64_t i = 0; i < count; ++i) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    const SyntheticPair pair = generate_pair(s, image_size, grid, magnitude);
    const PairData d = to_pair_data(pair, grid, "");
    char name[32];
    std::snprintf(name, sizeof(name), "pair%05lld", static_cast<long long>(i));
    const std::string base(name);
    save_tensor((fs::path(dir) / (base + "_src.catt")).string(), d.source);
    save_tensor((fs::path(dir) / (base + "_tgt.catt")).string(), d.target);
    save_tensor((fs::path(dir) / (base + "_flow.catt")).string(), d.flow);
    manifest << "src=" << base << "_src.catt tgt=" << base << "_tgt.catt flow=" << base
             << "_flow.catt seed=" << s << "\n";
  }
  if (!manifest) throw IoError("failed writing manifest in '" + dir + "'");
}

std::vector<PairData> load_dataset(const std::string& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open dataset manifest '" + manifest + "'");
  const fs::path base = fs::path(manifest).parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return (path.is_relative() ? base / path : path).string();
  };
  std::vector<PairData> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ss(line);
    std::map<std::string, std::string> kv;
    std::string tok;
    while (ss >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw LoadError(manifest + ":" + std::to_string(lineno) + ": bad token '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    for (const char* key : {"src", "tgt", "flow", "seed"}) {
      if (!kv.count(key)) throw LoadError(manifest + ":" + std::to_string(lineno) + ": missing " + key);
    }
    PairData d;
    d.source = load_tensor(resolve(kv["src"]));
    d.target = load_tensor(resolve(kv["tgt"]));
    d.flow = load_tensor(resolve(kv["flow"]));
    try {
      d.seed = std::stoull(kv["seed"]);
    } catch (const std::exception&) {
      throw LoadError(manifest + ":" + std::to_string(lineno) + ": bad seed");
    }
    if (d.flow.rank() != 3 || d.flow.dim(2) != 2 || d.source.shape() != d.target.shape() ||
        d.source.rank() != 3) {
      throw LoadError(manifest + ":" + std::to_string(lineno) + ": inconsistent pair files");
    }
    d.id = fs::path(kv["src"]).stem().string();
    if (d.id.size() > 4 && d.id.compare(d.id.size() - 4, 4, "_src") == 0) d.id.resize(d.id.size() - 4);
    d.mask = valid_mask(d.flow);
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace catagg
