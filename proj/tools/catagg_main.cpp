// catagg: data generation, training, evaluation, inference, gradient checks
// and cost benchmarks for the correlation aggregators.
//
// Exit codes: 0 success, 1 numeric or check failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "catagg/bench.hpp"
#include "catagg/dataset.hpp"
#include "catagg/eval.hpp"
#include "catagg/gradcheck.hpp"
#include "catagg/tensor_io.hpp"
#include "catagg/train.hpp"

namespace fs = std::filesystem;
using namespace catagg;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigOptions {
  std::string file;
  std::vector<std::string> sets;
  std::string model;
  std::string mode;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", file, "Config file (key = value lines)");
    cmd->add_option("--set", sets, "Override, key=value (repeatable)");
    cmd->add_option("--model", model, "Shorthand for --set model=...");
    cmd->add_option("--mode", mode, "Shorthand for --set mode=...");
  }

  // Starts from `base` (e.g. a checkpoint's stored config), then applies the
  // file and the overrides in command-line order.
  RunConfig resolve(const std::string& base = {}) const {
    RunConfig c;
    if (!base.empty()) c.parse_text(base, "checkpoint");
    if (!file.empty()) c.load_file(file);
    if (!model.empty()) c.set("model", model);
    if (!mode.empty()) c.set("mode", mode);
    for (const auto& s : sets) c.set_assignment(s);
    return c;
  }
};

int thread_count(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("CATAGG_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("CATAGG_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " is required");
  if (!fs::exists(path)) throw UsageError(std::string(what) + " '" + path + "' does not exist");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::string commented(const std::string& text) {
  std::istringstream in(text);
  std::string out;
  for (std::string line; std::getline(in, line);) out += "# " + line + "\n";
  return out;
}

// -- gen-data ---------------------------------------------------------------

struct GenData {
  ConfigOptions cfg;
  std::string out;
  std::int64_t pairs = 200;
  std::uint64_t seed = 0;
  double magnitude = -1.0;

  int run() const {
    if (out.empty()) throw UsageError("--out is required");
    RunConfig c = cfg.resolve();
    if (magnitude >= 0.0) c.set("data.warp_magnitude", std::to_string(magnitude));
    if (pairs < 1) throw UsageError("--pairs must be >= 1");
    generate_dataset(out, pairs, seed, c.get_double("data.warp_magnitude"), c.get_int("image"),
                     c.get_int("grid"), c.text() + "pairs = " + std::to_string(pairs) +
                                            "\ndata.seed = " + std::to_string(seed) + "\n");
    std::printf("wrote %lld pairs to %s\n", static_cast<long long>(pairs),
                (fs::path(out) / "manifest.txt").string().c_str());
    return kOk;
  }
};

// -- train ------------------------------------------------------------------

struct Train {
  ConfigOptions cfg;
  std::string data;
  std::string out;
  std::string resume;
  std::int64_t save_every = 0;

  int run() const {
    require_file(data, "--data");
    if (out.empty()) throw UsageError("--out is required");
    std::string base;
    if (!resume.empty()) {
      require_file(resume, "--resume");
      base = checkpoint_config(resume);
    }
    const RunConfig c = cfg.resolve(base);
    std::cout << commented(c.text()) << std::flush;
    Model model(c);
    Trainer trainer(model, TrainConfig::from(c), load_dataset(data), c.get_int("seed"));
    if (!resume.empty()) trainer.load_checkpoint(resume);
    const std::int64_t log_every = trainer.config().log_every;
    // `done` counts completed steps; `loss` is the loss before that update.
    const double last = trainer.run([&](std::int64_t done, double loss) {
      if (log_every > 0 && (done % log_every == 0 || done == trainer.config().steps)) {
        std::printf("step=%lld loss=%.6f lr=%.3g\n", static_cast<long long>(done), loss,
                    trainer.learning_rate("aggregator"));
        std::fflush(stdout);
      }
      if (save_every > 0 && done % save_every == 0) trainer.save_checkpoint(out);
    });
    trainer.save_checkpoint(out);
    std::printf("steps=%lld final_loss=%.6f checkpoint=%s\n",
                static_cast<long long>(trainer.step()), last, out.c_str());
    return kOk;
  }
};

// -- eval -------------------------------------------------------------------

struct Eval {
  ConfigOptions cfg;
  std::string data;
  std::string checkpoint;
  std::string out;
  int threads = 0;

  int run() const {
    require_file(checkpoint, "--checkpoint");
    require_file(data, "--data");
    const RunConfig c = cfg.resolve(checkpoint_config(checkpoint));
    Model model(c);
    load_model_parameters(model, checkpoint);
    const auto pairs = load_dataset(data);
    if (pairs.empty()) throw UsageError("dataset '" + data + "' has no pairs");
    Report r = evaluate(model, pairs, c.get_double_list("eval.alphas"),
                        parse_pck_basis(c.get("eval.basis")), thread_count(threads));
    r.config_text = c.text();
    const std::string text = r.text();
    if (!out.empty()) write_text(out, text);
    std::cout << text;
    return kOk;
  }
};

// -- infer ------------------------------------------------------------------

struct Infer {
  ConfigOptions cfg;
  std::string data;
  std::string checkpoint;
  std::string out;

  int run() const {
    require_file(checkpoint, "--checkpoint");
    require_file(data, "--data");
    if (out.empty()) throw UsageError("--out is required");
    const RunConfig c = cfg.resolve(checkpoint_config(checkpoint));
    Model model(c);
    load_model_parameters(model, checkpoint);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create '" + out + "': " + ec.message());
    write_text((fs::path(out) / "config.txt").string(), c.text());
    const auto pairs = load_dataset(data);
    for (const auto& pair : pairs) {
      const Prediction p = predict(model, pair);
      const fs::path base = fs::path(out) / pair.id;
      save_tensor(base.string() + "_flow.catt", p.flow);
      save_tensor(base.string() + "_wta_flow.catt", p.wta_flow);
      write_keypoints(base.string() + "_kp_src.txt", pair.source_keypoints());
      write_keypoints(base.string() + "_kp_pred.txt", p.keypoints);
      write_keypoints(base.string() + "_kp_wta.txt", p.wta_keypoints);
      write_keypoints(base.string() + "_kp_gt.txt", pair.target_keypoints());
    }
    std::printf("wrote predictions for %zu pairs to %s\n", pairs.size(), out.c_str());
    return kOk;
  }
};

// -- gradcheck --------------------------------------------------------------

struct GradCheck {
  std::string ops = "all";
  std::string dtype = "f64";
  int seeds = 5;

  int run() const {
    if (dtype != "f64") throw UsageError("gradcheck runs in f64 only (--dtype f64)");
    if (seeds < 1) throw UsageError("--seeds must be >= 1");
    std::vector<const GradCase*> cases;
    if (ops == "all") {
      for (const auto& c : gradient_suite()) cases.push_back(&c);
    } else {
      std::stringstream ss(ops);
      for (std::string name; std::getline(ss, name, ',');) {
        try {
          cases.push_back(&find_gradient_case(name));
        } catch (const ArgumentError& e) {
          throw UsageError(e.what());
        }
      }
    }
    GradCheckOptions opt;
    opt.seeds = seeds;
    bool ok = true;
    std::printf("%-22s %-6s %-12s %s\n", "op", "result", "max_rel_err", "checked");
    for (const GradCase* c : cases) {
      const GradResult r = check_gradients(*c, opt);
      ok = ok && r.passed;
      std::printf("%-22s %-6s %-12.3e %lld%s%s\n", r.name.c_str(), r.passed ? "pass" : "FAIL",
                  r.max_error, static_cast<long long>(r.checked), r.passed ? "" : "  worst: ",
                  r.passed ? "" : r.worst.c_str());
      std::fflush(stdout);
    }
    std::printf("%s: %zu ops, tolerance %.0e, step %.0e, %d seeds\n", ok ? "PASS" : "FAIL",
                cases.size(), opt.tolerance, opt.step, opt.seeds);
    return ok ? kOk : kFailure;
  }
};

// -- bench ------------------------------------------------------------------

struct Bench {
  ConfigOptions cfg;
  std::int64_t extent = 16;

  int run() const {
    const RunConfig c = cfg.resolve();
    std::cout << commented(c.text());
    Model model(c);
    const ModelBench b = bench_model(model, c.get_int("seed"));
    std::printf("model=%s params=%lld\n", c.model().c_str(),
                static_cast<long long>(b.cost.params));
    for (const auto& m : b.modules) {
      std::printf("  module=%s params=%lld\n", m.module.c_str(), static_cast<long long>(m.count));
    }
    std::printf("peak_forward_bytes=%lld forward_s=%.3f backward_s=%.3f\n",
                static_cast<long long>(b.cost.peak_forward_bytes), b.cost.forward_seconds,
                b.cost.backward_seconds);

    CatsppConfig base;
    base.d = c.get_int("catspp.d");
    base.kernel = c.get_int("catspp.kernel");
    base.proj_stride = c.get_int("catspp.proj_stride");
    base.attn_dim = c.get_int("catspp.attn_dim");
    base.ffn_ratio = c.get_int("catspp.ffn_ratio");
    base.n_heads = c.get_int("catspp.n_heads");
    base.p = c.get_int("catspp.p");
    const BlockComparison cmp = compare_blocks(extent, base, c.get_int("seed"));
    std::printf("block tokens=%lld features=%lld\n", static_cast<long long>(cmp.tokens),
                static_cast<long long>(cmp.features));
    for (const auto& [name, cost] : {std::pair{"efficient", cmp.efficient},
                                     std::pair{"standard", cmp.standard}}) {
      std::printf("  block=%s params=%lld peak_forward_bytes=%lld forward_s=%.3f backward_s=%.3f\n",
                  name, static_cast<long long>(cost.params),
                  static_cast<long long>(cost.peak_forward_bytes), cost.forward_seconds,
                  cost.backward_seconds);
    }
    std::printf("param_ratio=%.4f memory_ratio=%.4f\n",
                static_cast<double>(cmp.efficient.params) / static_cast<double>(cmp.standard.params),
                static_cast<double>(cmp.efficient.peak_forward_bytes) /
                    static_cast<double>(cmp.standard.peak_forward_bytes));
    return kOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer cost aggregation for dense correspondence"};
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "Generate synthetic image pairs with dense ground truth");
  gen.cfg.add_to(g);
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--pairs", gen.pairs, "Number of pairs");
  g->add_option("--seed", gen.seed, "Seed of the first pair");
  g->add_option("--warp-magnitude", gen.magnitude, "Warp magnitude (0 = identity)");

  Train train;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  train.cfg.add_to(t);
  t->add_option("--data", train.data, "Dataset manifest");
  t->add_option("--out", train.out, "Checkpoint to write");
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--save-every", train.save_every, "Also write the checkpoint every N steps");

  Eval ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint (model and WTA baseline)");
  ev.cfg.add_to(e);
  e->add_option("--data", ev.data, "Dataset manifest");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint to evaluate");
  e->add_option("--out", ev.out, "Report file (also printed)");
  e->add_option("--threads", ev.threads, "Worker threads (default: CATAGG_THREADS or 1)");

  Infer inf;
  auto* i = app.add_subcommand("infer", "Write flow fields and transferred keypoints");
  inf.cfg.add_to(i);
  i->add_option("--data", inf.data, "Dataset manifest");
  i->add_option("--checkpoint", inf.checkpoint, "Checkpoint");
  i->add_option("--out", inf.out, "Output directory");

  GradCheck gc;
  auto* gcc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gcc->add_option("--ops", gc.ops, "all, or comma separated op names");
  gcc->add_option("--dtype", gc.dtype, "Must be f64");
  gcc->add_option("--seeds", gc.seeds, "Random instances per op");

  Bench bench;
  auto* b = app.add_subcommand("bench", "Parameter, memory and timing report");
  bench.cfg.add_to(b);
  b->add_option("--extent", bench.extent, "Embedded extent for the block comparison");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return gen.run();
    if (t->parsed()) return train.run();
    if (e->parsed()) return ev.run();
    if (i->parsed()) return inf.run();
    if (gcc->parsed()) return gc.run();
    if (b->parsed()) return bench.run();
  } catch (const UsageError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric error: %s\n", err.what());
    return kFailure;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kUsage;
  } catch (const ArgumentError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const IoError& err) {
    std::fprintf(stderr, "i/o error: %s\n", err.what());
    return kUsage;
  } catch (const LoadError& err) {
    std::fprintf(stderr, "load error: %s\n", err.what());
    return kUsage;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kFailure;
  }
  return kUsage;
}
