#include "structconv/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <optional>
#include <sstream>
#include <thread>

#include "structconv/analyzer.hpp"
#include "structconv/error.hpp"
#include "structconv/structured.hpp"
#include "structconv/training.hpp"

namespace structconv {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

class UsageError : public Error {
 public:
  using Error::Error;
};

constexpr double kVerifyTolerance = 1e-10;
constexpr double kCorruption = 1e-3;

std::size_t thread_cap() {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("STRUCTCONV_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) cap = static_cast<std::size_t>(v);
  }
  return cap;
}

// Runs body(i) for i in [0, n) on up to thread_cap() threads.
template <class Body>
void parallel_for(std::size_t n, Body body) {
  const std::size_t workers = std::min(n, thread_cap());
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

std::pair<std::size_t, std::size_t> parse_input_size(const std::string& text) {
  const auto x = text.find_first_of("xX");
  try {
    std::size_t used = 0;
    if (x == std::string::npos) {
      const auto v = std::stoul(text, &used);
      if (used == text.size() && v > 0) return {v, v};
    } else {
      const auto h = std::stoul(text.substr(0, x), &used);
      const bool h_ok = used == x;
      const auto w = std::stoul(text.substr(x + 1), &used);
      if (h_ok && used == text.size() - x - 1 && h > 0 && w > 0) return {h, w};
    }
  } catch (const std::logic_error&) {
  }
  throw UsageError("invalid --input-size '" + text + "' (expected HxW)");
}

bool json_format(const std::string& format) { return format == "json"; }

ordered_json geometry_json(const LayerSpec& l) {
  return {{"stride", l.stride}, {"pad", l.padding}, {"dilation", l.dilation}};
}

// verify -------------------------------------------------------------------------

struct VerifyOptions {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t trials = 25;
  std::string input_size;
  std::string format = "text";
  bool corrupt_alpha = false;
};

struct VerifyRow {
  double max_error = 0.0;
  std::string failure;
};

double verify_trial(const LayerSpec& l, std::uint64_t seed, std::size_t height, std::size_t width,
                    bool corrupt) {
  const StructuredConfig cfg = l.structure();
  CounterRng seeds(seed);
  const std::uint64_t s_alpha = seeds.next_u64(), s_bias = seeds.next_u64(), s_input = seeds.next_u64();
  const Tensor bias = random_tensor(s_bias, {l.out_channels});

  if (l.kind == LayerKind::linear) {
    const Tensor small = random_tensor(s_alpha, {l.out_channels, l.alpha_channels});
    const Tensor w = reconstruct_linear(small, l.in_channels);
    auto layer = decompose_linear(w, l.alpha_channels, kExactResidualTolerance, bias);
    if (corrupt) layer.small[0] += kCorruption;
    const Tensor x = random_tensor(s_input, {l.in_channels});
    const Tensor direct = axpby(1.0, linear(w, x), 1.0, bias);
    return max_relative_error(forward_linear(x, layer), direct);
  }

  const Tensor alpha = random_tensor(s_alpha, {l.out_channels, cfg.alpha_channels, cfg.alpha_size, cfg.alpha_size});
  std::vector<Tensor> kernels;
  kernels.reserve(l.out_channels);
  for (std::size_t o = 0; o < l.out_channels; ++o) kernels.push_back(reconstruct(alpha.slice0(o), cfg));
  const Tensor w = stack(kernels);
  const ConvGeometry geom = l.geometry();
  auto layer = decompose_conv_layer(w, cfg, geom, kExactResidualTolerance, bias);
  if (corrupt) layer.alpha[0] += kCorruption;
  const Tensor x = random_tensor(s_input, {l.input_channels(), height, width});
  const Tensor direct = add_channel_bias(conv(x, w, geom), bias);
  return max_relative_error(forward_decomposed(x, layer), direct);
}

int cmd_verify(const VerifyOptions& opt, std::ostream& out, std::ostream& err) {
  if (opt.trials == 0) throw UsageError("--trials must be positive");
  const auto layers = parse_network_spec(opt.config);
  std::optional<std::pair<std::size_t, std::size_t>> size;
  if (!opt.input_size.empty()) size = parse_input_size(opt.input_size);

  std::vector<VerifyRow> rows(layers.size());
  parallel_for(layers.size(), [&](std::size_t i) {
    const auto& l = layers[i];
    const std::size_t extent = 8 + static_cast<std::size_t>(l.dilation) * (l.kernel_size - 1);
    const std::size_t h = size ? size->first : extent, w = size ? size->second : extent;
    const std::uint64_t layer_seed = splitmix64_mix(opt.seed ^ splitmix64_mix(l.index + 1));
    try {
      for (std::size_t t = 0; t < opt.trials; ++t) {
        const double e = verify_trial(l, splitmix64_mix(layer_seed + t), h, w, opt.corrupt_alpha);
        rows[i].max_error = std::max(rows[i].max_error, std::isnan(e) ? std::numeric_limits<double>::infinity() : e);
      }
    } catch (const std::exception& e) {
      rows[i].failure = e.what();
    }
  });

  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].failure.empty()) throw ShapeError(layers[i].label() + ": " + rows[i].failure);
  }

  bool passed = true;
  ordered_json report_layers = ordered_json::array();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool ok = rows[i].max_error <= kVerifyTolerance;
    passed = passed && ok;
    if (!ok) {
      err << "equivalence failure in " << layers[i].label() << ": max relative error "
          << rows[i].max_error << " > " << kVerifyTolerance << '\n';
    }
    report_layers.push_back({{"index", layers[i].index},
                             {"name", layers[i].name},
                             {"kind", to_string(layers[i].kind)},
                             {"max_relative_error", rows[i].max_error},
                             {"passed", ok}});
  }

  if (json_format(opt.format)) {
    ordered_json doc{{"command", "verify"},   {"seed", opt.seed},     {"trials", opt.trials},
                     {"tolerance", kVerifyTolerance}, {"layers", report_layers}, {"passed", passed}};
    out << doc.dump(2) << '\n';
  } else {
    for (const auto& r : report_layers) {
      out << std::setw(4) << r["index"].get<std::size_t>() << "  " << std::setw(7)
          << r["kind"].get<std::string>() << "  max rel err " << std::scientific << std::setprecision(3)
          << r["max_relative_error"].get<double>() << (r["passed"].get<bool>() ? "  ok" : "  FAIL") << '\n';
    }
    out << (passed ? "all layers equivalent" : "equivalence check failed") << '\n';
  }
  return passed ? kExitOk : kExitFailure;
}

// analyze ------------------------------------------------------------------------

struct AnalyzeOptions {
  std::string config;
  std::string input_size = "224x224";
  std::string format = "table";
  std::optional<double> target_ratio;
};

ordered_json cost_json(const CostReport& c) {
  return {{"params_before", c.params_before}, {"params_after", c.params_after},
          {"mults_before", c.mults_before},   {"mults_after", c.mults_after},
          {"adds_before", c.adds_before},     {"adds_after", c.adds_after}};
}

std::string ratio_text(const Ratio& r) { return std::to_string(r.num) + "/" + std::to_string(r.den); }

int cmd_analyze(const AnalyzeOptions& opt, std::ostream& out, std::ostream& err) {
  const auto [height, width] = parse_input_size(opt.input_size);
  auto layers = parse_network_spec(opt.config, height, width);
  if (opt.target_ratio) {
    if (!(*opt.target_ratio >= 1.0)) throw UsageError("--target-ratio must be >= 1");
    std::vector<std::string> warnings;
    const auto choices = generate_config(layers, *opt.target_ratio, &warnings);
    for (const auto& w : warnings) err << "warning: " << w << '\n';
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].alpha_channels = choices[i].alpha_channels;
      layers[i].alpha_size = choices[i].alpha_size;
      layers[i].validate();
    }
  }

  std::vector<CostReport> reports(layers.size());
  parallel_for(layers.size(), [&](std::size_t i) { reports[i] = layer_costs(layers[i]); });
  const auto totals = aggregate(reports);

  if (json_format(opt.format)) {
    ordered_json rows = ordered_json::array();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      ordered_json row{{"index", l.index}, {"name", l.name},   {"kind", to_string(l.kind)},
                       {"cout", l.out_channels}, {"cin", l.in_channels}, {"k", l.kernel_size},
                       {"c", l.alpha_channels},  {"n", l.alpha_size}};
      row.update(geometry_json(l));
      row["input"] = {l.in_height, l.in_width};
      row["output"] = {l.out_height(), l.out_width()};
      row.update(cost_json(reports[i]));
      row["compression_ratio"] = ratio_text(reports[i].compression_ratio);
      row["compression_ratio_value"] = reports[i].compression_ratio.value();
      rows.push_back(std::move(row));
    }
    ordered_json total = cost_json(totals.totals);
    total["params_ratio"] = totals.params_ratio;
    total["mults_ratio"] = totals.mults_ratio;
    total["adds_ratio"] = totals.adds_ratio;
    total["compression_ratio"] = ratio_text(totals.totals.compression_ratio);
    total["compression_ratio_value"] = totals.totals.compression_ratio.value();
    ordered_json doc{{"command", "analyze"},
                     {"input_size", {height, width}},
                     {"layer_count", totals.layer_count},
                     {"layers", rows},
                     {"totals", total}};
    if (opt.target_ratio) doc["target_ratio"] = *opt.target_ratio;
    out << doc.dump(2) << '\n';
    return kExitOk;
  }

  out << std::left << std::setw(5) << "idx" << std::setw(8) << "kind" << std::right << std::setw(6)
      << "cout" << std::setw(6) << "cin" << std::setw(3) << "k" << std::setw(6) << "c" << std::setw(3)
      << "n" << std::setw(10) << "input" << std::setw(12) << "params" << std::setw(12) << "params'"
      << std::setw(14) << "mults" << std::setw(14) << "mults'" << std::setw(14) << "adds"
      << std::setw(14) << "adds'" << std::setw(10) << "ratio" << '\n';
  auto line = [&](const std::string& idx, const std::string& kind, const std::string& shape,
                  const std::string& dims, const CostReport& c, const std::string& ratio) {
    out << std::left << std::setw(5) << idx << std::setw(8) << kind << std::right << shape
        << std::setw(10) << dims << std::setw(12) << c.params_before << std::setw(12) << c.params_after
        << std::setw(14) << c.mults_before << std::setw(14) << c.mults_after << std::setw(14)
        << c.adds_before << std::setw(14) << c.adds_after << std::setw(10) << ratio << '\n';
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    std::ostringstream shape;
    shape << std::setw(6) << l.out_channels << std::setw(6) << l.in_channels << std::setw(3)
          << l.kernel_size << std::setw(6) << l.alpha_channels << std::setw(3) << l.alpha_size;
    line(std::to_string(l.index), std::string(to_string(l.kind)), shape.str(),
         std::to_string(l.in_height) + "x" + std::to_string(l.in_width), reports[i],
         ratio_text(reports[i].compression_ratio));
  }
  std::ostringstream ratios;
  ratios << std::fixed << std::setprecision(3) << "params x" << totals.params_ratio << "  mults x"
         << totals.mults_ratio << "  adds x" << totals.adds_ratio;
  line("total", "", std::string(24, ' '), "", totals.totals, "");
  out << ratios.str() << '\n';
  return kExitOk;
}

// decompose ----------------------------------------------------------------------

struct DecomposeOptions {
  std::string weights;
  std::string config;
  std::string out;
  double tol = kExactResidualTolerance;
  std::string format = "text";
};

Shape expected_weight_shape(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::linear: return {l.out_channels, l.in_channels};
    case LayerKind::dwconv: return {l.out_channels, 1, l.kernel_size, l.kernel_size};
    default: return {l.out_channels, l.in_channels, l.kernel_size, l.kernel_size};
  }
}

std::string layer_stem(const LayerSpec& l) { return "layer_" + std::to_string(l.index); }

int cmd_decompose(const DecomposeOptions& opt, std::ostream& out, std::ostream& err) {
  if (!(opt.tol >= 0.0)) throw UsageError("--tol must be non-negative");
  const auto layers = parse_network_spec(opt.config);
  const fs::path source(opt.weights);
  const bool from_dir = fs::is_directory(source);
  if (!from_dir && layers.size() != 1) {
    throw UsageError("--weights names a single file but the config has " + std::to_string(layers.size()) +
                     " layers; pass a directory of layer_<index>.stcv files");
  }

  struct Entry {
    DecomposedLayer layer;
    double residual = 0.0;
    std::size_t worst = 0;
  };
  std::vector<Entry> entries;
  entries.reserve(layers.size());
  for (const auto& l : layers) {
    const fs::path wpath = from_dir ? source / (layer_stem(l) + ".stcv") : source;
    const Tensor w = read_tensor(wpath);
    if (w.shape() != expected_weight_shape(l)) {
      throw ShapeError(l.label() + ": weights " + shape_str(w.shape()) + " do not match expected " +
                       shape_str(expected_weight_shape(l)));
    }
    std::optional<Tensor> bias;
    const fs::path bpath = from_dir ? source / (layer_stem(l) + ".bias.stcv") : fs::path{};
    if (from_dir && fs::exists(bpath)) bias = read_tensor(bpath);
    constexpr double kAny = std::numeric_limits<double>::infinity();
    Entry e;
    if (l.kind == LayerKind::linear) {
      e.layer = decompose_linear(w, l.alpha_channels, kAny, bias);
    } else {
      e.layer = decompose_conv_layer(w, l.structure(), l.geometry(), kAny, bias);
    }
    const auto& res = std::visit([](const auto& d) -> const std::vector<double>& { return d.residuals; }, e.layer);
    const auto worst = std::max_element(res.begin(), res.end());
    e.residual = *worst;
    e.worst = static_cast<std::size_t>(worst - res.begin());
    entries.push_back(std::move(e));
  }

  fs::create_directories(opt.out);
  bool passed = true;
  std::size_t worst_layer = 0;
  ordered_json rows = ordered_json::array();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool ok = entries[i].residual <= opt.tol;
    if (entries[i].residual > entries[worst_layer].residual) worst_layer = i;
    passed = passed && ok;
    if (ok) save_decomposed(opt.out, layer_stem(layers[i]), entries[i].layer);
    rows.push_back({{"index", layers[i].index},
                    {"name", layers[i].name},
                    {"kind", to_string(layers[i].kind)},
                    {"residual", entries[i].residual},
                    {"worst_kernel", entries[i].worst},
                    {"passed", ok},
                    {"files", ok ? ordered_json(layer_stem(layers[i])) : ordered_json(nullptr)}});
  }
  if (!passed) {
    err << "residual exceeded tolerance " << opt.tol << "; worst is " << layers[worst_layer].label()
        << " (kernel " << entries[worst_layer].worst << ", residual " << entries[worst_layer].residual << ")\n";
  }

  if (json_format(opt.format)) {
    ordered_json doc{{"command", "decompose"}, {"tolerance", opt.tol}, {"layers", rows}, {"passed", passed}};
    if (!passed) doc["worst_layer"] = layers[worst_layer].index;
    out << doc.dump(2) << '\n';
  } else {
    for (const auto& r : rows) {
      out << std::setw(4) << r["index"].get<std::size_t>() << "  " << std::setw(7)
          << r["kind"].get<std::string>() << "  residual " << std::scientific << std::setprecision(3)
          << r["residual"].get<double>() << (r["passed"].get<bool>() ? "  written" : "  REJECTED") << '\n';
    }
  }
  return passed ? kExitOk : kExitFailure;
}

// train-toy ----------------------------------------------------------------------

struct TrainOptions {
  TrainingConfig config;
  std::string mode = "regularized";
  std::string log;
  std::string format = "text";
};

int cmd_train_toy(TrainOptions opt, std::ostream& out, std::ostream& err) {
  opt.config.mode = parse_train_mode(opt.mode);
  if (opt.config.epochs == 0) throw UsageError("--epochs must be positive");
  if (!(opt.config.learning_rate > 0.0)) throw UsageError("--lr must be positive");
  const ToyData data = make_toy_dataset(opt.config.seed);
  TrainResult result;
  try {
    result = train(ToyModelSpec::default_student(), data, opt.config);
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitFailure;
  }
  const auto& log = result.log;
  if (!opt.log.empty()) {
    std::ofstream f(opt.log, std::ios::binary);
    if (!f) throw UsageError("cannot write log " + opt.log);
    f << log.to_jsonl();
  }
  if (json_format(opt.format)) {
    ordered_json doc{{"command", "train-toy"},
                     {"mode", log.mode},
                     {"lambda", log.lambda},
                     {"seed", log.seed},
                     {"epochs", log.epochs.size()},
                     {"final_task_loss", log.epochs.back().task_loss},
                     {"final_residuals", log.epochs.back().residuals},
                     {"final_mean_residual", log.final_mean_residual()},
                     {"acc_pre", log.acc_pre},
                     {"acc_post", log.acc_post},
                     {"decomposition_residuals", log.decomposition_residuals}};
    out << doc.dump(2) << '\n';
  } else {
    out << std::fixed << std::setprecision(4) << "mode " << log.mode << "  lambda " << log.lambda
        << "  seed " << log.seed << '\n'
        << "final mean residual " << log.final_mean_residual() << '\n'
        << "accuracy before decomposition " << log.acc_pre << '\n'
        << "accuracy after decomposition  " << log.acc_post << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured convolution toolkit", "structconv"};
  app.require_subcommand(1);
  const std::vector<std::string> formats{"json", "text", "table"};

  VerifyOptions vopt;
  auto* verify = app.add_subcommand("verify", "Check decomposed layers against direct convolution");
  verify->add_option("--config", vopt.config, "Per-layer network spec (JSON)")->required();
  verify->add_option("--seed", vopt.seed, "Random seed")->required();
  verify->add_option("--trials", vopt.trials, "Random trials per layer")->capture_default_str();
  verify->add_option("--input-size", vopt.input_size, "Spatial input size HxW (default: 8 + d(N-1))");
  verify->add_option("--format", vopt.format)->check(CLI::IsMember(formats))->capture_default_str();
  verify->add_flag("--corrupt-alpha", vopt.corrupt_alpha)->group("");

  AnalyzeOptions aopt;
  auto* analyze = app.add_subcommand("analyze", "Per-layer parameter and operation counts");
  analyze->add_option("--config", aopt.config, "Per-layer network spec (JSON)")->required();
  analyze->add_option("--input-size", aopt.input_size, "Network input size HxW")->capture_default_str();
  analyze->add_option("--format", aopt.format)->check(CLI::IsMember(formats))->capture_default_str();
  analyze->add_option("--target-ratio", aopt.target_ratio, "Replace {c, n} by configs aimed at this compression");

  DecomposeOptions dopt;
  auto* decompose = app.add_subcommand("decompose", "Split trained layers into sum-pool + small conv");
  decompose->add_option("--weights", dopt.weights, "Weight file, or directory of layer_<index>.stcv")->required();
  decompose->add_option("--config", dopt.config, "Per-layer network spec (JSON)")->required();
  decompose->add_option("--out", dopt.out, "Output directory")->required();
  decompose->add_option("--tol", dopt.tol, "Maximum kernel residual")->capture_default_str();
  decompose->add_option("--format", dopt.format)->check(CLI::IsMember(formats))->capture_default_str();

  TrainOptions topt;
  auto* train_toy = app.add_subcommand("train-toy", "Train the toy classifier and decompose it");
  train_toy->add_option("--seed", topt.config.seed, "Random seed")->required();
  train_toy->add_option("--lambda", topt.config.lambda, "Structural regularization weight")->capture_default_str();
  train_toy->add_option("--epochs", topt.config.epochs)->capture_default_str();
  train_toy->add_option("--mode", topt.mode)
      ->check(CLI::IsMember({"regularized", "direct", "plain"}))
      ->capture_default_str();
  train_toy->add_option("--lr", topt.config.learning_rate, "SGD learning rate")->capture_default_str();
  train_toy->add_option("--batch-size", topt.config.batch_size)->capture_default_str();
  train_toy->add_option("--log", topt.log, "Write per-epoch JSONL log here");
  train_toy->add_option("--format", topt.format)->check(CLI::IsMember(formats))->capture_default_str();

  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (*verify) return cmd_verify(vopt, out, err);
    if (*analyze) return cmd_analyze(aopt, out, err);
    if (*decompose) return cmd_decompose(dopt, out, err);
    return cmd_train_toy(topt, out, err);
  } catch (const ResidualError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConstraintError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace structconv
