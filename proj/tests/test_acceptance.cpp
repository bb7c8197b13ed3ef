// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "structconv/analyzer.hpp"
#include "structconv/commands.hpp"
#include "structconv/composite.hpp"
#include "structconv/counting.hpp"
#include "structconv/structured.hpp"
#include "structconv/training.hpp"

using namespace structconv;
namespace fs = std::filesystem;

namespace {

const std::string kData = STRUCTCONV_DATA_DIR;

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* title, double time_limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (time_limit_s > 0 && secs >= time_limit_s) {
    r.pass = false;
    r.detail += "; runtime over " + std::to_string(time_limit_s) + " s";
  }
  if (!r.pass) ++failures;
  std::printf("%s criterion %d: %s | %s | %.2f s\n", r.pass ? "PASS" : "FAIL", id, title, r.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<StructuredConfig> config_sweep() {
  std::vector<StructuredConfig> out;
  for (std::size_t C : {1u, 3u, 4u, 8u}) {
    for (std::size_t N : {1u, 3u, 5u}) {
      for (std::size_t c = 1; c <= C; ++c) {
        for (std::size_t n = 1; n <= N; ++n) out.push_back({C, N, c, n});
      }
    }
  }
  return out;
}

Tensor structured_layer(std::uint64_t seed, std::size_t cout, const StructuredConfig& cfg) {
  const std::size_t per = cfg.kernel_numel();
  Tensor w({cout, cfg.channels, cfg.kernel_size, cfg.kernel_size});
  for (std::size_t o = 0; o < cout; ++o) {
    const Tensor k = reconstruct(random_tensor(seed * 31 + o, cfg.alpha_shape()), cfg);
    std::copy(k.values().begin(), k.values().end(), w.data().begin() + static_cast<std::ptrdiff_t>(o * per));
  }
  return w;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

Outcome decomposition_equivalence() {
  double worst = 0.0;
  std::size_t cases = 0;
  for (const auto& cfg : config_sweep()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const Tensor w = structured_layer(seed, 2, cfg);
      const Tensor bias = random_tensor(seed + 7, {2});
      for (int s : {1, 2}) {
        for (int p : {0, 1, 2}) {
          for (int d : {1, 2}) {
            const auto g = ConvGeometry::uniform(s, p, d);
            const std::size_t span = static_cast<std::size_t>(d) * (cfg.kernel_size - 1);
            const Tensor x = random_tensor(seed * 1000 + cases, {cfg.channels, span + 5, span + 4});
            const auto layer = decompose_conv_layer(w, cfg, g, kExactResidualTolerance, bias);
            const Tensor direct = add_channel_bias(oracle::conv(x, w, g), bias);
            worst = std::max(worst, max_relative_error(forward_decomposed(x, layer), direct));
            ++cases;
          }
        }
      }
    }
  }
  return {worst <= 1e-10, std::to_string(cases) + " cases, max rel err " + fmt("%.3e", worst) + " (tol 1e-10)"};
}

Outcome fc_decomposition() {
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t Q = 1; Q <= 32; ++Q) {
    for (std::size_t R = 1; R <= Q; ++R) {
      for (std::size_t P = 1; P <= 32; ++P) {
        const std::uint64_t seed = (Q * 64 + R) * 64 + P;
        const Tensor w = reconstruct_linear(random_tensor(seed, {P, R}), Q);
        const auto layer = decompose_linear(w, R);
        const Tensor x = random_tensor(seed + 1, {Q});
        // Explicit row-by-row matvec as the reference.
        Tensor ref({P});
        for (std::size_t i = 0; i < P; ++i) {
          for (std::size_t j = 0; j < Q; ++j) ref[i] += w[i * Q + j] * x[j];
        }
        worst = std::max(worst, max_relative_error(forward_linear(x, layer), ref));
        ++cases;
      }
    }
  }
  return {worst <= 1e-10, std::to_string(cases) + " (P,Q,R) cases, max rel err " + fmt("%.3e", worst) + " (tol 1e-10)"};
}

Outcome projector_algebra() {
  double left = 0.0, idem = 0.0, fixed = 0.0;
  std::size_t rank_failures = 0;
  for (const auto& cfg : config_sweep()) {
    const auto sm = structure_matrix(cfg);
    const Eigen::MatrixXd& a = sm->matrix();
    const Eigen::MatrixXd& pinv = sm->pseudo_inverse();
    const Eigen::MatrixXd& proj = sm->projector();
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(a.cols(), a.cols());
    left = std::max(left, (pinv * a - eye).cwiseAbs().maxCoeff());
    idem = std::max(idem, (proj * proj - proj).cwiseAbs().maxCoeff());
    if (sm->rank() != cfg.basis_count()) ++rank_failures;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const Tensor w = reconstruct(random_tensor(seed, cfg.alpha_shape()), cfg);
      const Eigen::Map<const Eigen::VectorXd> v(w.data().data(), static_cast<Eigen::Index>(w.size()));
      fixed = std::max(fixed, (proj * v - v).cwiseAbs().maxCoeff() / v.cwiseAbs().maxCoeff());
    }
  }
  const bool ok = left <= 1e-10 && idem <= 1e-10 && fixed <= 1e-10 && rank_failures == 0;
  return {ok, "max|A+A-I| " + fmt("%.2e", left) + ", max|P^2-P| " + fmt("%.2e", idem) + ", max|W-PW|/|W| " +
                  fmt("%.2e", fixed) + ", rank-deficient configs " + std::to_string(rank_failures)};
}

LayerSpec small_conv(std::size_t cout, std::size_t C, std::size_t N, std::size_t c, std::size_t n, std::size_t h,
                     int s, int p, int d) {
  LayerSpec l;
  l.kind = N == 1 ? LayerKind::pwconv : LayerKind::conv;
  l.out_channels = cout;
  l.in_channels = C;
  l.kernel_size = N;
  l.alpha_channels = c;
  l.alpha_size = n;
  l.stride = s;
  l.padding = p;
  l.dilation = d;
  l.in_height = l.in_width = h;
  return l;
}

Outcome cost_model_exactness() {
  std::size_t specs = 0, mismatches = 0;
  auto check = [&](const LayerSpec& l) {
    const auto r = layer_costs(l);
    const auto k = count_ops_instrumented(l, specs + 1);
    if (k.before.mults != r.mults_before || k.before.adds != r.adds_before || k.after.mults != r.mults_after ||
        k.after.adds != r.adds_after) {
      ++mismatches;
    }
    ++specs;
  };
  for (std::size_t C = 1; C <= 4; ++C) {
    for (std::size_t N = 1; N <= 3; ++N) {
      for (std::size_t c = 1; c <= C; ++c) {
        for (std::size_t n = 1; n <= N; ++n) {
          for (std::size_t cout : {1u, 3u}) {
            for (std::size_t h : {3u, 5u, 8u}) {
              for (int s : {1, 2}) {
                for (int p : {0, 1}) {
                  for (int d : {1, 2}) {
                    if (h + 2 * static_cast<std::size_t>(p) < static_cast<std::size_t>(d) * (N - 1) + 1) continue;
                    check(small_conv(cout, C, N, c, n, h, s, p, d));
                    if (C == 1) {
                      auto dw = small_conv(cout, 1, N, 1, n, h, s, p, d);
                      dw.kind = LayerKind::dwconv;
                      check(dw);
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  for (std::size_t P = 1; P <= 8; ++P) {
    for (std::size_t Q = 1; Q <= 8; ++Q) {
      for (std::size_t R = 1; R <= Q; ++R) {
        LayerSpec l;
        l.kind = LayerKind::linear;
        l.out_channels = P;
        l.in_channels = Q;
        l.alpha_channels = R;
        check(l);
      }
    }
  }
  // Four 2x2 cuboids spanning a single-channel 3x3 kernel: cn^2 - 1 = 3.
  std::string amort;
  double at256 = 0.0;
  for (std::size_t cout : {1u, 16u, 256u}) {
    const auto l = small_conv(cout, 1, 3, 1, 2, 8, 1, 0, 1);
    const auto k = count_ops_instrumented(l, 99);
    const double per = static_cast<double>(k.after.adds) / static_cast<double>(cout * l.out_height() * l.out_width());
    amort += " C_out=" + std::to_string(cout) + ":" + fmt("%.4f", per);
    at256 = per;
  }
  const double rel = std::abs(at256 - 3.0) / 3.0;
  return {mismatches == 0 && rel <= 0.02, std::to_string(specs) + " specs, " + std::to_string(mismatches) +
                                              " mismatches; adds/output" + amort + " (target 3, rel dev " +
                                              fmt("%.4f", rel) + " <= 0.02)"};
}

Outcome paper_numbers() {
  const auto layers = parse_network_spec(kData + "/struct_mv2_a.json", 224, 224);
  std::vector<CostReport> reports;
  std::size_t ratio_failures = 0, standard = 0;
  for (const auto& l : layers) {
    const auto r = layer_costs(l);
    reports.push_back(r);
    if (l.kind == LayerKind::linear) continue;
    ++standard;
    const std::uint64_t C = l.in_channels, N = l.kernel_size, c = l.alpha_channels, n = l.alpha_size;
    if (!(Ratio::of(r.mults_after, r.mults_before) == Ratio::of(c * n * n, C * N * N))) ++ratio_failures;
  }
  const auto net = aggregate(reports);
  const double after = static_cast<double>(net.totals.params_after);
  const double before = static_cast<double>(net.totals.params_before);
  const double dev_after = std::abs(after / 2.62e6 - 1.0), dev_before = std::abs(before / 3.50e6 - 1.0);
  const bool ok = layers.size() == 53 && dev_after <= 0.05 && dev_before <= 0.05 && ratio_failures == 0;
  return {ok, "params_before " + std::to_string(net.totals.params_before) + " (" + fmt("%+.2f%%", 100 * (before / 3.50e6 - 1)) +
                  " vs 3.50M), params_after " + std::to_string(net.totals.params_after) + " (" +
                  fmt("%+.2f%%", 100 * (after / 2.62e6 - 1)) + " vs 2.62M), exact mult ratio on " +
                  std::to_string(standard - ratio_failures) + "/" + std::to_string(standard) + " conv layers"};
}

Outcome composite_cost() {
  const auto basis = generate_structured_basis({1, 3, 1, 2});
  const auto reported = count_composite_ops(basis);
  const Tensor x = random_tensor(1, {1, 5, 5});
  std::vector<CountedScalar> alphas;
  for (double a : random_tensor(2, {4}).values()) alphas.emplace_back(a);
  OpCounts counted;
  {
    CountingScope scope(counted);
    (void)evaluate_composite_point<CountedScalar>(basis.supports(), std::span<const CountedScalar>(alphas),
                                                  [&](const Tap& t) { return CountedScalar(x.at(t.channel, t.row, t.col)); });
  }
  const bool ok = reported.mults_per_output == 4 && reported.adds_per_output == 15 && counted.mults == 4 &&
                  counted.adds == 15 && reported.adds_per_output > 9 - 1;
  return {ok, "reported " + std::to_string(reported.mults_per_output) + " mults / " +
                  std::to_string(reported.adds_per_output) + " adds, counted " + std::to_string(counted.mults) +
                  " / " + std::to_string(counted.adds) + " (expected 4 / 15 > CN^2-1 = 8)"};
}

Outcome gradient_correctness() {
  CounterRng rng(77);
  double worst = 0.0;
  int pairs = 0;
  const double h = 1e-5;
  while (pairs < 20) {
    const std::size_t C = 1 + rng.below(4), N = 1 + rng.below(4);
    const std::size_t c = 1 + rng.below(C), n = 1 + rng.below(N);
    if (c == C && n == N) continue;  // residual identically zero
    const StructuredConfig cfg{C, N, c, n};
    Tensor w = random_tensor(rng.next_u64(), cfg.kernel_shape());
    const Tensor g = sr_grad(w, cfg);
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i];
      w[i] = keep + h;
      const double up = oracle::residual(w, cfg);
      w[i] = keep - h;
      const double down = oracle::residual(w, cfg);
      w[i] = keep;
      const double fd = (up - down) / (2 * h);
      err = std::max(err, std::abs(g[i] - fd));
      scale = std::max(scale, std::abs(fd));
    }
    worst = std::max(worst, err / scale);
    ++pairs;
  }
  return {worst <= 1e-4, std::to_string(pairs) + " (W, cfg) pairs, max rel err " + fmt("%.3e", worst) + " (tol 1e-4)"};
}

Outcome training_property() {
  const ToyData data = make_toy_dataset(3);
  const auto spec = ToyModelSpec::default_student();
  TrainingConfig cfg;
  cfg.seed = 3;
  cfg.epochs = 30;
  std::vector<double> finals;
  std::string detail;
  TrainLog strong;
  for (double lambda : {0.0, 0.1, 1.0}) {
    cfg.lambda = lambda;
    const auto run = train(spec, data, cfg);
    finals.push_back(run.log.final_mean_residual());
    detail += "lambda " + fmt("%.1f", lambda) + ": residual " + fmt("%.4f", finals.back()) + " acc " +
              fmt("%.3f", run.log.acc_pre) + "->" + fmt("%.3f", run.log.acc_post) + "; ";
    if (lambda == 1.0) strong = run.log;
  }
  const bool a = strong.final_mean_residual() < 0.05 && std::abs(strong.acc_pre - strong.acc_post) <= 0.02;
  const bool b = finals[0] >= finals[1] && finals[1] >= finals[2];

  cfg.mode = TrainMode::direct;
  const auto direct = train(spec, data, cfg);
  double direct_max = 0.0;
  for (const auto& e : direct.log.epochs) {
    for (double r : e.residuals) direct_max = std::max(direct_max, r);
  }
  const bool c = direct_max <= 1e-6 && direct.log.epochs.size() == 30;
  detail += "direct: max residual " + fmt("%.2e", direct_max) + ", acc " + fmt("%.3f", direct.log.acc_post) + "; (a) " +
            (a ? "ok" : "FAILED") + " (b) " + (b ? "ok" : "FAILED") + " (c) " + (c ? "ok" : "FAILED");
  return {a && b && c, detail};
}

std::string run(std::vector<std::string> args, int& code) {
  args.insert(args.begin(), "structconv");
  std::ostringstream out, err;
  code = run_cli(args, out, err);
  return out.str();
}

Outcome format_round_trips() {
  std::size_t tensors = 0, layers = 0, bad = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Tensor t = random_tensor(seed, {1 + seed % 3, 2 + seed % 4, 3, 1 + seed % 2});
    t[0] = seed % 2 ? -0.0 : 1e-310;
    const auto bytes = encode_tensor(t);
    if (!bitwise_equal(decode_tensor(bytes), t) || encode_tensor(decode_tensor(bytes)) != bytes) ++bad;
    ++tensors;
  }

  const auto dir = fs::temp_directory_path() / "structconv_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const StructuredConfig cfg{4, 3, 2, 2};
  const auto conv_layer =
      decompose_conv_layer(structured_layer(5, 3, cfg), cfg, ConvGeometry::uniform(2, 1, 1), kExactResidualTolerance,
                           random_tensor(6, {3}));
  save_decomposed(dir, "conv", conv_layer);
  const auto conv_back = std::get<DecomposedConvLayer>(load_decomposed(dir, "conv"));
  if (!bitwise_equal(conv_back.alpha, conv_layer.alpha) || !bitwise_equal(*conv_back.bias, *conv_layer.bias) ||
      !(conv_back.config == conv_layer.config) ||
      decomposed_sidecar(conv_back, "conv") != decomposed_sidecar(conv_layer, "conv")) {
    ++bad;
  }
  ++layers;
  const auto fc = decompose_linear(reconstruct_linear(random_tensor(7, {6, 3}), 9), 3);
  save_decomposed(dir, "fc", fc);
  const auto fc_back = std::get<DecomposedLinearLayer>(load_decomposed(dir, "fc"));
  if (!bitwise_equal(fc_back.small, fc.small) || fc_back.in_features != 9 || fc_back.bias.has_value()) ++bad;
  ++layers;

  std::size_t commands = 0, nondeterministic = 0;
  const std::vector<std::vector<std::string>> cmds{
      {"verify", "--config", kData + "/struct_mv2_b.json", "--seed", "7", "--trials", "1", "--format", "json"},
      {"analyze", "--config", kData + "/struct_mv2_a.json", "--format", "json"},
      {"train-toy", "--seed", "3", "--epochs", "1", "--format", "json"},
  };
  for (const auto& c : cmds) {
    int c1 = 0, c2 = 0;
    const auto a = run(c, c1), b = run(c, c2);
    if (a != b || c1 != 0 || c2 != 0 || a.empty()) ++nondeterministic;
    ++commands;
  }
  return {bad == 0 && nondeterministic == 0,
          std::to_string(tensors) + " tensors + " + std::to_string(layers) + " decomposed layers bitwise, " +
              std::to_string(bad) + " mismatches; " + std::to_string(commands - nondeterministic) + "/" +
              std::to_string(commands) + " CLI JSON outputs byte-identical across runs"};
}

}  // namespace

int main() {
  criterion(1, "decomposition equivalence", 60, decomposition_equivalence);
  criterion(2, "fully-connected decomposition", 10, fc_decomposition);
  criterion(3, "projector algebra", 0, projector_algebra);
  criterion(4, "cost-model exactness and amortization", 60, cost_model_exactness);
  criterion(5, "Struct-MV2-A parameter totals and mult ratios", 5, paper_numbers);
  criterion(6, "composite per-output cost", 0, composite_cost);
  criterion(7, "structural regularization gradient", 5, gradient_correctness);
  criterion(8, "training-scheme properties", 300, training_property);
  criterion(9, "format round trips and deterministic CLI output", 0, format_round_trips);
  std::printf("%s: %d of 9 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
