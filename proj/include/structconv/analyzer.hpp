#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "structconv/counting.hpp"
#include "structconv/structured.hpp"

namespace structconv {

enum class LayerKind { conv, dwconv, pwconv, linear };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view text);

/// One row of a per-layer {c, n} table. For linear layers out/in channels are
/// P and Q, alpha_channels is R and the spatial fields are unused. Depthwise
/// layers list in_channels = 1 and out_channels = channel count.
struct LayerSpec {
  std::size_t index = 0;
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::size_t out_channels = 1;
  std::size_t in_channels = 1;
  std::size_t kernel_size = 1;
  std::size_t alpha_channels = 1;
  std::size_t alpha_size = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  std::size_t in_height = 1;
  std::size_t in_width = 1;

  /// Throws ConstraintError / ShapeError naming the layer.
  void validate() const;
  /// Per-kernel structure: {C, N, c, n}, {1, N, 1, n} for depthwise, {Q, 1, R, 1} for linear.
  StructuredConfig structure() const;
  ConvGeometry geometry() const;
  /// Channels of the feature map this layer consumes.
  std::size_t input_channels() const;
  std::size_t out_height() const;
  std::size_t out_width() const;
  /// Extent of the sum-pooled intermediate (H1, W1).
  std::size_t pooled_height() const;
  std::size_t pooled_width() const;
  std::string label() const;
};

/// Exact non-negative rational in lowest terms.
struct Ratio {
  std::uint64_t num = 1;
  std::uint64_t den = 1;
  static Ratio of(std::uint64_t num, std::uint64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

struct CostReport {
  std::uint64_t params_before = 0;
  std::uint64_t params_after = 0;
  std::uint64_t mults_before = 0;
  std::uint64_t mults_after = 0;
  std::uint64_t adds_before = 0;
  std::uint64_t adds_after = 0;
  Ratio compression_ratio;  // CN^2 / cn^2 (Q / R for linear)
  friend bool operator==(const CostReport&, const CostReport&) = default;
};

CostReport layer_costs(const LayerSpec& spec);

/// Reads a JSON array of {kind, cout, cin, k, c, n, stride, pad, dilation}
/// objects (optional "name" and "index") and propagates spatial extents from
/// the given input size.
std::vector<LayerSpec> parse_network_spec(const std::filesystem::path& path,
                                          std::size_t input_height = 224,
                                          std::size_t input_width = 224);
std::vector<LayerSpec> parse_network_text(std::string_view text, std::size_t input_height = 224,
                                          std::size_t input_width = 224);

/// Recomputes in_height/in_width of every layer from the network input size.
void propagate_spatial(std::vector<LayerSpec>& layers, std::size_t input_height,
                       std::size_t input_width);

struct NetworkCostReport {
  CostReport totals;  // compression_ratio holds params_before / params_after
  double params_ratio = 1.0;  // after / before
  double mults_ratio = 1.0;
  double adds_ratio = 1.0;
  std::size_t layer_count = 0;
};

NetworkCostReport aggregate(std::span<const CostReport> reports);

struct ConfigChoice {
  std::size_t alpha_channels = 1;
  std::size_t alpha_size = 1;
  Ratio achieved;
  bool clamped = false;
};

/// Per-layer {c, n} aimed at `target_ratio`. Standard and pointwise layers keep
/// n = N and scale c; depthwise layers shrink n. Infeasible targets clamp to
/// {1, 1} and append a message to `warnings` when given.
std::vector<ConfigChoice> generate_config(std::span<const LayerSpec> layers, double target_ratio,
                                          std::vector<std::string>* warnings = nullptr);

struct InstrumentedCounts {
  OpCounts before;
  OpCounts after;
};

/// Runs the reference layer and its decomposition on seeded random data with
/// every scalar + and * counted. Refuses layers whose input, weight or output
/// tensors exceed 10^6 elements.
InstrumentedCounts count_ops_instrumented(const LayerSpec& spec, std::uint64_t seed);

}  // namespace structconv
