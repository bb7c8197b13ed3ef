#include <fstream>
#include <json.hpp>
#include <sstream>

#include "structconv/error.hpp"
#include "structconv/structured.hpp"

namespace structconv {

using nlohmann::ordered_json;

namespace {

ordered_json geom_json(const ConvGeometry& g) {
  return {{"stride", g.stride}, {"padding", g.padding}, {"dilation", g.dilation}, {"groups", g.groups}};
}

ConvGeometry geom_from(const ordered_json& j) {
  ConvGeometry g;
  g.stride = j.at("stride").get<std::array<int, 2>>();
  g.padding = j.at("padding").get<std::array<int, 2>>();
  g.dilation = j.at("dilation").get<std::array<int, 2>>();
  g.groups = j.value("groups", 1);
  g.validate();
  return g;
}

ordered_json to_json(const DecomposedConvLayer& l, const std::string& stem) {
  const auto& c = l.config;
  return {
      {"kind", "conv"},
      {"cfg", {{"C", c.channels}, {"N", c.kernel_size}, {"c", c.alpha_channels}, {"n", c.alpha_size}}},
      {"pool_dims", {l.pool_dims.channels, l.pool_dims.height, l.pool_dims.width}},
      {"pool_geom", geom_json(l.pool_geom)},
      {"small_geom", geom_json(l.small_geom)},
      {"source_geom", geom_json(l.source_geom)},
      {"out_channels", l.out_channels()},
      {"alpha", stem + ".alpha.stcv"},
      {"bias", l.bias ? ordered_json(stem + ".bias.stcv") : ordered_json(nullptr)},
      {"residuals", l.residuals},
  };
}

ordered_json to_json(const DecomposedLinearLayer& l, const std::string& stem) {
  return {
      {"kind", "linear"},
      {"P", l.out_features()},
      {"Q", l.in_features},
      {"R", l.reduced},
      {"pool_window", l.pool_window()},
      {"alpha", stem + ".alpha.stcv"},
      {"bias", l.bias ? ordered_json(stem + ".bias.stcv") : ordered_json(nullptr)},
      {"residuals", l.residuals},
  };
}

}  // namespace

std::string decomposed_sidecar(const DecomposedLayer& layer, const std::string& stem) {
  return std::visit([&](const auto& l) { return to_json(l, stem).dump(2); }, layer);
}

void save_decomposed(const std::filesystem::path& dir, const std::string& stem,
                     const DecomposedLayer& layer) {
  std::filesystem::create_directories(dir);
  std::visit(
      [&](const auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, DecomposedConvLayer>) {
          write_tensor(dir / (stem + ".alpha.stcv"), l.alpha);
        } else {
          write_tensor(dir / (stem + ".alpha.stcv"), l.small);
        }
        if (l.bias) write_tensor(dir / (stem + ".bias.stcv"), *l.bias);
      },
      layer);
  std::ofstream out(dir / (stem + ".json"), std::ios::trunc);
  if (!out) throw FormatError("cannot write sidecar in " + dir.string());
  out << decomposed_sidecar(layer, stem) << '\n';
}

DecomposedLayer load_decomposed(const std::filesystem::path& dir, const std::string& stem) {
  std::ifstream in(dir / (stem + ".json"));
  if (!in) throw FormatError("missing sidecar " + (dir / (stem + ".json")).string());
  ordered_json j;
  try {
    j = ordered_json::parse(in);
    std::optional<Tensor> bias;
    if (!j.at("bias").is_null()) bias = read_tensor(dir / j.at("bias").get<std::string>());
    const Tensor coeffs = read_tensor(dir / j.at("alpha").get<std::string>());
    std::vector<double> residuals = j.at("residuals").get<std::vector<double>>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "conv") {
      DecomposedConvLayer l;
      const auto& c = j.at("cfg");
      l.config = {c.at("C").get<std::size_t>(), c.at("N").get<std::size_t>(),
                  c.at("c").get<std::size_t>(), c.at("n").get<std::size_t>()};
      l.config.validate();
      const auto pd = j.at("pool_dims").get<std::array<std::size_t, 3>>();
      l.pool_dims = {pd[0], pd[1], pd[2]};
      if (!(l.pool_dims == l.config.pool_dims())) throw FormatError("pool_dims inconsistent with cfg");
      l.pool_geom = geom_from(j.at("pool_geom"));
      l.small_geom = geom_from(j.at("small_geom"));
      l.source_geom = geom_from(j.at("source_geom"));
      if (coeffs.rank() != 4 || coeffs.dim(1) != l.config.alpha_channels ||
          coeffs.dim(2) != l.config.alpha_size || coeffs.dim(3) != l.config.alpha_size) {
        throw FormatError("alpha tensor " + shape_str(coeffs.shape()) + " inconsistent with cfg");
      }
      l.alpha = coeffs;
      l.bias = std::move(bias);
      l.residuals = std::move(residuals);
      return l;
    }
    if (kind == "linear") {
      DecomposedLinearLayer l;
      l.in_features = j.at("Q").get<std::size_t>();
      l.reduced = j.at("R").get<std::size_t>();
      if (coeffs.rank() != 2 || coeffs.dim(1) != l.reduced) {
        throw FormatError("coefficient matrix inconsistent with R");
      }
      l.small = coeffs;
      l.bias = std::move(bias);
      l.residuals = std::move(residuals);
      return l;
    }
    throw FormatError("unknown layer kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed sidecar " + stem + ".json: " + e.what());
  }
}

}  // namespace structconv
