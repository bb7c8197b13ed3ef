#include "structconv/analyzer.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "structconv/error.hpp"

namespace structconv {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::dwconv: return "dwconv";
    case LayerKind::pwconv: return "pwconv";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view text) {
  if (text == "conv") return LayerKind::conv;
  if (text == "dwconv") return LayerKind::dwconv;
  if (text == "pwconv") return LayerKind::pwconv;
  if (text == "linear") return LayerKind::linear;
  throw ParseError("unknown layer kind '" + std::string(text) + "'");
}

std::string LayerSpec::label() const {
  std::string s = "layer " + std::to_string(index);
  if (!name.empty()) s += " (" + name + ")";
  return s;
}

void LayerSpec::validate() const {
  auto fail = [&](const std::string& what) {
    throw ConstraintError("constraint violation in " + label() + ": " + what);
  };
  if (out_channels < 1 || in_channels < 1 || kernel_size < 1) fail("dimensions must be positive");
  switch (kind) {
    case LayerKind::linear:
      if (kernel_size != 1) fail("linear layers must have k = 1");
      if (alpha_channels < 1 || alpha_channels > in_channels) {
        fail("need 1 <= R <= Q (R=" + std::to_string(alpha_channels) + ", Q=" +
             std::to_string(in_channels) + ")");
      }
      if (alpha_size != 1) fail("linear layers must have n = 1");
      return;
    case LayerKind::dwconv:
      if (in_channels != 1) fail("depthwise layers list C = 1 per channel");
      break;
    case LayerKind::pwconv:
      if (kernel_size != 1) fail("pointwise layers must have k = 1");
      break;
    case LayerKind::conv:
      break;
  }
  if (alpha_channels < 1 || alpha_channels > in_channels) {
    fail("c=" + std::to_string(alpha_channels) + " outside [1, C=" + std::to_string(in_channels) + "]");
  }
  if (alpha_size < 1 || alpha_size > kernel_size) {
    fail("n=" + std::to_string(alpha_size) + " outside [1, N=" + std::to_string(kernel_size) + "]");
  }
  if (stride < 1 || padding < 0 || dilation < 1) fail("invalid stride/padding/dilation");
  (void)out_height();
  (void)out_width();
}

StructuredConfig LayerSpec::structure() const {
  if (kind == LayerKind::linear) return {in_channels, 1, alpha_channels, 1};
  return {in_channels, kernel_size, alpha_channels, alpha_size};
}

ConvGeometry LayerSpec::geometry() const {
  return ConvGeometry::uniform(stride, padding, dilation,
                               kind == LayerKind::dwconv ? static_cast<int>(out_channels) : 1);
}

std::size_t LayerSpec::input_channels() const {
  return kind == LayerKind::dwconv ? out_channels : in_channels;
}

std::size_t LayerSpec::out_height() const {
  if (kind == LayerKind::linear) return 1;
  return conv_output_extent(in_height, kernel_size, stride, padding, dilation);
}

std::size_t LayerSpec::out_width() const {
  if (kind == LayerKind::linear) return 1;
  return conv_output_extent(in_width, kernel_size, stride, padding, dilation);
}

std::size_t LayerSpec::pooled_height() const {
  return conv_output_extent(in_height, kernel_size - alpha_size + 1, 1, padding, dilation);
}

std::size_t LayerSpec::pooled_width() const {
  return conv_output_extent(in_width, kernel_size - alpha_size + 1, 1, padding, dilation);
}

Ratio Ratio::of(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw Error("ratio with zero denominator");
  const auto g = std::gcd(num, den);
  return g ? Ratio{num / g, den / g} : Ratio{0, 1};
}

CostReport layer_costs(const LayerSpec& spec) {
  spec.validate();
  CostReport r;
  if (spec.kind == LayerKind::linear) {
    const std::uint64_t p = spec.out_channels, q = spec.in_channels, rr = spec.alpha_channels;
    r.params_before = r.mults_before = p * q;
    r.params_after = r.mults_after = p * rr;
    r.adds_before = p * (q - 1);
    r.adds_after = rr * (q - rr) + p * (rr - 1);
    r.compression_ratio = Ratio::of(q, rr);
    return r;
  }
  // Depthwise layers are groups of single-channel kernels; every group owns
  // its own sum-pool.
  const std::uint64_t groups = spec.kind == LayerKind::dwconv ? spec.out_channels : 1;
  const std::uint64_t cout_g = spec.out_channels / groups;
  const std::uint64_t c_big = spec.in_channels, n_big = spec.kernel_size;
  const std::uint64_t c_small = spec.alpha_channels, n_small = spec.alpha_size;
  const std::uint64_t outputs = spec.out_height() * spec.out_width();
  const std::uint64_t pooled = spec.pooled_height() * spec.pooled_width();
  const std::uint64_t full = c_big * n_big * n_big, reduced = c_small * n_small * n_small;
  const std::uint64_t window = (c_big - c_small + 1) * (n_big - n_small + 1) * (n_big - n_small + 1);

  r.params_before = groups * cout_g * full;
  r.params_after = groups * cout_g * reduced;
  r.mults_before = groups * full * cout_g * outputs;
  r.mults_after = groups * reduced * cout_g * outputs;
  r.adds_before = groups * (full - 1) * cout_g * outputs;
  r.adds_after = groups * ((window - 1) * c_small * pooled + (reduced - 1) * cout_g * outputs);
  r.compression_ratio = Ratio::of(full, reduced);
  return r;
}

namespace {

// Line number of each top-level array element's opening brace.
std::vector<std::size_t> element_lines(std::string_view text) {
  std::vector<std::size_t> lines;
  std::size_t line = 1;
  int depth = 0;
  bool in_string = false, escaped = false;
  for (char ch : text) {
    if (ch == '\n') ++line;
    if (in_string) {
      if (escaped) escaped = false;
      else if (ch == '\\') escaped = true;
      else if (ch == '"') in_string = false;
      continue;
    }
    if (ch == '"') in_string = true;
    else if (ch == '[' || ch == '{') {
      if (ch == '{' && depth == 1) lines.push_back(line);
      ++depth;
    } else if (ch == ']' || ch == '}') {
      --depth;
    }
  }
  return lines;
}

std::size_t line_of_offset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

}  // namespace

void propagate_spatial(std::vector<LayerSpec>& layers, std::size_t input_height,
                       std::size_t input_width) {
  std::size_t h = input_height, w = input_width;
  for (auto& l : layers) {
    if (l.kind == LayerKind::linear) {
      l.in_height = l.in_width = 1;
      h = w = 1;
      continue;
    }
    l.in_height = h;
    l.in_width = w;
    try {
      h = l.out_height();
      w = l.out_width();
    } catch (const ShapeError& e) {
      throw ShapeError(l.label() + ": " + e.what());
    }
  }
}

std::vector<LayerSpec> parse_network_text(std::string_view text, std::size_t input_height,
                                          std::size_t input_width) {
  using nlohmann::json;
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) {
    throw ParseError("empty network: file contains no layers");
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("parse error at line " + std::to_string(line_of_offset(text, e.byte)) + ": " +
                     e.what());
  }
  if (!doc.is_array()) throw ParseError("parse error at line 1: network spec must be a JSON array");
  if (doc.empty()) throw ParseError("empty network: no layers declared");
  const auto lines = element_lines(text);

  std::vector<LayerSpec> layers;
  layers.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& obj = doc[i];
    const std::size_t line = i < lines.size() ? lines[i] : 0;
    const std::string where = "line " + std::to_string(line);
    if (!obj.is_object()) throw ParseError("parse error at " + where + ": layer entry must be an object");
    LayerSpec l;
    try {
      l.index = obj.value("index", i + 1);
      l.name = obj.value("name", std::string{});
      l.kind = parse_layer_kind(obj.at("kind").get<std::string>());
      l.out_channels = obj.at("cout").get<std::size_t>();
      l.in_channels = obj.at("cin").get<std::size_t>();
      l.kernel_size = obj.value("k", std::size_t{1});
      l.alpha_channels = obj.at("c").get<std::size_t>();
      l.alpha_size = obj.value("n", std::size_t{1});
      l.stride = obj.value("stride", 1);
      l.padding = obj.value("pad", 0);
      l.dilation = obj.value("dilation", 1);
    } catch (const json::exception& e) {
      throw ParseError("parse error at " + where + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("parse error at " + where + ": " + e.what());
    }
    try {
      l.validate();
    } catch (const ConstraintError& e) {
      throw ConstraintError(std::string(e.what()) + " (" + where + ")");
    } catch (const ShapeError&) {
      // Spatial extents are only known after propagation.
    }
    layers.push_back(std::move(l));
  }
  propagate_spatial(layers, input_height, input_width);
  for (const auto& l : layers) l.validate();
  return layers;
}

std::vector<LayerSpec> parse_network_spec(const std::filesystem::path& path,
                                          std::size_t input_height, std::size_t input_width) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open network spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_network_text(ss.str(), input_height, input_width);
}

NetworkCostReport aggregate(std::span<const CostReport> reports) {
  if (reports.empty()) throw Error("aggregate: no layer reports");
  NetworkCostReport net;
  for (const auto& r : reports) {
    net.totals.params_before += r.params_before;
    net.totals.params_after += r.params_after;
    net.totals.mults_before += r.mults_before;
    net.totals.mults_after += r.mults_after;
    net.totals.adds_before += r.adds_before;
    net.totals.adds_after += r.adds_after;
  }
  const auto& t = net.totals;
  net.totals.compression_ratio = t.params_after ? Ratio::of(t.params_before, t.params_after) : Ratio{0, 1};
  auto frac = [](std::uint64_t a, std::uint64_t b) {
    return b ? static_cast<double>(a) / static_cast<double>(b) : 1.0;
  };
  net.params_ratio = frac(t.params_after, t.params_before);
  net.mults_ratio = frac(t.mults_after, t.mults_before);
  net.adds_ratio = frac(t.adds_after, t.adds_before);
  net.layer_count = reports.size();
  return net;
}

std::vector<ConfigChoice> generate_config(std::span<const LayerSpec> layers, double target_ratio,
                                          std::vector<std::string>* warnings) {
  if (!(target_ratio >= 1.0)) throw ConstraintError("constraint violation: target ratio must be >= 1");
  std::vector<ConfigChoice> out;
  out.reserve(layers.size());
  for (const auto& l : layers) {
    ConfigChoice choice;
    const std::size_t c_big = l.in_channels, n_big = l.kernel_size;
    const double capacity = static_cast<double>(c_big * n_big * n_big);
    if (target_ratio > capacity) {
      choice.alpha_channels = 1;
      choice.alpha_size = 1;
      choice.clamped = true;
      if (warnings) {
        warnings->push_back(l.label() + ": target ratio " + std::to_string(target_ratio) +
                            " exceeds CN^2 = " + std::to_string(c_big * n_big * n_big) +
                            "; clamped to c=1, n=1");
      }
    } else if (l.kind == LayerKind::dwconv) {
      choice.alpha_channels = 1;
      choice.alpha_size = n_big;
      // Largest n meeting the target.
      for (std::size_t n = n_big; n >= 1; --n) {
        if (static_cast<double>(n_big * n_big) / static_cast<double>(n * n) >= target_ratio) {
          choice.alpha_size = n;
          break;
        }
        if (n == 1) break;
      }
    } else {
      choice.alpha_size = n_big;
      const double c = std::round(static_cast<double>(c_big) / target_ratio);
      choice.alpha_channels = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1.0, c)), 1, c_big);
    }
    choice.achieved = Ratio::of(c_big * n_big * n_big,
                                choice.alpha_channels * choice.alpha_size * choice.alpha_size);
    out.push_back(choice);
  }
  return out;
}

namespace {

using C = CountedScalar;

std::vector<C> counted(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Reference direct convolution: every kernel tap costs one multiply, including
// taps that land in the zero padding.
std::vector<C> counted_conv(const std::vector<C>& x, std::size_t channels, std::size_t h,
                            std::size_t w, const std::vector<C>& k, std::size_t out_ch,
                            std::size_t kn, const ConvGeometry& g, std::size_t& oh, std::size_t& ow) {
  const auto groups = static_cast<std::size_t>(g.groups);
  const std::size_t cin_g = channels / groups, cout_g = out_ch / groups;
  oh = conv_output_extent(h, kn, g.stride[0], g.padding[0], g.dilation[0]);
  ow = conv_output_extent(w, kn, g.stride[1], g.padding[1], g.dilation[1]);
  std::vector<C> y(out_ch * oh * ow);
  for (std::size_t o = 0; o < out_ch; ++o) {
    const std::size_t grp = o / cout_g;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        C acc;
        bool first = true;
        for (std::size_t ci = 0; ci < cin_g; ++ci) {
          for (std::size_t u = 0; u < kn; ++u) {
            for (std::size_t v = 0; v < kn; ++v) {
              const auto r = static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(g.stride[0]) + u * static_cast<std::size_t>(g.dilation[0])) - g.padding[0];
              const auto c = static_cast<std::ptrdiff_t>(j * static_cast<std::size_t>(g.stride[1]) + v * static_cast<std::size_t>(g.dilation[1])) - g.padding[1];
              C xv = 0.0;
              if (r >= 0 && c >= 0 && r < static_cast<std::ptrdiff_t>(h) && c < static_cast<std::ptrdiff_t>(w)) {
                xv = x[((grp * cin_g + ci) * h + static_cast<std::size_t>(r)) * w + static_cast<std::size_t>(c)];
              }
              const C term = xv * k[((o * cin_g + ci) * kn + u) * kn + v];
              acc = first ? term : acc + term;
              first = false;
            }
          }
        }
        y[(o * oh + i) * ow + j] = acc;
      }
    }
  }
  return y;
}

// Stride-1 sum-pool; each output costs window - 1 additions.
std::vector<C> counted_pool(const std::vector<C>& x, std::size_t channels, std::size_t h,
                            std::size_t w, const PoolDims& d, int pad, int dil, std::size_t& oc,
                            std::size_t& oh, std::size_t& ow) {
  oc = channels - d.channels + 1;
  oh = conv_output_extent(h, d.height, 1, pad, dil);
  ow = conv_output_extent(w, d.width, 1, pad, dil);
  std::vector<C> y(oc * oh * ow);
  for (std::size_t c = 0; c < oc; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        C acc;
        bool first = true;
        for (std::size_t a = 0; a < d.channels; ++a) {
          for (std::size_t u = 0; u < d.height; ++u) {
            for (std::size_t v = 0; v < d.width; ++v) {
              const auto r = static_cast<std::ptrdiff_t>(i + u * static_cast<std::size_t>(dil)) - pad;
              const auto col = static_cast<std::ptrdiff_t>(j + v * static_cast<std::size_t>(dil)) - pad;
              C xv = 0.0;
              if (r >= 0 && col >= 0 && r < static_cast<std::ptrdiff_t>(h) && col < static_cast<std::ptrdiff_t>(w)) {
                xv = x[((c + a) * h + static_cast<std::size_t>(r)) * w + static_cast<std::size_t>(col)];
              }
              acc = first ? xv : acc + xv;
              first = false;
            }
          }
        }
        y[(c * oh + i) * ow + j] = acc;
      }
    }
  }
  return y;
}

std::vector<C> counted_matvec(const std::vector<C>& m, std::size_t rows, std::size_t cols,
                              const std::vector<C>& x) {
  std::vector<C> y(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    C acc = m[i * cols] * x[0];
    for (std::size_t j = 1; j < cols; ++j) acc = acc + m[i * cols + j] * x[j];
    y[i] = acc;
  }
  return y;
}

constexpr std::size_t kSizeGuard = 1'000'000;

}  // namespace

InstrumentedCounts count_ops_instrumented(const LayerSpec& spec, std::uint64_t seed) {
  spec.validate();
  InstrumentedCounts counts;
  if (spec.kind == LayerKind::linear) {
    const std::size_t p = spec.out_channels, q = spec.in_channels, r = spec.alpha_channels;
    if (p * q > kSizeGuard) throw Error("size guard exceeded for " + spec.label());
    const auto x = counted(random_tensor(seed, {q}));
    const auto w = counted(random_tensor(seed + 1, {p, q}));
    const auto small = counted(random_tensor(seed + 2, {p, r}));
    {
      CountingScope scope(counts.before);
      (void)counted_matvec(w, p, q, x);
    }
    {
      CountingScope scope(counts.after);
      std::vector<C> pooled(r);
      for (std::size_t i = 0; i < r; ++i) {
        C acc = x[i];
        for (std::size_t k = 1; k < q - r + 1; ++k) acc = acc + x[i + k];
        pooled[i] = acc;
      }
      (void)counted_matvec(small, p, r, pooled);
    }
    return counts;
  }

  const std::size_t channels = spec.input_channels();
  const std::size_t h = spec.in_height, w = spec.in_width;
  const std::size_t cin_g = spec.in_channels, kn = spec.kernel_size;
  const StructuredConfig cfg = spec.structure();
  const std::size_t out_elems = spec.out_channels * spec.out_height() * spec.out_width();
  if (channels * h * w > kSizeGuard || spec.out_channels * cin_g * kn * kn > kSizeGuard ||
      out_elems > kSizeGuard) {
    throw Error("size guard exceeded for " + spec.label());
  }
  const ConvGeometry geom = spec.geometry();
  const auto x = counted(random_tensor(seed, {channels, h, w}));
  const auto k = counted(random_tensor(seed + 1, {spec.out_channels, cin_g, kn, kn}));
  const auto alpha =
      counted(random_tensor(seed + 2, {spec.out_channels, cfg.alpha_channels, cfg.alpha_size, cfg.alpha_size}));
  std::size_t oh = 0, ow = 0;
  {
    CountingScope scope(counts.before);
    (void)counted_conv(x, channels, h, w, k, spec.out_channels, kn, geom, oh, ow);
  }
  {
    CountingScope scope(counts.after);
    const PoolDims pool = cfg.pool_dims();
    std::size_t pc = 0, ph = 0, pw = 0;
    const auto e = counted_pool(x, channels, h, w, pool, spec.padding, spec.dilation, pc, ph, pw);
    const ConvGeometry small{geom.stride, {0, 0}, geom.dilation, geom.groups};
    std::size_t sh = 0, sw = 0;
    (void)counted_conv(e, pc, ph, pw, alpha, spec.out_channels, cfg.alpha_size, small, sh, sw);
    if (sh != oh || sw != ow) throw Error("internal error: decomposed extents differ");
  }
  return counts;
}

}  // namespace structconv
