#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "structconv/commands.hpp"
#include "structconv/structured.hpp"
#include "structconv/tensor.hpp"

#include <json.hpp>

using namespace structconv;
namespace fs = std::filesystem;

namespace {

const std::string kData = STRUCTCONV_DATA_DIR;

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Tensor structured_layer(std::uint64_t seed, std::size_t cout, const StructuredConfig& cfg) {
  const std::size_t per = cfg.channels * cfg.kernel_size * cfg.kernel_size;
  Tensor w({cout, cfg.channels, cfg.kernel_size, cfg.kernel_size});
  for (std::size_t o = 0; o < cout; ++o) {
    const Tensor k = reconstruct(random_tensor(seed + o, cfg.alpha_shape()), cfg);
    std::copy(k.values().begin(), k.values().end(), w.data().begin() + static_cast<std::ptrdiff_t>(o * per));
  }
  return w;
}

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "structconv");
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "structconv_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string write_config(const fs::path& dir, const std::string& text) {
  const auto path = dir / "net.json";
  std::ofstream(path) << text;
  return path.string();
}

const char* kSmallNet = R"([
  {"index": 1, "kind": "conv", "cout": 4, "cin": 3, "k": 3, "c": 2, "n": 2, "stride": 1, "pad": 1, "dilation": 1},
  {"index": 2, "kind": "dwconv", "cout": 4, "cin": 1, "k": 3, "c": 1, "n": 2, "stride": 2, "pad": 1, "dilation": 1},
  {"index": 3, "kind": "pwconv", "cout": 6, "cin": 4, "k": 1, "c": 3, "n": 1, "stride": 1, "pad": 0, "dilation": 1},
  {"index": 4, "name": "head", "kind": "linear", "cout": 5, "cin": 6, "k": 1, "c": 3, "n": 1}
])";

const char* kIdentityNet = R"([
  {"index": 1, "kind": "conv", "cout": 8, "cin": 3, "k": 3, "c": 3, "n": 3, "stride": 2, "pad": 1, "dilation": 1},
  {"index": 2, "kind": "pwconv", "cout": 8, "cin": 8, "k": 1, "c": 8, "n": 1, "stride": 1, "pad": 0, "dilation": 1},
  {"index": 3, "kind": "linear", "cout": 4, "cin": 8, "k": 1, "c": 8, "n": 1}
])";

}  // namespace

TEST_CASE("verify") {
  const auto dir = scratch("verify");
  const auto net = write_config(dir, kSmallNet);
  SUBCASE("structured layers pass") {
    const auto r = cli({"verify", "--config", net, "--seed", "7", "--format", "json"});
    CHECK(r.code == 0);
    const auto doc = nlohmann::json::parse(r.out);
    CHECK(doc["passed"] == true);
    REQUIRE(doc["layers"].size() == 4);
    for (const auto& l : doc["layers"]) CHECK(l["max_relative_error"].get<double>() <= 1e-10);
  }
  SUBCASE("mobilenet-v2 table A") {
    const auto r = cli({"verify", "--config", kData + "/struct_mv2_a.json", "--seed", "7", "--trials", "1"});
    CHECK(r.code == 0);
    CHECK(r.out.find("all layers equivalent") != std::string::npos);
  }
  SUBCASE("corrupted coefficients fail") {
    const auto r = cli({"verify", "--config", net, "--seed", "7", "--trials", "2", "--corrupt-alpha"});
    CHECK(r.code == 1);
    CHECK(r.err.find("equivalence failure") != std::string::npos);
  }
  SUBCASE("constraint violation") {
    const auto bad = write_config(
        dir, R"([{"index": 3, "name": "wide", "kind": "conv", "cout": 4, "cin": 3, "k": 3, "c": 5, "n": 3}])");
    const auto r = cli({"verify", "--config", bad, "--seed", "1"});
    CHECK(r.code == 2);
    CHECK(r.err.find("constraint violation") != std::string::npos);
    CHECK(r.err.find("layer 3 (wide)") != std::string::npos);
    CHECK(r.out.empty());
  }
  SUBCASE("usage errors") {
    CHECK(cli({"verify", "--config", net}).code == 2);
    CHECK(cli({"verify", "--config", net, "--seed", "x"}).code == 2);
    CHECK(cli({"verify", "--config", net, "--seed", "1", "--trials", "0"}).code == 2);
    CHECK(cli({"verify", "--config", (dir / "nope.json").string(), "--seed", "1"}).code == 2);
    CHECK(cli({"verify", "--config", net, "--seed", "1", "--format", "yaml"}).code == 2);
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({"--help"}).code == 0);
  }
}

TEST_CASE("analyze") {
  const auto dir = scratch("analyze");
  SUBCASE("json report") {
    const auto r = cli({"analyze", "--config", kData + "/struct_mv2_a.json", "--format", "json"});
    REQUIRE(r.code == 0);
    const auto doc = nlohmann::json::parse(r.out);
    CHECK(doc["layers"].size() == 53);
    const double after = doc["totals"]["params_after"].get<double>();
    CHECK(std::abs(after / 2.62e6 - 1.0) <= 0.05);
    CHECK(nlohmann::json::parse(doc.dump()) == doc);
  }
  SUBCASE("table report") {
    const auto r = cli({"analyze", "--config", kData + "/struct_mv2_b.json", "--input-size", "224x224"});
    CHECK(r.code == 0);
    CHECK(r.out.find("total") != std::string::npos);
  }
  SUBCASE("identity config") {
    const auto net = write_config(dir, kIdentityNet);
    const auto r = cli({"analyze", "--config", net, "--input-size", "32x32", "--format", "json"});
    REQUIRE(r.code == 0);
    const auto doc = nlohmann::json::parse(r.out);
    for (const auto& l : doc["layers"]) {
      CHECK(l["compression_ratio"] == "1/1");
      CHECK(l["compression_ratio_value"].get<double>() == 1.0);
    }
    CHECK(doc["totals"]["params_ratio"].get<double>() == 1.0);
    CHECK(doc["totals"]["mults_ratio"].get<double>() == 1.0);
  }
  SUBCASE("target ratio") {
    const auto net = write_config(dir, kIdentityNet);
    const auto r = cli({"analyze", "--config", net, "--target-ratio", "2", "--format", "json"});
    CHECK(r.code == 0);
    const auto doc = nlohmann::json::parse(r.out);
    CHECK(doc["layers"][1]["c"] == 4);
  }
  SUBCASE("errors") {
    const auto broken = write_config(dir, "[\n  {\"kind\": \"conv\",\n  \"cout\" 3}\n]");
    const auto r = cli({"analyze", "--config", broken});
    CHECK(r.code == 2);
    CHECK(r.err.find("line 3") != std::string::npos);
    CHECK(cli({"analyze", "--config", kData + "/struct_mv2_a.json", "--input-size", "224x"}).code == 2);
    CHECK(cli({"analyze", "--config", kData + "/struct_mv2_a.json", "--input-size", "0x9"}).code == 2);
    const auto big = write_config(dir, R"([{"kind": "conv", "cout": 2, "cin": 3, "k": 5, "c": 1, "n": 1}])");
    const auto small = cli({"analyze", "--config", big, "--input-size", "3x3"});
    CHECK(small.code == 2);
    CHECK(small.out.empty());
  }
}

TEST_CASE("decompose") {
  const auto dir = scratch("decompose");
  const auto net = write_config(dir, kSmallNet);
  const auto weights = dir / "weights";
  fs::create_directories(weights);

  // Structured weights for every layer of the small network.
  const std::vector<StructuredConfig> cfgs{{3, 3, 2, 2}, {1, 3, 1, 2}, {4, 1, 3, 1}};
  const std::vector<std::size_t> couts{4, 4, 6};
  std::vector<Tensor> full;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    full.push_back(structured_layer(100 + 10 * i, couts[i], cfgs[i]));
    write_tensor(weights / ("layer_" + std::to_string(i + 1) + ".stcv"), full.back());
  }
  write_tensor(weights / "layer_1.bias.stcv", random_tensor(110, {4}));
  full.push_back(reconstruct_linear(random_tensor(111, {5, 3}), 6));
  write_tensor(weights / "layer_4.stcv", full.back());

  SUBCASE("structured weights round trip") {
    const auto out = dir / "out";
    const auto r = cli({"decompose", "--weights", weights.string(), "--config", net, "--out", out.string(),
                        "--format", "json"});
    REQUIRE(r.code == 0);
    const auto doc = nlohmann::json::parse(r.out);
    for (const auto& l : doc["layers"]) CHECK(l["residual"].get<double>() <= 1e-12);

    const std::vector<ConvGeometry> geoms{ConvGeometry::uniform(1, 1, 1), ConvGeometry::uniform(2, 1, 1, 4),
                                          ConvGeometry{}};
    const std::vector<Shape> inputs{{3, 9, 9}, {4, 9, 9}, {4, 5, 5}};
    const Tensor bias1 = read_tensor(weights / "layer_1.bias.stcv");
    for (std::size_t i = 0; i < 3; ++i) {
      const auto layer = std::get<DecomposedConvLayer>(load_decomposed(out, "layer_" + std::to_string(i + 1)));
      const Tensor x = random_tensor(200 + i, inputs[i]);
      Tensor direct = conv(x, full[i], geoms[i]);
      if (i == 0) direct = add_channel_bias(direct, bias1);
      CHECK(max_relative_error(forward_decomposed(x, layer), direct) <= 1e-10);
    }
    const auto head = std::get<DecomposedLinearLayer>(load_decomposed(out, "layer_4"));
    const Tensor v = random_tensor(300, {6});
    CHECK(max_relative_error(forward_linear(v, head), linear(full[3], v)) <= 1e-10);
  }
  SUBCASE("single weight file") {
    const auto one = write_config(dir, R"([{"index": 1, "kind": "conv", "cout": 4, "cin": 3, "k": 3, "c": 2, "n": 2, "pad": 1}])");
    const auto r = cli({"decompose", "--weights", (weights / "layer_1.stcv").string(), "--config", one, "--out",
                        (dir / "single").string()});
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "single" / "layer_1.alpha.stcv"));
    CHECK(fs::exists(dir / "single" / "layer_1.json"));
  }
  SUBCASE("unstructured weights breach the tolerance") {
    write_tensor(weights / "layer_3.stcv", random_tensor(400, {6, 4, 1, 1}));
    const auto r = cli({"decompose", "--weights", weights.string(), "--config", net, "--out",
                        (dir / "bad").string(), "--tol", "1e-6"});
    CHECK(r.code == 1);
    CHECK(r.err.find("worst is layer 3") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "bad" / "layer_3.alpha.stcv"));
  }
  SUBCASE("shape mismatch") {
    write_tensor(weights / "layer_2.stcv", random_tensor(401, {4, 1, 5, 5}));
    const auto r = cli({"decompose", "--weights", weights.string(), "--config", net, "--out",
                        (dir / "shape").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("layer 2") != std::string::npos);
  }
  SUBCASE("single file with a multi-layer config") {
    const auto r = cli({"decompose", "--weights", (weights / "layer_1.stcv").string(), "--config", net, "--out",
                        (dir / "x").string()});
    CHECK(r.code == 2);
  }
}

TEST_CASE("train-toy") {
  const auto dir = scratch("train");
  const auto log = (dir / "log.jsonl").string();
  const auto r = cli({"train-toy", "--seed", "3", "--epochs", "1", "--lambda", "1.0", "--log", log,
                      "--format", "json"});
  REQUIRE(r.code == 0);
  const auto doc = nlohmann::json::parse(r.out);
  CHECK(doc["epochs"] == 1);
  CHECK(doc["mode"] == "regularized");
  std::ifstream f(log);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(f, line)) {
    CHECK(nlohmann::json::accept(line));
    ++lines;
  }
  CHECK(lines == 2);

  CHECK(cli({"train-toy", "--seed", "3", "--mode", "sgd"}).code == 2);
  CHECK(cli({"train-toy", "--lambda", "1"}).code == 2);
  CHECK(cli({"train-toy", "--seed", "3", "--epochs", "1", "--lr", "1e150"}).code == 1);
}

TEST_CASE("same seed and flags give byte-identical output") {
  const auto dir = scratch("determinism");
  const auto net = write_config(dir, kSmallNet);
  const std::vector<std::vector<std::string>> commands{
      {"verify", "--config", net, "--seed", "11", "--trials", "3", "--format", "json"},
      {"analyze", "--config", kData + "/struct_effnet.json", "--format", "json"},
      {"train-toy", "--seed", "5", "--epochs", "1", "--format", "json"},
  };
  for (const auto& c : commands) {
    const auto a = cli(c), b = cli(c);
    CHECK(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(nlohmann::json::accept(a.out));
  }
  const auto other = cli({"verify", "--config", net, "--seed", "12", "--trials", "3", "--format", "json"});
  CHECK(other.out != cli(commands[0]).out);
}
