#include <algorithm>
#include <cmath>

#include "structconv/error.hpp"
#include "structconv/training.hpp"

namespace structconv {

namespace {

constexpr std::uint64_t kTeacherSalt = 0x7EAC4E5ULL;
constexpr std::size_t kMaxTeacherAttempts = 64;
constexpr double kBalanceTolerance = 0.10;

ToyModelSpec teacher_spec() {
  ToyModelSpec spec;
  spec.layers = {
      {ToyLayerKind::conv, "t1", 8, 3, ConvGeometry::uniform(1, 1, 1), 3, 3},
      {ToyLayerKind::relu, "", 0, 1, {}, 1, 1},
      {ToyLayerKind::conv, "t2", 8, 3, ConvGeometry::uniform(2, 1, 1), 8, 3},
      {ToyLayerKind::relu, "", 0, 1, {}, 1, 1},
      {ToyLayerKind::global_avg_pool, "", 0, 1, {}, 1, 1},
      {ToyLayerKind::linear, "t3", kToyClasses, 1, {}, 8, 1},
  };
  return spec;
}

std::vector<Tensor> draw_inputs(CounterRng& rng, std::size_t count) {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor x({3, 8, 8});
    for (auto& v : x.data()) v = 2.0 * rng.next_unit() - 1.0;
    out.push_back(std::move(x));
  }
  return out;
}

int argmax_label(const Tensor& logits) {
  return static_cast<int>(std::max_element(logits.values().begin(), logits.values().end()) -
                          logits.values().begin());
}

bool balanced(const std::vector<std::size_t>& hist, std::size_t total) {
  const double share = static_cast<double>(total) / static_cast<double>(hist.size());
  return std::all_of(hist.begin(), hist.end(), [&](std::size_t h) {
    return std::abs(static_cast<double>(h) - share) <= kBalanceTolerance * share;
  });
}

// Shifts the output bias until argmax frequencies on `logits` are near uniform.
void calibrate_bias(Tensor& bias, const std::vector<Tensor>& logits) {
  const std::size_t k = bias.size();
  double spread = 0.0;
  for (const auto& l : logits) {
    const auto [lo, hi] = std::minmax_element(l.values().begin(), l.values().end());
    spread += *hi - *lo;
  }
  double step = spread / static_cast<double>(logits.size());
  for (int iter = 0; iter < 400; ++iter) {
    std::vector<double> freq(k, 0.0);
    for (const auto& l : logits) {
      Tensor shifted = axpby(1.0, l, 1.0, bias);
      freq[static_cast<std::size_t>(argmax_label(shifted))] += 1.0;
    }
    for (std::size_t c = 0; c < k; ++c) {
      bias[c] -= step * (freq[c] / static_cast<double>(logits.size()) - 1.0 / static_cast<double>(k));
    }
    step *= 0.99;
  }
}

}  // namespace

ToyData make_toy_dataset(std::uint64_t seed) {
  ToyData data;
  CounterRng rng(seed);
  data.train.inputs = draw_inputs(rng, kToyTrainSize);
  data.test.inputs = draw_inputs(rng, kToyTestSize);

  const std::uint64_t base = splitmix64_mix(seed ^ kTeacherSalt);
  for (std::size_t attempt = 0; attempt < kMaxTeacherAttempts; ++attempt) {
    const std::uint64_t teacher_seed = base + attempt;
    Model teacher = build_model(teacher_spec(), teacher_seed, false);
    auto& head = std::get<LinearOp>(teacher.ops.back());

    std::vector<Tensor> logits;
    logits.reserve(kToyTrainSize);
    for (const auto& x : data.train.inputs) logits.push_back(forward(teacher, x));
    calibrate_bias(head.bias, logits);

    auto label_all = [&](Dataset& d) {
      d.labels.clear();
      for (const auto& x : d.inputs) d.labels.push_back(argmax_label(forward(teacher, x)));
    };
    label_all(data.train);
    label_all(data.test);
    if (balanced(class_histogram(data.train, kToyClasses), kToyTrainSize) &&
        balanced(class_histogram(data.test, kToyClasses), kToyTestSize)) {
      data.teacher = std::move(teacher);
      data.teacher_seed = teacher_seed;
      return data;
    }
  }
  throw Error("toy dataset: no balanced teacher found for seed " + std::to_string(seed));
}

}  // namespace structconv
