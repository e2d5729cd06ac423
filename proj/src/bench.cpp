#include "e2ebt/bench.hpp"

#include "e2ebt/reparam.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <stdexcept>
#include <vector>

namespace e2ebt {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void fill_logits(Matrix& m, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 4.0 * rng.uniform() - 2.0;
}

}  // namespace

std::string BenchReport::to_json() const {
  nlohmann::ordered_json j;
  j["vocab"] = vocab;
  j["seq_len"] = seq_len;
  j["batch"] = batch;
  j["repeats"] = repeats;
  j["crt_seconds"] = crt_seconds;
  j["gst_seconds"] = gst_seconds;
  j["ratio"] = ratio;
  j["softmax_counts"] = {{"crt", crt_softmax}, {"gst", gst_softmax}};
  return j.dump();
}

BenchReport bench_reparam(int vocab, int seq_len, int batch, int repeats, std::uint64_t seed) {
  if (vocab < 1 || seq_len < 1 || batch < 1 || repeats < 1) throw std::invalid_argument("bench sizes must be >= 1");
  using clock = std::chrono::steady_clock;
  BenchReport report{vocab, seq_len, batch, repeats};
  std::vector<double> crt_times, gst_times;
  Matrix logits(batch, vocab);
  for (int r = 0; r < repeats; ++r) {
    for (int method = 0; method < 2; ++method) {
      Rng input_rng(seed + static_cast<std::uint64_t>(r));
      Rng sample_rng(seed * 7919 + static_cast<std::uint64_t>(r));
      double seconds = 0;
      SoftmaxCounter counter;
      for (int t = 0; t < seq_len; ++t) {
        fill_logits(logits, input_rng);
        const Tensor x = Tensor::parameter(logits);
        const auto start = clock::now();
        Tensor z;
        if (method == 0) {
          const Tensor p = softmax(x);
          const std::vector<int> ids = sample_ids(p.value(), SamplingStrategy::stochastic(), sample_rng);
          z = crt(p, ids, 1.0).z;
        } else {
          z = gumbel_softmax(x, 1.0, sample_rng).z;
        }
        seconds += std::chrono::duration<double>(clock::now() - start).count();
      }
      (method == 0 ? crt_times : gst_times).push_back(seconds);
      (method == 0 ? report.crt_softmax : report.gst_softmax) = counter.count();
    }
  }
  report.crt_seconds = median(crt_times);
  report.gst_seconds = median(gst_times);
  report.ratio = report.gst_seconds / report.crt_seconds;
  return report;
}

}  // namespace e2ebt
