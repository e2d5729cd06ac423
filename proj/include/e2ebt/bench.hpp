#pragma once

// Timing of the reparameterization step alone: logits in, differentiable
// one-hot rows out, for CRT and straight-through Gumbel-softmax.

#include <cstdint>
#include <string>

namespace e2ebt {

struct BenchReport {
  int vocab = 0;
  int seq_len = 0;
  int batch = 0;
  int repeats = 0;
  double crt_seconds = 0;  // median over repeats
  double gst_seconds = 0;
  double ratio = 0;  // gst / crt
  std::uint64_t crt_softmax = 0;  // per repeat
  std::uint64_t gst_softmax = 0;

  std::string to_json() const;
};

// Each repeat decodes seq_len steps of a (batch x vocab) logits matrix. Logits
// are generated outside the timed region and are identical for both methods.
BenchReport bench_reparam(int vocab, int seq_len, int batch, int repeats, std::uint64_t seed = 1);

}  // namespace e2ebt
