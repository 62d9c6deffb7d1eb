#pragma once

#include <cmath>
#include <vector>

#include "leakprobe/trace.hpp"

namespace testutil {

inline leakprobe::TokenStat tok(double lp, double mu = -4.0, double sigma = 1.0) {
  return {lp, mu, sigma};
}

inline leakprobe::ModelTrace trace_of(leakprobe::Role role, std::vector<double> lps) {
  leakprobe::ModelTrace t;
  t.role = role;
  for (double lp : lps) t.tokens.push_back(tok(lp));
  t.loss = leakprobe::mean_nll(t.tokens);
  return t;
}

// A valid record with target and pretrained traces over n_tokens tokens.
inline leakprobe::SampleRecord record(const std::string& id, leakprobe::Label label,
                                      std::vector<double> target_lps, std::vector<double> pt_lps) {
  leakprobe::SampleRecord r;
  r.sample_id = id;
  r.label = label;
  r.n_tokens = static_cast<std::int64_t>(target_lps.size()) + 1;
  r.zlib_len = 12;
  auto t = trace_of(leakprobe::Role::target, target_lps);
  t.gradnorm_theta = 0.5;
  t.gradnorm_x = 0.25;
  t.neighbor_losses = std::vector<double>{t.loss + 0.5, t.loss + 1.0};
  t.mope_losses = std::vector<double>{t.loss + 0.1};
  r.traces[leakprobe::Role::target] = t;
  if (!pt_lps.empty()) {
    auto p = trace_of(leakprobe::Role::pretrained, pt_lps);
    p.gradnorm_x = 0.75;
    p.neighbor_losses = std::vector<double>{p.loss + 0.25};
    p.mope_losses = std::vector<double>{p.loss + 0.2, p.loss};
    r.traces[leakprobe::Role::pretrained] = p;
  }
  return r;
}

}  // namespace testutil
