#pragma once

// Ablation harness: the pooling-variant grid and the auxiliary-weight sweep,
// each trained from shared seeds and scored on a held-out set.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "psp/metrics.hpp"
#include "psp/pyramid.hpp"
#include "psp/train.hpp"

namespace psp {

struct Variant {
  std::string name;
  ModelConfig model;
};

inline const std::vector<double> kAlphaSweep{0.0, 0.3, 0.4, 0.6, 0.9};

/// The pooling grid of psp_ablation_variants on top of `base`.
inline std::vector<Variant> pooling_variants(const ModelConfig& base) {
  std::vector<Variant> out;
  for (const auto& v : psp_ablation_variants()) {
    auto m = base;
    m.pyramid = v.pyramid;
    out.push_back({v.name, m});
  }
  return out;
}

/// B1236+AVE+DR with the auxiliary loss off, then at each nonzero weight.
inline std::vector<Variant> alpha_variants(const ModelConfig& base) {
  std::vector<Variant> out;
  for (double a : kAlphaSweep) {
    auto m = base;
    m.pyramid = PyramidConfig{{1, 2, 3, 6}, PoolMode::Average, true};
    m.aux_enabled = a > 0;
    m.aux_weight = a;
    std::ostringstream name;
    if (a > 0) {
      name << "alpha=" << a;
    } else {
      name << "no-aux";
    }
    out.push_back({name.str(), m});
  }
  return out;
}

struct RunResult {
  std::string variant;
  std::uint64_t seed = 0;
  double miou = 0;
  double pixel_acc = 0;
  double loss_early = 0;  // mean total loss over iterations [10, 20)
  double loss_final = 0;  // mean total loss over the last 10 iterations
  double seconds = 0;
};

namespace detail {

inline double mean_of(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  hi = std::min(hi, v.size());
  lo = std::min(lo, hi);
  if (lo == hi) return std::nan("");
  double s = 0;
  for (std::size_t i = lo; i < hi; ++i) s += v[i];
  return s / static_cast<double>(hi - lo);
}

}  // namespace detail

inline RunResult train_and_evaluate(const Variant& v, const OptimConfig& optim, const AugmentConfig& augment,
                                    const TrainOptions& opts, const std::vector<SegSample>& train,
                                    const std::vector<SegSample>& test,
                                    const std::function<void(const StepLog&)>& on_step = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(v.model, optim, augment, opts, train);
  std::vector<double> losses;
  while (!tr.done()) {
    auto log = tr.step();
    losses.push_back(log.total);
    if (on_step) on_step(log);
  }
  auto cm = evaluate(tr.model(), test, {1.0}, tr.augment_config().pad_image);
  RunResult r;
  r.variant = v.name;
  r.seed = opts.seed;
  r.miou = mean_iou(cm);
  r.pixel_acc = pixel_accuracy(cm);
  r.loss_early = detail::mean_of(losses, 10, 20);
  r.loss_final = detail::mean_of(losses, losses.size() >= 10 ? losses.size() - 10 : 0, losses.size());
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct VariantSummary {
  std::string variant;
  int runs = 0;
  double miou_mean = 0, miou_sd = 0;
  double acc_mean = 0, acc_sd = 0;
  double worst_loss_ratio = 0;  // max over runs of loss_final / loss_early
};

/// Groups results by variant, keeping first-appearance order. Spread is the
/// sample standard deviation (0 for a single run).
inline std::vector<VariantSummary> summarize(const std::vector<RunResult>& results) {
  std::vector<VariantSummary> out;
  std::map<std::string, std::vector<const RunResult*>> groups;
  for (const auto& r : results) {
    if (groups[r.variant].empty()) out.push_back({r.variant});
    groups[r.variant].push_back(&r);
  }
  auto stats = [](const std::vector<double>& xs, double& mean, double& sd) {
    mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    sd = 0;
    if (xs.size() > 1) {
      for (double x : xs) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
    }
  };
  for (auto& s : out) {
    const auto& g = groups[s.variant];
    std::vector<double> m, a;
    for (const auto* r : g) {
      m.push_back(r->miou);
      a.push_back(r->pixel_acc);
      s.worst_loss_ratio = std::max(s.worst_loss_ratio, r->loss_final / r->loss_early);
    }
    s.runs = static_cast<int>(g.size());
    stats(m, s.miou_mean, s.miou_sd);
    stats(a, s.acc_mean, s.acc_sd);
  }
  return out;
}

inline const VariantSummary& find_summary(const std::vector<VariantSummary>& s, const std::string& name) {
  auto it = std::find_if(s.begin(), s.end(), [&](const auto& v) { return v.variant == name; });
  if (it == s.end()) throw std::out_of_range("no results for variant " + name);
  return *it;
}

/// Percentages with mean +- sd, one row per variant.
inline std::string summary_table(const std::vector<VariantSummary>& rows, const std::string& first_column) {
  std::size_t w = first_column.size();
  for (const auto& r : rows) w = std::max(w, r.variant.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << first_column << "  Mean IoU(%)      Pixel Acc.(%)\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    std::ostringstream m, a;
    m << std::fixed << std::setprecision(2) << 100 * r.miou_mean << " +- " << 100 * r.miou_sd;
    a << std::fixed << std::setprecision(2) << 100 * r.acc_mean << " +- " << 100 * r.acc_sd;
    os << std::setw(static_cast<int>(w)) << r.variant << "  " << std::setw(17) << m.str() << a.str() << '\n';
  }
  return os.str();
}

inline void write_results_csv(std::ostream& os, const std::vector<RunResult>& results,
                              const std::vector<VariantSummary>& summary) {
  os << "kind,variant,seed,runs,miou,miou_sd,pixel_acc,pixel_acc_sd,loss_early,loss_final,seconds\n";
  os << std::setprecision(10);
  for (const auto& r : results) {
    os << "run," << r.variant << ',' << r.seed << ",1," << r.miou << ",0," << r.pixel_acc << ",0," << r.loss_early
       << ',' << r.loss_final << ',' << r.seconds << '\n';
  }
  for (const auto& s : summary) {
    os << "mean," << s.variant << ",," << s.runs << ',' << s.miou_mean << ',' << s.miou_sd << ',' << s.acc_mean << ','
       << s.acc_sd << ",,,\n";
  }
}

}  // namespace psp
