#pragma once

// Training loop: seeded batch schedule, augmentation, forward/backward, SGD
// with the poly schedule. Every random draw is derived from (seed, epoch) or
// (seed, iteration), so a run resumed from a checkpoint replays exactly.

#include <algorithm>
#include <cstdint>
#include <future>
#include <random>
#include <vector>

#include "psp/checkpoint.hpp"
#include "psp/data.hpp"
#include "psp/model.hpp"
#include "psp/optim.hpp"

namespace psp {

struct TrainOptions {
  std::int64_t batch_size = 4;
  std::uint64_t seed = 0;
  int threads = 1;  // augmentation workers; results do not depend on this
};

struct StepLog {
  std::int64_t iter = 0;
  double lr = 0;
  double total = 0;
  double main = 0;
  double aux = 0;
};

namespace detail {

inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index,
                                   std::uint64_t slot = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32), static_cast<std::uint32_t>(slot)};
  return std::mt19937_64(seq);
}

inline constexpr std::uint64_t kEpochStream = 1;
inline constexpr std::uint64_t kAugmentStream = 2;

}  // namespace detail

class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const OptimConfig& optim_cfg, AugmentConfig augment,
          const TrainOptions& opts, std::vector<SegSample> data)
      : model_(model_cfg, opts.seed),
        optim_(optim_cfg),
        augment_(augment),
        opts_(opts),
        data_(std::move(data)) {
    if (data_.empty()) throw std::invalid_argument("training set is empty");
    if (opts.batch_size < 1) throw ConfigError("batch_size must be positive");
    augment_.validate();
    augment_.pad_image = channel_mean(data_);
    for (const auto& s : data_) validate_labels(s.labels, model_cfg.num_classes);
    params_ = model_.parameters();
  }

  std::int64_t iter() const { return iter_; }
  void set_iter(std::int64_t it) { iter_ = it; }
  bool done() const { return iter_ >= optim_.config().max_iter; }

  PSPNet<float>& model() { return model_; }
  const PSPNet<float>& model() const { return model_; }
  SGD<float>& optimizer() { return optim_; }
  const AugmentConfig& augment_config() const { return augment_; }

  /// The augmented batch consumed by iteration `it`.
  SegBatch batch_for(std::int64_t it) {
    const auto n = static_cast<std::int64_t>(data_.size());
    const auto per_epoch = (n + opts_.batch_size - 1) / opts_.batch_size;
    const auto epoch = it / per_epoch;
    if (epoch != cached_epoch_) {
      auto rng = detail::derived_rng(opts_.seed, detail::kEpochStream, static_cast<std::uint64_t>(epoch));
      epoch_ = epoch_batches(data_.size(), static_cast<std::size_t>(opts_.batch_size), rng);
      cached_epoch_ = epoch;
    }
    const auto& idx = epoch_[static_cast<std::size_t>(it % per_epoch)];
    std::vector<SegSample> out(idx.size());
    auto work = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t slot = lo; slot < hi; ++slot) {
        auto rng = detail::derived_rng(opts_.seed, detail::kAugmentStream, static_cast<std::uint64_t>(it), slot);
        out[slot] = augment(data_[idx[slot]], augment_, rng);
      }
    };
    const auto workers = static_cast<std::size_t>(std::clamp<int>(opts_.threads, 1, static_cast<int>(idx.size())));
    if (workers == 1) {
      work(0, idx.size());
    } else {
      std::vector<std::future<void>> jobs;
      const auto chunk = (idx.size() + workers - 1) / workers;
      for (std::size_t lo = 0; lo < idx.size(); lo += chunk) {
        jobs.push_back(std::async(std::launch::async, work, lo, std::min(idx.size(), lo + chunk)));
      }
      for (auto& j : jobs) j.get();
    }
    return assemble_batch(out);
  }

  void save(const std::filesystem::path& path) const {
    save_checkpoint(path, model_, optim_, static_cast<std::uint64_t>(iter_));
  }

  /// Restores weights, momentum and the iteration counter; the batch and
  /// augmentation streams are functions of the iteration, so training continues
  /// exactly as if uninterrupted.
  void resume(const std::filesystem::path& path, const LoadOptions& opts = {}) {
    auto it = load_checkpoint(path, model_, &optim_, opts);
    if (static_cast<std::int64_t>(it) > optim_.config().max_iter) {
      throw ConfigError("checkpoint iteration " + std::to_string(it) + " exceeds max_iter " +
                        std::to_string(optim_.config().max_iter));
    }
    iter_ = static_cast<std::int64_t>(it);
  }

  StepLog step() {
    if (done()) throw std::logic_error("training already reached max_iter");
    auto batch = batch_for(iter_);
    StepLog log;
    log.iter = iter_;
    log.lr = poly_lr(iter_, optim_.config());
    model_.zero_grad();
    auto losses = model_.forward_train(batch.images, batch.labels);
    log.total = losses.total.item();
    log.main = losses.main.item();
    log.aux = losses.aux.item();
    losses.total.backward();
    optim_.step(params_, log.lr);
    ++iter_;
    return log;
  }

 private:
  PSPNet<float> model_;
  SGD<float> optim_;
  AugmentConfig augment_;
  TrainOptions opts_;
  std::vector<SegSample> data_;
  NamedTensors<float> params_;
  std::int64_t iter_ = 0;
  std::int64_t cached_epoch_ = -1;
  std::vector<std::vector<std::size_t>> epoch_;
};

}  // namespace psp
