#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mspm/data/batching.hpp"
#include "mspm/eval.hpp"
#include "mspm/io/checkpoint.hpp"
#include "mspm/loss.hpp"
#include "mspm/model/model.hpp"
#include "mspm/optim.hpp"

namespace mspm {

struct TrainOptions {
  TrainSchedule schedule = toy_schedule();
  float margin = 1.0f;
  Normalization normalization = Normalization::PerPatch;
  bool hflip = true;
  bool rot90 = true;
  std::uint64_t seed = 0;
  int eval_batch = 64;
  std::optional<std::string> best_checkpoint;
  std::optional<std::string> final_checkpoint;
  std::function<void(const std::string&)> log;  // one line per record
};

struct EpochRecord {
  int epoch = 0;
  MiningStrategy phase = MiningStrategy::Random;
  float lr = 0.0f;
  float train_loss = 0.0f;
  float val_loss = 0.0f;
  float val_fpr95 = 0.0f;

  std::string to_string() const {
    std::ostringstream os;
    os.precision(7);
    os << "epoch=" << epoch << " phase=" << mspm::to_string(phase) << " lr=" << lr << " train_loss=" << train_loss
       << " val_loss=" << val_loss << " val_fpr95=" << val_fpr95;
    return os.str();
  }
};

inline TrainOptions train_options(const RunConfig& rc) {
  TrainOptions o;
  o.schedule = rc.schedule;
  o.margin = rc.margin;
  o.normalization = rc.normalization;
  o.hflip = rc.hflip;
  o.rot90 = rc.rot90;
  o.seed = rc.seed;
  return o;
}

enum class TrainStatus { Completed, Diverged };

struct TrainResult {
  TrainStatus status = TrainStatus::Completed;
  std::vector<EpochRecord> log;
  int best_epoch = -1;
  float best_fpr95 = std::numeric_limits<float>::infinity();
  std::optional<Checkpoint> best;
  std::string message;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline PatchPairSet matches_of(const PatchPairSet& set) {
  PatchPairSet out = set;
  out.pairs.clear();
  for (const auto& p : set.pairs) {
    if (p.label != Label::NonMatch) out.pairs.push_back(p);
  }
  return out;
}

}  // namespace detail

// Mean per-pair symmetric triplet loss over the matching pairs of `val`, in
// eval mode, with the given mining strategy and a fixed seed.
inline float validation_loss(Model& model, const PatchPairSet& val_matches, MiningStrategy strategy, float margin,
                             int batch_size, Normalization norm, std::uint64_t seed) {
  auto spec = BatchSpec::evaluation(batch_size);
  spec.normalization = norm;
  BatchStream stream(val_matches, spec);
  MiningConfig mc{strategy, margin};
  Rng rng(seed);
  NoGradScope guard;
  const Context ctx{Mode::Eval, nullptr};
  double total = 0.0;
  std::size_t pairs = 0;
  Batch b;
  while (stream.next(b)) {
    if (b.x.dim(0) < 2) continue;
    const auto dx = model.embed(b.x, ctx).desc;
    const auto dy = model.embed(b.y, ctx).desc;
    total += symmetric_triplet_loss(dx, dy, mc, &rng).item();
    pairs += static_cast<std::size_t>(b.x.dim(0));
  }
  return pairs ? static_cast<float>(total / static_cast<double>(pairs)) : 0.0f;
}

// Random negatives until the validation loss stalls for
// mining_switch_patience epochs, hardest negatives afterwards. The learning
// rate warms up linearly, then drops by plateau_factor whenever the
// validation loss stalls for plateau_patience epochs; the stall window
// restarts at the phase switch and after every drop. The model with the
// lowest validation FPR95 is kept as the best checkpoint.
inline TrainResult train_loop(Model& model, const PatchPairSet& train, const PatchPairSet& val,
                              const TrainOptions& opt) {
  opt.schedule.validate();
  if (train.pairs.empty()) throw InvalidArgument("training set is empty");
  if (val.pairs.empty()) throw InvalidArgument("validation set is empty");
  const auto& s = opt.schedule;
  const auto val_matches = detail::matches_of(val);
  if (!val.labeled) throw InvalidArgument("validation set is unlabeled");
  if (val_matches.size() < 2) throw InvalidArgument("validation set needs at least two matching pairs");
  if (val_matches.size() == val.size()) throw InvalidArgument("validation set has no non-matching pairs");
  const auto emit = [&](const std::string& line) {
    if (opt.log) opt.log(line);
  };
  {
    std::ostringstream os;
    os << "schedule base_lr=" << s.base_lr << " warmup_epochs=" << s.warmup_epochs
       << " plateau_patience=" << s.plateau_patience << " plateau_factor=" << s.plateau_factor
       << " mining_switch_patience=" << s.mining_switch_patience << " epochs=" << s.epochs
       << " batch_size=" << s.batch_size << " margin=" << opt.margin << " seed=" << opt.seed;
    emit(os.str());
  }

  TrainResult result;
  AdamState adam;
  Rng dropout_rng(detail::mix_seed(opt.seed, 1));
  Rng mining_rng(detail::mix_seed(opt.seed, 2));
  MiningStrategy phase = MiningStrategy::Random;
  int plateau_count = 0;
  std::vector<float> phase_history, lr_window;
  const auto save = [&](const std::string& path) { save_checkpoint(path, model); };

  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    const float lr = lr_at(epoch, s, plateau_count);
    BatchSpec spec;
    spec.batch_size = s.batch_size;
    spec.seed = detail::mix_seed(opt.seed, 1000 + static_cast<std::uint64_t>(epoch));
    spec.hflip = opt.hflip;
    spec.rot90 = opt.rot90;
    spec.normalization = opt.normalization;
    BatchStream stream(train, spec);
    if (stream.batch_count() == 0) throw InvalidArgument("training set is smaller than one batch");
    const MiningConfig mc{phase, opt.margin};
    const Context ctx{Mode::Train, &dropout_rng};
    double total = 0.0;
    std::size_t steps = 0;
    Batch b;
    while (stream.next(b)) {
      model.params().zero_grad();
      Tape tape;
      TapeScope scope(tape);
      const auto dx = model.embed(b.x, ctx).desc;
      const auto dy = model.embed(b.y, ctx).desc;
      const auto loss = symmetric_triplet_loss(dx, dy, mc, &mining_rng);
      const float value = loss.item();
      if (!std::isfinite(value)) {
        EpochRecord r{epoch, phase, lr, value, std::numeric_limits<float>::quiet_NaN(),
                      std::numeric_limits<float>::quiet_NaN()};
        result.log.push_back(r);
        emit(r.to_string());
        result.status = TrainStatus::Diverged;
        result.message = "DIV: non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(steps);
        emit(result.message);
        return result;
      }
      backward(loss);
      adam_step(model.params(), adam, lr);
      total += value / static_cast<double>(b.x.dim(0));
      ++steps;
    }

    EpochRecord r;
    r.epoch = epoch;
    r.phase = phase;
    r.lr = lr;
    r.train_loss = static_cast<float>(total / static_cast<double>(steps));
    r.val_loss = validation_loss(model, val_matches, phase, opt.margin, opt.eval_batch, opt.normalization,
                                 detail::mix_seed(opt.seed, 3));
    r.val_fpr95 = evaluate(model, val, opt.eval_batch, opt.normalization).fpr95;
    result.log.push_back(r);
    emit(r.to_string());
    if (!std::isfinite(r.val_loss)) {
      result.status = TrainStatus::Diverged;
      result.message = "DIV: non-finite validation loss at epoch " + std::to_string(epoch);
      emit(result.message);
      return result;
    }
    if (r.val_fpr95 < result.best_fpr95) {
      result.best_fpr95 = r.val_fpr95;
      result.best_epoch = epoch;
      result.best = make_checkpoint(model.params(), model_key_values(model.config()));
      if (opt.best_checkpoint) save(*opt.best_checkpoint);
    }

    if (phase == MiningStrategy::Random) {
      phase_history.push_back(r.val_loss);
      if (plateau_monitor(phase_history, s.mining_switch_patience)) {
        phase = MiningStrategy::Hardest;
        lr_window.clear();
        emit("switch mining=hardest after_epoch=" + std::to_string(epoch));
        continue;
      }
    }
    if (epoch + 1 >= s.warmup_epochs) {
      lr_window.push_back(r.val_loss);
      if (plateau_monitor(lr_window, s.plateau_patience)) {
        ++plateau_count;
        lr_window.clear();
        emit("plateau count=" + std::to_string(plateau_count) + " after_epoch=" + std::to_string(epoch));
      }
    }
  }
  if (opt.final_checkpoint) save(*opt.final_checkpoint);
  return result;
}

}  // namespace mspm
