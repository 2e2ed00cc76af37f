// Acceptance run: one PASS/FAIL line per criterion. The exit status is
// nonzero only when a criterion could not be evaluated at all.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "common.hpp"

using namespace mspm;
using namespace mspm::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const Context kEval{Mode::Eval, nullptr};

ModelConfig eval_config() {
  ModelConfig c;
  c.dropout = 0.0f;
  return c;
}

bool unit_rows(const Tensor& d, double tol) {
  for (std::int64_t r = 0; r < d.dim(0); ++r) {
    double n = 0.0;
    for (std::int64_t j = 0; j < d.dim(1); ++j) n += static_cast<double>(d[r * d.dim(1) + j]) * d[r * d.dim(1) + j];
    if (std::fabs(std::sqrt(n) - 1.0) > tol) return false;
  }
  return true;
}

Outcome shapes() {
  Model m(eval_config());
  m.init(1);
  Rng rng(1);
  const auto x = randn({1, 1, 64, 64}, rng);
  const auto t0 = Clock::now();
  const auto out = m.backbone(x, kEval);
  const double t = seconds_since(t0);
  const std::vector<Shape> expect = {{1, 32, 64, 64}, {1, 32, 64, 64}, {1, 64, 31, 31},  {1, 64, 31, 31},
                                     {1, 128, 29, 29}, {1, 128, 29, 29}, {1, 128, 29, 29}, {1, 128, 29, 29}};
  Outcome o;
  o.pass = out.layer_shapes == expect && out.pyramid.size() == 4;
  const std::int64_t sizes[] = {8, 4, 2, 1};
  for (std::size_t k = 0; o.pass && k < 4; ++k) o.pass = out.pyramid[k].shape() == Shape{1, 128, sizes[k], sizes[k]};
  o.pass = o.pass && t < 1.0;
  o.detail = "8 conv rows, pyramid 8/4/2/1, forward " + fmt("%.3f s", t);
  return o;
}

Outcome gradients() {
  Outcome o;
  double worst = 0.0;
  std::size_t checks = 0;
  auto take = [&](const GradCheckReport& r, const std::string& what) {
    for (const auto& e : r.entries) {
      worst = std::max(worst, e.max_rel_error);
      if (e.checked == 0) {
        o.pass = false;
        o.detail += " [" + what + " " + e.name + " unchecked]";
      }
    }
    if (!r.passed()) {
      o.pass = false;
      o.detail += " [" + what + " failed]";
    }
    ++checks;
  };
  for (int seed = 0; seed < kSeeds; ++seed) {
    for (const auto& c : layer_grad_cases()) take(c.run(seed), c.name + " seed " + std::to_string(seed));
    take(pipeline_grad_check(seed), "pipeline seed " + std::to_string(seed));
  }
  o.detail = std::to_string(layer_grad_cases().size()) + " layer types + pipeline, " + std::to_string(kSeeds) +
             " seeds, " + std::to_string(checks) + " checks, max rel " + fmt("%.2e", worst) + o.detail;
  return o;
}

Outcome siamese() {
  Model m(eval_config());
  m.init(5);
  Rng rng(5);
  const auto x = randn({4, 1, 64, 64}, rng);
  const auto [bx, by] = m.siamese(x, x, kEval);
  const auto a = m.embed(x, kEval).desc, b = m.embed(x, kEval).desc;
  const auto y = m.embed(randn({4, 1, 64, 64}, rng), kEval).desc;
  Outcome o;
  o.pass = bitwise_equal(bx.full_map, by.full_map) && bitwise_equal(a, b) && unit_rows(a, 1e-5) && unit_rows(y, 1e-5);
  o.detail = "shared branches bitwise equal, descriptor norms within 1e-5";
  return o;
}

Outcome mining() {
  Rng rng(2);
  std::size_t rows = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = rng.integer(2, 64);
    Tensor D({n, n});
    const bool coarse = trial % 2 == 0;
    for (auto& v : D.data()) v = coarse ? static_cast<float>(rng.integer(0, 8)) * 0.25f : rng.uniform(0.0f, 2.0f);
    MiningConfig cfg;
    if (trial % 3 == 0) cfg.duplicate_floor = rng.uniform(0.0f, 1.0f);
    const auto r = mine_hard_negatives(D, cfg);
    for (std::int64_t i = 0; i < n; ++i, ++rows) {
      if (r.for_anchor[i] != scan(D, i, true, cfg.duplicate_floor) ||
          r.for_positive[i] != scan(D, i, false, cfg.duplicate_floor)) {
        return {false, "trial " + std::to_string(trial) + " index " + std::to_string(i) + " differs from scan"};
      }
    }
  }
  return {true, "1000 matrices, " + std::to_string(rows) + " anchors and positives equal to exhaustive scan"};
}

Outcome loss() {
  Rng rng(7);
  Outcome o;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = rng.integer(2, 32);
    const auto x = l2_normalize(randn({n, 32}, rng)), y = l2_normalize(randn({n, 32}, rng));
    if (symmetric_triplet_loss(x, y, {}).item() != symmetric_triplet_loss(y, x, {}).item()) {
      return {false, "bank swap changed the loss at trial " + std::to_string(trial)};
    }
  }
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = l2_normalize(randn({6, 128}, rng)), y = l2_normalize(randn({6, 128}, rng));
    MiningConfig cfg;
    cfg.margin = trial % 2 ? 1.0f : rng.uniform(0.1f, 2.0f);
    worst = std::max(worst, std::fabs(symmetric_triplet_loss(x, y, cfg).item() - scalar_symmetric_loss(x, y, cfg.margin)));
  }
  Tensor e({8, 128}, 0.0f);
  for (int i = 0; i < 8; ++i) e[i * 128 + i] = 1.0f;
  const float zero = symmetric_triplet_loss(e, e, {}).item();
  o.pass = worst < 1e-5 && zero == 0.0f;
  o.detail = "bank swap exact over 100 draws, oracle max diff " + fmt("%.2e", worst) + ", orthonormal loss " +
             fmt("%g", zero);
  return o;
}

Outcome fpr() {
  Rng rng(1);
  auto draw = [&](std::size_t n, bool coarse, float shift) {
    std::vector<float> v(n);
    for (auto& d : v) d = coarse ? static_cast<float>(rng.integer(0, 10)) * 0.2f : rng.uniform(0.0f, 2.0f) + shift;
    return v;
  };
  for (int trial = 0; trial < 1000; ++trial) {
    const bool coarse = trial % 3 == 0;
    const auto pos = draw(static_cast<std::size_t>(rng.integer(1, 120)), coarse, 0.0f);
    const auto neg = draw(static_cast<std::size_t>(rng.integer(1, 120)), coarse, 0.3f);
    for (int percent : {95, 99}) {
      if (fpr_at_recall(pos, neg, static_cast<float>(percent) / 100.0f).fpr != sweep_fpr(pos, neg, percent)) {
        return {false, "sweep mismatch at trial " + std::to_string(trial)};
      }
    }
  }
  std::vector<float> pos(50), neg(50);
  std::iota(pos.begin(), pos.end(), 0.0f);
  std::iota(neg.begin(), neg.end(), 50.0f);
  const float separated = fpr_at_recall(pos, neg, 0.95f).fpr;
  Model m(eval_config());
  m.init(11);
  const auto untrained = evaluate(m, gen_synthetic(400, 12, 0.5f)).fpr95;
  Outcome o;
  o.pass = separated == 0.0f && std::fabs(untrained - 0.95f) <= 0.1f;
  o.detail = "1000 lists equal to sweep, separated " + fmt("%g", separated) + ", untrained model " +
             fmt("%.3f", untrained);
  return o;
}

Outcome positional() {
  double none = 0.0, learned = 1e30;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    none = std::max(none, permutation_change(PosEncoding::None, seed));
    learned = std::min(learned, permutation_change(PosEncoding::Learned2d, seed));
  }
  ParamStore s;
  PositionalEncoding<float> pe(s, "pos", PosEncoding::Learned2d, 8, 8, 128);
  init_params(s, 9);
  const auto e = build_positional_encoding(pe);
  bool concat_ok = e.shape() == Shape{64, 128};
  for (int i = 0; concat_ok && i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (int c = 0; c < 64; ++c)
        concat_ok = concat_ok && e[(i * 8 + j) * 128 + c] == pe.row[i * 64 + c] &&
                    e[(i * 8 + j) * 128 + 64 + c] == pe.col[j * 64 + c];
  Outcome o;
  o.pass = none <= 1e-5 && learned > 1e-3 && concat_ok;
  o.detail = "none max change " + fmt("%.2e", none) + ", learned-2d min change " + fmt("%.2e", learned) +
             (concat_ok ? ", cell code is row|column" : ", cell code differs from row|column");
  return o;
}

struct CurveRun {
  TrainResult result;
  std::string log_path;
  double seconds = 0.0;
};

CurveRun toy_run(bool residual) {
  const auto train = gen_synthetic(1600, 1, 0.0f);
  const auto val = gen_synthetic(400, 2, 0.5f);
  ModelConfig cfg;
  cfg.width = 32;
  cfg.residual = residual;
  Model m(cfg);
  m.init(7);
  TrainOptions opt;
  opt.schedule = toy_schedule();
  opt.seed = 7;
  CurveRun run;
  run.log_path = std::string("criterion8_residual_") + (residual ? "on" : "off") + ".log";
  std::ofstream log(run.log_path);
  opt.log = [&](const std::string& line) { log << line << "\n" << std::flush; };
  const auto t0 = Clock::now();
  run.result = train_loop(m, train, val, opt);
  run.seconds = seconds_since(t0);
  if (!run.result.message.empty()) log << run.result.message << "\n";
  return run;
}

std::string curve(const TrainResult& r) {
  std::ostringstream s;
  s << "loss";
  for (const auto& e : r.log) s << " " << fmt("%.3g", e.train_loss);
  return s.str();
}

Outcome residual() {
  const auto on = toy_run(true);
  const auto off = toy_run(false);
  Outcome o;
  o.pass = on.result.status != TrainStatus::Diverged && on.result.best_fpr95 <= 0.10f && on.result.log.size() <= 20;
  o.detail = "residual on best val fpr95 " + fmt("%.3f", on.result.best_fpr95) + " at epoch " +
             std::to_string(on.result.best_epoch) + " (" + fmt("%.0f s", on.seconds) + "); residual off " +
             (off.result.status == TrainStatus::Diverged ? "diverged" : "best " + fmt("%.3f", off.result.best_fpr95)) +
             ", " + curve(off.result) + " (logs " + on.log_path + ", " + off.log_path + ")";
  return o;
}

Outcome ablation() {
  Rng rng(3);
  const auto x = randn({1, 1, 64, 64}, rng);
  Outcome o;
  for (const auto& a : ablations()) {
    ModelConfig c = eval_config();
    a.apply(c);
    Model m(c);
    m.init(1);
    const auto n = m.params().parameter_count();
    const auto d = m.embed(x, kEval).desc;
    if (n != kDefaultParameters + a.delta || n != expected_parameters(c) || d.shape() != Shape{1, c.descriptor_dim} ||
        !unit_rows(d, 1e-5)) {
      o.pass = false;
      o.detail += std::string(" [") + a.name + " count " + std::to_string(n) + "]";
    }
  }
  o.detail = std::to_string(ablations().size()) + " variants run with exact parameter deltas" + o.detail;
  return o;
}

Outcome persistence() {
  Outcome o;
  ModelConfig cfg;
  cfg.width = 16;
  cfg.pos = PosEncoding::Learned1d;
  Model m(cfg);
  m.init(1);
  jitter(m.params(), 2);
  const auto ck = encode_checkpoint(make_checkpoint(m.params(), model_key_values(m.config())));
  auto back = load_model(decode_checkpoint(ck));
  const auto again = encode_checkpoint(make_checkpoint(back.params(), model_key_values(back.config())));
  Rng rng(3);
  const auto x = randn({2, 1, 64, 64}, rng);
  o.pass = ck == again && bitwise_equal(m.embed(x, kEval).desc, back.embed(x, kEval).desc);

  for (std::uint64_t seed = 0; seed < 20 && o.pass; ++seed) {
    auto set = gen_synthetic(1 + seed * 3, seed, 0.4f);
    if (seed % 2) set.labeled = false;
    const auto bytes = encode_ppdb(set);
    o.pass = encode_ppdb(decode_ppdb(bytes)) == bytes &&
             bytes.size() == kPpdbHeaderBytes + set.size() * (2 * set.patch_bytes() + (set.labeled ? 1 : 0));
  }
  for (std::int64_t n : {0, 1, 7, 64}) {
    for (std::int64_t d : {64, 128, 256}) {
      DescriptorMatrix dm;
      append_rows(dm, randn({n, d}, rng));
      o.pass = o.pass && encode_desc(dm).size() == kDescHeaderBytes + static_cast<std::size_t>(n * d) * 4;
    }
  }
  o.detail = "checkpoint re-encode " + std::string(ck == again ? "identical" : "differs") + " (" +
             std::to_string(ck.size()) + " bytes), PPDB round-trips bitwise, DESC = 16 + count*dim*4";
  return o;
}

Outcome heatmap() {
  const auto set = gen_synthetic(2, 7, 0.0f);
  Model m(eval_config());
  m.init(3);
  const auto b = make_batches(set, BatchSpec::evaluation(2))[0];
  NoGradScope guard;
  const auto e = m.embed(b.x, kEval);
  double worst = 0.0;
  for (const auto& scale : e.record.weights) {
    for (const auto& w : scale) {
      const auto len = w.dim(3);
      for (std::int64_t r = 0; r < w.numel() / len; ++r) {
        double s = 0.0;
        for (std::int64_t j = 0; j < len; ++j) s += w[r * len + j];
        worst = std::max(worst, std::fabs(s - 1.0));
      }
    }
  }
  const Image patch{64, 64, 1, set.pairs[0].a};
  const auto pgm = temp_path("acceptance_heat.pgm");
  const auto values = export_heatmap(e.record, patch, pgm, std::nullopt);
  const auto img = read_image(pgm);
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  Outcome o;
  o.pass = img.width == 64 && img.height == 64 && img.channels == 1 && values.size() == 64u * 64u &&
           worst <= 1e-6 && *lo == 0 && *hi == 255;
  o.detail = std::to_string(img.width) + "x" + std::to_string(img.height) + " map, pixels " + std::to_string(*lo) +
             ".." + std::to_string(*hi) + ", attention row sum error " + fmt("%.1e", worst);
  return o;
}

}  // namespace

int main() {
  const std::vector<Outcome (*)()> criteria = {shapes,     gradients, siamese,  mining,      loss,   fpr,
                                               positional, residual,  ablation, persistence, heatmap};
  int errors = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    std::printf("criterion %zu: %s %s\n", i + 1, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return errors == 0 ? 0 : 1;
}
