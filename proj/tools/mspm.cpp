#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "mspm/mspm.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kData = 3, kDiverged = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::is_regular_file(path)) throw DataError(what + " '" + path + "' does not exist");
}

mspm::PatchPairSet load_set(const std::string& path) {
  require_file(path, "dataset");
  return mspm::read_ppdb(path);
}

mspm::Model load_ckpt(const std::string& path) {
  require_file(path, "checkpoint");
  try {
    return mspm::load_model(mspm::read_checkpoint(path));
  } catch (const mspm::InvalidArgument& e) {
    throw DataError("checkpoint '" + path + "': " + e.what());
  }
}

// Runs a step whose argument errors can only come from file contents.
template <typename Fn>
auto as_data(Fn fn) {
  try {
    return fn();
  } catch (const mspm::InvalidArgument& e) {
    throw DataError(e.what());
  }
}

mspm::Normalization parse_norm(const std::string& s) {
  if (s == "per-patch") return mspm::Normalization::PerPatch;
  if (s == "dataset") return mspm::Normalization::Dataset;
  throw UsageError("normalization must be per-patch or dataset");
}

mspm::Image patch_image(const mspm::PatchPairSet& set, const std::vector<std::uint8_t>& bytes) {
  return {set.width, set.height, set.channels, bytes};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale attention patch matcher"};
  app.require_subcommand(1);

  std::string out, data, ckpt, config, train_path, val_path, labels, image, log_path, final_ckpt, norm = "per-patch";
  std::size_t pairs = 0;
  std::uint64_t seed = 0;
  float neg_frac = 0.5f;
  int channels = 1, batch = 64;
  long index = 0;
  bool overlay = false;

  auto* gen = app.add_subcommand("gen-synth", "write a synthetic labeled pair set");
  gen->add_option("--out", out, "output PPDB file")->required();
  gen->add_option("--pairs", pairs, "number of pairs")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--neg-frac", neg_frac, "fraction of non-matching pairs")->check(CLI::Range(0.0, 1.0));

  auto* imp = app.add_subcommand("import", "slice a side-by-side strip image into pairs");
  imp->add_option("--image", image, "PGM or PNG strip")->required();
  imp->add_option("--labels", labels, "label sidecar, one 0/1 per line");
  imp->add_option("--channels", channels, "1 or 3")->check(CLI::IsMember({1, 3}));
  imp->add_option("--out", out, "output PPDB file")->required();

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config, "key=value run configuration")->required();
  tr->add_option("--train", train_path, "training PPDB (overrides the config)");
  tr->add_option("--val", val_path, "validation PPDB (overrides the config)");
  tr->add_option("--out-ckpt", ckpt, "best checkpoint")->required();
  tr->add_option("--final-ckpt", final_ckpt, "final checkpoint (default <out-ckpt>.final)");
  tr->add_option("--log", log_path, "log file (default <out-ckpt>.log)");

  auto* ev = app.add_subcommand("eval", "report FPR95 on a labeled set");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--batch", batch)->check(CLI::PositiveNumber);
  ev->add_option("--normalization", norm, "per-patch or dataset");

  auto* em = app.add_subcommand("embed", "write descriptors of every patch");
  em->add_option("--ckpt", ckpt)->required();
  em->add_option("--data", data)->required();
  em->add_option("--out", out, "DESC file")->required();
  em->add_option("--batch", batch)->check(CLI::PositiveNumber);
  em->add_option("--normalization", norm, "per-patch or dataset");

  auto* hm = app.add_subcommand("heatmap", "export attention heatmaps of one pair");
  hm->add_option("--ckpt", ckpt)->required();
  hm->add_option("--data", data)->required();
  hm->add_option("--index", index, "pair index")->required();
  hm->add_option("--out", out, "output prefix; writes <out>_a.pgm and <out>_b.pgm")->required();
  hm->add_flag("--overlay", overlay, "also write color overlays <out>_a.png and <out>_b.png");
  hm->add_option("--normalization", norm, "per-patch or dataset");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      const auto set = mspm::gen_synthetic(pairs, seed, neg_frac);
      mspm::write_ppdb(out, set);
      std::cout << "pairs=" << set.size() << " matches=" << set.count(mspm::Label::Match)
                << " non_matches=" << set.count(mspm::Label::NonMatch) << "\n";
    } else if (imp->parsed()) {
      require_file(image, "image");
      std::optional<std::string> lp;
      if (!labels.empty()) {
        require_file(labels, "label file");
        lp = labels;
      }
      const auto set = as_data([&] { return mspm::import_strip(image, lp, channels); });
      mspm::write_ppdb(out, set);
      std::cout << "pairs=" << set.size() << " labeled=" << (set.labeled ? 1 : 0) << "\n";
    } else if (tr->parsed()) {
      require_file(config, "config");
      mspm::RunConfig rc;
      try {
        rc = mspm::read_run_config(config);
      } catch (const mspm::InvalidArgument& e) {
        throw UsageError(e.what());
      }
      if (!train_path.empty()) rc.train_path = train_path;
      if (!val_path.empty()) rc.val_path = val_path;
      if (rc.train_path.empty() || rc.val_path.empty()) throw UsageError("train and val paths are required");
      const auto train = load_set(rc.train_path);
      const auto val = load_set(rc.val_path);
      if (final_ckpt.empty()) final_ckpt = ckpt + ".final";
      if (log_path.empty()) log_path = ckpt + ".log";
      std::ofstream log(log_path);
      if (!log) throw UsageError("cannot write log '" + log_path + "'");
      const auto emit = [&](const std::string& line) {
        std::cout << line << std::endl;
        log << line << std::endl;
      };
      for (const auto& [k, v] : mspm::run_key_values(rc)) emit("config " + k + "=" + v);
      mspm::Model model(rc.model);
      model.init(rc.seed);
      auto opt = mspm::train_options(rc);
      opt.best_checkpoint = ckpt;
      opt.final_checkpoint = final_ckpt;
      opt.log = emit;
      const auto result = as_data([&] { return mspm::train_loop(model, train, val, opt); });
      if (result.status == mspm::TrainStatus::Diverged) {
        std::cerr << result.message << "\n";
        return kDiverged;
      }
      emit("done best_epoch=" + std::to_string(result.best_epoch) + " best_val_fpr95=" +
           std::to_string(result.best_fpr95));
    } else if (ev->parsed()) {
      auto model = load_ckpt(ckpt);
      const auto set = load_set(data);
      const auto nm = parse_norm(norm);
      std::cout << as_data([&] { return mspm::evaluate(model, set, batch, nm); }).to_string();
    } else if (em->parsed()) {
      auto model = load_ckpt(ckpt);
      const auto set = load_set(data);
      const auto embed = mspm::eval_embedder(model);
      auto spec = mspm::BatchSpec::evaluation(batch);
      spec.normalization = parse_norm(norm);
      mspm::BatchStream stream(set, spec);
      mspm::DescriptorMatrix a, b;
      mspm::Batch bt;
      while (stream.next(bt)) {
        mspm::append_rows(a, embed(bt.x));
        mspm::append_rows(b, embed(bt.y));
      }
      // all A descriptors, then all B descriptors
      a.values.insert(a.values.end(), b.values.begin(), b.values.end());
      a.count += b.count;
      mspm::write_desc(out, a);
      std::cout << "count=" << a.count << " dim=" << a.dim << "\n";
    } else if (hm->parsed()) {
      auto model = load_ckpt(ckpt);
      const auto set = load_set(data);
      if (index < 0 || static_cast<std::size_t>(index) >= set.size()) {
        throw UsageError("--index " + std::to_string(index) + " outside [0, " + std::to_string(set.size()) + ")");
      }
      mspm::PatchPairSet one = set;
      one.pairs = {set.pairs[static_cast<std::size_t>(index)]};
      auto spec = mspm::BatchSpec::evaluation(1);
      spec.normalization = parse_norm(norm);
      if (spec.normalization == mspm::Normalization::Dataset) throw UsageError("heatmap uses per-patch normalization");
      mspm::Batch bt;
      mspm::BatchStream(one, spec).next(bt);
      mspm::NoGradScope guard;
      const mspm::Context ctx{mspm::Mode::Eval, nullptr};
      const auto ea = model.embed(bt.x, ctx);
      const auto eb = model.embed(bt.y, ctx);
      const auto& pair = one.pairs[0];
      const auto png = [&](const char* tag) {
        return overlay ? std::optional<std::string>(out + "_" + tag + ".png") : std::nullopt;
      };
      mspm::export_heatmap(ea.record, patch_image(one, pair.a), out + "_a.pgm", png("a"));
      mspm::export_heatmap(eb.record, patch_image(one, pair.b), out + "_b.pgm", png("b"));
      std::cout << "wrote " << out << "_a.pgm " << out << "_b.pgm\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const mspm::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const mspm::DimensionMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const mspm::CorruptFileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const mspm::DivergenceError& e) {
    std::cerr << "DIV: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
