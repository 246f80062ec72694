// psp_cli: train, eval, predict, ablate, gradcheck and synth subcommands.
// Every log line is a tag followed by key=value fields.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "psp/ablate.hpp"
#include "psp/checkpoint.hpp"
#include "psp/config.hpp"
#include "psp/gradcheck_suite.hpp"
#include "psp/metrics.hpp"
#include "psp/train.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> max_iter;
  std::string checkpoint;
  std::string scales;
  std::string out;
  std::string data;
  std::vector<std::string> sets;
  bool force = false;
  bool allow_prune = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key=value config file");
  cmd->add_option("--set", f.sets, "extra key=value override (repeatable)");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--max-iter", f.max_iter, "training iterations");
  cmd->add_option("--checkpoint", f.checkpoint, "checkpoint to load (train: resume from)");
  cmd->add_option("--scales", f.scales, "comma-separated inference scales");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--data", f.data, "dataset directory (overrides data.train_dir or data.eval_dir)");
  cmd->add_flag("--force", f.force, "overwrite a non-empty output directory");
  cmd->add_flag("--allow-prune", f.allow_prune, "drop auxiliary-branch entries the model does not have");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Config file, then --set overrides, then the dedicated flags.
psp::RunConfig resolve(const CommonFlags& f, const std::string& data_key) {
  psp::RunConfig cfg;
  if (!f.config.empty()) psp::apply_config_file(cfg, f.config);
  for (const auto& s : f.sets) psp::apply_override(cfg, s, "--set");
  if (f.seed) cfg.seed = *f.seed;
  if (f.max_iter) cfg.optim.max_iter = *f.max_iter;
  if (!f.scales.empty()) psp::set_config_value(cfg, "eval.scales", f.scales, "--scales");
  if (!f.data.empty() && !data_key.empty()) psp::set_config_value(cfg, data_key, f.data, "--data");
  cfg.validate();
  for (const auto& [k, v] : psp::resolved_config(cfg)) std::cout << "config " << k << '=' << v << '\n';
  return cfg;
}

fs::path out_dir(const CommonFlags& f, const std::string& fallback) {
  fs::path p = f.out.empty() ? fs::path(fallback) : fs::path(f.out);
  fs::create_directories(p);
  return p;
}

void load_model(const CommonFlags& f, psp::PSPNet<float>& model) {
  if (f.checkpoint.empty()) throw psp::ConfigError("--checkpoint is required");
  auto it = psp::load_checkpoint<float>(f.checkpoint, model, nullptr, {.allow_prune = f.allow_prune});
  std::cout << "load checkpoint=" << f.checkpoint << " iter=" << it << '\n';
}

int cmd_train(const CommonFlags& f, int threads) {
  auto cfg = resolve(f, "data.train_dir");
  const auto t0 = std::chrono::steady_clock::now();
  auto data = psp::read_dataset(cfg.train_dir, cfg.model.num_classes);
  std::cout << "data dir=" << cfg.train_dir << " samples=" << data.size() << '\n';
  auto dir = out_dir(f, "out");
  {
    std::ofstream c(dir / "config.txt");
    psp::write_config(c, cfg);
  }
  psp::Trainer tr(cfg.model_config(), cfg.optim, cfg.augment, cfg.train_options(threads), std::move(data));
  std::cout << "model params=" << tr.model().num_parameters() << " threads=" << threads << '\n';
  if (!f.checkpoint.empty()) {
    tr.resume(f.checkpoint, {.allow_prune = f.allow_prune});
    std::cout << "resume checkpoint=" << f.checkpoint << " iter=" << tr.iter() << '\n';
  }
  while (!tr.done()) {
    auto log = tr.step();
    const auto done = tr.iter();
    if (log.iter % cfg.log_interval == 0 || tr.done()) {
      std::cout << "train iter=" << done << " lr=" << log.lr << " loss=" << log.total << " main=" << log.main
                << " aux=" << log.aux << " seconds=" << seconds_since(t0) << std::endl;
    }
    if (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && !tr.done()) {
      auto p = dir / ("iter_" + std::to_string(done) + ".pspc");
      tr.save(p);
      std::cout << "checkpoint path=" << p.string() << " iter=" << done << '\n';
    }
  }
  auto final_path = dir / "final.pspc";
  tr.save(final_path);
  std::cout << "checkpoint path=" << final_path.string() << " iter=" << tr.iter() << " final=true\n";
  return 0;
}

int cmd_eval(const CommonFlags& f) {
  auto cfg = resolve(f, "data.eval_dir");
  psp::PSPNet<float> model(cfg.model_config(), cfg.seed);
  load_model(f, model);
  auto data = psp::read_dataset(cfg.eval_dir, cfg.model.num_classes);
  const auto t0 = std::chrono::steady_clock::now();
  auto cm = psp::evaluate(model, data, cfg.eval_scales, psp::channel_mean(data));
  auto report = psp::per_class_report(cm, psp::default_class_names(cfg.model.num_classes));
  std::cout << "eval dir=" << cfg.eval_dir << " samples=" << data.size() << " pixel_acc=" << report.pixel_acc
            << " miou=" << report.miou << " seconds=" << seconds_since(t0) << '\n';
  std::cout << "Pixel Acc.: " << report.pixel_acc << "\nMean IoU:   " << report.miou << '\n' << report.text();
  auto csv = out_dir(f, "out") / "eval.csv";
  std::ofstream(csv) << report.csv() << "pixel_acc," << report.pixel_acc << '\n';
  std::cout << "eval csv=" << csv.string() << '\n';
  return 0;
}

int cmd_predict(const CommonFlags& f, const std::vector<std::string>& images) {
  auto cfg = resolve(f, "");
  psp::PSPNet<float> model(cfg.model_config(), cfg.seed);
  load_model(f, model);
  auto dir = out_dir(f, "out");
  for (const auto& path : images) {
    auto img = psp::read_ppm(path);
    const auto mean = psp::channel_mean({psp::SegSample{img, psp::LabelMap::single(img.height, img.width)}});
    if (img.height % 8 != 0 || img.width % 8 != 0) {
      std::cout << "predict note=padded image=" << path << " size=" << img.height << 'x' << img.width
                << " padded=" << (img.height + 7) / 8 * 8 << 'x' << (img.width + 7) / 8 * 8 << " fill=mean\n";
    }
    const bool single = cfg.eval_scales.size() == 1 && cfg.eval_scales[0] == 1.0;
    auto pred = single ? psp::infer_image(model, img, mean) : psp::multi_scale_infer(model, img, cfg.eval_scales, mean);
    const auto stem = fs::path(path).stem().string();
    auto label_path = dir / (stem + "_label.pgm"), color_path = dir / (stem + "_color.ppm");
    psp::write_pgm(label_path, pred.labels);
    psp::write_ppm(color_path, psp::colorize(pred.labels));
    std::cout << "predict image=" << path << " labels=" << label_path.string() << " color=" << color_path.string()
              << '\n';
  }
  return 0;
}

int cmd_ablate(const CommonFlags& f, int threads) {
  auto cfg = resolve(f, "");
  auto sc = cfg.synth;
  sc.seed = cfg.seed;
  auto train = psp::synth_generate(sc, static_cast<std::size_t>(cfg.ablate_train));
  auto test = psp::synth_generate(sc, static_cast<std::size_t>(cfg.ablate_test), static_cast<std::uint64_t>(cfg.ablate_train));
  std::cout << "ablate train=" << train.size() << " test=" << test.size() << " seeds=" << cfg.ablate_seeds << '\n';
  auto dir = out_dir(f, "out");
  auto tables = psp::detail::split_csv(cfg.ablate_tables);
  for (const auto& table : tables) {
    std::vector<psp::Variant> variants;
    if (table == "variants") {
      variants = psp::pooling_variants(cfg.model_config());
    } else if (table == "alpha") {
      variants = psp::alpha_variants(cfg.model_config());
    } else {
      throw psp::ConfigError("ablate.tables: unknown table '" + table + "' (expected variants or alpha)");
    }
    std::vector<psp::RunResult> results;
    for (const auto& v : variants) {
      for (std::int64_t s = 0; s < cfg.ablate_seeds; ++s) {
        auto opts = cfg.train_options(threads);
        opts.seed = cfg.seed + static_cast<std::uint64_t>(s);
        auto r = psp::train_and_evaluate(v, cfg.optim, cfg.augment, opts, train, test);
        std::cout << "ablate table=" << table << " variant=" << r.variant << " seed=" << r.seed << " miou=" << r.miou
                  << " pixel_acc=" << r.pixel_acc << " loss_early=" << r.loss_early << " loss_final=" << r.loss_final
                  << " seconds=" << r.seconds << std::endl;
        results.push_back(r);
      }
    }
    auto summary = psp::summarize(results);
    std::cout << psp::summary_table(summary, table == "alpha" ? "Aux weight" : "Method");
    auto csv = dir / ("ablate_" + table + ".csv");
    std::ofstream out(csv);
    psp::write_results_csv(out, results, summary);
    std::cout << "ablate csv=" << csv.string() << '\n';
  }
  return 0;
}

int cmd_gradcheck(int seeds) {
  const auto t0 = std::chrono::steady_clock::now();
  auto reports = psp::run_gradcheck_suite(psp::default_gradcheck_cases(), seeds, &std::cout);
  int failed = 0;
  for (const auto& r : reports) {
    if (!r.passed) {
      ++failed;
      std::cerr << "gradcheck failure op=" << r.name << " seed=" << r.worst_seed << " max_rel_error=" << r.worst_error
                << '\n';
    }
  }
  std::cout << "gradcheck ops=" << reports.size() << " failed=" << failed << " seconds=" << seconds_since(t0) << '\n';
  return failed == 0 ? 0 : 1;
}

int cmd_synth(const CommonFlags& f) {
  auto cfg = resolve(f, "");
  auto sc = cfg.synth;
  sc.seed = cfg.seed;
  fs::path dir = f.out.empty() ? fs::path(cfg.train_dir) : fs::path(f.out);
  auto samples = psp::synth_generate(sc, static_cast<std::size_t>(cfg.synth_count));
  psp::write_dataset(dir, samples, f.force);
  std::cout << "synth dir=" << dir.string() << " count=" << samples.size() << " seed=" << sc.seed
            << " classes=" << sc.num_classes() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pyramid scene parsing: training, evaluation and ablation"};
  app.require_subcommand(1);
  CommonFlags f;
  std::vector<std::string> images;
  int gc_seeds = 20;

  auto* train = app.add_subcommand("train", "train a model and write checkpoints");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  auto* predict = app.add_subcommand("predict", "write label and colour maps for images");
  auto* ablate = app.add_subcommand("ablate", "pooling-variant grid and auxiliary-weight sweep");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  auto* synth = app.add_subcommand("synth", "generate a synthetic context dataset");
  for (auto* c : {train, eval, predict, ablate, synth}) add_common(c, f);
  predict->add_option("images", images, "input PPM images")->required();
  gradcheck->add_option("--seeds", gc_seeds, "seeds per op")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    const int threads = psp::threads_from_env(std::getenv("PSP_THREADS"));
    if (*train) return cmd_train(f, threads);
    if (*eval) return cmd_eval(f);
    if (*predict) return cmd_predict(f, images);
    if (*ablate) return cmd_ablate(f, threads);
    if (*gradcheck) return cmd_gradcheck(gc_seeds);
    if (*synth) return cmd_synth(f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
