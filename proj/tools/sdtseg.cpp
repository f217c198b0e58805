#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "sdtseg/config.hpp"
#include "sdtseg/edt.hpp"
#include "sdtseg/gradcheck.hpp"
#include "sdtseg/metrics.hpp"
#include "sdtseg/network.hpp"
#include "sdtseg/raster.hpp"
#include "sdtseg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int cmd_sdt(const std::string& mask_path, const std::string& out_path, double clip,
            int classes) {
  sdtseg::LabelMask mask = sdtseg::read_mask(mask_path, classes);
  sdtseg::SdtParams params{clip, mask.classes, sdtseg::VoidPolicy::exclude_from_loss};
  sdtseg::FieldStack stack = sdtseg::class_sdt_stack(mask, params);
  sdtseg::write_field_stack(stack, out_path);
  std::cout << "wrote " << out_path << " (" << stack.channels() << " channels, "
            << stack.width() << "x" << stack.height() << ")\n";
  return 0;
}

int cmd_synth(const std::string& config_path) {
  sdtseg::RunConfig cfg = sdtseg::load_run_config(config_path);
  if (cfg.out_dir.empty()) throw sdtseg::config_error("config: synth requires out_dir");
  sdtseg::Dataset ds = sdtseg::make_dataset(cfg.synth, cfg.images);

  auto dump = [&](const std::vector<sdtseg::SynthSample>& samples, const std::string& split) {
    const fs::path dir = fs::path(cfg.out_dir) / split;
    fs::create_directories(dir);
    char name[32];
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::snprintf(name, sizeof(name), "img_%04zu.sdtf", i);
      sdtseg::write_field_stack(sdtseg::stack_from_tensor(samples[i].image), dir / name);
      std::snprintf(name, sizeof(name), "msk_%04zu.pgm", i);
      sdtseg::write_mask(samples[i].mask, dir / name);
    }
  };
  dump(ds.train, "train");
  dump(ds.val, "val");
  std::cout << "wrote " << ds.train.size() << " train and " << ds.val.size()
            << " val samples to " << cfg.out_dir << "\n";
  return 0;
}

json metrics_report(const sdtseg::ConfusionMatrix& cm) {
  const auto f1 = sdtseg::f1_per_class(cm);
  const auto iou_r = sdtseg::iou(cm);
  return json{{"oa", sdtseg::overall_accuracy(cm)},
              {"per_class_f1", f1},
              {"per_class_iou", iou_r.per_class},
              {"miou", iou_r.mean},
              {"pixels_evaluated", cm.total()}};
}

sdtseg::ConfusionMatrix eval_sliding(const sdtseg::NetworkState& state,
                                     const std::vector<sdtseg::SynthSample>& samples,
                                     int window, double overlap) {
  sdtseg::ConfusionMatrix cm(state.classes);
  for (const auto& sample : samples) {
    auto infer = sdtseg::sliding_window_infer(state, sample.image, window, overlap);
    cm.accumulate(sample.mask, infer.argmax);
  }
  return cm;
}

int cmd_train(const std::string& config_path) {
  sdtseg::RunConfig cfg = sdtseg::load_run_config(config_path);
  if (cfg.out_dir.empty()) throw sdtseg::config_error("config: train requires out_dir");
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir / "checkpoints");

  sdtseg::Dataset ds = sdtseg::make_dataset(cfg.synth, cfg.images);

  std::ofstream log_file(out_dir / "train_log.jsonl", std::ios::trunc);
  if (!log_file) throw sdtseg::io_error("cannot open training log for writing");

  auto on_epoch = [&](const sdtseg::NetworkState& state, const sdtseg::EpochLog& el) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d.sdtw", el.epoch);
    sdtseg::save_network(state, out_dir / "checkpoints" / name);
    const json j{{"epoch", el.epoch}, {"step", el.step},   {"lr", el.lr},
                 {"nll", el.nll},     {"l1", el.l1},       {"total", el.total},
                 {"val_oa", el.val_oa}};
    log_file << j.dump() << "\n";
    log_file.flush();
  };

  sdtseg::TrainResult result = sdtseg::train(cfg.train, ds, on_epoch);
  if (result.diverged) {
    sdtseg::save_network(result.state, out_dir / "last_good.sdtw");
    std::cerr << "training diverged; last good checkpoint written to last_good.sdtw\n";
    return 3;
  }
  sdtseg::save_network(result.state, out_dir / "final.sdtw");

  const int window = std::min(cfg.train.crop, cfg.synth.image_size);
  const auto cm = eval_sliding(result.state, ds.val, window, 0.75);
  const json report = metrics_report(cm);
  std::ofstream(out_dir / "metrics.json") << report.dump(2) << "\n";
  std::cout << report.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& weights_path, const std::string& config_path) {
  sdtseg::NetworkState state = sdtseg::load_network(weights_path);
  sdtseg::RunConfig cfg = sdtseg::load_run_config(config_path);
  if (state.classes != cfg.synth.classes) {
    std::cerr << "error: weights expect " << state.classes << " classes but dataset has "
              << cfg.synth.classes << "\n";
    return 2;
  }
  sdtseg::Dataset ds = sdtseg::make_dataset(cfg.synth, cfg.images);
  const int window = std::min(cfg.train.crop, cfg.synth.image_size);
  const auto cm = eval_sliding(state, ds.val, window, 0.75);
  std::cout << metrics_report(cm).dump() << "\n";
  return 0;
}

int cmd_infer(const std::string& weights_path, const std::string& image_path,
              const std::string& out_path, const std::string& probs_path, int window,
              double overlap) {
  sdtseg::NetworkState state = sdtseg::load_network(weights_path);
  sdtseg::FieldStack stack = sdtseg::read_field_stack(image_path);
  if (stack.channels() != 3)
    throw sdtseg::io_error("infer: expected a 3-channel image stack");
  const sdtseg::Tensor image = sdtseg::tensor_from_stack(stack);
  if (window <= 0) window = std::min({image.shape[1], image.shape[2], 256});
  if (window % 2 != 0) --window;

  auto result = sdtseg::sliding_window_infer(state, image, window, overlap);
  sdtseg::write_mask(result.argmax, out_path);
  if (!probs_path.empty())
    sdtseg::write_field_stack(sdtseg::stack_from_tensor(result.z_seg_mean), probs_path);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double lambda, int classes, int width, bool corrupt) {
  auto inst = sdtseg::make_gradcheck_instance(seed, lambda, classes, width);
  auto report = sdtseg::run_gradcheck(inst, 1e-5, corrupt ? 1e-3 : 0.0);
  for (const auto& block : report.blocks)
    std::printf("%-12s max_rel_err %.3e\n", block.name.c_str(), block.max_rel_err);
  std::printf("overall max_rel_err %.3e (tolerance 1e-4)\n", report.max_rel_err);
  if (!report.passed()) {
    std::printf("gradcheck FAILED\n");
    return 4;
  }
  std::printf("gradcheck PASSED\n");
  return 0;
}

int cmd_bench(std::vector<int> sizes, int runs) {
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1])
      throw std::invalid_argument("bench: sizes must be ascending");

  std::vector<double> means;
  for (int n : sizes) {
    sdtseg::BinaryMask mask(n, n);
    sdtseg::Rng rng(42);
    for (auto& v : mask.data) v = rng.bernoulli(0.01) ? 1 : 0;
    mask.data[0] = 1;  // never degenerate
    mask.data[1] = 0;

    sdtseg::signed_dt(mask);  // warm-up
    double total_ms = 0.0;
    double sink = 0.0;
    for (int r = 0; r < runs; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      sdtseg::ScalarField f = sdtseg::signed_dt(mask);
      const auto t1 = std::chrono::steady_clock::now();
      total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
      sink += f.data[f.data.size() / 2];
    }
    const double mean = total_ms / runs;
    means.push_back(mean);
    std::printf("size %5d: %9.3f ms  (mean of %d runs, checksum %.1f)\n", n, mean, runs, sink);
  }
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] != 2 * sizes[i - 1]) continue;
    const double ratio = means[i] / means[i - 1];
    std::printf("scaling %d->%d: time ratio %.2f (4.0x pixels, limit 4.5) %s\n", sizes[i - 1],
                sizes[i], ratio, ratio <= 4.5 ? "PASS" : "FAIL");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // training allocates and frees large activation buffers at high rate;
  // keeping them on the heap avoids per-step mmap/zero-fill churn
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
#endif
  CLI::App app{"sdtseg: distance-transform-regularized semantic segmentation toolkit"};
  app.require_subcommand(1);

  std::string mask_path, out_path, config_path, weights_path, image_path, probs_path;
  double clip = 32.0, lambda = 2.0, overlap = 0.75;
  int classes = 0, window = 0, width = 8, runs = 5;
  std::uint64_t seed = 1;
  bool corrupt = false;
  std::vector<int> sizes = {512, 1024, 2048};

  auto* sdt = app.add_subcommand("sdt", "compute a class-wise signed distance stack from a mask");
  sdt->add_option("--mask", mask_path, "input PGM mask")->required();
  sdt->add_option("--out", out_path, "output SDTF path")->required();
  sdt->add_option("--clip", clip, "clip radius in pixels (default 32)");
  sdt->add_option("--classes", classes, "class count override (default: 1 + max value)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset to disk");
  synth->add_option("--config", config_path, "run config JSON")->required();

  auto* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", config_path, "run config JSON")->required();

  auto* eval = app.add_subcommand("eval", "evaluate weights on the configured validation set");
  eval->add_option("--weights", weights_path, "SDTW weights")->required();
  eval->add_option("--config", config_path, "run config JSON")->required();

  auto* infer = app.add_subcommand("infer", "sliding-window inference on one image");
  infer->add_option("--weights", weights_path, "SDTW weights")->required();
  infer->add_option("--image", image_path, "input image (3-channel SDTF)")->required();
  infer->add_option("--out", out_path, "output prediction mask (PGM)")->required();
  infer->add_option("--probs", probs_path, "optional averaged probability stack (SDTF)");
  infer->add_option("--window", window, "window size (default: min(dims, 256))");
  infer->add_option("--overlap", overlap, "window overlap fraction (default 0.75)");

  auto* gradcheck = app.add_subcommand("gradcheck", "verify gradients against finite differences");
  gradcheck->add_option("--seed", seed, "instance seed");
  gradcheck->add_option("--lambda", lambda, "regression loss weight");
  gradcheck->add_option("--classes", classes, "class count (default 4)");
  gradcheck->add_option("--width", width, "trunk width (default 8)");
  gradcheck->add_flag("--corrupt", corrupt, "corrupt one gradient entry (negative control)");

  auto* bench = app.add_subcommand("bench", "time the distance transform at several sizes");
  bench->add_option("--sizes", sizes, "ascending grid sizes");
  bench->add_option("--runs", runs, "runs per size (default 5)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sdt->parsed()) return cmd_sdt(mask_path, out_path, clip, classes);
    if (synth->parsed()) return cmd_synth(config_path);
    if (train->parsed()) return cmd_train(config_path);
    if (eval->parsed()) return cmd_eval(weights_path, config_path);
    if (infer->parsed())
      return cmd_infer(weights_path, image_path, out_path, probs_path, window, overlap);
    if (gradcheck->parsed())
      return cmd_gradcheck(seed, lambda, classes > 0 ? classes : 4, width, corrupt);
    if (bench->parsed()) return cmd_bench(sizes, runs);
  } catch (const sdtseg::divergence_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
