// maskspec command line: self-supervised masked-spectrogram pretraining,
// supervised finetuning, evaluation, mask-ratio sweeps, reconstruction
// dumps, and checkpoint inspection.

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "maskspec/maskspec.hpp"

namespace {

using namespace maskspec;

std::vector<double> parse_ratio_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  if (out.empty()) throw input_error("no ratios given");
  return out;
}

int cmd_pretrain(const std::string& config_path) {
  const PretrainRunConfig cfg = PretrainRunConfig::load(config_path);
  const auto records = load_manifest(cfg.manifest);
  const SpectrogramSource<float> data = manifest_source<float>(records, cfg.channel_mode);

  Rng init_rng(derive_seed(cfg.seed, 0));
  ModelParams<float> model = ModelParams<float>::create(cfg.scale, true, 0, init_rng);
  std::cerr << "pretrain: " << scale_to_string(cfg.scale) << ", " << data.count << " clips, alpha "
            << cfg.alpha << ", seed " << cfg.seed << "\n";

  PretrainOptions opt;
  opt.alpha = cfg.alpha;
  opt.epochs = cfg.epochs;
  opt.warmup_epochs = cfg.warmup_epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.seed = cfg.seed;
  opt.max_steps = cfg.max_steps;
  opt.loss_csv = cfg.loss_csv;
  opt.checkpoint_dir = cfg.checkpoint_dir;
  opt.checkpoint_every = cfg.checkpoint_every;
  opt.on_step = [](const StepRecord& r) {
    std::cerr << "step " << r.step << " epoch " << format_value(r.epoch) << " lr "
              << format_value(r.lr) << " loss " << format_value(r.loss_mean) << "\n";
  };
  const auto records_out = run_pretraining(model, data, opt);
  std::cout << "pretraining finished after " << records_out.size() << " steps, final loss "
            << format_value(records_out.back().loss_mean) << "\n";
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& checkpoint_path,
                 bool random_init) {
  const FinetuneRunConfig cfg = FinetuneRunConfig::load(config_path);
  const auto records = load_manifest(cfg.manifest);
  validate_labels(records, cfg.num_classes);
  const auto train_records = filter_split(records, "train");
  const auto eval_records = filter_split(records, "eval");

  Rng init_rng(derive_seed(cfg.seed, 0));
  ModelParams<float> model =
      ModelParams<float>::create(cfg.scale, false, cfg.num_classes, init_rng);
  if (!random_init) {
    if (checkpoint_path.empty()) throw input_error("finetune needs --checkpoint or --random-init");
    const RawCheckpoint<float> ck = read_checkpoint<float>(checkpoint_path);
    load_into_model(ck, model, /*encoder_only=*/true, /*allow_fresh_head=*/true);
    std::cerr << "finetune: loaded encoder from " << checkpoint_path << "\n";
  } else {
    std::cerr << "finetune: random initialization\n";
  }

  FinetuneOptions opt;
  opt.num_classes = cfg.num_classes;
  opt.task_type = cfg.task_type;
  opt.epochs = cfg.epochs;
  opt.warmup_epochs = cfg.warmup_epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.layer_decay = cfg.layer_decay;
  opt.mixup_alpha = cfg.mixup_alpha;
  opt.mixup_mode = cfg.mixup_mode;
  opt.roll_augment = cfg.roll_augment;
  opt.seed = cfg.seed;
  opt.channel_mode = cfg.channel_mode;
  opt.early_stop_accuracy = cfg.early_stop_accuracy;

  const FinetuneResult result = finetune_run(model, train_records, eval_records, opt);
  std::cout << "finetuned for " << result.epochs_run << " epochs\n";
  if (!eval_records.empty()) {
    if (cfg.task_type == TaskType::multiclass) {
      std::cout << "eval accuracy " << format_value(result.final_report.accuracy) << "\n";
    } else {
      std::cout << "eval mAP " << format_value(result.final_report.map) << "\n";
    }
    if (!cfg.report_json.empty()) {
      std::ofstream out(cfg.report_json);
      nlohmann::json j = result.final_report.to_json();
      j["task_type"] = cfg.task_type == TaskType::multiclass ? "multiclass" : "multilabel";
      out << j.dump(2) << "\n";
    }
    if (!cfg.report_csv.empty()) result.final_report.write_csv(cfg.report_csv);
  }
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    save_checkpoint(cfg.checkpoint_dir + "/finetuned.msks", model, nullptr,
                    {{"task_type", cfg.task_type == TaskType::multiclass ? "multiclass"
                                                                         : "multilabel"},
                     {"seed", cfg.seed},
                     {"epochs", result.epochs_run}});
    std::cout << "saved " << cfg.checkpoint_dir << "/finetuned.msks\n";
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& manifest_path,
             const std::string& report_json, const std::string& report_csv, bool channel_ensemble,
             const std::string& channel_mode) {
  ModelParams<float> model = load_model_checkpoint<float>(checkpoint_path, /*encoder_only=*/true);
  if (model.num_classes <= 0) throw input_error("checkpoint has no classifier head");
  const auto all_records = load_manifest(manifest_path);
  validate_labels(all_records, model.num_classes);
  auto records = filter_split(all_records, "eval");
  if (records.empty()) records = all_records;

  FinetuneOptions opt;
  opt.num_classes = model.num_classes;
  const auto [metadata, entries] = read_checkpoint_summary(checkpoint_path);
  opt.task_type = task_type_from_string(metadata.value("task_type", std::string("multiclass")));
  opt.channel_mode = channel_mode_from_string(channel_mode);

  const EvalReport report = channel_ensemble ? channel_ensemble_eval(model, records, opt)
                                             : evaluate(model, records, opt);
  if (opt.task_type == TaskType::multiclass) {
    std::cout << "accuracy " << format_value(report.accuracy) << " over " << report.num_clips
              << " clips\n";
  } else {
    std::cout << "mAP " << format_value(report.map) << " over " << report.num_clips << " clips\n";
  }
  if (!report_json.empty()) {
    std::ofstream out(report_json);
    nlohmann::json j = report.to_json();
    j["task_type"] = opt.task_type == TaskType::multiclass ? "multiclass" : "multilabel";
    out << j.dump(2) << "\n";
  }
  if (!report_csv.empty()) report.write_csv(report_csv);
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& ratios_csv, long steps,
              const std::string& out_csv) {
  const PretrainRunConfig cfg = PretrainRunConfig::load(config_path);
  const auto records = load_manifest(cfg.manifest);
  const SpectrogramSource<float> data = manifest_source<float>(records, cfg.channel_mode);
  const std::vector<double> ratios = parse_ratio_list(ratios_csv);

  PretrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.warmup_epochs = cfg.warmup_epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.seed = cfg.seed;

  const auto rows = mask_ratio_sweep<float>(
      [&cfg]() {
        Rng rng(derive_seed(cfg.seed, 0));
        return ModelParams<float>::create(cfg.scale, true, 0, rng);
      },
      data, ratios, steps, opt);
  write_sweep_csv(out_csv, rows);
  for (const auto& row : rows) {
    std::cout << "alpha " << format_value(row.ratio) << " final loss "
              << format_value(row.final_loss) << "\n";
  }
  std::cout << "wrote " << out_csv << "\n";
  return 0;
}

int cmd_reconstruct(const std::string& checkpoint_path, const std::string& wav_path,
                    const std::string& outdir, double alpha, std::uint64_t seed,
                    const std::string& channel_mode) {
  ModelParams<float> model = load_model_checkpoint<float>(checkpoint_path);
  if (!model.with_decoder) throw input_error("checkpoint has no decoder; cannot reconstruct");
  const Spectrogram spec = compute_spectrogram(wav_path, channel_mode_from_string(channel_mode));
  const Matrix<float> original = spec.values;

  PatchGrid<float> grid = patchify(original, kPatchSize);
  Rng rng(seed);
  const MaskPlan plan = random_mask(grid.n(), alpha, rng);

  detail::PosCache<float> positions;
  Matrix<float> tagged = grid.patches;
  const Matrix<float>& pe = positions.get(grid.n(), grid.patches.cols);
  for (long i = 0; i < tagged.size(); ++i) tagged.data[i] += pe.data[i];
  const MaskedForward<float> fwd = masked_autoencoder_forward(
      tagged, plan, model, positions.get(grid.n(), model.decoder_cfg.emb));

  float lo = original.data[0];
  for (const float v : original.data) lo = std::min(lo, v);
  PatchGrid<float> masked_grid = grid;
  PatchGrid<float> recon_grid = grid;
  for (std::size_t i = 0; i < plan.masked_idx.size(); ++i) {
    const long r = plan.masked_idx[i];
    for (long c = 0; c < grid.patches.cols; ++c) {
      masked_grid.patches(r, c) = lo;
      recon_grid.patches(r, c) = fwd.masked_reconstruction.values()[i * grid.patches.cols + c];
    }
  }
  const Matrix<float> masked = unpatchify(masked_grid, original.rows, original.cols);
  const Matrix<float> recon = unpatchify(recon_grid, original.rows, original.cols);

  std::filesystem::create_directories(outdir);
  write_matrix_csv(outdir + "/original.csv", original);
  write_matrix_csv(outdir + "/masked.csv", masked);
  write_matrix_csv(outdir + "/reconstructed.csv", recon);
  write_matrix_pgm(outdir + "/original.pgm", original);
  write_matrix_pgm(outdir + "/masked.pgm", masked);
  write_matrix_pgm(outdir + "/reconstructed.pgm", recon);
  std::cout << "wrote original/masked/reconstructed (" << original.rows << "x" << original.cols
            << ") to " << outdir << "\n";
  return 0;
}

int cmd_inspect(const std::string& checkpoint_path) {
  const auto [metadata, entries] = read_checkpoint_summary(checkpoint_path);
  std::cout << "metadata: " << metadata.dump() << "\n";
  std::cout << std::left << std::setw(34) << "tensor" << std::setw(10) << "dtype" << std::setw(18)
            << "shape" << "count\n";
  long total = 0;
  long model_total = 0;
  for (const auto& e : entries) {
    std::ostringstream shape;
    shape << '[';
    for (std::size_t i = 0; i < e.shape.size(); ++i) {
      if (i) shape << 'x';
      shape << e.shape[i];
    }
    shape << ']';
    std::cout << std::left << std::setw(34) << e.name << std::setw(10)
              << (e.dtype_tag == 1 ? "float32" : "float64") << std::setw(18) << shape.str()
              << e.count << "\n";
    total += e.count;
    if (!e.name.starts_with("optim.")) model_total += e.count;
  }
  std::cout << "model parameters: " << model_total << "\n";
  if (total != model_total) std::cout << "with optimizer state: " << total << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-spectrogram pretraining and audio tagging toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, manifest_path, wav_path, outdir;
  std::string report_json, report_csv, ratios_csv = "0.75", out_csv = "sweep.csv";
  std::string channel_mode = "mean";
  bool random_init = false, channel_ensemble = false;
  long steps = 10;
  double alpha = 0.75;
  std::uint64_t seed = 0;

  auto* pre = app.add_subcommand("pretrain", "run masked-spectrogram pretraining");
  pre->add_option("--config", config_path, "run config file")->required();

  auto* fin = app.add_subcommand("finetune", "finetune a pretrained encoder on labeled clips");
  fin->add_option("--config", config_path, "run config file")->required();
  fin->add_option("--checkpoint", checkpoint_path, "pretraining checkpoint to start from");
  fin->add_flag("--random-init", random_init, "skip the checkpoint and train from scratch");

  auto* ev = app.add_subcommand("eval", "evaluate a finetuned checkpoint on a manifest");
  ev->add_option("--checkpoint", checkpoint_path, "finetuned checkpoint")->required();
  ev->add_option("--manifest", manifest_path, "dataset manifest")->required();
  ev->add_option("--report-json", report_json, "write the eval report as JSON");
  ev->add_option("--report-csv", report_csv, "write the eval report as CSV");
  ev->add_flag("--channel-ensemble", channel_ensemble,
               "average logits over left/right/mean channel views");
  ev->add_option("--channel-mode", channel_mode, "channel handling for mono evaluation");

  auto* sw = app.add_subcommand("sweep", "short pretraining runs over a mask-ratio grid");
  sw->add_option("--config", config_path, "base run config file")->required();
  sw->add_option("--ratios", ratios_csv, "comma-separated mask ratios")->required();
  sw->add_option("--steps", steps, "optimizer steps per ratio")->required();
  sw->add_option("--out", out_csv, "output CSV path")->required();

  auto* rec = app.add_subcommand("reconstruct", "dump original/masked/reconstructed spectrograms");
  rec->add_option("--checkpoint", checkpoint_path, "pretraining checkpoint")->required();
  rec->add_option("--wav", wav_path, "input WAV clip")->required();
  rec->add_option("--outdir", outdir, "output directory")->required();
  rec->add_option("--alpha", alpha, "mask ratio");
  rec->add_option("--seed", seed, "mask seed");
  rec->add_option("--channel-mode", channel_mode, "channel handling");

  auto* ins = app.add_subcommand("inspect", "print checkpoint metadata and tensor table");
  ins->add_option("--checkpoint", checkpoint_path, "checkpoint to inspect")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(config_path);
    if (fin->parsed()) return cmd_finetune(config_path, checkpoint_path, random_init);
    if (ev->parsed())
      return cmd_eval(checkpoint_path, manifest_path, report_json, report_csv, channel_ensemble,
                      channel_mode);
    if (sw->parsed()) return cmd_sweep(config_path, ratios_csv, steps, out_csv);
    if (rec->parsed())
      return cmd_reconstruct(checkpoint_path, wav_path, outdir, alpha, seed, channel_mode);
    if (ins->parsed()) return cmd_inspect(checkpoint_path);
  } catch (const maskspec::input_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const maskspec::checkpoint_error& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return e.code() == maskspec::CheckpointErrc::io ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
