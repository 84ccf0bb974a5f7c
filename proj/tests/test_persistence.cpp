#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "maskspec/checkpoint.hpp"
#include "maskspec/config.hpp"
#include "maskspec/manifest.hpp"
#include "maskspec/model.hpp"
#include "maskspec/optim.hpp"
#include "maskspec/rng.hpp"
#include "support/test_synth.hpp"

using namespace maskspec;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

ModelParams<float> mini_model(int seed = 5, bool with_decoder = true, long classes = 0) {
  Rng rng(seed);
  return ModelParams<float>::create(testsupport::mini_encoder(), with_decoder, classes, rng,
                                    testsupport::mini_decoder());
}

void corrupt_byte(const std::string& path, long offset_from_start) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(offset_from_start);
  char c = 0;
  f.read(&c, 1);
  c = static_cast<char>(c ^ 0x5A);
  f.seekp(offset_from_start);
  f.write(&c, 1);
}

}  // namespace

TEST_CASE("checkpoint round trip restores every tensor bit-exactly") {
  const auto dir = testsupport::scratch_dir("ckpt_roundtrip");
  ModelParams<float> model = mini_model();
  const std::string path = (dir / "model.msks").string();
  save_checkpoint(path, model, nullptr, {{"epoch", 3}, {"seed", 17}, {"loss", 0.25}});

  const RawCheckpoint<float> ck = read_checkpoint<float>(path);
  REQUIRE(ck.metadata.at("epoch").get<int>() == 3);
  REQUIRE(ck.names.size() == model.params.size());
  for (const auto& p : model.params) {
    const long i = ck.find(p.name);
    REQUIRE(i >= 0);
    REQUIRE(ck.shapes[i] == p.tensor.shape());
    REQUIRE(ck.values[i] == p.tensor.values());
  }

  // The stored name set equals the parameter name set.
  std::set<std::string> stored(ck.names.begin(), ck.names.end());
  std::set<std::string> expected;
  for (const auto& p : model.params) expected.insert(p.name);
  REQUIRE(stored == expected);
}

TEST_CASE("a reloaded model produces bit-identical forward passes") {
  const auto dir = testsupport::scratch_dir("ckpt_forward");
  ModelParams<float> model = mini_model(7);
  const std::string path = (dir / "model.msks").string();
  save_checkpoint(path, model);

  ModelParams<float> reloaded = load_model_checkpoint<float>(path);
  Rng rng(3);
  Matrix<float> patches(6, 16);
  for (auto& v : patches.data) v = static_cast<float>(rng.uniform(-1, 1));
  const auto a = encoder_forward(patch_embed(Tensor<float>::constant(patches), model), model);
  const auto b =
      encoder_forward(patch_embed(Tensor<float>::constant(patches), reloaded), reloaded);
  REQUIRE(a.values() == b.values());
}

TEST_CASE("optimizer moments survive the round trip") {
  const auto dir = testsupport::scratch_dir("ckpt_optim");
  ModelParams<float> model = mini_model(9);
  AdamW<float> opt(model);
  for (auto& p : model.params) {
    for (auto& g : p.tensor.grad_mut()) g = 0.3f;
  }
  opt.step(1e-3);
  const std::string path = (dir / "model.msks").string();
  save_checkpoint(path, model, &opt);

  const RawCheckpoint<float> ck = read_checkpoint<float>(path);
  REQUIRE(ck.metadata.at("optimizer_step").get<long>() == 1);
  const long i = ck.find("optim.m." + model.params[0].name);
  REQUIRE(i >= 0);
  bool nonzero = false;
  for (const float v : ck.values[i]) nonzero = nonzero || v != 0.0f;
  REQUIRE(nonzero);
}

TEST_CASE("corruption and malformed files map to distinct error codes") {
  const auto dir = testsupport::scratch_dir("ckpt_errors");
  ModelParams<float> model = mini_model(11);
  const std::string path = (dir / "model.msks").string();
  save_checkpoint(path, model);
  const auto size = fs::file_size(path);

  SECTION("payload corruption fails the CRC") {
    corrupt_byte(path, static_cast<long>(size) / 2);
    try {
      read_checkpoint<float>(path);
      FAIL("expected checkpoint_error");
    } catch (const checkpoint_error& e) {
      REQUIRE(e.code() == CheckpointErrc::bad_crc);
    }
  }

  SECTION("truncation is reported as such") {
    fs::resize_file(path, size / 2);
    try {
      read_checkpoint<float>(path);
      FAIL("expected checkpoint_error");
    } catch (const checkpoint_error& e) {
      // The shortened file cannot pass the CRC; either code is file-level.
      REQUIRE((e.code() == CheckpointErrc::bad_crc || e.code() == CheckpointErrc::truncated));
    }
  }

  SECTION("bad magic") {
    corrupt_byte(path, 1);
    try {
      read_checkpoint<float>(path);
      FAIL("expected checkpoint_error");
    } catch (const checkpoint_error& e) {
      REQUIRE(e.code() == CheckpointErrc::bad_magic);
    }
  }

  SECTION("unsupported version") {
    corrupt_byte(path, 4);
    try {
      read_checkpoint<float>(path);
      FAIL("expected checkpoint_error");
    } catch (const checkpoint_error& e) {
      REQUIRE(e.code() == CheckpointErrc::bad_version);
    }
  }

  SECTION("missing file is an io error") {
    try {
      read_checkpoint<float>((dir / "nope.msks").string());
      FAIL("expected checkpoint_error");
    } catch (const checkpoint_error& e) {
      REQUIRE(e.code() == CheckpointErrc::io);
    }
  }

  SECTION("wrong dtype is reported per tensor") {
    try {
      read_checkpoint<double>(path);
      FAIL("expected checkpoint_error");
    } catch (const checkpoint_error& e) {
      REQUIRE(e.code() == CheckpointErrc::dtype_mismatch);
    }
  }
}

TEST_CASE("loading into a mismatched architecture names the offending tensor") {
  const auto dir = testsupport::scratch_dir("ckpt_mismatch");
  ModelParams<float> model = mini_model(13);
  const std::string path = (dir / "model.msks").string();
  save_checkpoint(path, model);

  EncoderConfig bigger = testsupport::mini_encoder();
  bigger.emb = 32;  // different width
  Rng rng(1);
  ModelParams<float> other =
      ModelParams<float>::create(bigger, true, 0, rng, testsupport::mini_decoder());
  const RawCheckpoint<float> ck = read_checkpoint<float>(path);
  try {
    load_into_model(ck, other);
    FAIL("expected checkpoint_error");
  } catch (const checkpoint_error& e) {
    REQUIRE(e.code() == CheckpointErrc::shape_mismatch);
    REQUIRE(std::string(e.what()).find("patch_embed.weight") != std::string::npos);
  }
}

TEST_CASE("finetune loads accept encoder-only subsets and missing heads") {
  const auto dir = testsupport::scratch_dir("ckpt_subset");
  ModelParams<float> pretrained = mini_model(15, true, 0);
  const std::string path = (dir / "pretrained.msks").string();
  save_checkpoint(path, pretrained);

  Rng rng(2);
  ModelParams<float> finetune = ModelParams<float>::create(testsupport::mini_encoder(), false, 4,
                                                           rng, testsupport::mini_decoder());
  const RawCheckpoint<float> ck = read_checkpoint<float>(path);
  load_into_model(ck, finetune, /*encoder_only=*/true, /*allow_fresh_head=*/true);
  REQUIRE(finetune.at("patch_embed.weight").values() ==
          pretrained.at("patch_embed.weight").values());

  // Without the subset rule a missing head is an error.
  try {
    load_into_model(ck, finetune, true, false);
    FAIL("expected checkpoint_error");
  } catch (const checkpoint_error& e) {
    REQUIRE(e.code() == CheckpointErrc::missing_tensor);
  }
}

TEST_CASE("manifest loading resolves paths and validates content") {
  const auto dir = testsupport::scratch_dir("manifest");
  testsupport::write_wav_pcm16((dir / "a.wav").string(),
                               {testsupport::sine_wave(400, 0.2, 32000)}, 32000);
  testsupport::write_wav_pcm16((dir / "b.wav").string(),
                               {testsupport::sine_wave(500, 0.2, 32000)}, 32000);
  {
    std::ofstream m(dir / "data.jsonl");
    m << R"({"path": "a.wav", "labels": [0], "split": "train", "fold": 1})" << "\n";
    m << "\n";
    m << R"({"path": "b.wav", "labels": [1, 2], "split": "eval", "sample_weight": 0.5})" << "\n";
  }

  const auto records = load_manifest((dir / "data.jsonl").string());
  REQUIRE(records.size() == 2);
  REQUIRE(records[0].path == (dir / "a.wav").string());
  REQUIRE(records[0].fold.value() == 1);
  REQUIRE(records[1].labels == std::vector<long>{1, 2});
  REQUIRE(records[1].sample_weight.value() == 0.5);
  REQUIRE(filter_split(records, "train").size() == 1);

  validate_labels(records, 3);
  REQUIRE_THROWS_AS(validate_labels(records, 2), input_error);

  {
    std::ofstream m(dir / "missing.jsonl");
    m << R"({"path": "ghost.wav", "labels": [0]})" << "\n";
  }
  REQUIRE_THROWS_AS(load_manifest((dir / "missing.jsonl").string()), input_error);
  REQUIRE_NOTHROW(load_manifest((dir / "missing.jsonl").string(), false));

  {
    std::ofstream m(dir / "badsplit.jsonl");
    m << R"({"path": "a.wav", "split": "test"})" << "\n";
  }
  REQUIRE_THROWS_AS(load_manifest((dir / "badsplit.jsonl").string()), input_error);
  REQUIRE_THROWS_AS(load_manifest((dir / "absent.jsonl").string()), input_error);

  write_manifest((dir / "out.jsonl").string(), records);
  const auto back = load_manifest((dir / "out.jsonl").string());
  REQUIRE(back.size() == records.size());
  REQUIRE(back[1].labels == records[1].labels);
}

TEST_CASE("config files parse with defaults and reject unknown keys") {
  const auto dir = testsupport::scratch_dir("config");
  {
    std::ofstream f(dir / "pre.cfg");
    f << "# pretraining run\n";
    f << "manifest = data.jsonl\n";
    f << "scale = small\n";
    f << "alpha = 0.6\n";
    f << "seed = 99\n";
  }
  const PretrainRunConfig cfg = PretrainRunConfig::load((dir / "pre.cfg").string());
  REQUIRE(cfg.manifest == "data.jsonl");
  REQUIRE(cfg.scale == ModelScale::small);
  REQUIRE(cfg.alpha == 0.6);
  REQUIRE(cfg.seed == 99);
  REQUIRE(cfg.batch_size == 8);
  REQUIRE(cfg.lr == 1e-3);
  REQUIRE(cfg.weight_decay == 0.05);
  REQUIRE(cfg.epochs == 80.0);
  REQUIRE(cfg.warmup_epochs == 40.0);

  {
    std::ofstream f(dir / "bad.cfg");
    f << "manifest = data.jsonl\n";
    f << "alhpa = 0.6\n";
  }
  REQUIRE_THROWS_AS(PretrainRunConfig::load((dir / "bad.cfg").string()), input_error);

  {
    std::ofstream f(dir / "fine.cfg");
    f << "manifest = data.jsonl\nnum_classes = 4\ntask_type = multilabel\n";
  }
  const FinetuneRunConfig fin = FinetuneRunConfig::load((dir / "fine.cfg").string());
  REQUIRE(fin.num_classes == 4);
  REQUIRE(fin.task_type == TaskType::multilabel);
  REQUIRE(fin.warmup_epochs == 5.0);
  REQUIRE(fin.layer_decay == 0.75);
  REQUIRE(fin.mixup_alpha == 0.3);
}

TEST_CASE("MASKSPEC_SEED overrides the configured seed") {
  const auto dir = testsupport::scratch_dir("config_env");
  {
    std::ofstream f(dir / "pre.cfg");
    f << "manifest = data.jsonl\nseed = 5\n";
  }
  setenv("MASKSPEC_SEED", "777", 1);
  const PretrainRunConfig cfg = PretrainRunConfig::load((dir / "pre.cfg").string());
  unsetenv("MASKSPEC_SEED");
  REQUIRE(cfg.seed == 777);
  const PretrainRunConfig plain = PretrainRunConfig::load((dir / "pre.cfg").string());
  REQUIRE(plain.seed == 5);
}
