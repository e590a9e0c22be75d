// SPDX-License-Identifier: Apache-2.0
//
// spikebert: synthetic data + teacher dumps, two-stage distillation,
// evaluation and energy reports.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "spikebert/checkpoint.hpp"
#include "spikebert/config.hpp"
#include "spikebert/data.hpp"
#include "spikebert/distill.hpp"
#include "spikebert/energy.hpp"
#include "spikebert/error.hpp"
#include "spikebert/teacher_io.hpp"
#include "spikebert/trainer.hpp"

namespace fs = std::filesystem;
using namespace spikebert;

namespace {

/// Thrown for bad invocations; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path output_path(const std::string& given, const std::string& fallback_name) {
  if (!given.empty()) return given;
  const char* dir = std::getenv("SPIKEBERT_OUT_DIR");
  fs::path base = dir != nullptr ? fs::path(dir) : fs::current_path();
  fs::create_directories(base);
  return base / fallback_name;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty() || !fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

Vocab resolve_vocab(const std::string& vocab_path, const std::vector<Sample>* data) {
  if (!vocab_path.empty()) {
    require_file(vocab_path, "vocab file");
    return Vocab::load(vocab_path);
  }
  if (data == nullptr) throw UsageError("--vocab is required");
  return Vocab::build(*data);
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool deterministic = false;
};

void load_config(const Common& c, ModelConfig& model, TrainConfig& train) {
  if (!c.config_path.empty()) {
    require_file(c.config_path, "config file");
    apply_config(read_key_values(c.config_path), model, train);
  }
  if (c.seed) train.seed = *c.seed;
  try {
    model.validate();
  } catch (const ContractViolation& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (c.threads < 1) throw UsageError("--threads must be >= 1");
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value hyperparameter file");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--threads", c.threads, "batch-parallel gradient threads");
  cmd->add_flag("--deterministic", c.deterministic,
                "fixed-order gradient reduction (always on; kept for scripts)");
}

int cmd_gen_synth(int train_n, int test_n, int vocab_size, std::uint64_t seed, const std::string& out_dir) {
  const fs::path dir = out_dir.empty() ? output_path("", "synth") : fs::path(out_dir);
  fs::create_directories(dir);
  const auto train = synth_dataset(train_n, vocab_size, seed);
  const auto test = synth_dataset(test_n, vocab_size, seed + 1);
  write_tsv(train, dir / "train.tsv");
  write_tsv(test, dir / "test.tsv");
  const auto words = synth_words(vocab_size);
  Vocab::from_words(words).save(dir / "vocab.txt");
  std::cout << "wrote " << (dir / "train.tsv").string() << ", " << (dir / "test.tsv").string() << ", "
            << (dir / "vocab.txt").string() << '\n';
  return 0;
}

struct GenTeacherArgs {
  Common common;
  int stage = 2;
  std::string data, out, vocab, pos_lexicon;
  int layers = 12;
  int hidden = 64;
  int augment_copies = 0;
  std::optional<int> num_classes;
};

int cmd_gen_teacher(const GenTeacherArgs& a) {
  if (a.stage != 1 && a.stage != 2) throw UsageError("--stage must be 1 or 2");
  require_file(a.data, "dataset");
  ModelConfig model;
  TrainConfig train;
  load_config(a.common, model, train);
  std::vector<Sample> samples = load_tsv(a.data);
  if (samples.empty()) throw InputError("dataset is empty");
  const Vocab vocab = resolve_vocab(a.vocab, &samples);
  if (a.augment_copies > 0) {
    PosLexicon lexicon;
    if (!a.pos_lexicon.empty()) {
      require_file(a.pos_lexicon, "POS lexicon");
      lexicon = PosLexicon::load(a.pos_lexicon);
    } else {
      std::cerr << "warning: no POS lexicon; same-POS replacement falls back to uniform vocab words\n";
    }
    const AugmentConfig cfg{train.p_mask, train.p_pos, train.p_ng, train.seed};
    const std::size_t original = samples.size();
    for (int copy = 0; copy < a.augment_copies; ++copy) {
      for (std::size_t i = 0; i < original; ++i) {
        samples.push_back(augment(samples[i], cfg, lexicon, vocab, std::uint64_t(copy) * original + i));
      }
    }
  }
  encode_all(samples, vocab, model.max_len);
  int classes = 0;
  for (const auto& s : samples) classes = std::max(classes, s.label.value_or(0) + 1);
  classes = a.num_classes.value_or(std::max(classes, 2));
  const TeacherDump dump = gen_synthetic_dump(samples, a.layers, a.hidden, classes, train.seed, a.stage, vocab.hash());
  const fs::path out = output_path(a.out, "teacher.sbtd");
  write_dump(dump, out);
  if (a.vocab.empty()) Vocab(vocab).save(fs::path(out).concat(".vocab"));
  std::cout << "wrote " << out.string() << " (" << dump.header.sample_count << " samples, stage " << a.stage << ")\n";
  return 0;
}

struct TrainArgs {
  Common common;
  std::string dump, vocab, out, log, init;
  bool from_scratch = false;
  std::optional<int> steps;
};

int cmd_train(const TrainArgs& a, int stage) {
  require_file(a.dump, "teacher dump");
  ModelConfig model;
  TrainConfig train;
  load_config(a.common, model, train);
  if (a.steps) train.steps = *a.steps;
  if (stage == 2 && a.init.empty() && !a.from_scratch) {
    throw UsageError("train-stage2 needs --init <stage-1 checkpoint> or --from-scratch");
  }
  const Vocab vocab = resolve_vocab(a.vocab, nullptr);
  const TeacherDump dump = read_dump(a.dump);
  if (dump.header.vocab_hash != vocab.hash()) {
    throw DataError("teacher dump was tokenized with a different vocabulary (hash mismatch)");
  }
  model.vocab_size = vocab.size();
  if (dump.has_targets()) model.num_classes = static_cast<int>(dump.header.num_classes);
  const int layers = static_cast<int>(dump.header.layers), hidden = static_cast<int>(dump.header.hidden);

  std::optional<Student<float>> student;
  if (!a.init.empty()) {
    require_file(a.init, "checkpoint");
    Checkpoint ckpt = read_checkpoint(a.init);
    if (ckpt.meta.count("vocab_hash") && ckpt.meta.at("vocab_hash") != std::to_string(vocab.hash())) {
      throw DataError("checkpoint was trained with a different vocabulary");
    }
    ModelConfig resumed = ckpt.config;
    if (stage == 2 && dump.has_targets() && resumed.num_classes != model.num_classes) {
      // Head shape follows the task; everything else carries over.
      resumed.num_classes = model.num_classes;
      auto fresh = init_parameters<float>(resumed, train.seed);
      ckpt.params["head.weight"] = fresh.at("head.weight");
      ckpt.params["head.bias"] = fresh.at("head.bias");
    }
    student.emplace(resumed, layers, hidden, train, std::move(ckpt.params));
    if (train.reinit_aligners) student->reinit_aligners(train.seed);
  } else {
    model.validate();
    student.emplace(model, layers, hidden, train);
  }

  const fs::path log_path = output_path(a.log, stage == 1 ? "stage1_loss.tsv" : "stage2_loss.tsv");
  std::vector<LossBreakdown> rows;
  auto on_step = [](int step, const LossBreakdown& t) {
    if (step % 50 == 0) std::cerr << "step " << step << " loss " << t.total << '\n';
  };
  const int threads = a.common.threads;
  rows = stage == 1 ? run_stage1(*student, dump, train, threads, on_step)
                    : run_stage2(*student, dump, train, threads, on_step);
  write_loss_log(rows, log_path);
  const fs::path out = output_path(a.out, stage == 1 ? "stage1.ckpt" : "stage2.ckpt");
  write_checkpoint(make_checkpoint(*student, vocab.hash(), stage), out);
  std::cout << "wrote " << out.string() << " and " << log_path.string() << " (" << rows.size() << " steps)\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, vocab;
};

std::pair<Checkpoint, std::vector<Sample>> load_for_inference(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.data, "dataset");
  Checkpoint ckpt = read_checkpoint(a.checkpoint);
  std::vector<Sample> samples = load_tsv(a.data);
  if (samples.empty()) throw InputError("dataset is empty");
  const Vocab vocab = resolve_vocab(a.vocab, nullptr);
  if (vocab.size() != ckpt.config.vocab_size) throw DataError("vocab size differs from the checkpoint's");
  encode_all(samples, vocab, ckpt.config.max_len);
  return {std::move(ckpt), std::move(samples)};
}

int cmd_eval(const EvalArgs& a) {
  auto [ckpt, samples] = load_for_inference(a);
  const EvalReport r = evaluate(ckpt.params, ckpt.config, samples);
  std::cout << "accuracy " << r.accuracy() << " (" << r.correct << "/" << r.total << ")\n";
  for (std::size_t c = 0; c < r.class_total.size(); ++c) {
    std::cout << "class " << c << ": " << r.class_correct[c] << "/" << r.class_total[c] << '\n';
  }
  return 0;
}

int cmd_energy(const EvalArgs& a, std::size_t batch, const std::string& out_dir) {
  auto [ckpt, samples] = load_for_inference(a);
  const std::size_t n = std::min(batch, samples.size());
  const TokenBatch tokens = make_token_batch(std::span<const Sample>(samples).first(n));
  const auto rates = measure_firing_rates(ckpt.params, ckpt.config, tokens);
  const auto profiles = model_profiles(ckpt.config, rates);
  const EnergyReport report = snn_energy(profiles);
  const std::string text = format_report(report);
  std::cout << text;
  const fs::path dir = out_dir.empty() ? output_path("", "") : fs::path(out_dir);
  fs::create_directories(dir);
  std::ofstream(dir / "energy_report.txt", std::ios::binary) << text;
  write_report_kv(report, dir / "energy_report.kv");
  std::cout << "ANN energy at the same FLOPs (mJ): ";
  double flops = 0;
  for (const auto& p : profiles) flops += p.flops;
  std::cout << ann_energy_mj(flops) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking transformer distillation toolkit"};
  app.require_subcommand(1);

  int synth_train = 2000, synth_test = 500, synth_vocab = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* gen_synth = app.add_subcommand("gen-synth", "write a synthetic two-class dataset and vocab");
  gen_synth->add_option("--train", synth_train);
  gen_synth->add_option("--test", synth_test);
  gen_synth->add_option("--vocab-size", synth_vocab);
  gen_synth->add_option("--seed", synth_seed);
  gen_synth->add_option("--out-dir", synth_out);

  GenTeacherArgs gt;
  auto* gen_teacher = app.add_subcommand("gen-teacher", "write a synthetic SBTD teacher dump");
  add_common(gen_teacher, gt.common);
  gen_teacher->add_option("--stage", gt.stage, "1: features only, 2: with logits and labels");
  gen_teacher->add_option("--data", gt.data, "TSV dataset")->required();
  gen_teacher->add_option("--out", gt.out);
  gen_teacher->add_option("--vocab", gt.vocab);
  gen_teacher->add_option("--layers", gt.layers, "teacher blocks B");
  gen_teacher->add_option("--hidden", gt.hidden, "teacher width D_t");
  gen_teacher->add_option("--num-classes", gt.num_classes);
  gen_teacher->add_option("--augment", gt.augment_copies, "augmented copies per sample");
  gen_teacher->add_option("--pos-lexicon", gt.pos_lexicon);

  TrainArgs t1, t2;
  auto* train1 = app.add_subcommand("train-stage1", "pre-training distillation (feature + embedding alignment)");
  auto* train2 = app.add_subcommand("train-stage2", "task-specific distillation (adds logits KL and CE)");
  for (auto [cmd, args] : {std::pair{train1, &t1}, std::pair{train2, &t2}}) {
    add_common(cmd, args->common);
    cmd->add_option("--dump", args->dump, "SBTD teacher dump")->required();
    cmd->add_option("--vocab", args->vocab, "vocab file")->required();
    cmd->add_option("--out", args->out, "checkpoint path");
    cmd->add_option("--log", args->log, "loss log TSV path");
    cmd->add_option("--steps", args->steps);
    cmd->add_option("--init", args->init, "checkpoint to start from");
  }
  train2->add_flag("--from-scratch", t2.from_scratch, "start stage 2 without a stage-1 checkpoint");

  EvalArgs ev, en;
  std::size_t energy_batch = 64;
  std::string energy_out;
  auto* eval = app.add_subcommand("eval", "classification accuracy of a checkpoint");
  auto* energy = app.add_subcommand("energy", "theoretical energy report");
  for (auto [cmd, args] : {std::pair{eval, &ev}, std::pair{energy, &en}}) {
    cmd->add_option("--checkpoint", args->checkpoint)->required();
    cmd->add_option("--data", args->data)->required();
    cmd->add_option("--vocab", args->vocab)->required();
  }
  energy->add_option("--batch", energy_batch, "samples used to measure firing rates");
  energy->add_option("--out-dir", energy_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_synth) return cmd_gen_synth(synth_train, synth_test, synth_vocab, synth_seed, synth_out);
    if (*gen_teacher) return cmd_gen_teacher(gt);
    if (*train1) return cmd_train(t1, 1);
    if (*train2) return cmd_train(t2, 2);
    if (*eval) return cmd_eval(ev);
    if (*energy) return cmd_energy(en, energy_batch, energy_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
