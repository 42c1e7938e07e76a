#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "paka/checkpoint.hpp"
#include "paka/config.hpp"
#include "paka/error.hpp"
#include "paka/gradcheck.hpp"
#include "paka/protocols.hpp"
#include "paka/trainer.hpp"

namespace paka {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// A flag that only overrides the config when it was given on the command line.
template <typename T>
struct Override {
  T value{};
  CLI::Option* option = nullptr;

  bool given() const { return option != nullptr && option->count() > 0; }
  void apply(T& target) const {
    if (given()) target = value;
  }
};

template <typename T>
void add(CLI::App* app, Override<T>& o, const std::string& name, const std::string& help) {
  o.option = app->add_option(name, o.value, help);
}

// Flags shared by commands that read an experiment config.
struct CommonFlags {
  std::string config_path;
  Override<std::uint64_t> seed;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_path, "JSON experiment config; flags override its values");
  add(app, f.seed, "--seed", "root seed");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig c = f.config_path.empty() ? ExperimentConfig{} : load_config(f.config_path);
  f.seed.apply(c.seed);
  c.propagate_seed();
  return c;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIoError, "cannot write " + path.string());
  os << j.dump(2) << "\n";
  if (!os) fail(ErrorCode::kIoError, "write failed for " + path.string());
}

struct GenDataFlags {
  CommonFlags common;
  Override<std::string> out;
  Override<int> count, size, classes, min_shapes, max_shapes;
};

int cmd_gen_data(const GenDataFlags& f, std::ostream& out) {
  ExperimentConfig c = resolve_config(f.common);
  f.out.apply(c.dataset_dir);
  f.count.apply(c.data_count);
  f.size.apply(c.scene.size);
  f.classes.apply(c.scene.classes);
  f.min_shapes.apply(c.scene.min_shapes);
  f.max_shapes.apply(c.scene.max_shapes);
  require(c.data_count >= 1, ErrorCode::kInvalidArgument, "--count must be >= 1");
  validate(c.scene);
  const Dataset ds = make_dataset(c.scene, c.data_count);
  write_dataset(ds, c.dataset_dir);
  out << "wrote " << ds.samples.size() << " samples (" << ds.size << "x" << ds.size << ", " << ds.classes
      << " classes, seed " << ds.seed << ") to " << c.dataset_dir << "\n";
  return 0;
}

struct TrainFlags {
  CommonFlags common;
  Override<std::string> data, out_dir, loss, feature_source;
  Override<double> min_overlap, teacher_aug, student_aug, lr, weight_decay;
  Override<std::int64_t> steps;
  Override<int> batch_size, n_local;
  bool wall_time = false;
  int log_every = 100;
};

int cmd_train(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  ExperimentConfig c = resolve_config(f.common);
  f.data.apply(c.dataset_dir);
  f.out_dir.apply(c.output.dir);
  if (f.loss.given()) c.train.loss_kind = loss_kind_from_string(f.loss.value);
  if (f.feature_source.given()) c.train.feature_source = feature_source_from_string(f.feature_source.value);
  f.min_overlap.apply(c.train.min_overlap);
  f.teacher_aug.apply(c.train.teacher_aug_strength);
  f.student_aug.apply(c.train.student_aug_strength);
  f.lr.apply(c.train.learning_rate);
  f.weight_decay.apply(c.train.weight_decay);
  f.steps.apply(c.train.steps);
  f.batch_size.apply(c.train.batch_size);
  f.n_local.apply(c.train.n_local);
  validate(c.train);

  const Dataset ds = read_dataset(c.dataset_dir);
  fs::create_directories(c.output.dir);
  save_config(c.output.resolve("config.json"), c);

  std::vector<StepRecord> log;
  const auto on_step = [&](const StepRecord& r) {
    log.push_back(r);
    if (f.log_every > 0 && (r.step % f.log_every == 0 || r.step + 1 == c.train.steps))
      out << "step " << r.step << " loss " << std::setprecision(6) << r.mean_loss << " pairs " << r.n_pairs << "\n";
  };
  TrainResult result;
  try {
    result = run_training(c.train, ds, on_step);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNonFiniteLoss) throw;
    write_steps_csv(c.output.resolve(c.output.steps_csv), log, f.wall_time);
    err << "error: " << e.what() << "; steps.csv holds the " << log.size() << " completed step(s)\n";
    return 1;
  }
  save_checkpoint(c.output.resolve(c.output.checkpoint), result.checkpoint);
  write_steps_csv(c.output.resolve(c.output.steps_csv), result.log, f.wall_time);
  out << "trained " << result.checkpoint.step << " step(s) with " << to_string(c.train.loss_kind) << "; wrote "
      << c.output.resolve(c.output.checkpoint).string() << " and " << c.output.resolve(c.output.steps_csv).string()
      << "\n";
  return 0;
}

struct EvalFlags {
  CommonFlags common;
  Override<std::string> data, checkpoint, out, network, bank_split;
  Override<double> eval_fraction, lr;
  Override<int> clusters, seeds, nn_k, epochs;
  Override<std::vector<int>> fractions;
  bool include_self = false;
};

int cmd_eval(const std::string& protocol, const EvalFlags& f, std::ostream& out) {
  ExperimentConfig c = resolve_config(f.common);
  f.data.apply(c.dataset_dir);
  f.eval_fraction.apply(c.eval.eval_fraction);
  f.seeds.apply(c.eval.seeds);
  f.clusters.apply(c.eval.clusters);
  f.nn_k.apply(c.eval.nn_k);
  f.fractions.apply(c.eval.fractions);
  f.bank_split.apply(c.eval.bank_split);
  if (f.include_self) c.eval.exclude_self = false;
  f.epochs.apply(c.eval.linear_epochs);
  f.lr.apply(c.eval.linear_lr);
  if (f.network.given()) {
    require(f.network.value == "teacher" || f.network.value == "student", ErrorCode::kInvalidArgument,
            "--network must be teacher or student");
    c.eval.network = f.network.value == "teacher" ? Network::kTeacher : Network::kStudent;
  }
  require(c.eval.bank_split == "train" || c.eval.bank_split == "eval", ErrorCode::kInvalidArgument,
          "--bank-split must be train or eval");

  const fs::path ckpt_path = f.checkpoint.given() ? fs::path(f.checkpoint.value) : c.output.resolve(c.output.checkpoint);
  const fs::path metrics_path = f.out.given() ? fs::path(f.out.value) : c.output.resolve(c.output.metrics_json);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset ds = read_dataset(c.dataset_dir);
  const Model& model = select_network(ckpt, c.eval.network);

  ProtocolMetrics m;
  if (protocol == "overcluster") m = run_overcluster(model, ds, c.eval, c.eval.clusters, c.seed);
  else if (protocol == "nn") m = run_nn(model, ds, c.eval, c.seed);
  else m = run_linear(model, ds, c.eval, c.seed);
  write_json(metrics_path, to_json(m));
  out << protocol << ": miou " << std::setprecision(6) << m.miou << " accuracy " << m.accuracy;
  for (const FractionResult& fr : m.fractions)
    out << "\n  1/" << fr.fraction << " (" << fr.bank_images << " images): miou " << fr.miou << " accuracy "
        << fr.accuracy;
  out << "\nwrote " << metrics_path.string() << "\n";
  return 0;
}

struct CompareFlags {
  std::string a, b, out = "stability.json", label_a = "a", label_b = "b";
  std::size_t window = 0;
};

int cmd_compare(const CompareFlags& f, std::ostream& out) {
  const auto log_a = read_steps_csv(f.a);
  const auto log_b = read_steps_csv(f.b);
  const std::size_t window = f.window > 0 ? f.window : log_a.size();
  const StabilityReport r = stability_report(log_a, log_b, window);
  const auto side = [](const std::string& label, const std::string& path, const LogSummary& s) {
    return json{{"label", label}, {"path", path}, {"cv", s.cv}, {"min", s.min}, {"max", s.max}, {"mean", s.mean}};
  };
  std::string verdict = r.verdict;
  if (verdict == "a_more_stable") verdict = f.label_a + "_more_stable";
  else if (verdict == "b_more_stable") verdict = f.label_b + "_more_stable";
  const json j = {{"window", r.window},
                  {"a", side(f.label_a, f.a, r.a)},
                  {"b", side(f.label_b, f.b, r.b)},
                  {"verdict", verdict}};
  write_json(f.out, j);
  out << "cv(" << f.label_a << ") = " << std::setprecision(6) << r.a.cv << ", cv(" << f.label_b << ") = " << r.b.cv
      << ": " << verdict << "\nwrote " << f.out << "\n";
  return 0;
}

struct GradcheckFlags {
  std::uint64_t seed = 0;
  std::vector<std::string> losses;
  int instances = 20;
  bool skip_end_to_end = false;
};

int cmd_gradcheck(const GradcheckFlags& f, std::ostream& out, std::ostream& err) {
  GradcheckOptions opt;
  opt.seed = f.seed;
  opt.instances = f.instances;
  opt.end_to_end = !f.skip_end_to_end;
  require(opt.instances >= 1, ErrorCode::kInvalidArgument, "--instances must be >= 1");
  if (!f.losses.empty() && !(f.losses.size() == 1 && f.losses[0] == "all")) {
    opt.losses.clear();
    for (const auto& l : f.losses) opt.losses.push_back(loss_kind_from_string(l));
  }
  std::vector<std::string> failing;
  for (const GradcheckResult& r : run_gradcheck(opt)) {
    out << std::left << std::setw(20) << r.name << " max_rel_error " << std::scientific << std::setprecision(3)
        << r.max_rel_error << " threshold " << r.threshold << (r.passed() ? "  ok" : "  FAIL") << std::defaultfloat
        << "\n";
    if (!r.passed()) failing.push_back(r.name);
  }
  if (failing.empty()) return 0;
  err << "gradcheck failed for:";
  for (const auto& n : failing) err << " " << n;
  err << "\n";
  return 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"paka: dense kernel-alignment post-training lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenDataFlags gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic segmentation dataset");
  add_common(gen_cmd, gen.common);
  add(gen_cmd, gen.out, "--out", "dataset directory");
  add(gen_cmd, gen.count, "--count", "number of samples");
  add(gen_cmd, gen.size, "--size", "image side in pixels");
  add(gen_cmd, gen.classes, "--classes", "class count including background");
  add(gen_cmd, gen.min_shapes, "--min-shapes", "fewest shapes per image");
  add(gen_cmd, gen.max_shapes, "--max-shapes", "most shapes per image");

  TrainFlags train;
  CLI::App* train_cmd = app.add_subcommand("train", "post-train the encoder with a kernel alignment loss");
  add_common(train_cmd, train.common);
  add(train_cmd, train.data, "--data", "dataset directory");
  add(train_cmd, train.out_dir, "--out", "output directory for checkpoint.paka and steps.csv");
  add(train_cmd, train.loss, "--loss", "paka, gram, hsic or mmd");
  train.loss.option->check(CLI::IsMember({"paka", "gram", "hsic", "mmd"}));
  add(train_cmd, train.feature_source, "--feature-source", "head or backbone");
  train.feature_source.option->check(CLI::IsMember({"head", "backbone"}));
  add(train_cmd, train.min_overlap, "--min-overlap", "minimum local/global overlap ratio");
  add(train_cmd, train.teacher_aug, "--teacher-aug", "teacher augmentation strength in [0,1]");
  add(train_cmd, train.student_aug, "--student-aug", "student augmentation strength in [0,1]");
  add(train_cmd, train.lr, "--lr", "AdamW learning rate");
  add(train_cmd, train.weight_decay, "--weight-decay", "AdamW decoupled weight decay");
  add(train_cmd, train.steps, "--steps", "optimizer steps");
  add(train_cmd, train.batch_size, "--batch-size", "images per step");
  add(train_cmd, train.n_local, "--n-local", "local crops per image");
  train_cmd->add_flag("--wall-time", train.wall_time, "record wall-clock ms per step (breaks bit-identical logs)");
  train_cmd->add_option("--log-every", train.log_every, "progress line interval; 0 disables")->capture_default_str();

  EvalFlags ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate frozen encoder features");
  eval_cmd->require_subcommand(1);
  add_common(eval_cmd, ev.common);
  add(eval_cmd, ev.data, "--data", "dataset directory");
  add(eval_cmd, ev.checkpoint, "--checkpoint", "checkpoint file");
  add(eval_cmd, ev.out, "--out", "metrics.json path");
  add(eval_cmd, ev.network, "--network", "teacher or student");
  add(eval_cmd, ev.eval_fraction, "--eval-fraction", "trailing share of the dataset used for evaluation");
  eval_cmd->fallthrough();
  CLI::App* oc_cmd = eval_cmd->add_subcommand("overcluster", "k-means overclustering mIoU");
  add(oc_cmd, ev.clusters, "--k", "cluster count K");
  add(oc_cmd, ev.seeds, "--seeds", "k-means restarts averaged");
  CLI::App* nn_cmd = eval_cmd->add_subcommand("nn", "patch nearest-neighbour retrieval");
  add(nn_cmd, ev.nn_k, "--k", "neighbours per query");
  add(nn_cmd, ev.fractions, "--fractions", "bank subsampling ratios 1/f");
  ev.fractions.option->delimiter(',');
  add(nn_cmd, ev.bank_split, "--bank-split", "train or eval");
  nn_cmd->add_flag("--include-self", ev.include_self, "keep a query's own patch in the bank");
  CLI::App* lin_cmd = eval_cmd->add_subcommand("linear", "linear probe");
  add(lin_cmd, ev.epochs, "--epochs", "training epochs");
  add(lin_cmd, ev.lr, "--lr", "SGD learning rate");
  for (CLI::App* sub : {oc_cmd, nn_cmd, lin_cmd}) sub->fallthrough();

  CompareFlags cmp;
  CLI::App* cmp_cmd = app.add_subcommand("compare-losses", "coefficient of variation of two loss logs");
  cmp_cmd->add_option("--a", cmp.a, "first steps.csv")->required();
  cmp_cmd->add_option("--b", cmp.b, "second steps.csv")->required();
  cmp_cmd->add_option("--label-a", cmp.label_a, "name of the first run")->capture_default_str();
  cmp_cmd->add_option("--label-b", cmp.label_b, "name of the second run")->capture_default_str();
  cmp_cmd->add_option("--window", cmp.window, "trailing steps compared; 0 means the whole log")->capture_default_str();
  cmp_cmd->add_option("--out", cmp.out, "stability.json path")->capture_default_str();

  GradcheckFlags gc;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
  gc_cmd->add_option("--seed", gc.seed, "instance seed")->capture_default_str();
  gc_cmd->add_option("--loss", gc.losses, "loss kinds to check (default all)")
      ->check(CLI::IsMember({"all", "paka", "gram", "hsic", "mmd"}));
  gc_cmd->add_option("--instances", gc.instances, "random instances per check")->capture_default_str();
  gc_cmd->add_flag("--skip-end-to-end", gc.skip_end_to_end, "only check kernel losses and the encoder");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, out);
    if (train_cmd->parsed()) return cmd_train(train, out, err);
    if (eval_cmd->parsed()) {
      const std::string protocol = oc_cmd->parsed() ? "overcluster" : nn_cmd->parsed() ? "nn" : "linear";
      return cmd_eval(protocol, ev, out);
    }
    if (cmp_cmd->parsed()) return cmd_compare(cmp, out);
    if (gc_cmd->parsed()) return cmd_gradcheck(gc, out, err);
  } catch (const Error& e) {
    err << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace paka
