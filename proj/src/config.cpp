#include "paka/config.hpp"

#include <fstream>
#include <set>

#include "paka/error.hpp"

namespace paka {
namespace {

using nlohmann::json;

// Reads optional keys from one JSON object and rejects any key it was not asked about.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    require(j.is_object(), ErrorCode::kInvalidArgument, "config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::kInvalidArgument, "config key '" + name_ + "." + key + "': " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(ErrorCode::kInvalidArgument, "unknown config key '" + name_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

json scale_json(ScaleRange s) { return json::array({s.lo, s.hi}); }

ScaleRange scale_from(const json& j, const std::string& where) {
  require(j.is_array() && j.size() == 2 && j[0].is_number() && j[1].is_number(), ErrorCode::kInvalidArgument,
          where + " must be a [lo, hi] pair");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

std::filesystem::path OutputPaths::resolve(const std::string& file) const {
  const std::filesystem::path p(file);
  return p.is_absolute() ? p : std::filesystem::path(dir) / p;
}

void ExperimentConfig::propagate_seed() {
  scene.seed = seed;
  train.seed = seed;
}

json to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  json train = {
      {"loss", to_string(t.loss_kind)},
      {"n_global", t.n_global},
      {"n_local", t.n_local},
      {"min_overlap", t.min_overlap},
      {"teacher_aug", t.teacher_aug_strength},
      {"student_aug", t.student_aug_strength},
      {"target_h", t.target_h},
      {"target_w", t.target_w},
      {"learning_rate", t.learning_rate},
      {"weight_decay", t.weight_decay},
      {"beta1", t.beta1},
      {"beta2", t.beta2},
      {"epsilon", t.epsilon},
      {"steps", t.steps},
      {"batch_size", t.batch_size},
      {"feature_source", to_string(t.feature_source)},
      {"global_res", t.global_res},
      {"local_res", t.local_res},
      {"global_scale", scale_json(t.global_scale)},
      {"local_scale", scale_json(t.local_scale)},
      {"max_tries", t.max_tries},
      {"ema_m0", t.ema_m0},
      {"mmd_bandwidth", t.mmd_bandwidth ? json(*t.mmd_bandwidth) : json(nullptr)},
      {"encoder",
       {{"channels", t.shape.channels},
        {"patch_size", t.shape.patch_size},
        {"dim", t.shape.dim},
        {"blocks", t.shape.blocks},
        {"head_hidden", t.shape.head_hidden},
        {"head_out", t.shape.head_out}}},
      {"augment",
       {{"jitter", t.augment.jitter},
        {"blur_sigma", t.augment.blur_sigma},
        {"blur_prob", t.augment.blur_prob},
        {"noise_std", t.augment.noise_std}}},
  };
  const SceneSpec& s = c.scene;
  json data = {{"count", c.data_count},
               {"size", s.size},
               {"classes", s.classes},
               {"min_shapes", s.min_shapes},
               {"max_shapes", s.max_shapes},
               {"patch_size", s.patch_size},
               {"color_jitter", s.color_jitter},
               {"background_texture", s.background_texture}};
  const EvalConfig& e = c.eval;
  json eval = {{"network", e.network == Network::kTeacher ? "teacher" : "student"},
               {"eval_fraction", e.eval_fraction},
               {"clusters", e.clusters},
               {"seeds", e.seeds},
               {"kmeans_iters", e.kmeans_iters},
               {"nn_k", e.nn_k},
               {"fractions", e.fractions},
               {"bank_split", e.bank_split},
               {"exclude_self", e.exclude_self},
               {"linear_epochs", e.linear_epochs},
               {"linear_lr", e.linear_lr},
               {"linear_momentum", e.linear_momentum},
               {"linear_weight_decay", e.linear_weight_decay},
               {"linear_batch", e.linear_batch}};
  json output = {{"dir", c.output.dir},
                 {"checkpoint", c.output.checkpoint},
                 {"steps_csv", c.output.steps_csv},
                 {"metrics_json", c.output.metrics_json},
                 {"stability_json", c.output.stability_json}};
  return {{"seed", c.seed}, {"dataset_dir", c.dataset_dir}, {"data", data},
          {"train", train}, {"eval", eval},                 {"output", output}};
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "root");
  root.get("seed", c.seed);
  root.get("dataset_dir", c.dataset_dir);

  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    s.get("count", c.data_count);
    s.get("size", c.scene.size);
    s.get("classes", c.scene.classes);
    s.get("min_shapes", c.scene.min_shapes);
    s.get("max_shapes", c.scene.max_shapes);
    s.get("patch_size", c.scene.patch_size);
    s.get("color_jitter", c.scene.color_jitter);
    s.get("background_texture", c.scene.background_texture);
    s.finish();
  }

  if (const json* tj = root.child("train")) {
    TrainConfig& t = c.train;
    Section s(*tj, "train");
    std::string loss = to_string(t.loss_kind);
    s.get("loss", loss);
    t.loss_kind = loss_kind_from_string(loss);
    s.get("n_global", t.n_global);
    s.get("n_local", t.n_local);
    s.get("min_overlap", t.min_overlap);
    s.get("teacher_aug", t.teacher_aug_strength);
    s.get("student_aug", t.student_aug_strength);
    s.get("target_h", t.target_h);
    s.get("target_w", t.target_w);
    s.get("learning_rate", t.learning_rate);
    s.get("weight_decay", t.weight_decay);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("epsilon", t.epsilon);
    s.get("steps", t.steps);
    s.get("batch_size", t.batch_size);
    std::string source = to_string(t.feature_source);
    s.get("feature_source", source);
    t.feature_source = feature_source_from_string(source);
    s.get("global_res", t.global_res);
    s.get("local_res", t.local_res);
    if (const json* g = s.child("global_scale")) t.global_scale = scale_from(*g, "train.global_scale");
    if (const json* l = s.child("local_scale")) t.local_scale = scale_from(*l, "train.local_scale");
    s.get("max_tries", t.max_tries);
    s.get("ema_m0", t.ema_m0);
    if (const json* bw = s.child("mmd_bandwidth")) {
      if (bw->is_null()) t.mmd_bandwidth.reset();
      else {
        require(bw->is_number(), ErrorCode::kInvalidArgument, "train.mmd_bandwidth must be a number or null");
        t.mmd_bandwidth = bw->get<double>();
      }
    }
    if (const json* ej = s.child("encoder")) {
      Section es(*ej, "train.encoder");
      es.get("channels", t.shape.channels);
      es.get("patch_size", t.shape.patch_size);
      es.get("dim", t.shape.dim);
      es.get("blocks", t.shape.blocks);
      es.get("head_hidden", t.shape.head_hidden);
      es.get("head_out", t.shape.head_out);
      es.finish();
    }
    if (const json* aj = s.child("augment")) {
      Section as(*aj, "train.augment");
      as.get("jitter", t.augment.jitter);
      as.get("blur_sigma", t.augment.blur_sigma);
      as.get("blur_prob", t.augment.blur_prob);
      as.get("noise_std", t.augment.noise_std);
      as.finish();
    }
    s.finish();
  }

  if (const json* ej = root.child("eval")) {
    EvalConfig& e = c.eval;
    Section s(*ej, "eval");
    std::string network = e.network == Network::kTeacher ? "teacher" : "student";
    s.get("network", network);
    if (network == "teacher") e.network = Network::kTeacher;
    else if (network == "student") e.network = Network::kStudent;
    else fail(ErrorCode::kInvalidArgument, "eval.network must be 'teacher' or 'student'");
    s.get("eval_fraction", e.eval_fraction);
    s.get("clusters", e.clusters);
    s.get("seeds", e.seeds);
    s.get("kmeans_iters", e.kmeans_iters);
    s.get("nn_k", e.nn_k);
    s.get("fractions", e.fractions);
    s.get("bank_split", e.bank_split);
    s.get("exclude_self", e.exclude_self);
    s.get("linear_epochs", e.linear_epochs);
    s.get("linear_lr", e.linear_lr);
    s.get("linear_momentum", e.linear_momentum);
    s.get("linear_weight_decay", e.linear_weight_decay);
    s.get("linear_batch", e.linear_batch);
    s.finish();
    require(e.bank_split == "train" || e.bank_split == "eval", ErrorCode::kInvalidArgument,
            "eval.bank_split must be 'train' or 'eval'");
  }

  if (const json* oj = root.child("output")) {
    Section s(*oj, "output");
    s.get("dir", c.output.dir);
    s.get("checkpoint", c.output.checkpoint);
    s.get("steps_csv", c.output.steps_csv);
    s.get("metrics_json", c.output.metrics_json);
    s.get("stability_json", c.output.stability_json);
    s.finish();
  }
  root.finish();
  c.propagate_seed();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIoError, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidArgument, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIoError, "cannot write config " + path.string());
  os << to_json(config).dump(2) << "\n";
}

}  // namespace paka
