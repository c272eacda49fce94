/*
Copyright 2026 The LB-CNN Authors. All rights reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/

// lbcnn: search, refine, quantize, eval, predict and inspect LB-CNN models.
// Every command prints one JSON report on stdout. Failures print
// {"error": {...}} and exit with 2 (usage), 3 (data) or 4 (numerical).

#include <chrono>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lbcnn/architecture.hpp"
#include "lbcnn/data_io.hpp"
#include "lbcnn/elm.hpp"
#include "lbcnn/model_store.hpp"
#include "lbcnn/quantize.hpp"
#include "lbcnn/refine.hpp"
#include "lbcnn/search.hpp"

namespace {

using lbcnn::Dataset;
using lbcnn::Error;
using lbcnn::ErrorKind;
using nlohmann::json;

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kNumerical:
    case ErrorKind::kSearch:
      return kExitNumerical;
    case ErrorKind::kArchitecture:
      return kExitUsage;
    default:
      return kExitData;
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Data selection shared by the commands that read datasets.
struct DataArgs {
  std::string format = "idx";
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::optional<double> split;
  std::optional<std::uint64_t> split_seed;

  void add_to(CLI::App* cmd, bool with_split = true) {
    cmd->add_option("--data-format", format, "Dataset format")
        ->check(CLI::IsMember({"idx", "pnm"}))
        ->capture_default_str();
    cmd->add_option("--train", train,
                    "Training data: IDX images and labels paths, or a netpbm class directory")
        ->expected(1, 2);
    cmd->add_option("--test", test, "Test data, same form as --train")->expected(1, 2);
    if (with_split) {
      cmd->add_option("--split", split,
                      "Stratified train fraction applied to --train instead of --test")
          ->check(CLI::Range(0.0, 1.0));
      cmd->add_option("--split-seed", split_seed, "Seed of the stratified split (default --seed)");
    }
  }
};

Dataset load_dataset(const std::string& format, const std::vector<std::string>& paths,
                     const char* flag) {
  if (format == "idx") {
    if (paths.size() != 2)
      throw UsageError(std::string(flag) + " with --data-format idx needs IMAGES LABELS");
    return lbcnn::load_idx(paths[0], paths[1]);
  }
  if (paths.size() != 1)
    throw UsageError(std::string(flag) + " with --data-format pnm needs one directory");
  return lbcnn::load_pnm_dir(paths[0]);
}

// Shared label space: IDX sets take the larger class count, netpbm sets must
// agree on their class directories.
void harmonize(Dataset& a, Dataset& b) {
  if (!a.class_names.empty() || !b.class_names.empty()) {
    if (a.class_names != b.class_names)
      throw Error(ErrorKind::kFormat, "train and test class directories differ");
    return;
  }
  const int k = std::max(a.n_classes, b.n_classes);
  a.n_classes = b.n_classes = k;
}

struct LoadedData {
  std::optional<Dataset> train;
  std::optional<Dataset> test;
};

LoadedData resolve_data(const DataArgs& d, bool need_train, bool need_test,
                        std::uint64_t default_seed) {
  LoadedData out;
  if (d.split) {
    if (d.train.empty()) throw UsageError("--split needs --train");
    if (!d.test.empty()) throw UsageError("--split and --test are mutually exclusive");
    const Dataset full = load_dataset(d.format, d.train, "--train");
    full.validate();
    auto [tr, te] = lbcnn::split_stratified(full, *d.split, d.split_seed.value_or(default_seed));
    out.train = std::move(tr);
    out.test = std::move(te);
  } else {
    if (need_train && d.train.empty()) throw UsageError("--train is required");
    if (need_test && d.test.empty()) throw UsageError("--test (or --split) is required");
    if (!d.train.empty()) out.train = load_dataset(d.format, d.train, "--train");
    if (!d.test.empty()) out.test = load_dataset(d.format, d.test, "--test");
    if (out.train && out.test) harmonize(*out.train, *out.test);
  }
  for (auto* ds : {&out.train, &out.test})
    if (*ds) {
      (*ds)->validate();
      **ds = lbcnn::normalize(std::move(**ds));
    }
  return out;
}

json dataset_summary(const std::optional<Dataset>& ds) {
  if (!ds) return nullptr;
  const auto& s = ds->images.shape();
  return {{"n", s.n}, {"shape", {s.h, s.w, s.c}}, {"n_classes", ds->n_classes}};
}

// Report skeleton with every key present.
json base_report(const std::string& command) {
  return {{"command", command},
          {"config", json::object()},
          {"dataset", {{"train", nullptr}, {"test", nullptr}}},
          {"architecture", nullptr},
          {"n_features", nullptr},
          {"expansion_factor", nullptr},
          {"param_bits", nullptr},
          {"timings", {{"expand_s", nullptr}, {"solve_s", nullptr}, {"refine_s", nullptr}}},
          {"accuracies",
           {{"elm_test", nullptr}, {"refined_test", nullptr}, {"quantized_test", nullptr}}},
          {"search", nullptr},
          {"seeds",
           {{"master_seed", nullptr},
            {"best_trial_seed", nullptr},
            {"split_seed", nullptr},
            {"shuffle_seed", nullptr}}},
          {"model", nullptr}};
}

void describe_architecture(json& r, const lbcnn::Architecture& a) {
  r["architecture"] = lbcnn::architecture_to_json(a);
  r["n_features"] = a.n_features();
  r["expansion_factor"] = a.expansion_factor();
  const auto bits = lbcnn::param_bits(a);
  r["param_bits"] = {{"conv_bits", bits.conv_bits}, {"elm_bits", bits.elm_bits}};
}

void describe_data(json& r, const LoadedData& d, const DataArgs& args,
                   std::uint64_t default_seed) {
  r["dataset"] = {{"train", dataset_summary(d.train)}, {"test", dataset_summary(d.test)}};
  if (args.split) r["seeds"]["split_seed"] = args.split_seed.value_or(default_seed);
}

void describe_model(json& r, const lbcnn::Model& m, const std::string& path) {
  describe_architecture(r, m.arch);
  r["model"] = {{"path", path},
                {"quantized", m.quantized()},
                {"bits", m.quantized() ? json(std::get<lbcnn::QuantizedWeights>(m.output).bits)
                                       : json(nullptr)}};
  if (m.provenance.master_seed) r["seeds"]["master_seed"] = *m.provenance.master_seed;
  if (m.provenance.best_trial_seed)
    r["seeds"]["best_trial_seed"] = *m.provenance.best_trial_seed;
}

std::vector<int> parse_filters(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--filters must be a comma-separated list of integers");
    }
  }
  if (out.empty()) throw UsageError("--filters is empty");
  return out;
}

lbcnn::Architecture architecture_for(const Dataset& train, const std::vector<int>& filters) {
  const auto& s = train.images.shape();
  lbcnn::Architecture a;
  a.height = s.h;
  a.width = s.w;
  a.channels = s.c;
  a.multipliers = filters;
  a.n_classes = train.n_classes;
  a.validate();
  return a;
}

double accuracy_on(const lbcnn::Model& m, const Dataset& ds, unsigned workers) {
  return lbcnn::accuracy(lbcnn::model_predict(m, ds, workers), ds.labels);
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

// ---------------------------------------------------------------- commands

struct SearchArgs {
  DataArgs data;
  std::string filters;
  int trials = 1;
  std::uint64_t seed = 0;
  double reg = 1.0;
  std::optional<std::size_t> max_train;
  unsigned workers = 1;
  unsigned parallel_trials = 1;
  std::string out;
};

int cmd_search(const SearchArgs& a) {
  const LoadedData d = resolve_data(a.data, true, true, a.seed);
  json r = base_report("search");
  r["config"] = {{"filters", a.filters},     {"trials", a.trials},
                 {"seed", a.seed},           {"reg", a.reg},
                 {"max_train", a.max_train ? json(*a.max_train) : json(nullptr)},
                 {"workers", a.workers},     {"parallel_trials", a.parallel_trials},
                 {"data_format", a.data.format},
                 {"split", a.data.split ? json(*a.data.split) : json(nullptr)},
                 {"out", a.out}};
  describe_data(r, d, a.data, a.seed);

  lbcnn::SearchConfig cfg;
  cfg.trials = a.trials;
  cfg.master_seed = a.seed;
  cfg.arch = architecture_for(*d.train, parse_filters(a.filters));
  cfg.solver.C = a.reg;
  cfg.solver.workers = a.workers;
  cfg.train = &*d.train;
  cfg.test = &*d.test;
  cfg.max_train_samples = a.max_train;
  cfg.parallel_trials = a.parallel_trials;
  describe_architecture(r, cfg.arch);

  const auto res = lbcnn::random_search(cfg);
  const auto& rep = res.report;
  const auto& best = rep.trials[static_cast<std::size_t>(rep.best_trial)];

  json trace = json::array();
  for (const auto& t : rep.trials)
    trace.push_back({{"index", t.index},
                     {"seed", t.seed},
                     {"ok", t.ok},
                     {"accuracy", t.ok ? json(t.accuracy) : json(nullptr)},
                     {"error", t.ok ? json(nullptr) : json(t.error)},
                     {"timings",
                      {{"expand_s", t.timings.expand_s},
                       {"solve_s", t.timings.solve_s},
                       {"total_s", t.timings.total_s}}}});
  r["search"] = {{"best_trial", rep.best_trial},
                 {"best_accuracy", rep.best_accuracy},
                 {"worst_accuracy", rep.worst_accuracy},
                 {"mean_accuracy", rep.mean_accuracy},
                 {"failed_trials", rep.failed_trials},
                 {"solve_branch", lbcnn::to_string(res.solve.branch)},
                 {"jitter", res.solve.jitter},
                 {"trace", trace}};
  r["timings"]["expand_s"] = best.timings.expand_s;
  r["timings"]["solve_s"] = best.timings.solve_s;
  r["accuracies"]["elm_test"] = rep.best_accuracy;
  r["seeds"]["master_seed"] = a.seed;
  r["seeds"]["best_trial_seed"] = best.seed;

  lbcnn::Model m;
  m.arch = cfg.arch;
  m.kernels = res.kernels;
  m.output = res.weights;
  m.class_names = d.train->class_names;
  m.provenance.master_seed = a.seed;
  m.provenance.best_trial_seed = best.seed;
  m.provenance.accuracy = rep.best_accuracy;
  if (!a.out.empty()) {
    lbcnn::save_model(m, a.out);
    r["model"] = {{"path", a.out}, {"quantized", false}, {"bits", nullptr}};
  }
  print(r);
  return 0;
}

struct RefineArgs {
  DataArgs data;
  std::string model;
  std::string out;
  int epochs = 10;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  std::uint64_t shuffle_seed = 0;
  std::size_t memory_budget_mb = 2048;
  unsigned workers = 1;
};

int cmd_refine(const RefineArgs& a) {
  lbcnn::Model m = lbcnn::load_model(a.model);
  const LoadedData d = resolve_data(a.data, true, false, a.shuffle_seed);
  json r = base_report("refine");
  r["config"] = {{"model", a.model},           {"out", a.out},
                 {"epochs", a.epochs},         {"batch_size", a.batch_size},
                 {"learning_rate", a.lr},      {"shuffle_seed", a.shuffle_seed},
                 {"memory_budget_mb", a.memory_budget_mb},
                 {"workers", a.workers},       {"data_format", a.data.format}};
  describe_data(r, d, a.data, a.shuffle_seed);
  describe_model(r, m, a.out);
  r["seeds"]["shuffle_seed"] = a.shuffle_seed;

  const std::optional<int> requantize_bits =
      m.quantized() ? std::optional<int>(std::get<lbcnn::QuantizedWeights>(m.output).bits)
                    : std::nullopt;
  if (d.test) r["accuracies"]["elm_test"] = accuracy_on(m, *d.test, a.workers);

  lbcnn::RefineConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = std::min(a.batch_size, d.train->size());
  cfg.learning_rate = a.lr;
  cfg.shuffle_seed = a.shuffle_seed;
  cfg.workers = a.workers;
  cfg.memory_budget_bytes = a.memory_budget_mb << 20;
  lbcnn::RefineStats stats;
  const auto w =
      lbcnn::refine_output(m.arch, m.kernels, m.float_weights(), *d.train, cfg, &stats);
  r["timings"]["expand_s"] = stats.expand_s;
  r["timings"]["refine_s"] = stats.train_s;
  r["refine"] = {{"epoch_loss", stats.epoch_loss}, {"spilled", stats.spilled}};

  m.output = w;
  if (d.test) r["accuracies"]["refined_test"] = accuracy_on(m, *d.test, a.workers);
  if (requantize_bits) {
    m.output = lbcnn::quantize(w, *requantize_bits);
    if (d.test) r["accuracies"]["quantized_test"] = accuracy_on(m, *d.test, a.workers);
  }
  m.provenance.accuracy = std::nullopt;
  lbcnn::save_model(m, a.out);
  describe_model(r, m, a.out);
  print(r);
  return 0;
}

struct QuantizeArgs {
  DataArgs data;
  std::string model;
  std::string out;
  int bits = 8;
  unsigned workers = 1;
};

int cmd_quantize(const QuantizeArgs& a) {
  lbcnn::Model m = lbcnn::load_model(a.model);
  const LoadedData d = resolve_data(a.data, false, false, 0);
  json r = base_report("quantize");
  r["config"] = {{"model", a.model}, {"out", a.out}, {"bits", a.bits}, {"workers", a.workers}};
  describe_data(r, d, a.data, 0);
  if (d.test) r["accuracies"]["elm_test"] = accuracy_on(m, *d.test, a.workers);
  const auto q = lbcnn::quantize(m.float_weights(), a.bits);
  m.output = q;
  if (d.test) r["accuracies"]["quantized_test"] = accuracy_on(m, *d.test, a.workers);
  lbcnn::save_model(m, a.out);
  describe_model(r, m, a.out);
  r["quantization"] = {{"bits", q.bits}, {"scale", q.scale}};
  print(r);
  return 0;
}

struct EvalArgs {
  DataArgs data;
  std::string model;
  unsigned workers = 1;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  const lbcnn::Model m = lbcnn::load_model(a.model);
  const LoadedData d = resolve_data(a.data, false, true, a.seed);
  json r = base_report("eval");
  r["config"] = {{"model", a.model}, {"workers", a.workers}, {"data_format", a.data.format}};
  describe_data(r, d, a.data, a.seed);
  describe_model(r, m, a.model);
  const Dataset& test = *d.test;
  if (test.n_classes > m.arch.n_classes)
    throw Error(ErrorKind::kShape, "test labels exceed the model's class count");
  const auto t0 = std::chrono::steady_clock::now();
  const auto pred = lbcnn::model_predict(m, test, a.workers);
  r["timings"]["expand_s"] = seconds_since(t0);
  const double acc = lbcnn::accuracy(pred, test.labels);
  r["accuracies"][m.quantized() ? "quantized_test" : "elm_test"] = acc;
  const auto k = static_cast<std::size_t>(m.arch.n_classes);
  std::vector<std::vector<std::size_t>> confusion(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < pred.size(); ++i)
    ++confusion[static_cast<std::size_t>(test.labels[i])][static_cast<std::size_t>(pred[i])];
  r["eval"] = {{"accuracy", acc}, {"n", pred.size()}, {"confusion_matrix", confusion}};
  print(r);
  return 0;
}

struct PredictArgs {
  std::string model;
  std::vector<std::string> images;
  unsigned workers = 1;
};

int cmd_predict(const PredictArgs& a) {
  const lbcnn::Model m = lbcnn::load_model(a.model);
  json r = base_report("predict");
  r["config"] = {{"model", a.model}, {"images", a.images}, {"workers", a.workers}};
  describe_model(r, m, a.model);
  json preds = json::array();
  for (const auto& path : a.images) {
    Dataset ds;
    ds.images = lbcnn::pnm_to_tensor(lbcnn::read_pnm(path));
    ds.labels = {0};
    ds.n_classes = 1;
    ds = lbcnn::normalize(std::move(ds));
    const int k = lbcnn::model_predict(m, ds, a.workers).front();
    preds.push_back({{"image", path},
                     {"class", k},
                     {"class_name", m.class_names.empty()
                                        ? json(nullptr)
                                        : json(m.class_names[static_cast<std::size_t>(k)])}});
  }
  r["predictions"] = preds;
  print(r);
  return 0;
}

int cmd_inspect(const std::string& path) {
  json r = base_report("inspect");
  r["config"] = {{"model", path}};
  const json info = lbcnn::inspect_model(path);
  const auto arch = lbcnn::architecture_from_json(info.at("header").at("architecture"));
  describe_architecture(r, arch);
  const json& prov = info.at("header").at("provenance");
  r["seeds"]["master_seed"] = prov.at("master_seed");
  r["seeds"]["best_trial_seed"] = prov.at("best_trial_seed");
  r["accuracies"]["elm_test"] = prov.at("accuracy");
  r["model"] = {{"path", path},
                {"quantized", !info.at("quantization").is_null()},
                {"bits", info.at("quantization").is_null() ? json(nullptr)
                                                           : info.at("quantization").at("bits")}};
  r["inspect"] = info;
  print(r);
  return 0;
}

void emit_error(const std::string& kind, const std::string& message, int code) {
  print({{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LB-CNN: light binary CNN with closed-form output layer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  SearchArgs sa;
  auto* search = app.add_subcommand("search", "Random search over binary kernels");
  sa.data.add_to(search);
  search->add_option("--filters", sa.filters, "Depth multipliers per layer, e.g. 16,20")
      ->required();
  search->add_option("--trials", sa.trials, "Number of kernel draws")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  search->add_option("--seed", sa.seed, "Master seed")->capture_default_str();
  search->add_option("--reg", sa.reg, "Ridge regularization C")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  search->add_option("--max-train", sa.max_train, "Use only the first M training samples")
      ->check(CLI::PositiveNumber);
  search->add_option("--workers", sa.workers, "Worker threads")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  search->add_option("--parallel-trials", sa.parallel_trials, "Trials evaluated concurrently")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  search->add_option("--out", sa.out, "Model file for the best trial");

  RefineArgs ra;
  auto* refine = app.add_subcommand("refine", "Retrain the output layer by gradient descent");
  refine->add_option("--model", ra.model, "Input model")->required();
  ra.data.add_to(refine);
  refine->add_option("--out", ra.out, "Output model")->required();
  refine->add_option("--epochs", ra.epochs)->check(CLI::NonNegativeNumber)->capture_default_str();
  refine->add_option("--batch-size", ra.batch_size)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  refine->add_option("--lr", ra.lr)->check(CLI::PositiveNumber)->capture_default_str();
  refine->add_option("--shuffle-seed", ra.shuffle_seed)->capture_default_str();
  refine->add_option("--memory-budget-mb", ra.memory_budget_mb,
                     "Feature memory above which features are spilled to disk")
      ->capture_default_str();
  refine->add_option("--workers", ra.workers)->check(CLI::PositiveNumber)->capture_default_str();

  QuantizeArgs qa;
  auto* quant = app.add_subcommand("quantize", "Fixed-point output weights");
  quant->add_option("--model", qa.model, "Input model")->required();
  quant->add_option("--out", qa.out, "Output model")->required();
  quant->add_option("--bits", qa.bits)->check(CLI::Range(2, 8))->capture_default_str();
  qa.data.add_to(quant);
  quant->add_option("--workers", qa.workers)->check(CLI::PositiveNumber)->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Accuracy and confusion matrix on a test set");
  eval->add_option("--model", ea.model, "Model file")->required();
  ea.data.add_to(eval);
  eval->add_option("--seed", ea.seed, "Default split seed")->capture_default_str();
  eval->add_option("--workers", ea.workers)->check(CLI::PositiveNumber)->capture_default_str();

  PredictArgs pa;
  auto* pred = app.add_subcommand("predict", "Classify PGM/PPM images");
  pred->add_option("--model", pa.model, "Model file")->required();
  pred->add_option("--image,images", pa.images, "Image files")->required();
  pred->add_option("--workers", pa.workers)->check(CLI::PositiveNumber)->capture_default_str();

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Show a model header and sizes");
  inspect->add_option("--model,model", inspect_path, "Model file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    if (*search) return cmd_search(sa);
    if (*refine) return cmd_refine(ra);
    if (*quant) return cmd_quantize(qa);
    if (*eval) return cmd_eval(ea);
    if (*pred) return cmd_predict(pa);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const UsageError& e) {
    emit_error("usage", e.what(), kExitUsage);
    return kExitUsage;
  } catch (const lbcnn::RefineError& e) {
    emit_error(lbcnn::to_string(e.kind()), e.what(), kExitNumerical);
    return kExitNumerical;
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    emit_error(lbcnn::to_string(e.kind()), e.what(), code);
    return code;
  } catch (const std::bad_alloc&) {
    emit_error("numerical", "out of memory", kExitNumerical);
    return kExitNumerical;
  } catch (const std::exception& e) {
    emit_error("data", e.what(), kExitData);
    return kExitData;
  }
  return kExitUsage;
}
