#include "dfcr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dfcr/optim.hpp"

namespace dfcr {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json data{{"manifest", c.data.manifest},
                      {"directory", c.data.directory},
                      {"fractions", c.data.fractions},
                      {"stratified", c.data.stratified},
                      {"split_seed", c.data.split_seed}};
  if (c.data.generator) data["generator"] = to_json(*c.data.generator);
  nlohmann::json train{{"lr", c.train.lr},
                       {"batch_size", c.train.batch_size},
                       {"eval_batch_size", c.train.eval_batch_size},
                       {"epochs", c.train.epochs},
                       {"seeds", c.train.seeds},
                       {"standardize", c.train.standardize}};
  train["early_stop_val_oa"] = c.train.early_stop_val_oa ? nlohmann::json(*c.train.early_stop_val_oa) : nlohmann::json();
  nlohmann::json gc{{"modules", c.gradcheck_modules},
                    {"eps", c.gradcheck.eps},
                    {"tolerance", c.gradcheck.tolerance},
                    {"max_entries", c.gradcheck.max_entries},
                    {"seed", c.gradcheck.seed}};
  return {{"model", c.model}, {"data", data}, {"train", train}, {"gradcheck", gc}, {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "model" && key != "data" && key != "train" && key != "gradcheck" && key != "output_dir") {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  auto known = [](const nlohmann::json& section, const std::string& name, std::initializer_list<const char*> keys) {
    if (!section.is_object()) throw ConfigError("config section '" + name + "' must be an object");
    for (const auto& [key, _] : section.items()) {
      if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
        throw ConfigError("unknown key '" + key + "' in config section '" + name + "'");
      }
    }
  };
  if (j.contains("data")) known(j["data"], "data", {"manifest", "directory", "generator", "fractions", "stratified", "split_seed"});
  if (j.contains("train")) {
    known(j["train"], "train",
          {"optimizer", "lr", "batch_size", "eval_batch_size", "epochs", "seeds", "standardize", "early_stop_val_oa"});
  }
  if (j.contains("gradcheck")) known(j["gradcheck"], "gradcheck", {"modules", "eps", "tolerance", "max_entries", "seed"});
  ExperimentConfig c;
  try {
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.manifest = d.value("manifest", c.data.manifest);
      c.data.directory = d.value("directory", c.data.directory);
      if (d.contains("generator")) c.data.generator = generator_from_json(d.at("generator"));
      if (d.contains("fractions")) c.data.fractions = d.at("fractions").get<std::array<double, 3>>();
      c.data.stratified = d.value("stratified", c.data.stratified);
      c.data.split_seed = d.value("split_seed", c.data.split_seed);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("optimizer") && t.at("optimizer") != "adam") throw ConfigError("only the adam optimizer is available");
      c.train.lr = t.value("lr", c.train.lr);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.eval_batch_size = t.value("eval_batch_size", c.train.eval_batch_size);
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.seeds = t.value("seeds", c.train.seeds);
      c.train.standardize = t.value("standardize", c.train.standardize);
      if (t.contains("early_stop_val_oa") && !t.at("early_stop_val_oa").is_null()) {
        c.train.early_stop_val_oa = t.at("early_stop_val_oa").get<double>();
      }
    }
    if (j.contains("gradcheck")) {
      const auto& g = j.at("gradcheck");
      c.gradcheck_modules = g.value("modules", c.gradcheck_modules);
      c.gradcheck.eps = g.value("eps", c.gradcheck.eps);
      c.gradcheck.tolerance = g.value("tolerance", c.gradcheck.tolerance);
      c.gradcheck.max_entries = g.value("max_entries", c.gradcheck.max_entries);
      c.gradcheck.seed = g.value("seed", c.gradcheck.seed);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.model.validate();
  if (c.train.batch_size == 0 || c.train.eval_batch_size == 0) throw ConfigError("batch sizes must be positive");
  if (!(c.train.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (c.train.seeds.empty()) throw ConfigError("at least one seed is required");
  if (c.model.uses_cdlm() && !(c.model.lambda > 0.0)) {
    throw ConfigError("lambda must be positive for training; lambda = 0 leaves the coefficient solve ill-posed");
  }
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- data

namespace {

InMemoryData gather(const InMemoryData& all, const std::vector<std::size_t>& idx) {
  InMemoryData out;
  if (idx.empty()) return out;
  Shape shape = all.images.shape();
  const std::size_t per = all.images.size() / shape[0];
  shape[0] = idx.size();
  out.images = Tensor(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(all.images.data() + idx[i] * per, per, out.images.data() + i * per);
    out.labels.push_back(all.labels[idx[i]]);
  }
  return out;
}

Datasets load_raw(const ExperimentConfig& cfg) {
  Datasets d;
  if (!cfg.data.manifest.empty()) {
    auto m = load_manifest(cfg.data.manifest);
    const bool unsplit = std::any_of(m.entries.begin(), m.entries.end(), [](const auto& e) { return e.split == Split::Unassigned; });
    if (unsplit) m = split_dataset(m, cfg.data.fractions, cfg.data.split_seed, cfg.data.stratified);
    d.class_names = m.class_names;
    d.train = load_split(m, Split::Train);
    d.val = load_split(m, Split::Val);
    d.test = load_split(m, Split::Test);
    return d;
  }
  const GeneratorParams gen = cfg.data.generator.value_or(GeneratorParams{});
  InMemoryData all = synthetic_batch(gen);
  DatasetManifest m;
  for (std::size_t c = 0; c < gen.counts.size(); ++c) m.class_names.push_back(c < 4 ? kTemplateClasses[c] : "class" + std::to_string(c));
  for (auto l : all.labels) m.entries.push_back({"", l, Split::Unassigned});
  m = split_dataset(m, cfg.data.fractions, cfg.data.split_seed, cfg.data.stratified);
  std::vector<std::size_t> idx[3];
  for (std::size_t i = 0; i < m.entries.size(); ++i) idx[static_cast<int>(m.entries[i].split)].push_back(i);
  d.class_names = m.class_names;
  d.train = gather(all, idx[0]);
  d.val = gather(all, idx[1]);
  d.test = gather(all, idx[2]);
  return d;
}

void apply_stats(Datasets& d, const BandStats& s) {
  for (auto* part : {&d.train, &d.val, &d.test}) {
    if (!part->labels.empty()) standardize(part->images, s);
  }
}

nlohmann::json stats_json(const BandStats& s) { return {{"mean", s.mean}, {"std", s.stddev}}; }

}  // namespace

Datasets load_datasets(const ExperimentConfig& cfg) {
  Datasets d = load_raw(cfg);
  if (d.train.labels.empty()) throw InputError("training split is empty");
  if (d.class_names.size() != cfg.model.num_classes) {
    throw ConfigError("data has " + std::to_string(d.class_names.size()) + " classes but the model is built for " +
                      std::to_string(cfg.model.num_classes));
  }
  const auto& shape = d.train.images.shape();
  cfg.model.backbone.validate_input(shape[1], shape[2]);
  if (shape[3] != cfg.model.backbone.in_channels) {
    throw ConfigError("data has " + std::to_string(shape[3]) + " bands, model expects " +
                      std::to_string(cfg.model.backbone.in_channels));
  }
  if (cfg.train.standardize) {
    d.stats = band_stats(d.train.images);
    apply_stats(d, *d.stats);
  }
  return d;
}

const InMemoryData& pick(const Datasets& d, Split s) {
  switch (s) {
    case Split::Train: return d.train;
    case Split::Val: return d.val;
    case Split::Test: return d.test;
    default: throw ConfigError("no such split");
  }
}

// ---------------------------------------------------------------- training

namespace {

Tensor batch_images(const InMemoryData& data, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  Shape shape = data.images.shape();
  const std::size_t per = data.images.size() / shape[0];
  shape[0] = end - begin;
  Tensor t(shape);
  for (std::size_t i = begin; i < end; ++i) std::copy_n(data.images.data() + order[i] * per, per, t.data() + (i - begin) * per);
  return t;
}

nlohmann::json aggregate_json(const Aggregate& a) {
  nlohmann::json j{{"mean", a.mean}};
  if (a.stddev) j["std"] = *a.stddev;
  return j;
}

}  // namespace

ConfusionMatrix evaluate_model(const DfcrNet& model, const InMemoryData& data, std::size_t batch_size) {
  ConfusionMatrix cm(model.config().num_classes);
  if (data.labels.empty()) return cm;
  ag::NoGradGuard guard;
  std::vector<std::size_t> order(data.labels.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t b = 0; b < order.size(); b += batch_size) {
    const std::size_t e = std::min(order.size(), b + batch_size);
    auto out = model.forward(ag::constant(batch_images(data, order, b, e)));
    std::vector<std::size_t> truth(data.labels.begin() + static_cast<long>(b), data.labels.begin() + static_cast<long>(e));
    cm.accumulate(truth, predict(out.logits.value()));
  }
  return cm;
}

SeedRun train_seed(const ExperimentConfig& cfg, const Datasets& data, std::uint64_t seed, const std::string& run_dir,
                   const RunOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  SeedRun run;
  run.seed = seed;
  DfcrNet model(cfg.model, seed);
  run.parameters = model.parameter_count();
  run.attention_parameters = nn::count_parameters(model.parameters(), "attention");
  AdamOptions ao;
  ao.lr = cfg.train.lr;
  Adam adam(model.parameters(), ao);
  Rng shuffler(seed ^ 0xA5A5A5A5ULL);

  const std::size_t n = data.train.labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  Checkpoint best = make_checkpoint(model, seed, 0);
  double best_oa = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffler.engine());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += cfg.train.batch_size) {
      const std::size_t e = std::min(n, b + cfg.train.batch_size);
      std::vector<std::size_t> labels;
      for (std::size_t i = b; i < e; ++i) labels.push_back(data.train.labels[order[i]]);
      const std::string where = "epoch " + std::to_string(epoch) + ", step " + std::to_string(step);
      adam.zero_grad();
      ModelOutput out;
      try {
        out = model.forward(ag::constant(batch_images(data.train, order, b, e)));
      } catch (const NumericError& err) {
        throw NumericError(where + ": " + err.what());
      }
      auto loss = total_loss(out, labels, cfg.model.alpha);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        const bool dict_bad = out.dictionary_loss.defined() && !std::isfinite(out.dictionary_loss.value()[0]);
        throw NumericError(where + ": non-finite loss in " + (dict_bad ? "CDLM dictionary loss" : "classifier cross-entropy"));
      }
      if (step == 0) run.step0_loss = lv;
      ag::backward(loss);
      adam.step();
      loss_sum += lv;
      ++batches;
      ++step;
    }
    const double val_oa = compute_metrics(evaluate_model(model, data.val.labels.empty() ? data.train : data.val,
                                                         cfg.train.eval_batch_size)).oa;
    run.epochs.push_back({epoch, loss_sum / double(std::max<std::size_t>(batches, 1)), val_oa});
    if (opt.log) {
      *opt.log << "  seed " << seed << " epoch " << epoch << "  loss " << run.epochs.back().train_loss << "  val OA "
               << val_oa << std::endl;
    }
    if (val_oa > best_oa) {
      best_oa = val_oa;
      best = make_checkpoint(model, seed, step);
      run.best_epoch = epoch;
    }
    if (cfg.train.early_stop_val_oa && val_oa >= *cfg.train.early_stop_val_oa) break;
  }

  restore_parameters(best, model);
  if (!data.val.labels.empty()) run.val = compute_metrics(evaluate_model(model, data.val, cfg.train.eval_batch_size));
  if (!data.test.labels.empty()) run.test = compute_metrics(evaluate_model(model, data.test, cfg.train.eval_batch_size));

  if (opt.save_checkpoints) {
    fs::create_directories(run_dir);
    best.metadata["best_epoch"] = run.best_epoch;
    best.metadata["best_val_oa"] = best_oa;
    best.metadata["class_names"] = data.class_names;
    if (data.stats) best.metadata["band_stats"] = stats_json(*data.stats);
    const std::string name = "seed_" + std::to_string(seed) + ".dfcr";
    save_checkpoint((fs::path(run_dir) / name).string(), best);
    run.checkpoint = (fs::path(run_dir).filename() / name).string();
  }
  if (!opt.deterministic) run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

namespace {

const char* kMetricKeys[] = {"oa", "macro_precision", "macro_recall", "macro_f1", "kappa"};

double metric(const MetricsReport& m, const std::string& key) {
  if (key == "oa") return m.oa;
  if (key == "macro_precision") return m.macro_precision;
  if (key == "macro_recall") return m.macro_recall;
  if (key == "macro_f1") return m.macro_f1;
  return m.kappa;
}

std::string percent(const Aggregate& a) {
  char buf[48];
  if (a.stddev) {
    std::snprintf(buf, sizeof buf, "%.2f±%.2f", 100.0 * a.mean, 100.0 * *a.stddev);
  } else {
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * a.mean);
  }
  return buf;
}

// Left-aligned first column, right-aligned rest, widths by UTF-8 code points.
std::string table(const std::vector<std::vector<std::string>>& rows) {
  auto width = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
  };
  std::vector<std::size_t> w;
  for (const auto& r : rows) {
    if (w.size() < r.size()) w.resize(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], width(r[i]));
  }
  std::string out;
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    const auto& r = rows[ri];
    for (std::size_t i = 0; i < r.size(); ++i) {
      const std::string pad(w[i] - width(r[i]), ' ');
      out += i == 0 ? r[i] + pad : "  " + pad + r[i];
    }
    out += '\n';
    if (ri == 0) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < w.size(); ++i) total += w[i] + (i ? 2 : 0);
      out += std::string(total, '-') + '\n';
    }
  }
  return out;
}

void finish_aggregate(RunReport& r) {
  for (const char* key : kMetricKeys) {
    std::vector<double> v;
    for (const auto& run : r.runs) v.push_back(metric(run.test, key));
    r.aggregate[key] = aggregate(v);
  }
  std::vector<double> v;
  for (const auto& run : r.runs) v.push_back(run.val.oa);
  r.aggregate["val_oa"] = aggregate(v);
}

}  // namespace

RunReport train_all(const ExperimentConfig& cfg, const Datasets& data, const std::string& label, const RunOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  RunReport r;
  r.label = label;
  r.config_hash = config_hash(to_json(cfg));
  const std::string dir = (fs::path(cfg.output_dir) / label).string();
  for (auto seed : cfg.train.seeds) r.runs.push_back(train_seed(cfg, data, seed, dir, opt));
  finish_aggregate(r);
  if (!opt.deterministic) r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

nlohmann::json to_json(const SeedRun& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_oa", e.val_oa}});
  nlohmann::json j{{"seed", r.seed},
                   {"step0_loss", r.step0_loss},
                   {"epochs", epochs},
                   {"best_epoch", r.best_epoch},
                   {"val", to_json(r.val)},
                   {"test", to_json(r.test)},
                   {"parameters", r.parameters},
                   {"attention_parameters", r.attention_parameters},
                   {"checkpoint", r.checkpoint}};
  if (r.wall_seconds) j["wall_seconds"] = *r.wall_seconds;
  return j;
}

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& s : r.runs) runs.push_back(to_json(s));
  nlohmann::json agg = nlohmann::json::object();
  for (const auto& [k, a] : r.aggregate) agg[k] = aggregate_json(a);
  nlohmann::json j{{"label", r.label}, {"settings", r.settings}, {"runs", runs}, {"aggregate", agg}, {"config_hash", r.config_hash}};
  if (r.wall_seconds) j["wall_seconds"] = *r.wall_seconds;
  return j;
}

std::vector<AblationToggles> ablation_rows() {
  return {{false, false, false}, {true, false, false}, {false, true, false},
          {false, false, true},  {true, true, false},  {true, true, true}};
}

AblationResult run_ablation(const ExperimentConfig& cfg, const Datasets& data, const RunOptions& opt) {
  AblationResult res;
  for (const auto& t : ablation_rows()) {
    ExperimentConfig c = cfg;
    c.model.toggles = t;
    c.model.attention = AttentionVariant::CdlmLfem;
    const std::string label = std::string("ablate_") + (t.gcam ? "g" : "-") + (t.cdlm_lfem ? "c" : "-") + (t.dfwfm ? "f" : "-");
    if (opt.log) *opt.log << "ablation row " << label << std::endl;
    auto r = train_all(c, data, label, opt);
    r.settings = {{"gcam", t.gcam}, {"cdlm_lfem", t.cdlm_lfem}, {"dfwfm", t.dfwfm}};
    r.config_hash = config_hash(to_json(cfg));
    res.rows.push_back(std::move(r));
  }
  const auto& base = res.rows.front();
  const auto& full = res.rows.back();
  res.seeds = base.runs.size();
  for (std::size_t i = 0; i < res.seeds; ++i) res.full_ge_baseline += full.runs[i].test.oa >= base.runs[i].test.oa;
  return res;
}

ComparisonResult run_attention_comparison(const ExperimentConfig& cfg, const Datasets& data, const RunOptions& opt) {
  ComparisonResult res;
  for (auto v : {AttentionVariant::Se, AttentionVariant::Eca, AttentionVariant::Cbam, AttentionVariant::CdlmLfem}) {
    ExperimentConfig c = cfg;
    c.model.attention = v;
    c.model.toggles = AblationToggles{};
    if (opt.log) *opt.log << "attention variant " << to_string(v) << std::endl;
    const std::size_t rest = DfcrNet(c.model, 0).parameter_count_excluding("attention");
    auto r = train_all(c, data, "attention_" + to_string(v), opt);
    r.settings = {{"attention", to_string(v)}, {"non_attention_parameters", rest}};
    r.config_hash = config_hash(to_json(cfg));
    res.non_attention_parameters.push_back(rest);
    res.rows.push_back(std::move(r));
  }
  for (auto n : res.non_attention_parameters) res.controlled = res.controlled && n == res.non_attention_parameters.front();
  if (!res.controlled) throw Error("attention comparison is not controlled: non-attention parameter counts differ");
  return res;
}

GradcheckSuite run_gradcheck_suite(const ExperimentConfig& cfg) {
  GradcheckSuite s;
  s.passed = true;
  for (const auto& m : cfg.gradcheck_modules) {
    s.modules.push_back(run_module_gradcheck(m, cfg.gradcheck));
    s.passed = s.passed && s.modules.back().passed;
  }
  s.stop_gradient_x = dictionary_loss_x_gradient(cfg.gradcheck.seed);
  GradcheckOptions bad = cfg.gradcheck;
  bad.corrupt_analytic = true;
  s.negative_control_failed = !run_module_gradcheck("gcam", bad).passed;
  s.passed = s.passed && s.stop_gradient_x == 0.0 && s.negative_control_failed;
  return s;
}

nlohmann::json to_json(const AblationResult& r, const std::string& hash) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(to_json(row));
  return {{"command", "ablate"},
          {"rows", rows},
          {"full_ge_baseline_seeds", r.full_ge_baseline},
          {"seeds", r.seeds},
          {"config_hash", hash}};
}

nlohmann::json to_json(const ComparisonResult& r, const std::string& hash) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(to_json(row));
  return {{"command", "compare-attention"},
          {"rows", rows},
          {"non_attention_parameters", r.non_attention_parameters},
          {"controlled", r.controlled},
          {"config_hash", hash}};
}

nlohmann::json to_json(const GradcheckSuite& s, const std::string& hash) {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : s.modules) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : m.tensors) {
      tensors.push_back({{"name", t.name}, {"entries", t.entries}, {"rel_error", t.rel_error}, {"passed", t.passed}});
    }
    mods.push_back({{"module", m.module}, {"max_rel_error", m.max_rel_error}, {"passed", m.passed}, {"tensors", tensors}});
  }
  return {{"command", "gradcheck"},
          {"modules", mods},
          {"stop_gradient_dLc_dx_max", s.stop_gradient_x},
          {"negative_control_detected", s.negative_control_failed},
          {"passed", s.passed},
          {"config_hash", hash}};
}

namespace {

std::vector<std::string> metric_header(std::vector<std::string> lead) {
  for (const char* h : {"OA(%)", "Precision(%)", "Recall(%)", "F1-Macro(%)", "Kappa(%)"}) lead.push_back(h);
  return lead;
}

void append_metrics(std::vector<std::string>& row, const RunReport& r) {
  for (const char* key : kMetricKeys) row.push_back(percent(r.aggregate.at(key)));
}

}  // namespace

std::string render_run(const RunReport& r) {
  std::vector<std::vector<std::string>> rows{{"seed", "best epoch", "val OA(%)", "OA(%)", "Precision(%)", "Recall(%)",
                                              "F1-Macro(%)", "Kappa(%)"}};
  for (const auto& s : r.runs) {
    std::vector<std::string> row{std::to_string(s.seed), std::to_string(s.best_epoch), percent({s.val.oa, {}})};
    for (const char* key : kMetricKeys) row.push_back(percent({metric(s.test, key), {}}));
    rows.push_back(std::move(row));
  }
  std::vector<std::string> agg{"mean", "", percent(r.aggregate.at("val_oa"))};
  append_metrics(agg, r);
  rows.push_back(std::move(agg));
  return r.label + " (config " + r.config_hash + ")\n" + table(rows);
}

std::string render_ablation(const AblationResult& r) {
  std::vector<std::vector<std::string>> rows{metric_header({"GCAM", "CDLM+LFEM", "DFWFM"})};
  for (const auto& row : r.rows) {
    auto mark = [](bool b) { return std::string(b ? "yes" : "-"); };
    std::vector<std::string> cells{mark(row.settings.at("gcam")), mark(row.settings.at("cdlm_lfem")),
                                   mark(row.settings.at("dfwfm"))};
    append_metrics(cells, row);
    rows.push_back(std::move(cells));
  }
  return table(rows) + "full model >= baseline OA in " + std::to_string(r.full_ge_baseline) + " of " +
         std::to_string(r.seeds) + " seeds\n";
}

std::string render_comparison(const ComparisonResult& r) {
  std::vector<std::vector<std::string>> rows{metric_header({"Attention", "attn params", "other params"})};
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    std::vector<std::string> cells{row.settings.at("attention").get<std::string>(),
                                   std::to_string(row.runs.empty() ? 0 : row.runs.front().attention_parameters),
                                   std::to_string(r.non_attention_parameters[i])};
    append_metrics(cells, row);
    rows.push_back(std::move(cells));
  }
  return table(rows);
}

std::string render_gradcheck(const GradcheckSuite& s) {
  std::vector<std::vector<std::string>> rows{{"module", "tensors", "max rel error", "result"}};
  for (const auto& m : s.modules) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", m.max_rel_error);
    rows.push_back({m.module, std::to_string(m.tensors.size()), buf, m.passed ? "pass" : "FAIL"});
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", s.stop_gradient_x);
  rows.push_back({"stop-gradient dLc/dx", "1", buf, s.stop_gradient_x == 0.0 ? "pass" : "FAIL"});
  rows.push_back({"corrupted gradient", "1", "-", s.negative_control_failed ? "detected" : "MISSED"});
  return table(rows) + (s.passed ? "all checks passed\n" : "gradient checks FAILED\n");
}

std::string render_metrics(const MetricsReport& m, const std::vector<std::string>& class_names) {
  std::vector<std::vector<std::string>> rows{{"class", "recall(%)", "precision(%)", "F1(%)"}};
  for (std::size_t k = 0; k < m.per_class_recall.size(); ++k) {
    const bool undefined = std::find(m.undefined_precision.begin(), m.undefined_precision.end(), k) != m.undefined_precision.end();
    rows.push_back({k < class_names.size() ? class_names[k] : std::to_string(k), percent({m.per_class_recall[k], {}}),
                    percent({m.per_class_precision[k], {}}) + (undefined ? "*" : ""), percent({m.per_class_f1[k], {}})});
  }
  std::string s = table(rows);
  s += "OA " + percent({m.oa, {}}) + "  macro P " + percent({m.macro_precision, {}}) + "  macro R " +
       percent({m.macro_recall, {}}) + "  F1-Macro " + percent({m.macro_f1, {}}) + "  Kappa " + percent({m.kappa, {}}) +
       "  (n = " + std::to_string(m.total) + ")\n";
  if (!m.undefined_precision.empty()) s += "* never predicted; precision counted as 0\n";
  return s;
}

// ---------------------------------------------------------------- commands

namespace {

void write_outputs(const std::string& dir, const std::string& name, const nlohmann::json& j, const std::string& text) {
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / (name + ".json")) << j.dump(2) << '\n';
  std::ofstream(fs::path(dir) / (name + ".txt")) << text;
}

int cmd_generate(const ExperimentConfig& cfg, const CommandOptions& opt, std::ostream& out) {
  GeneratorParams gen = cfg.data.generator.value_or(GeneratorParams{});
  if (opt.seed) gen.seed = *opt.seed;
  auto m = generate_synthetic(gen, cfg.data.directory);
  std::vector<std::string> warnings;
  m = split_dataset(m, cfg.data.fractions, cfg.data.split_seed, cfg.data.stratified, &warnings);
  const std::string manifest_path = (fs::path(cfg.data.directory) / "manifest.json").string();
  save_manifest(manifest_path, m);

  const auto train = load_split(m, Split::Train);
  const auto test = load_split(m, Split::Test);
  const double probe = train.labels.empty() || test.labels.empty()
                           ? 0.0
                           : linear_probe_accuracy(train, test, m.class_names.size());
  nlohmann::json j{{"command", "generate-data"},
                   {"manifest", manifest_path},
                   {"tiles", m.entries.size()},
                   {"class_names", m.class_names},
                   {"class_counts", m.class_counts()},
                   {"splits", {{"train", m.count(Split::Train)}, {"val", m.count(Split::Val)}, {"test", m.count(Split::Test)}}},
                   {"generator", m.generator},
                   {"linear_probe_test_oa", probe},
                   {"warnings", warnings},
                   {"config_hash", config_hash(to_json(cfg))}};
  std::vector<std::vector<std::string>> rows{{"class", "tiles"}};
  const auto counts = m.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) rows.push_back({m.class_names[c], std::to_string(counts[c])});
  std::string text = table(rows) + "splits train/val/test: " + std::to_string(m.count(Split::Train)) + "/" +
                     std::to_string(m.count(Split::Val)) + "/" + std::to_string(m.count(Split::Test)) + "\n" +
                     "linear probe on band means, test OA: " + percent({probe, {}}) + "%\n";
  for (const auto& w : warnings) text += "warning: " + w + "\n";
  write_outputs(cfg.output_dir, "generate-data", j, text);
  out << text;
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const CommandOptions& opt, std::ostream& out) {
  if (opt.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint");
  const auto ckpt = load_checkpoint(opt.checkpoint);
  const ModelConfig mc = ckpt.config.get<ModelConfig>();
  DfcrNet model(mc, ckpt.seed);
  restore_parameters(ckpt, model);

  ExperimentConfig raw = cfg;
  raw.model = mc;
  raw.train.standardize = false;
  Datasets data = load_datasets(raw);
  if (ckpt.metadata.contains("band_stats")) {
    BandStats s{ckpt.metadata["band_stats"].at("mean").get<std::vector<double>>(),
                ckpt.metadata["band_stats"].at("std").get<std::vector<double>>()};
    for (auto* part : {&data.train, &data.val, &data.test}) {
      if (!part->labels.empty()) standardize(part->images, s);
    }
  }
  const Split split = parse_split(opt.split);
  const auto& set = pick(data, split);
  if (set.labels.empty()) throw InputError("split '" + opt.split + "' is empty");
  const auto report = compute_metrics(evaluate_model(model, set, cfg.train.eval_batch_size));
  nlohmann::json j = to_json(report);
  j["split"] = opt.split;
  j["checkpoint_seed"] = ckpt.seed;
  j["checkpoint_step"] = ckpt.step;
  j["config_hash"] = config_hash(to_json(cfg));
  const std::string text = "evaluation on " + opt.split + "\n" + render_metrics(report, data.class_names);
  write_outputs(cfg.output_dir, "evaluate", j, text);
  out << text;
  return 0;
}

}  // namespace

int run_command(const std::string& command, const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    ExperimentConfig cfg = load_experiment(opt.config_path);
    if (opt.seed) cfg.train.seeds = {*opt.seed};
    RunOptions ro;
    ro.deterministic = opt.deterministic;
    ro.log = opt.quiet ? nullptr : &err;
    const std::string hash = config_hash(to_json(cfg));

    if (command == "generate-data") return cmd_generate(cfg, opt, out);
    if (command == "evaluate") return cmd_evaluate(cfg, opt, out);
    if (command == "gradcheck") {
      const auto s = run_gradcheck_suite(cfg);
      const auto text = render_gradcheck(s);
      write_outputs(cfg.output_dir, "gradcheck", to_json(s, hash), text);
      out << text;
      return s.passed ? 0 : 1;
    }
    const Datasets data = load_datasets(cfg);
    if (command == "train") {
      auto r = train_all(cfg, data, "train", ro);
      nlohmann::json j = to_json(r);
      j["command"] = "train";
      const auto text = render_run(r);
      write_outputs(cfg.output_dir, "train", j, text);
      out << text;
      return 0;
    }
    if (command == "ablate") {
      const auto r = run_ablation(cfg, data, ro);
      const auto text = render_ablation(r);
      write_outputs(cfg.output_dir, "ablate", to_json(r, hash), text);
      out << text;
      return 0;
    }
    if (command == "compare-attention") {
      const auto r = run_attention_comparison(cfg, data, ro);
      const auto text = render_comparison(r);
      write_outputs(cfg.output_dir, "compare-attention", to_json(r, hash), text);
      out << text;
      return 0;
    }
    err << "unknown command '" << command << "'\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace dfcr
