// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/harness.hpp"

#include <atomic>
#include <chrono>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "dpdiff/errors.hpp"
#include "dpdiff/optim.hpp"

namespace dpdiff {

namespace {

// Independent RNG streams under the run seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kOrderStream = 2;
constexpr std::uint64_t kNoiseStream = 3;
constexpr std::uint64_t kEvalStream = 4;

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

DenoiserConfig denoiser_config(const RunConfig& config, std::size_t dim) {
  DenoiserConfig d;
  d.dim = dim;
  d.depth = config.depth;
  d.heads = config.heads;
  d.ffn_hidden = config.ffn_hidden;
  d.time_freq_dim = config.time_freq_dim;
  return d;
}

std::size_t prototype_ffn(const RunConfig& config, std::size_t dim) {
  return config.prototype_ffn_hidden ? config.prototype_ffn_hidden : 4 * dim;
}

Tensor tokens_of(const FeatureRecord& record, const RunConfig& config) {
  return config.layers.empty() ? aggregate_layers(record) : aggregate_layers(record, config.layers);
}

}  // namespace

// Model ---------------------------------------------------------------------

Model Model::create(const RunConfig& config, std::size_t dim) {
  config.validate();
  if (dim == 0) throw ConfigError("token dimension must be positive");
  Model m;
  m.config_ = config;
  m.dim_ = dim;
  m.schedule_ = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end);
  Rng rng = Rng(config.seed).derive(kInitStream);
  const std::size_t ffn = prototype_ffn(config, dim);
  m.local_ = PrototypeExtractor::create(config.local_prototypes, dim, config.prototype_heads, ffn, rng);
  m.global_ = PrototypeExtractor::create(config.global_prototypes, dim, config.prototype_heads, ffn, rng);
  m.denoiser_ = Denoiser::create(denoiser_config(config, dim), rng);
  return m;
}

std::vector<double> Model::model_record() const {
  const auto d = denoiser_.config();
  return {static_cast<double>(dim_),
          static_cast<double>(config_.local_prototypes),
          static_cast<double>(config_.global_prototypes),
          static_cast<double>(config_.prototype_heads),
          static_cast<double>(prototype_ffn(config_, dim_)),
          static_cast<double>(d.depth),
          static_cast<double>(d.heads),
          static_cast<double>(d.resolved_ffn_hidden()),
          static_cast<double>(d.time_freq_dim),
          static_cast<double>(d.resolved_time_hidden())};
}

Model Model::from_checkpoint(const Checkpoint& checkpoint, const RunConfig& config) {
  const CheckpointEntry* model_entry = checkpoint.find("config.model");
  const CheckpointEntry* schedule_entry = checkpoint.find("config.schedule");
  if (model_entry == nullptr || model_entry->data.empty()) throw LoadError("checkpoint is missing 'config.model'");
  if (schedule_entry == nullptr) throw LoadError("checkpoint is missing 'config.schedule'");
  const auto dim = static_cast<std::size_t>(model_entry->data[0]);
  Model m = create(config, dim);

  const std::vector<double> expected_model = m.model_record();
  if (model_entry->data != expected_model) {
    throw LoadError("parameter 'config.model' does not match the configured architecture");
  }
  const std::vector<double> expected_schedule = {static_cast<double>(config.diffusion_steps), config.beta_start,
                                                 config.beta_end};
  if (schedule_entry->data != expected_schedule) {
    throw LoadError("parameter 'config.schedule' does not match the configured noise schedule");
  }
  Checkpoint params_only;
  for (const auto& e : checkpoint.entries) {
    if (e.name != "config.model" && e.name != "config.schedule") params_only.entries.push_back(e);
  }
  ParameterList params = m.parameters();
  load_parameters(params_only, params);
  return m;
}

Tensor Model::prototypes(const Tensor& x0) const { return concat_rows({local_(x0), global_(x0)}); }

ParameterList Model::parameters() const {
  ParameterList out;
  local_.collect("local", out);
  global_.collect("global", out);
  ParameterList d = denoiser_.parameters("denoiser");
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint c;
  c.entries.push_back({"config.schedule", {3},
                       {static_cast<double>(schedule_.steps), schedule_.beta_start, schedule_.beta_end}});
  std::vector<double> record = model_record();
  c.entries.push_back({"config.model", {record.size()}, record});
  Checkpoint p = snapshot(parameters());
  c.entries.insert(c.entries.end(), p.entries.begin(), p.entries.end());
  return c;
}

// Training ------------------------------------------------------------------

std::string TrainLog::to_csv() const {
  std::string out = "step,l_diff,l_local,l_global,total\n";
  for (const auto& s : steps) {
    out += std::to_string(s.step) + "," + fmt(s.l_diff) + "," + fmt(s.l_local) + "," + fmt(s.l_global) + "," +
           fmt(s.total) + "\n";
  }
  return out;
}

RunData load_run_data(const RunConfig& config) {
  RunData data;
  if (config.uses_feature_files()) {
    data.train = load_feature_file(config.train_features, Split::kTrain);
    data.test = load_feature_file(config.test_features, Split::kTest);
  } else {
    SyntheticData synth = generate_synthetic_dataset(config.synth);
    data.train = std::move(synth.train);
    data.test = std::move(synth.test);
  }
  if (data.train.records.empty()) throw ValidationError("training split has no records");
  data.train.index_categories();
  data.test.index_categories();
  return data;
}

TrainResult train_model(const RunConfig& config, const Dataset& train, const CheckpointCallback& on_interval) {
  config.validate();
  if (train.records.empty()) throw ValidationError("training split has no records");
  for (std::size_t i = 0; i < train.records.size(); ++i) {
    if (train.records[i].label != Label::kNormal) {
      throw ValidationError("training record " + std::to_string(i) + " is labelled anomalous");
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t dim = tokens_of(train.records.front(), config).cols();
  TrainResult result{Model::create(config, dim), TrainLog{}};
  result.log.seed = config.seed;
  const Model& model = result.model;

  Rng root(config.seed);
  Rng order_rng = root.derive(kOrderStream);
  Rng noise_rng = root.derive(kNoiseStream);
  Adam adam(AdamOptions{.lr = config.lr});
  ParameterList params = model.parameters();
  SinkhornOptions ot;
  ot.epsilon = config.sinkhorn_epsilon;
  ot.max_iter = config.sinkhorn_max_iter;
  ot.tol = config.sinkhorn_tol;

  const std::size_t n = train.records.size();
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  bool budget_spent = config.max_steps != 0 && step >= config.max_steps;
  for (std::size_t epoch = 0; epoch < config.epochs && !budget_spent; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t first = 0; first < n; first += config.batch_size) {
      if (config.max_steps != 0 && step >= config.max_steps) {
        budget_spent = true;
        break;
      }
      const std::size_t last = std::min(n, first + config.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(last - first);
      zero_grad(params);
      Tape tape;
      Tape::Scope scope(tape);
      Tensor l_diff;
      Tensor l_local;
      Tensor l_global;
      auto accumulate = [](Tensor& acc, const Tensor& term) { acc = acc.defined() ? add(acc, term) : term; };
      try {
        for (std::size_t b = first; b < last; ++b) {
          const Tensor x0 = tokens_of(train.records[order[b]], config);
          const Tensor p_local = model.local()(x0);
          const Tensor p_global = model.global()(x0);
          const Tensor p0 = concat_rows({p_local, p_global});
          accumulate(l_diff, diffusion_loss(model.denoiser(), model.schedule(), x0, p0, noise_rng));
          if (config.lambda_local > 0.0) accumulate(l_local, local_alignment_loss(x0, p_local));
          if (config.lambda_global > 0.0) accumulate(l_global, global_alignment_loss(x0, p_global, ot));
        }
      } catch (const NumericalDomainError& e) {
        throw TrainingError("numerical failure at step " + std::to_string(step + 1) + ": " + e.what());
      } catch (const ArgumentError& e) {
        // Non-finite parameters surface as invalid Sinkhorn costs.
        throw TrainingError("numerical failure at step " + std::to_string(step + 1) + ": " + e.what());
      }
      l_diff = scale(l_diff, inv_batch);
      Tensor total = l_diff;
      TrainStep record;
      record.step = step + 1;
      record.l_diff = l_diff.item();
      if (config.lambda_local > 0.0) {
        l_local = scale(l_local, inv_batch);
        record.l_local = l_local.item();
        total = add(total, scale(l_local, config.lambda_local));
      }
      if (config.lambda_global > 0.0) {
        l_global = scale(l_global, inv_batch);
        record.l_global = l_global.item();
        total = add(total, scale(l_global, config.lambda_global));
      }
      record.total = total.item();
      if (!std::isfinite(record.total) || !std::isfinite(record.l_diff) || !std::isfinite(record.l_local) ||
          !std::isfinite(record.l_global)) {
        throw TrainingError("non-finite loss at step " + std::to_string(record.step) + ": l_diff=" +
                            fmt(record.l_diff) + " l_local=" + fmt(record.l_local) + " l_global=" +
                            fmt(record.l_global) + " total=" + fmt(record.total));
      }
      tape.backward(total);
      adam.step(params);
      ++step;
      result.log.steps.push_back(record);
      if (on_interval && config.checkpoint_interval != 0 && step % config.checkpoint_interval == 0) {
        on_interval(step, model);
      }
    }
  }
  result.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

TrainResult run_training(const RunConfig& config) {
  const RunData data = load_run_data(config);
  const std::filesystem::path out = config.output_dir;
  std::filesystem::create_directories(out);
  auto save = [&out](std::size_t step, const Model& model) {
    write_checkpoint(out / ("checkpoint_step_" + std::to_string(step) + ".dpck"), model.to_checkpoint());
  };
  TrainResult result = train_model(config, data.train, save);
  write_checkpoint(out / "model.dpck", result.model.to_checkpoint());
  {
    std::ofstream log(out / "train_log.csv", std::ios::binary | std::ios::trunc);
    log << result.log.to_csv();
    if (!log) throw IoError("cannot write " + (out / "train_log.csv").string());
  }
  {
    std::ofstream meta(out / "train_meta.json", std::ios::binary | std::ios::trunc);
    meta << "{\n  \"seed\": " << result.log.seed << ",\n  \"steps\": " << result.log.steps.size()
         << ",\n  \"wall_seconds\": " << fmt(result.log.wall_seconds) << "\n}\n";
  }
  return result;
}

// Evaluation ----------------------------------------------------------------

AuproOptions aupro_options(const RunConfig& config) {
  AuproOptions o;
  o.fpr_limit = config.fpr_limit;
  o.max_thresholds = config.aupro_max_thresholds;
  return o;
}

AnomalyMap score_record(const Model& model, const FeatureRecord& record, std::size_t record_index,
                        const RunConfig& config) {
  const Tensor x0 = tokens_of(record, config);
  if (x0.cols() != model.dim()) {
    throw LoadError("record " + std::to_string(record_index) + " has " + std::to_string(x0.cols()) +
                    " channels but the model expects " + std::to_string(model.dim()));
  }
  Rng rng = Rng(config.seed).derive(kEvalStream).derive(record_index);
  const NoiseSchedule& schedule = model.schedule();
  PrototypeCondition condition{model.prototypes(x0).detach(), Tensor{}};
  const Tensor eps_x = standard_normal(x0.shape(), rng);
  condition.eps = standard_normal(condition.p0.shape(), rng);
  const Tensor x_t = perturb(x0, eps_x, schedule.alpha_bar(config.t_fix));
  Tensor x0_hat;
  if (config.sampler == Sampler::kDdim) {
    const auto steps = make_step_list(config.t_fix, config.ddim_steps);
    x0_hat = ddim_reconstruct(model.denoiser(), schedule, x_t, condition, steps);
  } else {
    const auto steps = make_step_list(config.t_fix, config.ddpm_steps);
    x0_hat = ddpm_reconstruct(model.denoiser(), schedule, x_t, condition, steps, rng);
  }
  return score_reconstruction(x0, x0_hat, record.grid_h, record.grid_w, record.image_h, record.image_w,
                              config.pool_kernel);
}

Evaluation evaluate_model(const Model& model, const Dataset& test, const RunConfig& config) {
  config.validate();
  const std::size_t n = test.records.size();
  if (n == 0) throw ValidationError("test split has no records");
  Evaluation eval;
  eval.records.resize(n);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        const auto& rec = test.records[i];
        eval.records[i] = RecordResult{i, rec.category_id, rec.label, score_record(model, rec, i, config)};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const std::size_t workers = std::min(config.eval_workers, n);
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::map<std::uint32_t, CategoryScores> per_category;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = test.records[i];
    const auto& result = eval.records[i];
    auto& cat = per_category[rec.category_id];
    cat.image_scores.push_back(result.map.image_score);
    cat.image_labels.push_back(rec.label == Label::kAnomalous ? 1 : 0);
    cat.maps.push_back(ScoredMap{result.map.upsampled.height, result.map.upsampled.width,
                                 result.map.upsampled.values, rec.mask});
  }
  const AuproOptions options = aupro_options(config);
  for (const auto& [id, scores] : per_category) {
    auto name = test.category_index.find(id);
    const std::string label = name != test.category_index.end() ? name->second : "category_" + std::to_string(id);
    try {
      eval.report.per_category[label] = evaluate_category(scores, options);
    } catch (const MetricUndefinedError& e) {
      throw MetricUndefinedError(label + ": " + e.what());
    }
  }
  eval.report.aggregate_categories();
  return eval;
}

Evaluation run_evaluation(const Checkpoint& checkpoint, const RunConfig& config) {
  RunData data = load_run_data(config);
  const Model model = Model::from_checkpoint(checkpoint, config);
  return evaluate_model(model, data.test, config);
}

// Map export ----------------------------------------------------------------

void export_maps(const Evaluation& evaluation, const Dataset& test, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "maps");
  std::ostringstream index;
  index << "index,category,label,image_score,map,mask\n";
  for (const auto& r : evaluation.records) {
    const auto& rec = test.records[r.index];
    auto name = test.category_index.find(rec.category_id);
    const std::string category =
        name != test.category_index.end() ? name->second : "category_" + std::to_string(rec.category_id);
    const std::string stem = "maps/" + std::to_string(r.index);
    write_map_csv(dir / (stem + "_map.csv"), r.map.upsampled);
    Map2D mask{rec.image_h, rec.image_w, std::vector<double>(rec.mask.begin(), rec.mask.end())};
    write_map_csv(dir / (stem + "_mask.csv"), mask);
    index << r.index << ',' << category << ',' << static_cast<int>(rec.label) << ',' << fmt(r.map.image_score) << ','
          << stem << "_map.csv," << stem << "_mask.csv\n";
  }
  std::ofstream out(dir / "index.csv", std::ios::binary | std::ios::trunc);
  out << index.str();
  if (!out) throw IoError("cannot write " + (dir / "index.csv").string());
}

MetricsReport metrics_from_exported_maps(const std::filesystem::path& dir, const AuproOptions& options) {
  std::ifstream in(dir / "index.csv");
  if (!in) throw IoError("cannot open " + (dir / "index.csv").string());
  std::string line;
  std::getline(in, line);
  if (line != "index,category,label,image_score,map,mask") throw FormatError("index.csv has an unexpected header");
  std::map<std::string, CategoryScores> per_category;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError("index.csv line " + std::to_string(line_no) + ": expected 6 fields");
    double score = 0.0;
    auto [ptr, ec] = std::from_chars(cells[3].data(), cells[3].data() + cells[3].size(), score);
    if (ec != std::errc() || ptr != cells[3].data() + cells[3].size()) {
      throw FormatError("index.csv line " + std::to_string(line_no) + ": bad image score '" + cells[3] + "'");
    }
    if (cells[2] != "0" && cells[2] != "1") {
      throw FormatError("index.csv line " + std::to_string(line_no) + ": label must be 0 or 1");
    }
    const Map2D map = read_map_csv(dir / cells[4]);
    const Map2D mask = read_map_csv(dir / cells[5]);
    if (map.height != mask.height || map.width != mask.width) {
      throw DimensionError("index.csv line " + std::to_string(line_no) + ": map and mask sizes differ");
    }
    auto& cat = per_category[cells[1]];
    cat.image_scores.push_back(score);
    cat.image_labels.push_back(cells[2] == "1" ? 1 : 0);
    ScoredMap scored{map.height, map.width, map.values, {}};
    scored.mask.reserve(mask.values.size());
    for (double v : mask.values) scored.mask.push_back(v != 0.0 ? 1 : 0);
    cat.maps.push_back(std::move(scored));
  }
  MetricsReport report;
  for (const auto& [name, scores] : per_category) report.per_category[name] = evaluate_category(scores, options);
  report.aggregate_categories();
  return report;
}

}  // namespace dpdiff
