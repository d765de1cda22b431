#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "pfem/pipeline.hpp"
#include "pipeline_internal.hpp"

namespace pfem::pipe {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw PipelineError("train: lr must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw PipelineError("train: decay must be in (0, 1]");
  if (decay_every < 1) throw PipelineError("train: decay_every must be >= 1");
  if (epochs < 0 || samples_per_epoch < 0 || max_steps < 0 || checkpoint_every < 0)
    throw PipelineError("train: counts must be non-negative");
  if (batch < 1) throw PipelineError("train: batch must be >= 1");
  if (test_every < 1) throw PipelineError("train: test_every must be >= 1");
  if (time_budget_s < 0 || output_scale < 0) throw PipelineError("train: budget and output_scale must be >= 0");
  model.validate();
  if (static_cast<std::size_t>(model.in_features) != kFeatureCount)
    throw PipelineError("train: model.in_features must be " + std::to_string(kFeatureCount));
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"decay", c.decay},
          {"decay_every", c.decay_every},
          {"epochs", c.epochs},
          {"samples_per_epoch", c.samples_per_epoch},
          {"batch", c.batch},
          {"checkpoint_every", c.checkpoint_every},
          {"max_steps", c.max_steps},
          {"time_budget_s", c.time_budget_s},
          {"output_scale", c.output_scale},
          {"test_every", c.test_every},
          {"model", op::to_json(c.model)},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  check_keys(j,
             {"lr", "decay", "decay_every", "epochs", "samples_per_epoch", "batch", "checkpoint_every", "max_steps",
              "time_budget_s", "output_scale", "test_every", "model", "seed"},
             "train");
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.decay = j.value("decay", c.decay);
    c.decay_every = j.value("decay_every", c.decay_every);
    c.epochs = j.value("epochs", c.epochs);
    c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
    c.batch = j.value("batch", c.batch);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.time_budget_s = j.value("time_budget_s", c.time_budget_s);
    c.output_scale = j.value("output_scale", c.output_scale);
    c.test_every = j.value("test_every", c.test_every);
    if (j.contains("model")) c.model = op::config_from_json(j.at("model"));
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw PipelineError(std::string("train: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& c, std::uint64_t step) {
  return c.lr * std::pow(c.decay, static_cast<double>(step / static_cast<std::uint64_t>(c.decay_every)));
}

Surrogate make_surrogate(const TrainConfig& config, const ProblemSpec& spec) {
  config.validate();
  const double scale = config.output_scale > 0.0 ? config.output_scale : default_output_scale(spec);
  return Surrogate{op::Transolver(config.model, config.seed), scale, spec};
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& data, Surrogate& model, ad::AdamState& opt, int start_epoch,
                  const fs::path& out, const TestSet* test) {
  cfg.validate();
  if (!(model.net.config() == cfg.model)) throw PipelineError("train: model architecture differs from the config");
  auto& params = model.net.params();
  const std::size_t P = params.flat_size();
  if (opt.m.size() != P || opt.v.size() != P) throw PipelineError("train: optimizer state does not match the model");
  if (test && test->data && test->refs.size() != test->data->samples.size())
    throw PipelineError("train: test references do not match the test samples");
  const std::size_t reads_before = data.root.empty() ? 0 : reference_reads(data.root);

  std::vector<loss::PhysicsProblem> problems;
  problems.reserve(data.samples.size());
  for (const auto& s : data.samples) problems.push_back(data.physics(s, model.output_scale));

  std::ofstream metrics;
  if (!out.empty()) {
    fs::create_directories(out);
    const bool append = start_epoch > 0 && fs::exists(out / "metrics.csv");
    metrics.open(out / "metrics.csv", append ? std::ios::app : std::ios::trunc);
    if (!metrics) throw PipelineError("cannot write " + (out / "metrics.csv").string());
    if (!append) metrics << "step,epoch,loss,lr,test_error,train_refs_read\n";
  }

  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  std::vector<double> good_params = params.flat();
  ad::AdamState good_opt = opt;
  const std::size_t n = problems.size();
  const std::size_t per_epoch = cfg.samples_per_epoch > 0 ? std::min<std::size_t>(cfg.samples_per_epoch, n) : n;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch);
  std::vector<std::size_t> order(n);
  std::vector<double> grads(P);
  std::vector<std::string> rows;
  bool stop = false;

  auto save = [&](const fs::path& p, int epoch) {
    save_surrogate(p, model, &opt, {{"epoch", epoch}, {"step", opt.step}, {"train", to_json(cfg)}});
  };

  for (int epoch = start_epoch; epoch < cfg.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int epoch_steps = 0;
    rows.clear();

    for (std::size_t b = 0; b < per_epoch; b += batch) {
      if (cfg.max_steps > 0 && opt.step >= static_cast<std::uint64_t>(cfg.max_steps)) {
        stop = true;
        break;
      }
      if (cfg.time_budget_s > 0 && elapsed() > cfg.time_budget_s) {
        res.budget_hit = stop = true;
        break;
      }
      std::fill(grads.begin(), grads.end(), 0.0);
      double loss_sum = 0.0;
      int used = 0;
      for (std::size_t i = b; i < std::min(b + batch, per_epoch); ++i) {
        const std::size_t k = order[i];
        try {
          const auto r = loss::backprop_through_loss(model.net, data.samples[k].features, problems[k]);
          for (std::size_t q = 0; q < P; ++q) grads[q] += r.grad_params[q];
          loss_sum += r.loss.value;
          ++used;
        } catch (const fem::InversionError&) {
          ++res.skipped_inversions;
        }
      }
      if (used == 0) continue;
      for (double& g : grads) g /= used;
      const double loss = loss_sum / used;
      if (!std::isfinite(loss) || !all_finite(grads)) {
        params.flat() = good_params;
        opt = good_opt;
        res.aborted = true;
        std::ostringstream os;
        os << "non-finite loss at step " << opt.step << " (epoch " << epoch << "); restored the last good parameters";
        res.message = os.str();
        if (!out.empty()) {
          for (const auto& r : rows) metrics << r;
          save(out / "last_good.ckpt", epoch);
          res.checkpoint = out / "last_good.ckpt";
        }
        res.train_refs_read = data.root.empty() ? 0 : reference_reads(data.root) - reads_before;
        return res;
      }
      const double lr = learning_rate(cfg, opt.step);
      const std::uint64_t step = opt.step;
      ad::adam_step(params, grads, opt, lr);
      good_params = params.flat();
      good_opt = opt;
      res.losses.push_back(loss);
      ++res.steps;
      epoch_loss += loss;
      ++epoch_steps;
      if (!out.empty())
        rows.push_back(std::to_string(step) + "," + std::to_string(epoch) + "," + fmt(loss) + "," + fmt(lr) + ",,0\n");
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = opt.step;
    rec.mean_loss = epoch_steps ? epoch_loss / epoch_steps : std::numeric_limits<double>::quiet_NaN();
    const bool last = epoch + 1 == cfg.epochs || stop;
    if (test && test->data && ((epoch + 1 - start_epoch) % cfg.test_every == 0 || last))
      rec.test_error = evaluate(model, *test->data, test->refs).mean;
    rec.seconds = elapsed();
    res.history.push_back(rec);
    res.epochs = epoch + 1;

    if (!out.empty()) {
      const std::size_t reads = data.root.empty() ? 0 : reference_reads(data.root) - reads_before;
      if (!rows.empty()) {
        // the epoch's test error goes on its last step row
        auto& r = rows.back();
        r = r.substr(0, r.rfind(",,")) + "," + fmt(rec.test_error) + "," + std::to_string(reads) + "\n";
      }
      for (const auto& r : rows) metrics << r;
      metrics.flush();
      if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
        save(out / ("epoch_" + sample_name(epoch + 1) + ".ckpt"), epoch + 1);
    }
  }

  res.train_refs_read = data.root.empty() ? 0 : reference_reads(data.root) - reads_before;
  if (!out.empty()) {
    save(out / "model.ckpt", res.epochs);
    res.checkpoint = out / "model.ckpt";
  }
  return res;
}

TrainResult train(const TrainConfig& config, const fs::path& data_dir, const fs::path& out,
                  const std::optional<fs::path>& test_dir, const std::optional<fs::path>& resume_from) {
  const Dataset d = load_dataset(data_dir);
  ad::AdamState opt;
  int start_epoch = 0;
  std::optional<Surrogate> model;
  if (resume_from) {
    json extra;
    model.emplace(load_surrogate(*resume_from, &opt, &extra));
    start_epoch = extra.value("epoch", 0);
    if (!(model->net.config() == config.model))
      throw PipelineError("resume: checkpoint architecture differs from the config");
  } else {
    model.emplace(make_surrogate(config, d.spec));
    opt = ad::AdamState::fresh(model->net.params().flat_size(), config.lr);
  }
  std::optional<Dataset> test_data;
  TestSet test;
  if (test_dir) {
    test_data.emplace(load_dataset(*test_dir));
    test.data = &*test_data;
    for (const auto& s : test_data->samples) test.refs.push_back(load_reference(*test_dir, s.id));
  }
  return train(config, d, *model, opt, start_epoch, out, test_dir ? &test : nullptr);
}

// ---------------------------------------------------------------------------

json PatchTestReport::to_json() const {
  json errs = json::array();
  for (const auto& [s, e] : errors) errs.push_back({{"step", s}, {"error", e}});
  return {{"passed", passed},
          {"steps_run", steps_run},
          {"steps_to_threshold", steps_to_threshold},
          {"final_error", final_error},
          {"best_error", best_error},
          {"grad_norm_initial", grad_norm_initial},
          {"grad_norm_final", grad_norm_final},
          {"trailing_monotone", trailing_monotone},
          {"errors", errs},
          {"message", message}};
}

namespace {

double mean_of(const std::vector<double>& v, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t i = a; i < b; ++i) s += v[i];
  return s / static_cast<double>(b - a);
}

// Mean loss over the last (up to three) windows must not increase.
bool trailing_windows_decrease(const std::vector<double>& losses, std::size_t window) {
  if (losses.size() < 2) return false;
  if (losses.size() < 2 * window) {
    const std::size_t h = losses.size() / 2;
    return mean_of(losses, h, losses.size()) <= mean_of(losses, 0, h);
  }
  const std::size_t count = std::min<std::size_t>(3, losses.size() / window);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = count; k >= 1; --k) {
    const std::size_t end = losses.size() - (k - 1) * window;
    const double m = mean_of(losses, end - window, end);
    if (m > prev) return false;
    prev = m;
  }
  return true;
}

}  // namespace

PatchTestReport patch_test(const ProblemSpec& spec, const PatchTestOptions& o) {
  PatchTestReport rep;
  const Dataset d = make_dataset(spec, 1, o.seed);
  const Sample& s = d.samples.front();
  const Reference ref = solve_reference(d, s);
  if (!ref.converged) {
    rep.message = "reference solve failed: " + ref.message;
    return rep;
  }
  const double scale = o.output_scale > 0.0 ? o.output_scale : default_output_scale(spec);
  Surrogate model{op::Transolver(o.model, o.seed), scale, spec};
  const auto prob = d.physics(s, scale);
  TrainConfig tc;
  tc.lr = o.lr;
  auto opt = ad::AdamState::fresh(model.net.params().flat_size(), o.lr);
  rep.best_error = std::numeric_limits<double>::infinity();

  int step = 0;
  try {
    for (; step <= o.max_steps; ++step) {
      const auto r = loss::backprop_through_loss(model.net, s.features, prob);
      if (step == 0) rep.grad_norm_initial = r.loss.grad.norm();
      rep.grad_norm_final = r.loss.grad.norm();
      if (step % o.check_every == 0 || step == o.max_steps) {
        const double e = relative_error(r.U, ref.U);
        rep.errors.emplace_back(step, e);
        rep.best_error = std::min(rep.best_error, e);
        rep.final_error = e;
        if (e <= o.threshold) {
          rep.steps_to_threshold = step;
          break;
        }
      }
      if (step == o.max_steps) break;
      if (!std::isfinite(r.loss.value)) {
        rep.message = "non-finite loss at step " + std::to_string(step);
        break;
      }
      rep.losses.push_back(r.loss.value);
      ad::adam_step(model.net.params(), r.grad_params, opt, learning_rate(tc, opt.step));
    }
  } catch (const fem::InversionError& e) {
    rep.message = std::string("inverted element during training: ") + e.what();
  }
  rep.steps_run = step;
  rep.trailing_monotone = trailing_windows_decrease(rep.losses, static_cast<std::size_t>(o.window));
  rep.passed = rep.steps_to_threshold >= 0 && rep.trailing_monotone;
  if (rep.message.empty())
    rep.message = rep.passed ? "reached threshold" : rep.steps_to_threshold >= 0 ? "loss not decreasing over trailing windows"
                                                                                  : "threshold not reached";
  return rep;
}

}  // namespace pfem::pipe
