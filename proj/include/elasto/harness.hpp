// Training loop (adaptive-moment descent, plateau learning-rate policy,
// batch size fixed at 1), run-directory persistence with exact resume,
// evaluation orchestration, and inference artifact emission.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "elasto/losses.hpp"
#include "elasto/metrics.hpp"
#include "elasto/multistage.hpp"
#include "elasto/network.hpp"
#include "elasto/rfdata.hpp"

namespace elasto {

// ---------------------------------------------------------------------------
// learning-rate policy: reduce on plateau

struct PlateauPolicy {
  double factor = 0.5;
  int patience = 10;  // non-improving validation evaluations before reduction
  double min_lr = 1e-5;
};

class PlateauScheduler {
 public:
  PlateauScheduler(PlateauPolicy pol, double lr0) : pol_(pol), lr_(lr0) {}

  double rate() const { return lr_; }

  void observe(double val) {
    if (val < best_) {
      best_ = val;
      wait_ = 0;
      return;
    }
    if (++wait_ >= pol_.patience) {
      lr_ = std::max(lr_ * pol_.factor, pol_.min_lr);
      wait_ = 0;
    }
  }

  nlohmann::json state() const { return {{"lr", lr_}, {"best", best_}, {"wait", wait_}}; }
  void restore(const nlohmann::json& j) {
    lr_ = j.at("lr").get<double>();
    best_ = j.at("best").get<double>();
    wait_ = j.at("wait").get<int>();
  }

 private:
  PlateauPolicy pol_;
  double lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int wait_ = 0;
};

// ---------------------------------------------------------------------------
// Adam with global-norm gradient clipping

template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const ParamRegistry<T>& reg, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto* p : reg.items) {
      m_.push_back(Tensor<T>::zeros_like(p->value));
      v_.push_back(Tensor<T>::zeros_like(p->value));
    }
  }

  std::int64_t step_count() const { return t_; }

  void step(ParamRegistry<T>& reg, double lr, double clip_norm) {
    double sq = 0.0;
    for (const auto* p : reg.items)
      for (std::int64_t i = 0; i < p->grad.size(); ++i) {
        const double g = static_cast<double>(p->grad[i]);
        sq += g * g;
      }
    const double norm = std::sqrt(sq);
    const T clip = static_cast<T>(clip_norm > 0.0 && norm > clip_norm ? clip_norm / norm : 1.0);

    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const T alpha = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    for (std::size_t k = 0; k < reg.items.size(); ++k) {
      auto* p = reg.items[k];
      if (p->grad.size() != p->value.size()) continue;  // never touched by backward
      for (std::int64_t i = 0; i < p->value.size(); ++i) {
        const T g = p->grad[i] * clip;
        m_[k][i] = static_cast<T>(b1_) * m_[k][i] + static_cast<T>(1.0 - b1_) * g;
        v_[k][i] = static_cast<T>(b2_) * v_[k][i] + static_cast<T>(1.0 - b2_) * g * g;
        p->value[i] -= alpha * m_[k][i] / (std::sqrt(v_[k][i]) * inv_sqrt_bc2 + static_cast<T>(eps_));
      }
    }
  }

  void save(const std::filesystem::path& dir) const {
    std::vector<float> bm, bv;
    for (const auto& t : m_)
      for (std::int64_t i = 0; i < t.size(); ++i) bm.push_back(static_cast<float>(t[i]));
    for (const auto& t : v_)
      for (std::int64_t i = 0; i < t.size(); ++i) bv.push_back(static_cast<float>(t[i]));
    write_f32_blob(dir / "adam_m.f32", bm);
    write_f32_blob(dir / "adam_v.f32", bv);
  }

  void load(const std::filesystem::path& dir, std::int64_t step) {
    auto bm = read_f32_blob(dir / "adam_m.f32");
    auto bv = read_f32_blob(dir / "adam_v.f32");
    std::int64_t total = 0;
    for (const auto& t : m_) total += t.size();
    if (static_cast<std::int64_t>(bm.size()) != total || static_cast<std::int64_t>(bv.size()) != total)
      throw_config("incompatible checkpoint: optimizer state size mismatch");
    std::size_t off = 0;
    for (std::size_t k = 0; k < m_.size(); ++k)
      for (std::int64_t i = 0; i < m_[k].size(); ++i, ++off) {
        m_[k][i] = static_cast<T>(bm[off]);
        v_[k][i] = static_cast<T>(bv[off]);
      }
    t_ = step;
  }

 private:
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
  double b1_, b2_, eps_;
};

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
  double learning_rate = 1e-3;
  PlateauPolicy lr_policy;
  int epochs_stage1 = 150;
  int epochs_stage2 = 100;
  int max_iterations_stage1 = 0;  // 0: bounded by epochs only
  int max_iterations_stage2 = 0;
  int batch_size = 1;
  std::uint64_t seed = 0;
  bool normalize_input = true;
  double grad_clip = 10.0;
  LossConfig loss;
  NetworkConfig network;
  int stages = 1;
  int checkpoint_every = 0;  // iterations; 0: only at stage boundaries
  int eval_every = 0;        // iterations; 0: once per epoch
  double mask_eps = 1e-3;

  void validate() const {
    if (batch_size != 1) throw_config("configuration error: batch_size is fixed at 1");
    if (!(learning_rate > 0.0)) throw_config("configuration error: learning_rate must be positive");
    if (stages < 1) throw_config("configuration error: stages must be >= 1");
    if (epochs_stage1 < 0 || epochs_stage2 < 0 || max_iterations_stage1 < 0 || max_iterations_stage2 < 0)
      throw_config("configuration error: negative schedule");
    validate_loss_weights(loss.weights);
    validate_patch_spec(loss.patch);
    network.validate();
  }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"learning_rate", learning_rate},
        {"lr_policy", {{"factor", lr_policy.factor}, {"patience", lr_policy.patience}, {"min_lr", lr_policy.min_lr}}},
        {"epochs_stage1", epochs_stage1},
        {"epochs_stage2", epochs_stage2},
        {"max_iterations_stage1", max_iterations_stage1},
        {"max_iterations_stage2", max_iterations_stage2},
        {"batch_size", batch_size},
        {"seed", seed},
        {"normalize_input", normalize_input},
        {"grad_clip", grad_clip},
        {"loss",
         {{"alpha", loss.weights.alpha},
          {"beta", loss.weights.beta},
          {"gamma", loss.weights.gamma},
          {"patch_size", loss.patch.patch_size},
          {"stride", loss.patch.stride},
          {"epsilon", loss.patch.epsilon},
          {"literal_consistency_sign", loss.literal_consistency_sign}}},
        {"network", network.to_json()},
        {"stages", stages},
        {"checkpoint_every", checkpoint_every},
        {"eval_every", eval_every},
        {"mask_eps", mask_eps}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("lr_policy")) {
      const auto& p = j["lr_policy"];
      c.lr_policy.factor = p.value("factor", c.lr_policy.factor);
      c.lr_policy.patience = p.value("patience", c.lr_policy.patience);
      c.lr_policy.min_lr = p.value("min_lr", c.lr_policy.min_lr);
    }
    c.epochs_stage1 = j.value("epochs_stage1", c.epochs_stage1);
    c.epochs_stage2 = j.value("epochs_stage2", c.epochs_stage2);
    c.max_iterations_stage1 = j.value("max_iterations_stage1", c.max_iterations_stage1);
    c.max_iterations_stage2 = j.value("max_iterations_stage2", c.max_iterations_stage2);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.normalize_input = j.value("normalize_input", c.normalize_input);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      c.loss.weights.alpha = l.value("alpha", c.loss.weights.alpha);
      c.loss.weights.beta = l.value("beta", c.loss.weights.beta);
      c.loss.weights.gamma = l.value("gamma", c.loss.weights.gamma);
      c.loss.patch.patch_size = l.value("patch_size", c.loss.patch.patch_size);
      c.loss.patch.stride = l.value("stride", c.loss.patch.stride);
      c.loss.patch.epsilon = l.value("epsilon", c.loss.patch.epsilon);
      c.loss.literal_consistency_sign = l.value("literal_consistency_sign", false);
    }
    if (j.contains("network")) c.network = NetworkConfig::from_json(j["network"]);
    if (j.contains("T")) c.network.t_frames = j["T"].get<int>();
    c.stages = j.value("stages", c.stages);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.mask_eps = j.value("mask_eps", c.mask_eps);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// data loading helpers

template <typename T>
std::vector<RFSequence<T>> load_split(const DatasetManifest& manifest, const std::filesystem::path& base_dir,
                                      const std::string& split) {
  std::vector<RFSequence<T>> out;
  for (const auto& e : manifest.entries)
    if (e.split == split) out.push_back(load_sequence<T>(base_dir / e.path));
  return out;
}

template <typename T>
void normalize_sequence_inplace(RFSequence<T>& seq) {
  seq.pre = normalize_rf(seq.pre, NormalizeMode::maxabs);
  for (auto& p : seq.posts) p = normalize_rf(p, NormalizeMode::maxabs);
}

// ---------------------------------------------------------------------------
// training session with exact resume

template <typename T>
class TrainSession {
 public:
  TrainSession(TrainConfig cfg, std::filesystem::path run_dir) : cfg_(std::move(cfg)), run_dir_(std::move(run_dir)) {
    cfg_.validate();
    std::error_code ec;
    std::filesystem::create_directories(run_dir_, ec);
    if (ec) throw_io("io error: cannot create run directory " + run_dir_.string());
    for (int m = 1; m <= cfg_.stages; ++m) append_stage(m);
    {
      std::ofstream out(run_dir_ / "config.json", std::ios::trunc);
      out << cfg_.to_json().dump(2) << "\n";
    }
    begin_stage(1);
  }

  static TrainSession load(const std::filesystem::path& run_dir) {
    std::ifstream cin(run_dir / "config.json");
    if (!cin) throw_config("checkpoint error: missing config.json in " + run_dir.string());
    nlohmann::json cj;
    cin >> cj;
    TrainSession s(tag_loaded{}, TrainConfig::from_json(cj), run_dir);
    return s;
  }

  TrainConfig& config() { return cfg_; }
  StageStack<T>& stack() { return stack_; }
  int current_stage() const { return stage_; }
  std::int64_t iterations_done() const { return iteration_; }
  const std::vector<double>& loss_history() const { return history_; }

  void set_train_data(std::vector<RFSequence<T>> seqs) {
    train_ = std::move(seqs);
    if (cfg_.normalize_input)
      for (auto& s : train_) normalize_sequence_inplace(s);
  }
  void set_val_data(std::vector<RFSequence<T>> seqs) {
    val_ = std::move(seqs);
    if (cfg_.normalize_input)
      for (auto& s : val_) normalize_sequence_inplace(s);
  }

  // trains from the current position through all configured stages
  void run_all() {
    if (train_.empty()) throw_data("no data: training split is empty");
    while (stage_ <= cfg_.stages) {
      run_current_stage();
      if (stage_ < cfg_.stages)
        begin_stage(stage_ + 1);
      else
        break;
    }
    save();
  }

  // adds stage m (must extend the stack by exactly one) and trains it
  void train_stage(int m) {
    if (train_.empty()) throw_data("no data: training split is empty");
    if (m < 1) throw_config("configuration error: stage index must be >= 1");
    if (m > stack_.count() + 1) throw_config("configuration error: stage " + std::to_string(m) +
                                             " would skip untrained stages");
    if (m <= stack_.count()) {
      for (int i = 1; i < m; ++i)
        if (!stack_.stages[static_cast<std::size_t>(i - 1)].frozen)
          throw Error(ErrorKind::config, "freeze violation: stage " + std::to_string(i) + " is not frozen");
      if (m != stage_) throw_config("configuration error: stage " + std::to_string(m) + " already trained");
    } else {
      if (!stage_done()) throw_config("configuration error: current stage is not finished");
      cfg_.stages = m;
      append_stage(m);
      begin_stage(m);
    }
    run_current_stage();
    save();
  }

  void run_current_stage() {
    const int m = stage_;
    for (int i = 1; i < m; ++i)
      if (!stack_.stages[static_cast<std::size_t>(i - 1)].frozen)
        throw Error(ErrorKind::config, "freeze violation: stage " + std::to_string(i) + " is not frozen");
    auto& net = *stack_.stages[static_cast<std::size_t>(m - 1)].net;

    const std::int64_t n = static_cast<std::int64_t>(train_.size());
    const std::int64_t total = total_iterations(m, n);
    const std::int64_t eval_period = cfg_.eval_every > 0 ? cfg_.eval_every : n;

    while (iteration_ < total) {
      const auto& seq = train_[static_cast<std::size_t>(iteration_ % n)];
      one_step(m, net, seq);
      ++iteration_;
      if (iteration_ % eval_period == 0 && iteration_ < total) {
        sched_->observe(validation_loss(m));
      }
      if (cfg_.checkpoint_every > 0 && iteration_ % cfg_.checkpoint_every == 0) save();
    }
    stack_.stages[static_cast<std::size_t>(m - 1)].frozen = true;
    save();
  }

  double validation_loss(int m) {
    const auto& data = val_.empty() ? train_ : val_;
    double acc = 0.0;
    for (const auto& seq : data) acc += sequence_loss_value(m, seq);
    return acc / static_cast<double>(data.size());
  }

  // L_total of stage m on one sequence, no gradients
  double sequence_loss_value(int m, const RFSequence<T>& seq) {
    ad::Graph<T> g;
    auto loss = build_loss(g, m, seq, /*train=*/false);
    return static_cast<double>(loss.total.item());
  }

  void save() const {
    save_stack(stack_, run_dir_);
    if (opt_) opt_->save(run_dir_);
    nlohmann::json j{{"format_version", 1},
                     {"stage", stage_},
                     {"iteration", iteration_},
                     {"adam_step", opt_ ? opt_->step_count() : 0},
                     {"scheduler", sched_ ? sched_->state() : nlohmann::json()},
                     {"last_loss", history_.empty() ? 0.0 : history_.back()}};
    std::ofstream out(run_dir_ / "run_state.json", std::ios::trunc);
    if (!out) throw_io("io error: cannot write run_state.json");
    out << j.dump(2) << "\n";
  }

 private:
  struct tag_loaded {};

  TrainSession(tag_loaded, TrainConfig cfg, const std::filesystem::path& run_dir)
      : cfg_(std::move(cfg)), run_dir_(run_dir) {
    stack_ = load_stack<T>(run_dir);
    std::ifstream in(run_dir / "run_state.json");
    if (!in) throw_config("checkpoint error: missing run_state.json in " + run_dir.string());
    nlohmann::json j;
    in >> j;
    if (j.value("format_version", 0) != 1) throw_config("incompatible checkpoint: run_state format_version");
    stage_ = j.at("stage").get<int>();
    iteration_ = j.at("iteration").get<std::int64_t>();
    auto& net = *stack_.stages[static_cast<std::size_t>(stage_ - 1)].net;
    opt_ = std::make_unique<AdamOptimizer<T>>(net.params());
    if (std::filesystem::exists(run_dir / "adam_m.f32")) opt_->load(run_dir, j.at("adam_step").get<std::int64_t>());
    sched_ = std::make_unique<PlateauScheduler>(cfg_.lr_policy, cfg_.learning_rate);
    if (!j.at("scheduler").is_null()) sched_->restore(j.at("scheduler"));
  }

  void append_stage(int m) {
    NetworkConfig nc = cfg_.network;  // stages share one architecture
    Stage<T> st;
    st.net = std::make_shared<StrainNet<T>>(nc);
    st.net->init_params(cfg_.seed ^ fnv1a64("stage_" + std::to_string(m)));
    st.frozen = false;
    while (stack_.count() >= m) stack_.stages.pop_back();
    stack_.stages.push_back(std::move(st));
  }

  void begin_stage(int m) {
    stage_ = m;
    iteration_ = 0;
    auto& net = *stack_.stages[static_cast<std::size_t>(m - 1)].net;
    opt_ = std::make_unique<AdamOptimizer<T>>(net.params());
    sched_ = std::make_unique<PlateauScheduler>(cfg_.lr_policy, cfg_.learning_rate);
  }

  bool stage_done() const {
    return iteration_ >= total_iterations(stage_, static_cast<std::int64_t>(std::max<std::size_t>(train_.size(), 1)));
  }

  std::int64_t total_iterations(int m, std::int64_t n) const {
    const int epochs = m == 1 ? cfg_.epochs_stage1 : cfg_.epochs_stage2;
    const int cap = m == 1 ? cfg_.max_iterations_stage1 : cfg_.max_iterations_stage2;
    std::int64_t total = static_cast<std::int64_t>(epochs) * n;
    if (cap > 0) total = std::min<std::int64_t>(total, cap);
    return total;
  }

  ad::SequenceLoss<T> build_loss(ad::Graph<T>& g, int m, const RFSequence<T>& seq, bool train) {
    std::vector<Tensor<T>> posts;
    const int t_cap = std::min<int>(cfg_.network.t_frames, seq.t_count());
    for (int t = 0; t < t_cap; ++t) posts.push_back(seq.posts[static_cast<std::size_t>(t)].samples);
    CascadeOptions<T> opts;
    opts.train_stage = train ? m : 0;
    opts.normalize_inputs = cfg_.normalize_input;
    opts.max_stage = m;
    auto stages = cascade_forward(g, stack_, seq.pre.samples, posts, opts);
    const auto& sv = stages[static_cast<std::size_t>(m - 1)];
    std::vector<ad::Var<T>> warped, strains;
    std::vector<std::pair<ad::Var<T>, ad::Var<T>>> disps;
    for (const auto& s : sv.steps) {
      warped.push_back(s.warped);
      strains.push_back(s.strain);
      disps.push_back({s.dy, s.dx});
    }
    return ad::build_sequence_loss(g, sv.pre, warped, strains, disps, cfg_.loss);
  }

  void one_step(int m, StrainNet<T>& net, const RFSequence<T>& seq) {
    ad::Graph<T> g;
    auto loss = build_loss(g, m, seq, /*train=*/true);
    const double l_total = static_cast<double>(loss.total.item());
    if (!std::isfinite(l_total)) {
      dump_divergence(m, l_total);
      throw Error(ErrorKind::divergence, "divergence: non-finite loss at stage " + std::to_string(m) +
                                             " iteration " + std::to_string(iteration_ + 1));
    }
    for (auto* p : net.params().items) p->zero_grad();
    g.backward(loss.total);
    opt_->step(net.params(), sched_->rate(), cfg_.grad_clip);
    history_.push_back(l_total);
    log_iteration(m, loss);
  }

  void log_iteration(int m, const ad::SequenceLoss<T>& loss) {
    const auto b = ad::breakdown_of(loss);
    nlohmann::json per_t = nlohmann::json::array();
    for (std::size_t t = 0; t < b.per_t_sim.size(); ++t)
      per_t.push_back({{"l_sim", b.per_t_sim[t]},
                       {"l_con", t < b.per_t_con.size() ? b.per_t_con[t] : 0.0},
                       {"l_smooth", b.per_t_smooth[t]}});
    nlohmann::json line{{"iter", iteration_ + 1}, {"stage", m},      {"t", per_t},
                        {"l_sim", b.l_sim},       {"l_con", b.l_con}, {"l_smooth", b.l_smooth},
                        {"l_total", b.l_total},   {"lr", sched_->rate()}};
    std::ofstream out(run_dir_ / "train_log.jsonl", std::ios::app);
    out << line.dump() << "\n";
  }

  void dump_divergence(int m, double l_total) const {
    nlohmann::json j{{"stage", m}, {"iteration", iteration_ + 1}, {"l_total", l_total}};
    nlohmann::json tail = nlohmann::json::array();
    const std::size_t n = history_.size();
    for (std::size_t i = n > 16 ? n - 16 : 0; i < n; ++i) tail.push_back(history_[i]);
    j["recent_losses"] = tail;
    std::ofstream out(run_dir_ / "divergence.json", std::ios::trunc);
    out << j.dump(2) << "\n";
  }

  TrainConfig cfg_;
  std::filesystem::path run_dir_;
  StageStack<T> stack_;
  std::vector<RFSequence<T>> train_, val_;
  std::unique_ptr<AdamOptimizer<T>> opt_;
  std::unique_ptr<PlateauScheduler> sched_;
  int stage_ = 1;
  std::int64_t iteration_ = 0;
  std::vector<double> history_;
};

// ---------------------------------------------------------------------------
// evaluation

struct EvalOptions {
  std::optional<std::pair<ROISpec, ROISpec>> rois;  // fallback when an entry has none
  double mask_eps = 1e-3;
  NrmseNorm norm = NrmseNorm::literal;
  bool normalize_inputs = true;
  int t_cap = 0;  // 0: use every post frame
};

struct EvalReport {
  nlohmann::json json;
  std::string table;
};

template <typename T>
EvalReport evaluate_stack(StageStack<T>& stack, const DatasetManifest& manifest,
                          const std::filesystem::path& base_dir, const EvalOptions& opts = {}) {
  stack.validate();
  const int stage_count = stack.count();

  struct PairMetrics {
    std::vector<double> snr_t, snr_bg, cnr, snr_e, nrmse_v;
    double masked_acc = 0.0;
    int n_pairs = 0, n_nrmse = 0;
  };

  nlohmann::json out_splits = nlohmann::json::object();
  std::string table = metrics_table_header() + "\n";

  for (const std::string split : {"train", "val", "test"}) {
    std::vector<std::vector<PairMetrics>> per_stage(static_cast<std::size_t>(stage_count),
                                                    std::vector<PairMetrics>(1));
    bool any = false;
    for (const auto& entry : manifest.entries) {
      if (entry.split != split) continue;
      any = true;
      RFSequence<T> seq = load_sequence<T>(base_dir / entry.path);
      if (opts.t_cap > 0 && seq.t_count() > opts.t_cap) {
        seq.posts.resize(static_cast<std::size_t>(opts.t_cap));
        if (!seq.ground_truth.empty()) seq.ground_truth.resize(static_cast<std::size_t>(opts.t_cap));
      }
      if (opts.normalize_inputs) normalize_sequence_inplace(seq);
      const auto rois = entry.rois ? entry.rois : opts.rois;
      auto outputs = musse_forward(stack, seq, opts.normalize_inputs);
      for (int m = 1; m <= stage_count; ++m) {
        auto& agg = per_stage[static_cast<std::size_t>(m - 1)][0];
        const auto& steps = outputs[static_cast<std::size_t>(m - 1)];
        for (std::size_t ti = 0; ti < steps.size(); ++ti) {
          const auto& z = steps[ti].strain;
          agg.snr_e.push_back(snr_e(z));
          if (rois) {
            agg.snr_t.push_back(snr_target(z, rois->first));
            agg.snr_bg.push_back(snr_background(z, rois->second));
            agg.cnr.push_back(cnr(z, rois->first, rois->second));
          }
          if (seq.has_ground_truth()) {
            const auto r = nrmse(seq.ground_truth[ti].dy, steps[ti].composed.dy, opts.mask_eps, opts.norm);
            agg.nrmse_v.push_back(r.percent);
            agg.masked_acc += r.masked_fraction;
            ++agg.n_nrmse;
          }
          ++agg.n_pairs;
        }
      }
    }
    if (!any) continue;

    nlohmann::json stage_rows = nlohmann::json::array();
    for (int m = 1; m <= stage_count; ++m) {
      const auto& agg = per_stage[static_cast<std::size_t>(m - 1)][0];
      auto stat = [](const std::vector<double>& v) {
        const auto s = metrics_detail::aggregate(v);
        return nlohmann::json{{"mean", s.mean}, {"sd", s.sd}};
      };
      nlohmann::json row{{"stage", m}, {"n_pairs", agg.n_pairs}, {"snr_e", stat(agg.snr_e)}};
      MetricsReport rep;
      rep.n_pairs = agg.n_pairs;
      rep.snr_e.per_pair = agg.snr_e;
      if (!agg.snr_t.empty()) {
        row["snr_t"] = stat(agg.snr_t);
        row["snr_bg"] = stat(agg.snr_bg);
        row["cnr"] = stat(agg.cnr);
        rep.snr_t.per_pair = agg.snr_t;
        rep.snr_bg.per_pair = agg.snr_bg;
        rep.cnr.per_pair = agg.cnr;
      }
      if (!agg.nrmse_v.empty()) {
        row["nrmse_percent"] = stat(agg.nrmse_v);
        row["nrmse_masked_fraction"] = agg.masked_acc / agg.n_nrmse;
        rep.nrmse_percent.per_pair = agg.nrmse_v;
      }
      metrics_detail::finalize(rep.snr_t);
      metrics_detail::finalize(rep.snr_bg);
      metrics_detail::finalize(rep.cnr);
      metrics_detail::finalize(rep.snr_e);
      metrics_detail::finalize(rep.nrmse_percent);
      stage_rows.push_back(row);
      table += metrics_report_row(split + "/stage-" + std::to_string(m), rep) + "\n";
    }
    out_splits[split] = stage_rows;
  }

  EvalReport rep;
  rep.json = nlohmann::json{{"splits", out_splits}};
  rep.table = table;
  return rep;
}

// ---------------------------------------------------------------------------
// inference artifacts

template <typename T>
void write_pgm(const std::filesystem::path& path, const Tensor<T>& img, double lo, double hi) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_io("io error: cannot write " + path.string());
  out << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
  const double span = hi - lo;
  for (std::int64_t i = 0; i < img.size(); ++i) {
    double v = (static_cast<double>(img[i]) - lo) / (span > 0 ? span : 1.0);
    v = std::min(1.0, std::max(0.0, v));
    const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
    out.put(static_cast<char>(byte));
  }
}

// display window: [0, 1.5 * median strain]; near-zero medians fall back to a
// symmetric window so a flat map renders mid-gray
inline std::pair<double, double> strain_window(std::vector<double> values) {
  if (values.empty()) return {-0.01, 0.01};
  std::nth_element(values.begin(), values.begin() + values.size() / 2, values.end());
  const double med = values[values.size() / 2];
  if (std::abs(med) < 1e-9) return {-0.01, 0.01};
  return med > 0 ? std::make_pair(0.0, 1.5 * med) : std::make_pair(1.5 * med, 0.0);
}

template <typename T>
void infer_sequence(StageStack<T>& stack, const std::filesystem::path& seq_dir,
                    const std::filesystem::path& out_dir, bool normalize_inputs = true, int t_cap = 0) {
  RFSequence<T> seq = load_sequence<T>(seq_dir);
  if (t_cap > 0 && seq.t_count() > t_cap) {
    seq.posts.resize(static_cast<std::size_t>(t_cap));
    if (!seq.ground_truth.empty()) seq.ground_truth.resize(static_cast<std::size_t>(t_cap));
  }
  if (normalize_inputs) normalize_sequence_inplace(seq);
  auto outputs = musse_forward(stack, seq, normalize_inputs);
  const auto& final_stage = outputs.back();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw_io("io error: cannot create " + out_dir.string());

  nlohmann::json index{{"T", static_cast<int>(final_stage.size())},
                       {"H", seq.pre.rows()},
                       {"W", seq.pre.cols()},
                       {"stages", stack.count()}};
  nlohmann::json windows = nlohmann::json::array();
  for (std::size_t ti = 0; ti < final_stage.size(); ++ti) {
    char name[32];
    std::snprintf(name, sizeof name, "%04d", static_cast<int>(ti + 1));
    const auto& step = final_stage[ti];
    std::vector<float> blob;
    blob.reserve(static_cast<std::size_t>(2 * step.composed.dy.size()));
    for (std::int64_t i = 0; i < step.composed.dy.size(); ++i) blob.push_back(static_cast<float>(step.composed.dy[i]));
    for (std::int64_t i = 0; i < step.composed.dx.size(); ++i) blob.push_back(static_cast<float>(step.composed.dx[i]));
    write_f32_blob(out_dir / (std::string("disp_") + name + ".f32"), blob);

    std::vector<float> zblob(static_cast<std::size_t>(step.strain.size()));
    for (std::int64_t i = 0; i < step.strain.size(); ++i) zblob[static_cast<std::size_t>(i)] = static_cast<float>(step.strain[i]);
    write_f32_blob(out_dir / (std::string("strain_") + name + ".f32"), zblob);

    std::vector<double> vals(static_cast<std::size_t>(step.strain.size()));
    for (std::int64_t i = 0; i < step.strain.size(); ++i) vals[static_cast<std::size_t>(i)] = static_cast<double>(step.strain[i]);
    const auto [lo, hi] = strain_window(std::move(vals));
    windows.push_back({lo, hi});
    write_pgm(out_dir / (std::string("strain_") + name + ".pgm"), step.strain, lo, hi);
  }
  index["windows"] = windows;
  std::ofstream out(out_dir / "inference.json", std::ios::trunc);
  out << index.dump(2) << "\n";
}

}  // namespace elasto
