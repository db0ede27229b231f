// Residual multi-stage refinement: stage m consumes the previous stage's
// estimated pre-frame, predicts a residual displacement, and the totals
// compose by addition (left fold). Earlier stages stay frozen while a later
// stage trains.
#pragma once

#include <json.hpp>

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "elasto/losses.hpp"
#include "elasto/network.hpp"

namespace elasto {

template <typename T>
struct Stage {
  std::shared_ptr<StrainNet<T>> net;
  bool frozen = false;
};

template <typename T>
struct StageStack {
  std::vector<Stage<T>> stages;

  int count() const { return static_cast<int>(stages.size()); }

  void validate() const {
    if (stages.empty()) throw_config("configuration error: empty stage stack");
    for (const auto& s : stages)
      if (!s.net) throw_config("configuration error: stage without a network");
  }
};

namespace multistage_detail {

// stage inputs are rescaled to unit peak amplitude; an all-zero frame passes
// through unchanged
template <typename T>
Tensor<T> stage_normalize(const Tensor<T>& t, bool enabled) {
  if (!enabled) return t;
  const T m = tensor_max_abs(t);
  if (!(m > T(0))) return t;
  Tensor<T> out = t;
  out *= T(1) / m;
  return out;
}

}  // namespace multistage_detail

template <typename T>
struct CascadeStepVars {
  ad::Var<T> res_dy, res_dx;  // this stage's raw network output
  ad::Var<T> dy, dx;          // composed displacement (sum of residuals so far)
  ad::Var<T> strain;          // LSQSE of the composed axial displacement
  ad::Var<T> warped;          // estimated pre-frame after this stage
};

template <typename T>
struct CascadeStageVars {
  ad::Var<T> pre;  // the (normalized) reference this stage compared against
  std::vector<CascadeStepVars<T>> steps;
};

template <typename T>
struct CascadeOptions {
  int train_stage = 0;          // 1-based stage receiving gradients; 0 = none
  bool normalize_inputs = true; // per-stage maxabs renormalization
  int max_stage = 0;            // run stages 1..max_stage only; 0 = all
};

// Runs all stages on one graph. Gradients flow only into the trained stage:
// earlier stages bind their parameters as constants and hand their warped
// estimates over as fresh leaves.
template <typename T>
std::vector<CascadeStageVars<T>> cascade_forward(ad::Graph<T>& g, StageStack<T>& stack,
                                                 const Tensor<T>& pre, const std::vector<Tensor<T>>& posts,
                                                 const CascadeOptions<T>& opts = {}) {
  stack.validate();
  if (opts.train_stage < 0 || opts.train_stage > stack.count())
    throw_config("configuration error: train_stage out of range");
  if (opts.train_stage > 0)
    for (int m = 1; m < opts.train_stage; ++m)
      if (!stack.stages[static_cast<std::size_t>(m - 1)].frozen)
        throw Error(ErrorKind::config, "freeze violation: earlier stage not frozen");

  const int last = opts.max_stage > 0 ? std::min(opts.max_stage, stack.count()) : stack.count();
  if (opts.train_stage > last) throw_config("configuration error: train_stage beyond max_stage");

  std::vector<CascadeStageVars<T>> out;
  std::vector<Tensor<T>> stage_posts = posts;  // I_post^{t,0} = I_post^t
  for (int m = 1; m <= last; ++m) {
    auto& stage = stack.stages[static_cast<std::size_t>(m - 1)];
    const bool train = m == opts.train_stage;

    Tensor<T> norm_pre = multistage_detail::stage_normalize(pre, opts.normalize_inputs);
    std::vector<Tensor<T>> norm_posts;
    norm_posts.reserve(stage_posts.size());
    for (const auto& p : stage_posts)
      norm_posts.push_back(multistage_detail::stage_normalize(p, opts.normalize_inputs));

    SeqVars<T> fwd = stage.net->forward(g, norm_pre, norm_posts, train);

    CascadeStageVars<T> stage_out;
    stage_out.pre = fwd.pre;
    for (std::size_t ti = 0; ti < fwd.steps.size(); ++ti) {
      CascadeStepVars<T> step;
      step.res_dy = fwd.steps[ti].dy;
      step.res_dx = fwd.steps[ti].dx;
      step.warped = fwd.steps[ti].warped;
      if (m == 1) {
        step.dy = step.res_dy;
        step.dx = step.res_dx;
        step.strain = fwd.steps[ti].strain;
      } else {
        step.dy = ad::add(out.back().steps[ti].dy, step.res_dy);
        step.dx = ad::add(out.back().steps[ti].dx, step.res_dx);
        step.strain = ad::lsqse(step.dy, stage.net->config().lsqse_window);
      }
      stage_out.steps.push_back(std::move(step));
    }
    // the next stage consumes this stage's estimated pre-frames, detached
    for (std::size_t ti = 0; ti < stage_out.steps.size(); ++ti)
      stage_posts[ti] = stage_out.steps[ti].warped.value();
    out.push_back(std::move(stage_out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// plain (evaluation) forward

template <typename T>
struct StageStepOutput {
  DisplacementField<T> residual;
  DisplacementField<T> composed;
  Tensor<T> strain;
  Tensor<T> warped;
};

template <typename T>
using StageOutputs = std::vector<std::vector<StageStepOutput<T>>>;  // [stage][t]

template <typename T>
StageOutputs<T> musse_forward(StageStack<T>& stack, const RFSequence<T>& seq, bool normalize_inputs = true) {
  validate_sequence(seq);
  std::vector<Tensor<T>> posts;
  for (const auto& p : seq.posts) posts.push_back(p.samples);
  ad::Graph<T> g;
  CascadeOptions<T> opts;
  opts.normalize_inputs = normalize_inputs;
  auto vars = cascade_forward(g, stack, seq.pre.samples, posts, opts);
  StageOutputs<T> out;
  for (const auto& stage : vars) {
    std::vector<StageStepOutput<T>> steps;
    for (const auto& s : stage.steps)
      steps.push_back(StageStepOutput<T>{DisplacementField<T>{s.res_dy.value(), s.res_dx.value()},
                                         DisplacementField<T>{s.dy.value(), s.dx.value()},
                                         s.strain.value(), s.warped.value()});
    out.push_back(std::move(steps));
  }
  return out;
}

// Single-stage convenience: the backbone applied to a sequence.
template <typename T>
std::vector<StageStepOutput<T>> usse_forward(std::shared_ptr<StrainNet<T>> net, const RFSequence<T>& seq,
                                             bool normalize_inputs = true) {
  StageStack<T> stack;
  stack.stages.push_back(Stage<T>{std::move(net), false});
  return musse_forward(stack, seq, normalize_inputs).front();
}

// ---------------------------------------------------------------------------
// stage-count selection: smallest m whose displacement change from stage m-1
// is below tau_rel, relative to the stage-m displacement magnitude

struct MOptResult {
  int m_opt = 0;
  bool converged = false;  // false: never below tau_rel, m_opt = M with a warning
};

template <typename T>
MOptResult select_m_opt(const std::vector<std::vector<DisplacementField<T>>>& per_stage_disps,
                        double tau_rel) {
  if (per_stage_disps.size() < 2) throw_config("insufficient stages: select_m_opt needs at least two");
  if (!(tau_rel > 0.0)) throw_config("parameter error: tau_rel must be positive");
  const double tiny = 1e-12;
  for (std::size_t m = 1; m < per_stage_disps.size(); ++m) {
    const auto& cur = per_stage_disps[m];
    const auto& prev = per_stage_disps[m - 1];
    if (cur.size() != prev.size() || cur.empty()) throw_config("shape error: stage displacement lists disagree");
    double diff = 0.0, mag = 0.0;
    std::int64_t n = 0;
    for (std::size_t t = 0; t < cur.size(); ++t) {
      for (std::int64_t i = 0; i < cur[t].dy.size(); ++i) {
        diff += std::abs(static_cast<double>(cur[t].dy[i]) - static_cast<double>(prev[t].dy[i]));
        diff += std::abs(static_cast<double>(cur[t].dx[i]) - static_cast<double>(prev[t].dx[i]));
        mag += std::abs(static_cast<double>(cur[t].dy[i]));
        mag += std::abs(static_cast<double>(cur[t].dx[i]));
        ++n;
      }
    }
    diff /= static_cast<double>(2 * n);
    mag /= static_cast<double>(2 * n);
    if (diff / std::max(mag, tiny) < tau_rel) return {static_cast<int>(m + 1), true};
  }
  return {static_cast<int>(per_stage_disps.size()), false};
}

// ---------------------------------------------------------------------------
// stack checkpoint: stack.json + one checkpoint directory per stage

template <typename T>
void save_stack(const StageStack<T>& stack, const std::filesystem::path& dir) {
  stack.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw_io("io error: cannot create " + dir.string());
  nlohmann::json j;
  j["format_version"] = 1;
  nlohmann::json stages = nlohmann::json::array();
  for (int m = 1; m <= stack.count(); ++m) {
    const std::string sub = "stage_" + std::to_string(m);
    save_checkpoint(*stack.stages[static_cast<std::size_t>(m - 1)].net, dir / sub);
    stages.push_back({{"dir", sub}, {"frozen", stack.stages[static_cast<std::size_t>(m - 1)].frozen}});
  }
  j["stages"] = stages;
  std::ofstream out(dir / "stack.json", std::ios::trunc);
  if (!out) throw_io("io error: cannot write stack.json in " + dir.string());
  out << j.dump(2) << "\n";
}

template <typename T>
StageStack<T> load_stack(const std::filesystem::path& dir) {
  std::ifstream in(dir / "stack.json");
  if (!in) throw_config("checkpoint error: missing stack.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw_config("incompatible checkpoint: unparsable stack.json");
  }
  if (j.value("format_version", 0) != 1) throw_config("incompatible checkpoint: unsupported stack format_version");
  StageStack<T> stack;
  for (const auto& e : j.at("stages")) {
    Stage<T> s;
    s.net = load_checkpoint<T>(dir / e.at("dir").get<std::string>());
    s.frozen = e.value("frozen", false);
    stack.stages.push_back(std::move(s));
  }
  stack.validate();
  return stack;
}

}  // namespace elasto
