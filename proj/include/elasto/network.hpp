// Displacement-estimation backbone: a three-stream encoder with shared-weight
// pre/post branches and a context-fusion mid stream, a tri-cross-attention
// bottleneck, and a sequential decoder (attention-gated skip fusion + ConvLSTM
// per level) whose per-level 2-channel heads sum into the displacement field.
// Axial strain follows by differentiable least-squares slope estimation.
#pragma once

#include <json.hpp>

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "elasto/autodiff.hpp"
#include "elasto/rfdata.hpp"

namespace elasto {

struct AblationFlags {
  bool use_cacff = true;  // three-stream encoder with residual context fusion
  bool use_tca = true;    // attention bottleneck (requires use_cacff)
  bool use_caf = true;    // gated skip fusion + dual-path upsampling
};

struct NetworkConfig {
  int levels = 4;
  int base_channels = 8;
  int t_frames = 3;
  std::vector<int> lstm_hidden;  // per output level 0..levels-1; empty = derived
  int upsample_factor = 4;       // refinement factor for output warping
  int lsqse_window = 15;
  AblationFlags ablation;

  int enc_channels(int level) const { return base_channels << (level - 1); }  // level in 1..levels

  int hidden_at(int out_level) const {  // out_level in 0..levels-1
    if (!lstm_hidden.empty()) return lstm_hidden[static_cast<std::size_t>(out_level)];
    return out_level == 0 ? base_channels : base_channels << (out_level - 1);
  }

  void validate() const {
    if (levels < 2) throw_config("configuration error: levels must be >= 2");
    if (base_channels < 4) throw_config("configuration error: base_channels must be >= 4");
    if (t_frames < 1) throw_config("configuration error: t_frames must be >= 1");
    if (upsample_factor < 1) throw_config("configuration error: upsample_factor must be >= 1");
    if (lsqse_window < 3 || lsqse_window % 2 == 0)
      throw_config("configuration error: lsqse_window must be odd and >= 3");
    if (!lstm_hidden.empty()) {
      if (static_cast<int>(lstm_hidden.size()) != levels)
        throw_config("configuration error: lstm_hidden must list one width per level");
      for (int h : lstm_hidden)
        if (h < 1) throw_config("configuration error: lstm_hidden entries must be >= 1");
    }
    if (ablation.use_tca && !ablation.use_cacff)
      throw_config("configuration error: use_tca requires use_cacff");
  }

  void check_input(std::int64_t h, std::int64_t w) const {
    const std::int64_t div = std::int64_t(1) << levels;
    if (h % div != 0 || w % div != 0)
      throw_config("shape error: input H and W must be divisible by 2^levels");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"levels", levels},
                          {"base_channels", base_channels},
                          {"t_frames", t_frames},
                          {"lstm_hidden", lstm_hidden},
                          {"upsample_factor", upsample_factor},
                          {"lsqse_window", lsqse_window},
                          {"ablation",
                           {{"use_cacff", ablation.use_cacff},
                            {"use_tca", ablation.use_tca},
                            {"use_caf", ablation.use_caf}}}};
  }

  static NetworkConfig from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.levels = j.value("levels", c.levels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.t_frames = j.value("T", j.value("t_frames", c.t_frames));
    c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
    c.upsample_factor = j.value("upsample_factor", c.upsample_factor);
    c.lsqse_window = j.value("lsqse_window", c.lsqse_window);
    if (j.contains("ablation")) {
      const auto& a = j["ablation"];
      c.ablation.use_cacff = a.value("use_cacff", true);
      c.ablation.use_tca = a.value("use_tca", true);
      c.ablation.use_caf = a.value("use_caf", true);
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// layers

template <typename T>
struct Conv2dLayer {
  Parameter<T> w, b;
  int stride = 1, pad = 0;
  bool has_bias = true;

  void build(ParamRegistry<T>& reg, const std::string& name, int in_c, int out_c, int k, int stride_,
             int pad_, bool bias) {
    stride = stride_;
    pad = pad_;
    has_bias = bias;
    w.name = name + ".weight";
    w.value = Tensor<T>({out_c, in_c, k, k});
    reg.add(&w);
    if (bias) {
      b.name = name + ".bias";
      b.value = Tensor<T>({out_c});
      reg.add(&b);
    }
  }

  ad::Var<T> forward(ad::Graph<T>& g, ad::Var<T> x, bool train) {
    return ad::conv2d(x, g.param(w, train), has_bias ? g.param(b, train) : ad::Var<T>(), stride, pad);
  }
};

template <typename T>
struct ConvT2x2Layer {
  Parameter<T> w, b;

  void build(ParamRegistry<T>& reg, const std::string& name, int in_c, int out_c) {
    w.name = name + ".weight";
    w.value = Tensor<T>({in_c, out_c, 2, 2});
    reg.add(&w);
    b.name = name + ".bias";
    b.value = Tensor<T>({out_c});
    reg.add(&b);
  }

  ad::Var<T> forward(ad::Graph<T>& g, ad::Var<T> x, bool train) {
    return ad::conv_transpose2x2(x, g.param(w, train), g.param(b, train));
  }
};

// two 3x3 convolutions with a strided 1x1 projection skip; halves the spatial
// size. Optional extra residual inputs join before the output activation.
template <typename T>
struct ResidualDownBlock {
  Conv2dLayer<T> conv1, conv2, skip;

  void build(ParamRegistry<T>& reg, const std::string& name, int in_c, int out_c) {
    conv1.build(reg, name + ".conv1", in_c, out_c, 3, 2, 1, true);
    conv2.build(reg, name + ".conv2", out_c, out_c, 3, 1, 1, true);
    skip.build(reg, name + ".skip", in_c, out_c, 1, 2, 0, true);
  }

  ad::Var<T> forward(ad::Graph<T>& g, ad::Var<T> x, bool train, const std::vector<ad::Var<T>>& extra = {}) {
    ad::Var<T> y = conv2.forward(g, ad::leaky_relu(conv1.forward(g, x, train)), train);
    ad::Var<T> s = ad::add(y, skip.forward(g, x, train));
    for (const auto& e : extra) s = ad::add(s, e);
    return ad::leaky_relu(s);
  }
};

// ---------------------------------------------------------------------------
// network

template <typename T>
struct EncoderVars {
  std::vector<ad::Var<T>> pre, post, mid;  // index l-1 holds level l
};

template <typename T>
struct BottleneckVars {
  ad::Var<T> out;
  ad::Var<T> channel_gate;  // attention scores (softmax over channels); invalid when ablated
};

template <typename T>
struct StepVars {
  ad::Var<T> dy, dx;      // [H,W], pixels
  ad::Var<T> strain;      // [H,W]
  ad::Var<T> warped;      // [H,W], the estimated pre-frame
  std::vector<Tensor<T>> increments;  // raw per-level head outputs [2,hj,wj]
};

template <typename T>
struct SeqVars {
  ad::Var<T> pre;
  std::vector<StepVars<T>> steps;
  std::vector<std::vector<std::int64_t>> encoder_shapes;  // mid-stream feature shapes, t = 1
};

template <typename T>
class StrainNet {
 public:
  explicit StrainNet(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }
  StrainNet(const StrainNet&) = delete;
  StrainNet& operator=(const StrainNet&) = delete;

  const NetworkConfig& config() const { return cfg_; }
  ParamRegistry<T>& params() { return reg_; }
  const ParamRegistry<T>& params() const { return reg_; }

  void init_params(std::uint64_t seed) {
    for (auto* p : reg_.items) {
      Rng rng(seed ^ fnv1a64(p->name));
      if (p->name.ends_with(".bias")) {
        p->value.fill(T(0));
        continue;
      }
      std::int64_t fan_in;
      if (p->name.find(".up.") != std::string::npos)  // transposed conv stores [Ci,Co,2,2]
        fan_in = p->value.dim(0);
      else
        fan_in = p->value.dim(1) * p->value.dim(2) * p->value.dim(3);
      double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
      if (p->name.find(".head.") != std::string::npos) std_dev *= 0.1;  // start near identity warp
      for (std::int64_t i = 0; i < p->value.size(); ++i)
        p->value[i] = static_cast<T>(rng.normal() * std_dev);
    }
  }

  EncoderVars<T> encode(ad::Graph<T>& g, ad::Var<T> pre, ad::Var<T> post, bool train) {
    EncoderVars<T> out;
    ad::Var<T> mid_x = ad::concat_ch<T>({pre, post});
    ad::Var<T> pre_x = pre, post_x = post;
    for (int l = 1; l <= cfg_.levels; ++l) {
      const std::size_t i = static_cast<std::size_t>(l - 1);
      std::vector<ad::Var<T>> extra;
      if (cfg_.ablation.use_cacff) {
        pre_x = shared_blocks_[i].forward(g, pre_x, train);
        post_x = shared_blocks_[i].forward(g, post_x, train);
        out.pre.push_back(pre_x);
        out.post.push_back(post_x);
        extra = {pre_x, post_x};
      }
      mid_x = mid_blocks_[i].forward(g, mid_x, train, extra);
      out.mid.push_back(mid_x);
    }
    return out;
  }

  BottleneckVars<T> bottleneck(ad::Graph<T>& g, const EncoderVars<T>& enc, bool train) {
    BottleneckVars<T> out;
    const std::size_t top = static_cast<std::size_t>(cfg_.levels - 1);
    if (cfg_.ablation.use_tca) {
      ad::Var<T> f_pre = enc.pre[top], f_post = enc.post[top], f_mid = enc.mid[top];
      const double s = 1.0 / std::sqrt(static_cast<double>(cfg_.enc_channels(cfg_.levels)));
      // pairwise (query, key) attention; the key-side feature is the value
      ad::Var<T> a1 = ad::attn_apply(ad::softmax_rows(ad::attn_scores(f_pre, f_post, s)), f_post);
      ad::Var<T> a2 = ad::attn_apply(ad::softmax_rows(ad::attn_scores(f_pre, f_mid, s)), f_mid);
      ad::Var<T> a3 = ad::attn_apply(ad::softmax_rows(ad::attn_scores(f_post, f_mid, s)), f_mid);
      ad::Var<T> proj = tca_proj_.forward(g, ad::concat_ch<T>({a1, a2, a3}), train);
      out.channel_gate = ad::softmax_channels(proj);
      out.out = ad::mul(out.channel_gate, f_mid);
    } else {
      std::vector<ad::Var<T>> streams;
      if (cfg_.ablation.use_cacff) {
        streams.push_back(enc.pre[top]);
        streams.push_back(enc.post[top]);
      }
      streams.push_back(enc.mid[top]);
      out.out = ad::leaky_relu(fuse_.forward(g, ad::concat_ch<T>(streams), train));
    }
    return out;
  }

  // Differentiable forward over a full sequence: ConvLSTM states persist
  // across t and reset between calls. Inputs are taken as given (the caller
  // owns normalization).
  SeqVars<T> forward(ad::Graph<T>& g, const Tensor<T>& pre, const std::vector<Tensor<T>>& posts, bool train) {
    if (pre.rank() != 2) throw_config("shape error: forward expects [H,W] frames");
    cfg_.check_input(pre.dim(0), pre.dim(1));
    if (posts.empty()) throw_config("shape error: forward needs at least one post frame");
    const std::int64_t h = pre.dim(0), w = pre.dim(1);

    SeqVars<T> out;
    ad::Var<T> pre_leaf = g.leaf(pre.reshaped({1, h, w}));
    out.pre = g.leaf(pre);

    std::vector<std::pair<ad::Var<T>, ad::Var<T>>> states(static_cast<std::size_t>(cfg_.levels));
    bool states_ready = false;

    for (std::size_t ti = 0; ti < posts.size(); ++ti) {
      if (!posts[ti].same_shape(pre)) throw_config("shape error: post frame shape mismatch");
      ad::Var<T> post_leaf = g.leaf(posts[ti].reshaped({1, h, w}));
      ad::Var<T> post_flat = g.leaf(posts[ti]);

      EncoderVars<T> enc = encode(g, pre_leaf, post_leaf, train);
      if (ti == 0)
        for (const auto& m : enc.mid) out.encoder_shapes.push_back(m.value().shape());
      BottleneckVars<T> bn = bottleneck(g, enc, train);

      // bottleneck-level skip stack uses the fused mid stream
      ad::Var<T> h_prev = bn.out;
      StepVars<T> step;
      ad::Var<T> dsum_dy, dsum_dx;
      for (int l = cfg_.levels; l >= 1; --l) {
        const std::size_t li = static_cast<std::size_t>(l - 1);
        std::vector<ad::Var<T>> skips;
        if (cfg_.ablation.use_cacff) {
          skips.push_back(enc.pre[li]);
          skips.push_back(enc.post[li]);
        }
        skips.push_back(l == cfg_.levels ? bn.out : enc.mid[li]);

        ad::Var<T> fused = fuse_level(g, li, h_prev, skips, train);

        // ConvLSTM step at output level l-1
        const int hid = cfg_.hidden_at(l - 1);
        const std::int64_t hj = fused.value().dim(1), wj = fused.value().dim(2);
        if (!states_ready) {
          states[li].first = g.leaf(Tensor<T>({hid, hj, wj}));
          states[li].second = g.leaf(Tensor<T>({hid, hj, wj}));
        }
        ad::Var<T> gates = lstm_[li].forward(g, ad::concat_ch<T>({fused, states[li].first}), train);
        ad::Var<T> gi = ad::sigmoid(ad::slice_ch(gates, 0, hid));
        ad::Var<T> gf = ad::sigmoid(ad::slice_ch(gates, hid, hid));
        ad::Var<T> go = ad::sigmoid(ad::slice_ch(gates, 2 * hid, hid));
        ad::Var<T> gg = ad::tanh_(ad::slice_ch(gates, 3 * hid, hid));
        ad::Var<T> c_new = ad::add(ad::mul(gf, states[li].second), ad::mul(gi, gg));
        ad::Var<T> h_new = ad::mul(go, ad::tanh_(c_new));
        states[li] = {h_new, c_new};

        // per-level displacement increment, upsampled to full resolution and
        // rescaled from level pixels to full-resolution pixels
        ad::Var<T> inc = head_[li].forward(g, h_new, train);
        step.increments.push_back(inc.value());
        ad::Var<T> up = ad::resize_bilinear(inc, h, w);
        const double px_scale = static_cast<double>(std::int64_t(1) << (l - 1));
        up = ad::scale(up, px_scale);
        ad::Var<T> inc_dy = ad::reshape(ad::slice_ch(up, 0, 1), {h, w});
        ad::Var<T> inc_dx = ad::reshape(ad::slice_ch(up, 1, 1), {h, w});
        if (!dsum_dy.valid()) {
          dsum_dy = inc_dy;
          dsum_dx = inc_dx;
        } else {
          dsum_dy = ad::add(dsum_dy, inc_dy);
          dsum_dx = ad::add(dsum_dx, inc_dx);
        }
        h_prev = h_new;
      }
      states_ready = true;

      step.dy = dsum_dy;
      step.dx = dsum_dx;
      step.strain = ad::lsqse(step.dy, cfg_.lsqse_window);
      step.warped = ad::warp_upsampled(post_flat, step.dy, step.dx, cfg_.upsample_factor);
      out.steps.push_back(std::move(step));
    }
    return out;
  }

  // expected mid-stream feature shape at each level for a given input size
  static std::vector<std::vector<std::int64_t>> expected_encoder_shapes(const NetworkConfig& cfg,
                                                                        std::int64_t h, std::int64_t w) {
    std::vector<std::vector<std::int64_t>> out;
    for (int l = 1; l <= cfg.levels; ++l)
      out.push_back({cfg.enc_channels(l), h >> l, w >> l});
    return out;
  }

 private:
  ad::Var<T> fuse_level(ad::Graph<T>& g, std::size_t li, ad::Var<T> h_prev,
                        const std::vector<ad::Var<T>>& skips, bool train) {
    if (cfg_.ablation.use_caf) {
      ad::Var<T> stack = ad::concat_ch<T>(skips);
      ad::Var<T> gated = ad::mul(stack, ad::sigmoid(gate_[li].forward(g, stack, train)));
      ad::Var<T> combined = ad::add(h_prev, reduce_[li].forward(g, gated, train));
      // dual-path upsampling: learnable transposed conv + bilinear, summed
      ad::Var<T> up_l = up_[li].forward(g, combined, train);
      ad::Var<T> up_b = ad::resize_bilinear(combined, 2 * combined.value().dim(1), 2 * combined.value().dim(2));
      return ad::add(up_l, up_b);
    }
    std::vector<ad::Var<T>> cat = skips;
    cat.insert(cat.begin(), h_prev);
    ad::Var<T> combined = plain_[li].forward(g, ad::concat_ch<T>(cat), train);
    return ad::resize_bilinear(combined, 2 * combined.value().dim(1), 2 * combined.value().dim(2));
  }

  void build() {
    const int L = cfg_.levels;
    const int streams = cfg_.ablation.use_cacff ? 3 : 1;
    if (cfg_.ablation.use_cacff) {
      shared_blocks_.resize(static_cast<std::size_t>(L));
      for (int l = 1; l <= L; ++l)
        shared_blocks_[static_cast<std::size_t>(l - 1)].build(
            reg_, "encoder.shared.b" + std::to_string(l), l == 1 ? 1 : cfg_.enc_channels(l - 1),
            cfg_.enc_channels(l));
    }
    mid_blocks_.resize(static_cast<std::size_t>(L));
    for (int l = 1; l <= L; ++l)
      mid_blocks_[static_cast<std::size_t>(l - 1)].build(
          reg_, "encoder.mid.b" + std::to_string(l), l == 1 ? 2 : cfg_.enc_channels(l - 1),
          cfg_.enc_channels(l));

    const int top_c = cfg_.enc_channels(L);
    if (cfg_.ablation.use_tca)
      tca_proj_.build(reg_, "bottleneck.proj", 3 * top_c, top_c, 1, 1, 0, true);
    else
      fuse_.build(reg_, "bottleneck.fuse", streams * top_c, top_c, 1, 1, 0, true);

    gate_.resize(static_cast<std::size_t>(L));
    reduce_.resize(static_cast<std::size_t>(L));
    up_.resize(static_cast<std::size_t>(L));
    plain_.resize(static_cast<std::size_t>(L));
    lstm_.resize(static_cast<std::size_t>(L));
    head_.resize(static_cast<std::size_t>(L));
    for (int l = L; l >= 1; --l) {
      const std::size_t li = static_cast<std::size_t>(l - 1);
      const std::string name = "decoder.l" + std::to_string(l);
      const int in_c = l == L ? top_c : cfg_.hidden_at(l);
      const int skip_c = streams * cfg_.enc_channels(l);
      if (cfg_.ablation.use_caf) {
        gate_[li].build(reg_, name + ".gate", skip_c, skip_c, 1, 1, 0, true);
        reduce_[li].build(reg_, name + ".reduce", skip_c, in_c, 1, 1, 0, false);
        up_[li].build(reg_, name + ".up", in_c, in_c);
      } else {
        plain_[li].build(reg_, name + ".plain", in_c + skip_c, in_c, 1, 1, 0, true);
      }
      const int hid = cfg_.hidden_at(l - 1);
      lstm_[li].build(reg_, name + ".lstm", in_c + hid, 4 * hid, 3, 1, 1, true);
      head_[li].build(reg_, name + ".head", hid, 2, 3, 1, 1, true);
    }
  }

  NetworkConfig cfg_;
  ParamRegistry<T> reg_;
  std::vector<ResidualDownBlock<T>> shared_blocks_, mid_blocks_;
  Conv2dLayer<T> tca_proj_, fuse_;
  std::vector<Conv2dLayer<T>> gate_, reduce_, plain_, lstm_, head_;
  std::vector<ConvT2x2Layer<T>> up_;
};

// ---------------------------------------------------------------------------
// parameter checkpoints: arch.json + one raw float32 blob per parameter

template <typename T>
void save_checkpoint(const StrainNet<T>& net, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw_io("io error: cannot create " + dir.string());
  nlohmann::json j;
  j["format_version"] = 1;
  j["config"] = net.config().to_json();
  nlohmann::json table = nlohmann::json::array();
  for (const auto* p : net.params().items)
    table.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  j["params"] = table;
  {
    std::ofstream out(dir / "arch.json", std::ios::trunc);
    if (!out) throw_io("io error: cannot write arch.json in " + dir.string());
    out << j.dump(2) << "\n";
  }
  for (const auto* p : net.params().items) {
    std::vector<float> blob(static_cast<std::size_t>(p->value.size()));
    for (std::int64_t i = 0; i < p->value.size(); ++i) blob[static_cast<std::size_t>(i)] = static_cast<float>(p->value[i]);
    write_f32_blob(dir / (p->name + ".f32"), blob);
  }
}

template <typename T>
std::shared_ptr<StrainNet<T>> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "arch.json");
  if (!in) throw_config("checkpoint error: missing arch.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw_config("incompatible checkpoint: unparsable arch.json");
  }
  if (j.value("format_version", 0) != 1) throw_config("incompatible checkpoint: unsupported format_version");
  auto net = std::make_shared<StrainNet<T>>(NetworkConfig::from_json(j.at("config")));
  const auto& table = j.at("params");
  if (table.size() != net->params().items.size())
    throw_config("incompatible checkpoint: parameter table size mismatch");
  for (std::size_t i = 0; i < net->params().items.size(); ++i) {
    auto* p = net->params().items[i];
    const auto& entry = table[i];
    if (entry.at("name").get<std::string>() != p->name)
      throw_config("incompatible checkpoint: parameter name mismatch at " + p->name);
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (shape != p->value.shape())
      throw_config("incompatible checkpoint: shape mismatch for " + p->name);
    auto blob = read_f32_blob(dir / (p->name + ".f32"));
    if (static_cast<std::int64_t>(blob.size()) != p->value.size())
      throw_config("incompatible checkpoint: blob size mismatch for " + p->name);
    for (std::int64_t k = 0; k < p->value.size(); ++k) p->value[k] = static_cast<T>(blob[static_cast<std::size_t>(k)]);
  }
  return net;
}

}  // namespace elasto
