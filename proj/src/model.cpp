#include "ordalign/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ordalign {

using nlohmann::json;

void ModelConfig::validate() const {
  if (enc_channels.empty()) throw ConfigError("model: need at least one encoder stage");
  const std::size_t stages = enc_channels.size();
  if ((in_h >> stages) << stages != in_h || (in_w >> stages) << stages != in_w)
    throw ConfigError("model: input size must be divisible by 2^stages");
  if (feat_h() < 4 || feat_w() < 4) throw ConfigError("model: feature grid below 4x4");
  for (std::size_t c : enc_channels)
    if (c == 0) throw ConfigError("model: zero-width encoder stage");
  if (align_hidden == 0 || head_hidden == 0) throw ConfigError("model: zero-width head");
  if (embed_dim == 0 || embed_dim % 2 != 0)
    throw ConfigError("model: embed_dim must be positive and even");
  if (feat_c() % 2 != 0) throw ConfigError("model: final channel count must be even");
  if (horizon < 1) throw ConfigError("model: horizon must be >= 1");
}

std::vector<double> time_gap_embedding(double gap_years, std::size_t d) {
  if (gap_years < 0.0) throw ValidationError("time gap embedding: negative gap");
  if (d == 0 || d % 2 != 0)
    throw ValidationError("time gap embedding: dimension must be positive and even");
  const double pos = std::round(12.0 * gap_years);
  std::vector<double> pe(d);
  for (std::size_t k = 0; 2 * k < d; ++k) {
    const double freq = std::pow(10000.0, -(2.0 * static_cast<double>(k)) / static_cast<double>(d));
    pe[2 * k] = std::sin(pos * freq);
    pe[2 * k + 1] = std::cos(pos * freq);
  }
  return pe;
}

namespace {

void check_prob_row(const std::vector<double>& y) {
  if (y.size() < 2) throw UsageError("risk readout: probability vector too short");
  double s = 0.0;
  for (double v : y) {
    if (!(v >= 0.0)) throw ValidationError("risk readout: negative probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-4)
    throw ValidationError("risk readout: probabilities sum to " + std::to_string(s));
}

}  // namespace

double risk_m(const std::vector<double>& y, int m) {
  check_prob_row(y);
  const int n = static_cast<int>(y.size()) - 1;
  if (m < 1 || m > n) throw UsageError("risk readout: year " + std::to_string(m) +
                                       " outside 1.." + std::to_string(n));
  double r = 0.0;
  for (int i = 1; i <= m; ++i) r += y[i - 1];
  return r;
}

double expected_time(const std::vector<double>& y) {
  check_prob_row(y);
  double t = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) t += static_cast<double>(i + 1) * y[i];
  return t;
}

template <typename T>
RiskModelT<T>::RiskModelT(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();

  auto push = [&](const std::string& name, Shape shape, double limit) {
    TensorT<T> t = TensorT<T>::zeros(shape);
    if (limit > 0.0) {
      Rng rng = derive_rng(seed, "init:" + name);
      for (std::size_t i = 0; i < t.numel(); ++i)
        t.at(i) = static_cast<T>(rng.uniform(-limit, limit));
    }
    t.set_needs_grad(true);
    params_.push_back({name, std::move(t)});
  };
  auto push_const = [&](const std::string& name, Shape shape, double value) {
    TensorT<T> t = TensorT<T>::full(shape, static_cast<T>(value));
    t.set_needs_grad(true);
    params_.push_back({name, std::move(t)});
  };
  auto he = [](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
  // Softmax read-out layers start smaller so initial logits stay near uniform.
  auto readout = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };

  std::size_t cin = 1;
  for (std::size_t s = 0; s < cfg_.enc_channels.size(); ++s) {
    const std::size_t cout = cfg_.enc_channels[s];
    const std::string tag = "enc" + std::to_string(s);
    push(tag + ".kernel", {cout, cin, 3, 3}, he(cin * 9));
    push_const(tag + ".bias", {cout}, 0.0);
    push_const(tag + ".gamma", {cout}, 1.0);
    push_const(tag + ".beta", {cout}, 0.0);
    bn_states_.emplace_back();
    cin = cout;
  }
  const std::size_t c = cfg_.feat_c();
  push("attn.score_w", {c}, he(c));

  const std::size_t ah = cfg_.align_hidden;
  push("align.kernel1", {ah, 2, 3, 3}, he(2 * 9));
  push_const("align.bias1", {ah}, 0.0);
  push_const("align.gamma", {ah}, 1.0);
  push_const("align.beta", {ah}, 0.0);
  bn_states_.emplace_back();
  push_const("align.kernel2", {2, ah, 3, 3}, 0.0);  // zero field at initialization
  push_const("align.bias2", {2}, 0.0);

  const std::size_t k = static_cast<std::size_t>(cfg_.horizon) + 1;
  push("head.stp_w", {c, k}, readout(c));
  push_const("head.stp_b", {k}, 0.0);

  const std::size_t hh = cfg_.head_hidden, d = cfg_.embed_dim;
  push("fuse.fc_w", {3 * c, hh}, he(3 * c));
  push_const("fuse.fc_b", {hh}, 0.0);
  push("fuse.mu_w", {hh, d}, he(hh));
  push_const("fuse.mu_b", {d}, 0.0);
  push_const("fuse.lv_w", {hh, d}, 0.0);  // variance head starts at the bias value
  push_const("fuse.lv_b", {d}, cfg_.logvar_bias_init);
  push("head.fused_w", {d, k}, readout(d));
  push_const("head.fused_b", {k}, 0.0);
}

template <typename T>
TensorT<T> RiskModelT<T>::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw UsageError("model: unknown parameter \"" + name + "\"");
}

template <typename T>
void RiskModelT<T>::zero_grads() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
TensorT<T> RiskModelT<T>::encode(const TensorT<T>& image, bool train) {
  if (image.rank() != 4 || image.dim(1) != 1 || image.dim(2) != cfg_.in_h ||
      image.dim(3) != cfg_.in_w)
    throw DimensionError("encode: expected [b,1," + std::to_string(cfg_.in_h) + "," +
                         std::to_string(cfg_.in_w) + "], got " + shape_str(image.shape()));
  TensorT<T> f = image;
  for (std::size_t s = 0; s < cfg_.enc_channels.size(); ++s) {
    const std::string tag = "enc" + std::to_string(s);
    f = conv2d(f, p_(tag + ".kernel"), 2, 1);
    f = add_channel_bias(f, p_(tag + ".bias"));
    f = batchnorm2d(f, p_(tag + ".gamma"), p_(tag + ".beta"), bn_states_[s], train);
    f = relu(f);
  }
  return f;
}

template <typename T>
ModelOutputsT<T> RiskModelT<T>::forward(const TensorT<T>& cur, const TensorT<T>& pri,
                                        const std::vector<double>& gap_years, bool train,
                                        Rng* reparam_rng, const ForwardOptions& opt) {
  if (cur.rank() != 4 || pri.rank() != 4)
    throw DimensionError("forward: expected [b,1,h,w] images");
  const std::size_t b = cur.dim(0);
  if (pri.dim(0) != b) throw DimensionError("forward: batch size mismatch between time points");
  if (gap_years.size() != b) throw DimensionError("forward: need one gap per batch row");
  for (double g : gap_years)
    if (g < 0.0) throw ValidationError("forward: negative exam gap");
  if (train && reparam_rng == nullptr)
    throw UsageError("forward: train mode requires a sampling stream");

  ModelOutputsT<T> out;
  out.f_cur = encode(cur, train);
  if (opt.stp_mode) {
    out.f_pri = TensorT<T>::zeros(out.f_cur.shape());
  } else {
    out.f_pri = encode(pri, train);
  }
  const std::size_t c = cfg_.feat_c(), fh = cfg_.feat_h(), fw = cfg_.feat_w();

  const TensorT<T> score_w = p_("attn.score_w");
  auto pool_cur = attention_softmax_pool(out.f_cur, score_w);
  auto pool_pri = attention_softmax_pool(out.f_pri, score_w);
  out.a_cur = pool_cur.a;
  out.a_pri = pool_pri.a;

  const TensorT<T> stp_w = p_("head.stp_w"), stp_b = p_("head.stp_b");
  out.y_cur = softmax(linear(pool_cur.v, stp_w, stp_b));
  out.y_pri = softmax(linear(pool_pri.v, stp_w, stp_b));

  if (opt.disable_align) {
    out.phi = TensorT<T>::zeros({b, 2, fh, fw});
  } else {
    TensorT<T> maps = stack_pair(out.a_cur, out.a_pri);
    TensorT<T> h = conv2d(maps, p_("align.kernel1"), 1, 1);
    h = add_channel_bias(h, p_("align.bias1"));
    h = batchnorm2d(h, p_("align.gamma"), p_("align.beta"), bn_states_.back(), train);
    h = relu(h);
    h = conv2d(h, p_("align.kernel2"), 1, 1);
    out.phi = add_channel_bias(h, p_("align.bias2"));
  }
  out.f_pri_hat = spatial_transform(out.f_pri, out.phi);
  out.f_dif = sub(out.f_cur, out.f_pri_hat);

  auto pool_hat = attention_softmax_pool(out.f_pri_hat, score_w);
  auto pool_dif = attention_softmax_pool(out.f_dif, score_w);
  out.a_dif = pool_dif.a;

  TensorT<T> pe = TensorT<T>::zeros({b, c});
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = time_gap_embedding(gap_years[i], c);
    for (std::size_t j = 0; j < c; ++j) pe.at(i * c + j) = static_cast<T>(row[j]);
  }
  TensorT<T> v_dif = add(pool_dif.v, pe);

  TensorT<T> joint = concat_cols<T>({pool_cur.v, pool_hat.v, v_dif});
  TensorT<T> hdn = relu(linear(joint, p_("fuse.fc_w"), p_("fuse.fc_b")));
  out.mu = linear(hdn, p_("fuse.mu_w"), p_("fuse.mu_b"));
  out.logvar = clamp(linear(hdn, p_("fuse.lv_w"), p_("fuse.lv_b")), static_cast<T>(-10),
                     static_cast<T>(10));
  if (train) {
    const std::size_t d = cfg_.embed_dim;
    TensorT<T> eps = TensorT<T>::zeros({b, d});
    for (std::size_t i = 0; i < b * d; ++i) eps.at(i) = static_cast<T>(reparam_rng->normal());
    TensorT<T> std_half = exp(mul_scalar(out.logvar, static_cast<T>(0.5)));
    out.z = add(out.mu, mul(std_half, eps));
  } else {
    out.z = out.mu;
  }
  out.y_fused = softmax(linear(out.z, p_("head.fused_w"), p_("head.fused_b")));
  return out;
}

namespace {

json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["in_h"] = cfg.in_h;
  j["in_w"] = cfg.in_w;
  j["enc_channels"] = cfg.enc_channels;
  j["align_hidden"] = cfg.align_hidden;
  j["head_hidden"] = cfg.head_hidden;
  j["embed_dim"] = cfg.embed_dim;
  j["horizon"] = cfg.horizon;
  j["logvar_bias_init"] = cfg.logvar_bias_init;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "in_h") cfg.in_h = it.value().get<std::size_t>();
      else if (k == "in_w") cfg.in_w = it.value().get<std::size_t>();
      else if (k == "enc_channels") cfg.enc_channels = it.value().get<std::vector<std::size_t>>();
      else if (k == "align_hidden") cfg.align_hidden = it.value().get<std::size_t>();
      else if (k == "head_hidden") cfg.head_hidden = it.value().get<std::size_t>();
      else if (k == "embed_dim") cfg.embed_dim = it.value().get<std::size_t>();
      else if (k == "horizon") cfg.horizon = it.value().get<int>();
      else if (k == "logvar_bias_init") cfg.logvar_bias_init = it.value().get<double>();
      else throw ConfigError("model config: unknown key \"" + k + "\"");
    } catch (const json::exception& e) {
      throw ConfigError("model config: bad value for \"" + k + "\": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

constexpr char kCkptMagic[4] = {'O', 'C', 'K', 'P'};
constexpr std::uint32_t kCkptVersion = 1;

}  // namespace

std::string model_config_to_json_text(const ModelConfig& cfg) {
  return model_config_to_json(cfg).dump(2);
}

ModelConfig model_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return model_config_from_json(j);
}

void save_checkpoint(const std::string& path, const RiskModelT<float>& model,
                     const CheckpointMeta& meta) {
  json j;
  j["config"] = model_config_to_json(model.config());
  j["meta"] = {{"epoch", meta.epoch}, {"val_c_index", meta.val_c_index}, {"seed", meta.seed}};
  std::vector<std::string> names;
  for (const auto& p : model.params()) names.push_back(p.name);
  j["params"] = names;
  std::vector<bool> inits;
  for (const auto& s : model.bn_states()) inits.push_back(s.initialized);
  j["bn_initialized"] = inits;
  const std::string header = j.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(kCkptMagic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  auto put_u64 = [&](std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
  };
  put_u32(kCkptVersion);
  put_u64(header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : model.params()) write_oten(os, p.value);
  for (const auto& s : model.bn_states()) {
    TensorT<float> m = TensorT<float>::zeros({s.running_mean.size()});
    TensorT<float> v = TensorT<float>::zeros({s.running_var.size()});
    std::copy(s.running_mean.begin(), s.running_mean.end(), m.data().begin());
    std::copy(s.running_var.begin(), s.running_var.end(), v.data().begin());
    write_oten(os, m);
    write_oten(os, v);
  }
  if (!os) throw IoError("checkpoint: write failure on " + path);
}

RiskModelT<float> load_model(const std::string& path, CheckpointMeta* meta_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  auto get_u32 = [&]() {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  };
  auto get_u64 = [&]() {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  };
  const std::uint32_t version = get_u32();
  if (version != kCkptVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t hlen = get_u64();
  if (!is || hlen > (1ull << 24)) throw IoError("checkpoint: implausible header in " + path);
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw IoError("checkpoint: truncated header in " + path);

  json j;
  try {
    j = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const ModelConfig cfg = model_config_from_json(j.at("config"));
  CheckpointMeta meta;
  meta.epoch = j.at("meta").at("epoch").get<int>();
  meta.val_c_index = j.at("meta").at("val_c_index").get<double>();
  meta.seed = j.at("meta").at("seed").get<std::uint64_t>();
  const auto names = j.at("params").get<std::vector<std::string>>();
  const auto inits = j.at("bn_initialized").get<std::vector<bool>>();

  RiskModelT<float> model(cfg, 0);
  auto& params = model.params();
  if (names.size() != params.size())
    throw IoError("checkpoint: parameter count mismatch in " + path);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != names[i])
      throw IoError("checkpoint: parameter order mismatch at " + names[i]);
    OtenAny blob = read_oten(is);
    TensorT<float> t = blob.dtype == 0 ? blob.f32 : blob.f64.template cast<float>();
    if (t.shape() != params[i].value.shape())
      throw IoError("checkpoint: shape mismatch for " + names[i]);
    std::copy(t.data().begin(), t.data().end(), params[i].value.data().begin());
  }
  auto& states = model.bn_states();
  if (inits.size() != states.size())
    throw IoError("checkpoint: normalization state count mismatch in " + path);
  for (std::size_t i = 0; i < states.size(); ++i) {
    OtenAny mb = read_oten(is);
    OtenAny vb = read_oten(is);
    TensorT<float> m = mb.dtype == 0 ? mb.f32 : mb.f64.template cast<float>();
    TensorT<float> v = vb.dtype == 0 ? vb.f32 : vb.f64.template cast<float>();
    states[i].running_mean.assign(m.data().begin(), m.data().end());
    states[i].running_var.assign(v.data().begin(), v.data().end());
    states[i].initialized = inits[i];
  }
  if (meta_out) *meta_out = meta;
  return model;
}

template class RiskModelT<float>;
template class RiskModelT<double>;
template void RiskModelT<float>::copy_weights_from<double>(const RiskModelT<double>&);
template void RiskModelT<double>::copy_weights_from<float>(const RiskModelT<float>&);

}  // namespace ordalign
