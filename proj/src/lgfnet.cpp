#include "lgf/lgfnet.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "lgf/error.hpp"

namespace lgf::net {

using ad::Var;
using nlohmann::json;

void ArchConfig::validate() const {
  if (channels.size() != 5) {
    throw ConfigError("arch: channels must list 5 stages C_1..C_5, got " + std::to_string(channels.size()));
  }
  if (channels[0] == 0) throw ConfigError("arch: C_1 must be positive");
  for (std::size_t i = 1; i < channels.size(); ++i) {
    if (channels[i] != 2 * channels[i - 1]) {
      throw ConfigError("arch: channels must double stage to stage (C_" + std::to_string(i + 1) + " = " +
                        std::to_string(channels[i]) + ", expected " + std::to_string(2 * channels[i - 1]) + ")");
    }
  }
  if (window == 0 || window % 16 != 0) {
    throw ConfigError("arch: window L must be a positive multiple of 16 (four (2,1) poolings), got " +
                      std::to_string(window));
  }
  if (stride == 0 || stride > window) {
    throw ConfigError("arch: stride must lie in [1, L], got " + std::to_string(stride));
  }
  if (d == 0 || d_y == 0) throw ConfigError("arch: d and d_y must be positive");
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("arch: heads (" + std::to_string(heads) + ") must divide d (" + std::to_string(d) + ")");
  }
  if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) {
    throw ConfigError("arch: attention dropout must lie in [0, 1)");
  }
}

namespace {

Tensor uniform(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

ConvBlock make_block(std::size_t cin, std::size_t cout, Rng& rng) {
  ConvBlock b;
  b.weight = ad::parameter(uniform({cout, cin, 3, 3}, std::sqrt(6.0 / static_cast<double>(cin * 9)), rng));
  b.gamma = ad::parameter(Tensor({cout}, 1.0));
  b.beta = ad::parameter(Tensor({cout}, 0.0));
  b.bn = ad::BatchNormState(cout);
  return b;
}

Stage make_stage(std::size_t cin, std::size_t cout, Rng& rng) {
  Stage s;
  s.first = make_block(cin, cout, rng);
  s.second = make_block(cout, cout, rng);
  return s;
}

void push_stage(std::vector<Var>& out, const Stage& s) {
  for (const ConvBlock* b : {&s.first, &s.second}) {
    out.push_back(b->weight);
    out.push_back(b->gamma);
    out.push_back(b->beta);
  }
}

}  // namespace

LGFNetModel::LGFNetModel(ArchConfig arch, std::uint64_t seed) : arch_(std::move(arch)) {
  arch_.validate();
  Rng rng(seed);
  const auto& c = arch_.channels;
  encoder_.push_back(make_stage(1, c[0], rng));
  for (std::size_t i = 1; i < 5; ++i) encoder_.push_back(make_stage(c[i - 1], c[i], rng));

  const double proj = 1.0 / std::sqrt(static_cast<double>(arch_.d));
  w_q_ = ad::parameter(uniform({arch_.d, arch_.d}, proj, rng));
  w_k_ = ad::parameter(uniform({arch_.d, arch_.d}, proj, rng));
  w_v_ = ad::parameter(uniform({arch_.d, arch_.d}, proj, rng));
  w_o_ = ad::parameter(uniform({arch_.d, arch_.d}, proj, rng));

  // decoder_[i] takes Up(C_{i+2}) ++ E_{i+1} = 3 C_{i+1} channels down to C_{i+1}
  for (std::size_t i = 0; i < 4; ++i) decoder_.push_back(make_stage(c[i + 1] + c[i], c[i], rng));

  const std::size_t head_fan = c[0] * arch_.d;
  head_weight_ = ad::parameter(uniform({arch_.d_y, c[0], 1, arch_.d}, 1.0 / std::sqrt(static_cast<double>(head_fan)), rng));
  head_bias_ = ad::parameter(Tensor({arch_.d_y}, 0.0));

  input_stats = data::NormStats::identity(static_cast<Eigen::Index>(arch_.d));
  target_stats = data::NormStats::identity(static_cast<Eigen::Index>(arch_.d_y));
}

Var LGFNetModel::block(ConvBlock& b, const Var& x, bool training) {
  return ad::relu(ad::batchnorm2d(ad::conv2d(x, b.weight, Var(), 1, 1), b.gamma, b.beta, b.bn, training));
}

Var LGFNetModel::stage(Stage& s, const Var& x, bool training) {
  return block(s.second, block(s.first, x, training), training);
}

Encoded LGFNetModel::spl_forward(const Var& input, const ForwardOptions& options) {
  const Shape expected{input.shape().empty() ? 0 : input.shape()[0], 1, arch_.window, arch_.d};
  if (input.shape().size() != 4 || input.shape() != expected) {
    throw ShapeError("spl: input must be (b, 1, " + std::to_string(arch_.window) + ", " + std::to_string(arch_.d) +
                     "), got " + to_string(input.shape()));
  }
  if (!input.value().all_finite()) throw NumericError("spl: input contains non-finite values");
  Encoded out;
  Var x = input;
  for (std::size_t i = 0; i < 4; ++i) {
    x = stage(encoder_[i], x, options.training);
    out.skips.push_back(x);
    x = ad::maxpool_2x1(x);
  }
  out.bottleneck = stage(encoder_[4], x, options.training);
  return out;
}

Var LGFNetModel::rrl_forward(const Var& e, const ForwardOptions& options) {
  if (!arch_.use_attention) return e;
  const auto& s = e.shape();
  if (s.size() != 4 || s[3] != arch_.d) throw ShapeError("rrl: expected (b, C, L_k, d), got " + to_string(s));
  const std::size_t b = s[0], tokens = s[1] * s[2], d = arch_.d, h = arch_.heads, dk = d / h;

  Var t = ad::add_positional_encoding(ad::reshape(e, {b, tokens, d}));
  auto split = [&](const Var& w) { return ad::permute(ad::reshape(ad::linear(t, w, Var()), {b, tokens, h, dk}), {0, 2, 1, 3}); };
  const Var q = split(w_q_), k = split(w_k_), v = split(w_v_);

  Var attn = ad::softmax_lastdim(ad::scale(ad::batched_matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dk))));
  last_attention_ = attn.value();
  attn = ad::dropout(attn, arch_.attention_dropout, options.dropout_seed, options.training);

  Var heads = ad::reshape(ad::permute(ad::batched_matmul(attn, v, false), {0, 2, 1, 3}), {b, tokens, d});
  return ad::add(ad::reshape(ad::linear(heads, w_o_, Var()), s), e);
}

Var LGFNetModel::fsl_forward(const Var& bottleneck, const std::vector<Var>& skips, const ForwardOptions& options) {
  if (skips.size() != 4) throw ShapeError("fsl: expected 4 skips, got " + std::to_string(skips.size()));
  Var x = bottleneck;
  for (std::size_t i = 4; i-- > 0;) {
    Var up = ad::upsample_bilinear_2x1(x);
    const auto& us = up.shape();
    const auto& ks = skips[i].shape();
    if (ks.size() != 4 || ks[0] != us[0] || ks[1] != arch_.channels[i] || ks[2] != us[2] || ks[3] != us[3]) {
      throw ShapeError("fsl: skip at stage " + std::to_string(i + 1) + " has shape " + to_string(ks) +
                       ", upsampled decoder input is " + to_string(us));
    }
    x = stage(decoder_[i], ad::concat_channels(up, skips[i]), options.training);
  }
  // (b, d_y, L, 1) -> (b, 1, L, d_y)
  return ad::permute(ad::conv2d(x, head_weight_, head_bias_, 0, 0), {0, 3, 2, 1});
}

Var LGFNetModel::forward(const Var& input, const ForwardOptions& options) {
  Encoded enc = spl_forward(input, options);
  return fsl_forward(rrl_forward(enc.bottleneck, options), enc.skips, options);
}

std::vector<Var> LGFNetModel::spl_parameters() const {
  std::vector<Var> out;
  for (const auto& s : encoder_) push_stage(out, s);
  return out;
}

std::vector<Var> LGFNetModel::rrl_parameters() const { return {w_q_, w_k_, w_v_, w_o_}; }

std::vector<Var> LGFNetModel::fsl_parameters() const {
  std::vector<Var> out;
  for (const auto& s : decoder_) push_stage(out, s);
  out.push_back(head_weight_);
  out.push_back(head_bias_);
  return out;
}

std::vector<Var> LGFNetModel::parameters() const {
  std::vector<Var> out = spl_parameters();
  for (auto& v : rrl_parameters()) out.push_back(v);
  for (auto& v : fsl_parameters()) out.push_back(v);
  return out;
}

std::size_t LGFNetModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value().size();
  return n;
}

void LGFNetModel::zero_head() {
  head_weight_.mutable_value().fill(0.0);
  head_bias_.mutable_value().fill(0.0);
}

Var fgdl_loss(const Var& prediction, const Tensor& target) { return ad::mse_loss(prediction, target); }

data::WindowBatch make_windows(const ArchConfig& arch, const Eigen::MatrixXd& table) {
  if (static_cast<std::size_t>(table.rows()) < arch.window) {
    throw InputError("sequence of " + std::to_string(table.rows()) + " rows is shorter than the window L = " +
                     std::to_string(arch.window) + "; pad the sequence or reduce L");
  }
  return arch.use_sliding_window ? data::sliding_windows(table, arch.window, arch.stride)
                                 : data::chunk_windows(table, arch.window);
}

Fusion fuse_inference(LGFNetModel& model, const Eigen::MatrixXd& states, const Eigen::MatrixXd& low) {
  const auto& arch = model.arch();
  if (states.rows() != low.rows()) throw ShapeError("fuse: states and y_L row counts differ");
  if (static_cast<std::size_t>(states.cols() + low.cols()) != arch.d) {
    throw ShapeError("fuse: [states, y_L] has " + std::to_string(states.cols() + low.cols()) +
                     " columns, model expects d = " + std::to_string(arch.d));
  }
  if (static_cast<std::size_t>(low.cols()) != arch.d_y) {
    throw ShapeError("fuse: y_L has " + std::to_string(low.cols()) + " columns, model predicts d_y = " +
                     std::to_string(arch.d_y));
  }
  Eigen::MatrixXd table(states.rows(), arch.d);
  table << states, low;
  const data::WindowBatch batch = make_windows(arch, model.input_stats.normalize(table));

  constexpr std::size_t kChunk = 64;
  const std::size_t per = arch.window * arch.d_y;
  Tensor outputs({batch.count(), 1, arch.window, arch.d_y});
  for (std::size_t first = 0; first < batch.count(); first += kChunk) {
    std::vector<std::size_t> which;
    for (std::size_t k = first; k < std::min(batch.count(), first + kChunk); ++k) which.push_back(k);
    const Var y = model.forward(ad::constant(batch.gather(which)), ForwardOptions{});
    std::copy(y.value().data().begin(), y.value().data().end(), outputs.data().begin() + static_cast<std::ptrdiff_t>(first * per));
  }

  Fusion f;
  f.delta = model.target_stats.denormalize(data::reconstruct_from_windows(batch, outputs));
  f.fused = low + f.delta;
  return f;
}

// ---- checkpoint -----------------------------------------------------------

namespace {

constexpr const char* kFormat = "lgfnet-checkpoint-1";

json tensor_json(const Tensor& t) { return json{{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from(const json& j, const Shape& expected, const std::string& what) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> values = j.at("data").get<std::vector<double>>();
  if (shape != expected || values.size() != shape_size(shape)) {
    throw InputError("checkpoint: tensor '" + what + "' has shape " + to_string(shape) + ", architecture expects " +
                     to_string(expected));
  }
  return Tensor(std::move(shape), std::move(values));
}

json row_json(const Eigen::RowVectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::RowVectorXd row_from(const json& j, Eigen::Index n, const std::string& what) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<Eigen::Index>(v.size()) != n) throw InputError("checkpoint: '" + what + "' has wrong length");
  return Eigen::Map<const Eigen::RowVectorXd>(v.data(), n);
}

std::vector<ConvBlock*> blocks(LGFNetModel& m) {
  std::vector<ConvBlock*> out;
  for (auto* group : {&m.encoder(), &m.decoder()})
    for (auto& s : *group) {
      out.push_back(&s.first);
      out.push_back(&s.second);
    }
  return out;
}

}  // namespace

void save_checkpoint(const LGFNetModel& model, const std::filesystem::path& path) {
  const auto& a = model.arch();
  json j;
  j["format"] = kFormat;
  j["arch"] = {{"channels", a.channels},
               {"window", a.window},
               {"stride", a.stride},
               {"heads", a.heads},
               {"attention_dropout", a.attention_dropout},
               {"use_sliding_window", a.use_sliding_window},
               {"use_attention", a.use_attention},
               {"d", a.d},
               {"d_y", a.d_y}};
  j["state_names"] = model.state_names;
  j["response_names"] = model.response_names;
  j["input_stats"] = {{"mean", row_json(model.input_stats.mean)}, {"scale", row_json(model.input_stats.scale)}};
  j["target_stats"] = {{"mean", row_json(model.target_stats.mean)}, {"scale", row_json(model.target_stats.scale)}};
  json params = json::array();
  for (const auto& p : model.parameters()) params.push_back(tensor_json(p.value()));
  j["parameters"] = std::move(params);
  json bn = json::array();
  for (const auto* group : {&model.encoder(), &model.decoder()})
    for (const auto& s : *group)
      for (const ConvBlock* b : {&s.first, &s.second}) bn.push_back({{"mean", b->bn.running_mean}, {"var", b->bn.running_var}});
  j["batchnorm"] = std::move(bn);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("checkpoint: cannot write " + path.string());
  out << j.dump(1) << '\n';
  if (!out) throw InputError("checkpoint: write failed for " + path.string());
}

LGFNetModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("checkpoint: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError("checkpoint: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  try {
    if (j.at("format") != kFormat) throw InputError("checkpoint: unknown format in " + path.string());
    const json& ja = j.at("arch");
    ArchConfig a;
    a.channels = ja.at("channels").get<std::vector<std::size_t>>();
    a.window = ja.at("window");
    a.stride = ja.at("stride");
    a.heads = ja.at("heads");
    a.attention_dropout = ja.at("attention_dropout");
    a.use_sliding_window = ja.at("use_sliding_window");
    a.use_attention = ja.at("use_attention");
    a.d = ja.at("d");
    a.d_y = ja.at("d_y");

    LGFNetModel m(a, 0);
    m.state_names = j.at("state_names").get<std::vector<std::string>>();
    m.response_names = j.at("response_names").get<std::vector<std::string>>();
    const auto d = static_cast<Eigen::Index>(a.d), dy = static_cast<Eigen::Index>(a.d_y);
    m.input_stats.mean = row_from(j.at("input_stats").at("mean"), d, "input_stats.mean");
    m.input_stats.scale = row_from(j.at("input_stats").at("scale"), d, "input_stats.scale");
    m.target_stats.mean = row_from(j.at("target_stats").at("mean"), dy, "target_stats.mean");
    m.target_stats.scale = row_from(j.at("target_stats").at("scale"), dy, "target_stats.scale");

    auto params = m.parameters();
    const json& jp = j.at("parameters");
    if (jp.size() != params.size()) throw InputError("checkpoint: parameter count does not match the architecture");
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].mutable_value() = tensor_from(jp[i], params[i].shape(), "parameter " + std::to_string(i));
    }
    auto bl = blocks(m);
    const json& jb = j.at("batchnorm");
    if (jb.size() != bl.size()) throw InputError("checkpoint: batchnorm count does not match the architecture");
    for (std::size_t i = 0; i < bl.size(); ++i) {
      auto mean = jb[i].at("mean").get<std::vector<double>>();
      auto var = jb[i].at("var").get<std::vector<double>>();
      if (mean.size() != bl[i]->bn.running_mean.size() || var.size() != mean.size()) {
        throw InputError("checkpoint: batchnorm " + std::to_string(i) + " has wrong width");
      }
      bl[i]->bn.running_mean = std::move(mean);
      bl[i]->bn.running_var = std::move(var);
    }
    return m;
  } catch (const json::exception& e) {
    throw InputError("checkpoint: malformed " + path.string() + " (" + e.what() + ")");
  }
}

}  // namespace lgf::net
