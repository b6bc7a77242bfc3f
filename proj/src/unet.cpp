#include "ptdr/unet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "ptdr/errors.hpp"

namespace ptdr {

bool UnetConfig::attention_at(int level) const {
  for (int l : attention_levels)
    if (l == level) return true;
  return false;
}

std::string UnetConfig::to_json() const {
  nlohmann::json j;
  j["in_channels"] = in_channels;
  j["base_width"] = base_width;
  j["channel_mults"] = channel_mults;
  j["num_res_blocks"] = num_res_blocks;
  j["attention_levels"] = attention_levels;
  j["time_embed_dim"] = time_embed_dim;
  j["out_channels_noise"] = out_channels_noise;
  j["num_classes"] = num_classes;
  return j.dump();
}

UnetConfig UnetConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("unet config: invalid JSON");
  UnetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.channel_mults = j.at("channel_mults").get<std::vector<int>>();
  c.num_res_blocks = j.at("num_res_blocks").get<int>();
  c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.out_channels_noise = j.at("out_channels_noise").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  return c;
}

template <typename S>
UnetModelT<S> UnetModelT<S>::clone() const {
  UnetModelT<S> copy;
  copy.config = config;
  copy.head_mode = head_mode;
  for (const auto& [name, tensor] : params) {
    auto t = tensor.clone();
    t.set_param(true);
    copy.params.emplace(name, std::move(t));
  }
  return copy;
}

template <typename S>
TensorT<S> timestep_embedding(int t, int dim, int T) {
  if (dim <= 0 || dim % 2 != 0)
    throw ConfigError("timestep embedding dim must be positive even, got " + std::to_string(dim));
  if (t < 1 || t > T)
    throw IndexError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  TensorT<S> out = TensorT<S>::zeros({dim});
  S* p = out.mutable_data().data();
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double w = std::pow(10000.0, -2.0 * k / dim);
    p[k] = static_cast<S>(std::sin(t * w));
    p[half + k] = static_cast<S>(std::cos(t * w));
  }
  return out;
}

namespace {

// largest group count <= 8 that divides the channel count
int norm_groups(int channels) {
  int g = std::min(8, channels);
  while (channels % g != 0) --g;
  return g;
}

template <typename S>
struct Builder {
  std::map<std::string, TensorT<S>>& params;
  Rng& rng;

  void conv(const std::string& prefix, int cin, int cout, int ksize) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * ksize * ksize);
    params.emplace(prefix + ".weight",
                   TensorT<S>::uniform({cout, cin, ksize, ksize}, static_cast<S>(-bound),
                                       static_cast<S>(bound), rng)
                       .set_param());
    params.emplace(prefix + ".bias", TensorT<S>::uniform({cout}, static_cast<S>(-bound),
                                                         static_cast<S>(bound), rng)
                                         .set_param());
  }

  void dense(const std::string& prefix, int cin, int cout) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
    params.emplace(prefix + ".weight",
                   TensorT<S>::uniform({cout, cin}, static_cast<S>(-bound), static_cast<S>(bound),
                                       rng)
                       .set_param());
    params.emplace(prefix + ".bias", TensorT<S>::uniform({cout}, static_cast<S>(-bound),
                                                         static_cast<S>(bound), rng)
                                         .set_param());
  }

  void norm(const std::string& prefix, int channels) {
    params.emplace(prefix + ".gamma", TensorT<S>::full({channels}, S(1)).set_param());
    params.emplace(prefix + ".beta", TensorT<S>::zeros({channels}).set_param());
  }

  void res_block(const std::string& prefix, int cin, int cout, int temb_dim) {
    norm(prefix + ".gn1", cin);
    conv(prefix + ".conv1", cin, cout, 3);
    dense(prefix + ".temb", temb_dim, cout);
    norm(prefix + ".gn2", cout);
    conv(prefix + ".conv2", cout, cout, 3);
    if (cin != cout) conv(prefix + ".skip", cin, cout, 1);
  }

  void attention(const std::string& prefix, int channels) {
    norm(prefix + ".norm", channels);
    conv(prefix + ".q", channels, channels, 1);
    conv(prefix + ".k", channels, channels, 1);
    conv(prefix + ".v", channels, channels, 1);
    conv(prefix + ".proj", channels, channels, 1);
  }
};

template <typename S>
const TensorT<S>& P(const UnetModelT<S>& m, const std::string& name) {
  auto it = m.params.find(name);
  if (it == m.params.end()) throw ContractError("missing parameter " + name);
  return it->second;
}

template <typename S>
TensorT<S> run_res_block(const UnetModelT<S>& m, const std::string& prefix, const TensorT<S>& x,
                         const TensorT<S>& temb) {
  const int cin = static_cast<int>(x.dim(1));
  TensorT<S> h = group_norm(x, norm_groups(cin), P(m, prefix + ".gn1.gamma"),
                            P(m, prefix + ".gn1.beta"));
  h = silu(h);
  h = conv2d(h, P(m, prefix + ".conv1.weight"), P(m, prefix + ".conv1.bias"), 1, 1);
  TensorT<S> emb = linear(silu(temb), P(m, prefix + ".temb.weight"), P(m, prefix + ".temb.bias"));
  h = add_channel_bias(h, emb);
  const int cout = static_cast<int>(h.dim(1));
  h = group_norm(h, norm_groups(cout), P(m, prefix + ".gn2.gamma"), P(m, prefix + ".gn2.beta"));
  h = silu(h);
  h = conv2d(h, P(m, prefix + ".conv2.weight"), P(m, prefix + ".conv2.bias"), 1, 1);
  if (cin != cout)
    return add(h, conv2d(x, P(m, prefix + ".skip.weight"), P(m, prefix + ".skip.bias"), 1, 0));
  return add(h, x);
}

template <typename S>
TensorT<S> run_attention(const UnetModelT<S>& m, const std::string& prefix, const TensorT<S>& x) {
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TensorT<S> h = group_norm(x, norm_groups(static_cast<int>(C)), P(m, prefix + ".norm.gamma"),
                            P(m, prefix + ".norm.beta"));
  TensorT<S> q = conv2d(h, P(m, prefix + ".q.weight"), P(m, prefix + ".q.bias"), 1, 0);
  TensorT<S> k = conv2d(h, P(m, prefix + ".k.weight"), P(m, prefix + ".k.bias"), 1, 0);
  TensorT<S> v = conv2d(h, P(m, prefix + ".v.weight"), P(m, prefix + ".v.bias"), 1, 0);
  const Shape flat{N, C, H * W};
  q = scale(reshape(q, flat), static_cast<S>(1.0 / std::sqrt(static_cast<double>(C))));
  k = reshape(k, flat);
  v = reshape(v, flat);
  TensorT<S> attn = softmax(bmm(transpose_last2(q), k), 2);          // [N, HW, HW]
  TensorT<S> out = bmm(v, transpose_last2(attn));                    // [N, C, HW]
  out = reshape(out, {N, C, H, W});
  out = conv2d(out, P(m, prefix + ".proj.weight"), P(m, prefix + ".proj.bias"), 1, 0);
  return add(out, x);
}

}  // namespace

template <typename S>
UnetModelT<S> build_unet(const UnetConfig& config, Rng& rng) {
  if (config.base_width < 1 || config.levels() < 1 || config.num_res_blocks < 1)
    throw ConfigError("unet config: widths, levels and block counts must be positive");
  if (config.time_embed_dim < 1 || config.base_width % 2 != 0)
    throw ConfigError("unet config: base_width must be even for the sinusoidal embedding");
  UnetModelT<S> m;
  m.config = config;
  m.head_mode = HeadMode::noise;
  Builder<S> b{m.params, rng};
  const int ted = config.time_embed_dim;
  const int L = config.levels();
  const int B = config.num_res_blocks;

  b.dense("time_mlp.l1", config.base_width, ted);
  b.dense("time_mlp.l2", ted, ted);
  b.conv("in_conv", config.in_channels, config.width(0), 3);

  for (int l = 0; l < L; ++l) {
    const int cin_level = config.width(std::max(0, l - 1));
    for (int blk = 0; blk < B; ++blk) {
      const int cin = blk == 0 ? (l == 0 ? config.width(0) : cin_level) : config.width(l);
      const std::string prefix = "enc" + std::to_string(l) + ".res" + std::to_string(blk);
      b.res_block(prefix, cin, config.width(l), ted);
      if (config.attention_at(l))
        b.attention("enc" + std::to_string(l) + ".attn" + std::to_string(blk), config.width(l));
    }
  }

  const int wmid = config.width(L - 1);
  b.res_block("mid.res0", wmid, wmid, ted);
  b.attention("mid.attn", wmid);
  b.res_block("mid.res1", wmid, wmid, ted);

  // Decoder consumes one skip per block: B per level plus the level
  // transition activation (conv_in output at the top level).
  std::vector<int> skip_widths;
  skip_widths.push_back(config.width(0));  // conv_in
  for (int l = 0; l < L; ++l) {
    for (int blk = 0; blk < B; ++blk) skip_widths.push_back(config.width(l));
    if (l < L - 1) skip_widths.push_back(config.width(l));  // downsample output
  }
  for (int l = L - 1; l >= 0; --l) {
    for (int blk = 0; blk < B + 1; ++blk) {
      const int skip_c = skip_widths.back();
      skip_widths.pop_back();
      const int hin = blk == 0 ? (l == L - 1 ? wmid : config.width(l + 1)) : config.width(l);
      const std::string prefix = "dec" + std::to_string(l) + ".res" + std::to_string(blk);
      b.res_block(prefix, hin + skip_c, config.width(l), ted);
      if (config.attention_at(l))
        b.attention("dec" + std::to_string(l) + ".attn" + std::to_string(blk), config.width(l));
    }
  }

  b.norm("out_norm", config.width(0));
  b.conv("head.noise", config.width(0), config.out_channels_noise, 1);
  return m;
}

std::vector<std::string> capture_block_ids(const UnetConfig& config) {
  std::vector<std::string> ids;
  for (int l = 0; l < config.levels(); ++l) ids.push_back("enc" + std::to_string(l));
  ids.push_back("mid");
  for (int l = config.levels() - 1; l >= 0; --l) ids.push_back("dec" + std::to_string(l));
  return ids;
}

namespace {

template <typename S>
using CaptureSink = std::function<void(const std::string&, const TensorT<S>&)>;

template <typename S>
TensorT<S> forward_impl(const UnetModelT<S>& model, const TensorT<S>& x, int t,
                        const CaptureSink<S>* sink) {
  const UnetConfig& cfg = model.config;
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels)
    throw DimensionError("unet forward: expected input [N," + std::to_string(cfg.in_channels) +
                         ",H,W], got " + shape_str(x.shape()));
  const int f = cfg.downsample_factor();
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0)
    throw DimensionError("unet forward: spatial size " + shape_str(x.shape()) +
                         " not divisible by " + std::to_string(f));
  if (t < 1) throw IndexError("unet forward: timestep must be >= 1");

  const std::int64_t N = x.dim(0);
  const int L = cfg.levels();
  const int B = cfg.num_res_blocks;

  // shared embedding row, replicated across the batch
  TensorT<S> emb1 = timestep_embedding<S>(t, cfg.base_width, std::max(t, 1));
  TensorT<S> embN = TensorT<S>::zeros({N, static_cast<std::int64_t>(cfg.base_width)});
  for (std::int64_t n = 0; n < N; ++n)
    std::memcpy(embN.mutable_data().data() + n * cfg.base_width, emb1.data().data(),
                sizeof(S) * static_cast<std::size_t>(cfg.base_width));
  TensorT<S> temb = linear(embN, P(model, "time_mlp.l1.weight"), P(model, "time_mlp.l1.bias"));
  temb = linear(silu(temb), P(model, "time_mlp.l2.weight"), P(model, "time_mlp.l2.bias"));

  TensorT<S> h = conv2d(x, P(model, "in_conv.weight"), P(model, "in_conv.bias"), 1, 1);
  std::vector<TensorT<S>> skips{h};
  for (int l = 0; l < L; ++l) {
    for (int blk = 0; blk < B; ++blk) {
      h = run_res_block(model, "enc" + std::to_string(l) + ".res" + std::to_string(blk), h, temb);
      if (cfg.attention_at(l))
        h = run_attention(model, "enc" + std::to_string(l) + ".attn" + std::to_string(blk), h);
      skips.push_back(h);
    }
    if (sink) (*sink)("enc" + std::to_string(l), h);
    if (l < L - 1) {
      h = avgpool2x(h);
      skips.push_back(h);
    }
  }

  h = run_res_block(model, "mid.res0", h, temb);
  h = run_attention(model, "mid.attn", h);
  h = run_res_block(model, "mid.res1", h, temb);
  if (sink) (*sink)("mid", h);

  for (int l = L - 1; l >= 0; --l) {
    for (int blk = 0; blk < B + 1; ++blk) {
      TensorT<S> skip = skips.back();
      skips.pop_back();
      h = run_res_block(model, "dec" + std::to_string(l) + ".res" + std::to_string(blk),
                        concat(h, skip, 1), temb);
      if (cfg.attention_at(l))
        h = run_attention(model, "dec" + std::to_string(l) + ".attn" + std::to_string(blk), h);
    }
    if (sink) (*sink)("dec" + std::to_string(l), h);
    if (l > 0) h = nearest_upsample2x(h);
  }
  if (!skips.empty()) throw ContractError("unet forward: skip bookkeeping out of balance");

  h = group_norm(h, norm_groups(cfg.width(0)), P(model, "out_norm.gamma"),
                 P(model, "out_norm.beta"));
  h = silu(h);
  const std::string head = model.head_mode == HeadMode::noise ? "head.noise" : "head.seg";
  return conv2d(h, P(model, head + ".weight"), P(model, head + ".bias"), 1, 0);
}

}  // namespace

template <typename S>
TensorT<S> forward(const UnetModelT<S>& model, const TensorT<S>& x, int t) {
  return forward_impl<S>(model, x, t, nullptr);
}

template <typename S>
TensorT<S> forward_with_captures(const UnetModelT<S>& model, const TensorT<S>& x, int t,
                                 const std::vector<std::string>& block_ids,
                                 std::vector<TensorT<S>>& captured) {
  const auto valid = capture_block_ids(model.config);
  for (const auto& id : block_ids) {
    if (std::find(valid.begin(), valid.end(), id) == valid.end())
      throw ConfigError("unknown activation block '" + id + "'");
  }
  std::map<std::string, TensorT<S>> seen;
  CaptureSink<S> sink = [&](const std::string& id, const TensorT<S>& h) {
    if (std::find(block_ids.begin(), block_ids.end(), id) != block_ids.end())
      seen.emplace(id, h);
  };
  TensorT<S> out = forward_impl<S>(model, x, t, &sink);
  captured.clear();
  for (const auto& id : block_ids) captured.push_back(seen.at(id));
  return out;
}

template <typename S>
void set_head(UnetModelT<S>& model, HeadMode mode) {
  if (mode == HeadMode::segmentation && !model.has_seg_head()) {
    const std::int64_t c = model.config.width(0);
    const std::int64_t classes = model.config.num_classes;
    model.params.emplace("head.seg.weight",
                         TensorT<S>::zeros({classes, c, 1, 1}).set_param());
    model.params.emplace("head.seg.bias", TensorT<S>::zeros({classes}).set_param());
  }
  model.head_mode = mode;
}

template <typename S>
std::uint64_t trunk_checksum(const UnetModelT<S>& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, tensor] : model.params) {
    if (name.starts_with("head.")) continue;
    mix_bytes(name.data(), name.size());
    mix_bytes(tensor.data().data(), tensor.data().size_bytes());
  }
  return h;
}

template <typename S>
NoiseFn<S> noise_predictor(const UnetModelT<S>& model) {
  if (model.head_mode != HeadMode::noise)
    throw ModeError("noise prediction requested while the segmentation head is active");
  return [&model](const TensorT<S>& xt, int t) { return forward(model, xt, t); };
}

template <typename S>
TensorT<S> ddpm_loss(const UnetModelT<S>& model, const TensorT<S>& x0,
                     const DiffusionSchedule& sched, Rng& rng) {
  return ddpm_loss(noise_predictor(model), x0, sched, rng);
}

template <typename S>
TensorT<S> segment_logits(const UnetModelT<S>& model, const TensorT<S>& x, int t) {
  if (model.head_mode != HeadMode::segmentation)
    throw ModeError("segmentation requested while the noise head is active");
  return forward(model, x, t);
}

// ---- checkpoint io ----------------------------------------------------------

namespace {

void put_u16(std::ostream& out, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t get_u16(std::istream& in) {
  unsigned char b[2];
  if (!in.read(reinterpret_cast<char*>(b), 2)) throw FormatError("checkpoint: truncated file");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const UnetModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write("PTDR", 4);
  put_u32(out, 1);
  out.put(static_cast<char>(model.head_mode));
  const std::string cfg = model.config.to_json();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_u32(out, static_cast<std::uint32_t>(model.params.size()));
  for (const auto& [name, tensor] : model.params) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(0);  // dtype f32
    out.put(static_cast<char>(tensor.rank()));
    for (std::int64_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.data().size_bytes()));
  }
  if (!out) throw FormatError("checkpoint: write to " + path + " failed");
}

UnetModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PTDR", 4) != 0)
    throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = get_u32(in);
  if (version != 1) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const int head = in.get();
  if (head != 0 && head != 1) throw FormatError("checkpoint: invalid head mode byte");
  const std::uint32_t cfg_len = get_u32(in);
  std::string cfg_text(cfg_len, '\0');
  if (!in.read(cfg_text.data(), cfg_len)) throw FormatError("checkpoint: truncated config");

  UnetModel model;
  model.config = UnetConfig::from_json(cfg_text);
  model.head_mode = static_cast<HeadMode>(head);
  const std::uint32_t count = get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = get_u16(in);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw FormatError("checkpoint: truncated tensor name");
    const int dtype = in.get();
    if (dtype != 0) throw FormatError("checkpoint: unsupported dtype " + std::to_string(dtype));
    const int rank = in.get();
    if (rank < 0 || rank > 8) throw FormatError("checkpoint: bad tensor rank");
    Shape shape(static_cast<std::size_t>(rank));
    for (int r = 0; r < rank; ++r) shape[static_cast<std::size_t>(r)] = get_u32(in);
    const std::int64_t n = numel(shape);
    std::vector<float> values(static_cast<std::size_t>(n));
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(float))))
      throw FormatError("checkpoint: truncated payload for " + name);
    model.params.emplace(name, Tensor::from_data(std::move(shape), std::move(values)).set_param());
  }
  return model;
}

// ---- explicit instantiation -------------------------------------------------

#define PTDR_INSTANTIATE_UNET(S)                                                              \
  template struct UnetModelT<S>;                                                              \
  template TensorT<S> timestep_embedding<S>(int, int, int);                                   \
  template UnetModelT<S> build_unet<S>(const UnetConfig&, Rng&);                              \
  template TensorT<S> forward<S>(const UnetModelT<S>&, const TensorT<S>&, int);               \
  template TensorT<S> forward_with_captures<S>(const UnetModelT<S>&, const TensorT<S>&, int,  \
                                               const std::vector<std::string>&,               \
                                               std::vector<TensorT<S>>&);                     \
  template void set_head<S>(UnetModelT<S>&, HeadMode);                                        \
  template std::uint64_t trunk_checksum<S>(const UnetModelT<S>&);                             \
  template NoiseFn<S> noise_predictor<S>(const UnetModelT<S>&);                               \
  template TensorT<S> ddpm_loss<S>(const UnetModelT<S>&, const TensorT<S>&,                   \
                                   const DiffusionSchedule&, Rng&);                           \
  template TensorT<S> segment_logits<S>(const UnetModelT<S>&, const TensorT<S>&, int);

PTDR_INSTANTIATE_UNET(float)
PTDR_INSTANTIATE_UNET(double)

#undef PTDR_INSTANTIATE_UNET

}  // namespace ptdr
