#include "ptdr/segdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "ptdr/errors.hpp"

namespace fs = std::filesystem;

namespace ptdr {

const char* split_name(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "pretrain") return Split::pretrain;
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw FormatError("unknown split name '" + name + "'");
}

std::vector<std::size_t> Dataset::indices_of(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == split) out.push_back(i);
  return out;
}

std::vector<std::string> Dataset::ids_of(Split split) const {
  std::vector<std::string> out;
  for (std::size_t i : indices_of(split)) out.push_back(samples[i].id);
  return out;
}

// ---- synthetic generators ---------------------------------------------------

namespace {

struct Canvas {
  std::int64_t size;
  std::vector<float> intensity;
  std::vector<std::int32_t> cls;

  explicit Canvas(std::int64_t s, float bg_intensity)
      : size(s),
        intensity(static_cast<std::size_t>(s * s), bg_intensity),
        cls(static_cast<std::size_t>(s * s), 0) {}

  void paint(std::int64_t x, std::int64_t y, float v, std::int32_t c) {
    const std::size_t i = static_cast<std::size_t>(y * size + x);
    intensity[i] = v;
    cls[i] = c;
  }
};

// Ellipse with low-order radial wobble; rho() < 1 inside.
struct Blob {
  double cx, cy, rx, ry, angle, w1, p1, w2, p2;

  double rho(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = (ca * dx + sa * dy) / rx;
    const double v = (-sa * dx + ca * dy) / ry;
    const double r = std::sqrt(u * u + v * v);
    const double phi = std::atan2(v, u);
    const double wobble = 1.0 + w1 * std::sin(2.0 * phi + p1) + w2 * std::sin(3.0 * phi + p2);
    return r / std::max(0.5, wobble);
  }
};

Blob random_blob(Rng& rng, double cx, double cy, double r_lo, double r_hi, std::int64_t size) {
  Blob b;
  b.cx = cx;
  b.cy = cy;
  b.rx = rng.uniform(r_lo, r_hi) * size;
  b.ry = b.rx * rng.uniform(0.8, 1.25);
  b.angle = rng.uniform(-0.5, 0.5);
  b.w1 = rng.uniform(0.0, 0.08);
  b.p1 = rng.uniform(0.0, 2.0 * M_PI);
  b.w2 = rng.uniform(0.0, 0.05);
  b.p2 = rng.uniform(0.0, 2.0 * M_PI);
  return b;
}

constexpr float kBackground = -0.55f;
constexpr float kBone = 0.0f;
constexpr float kPulp = -0.2f;
constexpr float kDentine = 0.25f;
constexpr float kEnamel = 0.7f;
constexpr float kArtifact = 0.9f;

SegSample render_bitewing(std::int64_t size, std::uint64_t seed, const std::string& id) {
  Rng rng(seed);
  Canvas canvas(size, kBackground);

  // textured bone band across the middle
  const double band_c = rng.uniform(0.4, 0.6) * size;
  const double band_h = rng.uniform(0.14, 0.24) * size;
  const double fx = rng.uniform(1.5, 4.0), fy = rng.uniform(1.0, 3.0);
  const double phx = rng.uniform(0.0, 2.0 * M_PI), phy = rng.uniform(0.0, 2.0 * M_PI);
  for (std::int64_t y = 0; y < size; ++y) {
    if (std::fabs(y + 0.5 - band_c) > band_h) continue;
    for (std::int64_t x = 0; x < size; ++x) {
      const float texture =
          0.08f * static_cast<float>(std::sin(2.0 * M_PI * fx * (x + 0.5) / size + phx)) +
          0.05f * static_cast<float>(std::sin(2.0 * M_PI * fy * (y + 0.5) / size + phy));
      canvas.paint(x, y, kBone + texture, 4);
    }
  }

  // 2-4 teeth, nested enamel ring / dentine body / pulp core
  const int teeth = 2 + static_cast<int>(rng.uniform_int(3));
  for (int i = 0; i < teeth; ++i) {
    const double cx = (i + 0.5) / teeth * size + rng.uniform(-0.05, 0.05) * size;
    const double cy = band_c + rng.uniform(-0.35, 0.35) * band_h;
    Blob blob = random_blob(rng, cx, cy, 0.14, 0.2, size);
    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        const double rho = blob.rho(x + 0.5, y + 0.5);
        if (rho > 1.0) continue;
        if (rho <= 0.35)
          canvas.paint(x, y, kPulp, 3);
        else if (rho <= 0.72)
          canvas.paint(x, y, kDentine, 2);
        else
          canvas.paint(x, y, kEnamel, 1);
      }
    }
  }

  // sparse bright artifacts
  const int artifacts = static_cast<int>(rng.uniform_int(3));
  for (int i = 0; i < artifacts; ++i) {
    const double ax = rng.uniform(0.05, 0.95) * size;
    const double ay = rng.uniform(0.05, 0.95) * size;
    const double ar = rng.uniform(0.8, 1.6);
    for (std::int64_t y = std::max<std::int64_t>(0, static_cast<std::int64_t>(ay - ar - 1));
         y <= std::min(size - 1, static_cast<std::int64_t>(ay + ar + 1)); ++y)
      for (std::int64_t x = std::max<std::int64_t>(0, static_cast<std::int64_t>(ax - ar - 1));
           x <= std::min(size - 1, static_cast<std::int64_t>(ax + ar + 1)); ++x) {
        const double dx = x + 0.5 - ax, dy = y + 0.5 - ay;
        if (dx * dx + dy * dy <= ar * ar) canvas.paint(x, y, kArtifact, 5);
      }
  }

  // illumination gradient + sensor noise, then clamp
  const double gx = rng.uniform(-0.2, 0.2), gy = rng.uniform(-0.2, 0.2);
  SegSample s;
  s.id = id;
  s.image = Tensor::zeros({1, size, size});
  s.mask = IntTensor(Shape{size, size}, std::move(canvas.cls));
  float* img = s.image.mutable_data().data();
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * size + x);
      double v = canvas.intensity[i];
      v += gx * ((x + 0.5) / size - 0.5) + gy * ((y + 0.5) / size - 0.5);
      v += 0.05 * rng.normal();
      img[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return s;
}

constexpr float kLungBackground = -0.9f;
constexpr float kBody = 0.1f;
constexpr float kLungField = -0.6f;
constexpr float kOpacity = -0.1f;

SegSample render_lunglike(std::int64_t size, std::uint64_t seed, const std::string& id) {
  Rng rng(seed);
  Canvas canvas(size, kLungBackground);

  Blob body = random_blob(rng, 0.5 * size, rng.uniform(0.48, 0.55) * size, 0.4, 0.46, size);
  std::vector<Blob> lungs;
  for (int side : {-1, 1}) {
    const double cx = 0.5 * size + side * rng.uniform(0.17, 0.23) * size;
    const double cy = body.cy + rng.uniform(-0.05, 0.05) * size;
    lungs.push_back(random_blob(rng, cx, cy, 0.14, 0.19, size));
  }
  const int opacities = 1 + static_cast<int>(rng.uniform_int(3));
  std::vector<Blob> spots;
  for (int i = 0; i < opacities; ++i) {
    const Blob& host = lungs[static_cast<std::size_t>(rng.uniform_int(2))];
    const double cx = host.cx + rng.uniform(-0.4, 0.4) * host.rx;
    const double cy = host.cy + rng.uniform(-0.4, 0.4) * host.ry;
    spots.push_back(random_blob(rng, cx, cy, 0.03, 0.07, size));
  }

  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      if (body.rho(px, py) > 1.0) continue;
      float v = kBody;
      std::int32_t c = 3;
      for (const Blob& lung : lungs) {
        if (lung.rho(px, py) <= 1.0) {
          v = kLungField;
          c = 1;
          break;
        }
      }
      if (c == 1) {
        for (const Blob& spot : spots) {
          if (spot.rho(px, py) <= 1.0) {
            v = kOpacity;
            c = 2;
            break;
          }
        }
      }
      canvas.paint(x, y, v, c);
    }
  }

  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  SegSample s;
  s.id = id;
  s.image = Tensor::zeros({1, size, size});
  s.mask = IntTensor(Shape{size, size}, std::move(canvas.cls));
  float* img = s.image.mutable_data().data();
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * size + x);
      double v = canvas.intensity[i];
      v += gx * ((x + 0.5) / size - 0.5) + gy * ((y + 0.5) / size - 0.5);
      v += 0.05 * rng.normal();
      img[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return s;
}

}  // namespace

std::vector<SegSample> generate_synthetic(int n, int size, int num_classes, std::uint64_t seed,
                                          SyntheticKind kind) {
  const int needed = kind == SyntheticKind::bitewing ? 6 : 4;
  if (num_classes < needed)
    throw ConfigError("generator needs at least " + std::to_string(needed) + " classes");
  if (size < 16) throw ConfigError("generator needs size >= 16");
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(i));
    const std::string id = "s" + std::to_string(i);
    out.push_back(kind == SyntheticKind::bitewing ? render_bitewing(size, s, id)
                                                  : render_lunglike(size, s, id));
  }
  return out;
}

Dataset make_synthetic_dataset(int n_total, int size, SyntheticKind kind, std::uint64_t seed) {
  if (n_total < 3) throw ConfigError("dataset needs at least 3 samples");
  const int num_classes = kind == SyntheticKind::bitewing ? 6 : 4;
  const int labeled = std::min(100, n_total);
  const int pool = n_total - labeled;
  int n_train = std::max(1, labeled * 10 / 100);
  int n_val = std::max(1, labeled * 5 / 100);
  if (n_train + n_val >= labeled) {
    n_train = std::max(1, labeled / 3);
    n_val = std::max(1, (labeled - n_train) / 2);
  }

  Dataset ds;
  ds.num_classes = num_classes;
  auto pool_samples = generate_synthetic(pool, size, num_classes, seed, kind);
  auto labeled_samples =
      generate_synthetic(labeled, size, num_classes, mix_seed(seed, 0xa11ce), kind);
  for (int i = 0; i < pool; ++i) {
    pool_samples[static_cast<std::size_t>(i)].id = "pre_" + std::to_string(i);
    ds.samples.push_back(std::move(pool_samples[static_cast<std::size_t>(i)]));
    ds.splits.push_back(Split::pretrain);
    ds.provenance.emplace_back();
  }
  for (int i = 0; i < labeled; ++i) {
    auto& s = labeled_samples[static_cast<std::size_t>(i)];
    s.id = "lab_" + std::to_string(i);
    ds.samples.push_back(std::move(s));
    ds.splits.push_back(i < n_train ? Split::train
                                    : (i < n_train + n_val ? Split::val : Split::test));
    ds.provenance.emplace_back();
  }
  return ds;
}

// ---- affine augmentation ----------------------------------------------------

namespace {

struct Mat2x3 {
  double a, b, c, d, tx, ty;  // [a b; c d] plus translation
};

Mat2x3 invert(const Mat2x3& m) {
  const double det = m.a * m.d - m.b * m.c;
  const double ia = m.d / det, ib = -m.b / det, ic = -m.c / det, id = m.a / det;
  return {ia, ib, ic, id, -(ia * m.tx + ib * m.ty), -(ic * m.tx + id * m.ty)};
}

}  // namespace

SegSample affine_apply(const SegSample& s, const AffineParams& p) {
  const std::int64_t H = s.image.dim(1), W = s.image.dim(2);
  const double cx = W / 2.0, cy = H / 2.0;
  const double rot = p.rotate_deg * M_PI / 180.0;
  const double shear = p.shear_deg * M_PI / 180.0;
  // forward map about the center: translate . rotate . shear-x . scale
  const double ca = std::cos(rot), sa = std::sin(rot);
  const double sh = std::tan(shear);
  Mat2x3 m;
  m.a = p.scale * ca;
  m.b = p.scale * (ca * sh - sa);
  m.c = p.scale * sa;
  m.d = p.scale * (sa * sh + ca);
  m.tx = cx + p.translate_x * W - (m.a * cx + m.b * cy);
  m.ty = cy + p.translate_y * H - (m.c * cx + m.d * cy);

  const Mat2x3 inv = invert(m);

  SegSample out;
  out.id = s.id;
  out.image = Tensor::zeros(s.image.shape());
  const float* src = s.image.data().data();
  float* dst = out.image.mutable_data().data();
  const bool with_mask = s.has_mask();
  if (with_mask) out.mask = IntTensor::zeros(s.mask.shape);

  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      const double ox = x + 0.5, oy = y + 0.5;
      const double ix = inv.a * ox + inv.b * oy + inv.tx;
      const double iy = inv.c * ox + inv.d * oy + inv.ty;

      // bilinear on pixel centers, fill -1 outside
      const double fx = ix - 0.5, fy = iy - 0.5;
      const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
      const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
      const double wx = fx - x0, wy = fy - y0;
      double acc = 0.0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dxi = 0; dxi < 2; ++dxi) {
          const std::int64_t sx = x0 + dxi, sy = y0 + dy;
          const double w = (dxi ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy);
          const double v = (sx < 0 || sx >= W || sy < 0 || sy >= H)
                               ? -1.0
                               : static_cast<double>(src[sy * W + sx]);
          acc += w * v;
        }
      }
      dst[y * W + x] = static_cast<float>(acc);

      if (with_mask) {
        const std::int64_t nx = static_cast<std::int64_t>(std::floor(ix));
        const std::int64_t ny = static_cast<std::int64_t>(std::floor(iy));
        out.mask.data[static_cast<std::size_t>(y * W + x)] =
            (nx < 0 || nx >= W || ny < 0 || ny >= H)
                ? 0
                : s.mask.data[static_cast<std::size_t>(ny * W + nx)];
      }
    }
  }
  return out;
}

SegSample random_affine(const SegSample& s, Rng& rng) {
  AffineParams p;
  p.rotate_deg = rng.uniform(-180.0, 180.0);
  p.shear_deg = rng.uniform(-5.0, 5.0);
  p.scale = rng.uniform(0.9, 1.1);
  p.translate_x = rng.uniform(-0.05, 0.05);
  p.translate_y = rng.uniform(-0.05, 0.05);
  return affine_apply(s, p);
}

// ---- normalization ----------------------------------------------------------

Tensor normalize_u8(const Tensor& raw) {
  Tensor out = Tensor::zeros(raw.shape());
  const float* p = raw.data().data();
  float* q = out.mutable_data().data();
  for (std::int64_t i = 0; i < raw.size(); ++i) {
    if (p[i] < 0.0f || p[i] > 255.0f)
      throw ContractError("normalize: value " + std::to_string(p[i]) + " outside [0, 255]");
    q[i] = p[i] / 127.5f - 1.0f;
  }
  return out;
}

std::vector<std::uint8_t> quantize_u8(const Tensor& image) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(image.size()));
  const float* p = image.data().data();
  for (std::int64_t i = 0; i < image.size(); ++i) {
    const long v = std::lround((static_cast<double>(p[i]) + 1.0) * 127.5);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
  }
  return out;
}

// ---- pgm + manifest io --------------------------------------------------------

void write_pgm(const std::string& path, std::int64_t width, std::int64_t height,
               const std::vector<std::uint8_t>& bytes) {
  if (static_cast<std::int64_t>(bytes.size()) != width * height)
    throw ContractError("write_pgm: byte count does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_pgm(const std::string& path, std::int64_t& width,
                                   std::int64_t& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw FormatError(path + ": not a binary PGM");
  long long w = 0, h = 0, maxval = 0;
  if (!(in >> w >> h >> maxval)) throw FormatError(path + ": malformed PGM header");
  if (w <= 0 || h <= 0) throw FormatError(path + ": bad PGM dimensions");
  if (maxval != 255) throw FormatError(path + ": unsupported maxval " + std::to_string(maxval));
  in.get();  // single whitespace after maxval
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w * h));
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw FormatError(path + ": truncated PGM payload");
  width = w;
  height = h;
  return bytes;
}

void save_dataset(const std::string& dir, const Dataset& dataset) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  nlohmann::json manifest;
  manifest["num_classes"] = dataset.num_classes;
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const SegSample& s = dataset.samples[i];
    const std::int64_t H = s.image.dim(1), W = s.image.dim(2);
    const std::string img_rel = "images/" + s.id + ".pgm";
    write_pgm((fs::path(dir) / img_rel).string(), W, H, quantize_u8(s.image));
    nlohmann::json e;
    e["id"] = s.id;
    e["image"] = img_rel;
    if (s.has_mask()) {
      const std::string mask_rel = "masks/" + s.id + ".pgm";
      std::vector<std::uint8_t> mb(s.mask.data.size());
      for (std::size_t j = 0; j < mb.size(); ++j)
        mb[j] = static_cast<std::uint8_t>(s.mask.data[j]);
      write_pgm((fs::path(dir) / mask_rel).string(), W, H, mb);
      e["mask"] = mask_rel;
    } else {
      e["mask"] = nullptr;
    }
    e["split"] = split_name(dataset.splits[i]);
    if (!dataset.provenance[i].empty()) e["provenance"] = dataset.provenance[i];
    entries.push_back(std::move(e));
  }
  manifest["samples"] = std::move(entries);
  std::ofstream out(fs::path(dir) / "index.json");
  if (!out) throw FormatError("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "index.json";
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("missing manifest " + manifest_path.string());
  nlohmann::json manifest = nlohmann::json::parse(in, nullptr, false);
  if (manifest.is_discarded()) throw FormatError("manifest is not valid JSON");
  Dataset ds;
  try {
    ds.num_classes = manifest.at("num_classes").get<int>();
    for (const auto& e : manifest.at("samples")) {
      SegSample s;
      s.id = e.at("id").get<std::string>();
      std::int64_t w = 0, h = 0;
      auto img = read_pgm((fs::path(dir) / e.at("image").get<std::string>()).string(), w, h);
      Tensor raw = Tensor::zeros({1, h, w});
      float* p = raw.mutable_data().data();
      for (std::size_t j = 0; j < img.size(); ++j) p[j] = static_cast<float>(img[j]);
      s.image = normalize_u8(raw);
      if (!e.at("mask").is_null()) {
        std::int64_t mw = 0, mh = 0;
        auto mb = read_pgm((fs::path(dir) / e.at("mask").get<std::string>()).string(), mw, mh);
        if (mw != w || mh != h) throw FormatError(s.id + ": mask and image sizes differ");
        s.mask = IntTensor::zeros({h, w});
        for (std::size_t j = 0; j < mb.size(); ++j) {
          if (mb[j] >= ds.num_classes)
            throw FormatError(s.id + ": mask class " + std::to_string(int(mb[j])) +
                              " >= num_classes " + std::to_string(ds.num_classes));
          s.mask.data[j] = mb[j];
        }
      }
      ds.splits.push_back(split_from_name(e.at("split").get<std::string>()));
      ds.provenance.push_back(e.contains("provenance") ? e.at("provenance").get<std::string>()
                                                       : std::string());
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest field error: ") + ex.what());
  }
  return ds;
}

}  // namespace ptdr
