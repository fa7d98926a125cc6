#include "mtfuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "mtfuse/errors.hpp"
#include "mtfuse/joints_cnn.hpp"
#include "mtfuse/serialize.hpp"

namespace mtfuse {

namespace fs = std::filesystem;

SyntheticRecipe SyntheticRecipe::for_config(const ModelConfig& config, double noise) {
  SyntheticRecipe r;
  r.noise = noise;
  r.frame_count = config.frame_count;
  r.view_height = config.view_height;
  r.view_width = config.view_width;
  r.joint_count = config.joint_count;
  r.num_classes = config.num_classes;
  return r;
}

void SyntheticRecipe::validate() const {
  std::array<bool, kNumModalities> covered{};
  for (const auto& s : tasks) {
    covered[index(s.modality)] = true;
    if (s.channel > 2) throw ConfigError("recipe: signal channel must be 0, 1 or 2");
  }
  for (auto m : kAllModalities) {
    if (!covered[index(m)]) {
      throw ConfigError("recipe: no task is designated to modality " + std::string(modality_name(m)));
    }
  }
  if (!(noise >= 0.0)) throw ConfigError("recipe: noise must be non-negative");
  if (frame_count == 0 || view_height == 0 || view_width == 0 || joint_count == 0) {
    throw ConfigError("recipe: empty sample geometry");
  }
}

double class_code(std::size_t k, std::size_t classes, std::size_t t, std::size_t frames) {
  const double level = classes > 1 ? (2.0 * static_cast<double>(k) / static_cast<double>(classes - 1) - 1.0) * 0.5 : 0.0;
  const double phase = static_cast<double>(t) / static_cast<double>(frames) +
                       static_cast<double>(k) / static_cast<double>(classes);
  return level + 0.5 * std::cos(2.0 * std::numbers::pi * phase);
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) { return splitmix(splitmix(seed) ^ (stream + 1)); }

// Radially symmetric bump, so flips leave the planted pattern in place.
double bump(std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double s = 0.25 * static_cast<double>(std::max(h, w));
  const double dy = static_cast<double>(y) - cy;
  const double dx = static_cast<double>(x) - cx;
  return 0.5 + 0.5 * std::exp(-(dy * dy + dx * dx) / (2.0 * s * s));
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Tensor image_sequence(const SyntheticRecipe& r, Modality m, const std::array<std::size_t, kNumTasks>& labels,
                      std::mt19937_64& rng) {
  const std::size_t T = r.frame_count, H = r.view_height, W = r.view_width;
  std::vector<double> v(T * 3 * H * W, 0.5);
  for (auto task : kAllTasks) {
    const auto& sig = r.tasks[index(task)];
    if (sig.modality != m) continue;
    const std::size_t K = r.num_classes[index(task)];
    for (std::size_t t = 0; t < T; ++t) {
      const double code = sig.amplitude * class_code(labels[index(task)], K, t, T);
      double* plane = v.data() + (t * 3 + sig.channel) * H * W;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) plane[y * W + x] += code * bump(y, x, H, W);
    }
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& p : v) p = clamp01(r.noise > 0.0 ? p + r.noise * noise(rng) : p);
  return Tensor({T, 3, H, W}, std::move(v));
}

Tensor joint_sequence(const SyntheticRecipe& r, const std::array<std::size_t, kNumTasks>& labels, std::mt19937_64& rng) {
  const std::size_t T = r.frame_count, J = r.joint_count;
  std::vector<double> v(T * J * 3);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < J; ++j) {
      const double jd = static_cast<double>(j);
      double* p = v.data() + (t * J + j) * 3;
      p[0] = 0.3 + 0.4 * (jd + 0.5) / static_cast<double>(J) +
             0.02 * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(T) + jd);
      p[1] = 0.3 + 0.4 * std::fmod(jd * 0.6180339887, 1.0);
      p[2] = 0.7;
    }
  }
  for (auto task : kAllTasks) {
    const auto& sig = r.tasks[index(task)];
    if (sig.modality != Modality::kJoints) continue;
    const std::size_t K = r.num_classes[index(task)];
    for (std::size_t t = 0; t < T; ++t) {
      const double code = sig.amplitude * class_code(labels[index(task)], K, t, T);
      for (std::size_t j = 0; j < J; ++j) v[(t * J + j) * 3 + sig.channel] += code;
    }
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& p : v) p = clamp01(r.noise > 0.0 ? p + r.noise * noise(rng) : p);
  return Tensor({T, J, 3}, std::move(v));
}

}  // namespace

std::vector<SampleBundle> generate_synthetic(const SyntheticRecipe& recipe, std::size_t count, std::uint64_t seed) {
  recipe.validate();
  if (count == 0) throw ArgumentError("generate_synthetic: count must be positive");
  std::array<std::vector<std::size_t>, kNumTasks> labels;
  for (auto task : kAllTasks) {
    auto& l = labels[index(task)];
    l.resize(count);
    for (std::size_t i = 0; i < count; ++i) l[i] = i % recipe.num_classes[index(task)];
    std::mt19937_64 rng(mix(seed, 0xA000 + index(task)));
    std::shuffle(l.begin(), l.end(), rng);
  }
  std::vector<SampleBundle> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SampleBundle b;
    char id[32];
    std::snprintf(id, sizeof id, "syn%06zu", i);
    b.id = id;
    for (auto task : kAllTasks) b.labels[index(task)] = labels[index(task)][i];
    std::mt19937_64 rng(mix(seed, i));
    for (std::size_t v = 0; v < 3; ++v) b.exterior[v] = image_sequence(recipe, Modality::kExterior, b.labels, rng);
    for (std::size_t v = 0; v < 3; ++v) b.interior[v] = image_sequence(recipe, Modality::kInterior, b.labels, rng);
    b.joints = joint_sequence(recipe, b.labels, rng);
    out.push_back(std::move(b));
  }
  return out;
}

FlipDraw draw_flips(std::uint64_t seed) {
  const std::uint64_t r = splitmix(seed);
  return {(r & 1) != 0, (r & 2) != 0};
}

namespace {

Tensor flip_frames(const Tensor& frames, FlipDraw f) {
  const auto& s = frames.shape();
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  const auto src = frames.data();
  std::vector<double> v(src.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sy = f.vertical ? H - 1 - y : y;
        const std::size_t sx = f.horizontal ? W - 1 - x : x;
        v[(p * H + y) * W + x] = src[(p * H + sy) * W + sx];
      }
  return Tensor(s, std::move(v));
}

}  // namespace

SampleBundle apply_flips(const SampleBundle& b, FlipDraw flips) {
  SampleBundle out;
  out.id = b.id;
  out.labels = b.labels;
  for (std::size_t v = 0; v < 3; ++v) {
    out.exterior[v] = flip_frames(b.exterior[v], flips);
    out.interior[v] = flip_frames(b.interior[v], flips);
  }
  std::vector<double> j(b.joints.data().begin(), b.joints.data().end());
  for (std::size_t i = 0; i < j.size(); i += 3) {
    if (flips.horizontal) j[i] = 1.0 - j[i];
    if (flips.vertical) j[i + 1] = 1.0 - j[i + 1];
  }
  out.joints = Tensor(b.joints.shape(), std::move(j));
  return out;
}

SampleBundle augment(const SampleBundle& b, std::uint64_t seed) { return apply_flips(b, draw_flips(seed)); }

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitFractions& f) {
  const std::array<double, 3> frac{f.train, f.test, f.val};
  if (std::abs(frac[0] + frac[1] + frac[2] - 1.0) > 1e-9 || frac[0] < 0 || frac[1] < 0 || frac[2] < 0) {
    throw ArgumentError("split fractions must be non-negative and sum to 1");
  }
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = frac[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(sizes[i]);
    used += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; used < n; ++i, ++used) ++sizes[order[i % 3]];
  return sizes;
}

std::uint64_t sample_hash(std::string_view id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

DatasetSplits split_samples(std::vector<SampleBundle> samples, const SplitFractions& f) {
  DatasetSplits out;
  const auto sizes = split_sizes(samples.size(), f);
  std::sort(samples.begin(), samples.end(), [](const SampleBundle& a, const SampleBundle& b) {
    const auto ha = sample_hash(a.id), hb = sample_hash(b.id);
    return ha != hb ? ha < hb : a.id < b.id;
  });
  for (const auto& s : samples)
    for (auto t : kAllTasks) out.inferred_classes[index(t)] = std::max(out.inferred_classes[index(t)], s.labels[index(t)] + 1);
  std::size_t i = 0;
  for (; i < sizes[0]; ++i) out.train.push_back(std::move(samples[i]));
  for (; i < sizes[0] + sizes[1]; ++i) out.test.push_back(std::move(samples[i]));
  for (; i < samples.size(); ++i) out.val.push_back(std::move(samples[i]));
  return out;
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  auto token = [&]() {
    std::string tok;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok += c;
    }
    return tok;
  };
  if (token() != "P6") throw LoadError(path.string() + ": bad PPM header (expected P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw LoadError(path.string() + ": malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw LoadError(path.string() + ": unsupported PPM geometry");
  std::vector<unsigned char> raw(w * h * 3);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw LoadError(path.string() + ": truncated PPM payload");
  }
  std::vector<double> v(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        v[(c * h + y) * w + x] = static_cast<double>(raw[(y * w + x) * 3 + c]) / static_cast<double>(maxval);
  return Tensor({3, h, w}, std::move(v));
}

Tensor resize_frame(const Tensor& frame, std::size_t height, std::size_t width) {
  if (frame.rank() != 3) throw DimensionError("resize_frame: expected [C x H x W], got " + shape_str(frame.shape()));
  const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  if (H == height && W == width) return frame.detach();
  const auto src = frame.data();
  std::vector<double> v(C * height * width);
  auto coord = [](std::size_t o, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& w1) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    w1 = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double wy;
    coord(y, H, height, y0, y1, wy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double wx;
      coord(x, W, width, x0, x1, wx);
      for (std::size_t c = 0; c < C; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) { return src[(c * H + yy) * W + xx]; };
        const double top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx;
        const double bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx;
        v[(c * height + y) * width + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return Tensor({C, height, width}, std::move(v));
}

namespace {

struct MissingFile {
  std::string what;
};

std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03zu", t);
  return buf;
}

Tensor load_frame(const fs::path& dir, std::size_t t) {
  const fs::path base = dir / frame_name(t);
  Tensor f;
  if (fs::exists(base.string() + ".t3tn")) {
    f = load_tensor(base.string() + ".t3tn");
    if (f.rank() != 3 || f.dim(0) != 3) {
      throw LoadError(base.string() + ".t3tn: expected a [3 x H x W] frame, got " + shape_str(f.shape()));
    }
  } else if (fs::exists(base.string() + ".ppm")) {
    f = read_ppm(base.string() + ".ppm");
  } else {
    throw MissingFile{base.string() + ".{t3tn,ppm}"};
  }
  return f;
}

bool needs_rescale(const Tensor& f) {
  return std::any_of(f.data().begin(), f.data().end(), [](double v) { return v > 1.0; });
}

Tensor normalize(Tensor f) {
  if (!needs_rescale(f)) return f;
  std::vector<double> v(f.data().begin(), f.data().end());
  for (auto& x : v) x = std::clamp(x / 255.0, 0.0, 1.0);
  return Tensor(f.shape(), std::move(v));
}

Tensor stack_frames(const std::vector<Tensor>& frames) {
  const auto& s = frames.front().shape();
  std::vector<double> v;
  v.reserve(frames.size() * frames.front().numel());
  for (const auto& f : frames) v.insert(v.end(), f.data().begin(), f.data().end());
  return Tensor({frames.size(), s[0], s[1], s[2]}, std::move(v));
}

Tensor load_view(const fs::path& dir, const ModelConfig& cfg) {
  std::vector<Tensor> frames;
  for (std::size_t t = 0; t < cfg.frame_count; ++t) {
    frames.push_back(resize_frame(normalize(load_frame(dir, t)), cfg.view_height, cfg.view_width));
  }
  return stack_frames(frames);
}

using Box = std::array<std::size_t, 4>;  // x0 y0 x1 y1, end-exclusive

std::array<Box, 2> load_boxes(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingFile{path.string()};
  std::array<Box, 2> boxes{};
  for (auto& b : boxes) {
    std::string line;
    if (!std::getline(is, line)) throw LoadError(path.string() + ": expected two box lines");
    std::istringstream ls(line);
    for (auto& v : b)
      if (!(ls >> v)) throw LoadError(path.string() + ": a box needs four integers");
  }
  return boxes;
}

Tensor crop(const Tensor& frame, const Box& b, const fs::path& where) {
  const std::size_t H = frame.dim(1), W = frame.dim(2);
  if (b[0] >= b[2] || b[1] >= b[3] || b[2] > W || b[3] > H) {
    throw LoadError(where.string() + ": box outside the inside-view frame");
  }
  const std::size_t h = b[3] - b[1], w = b[2] - b[0];
  std::vector<double> v(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) v[(c * h + y) * w + x] = frame[(c * H + y + b[1]) * W + x + b[0]];
  return Tensor({3, h, w}, std::move(v));
}

std::array<std::size_t, kNumTasks> load_labels(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingFile{path.string()};
  std::array<std::size_t, kNumTasks> labels{};
  for (auto& l : labels) {
    long long v = 0;
    if (!(is >> v) || v < 0) throw LoadError(path.string() + ": expected four non-negative integers");
    l = static_cast<std::size_t>(v);
  }
  return labels;
}

SampleBundle load_one(const fs::path& dir, const ModelConfig& cfg) {
  SampleBundle b;
  b.id = dir.filename().string();
  b.labels = load_labels(dir / "labels.txt");
  if (!fs::exists(dir / "joints.t3jt")) throw MissingFile{(dir / "joints.t3jt").string()};
  b.joints = load_joints(dir / "joints.t3jt");
  if (b.joints.dim(0) != cfg.frame_count) {
    throw LoadError((dir / "joints.t3jt").string() + ": " + std::to_string(b.joints.dim(0)) + " frames, expected " +
                    std::to_string(cfg.frame_count));
  }
  for (std::size_t v = 0; v < 3; ++v) b.exterior[v] = load_view(dir / std::string(view_name(kExteriorViews[v])), cfg);
  b.interior[0] = load_view(dir / "inside", cfg);
  if (fs::is_directory(dir / "face") && fs::is_directory(dir / "body")) {
    b.interior[1] = load_view(dir / "face", cfg);
    b.interior[2] = load_view(dir / "body", cfg);
    return b;
  }
  const auto boxes = load_boxes(dir / "boxes.txt");
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<Tensor> frames;
    for (std::size_t t = 0; t < cfg.frame_count; ++t) {
      const Tensor full = normalize(load_frame(dir / "inside", t));
      frames.push_back(resize_frame(crop(full, boxes[k], dir / "boxes.txt"), cfg.view_height, cfg.view_width));
    }
    b.interior[1 + k] = stack_frames(frames);
  }
  return b;
}

}  // namespace

DatasetSplits load_sample_dir(const fs::path& root, const SplitFractions& f, const ModelConfig& config) {
  if (!fs::is_directory(root)) throw LoadError("not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<SampleBundle> samples;
  std::vector<std::string> warnings;
  for (const auto& d : dirs) {
    try {
      samples.push_back(load_one(d, config));
    } catch (const MissingFile& m) {
      warnings.push_back("skipped " + d.filename().string() + ": missing " + m.what);
    }
  }
  DatasetSplits out = split_samples(std::move(samples), f);
  out.warnings = warnings.size();
  out.warning_messages = std::move(warnings);
  return out;
}

namespace {

void write_view(const fs::path& dir, const Tensor& frames) {
  fs::create_directories(dir);
  const auto& s = frames.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  for (std::size_t t = 0; t < s[0]; ++t) {
    std::vector<double> v(frames.data().begin() + static_cast<std::ptrdiff_t>(t * per),
                          frames.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * per));
    save_tensor(dir / (frame_name(t) + ".t3tn"), Tensor({s[1], s[2], s[3]}, std::move(v)));
  }
}

}  // namespace

void write_sample_dir(const fs::path& root, const SampleBundle& b) {
  const fs::path dir = root / b.id;
  fs::create_directories(dir);
  for (std::size_t v = 0; v < 3; ++v) {
    write_view(dir / std::string(view_name(kExteriorViews[v])), b.exterior[v]);
    write_view(dir / std::string(view_name(kInteriorViews[v])), b.interior[v]);
  }
  const std::size_t H = b.interior[0].dim(2), W = b.interior[0].dim(3);
  std::ofstream boxes(dir / "boxes.txt");
  boxes << "0 0 " << W << ' ' << H << "\n0 0 " << W << ' ' << H << '\n';
  save_joints(dir / "joints.t3jt", b.joints);
  std::ofstream labels(dir / "labels.txt");
  for (std::size_t i = 0; i < kNumTasks; ++i) labels << (i ? " " : "") << b.labels[i];
  labels << '\n';
}

Batch make_batch(std::span<const SampleBundle> samples) {
  if (samples.empty()) throw ArgumentError("make_batch: no samples");
  Batch out;
  out.size = samples.size();
  auto stack = [&](auto pick) {
    const Tensor& first = pick(samples[0]);
    Shape shape{samples.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    std::vector<double> v;
    v.reserve(numel_of(shape));
    for (const auto& s : samples) {
      const Tensor& t = pick(s);
      if (t.shape() != first.shape()) {
        throw DimensionError("make_batch: sample " + s.id + " has shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(first.shape()));
      }
      v.insert(v.end(), t.data().begin(), t.data().end());
    }
    return Tensor(std::move(shape), std::move(v));
  };
  for (std::size_t v = 0; v < 3; ++v) {
    out.exterior[v] = stack([v](const SampleBundle& s) -> const Tensor& { return s.exterior[v]; });
    out.interior[v] = stack([v](const SampleBundle& s) -> const Tensor& { return s.interior[v]; });
  }
  out.joints = stack([](const SampleBundle& s) -> const Tensor& { return s.joints; });
  for (auto t : kAllTasks) {
    for (const auto& s : samples) out.labels[index(t)].push_back(s.labels[index(t)]);
  }
  return out;
}

}  // namespace mtfuse
