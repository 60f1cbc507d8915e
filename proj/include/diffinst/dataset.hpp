#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "diffinst/boxes.hpp"
#include "diffinst/common.hpp"
#include "diffinst/image_io.hpp"
#include "diffinst/rng.hpp"
#include "diffinst/tensor.hpp"

namespace diffinst {

// Synthetic instance-segmentation scenes: colored shapes on a noisy dark
// background. Classes: 0 rectangle, 1 ellipse, 2 triangle. Masks cover the
// visible region only (front-most instance owns occluded pixels) and boxes
// are tight bounds of the masks.

constexpr int kMinVisiblePixels = 16;

struct InstanceRecord {
  int class_id = 0;
  BoxCxcywh box;
  std::vector<uint8_t> mask;  // H*W, row-major, 0/1
};

struct SceneSample {
  TensorF image;  // 3 x H x W
  std::vector<InstanceRecord> instances;
  int scene_id = 0;
};

struct DatasetConfig {
  int height = 64;
  int width = 64;
  int num_classes = 3;
  int min_instances = 1;
  int max_instances = 5;
  bool allow_occlusion = true;
  uint64_t seed = 1;

  void validate() const {
    check(height % 32 == 0 && width % 32 == 0, "DatasetConfig: H and W must be multiples of 32");
    check(num_classes >= 1 && num_classes <= 3, "DatasetConfig: 1..3 shape classes supported");
    check(min_instances >= 0 && max_instances >= min_instances, "DatasetConfig: bad instance range");
  }
};

inline int mask_count(const std::vector<uint8_t>& mask) {
  int n = 0;
  for (uint8_t v : mask) n += v;
  return n;
}

// Tight bound in normalized cxcywh; pixel [xmin..xmax] spans (xmax-xmin+1)/W.
inline BoxCxcywh tight_box_from_mask(const std::vector<uint8_t>& mask, int h, int w) {
  int xmin = w, xmax = -1, ymin = h, ymax = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask[y * w + x]) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
  check(xmax >= 0, "tight_box_from_mask: empty mask");
  BoxCxcywh b;
  b.cx = (xmin + xmax + 1) / 2.0 / w;
  b.cy = (ymin + ymax + 1) / 2.0 / h;
  b.w = static_cast<double>(xmax - xmin + 1) / w;
  b.h = static_cast<double>(ymax - ymin + 1) / h;
  return b;
}

namespace detail {

inline std::vector<uint8_t> raster_rectangle(Rng& rng, int h, int w) {
  int bw = rng.uniform_int(8, std::min(28, w / 2));
  int bh = rng.uniform_int(8, std::min(28, h / 2));
  int x0 = rng.uniform_int(1, w - bw - 2);
  int y0 = rng.uniform_int(1, h - bh - 2);
  std::vector<uint8_t> m(static_cast<size_t>(h) * w, 0);
  for (int y = y0; y < y0 + bh; ++y)
    for (int x = x0; x < x0 + bw; ++x) m[y * w + x] = 1;
  return m;
}

inline std::vector<uint8_t> raster_ellipse(Rng& rng, int h, int w) {
  double a = rng.uniform(5.0, 14.0);
  double b = rng.uniform(5.0, 14.0);
  double cx = rng.uniform(a + 1, w - a - 1);
  double cy = rng.uniform(b + 1, h - b - 1);
  std::vector<uint8_t> m(static_cast<size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dx = (x + 0.5 - cx) / a, dy = (y + 0.5 - cy) / b;
      if (dx * dx + dy * dy <= 1.0) m[y * w + x] = 1;
    }
  return m;
}

inline std::vector<uint8_t> raster_triangle(Rng& rng, int h, int w) {
  // three vertices around a sampled center; resample until non-sliver
  for (int attempt = 0; attempt < 50; ++attempt) {
    double cx = rng.uniform(14.0, w - 14.0);
    double cy = rng.uniform(14.0, h - 14.0);
    double vx[3], vy[3];
    for (int i = 0; i < 3; ++i) {
      double ang = rng.uniform(0.0, 2.0 * M_PI);
      double rad = rng.uniform(6.0, 13.0);
      vx[i] = cx + rad * std::cos(ang);
      vy[i] = cy + rad * std::sin(ang);
    }
    double area2 = std::abs((vx[1] - vx[0]) * (vy[2] - vy[0]) - (vx[2] - vx[0]) * (vy[1] - vy[0]));
    if (area2 < 80.0) continue;  // area >= 40 px^2
    std::vector<uint8_t> m(static_cast<size_t>(h) * w, 0);
    auto edge = [&](int i, int j, double px, double py) {
      return (vx[j] - vx[i]) * (py - vy[i]) - (vy[j] - vy[i]) * (px - vx[i]);
    };
    double orient = edge(0, 1, vx[2], vy[2]) >= 0 ? 1.0 : -1.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double px = x + 0.5, py = y + 0.5;
        if (orient * edge(0, 1, px, py) >= 0 && orient * edge(1, 2, px, py) >= 0 &&
            orient * edge(2, 0, px, py) >= 0)
          m[y * w + x] = 1;
      }
    return m;
  }
  throw std::runtime_error("raster_triangle: could not sample a non-degenerate triangle");
}

}  // namespace detail

inline SceneSample generate_scene(const DatasetConfig& cfg, Rng& rng) {
  cfg.validate();
  int h = cfg.height, w = cfg.width;
  SceneSample s;
  s.image = TensorF({3, h, w});

  // background: dark base color plus pixel noise
  float base[3];
  for (float& c : base) c = static_cast<float>(rng.uniform(0.05, 0.35));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        s.image.at(c, y, x) = std::clamp(base[c] + static_cast<float>(rng.normal()) * 0.02f,
                                         0.0f, 1.0f);

  int count = rng.uniform_int(cfg.min_instances, cfg.max_instances);

  // sampled front to back: earlier instances occlude later ones
  std::vector<uint8_t> occupied(static_cast<size_t>(h) * w, 0);
  std::vector<std::vector<uint8_t>> full_masks;
  std::vector<float> colors;
  for (int inst = 0; inst < count; ++inst) {
    int class_id = rng.uniform_int(0, cfg.num_classes - 1);
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      std::vector<uint8_t> full =
          class_id == 0   ? detail::raster_rectangle(rng, h, w)
          : class_id == 1 ? detail::raster_ellipse(rng, h, w)
                          : detail::raster_triangle(rng, h, w);
      std::vector<uint8_t> visible(full.size());
      int vis_count = 0;
      bool overlaps = false;
      for (size_t i = 0; i < full.size(); ++i) {
        visible[i] = full[i] && !occupied[i];
        vis_count += visible[i];
        overlaps |= full[i] && occupied[i];
      }
      if (!cfg.allow_occlusion && overlaps) continue;
      if (vis_count < kMinVisiblePixels) continue;

      InstanceRecord rec;
      rec.class_id = class_id;
      rec.mask = visible;
      rec.box = tight_box_from_mask(visible, h, w);
      s.instances.push_back(std::move(rec));
      for (size_t i = 0; i < full.size(); ++i) occupied[i] |= full[i];
      full_masks.push_back(std::move(full));
      for (int c = 0; c < 3; ++c) colors.push_back(static_cast<float>(rng.uniform(0.45, 1.0)));
      placed = true;
    }
    if (!placed)
      throw std::runtime_error(
          strprintf("generate_scene: instance %d of scene could not be placed with >= %d "
                    "visible pixels after 20 attempts",
                    inst, kMinVisiblePixels));
  }

  // paint back to front so the front-most instance owns each pixel
  for (int i = static_cast<int>(full_masks.size()) - 1; i >= 0; --i) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (full_masks[i][y * w + x])
          for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = colors[i * 3 + c];
  }
  // per-pixel color jitter on foreground
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (occupied[y * w + x])
        for (int c = 0; c < 3; ++c)
          s.image.at(c, y, x) = std::clamp(
              s.image.at(c, y, x) + static_cast<float>(rng.normal()) * 0.02f, 0.0f, 1.0f);

  s.image = quantize_image(s.image);
  return s;
}

// ---- augmentation ----

inline SceneSample hflip(const SceneSample& in) {
  int h = in.image.dim(1), w = in.image.dim(2);
  SceneSample out;
  out.scene_id = in.scene_id;
  out.image = TensorF({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = in.image.at(c, y, w - 1 - x);
  for (const auto& rec : in.instances) {
    InstanceRecord r;
    r.class_id = rec.class_id;
    r.mask.resize(rec.mask.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) r.mask[y * w + x] = rec.mask[y * w + (w - 1 - x)];
    r.box = tight_box_from_mask(r.mask, h, w);
    out.instances.push_back(std::move(r));
  }
  return out;
}

// Scale by factor s, then re-crop/pad back to the original canvas with the
// given anchor offsets (in scaled-image coordinates for crops, canvas
// coordinates for pads). Instances whose visible mask drops below the
// minimum pixel count are removed.
inline SceneSample scale_jitter(const SceneSample& in, double s, int off_x, int off_y) {
  int h = in.image.dim(1), w = in.image.dim(2);
  int sh = std::max(1, static_cast<int>(std::lround(h * s)));
  int sw = std::max(1, static_cast<int>(std::lround(w * s)));

  SceneSample out;
  out.scene_id = in.scene_id;
  out.image = TensorF({3, h, w});  // zero (black) padding

  // scaled-image coordinate back to source-image coordinate
  auto src_of = [](int dst, int scaled_len, int src_len) -> double {
    return (dst + 0.5) * (static_cast<double>(src_len) / scaled_len) - 0.5;
  };

  // scaled-space window that lands on the canvas
  int dst_x0 = sw >= w ? 0 : off_x;
  int dst_y0 = sh >= h ? 0 : off_y;
  int src_x0 = sw >= w ? off_x : 0;
  int src_y0 = sh >= h ? off_y : 0;
  int copy_w = std::min(w, sw), copy_h = std::min(h, sh);

  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < copy_h; ++y)
      for (int x = 0; x < copy_w; ++x) {
        double sy = src_of(y + src_y0, sh, h);
        double sx = src_of(x + src_x0, sw, w);
        sy = std::clamp(sy, 0.0, h - 1.0);
        sx = std::clamp(sx, 0.0, w - 1.0);
        int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
        int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        double fy = sy - y0, fx = sx - x0;
        double v = (1 - fy) * ((1 - fx) * in.image.at(c, y0, x0) + fx * in.image.at(c, y0, x1)) +
                   fy * ((1 - fx) * in.image.at(c, y1, x0) + fx * in.image.at(c, y1, x1));
        out.image.at(c, y + dst_y0, x + dst_x0) = static_cast<float>(v);
      }
  out.image = quantize_image(out.image);

  for (const auto& rec : in.instances) {
    InstanceRecord r;
    r.class_id = rec.class_id;
    r.mask.assign(static_cast<size_t>(h) * w, 0);
    for (int y = 0; y < copy_h; ++y)
      for (int x = 0; x < copy_w; ++x) {
        // nearest-neighbor for masks
        int sy = std::clamp(static_cast<int>(std::lround(src_of(y + src_y0, sh, h))), 0, h - 1);
        int sx = std::clamp(static_cast<int>(std::lround(src_of(x + src_x0, sw, w))), 0, w - 1);
        r.mask[(y + dst_y0) * w + (x + dst_x0)] = rec.mask[sy * w + sx];
      }
    if (mask_count(r.mask) < kMinVisiblePixels) continue;
    r.box = tight_box_from_mask(r.mask, h, w);
    out.instances.push_back(std::move(r));
  }
  return out;
}

inline SceneSample augment(const SceneSample& in, Rng& rng) {
  SceneSample s = in;
  if (rng.uniform() < 0.5) s = hflip(s);
  double factor = rng.uniform(0.8, 1.2);
  int h = in.image.dim(1), w = in.image.dim(2);
  int sh = std::max(1, static_cast<int>(std::lround(h * factor)));
  int sw = std::max(1, static_cast<int>(std::lround(w * factor)));
  int off_x = sw == w ? 0 : rng.uniform_int(0, std::abs(sw - w));
  int off_y = sh == h ? 0 : rng.uniform_int(0, std::abs(sh - h));
  return scale_jitter(s, factor, off_x, off_y);
}

// ---- run-length coding and on-disk layout ----

// Row-major runs, alternating background/foreground, starting with the
// background count.
inline std::string rle_encode(const std::vector<uint8_t>& mask) {
  std::string out;
  uint8_t cur = 0;
  int64_t run = 0;
  auto flush = [&] {
    if (!out.empty()) out += ',';
    out += std::to_string(run);
  };
  for (uint8_t v : mask) {
    if ((v != 0) == (cur != 0)) {
      ++run;
    } else {
      flush();
      cur = v;
      run = 1;
    }
  }
  flush();
  return out;
}

inline std::vector<uint8_t> rle_decode(const std::string& rle, int64_t expected) {
  std::vector<uint8_t> mask;
  mask.reserve(expected);
  uint8_t cur = 0;
  std::stringstream ss(rle);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    long long run = std::stoll(tok);
    if (run < 0) throw std::runtime_error("rle_decode: negative run");
    mask.insert(mask.end(), run, cur);
    cur = cur ? 0 : 1;
  }
  if (static_cast<int64_t>(mask.size()) != expected)
    throw std::runtime_error(strprintf("rle_decode: run sum %lld != expected %lld",
                                       static_cast<long long>(mask.size()),
                                       static_cast<long long>(expected)));
  return mask;
}

namespace fsys = std::filesystem;

inline void save_scene_annotation(const std::string& path, const SceneSample& s) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_scene_annotation: cannot open " + path);
  int h = s.image.dim(1), w = s.image.dim(2);
  f << "scene " << s.scene_id << "\n";
  f << "size " << h << " " << w << "\n";
  f << "instances " << s.instances.size() << "\n";
  char buf[128];
  for (const auto& rec : s.instances) {
    f << "instance " << rec.class_id << "\n";
    std::snprintf(buf, sizeof(buf), "box %.17g %.17g %.17g %.17g\n", rec.box.cx, rec.box.cy,
                  rec.box.w, rec.box.h);
    f << buf;
    f << "rle " << rle_encode(rec.mask) << "\n";
  }
  if (!f) throw std::runtime_error("save_scene_annotation: short write to " + path);
}

inline SceneSample load_scene(const std::string& img_path, const std::string& ann_path) {
  SceneSample s;
  s.image = read_ppm(img_path);
  int h = s.image.dim(1), w = s.image.dim(2);

  std::ifstream f(ann_path);
  if (!f) throw std::runtime_error("load_scene: cannot open " + ann_path);
  auto fail = [&](const std::string& why) -> std::runtime_error {
    return std::runtime_error("load_scene: " + why + " in " + ann_path);
  };
  std::string key;
  int ah = 0, aw = 0;
  size_t count = 0;
  if (!(f >> key >> s.scene_id) || key != "scene") throw fail("missing scene header");
  if (!(f >> key >> ah >> aw) || key != "size") throw fail("missing size record");
  if (ah != h || aw != w) throw fail("annotation size disagrees with image");
  if (!(f >> key >> count) || key != "instances") throw fail("missing instance count");
  for (size_t i = 0; i < count; ++i) {
    InstanceRecord rec;
    if (!(f >> key >> rec.class_id) || key != "instance") throw fail("truncated instance record");
    if (!(f >> key >> rec.box.cx >> rec.box.cy >> rec.box.w >> rec.box.h) || key != "box")
      throw fail("truncated box record");
    std::string rle;
    if (!(f >> key >> rle) || key != "rle") throw fail("truncated rle record");
    rec.mask = rle_decode(rle, static_cast<int64_t>(h) * w);
    s.instances.push_back(std::move(rec));
  }
  return s;
}

inline void save_dataset(const std::vector<SceneSample>& samples, const std::string& dir) {
  fsys::create_directories(fsys::path(dir) / "scenes");
  std::ofstream manifest(fsys::path(dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("save_dataset: cannot open manifest in " + dir);
  for (const auto& s : samples) {
    std::string img_rel = "scenes/" + std::to_string(s.scene_id) + ".img";
    std::string ann_rel = "scenes/" + std::to_string(s.scene_id) + ".ann";
    write_ppm((fsys::path(dir) / img_rel).string(), s.image);
    save_scene_annotation((fsys::path(dir) / ann_rel).string(), s);
    manifest << s.scene_id << " " << img_rel << " " << ann_rel << "\n";
  }
  if (!manifest) throw std::runtime_error("save_dataset: short manifest write in " + dir);
}

inline std::vector<SceneSample> load_dataset(const std::string& dir) {
  std::ifstream manifest(fsys::path(dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("load_dataset: cannot open manifest in " + dir);
  std::vector<SceneSample> out;
  int id;
  std::string img_rel, ann_rel;
  while (manifest >> id >> img_rel >> ann_rel) {
    SceneSample s;
    try {
      s = load_scene((fsys::path(dir) / img_rel).string(), (fsys::path(dir) / ann_rel).string());
    } catch (const std::exception& e) {
      throw std::runtime_error(strprintf("load_dataset: scene %d: %s", id, e.what()));
    }
    if (s.scene_id != id)
      throw std::runtime_error(strprintf("load_dataset: scene %d has mismatched id %d on disk",
                                         id, s.scene_id));
    out.push_back(std::move(s));
  }
  return out;
}

// Deterministic multi-scene generation; per-scene streams derived from the
// config seed and scene id so scenes are order-independent.
inline std::vector<SceneSample> generate_dataset(const DatasetConfig& cfg, int count,
                                                 int first_id = 0) {
  std::vector<SceneSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::derived(cfg.seed, static_cast<uint64_t>(first_id + i));
    SceneSample s = generate_scene(cfg, rng);
    s.scene_id = first_id + i;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace diffinst
