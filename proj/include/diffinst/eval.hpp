#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "diffinst/common.hpp"

namespace diffinst {

inline double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  check(a.size() == b.size(), "mask_iou: shape mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    bool av = a[i] != 0, bv = b[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

struct EvalPrediction {
  double score = 0;
  int class_id = 0;
  std::vector<uint8_t> mask;  // binarized at 0.5 by the producer
};

struct EvalGroundtruth {
  int class_id = 0;
  std::vector<uint8_t> mask;
};

struct EvalImage {
  int scene_id = 0;
  std::vector<EvalPrediction> predictions;
  std::vector<EvalGroundtruth> gts;
};

struct EvalReport {
  double ap = -1, ap50 = -1, ap75 = -1;
  double ap_small = -1, ap_medium = -1, ap_large = -1;
  std::vector<double> per_class;  // mean over thresholds; -1 when no gt
  int64_t gt_count = 0;
  int64_t prediction_count = 0;

  std::string summary_line() const {
    return strprintf("%.4f %.4f %.4f %.4f %.4f %.4f", ap, ap50, ap75, ap_small, ap_medium,
                     ap_large);
  }
};

namespace evaldetail {

constexpr double kSmallArea = 32.0 * 32.0;
constexpr double kMediumArea = 96.0 * 96.0;

inline int area_bucket(double area) { return area < kSmallArea ? 0 : area < kMediumArea ? 1 : 2; }

inline int64_t mask_area(const std::vector<uint8_t>& m) {
  int64_t n = 0;
  for (uint8_t v : m) n += v != 0;
  return n;
}

// AP for one class at one IoU threshold, optionally restricted to an area
// bucket. Out-of-bucket groundtruth is ignored (not a miss); detections
// matched to ignored gt, or unmatched with out-of-bucket area, are dropped
// from the ranking. Returns -1 when the class has no in-bucket groundtruth.
inline double ap_single(const std::vector<EvalImage>& images, int class_id, double iou_thr,
                        int bucket /* -1 = all */) {
  struct Det {
    double score;
    int image;
    int index;
  };
  std::vector<Det> dets;
  int64_t n_gt = 0;
  for (size_t im = 0; im < images.size(); ++im) {
    for (size_t d = 0; d < images[im].predictions.size(); ++d)
      if (images[im].predictions[d].class_id == class_id)
        dets.push_back({images[im].predictions[d].score, static_cast<int>(im),
                        static_cast<int>(d)});
    for (const auto& gt : images[im].gts)
      if (gt.class_id == class_id &&
          (bucket < 0 || area_bucket(static_cast<double>(mask_area(gt.mask))) == bucket))
        n_gt++;
  }
  if (n_gt == 0) return -1.0;
  std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });

  std::map<int, std::vector<char>> gt_used;
  for (size_t im = 0; im < images.size(); ++im)
    gt_used[static_cast<int>(im)] = std::vector<char>(images[im].gts.size(), 0);

  std::vector<double> precisions, recalls;
  int64_t tp = 0, fp = 0;
  for (const auto& det : dets) {
    const auto& img = images[det.image];
    const auto& pred = img.predictions[det.index];
    int best = -1;
    double best_iou = iou_thr;
    for (size_t gi = 0; gi < img.gts.size(); ++gi) {
      if (img.gts[gi].class_id != class_id || gt_used[det.image][gi]) continue;
      double iou = mask_iou(pred.mask, img.gts[gi].mask);
      if (iou >= best_iou) {
        best_iou = iou;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0) {
      bool ignored_gt =
          bucket >= 0 &&
          area_bucket(static_cast<double>(mask_area(img.gts[best].mask))) != bucket;
      gt_used[det.image][best] = 1;
      if (ignored_gt) continue;  // matched an out-of-bucket gt: drop silently
      tp++;
    } else {
      if (bucket >= 0 &&
          area_bucket(static_cast<double>(mask_area(pred.mask))) != bucket)
        continue;  // out-of-bucket false positive: drop
      fp++;
    }
    precisions.push_back(static_cast<double>(tp) / (tp + fp));
    recalls.push_back(static_cast<double>(tp) / n_gt);
  }

  // 101-point interpolation: max precision at recall >= r
  double ap = 0;
  if (!precisions.empty()) {
    std::vector<double> suffix_max(precisions.size());
    double run = 0;
    for (int i = static_cast<int>(precisions.size()) - 1; i >= 0; --i) {
      run = std::max(run, precisions[i]);
      suffix_max[i] = run;
    }
    for (int k = 0; k <= 100; ++k) {
      double r = k / 100.0;
      auto it = std::lower_bound(recalls.begin(), recalls.end(), r - 1e-12);
      if (it != recalls.end()) ap += suffix_max[it - recalls.begin()];
    }
    ap /= 101.0;
  }
  return ap;
}

inline double mean_excluding_sentinels(const std::vector<double>& vals) {
  double s = 0;
  int n = 0;
  for (double v : vals)
    if (v >= 0) {
      s += v;
      n++;
    }
  return n > 0 ? s / n : -1.0;
}

}  // namespace evaldetail

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

inline EvalReport compute_ap(const std::vector<EvalImage>& images, int num_classes,
                             const std::vector<double>& iou_thresholds = default_iou_thresholds()) {
  std::set<int> seen;
  for (const auto& img : images) {
    check(seen.insert(img.scene_id).second,
          strprintf("compute_ap: duplicate scene_id %d", img.scene_id));
  }
  EvalReport rep;
  for (const auto& img : images) {
    rep.gt_count += static_cast<int64_t>(img.gts.size());
    rep.prediction_count += static_cast<int64_t>(img.predictions.size());
  }

  using evaldetail::ap_single;
  using evaldetail::mean_excluding_sentinels;

  std::vector<double> class_means;
  std::vector<double> at_thr(iou_thresholds.size());
  for (int c = 0; c < num_classes; ++c) {
    std::vector<double> per_thr;
    for (double thr : iou_thresholds) {
      double v = ap_single(images, c, thr, -1);
      per_thr.push_back(v);
    }
    class_means.push_back(mean_excluding_sentinels(per_thr));
  }
  rep.per_class = class_means;
  rep.ap = mean_excluding_sentinels(class_means);

  auto mean_over_classes_at = [&](double thr, int bucket) {
    std::vector<double> vals;
    for (int c = 0; c < num_classes; ++c) vals.push_back(ap_single(images, c, thr, bucket));
    return mean_excluding_sentinels(vals);
  };
  rep.ap50 = mean_over_classes_at(0.50, -1);
  rep.ap75 = mean_over_classes_at(0.75, -1);

  auto bucket_ap = [&](int bucket) {
    std::vector<double> vals;
    for (int c = 0; c < num_classes; ++c) {
      std::vector<double> per_thr;
      for (double thr : iou_thresholds) per_thr.push_back(ap_single(images, c, thr, bucket));
      vals.push_back(mean_excluding_sentinels(per_thr));
    }
    return mean_excluding_sentinels(vals);
  };
  rep.ap_small = bucket_ap(0);
  rep.ap_medium = bucket_ap(1);
  rep.ap_large = bucket_ap(2);
  return rep;
}

inline std::string format_report(const EvalReport& rep) {
  std::string s;
  s += strprintf("mask AP        %.4f\n", rep.ap);
  s += strprintf("mask AP50      %.4f\n", rep.ap50);
  s += strprintf("mask AP75      %.4f\n", rep.ap75);
  s += strprintf("mask AP small  %.4f\n", rep.ap_small);
  s += strprintf("mask AP medium %.4f\n", rep.ap_medium);
  s += strprintf("mask AP large  %.4f\n", rep.ap_large);
  for (size_t c = 0; c < rep.per_class.size(); ++c)
    s += strprintf("class %zu AP    %.4f\n", c, rep.per_class[c]);
  s += strprintf("groundtruth %lld  predictions %lld\n",
                 static_cast<long long>(rep.gt_count),
                 static_cast<long long>(rep.prediction_count));
  return s;
}

}  // namespace diffinst
