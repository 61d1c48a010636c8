#pragma once

// Evaluation metrics over binarized masks: per-sample IoU, its unweighted
// mean (gIoU), the cumulative ratio of summed intersections to summed unions
// (cIoU, biased toward large objects), and cIoU stratified by ground-truth
// area.

#include "cores/errors.hpp"
#include "cores/tensor.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cores {

struct EvalRecord {
    std::int64_t intersection = 0;
    std::int64_t union_px = 0;
    std::int64_t gt_area = 0;
    std::uint64_t pred_hash = 0;
};

namespace detail {
inline void require_binary(const Tensor& t, const char* what) {
    for (std::int64_t i = 0; i < t.size(); ++i)
        if (t.data[i] != 0.0 && t.data[i] != 1.0) throw std::invalid_argument(std::string(what) + ": mask must be 0/1");
}
} // namespace detail

inline EvalRecord make_record(const Tensor& pred_binary, const Tensor& gt_binary) {
    if (!pred_binary.same_shape(gt_binary)) throw std::invalid_argument("make_record: shape mismatch");
    detail::require_binary(pred_binary, "make_record pred");
    detail::require_binary(gt_binary, "make_record gt");
    EvalRecord r;
    for (std::int64_t i = 0; i < pred_binary.size(); ++i) {
        const bool p = pred_binary.data[i] != 0.0;
        const bool g = gt_binary.data[i] != 0.0;
        r.intersection += (p && g) ? 1 : 0;
        r.union_px += (p || g) ? 1 : 0;
        r.gt_area += g ? 1 : 0;
    }
    r.pred_hash = hash_tensor(pred_binary);
    return r;
}

// Prediction side comes from logits thresholded at probability 0.5.
inline EvalRecord make_record_from_logits(const Tensor& pred_logits, const Tensor& gt_binary) {
    if (!pred_logits.same_shape(gt_binary)) throw std::invalid_argument("make_record: shape mismatch");
    Tensor bin(pred_logits.shape);
    for (std::int64_t i = 0; i < pred_logits.size(); ++i) bin.data[i] = pred_logits.data[i] > 0.0 ? 1.0 : 0.0;
    return make_record(bin, gt_binary);
}

inline Scalar record_iou(const EvalRecord& r) {
    if (r.union_px == 0) return 1.0;
    return static_cast<Scalar>(r.intersection) / static_cast<Scalar>(r.union_px);
}

inline Scalar iou(const Tensor& pred_binary, const Tensor& gt_binary) {
    return record_iou(make_record(pred_binary, gt_binary));
}

inline Scalar giou(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw std::invalid_argument("giou: no records");
    Scalar acc = 0;
    for (const EvalRecord& r : records) acc += record_iou(r);
    return acc / static_cast<Scalar>(records.size());
}

inline Scalar ciou(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw std::invalid_argument("ciou: no records");
    std::int64_t inter = 0, uni = 0;
    for (const EvalRecord& r : records) {
        inter += r.intersection;
        uni += r.union_px;
    }
    if (uni == 0) return 1.0;
    return static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
}

struct SizeThresholds {
    // Ground-truth-area cutoffs in pixels. Defaults correspond to 1% and 10%
    // of a 64x64 image.
    Scalar small_max = 0.01 * 64.0 * 64.0;
    Scalar medium_max = 0.10 * 64.0 * 64.0;

    static SizeThresholds for_image_area(std::int64_t area_px) {
        SizeThresholds t;
        t.small_max = 0.01 * static_cast<Scalar>(area_px);
        t.medium_max = 0.10 * static_cast<Scalar>(area_px);
        return t;
    }
};

struct StratifiedCiou {
    std::optional<Scalar> small;
    std::optional<Scalar> medium;
    std::optional<Scalar> large;
};

inline StratifiedCiou size_stratified_ciou(const std::vector<EvalRecord>& records, const SizeThresholds& thresholds) {
    std::vector<EvalRecord> small, medium, large;
    for (const EvalRecord& r : records) {
        const Scalar a = static_cast<Scalar>(r.gt_area);
        if (a < thresholds.small_max)
            small.push_back(r);
        else if (a < thresholds.medium_max)
            medium.push_back(r);
        else
            large.push_back(r);
    }
    StratifiedCiou out;
    if (!small.empty()) out.small = ciou(small);
    if (!medium.empty()) out.medium = ciou(medium);
    if (!large.empty()) out.large = ciou(large);
    return out;
}

struct EvalReport {
    Scalar giou = 0;
    Scalar ciou = 0;
    std::optional<Scalar> ciou_small;
    std::optional<Scalar> ciou_medium;
    std::optional<Scalar> ciou_large;
    std::int64_t n_samples = 0;
};

inline EvalReport evaluate(const std::vector<EvalRecord>& records, const SizeThresholds& thresholds) {
    EvalReport rep;
    rep.giou = giou(records);
    rep.ciou = ciou(records);
    StratifiedCiou s = size_stratified_ciou(records, thresholds);
    rep.ciou_small = s.small;
    rep.ciou_medium = s.medium;
    rep.ciou_large = s.large;
    rep.n_samples = static_cast<std::int64_t>(records.size());
    return rep;
}

} // namespace cores
