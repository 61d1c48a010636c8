#pragma once

// Segmentation and combined losses. The segmentation entry point takes a
// FinalMask, so only the last mask of a chain can be supervised; the dice and
// cross-entropy primitives remain available for unit tests and for the
// optional intermediate-supervision ablations, which deliberately bypass the
// final-mask restriction.

#include "cores/seg_chain.hpp"

#include <cmath>
#include <sstream>
#include <string>

namespace cores {

struct LossWeights {
    Scalar lambda_d = 0.5;  // dice term inside the segmentation loss
    Scalar lambda_c = 2.0;  // cross-entropy term inside the segmentation loss
    Scalar lambda_r = 0.5;  // reasoning (text) loss in the total
    Scalar lambda_s = 0.5;  // segmentation loss in the total

    void validate() const {
        if (lambda_d < 0 || lambda_c < 0 || lambda_r < 0 || lambda_s < 0)
            throw ConfigError("loss weights must be nonnegative");
    }

    // Ratio presets from the hyperparameter study. A ratio a:b rescales the
    // pair while preserving the default pair sum, so "1:1" with the default
    // sums reproduces an even split rather than unit weights.
    LossWeights with_cos_cor_ratio(Scalar cos_part, Scalar cor_part) const {
        if (cos_part < 0 || cor_part < 0 || cos_part + cor_part <= 0)
            throw ConfigError("cos:cor ratio parts must be nonnegative and not both zero");
        LossWeights w = *this;
        const Scalar total = lambda_s + lambda_r;
        w.lambda_s = total * cos_part / (cos_part + cor_part);
        w.lambda_r = total * cor_part / (cos_part + cor_part);
        return w;
    }

    LossWeights with_ce_dice_ratio(Scalar ce_part, Scalar dice_part) const {
        if (ce_part < 0 || dice_part < 0 || ce_part + dice_part <= 0)
            throw ConfigError("ce:dice ratio parts must be nonnegative and not both zero");
        LossWeights w = *this;
        const Scalar total = lambda_c + lambda_d;
        w.lambda_c = total * ce_part / (ce_part + dice_part);
        w.lambda_d = total * dice_part / (ce_part + dice_part);
        return w;
    }
};

// Intermediate-mask supervision used only by the ablation harness. "gt"
// supervises the first-level mask with the final object mask at low weight;
// "pseudo" builds a larger scene-like target by dilating the object mask to
// the image quadrant holding it. Default off, matching final-mask-only
// training.
enum class C1Supervision { off, gt, pseudo };

inline const char* to_string(C1Supervision c) {
    switch (c) {
        case C1Supervision::off: return "off";
        case C1Supervision::gt: return "gt";
        case C1Supervision::pseudo: return "pseudo";
    }
    return "off";
}

inline C1Supervision c1_from_string(const std::string& s) {
    if (s == "off") return C1Supervision::off;
    if (s == "gt") return C1Supervision::gt;
    if (s == "pseudo") return C1Supervision::pseudo;
    throw ConfigError("unknown intermediate-supervision mode: " + s);
}

inline Var dice_loss(Graph& g, Var pred_logits, const Tensor& gt) { return g.dice_with_logits(pred_logits, gt, 1.0); }

inline Var mask_ce_loss(Graph& g, Var pred_logits, const Tensor& gt) { return g.bce_with_logits_mean(pred_logits, gt); }

struct CosParts {
    Var cos;
    Var dice;
    Var mask_ce;
};

inline CosParts cos_loss(Graph& g, const FinalMask& final_mask, const Tensor& gt, const LossWeights& w) {
    w.validate();
    Var logits = final_mask.logits();
    Var d = dice_loss(g, logits, gt);
    Var c = mask_ce_loss(g, logits, gt);
    Var cos = g.add(g.scale(d, w.lambda_d), g.scale(c, w.lambda_c));
    return CosParts{cos, d, c};
}

inline Var total_loss(Graph& g, Var cor, Var cos, const LossWeights& w) {
    w.validate();
    return g.add(g.scale(cor, w.lambda_r), g.scale(cos, w.lambda_s));
}

struct LossBreakdown {
    Scalar cor = 0.0;
    Scalar dice = 0.0;
    Scalar mask_ce = 0.0;
    Scalar cos = 0.0;
    Scalar total = 0.0;

    // Both composition identities must hold to 1e-9 for the weights that
    // produced the breakdown.
    bool consistent(const LossWeights& w, Scalar tol = 1e-9) const {
        return std::abs(cos - (w.lambda_d * dice + w.lambda_c * mask_ce)) <= tol &&
               std::abs(total - (w.lambda_r * cor + w.lambda_s * cos)) <= tol;
    }
};

inline LossBreakdown make_breakdown(Graph& g, Var cor, const CosParts& parts, Var total) {
    LossBreakdown b;
    b.cor = g.val(cor).data[0];
    b.dice = g.val(parts.dice).data[0];
    b.mask_ce = g.val(parts.mask_ce).data[0];
    b.cos = g.val(parts.cos).data[0];
    b.total = g.val(total).data[0];
    return b;
}

} // namespace cores
