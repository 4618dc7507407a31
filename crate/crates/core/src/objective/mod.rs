//! Training objective: quality masking, length classification, set-matched
//! moment loss and the weighted total.

mod hungarian;
mod losses;
mod quality;

pub use hungarian::hungarian_match;
pub use losses::{
    giou, layer_moment_loss, length_cls_loss, match_cost, moment_loss, sample_length_ce, total_loss, LengthLossParts,
    LengthLossVars, LossBreakdown, MomentWeights, WEIGHT_EPS,
};
pub use quality::{build_masks, sample_mask, QualityHead};
