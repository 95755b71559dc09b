//! Grad-CAM heatmaps, overlays, the glaucoma gate and localization scoring.

mod heatmap;
mod localize;
mod overlay;

pub use heatmap::{compute_gradcam, gradcam_map, upsample_heatmap, Heatmap};
pub use localize::{localize, mask_iou, pointing_game_eval, LocalizationResult, PointingReport};
pub use overlay::{colormap, heatmap_to_gray, render_overlay, OverlayConfig};
