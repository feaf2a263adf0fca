//! Analysis-by-synthesis scene fitting and latent-space editing.

mod adam;
mod fit;
mod latent;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fit::{fit_scene, init_next_slot, sample_valid_pose, FitConfig, FitResult, InitPolicy, PoseRange, SlotSeed};
pub use latent::{apply_edit, logit, Edit, SceneLatent, ShapeSlot, SlotLayout, TextureSlot, BACKGROUND_LEN, EXTRINSIC_LEN};
