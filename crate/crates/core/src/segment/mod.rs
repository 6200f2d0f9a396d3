//! Segmentation network, dice objective, and supervised fine-tuning.

mod dice;
mod finetune;
mod unet;

pub use dice::{dice_loss, onehot, DiceSpec, DEFAULT_SMOOTHING};
pub use finetune::{finetune, FinetuneConfig, FinetuneOutcome};
pub use unet::{UNet, UNetInit, UNetSpec};
