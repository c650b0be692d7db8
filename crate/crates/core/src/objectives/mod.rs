//! Projection heads, token fusion, base losses with online distillation,
//! EMA teacher maintenance and the supervised variant.

mod heads;
mod losses;
mod supervised;
mod teacher;

pub use heads::{normalize_prototypes, normalize_rows, HeadBank, HeadConfig};
pub use losses::{base_loss, pretrain_loss, BaseLossKind, LossConfig, LossMode, LossParts, StreamOutputs};
pub use supervised::{supervised_loss, ClassifierBank, SupervisedOutput};
pub use teacher::{center_update, ema_update, ema_update_selected, Centers, TeacherState};

#[cfg(test)]
mod tests;
