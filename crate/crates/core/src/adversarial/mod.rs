//! Conditional generator, discriminator, pixel classifier, their losses and
//! the alternating training procedure.

mod discriminator;
mod generator;
mod heads;
mod losses;
mod model;
mod steps;
mod toy;
mod trainer;

pub use discriminator::{minibatch_average, DiscOutput, Discriminator, DiscriminatorMode, PatchReduce};
pub use generator::{sample_noise, Generator, GeneratorOutput};
pub use heads::{Classifier, Decoder, DecoderOutput};
pub use losses::{combined_objective, domain_loss, domain_objective, generator_loss, target_alignment_loss, task_loss, GeneratorLoss};
pub use model::{argmax_masks, Model, ModelOptions, CLASSES, DISC_PREFIX, GEN_PREFIXES, TASK_PREFIXES};
pub use steps::{descend, descend_with};
pub use toy::{shift_toy, ShiftToyConfig, ShiftToyTrace};
pub use trainer::{pooled_iou, stack_images, train, write_log_csv, LogRow, Optimizers, ProbeSet, TrainOutcome, TrainerConfig, LOG_HEADER};

#[cfg(test)]
mod tests;
