//! Conditional image synthesis: networks, losses and training.

pub mod discriminator;
pub mod generator;
pub mod losses;
pub mod perceptual;
pub mod train;

pub use discriminator::{Discriminator, DiscriminatorConfig, MultiScaleDiscriminator, ScaleOutput};
pub use generator::{generator_forward, Generator, GeneratorConfig};
pub use losses::{
    cg2real_objective, feature_matching_loss, gan_losses, perceptual_loss, LossParts, LossWeights,
};
pub use perceptual::{FeatureExtractor, IdentityExtractor, PerceptualExtractor, PerceptualSource};
pub use train::{
    train_cg2real, EdgeSource, Phase, StepRecord, TrainConfig, TrainOptions, TrainOutcome,
    TrainedModels,
};
