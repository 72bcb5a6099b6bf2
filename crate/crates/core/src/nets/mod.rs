//! Trainable models: the spectrogram generator and the speaker classifier.

mod checkpoint;
mod gca;
mod xvector;

use rand::RngCore;

pub use checkpoint::{
    decode_classifier, encode_classifier, load_classifier, save_classifier, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub(crate) use gca::he_normal;
pub use gca::{
    denormalize_spectrogram, denormalize_var, normalize_spectrogram, GatedConvLayer, Gca,
    GcaConfig, NormStats, STD_FLOOR,
};
pub use xvector::{
    argmax, attentive_stat_pooling, train_classifier, AttentionHead, Prediction, SpeakerClassifier,
    TrainConfig, TrainingReport, XVectorConfig, XVectorModel, XVectorOutput, POOL_VAR_FLOOR,
};

/// Reborrows an optional RNG for one more call.
pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}
