//! White-box membership inference: per-record features, the meta-classifier
//! and its evaluation.

pub mod features;
pub mod meta;
pub mod roc;

pub use features::{build_attack_dataset, extract_features, featurise, set_based_score_features, FeatureSpec, RecordFeatures};
pub use meta::{train_meta_classifier, McConfig, McEpoch, McOutcome, MetaClassifier};
pub use roc::{roc_from_scores, RocCurve};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scores every record and builds the ROC curve against its membership.
pub fn evaluate<T: Scalar>(mc: &MetaClassifier<T>, test: &[RecordFeatures<T>]) -> Result<RocCurve> {
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for f in test {
        scores.push(mc.score(f)?);
        labels.push(f.member.ok_or_else(|| Error::Invalid("test features need membership labels".into()))?);
    }
    roc_from_scores(&scores, &labels)
}
