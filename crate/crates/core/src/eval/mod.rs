//! Dataset-level evaluation: ASR, AP, ablation grids and transfer.

pub mod ablation;
pub mod campaign;
pub mod manifest;
pub mod metrics;
mod report;

pub use ablation::{run_ablation, AblationCell, AblationGrid, AblationSpec};
pub use campaign::{
    evaluate_clean, run_campaign, transfer_eval, Aggregates, ArtifactSink, CampaignConfig, CampaignFailure, EvalReport,
    ImageRecord, RecordArtifacts,
};
pub use manifest::{artifact_stem, DatasetManifest, GroundTruth, ManifestRecord};
pub use metrics::{asr, average_precision, label_matched};
