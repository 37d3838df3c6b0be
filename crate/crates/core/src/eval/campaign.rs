//! Dataset-level attack campaigns and transfer evaluation.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::manifest::{artifact_stem, DatasetManifest, ManifestRecord};
use super::metrics::{asr, average_precision, label_matched};
use crate::de::{run_attack_keyed, DeConfig, RunTrace};
use crate::eot::EotConfig;
use crate::error::{Error, Result};
use crate::oracle::{Detection, OracleHandle, OracleProvider, DEFAULT_IOU_MATCH};
use crate::patch::{GenomeTemplate, MaskBox};
use crate::raster::{composite, GrayImage};
use crate::rng::{name_id, stream_key};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub de: DeConfig,
    pub eot: EotConfig,
    pub template: GenomeTemplate,
    /// Confidence at which a ground-truth label counts as detected.
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    /// Scenes attacked concurrently.
    pub workers: usize,
}

impl CampaignConfig {
    pub fn new(de: DeConfig, eot: EotConfig, template: GenomeTemplate) -> Self {
        Self { de, eot, template, conf_threshold: 0.5, iou_threshold: DEFAULT_IOU_MATCH, workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: String,
    pub stem: String,
    pub target_index: usize,
    pub target: MaskBox,
    pub baseline_detections: Vec<Detection>,
    /// The target was detected in the clean image.
    pub baseline_tp: bool,
    /// Detections on the adversarial image (the clean image when not attacked).
    pub attacked_detections: Vec<Detection>,
    pub attacked: bool,
    pub queries: u64,
    pub best_fitness: Option<f64>,
    /// Attacked and no longer detected.
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_records: usize,
    pub n_true_positive: usize,
    pub n_success: usize,
    /// `None` when no target was detected without attack.
    pub asr: Option<f64>,
    pub ap_clean: Option<f64>,
    pub ap: Option<f64>,
    pub mean_queries: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub aggregates: Aggregates,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// One record plus the artifacts an output sink may want to persist.
pub struct RecordArtifacts<'a> {
    pub record: &'a ImageRecord,
    pub trace: Option<&'a RunTrace>,
    /// 8-bit-quantized adversarial image (the clean image when not attacked).
    pub adversarial: &'a GrayImage,
}

pub type ArtifactSink<'a> = dyn Fn(&RecordArtifacts<'_>) -> Result<()> + Sync + 'a;

#[derive(Debug, Error)]
#[error("campaign aborted: {error}")]
pub struct CampaignFailure {
    /// Records completed before the failure.
    pub partial: EvalReport,
    #[source]
    pub error: Error,
}

struct Scene {
    clean: GrayImage,
    persons: Vec<MaskBox>,
}

fn load_scene(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<Scene> {
    let path = manifest.resolve(record);
    let clean = GrayImage::load_png(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot load {}: {e}", path.display())))?;
    let persons = record.person_boxes();
    for b in &persons {
        b.validate(clean.width(), clean.height())?;
    }
    Ok(Scene { clean, persons })
}

/// Folds records into aggregates. AP uses every person box of the record's image
/// as ground truth.
pub fn aggregate(records: &[ImageRecord], ground_truth: &[Vec<MaskBox>], cfg_iou: f64, conf: f64) -> Aggregates {
    let tp: Vec<&ImageRecord> = records.iter().filter(|r| r.baseline_tp).collect();
    let labels: Vec<Vec<MaskBox>> = tp.iter().map(|r| vec![r.target]).collect();
    let attacked: Vec<Vec<Detection>> = tp.iter().map(|r| r.attacked_detections.clone()).collect();
    let asr_value = asr(&labels, &attacked, cfg_iou, conf).ok();
    let clean: Vec<Vec<Detection>> = records.iter().map(|r| r.baseline_detections.clone()).collect();
    let adv: Vec<Vec<Detection>> = records.iter().map(|r| r.attacked_detections.clone()).collect();
    let attacked_records: Vec<&ImageRecord> = records.iter().filter(|r| r.attacked).collect();
    let mean_queries = if attacked_records.is_empty() {
        0.0
    } else {
        attacked_records.iter().map(|r| r.queries as f64).sum::<f64>() / attacked_records.len() as f64
    };
    Aggregates {
        n_records: records.len(),
        n_true_positive: tp.len(),
        n_success: records.iter().filter(|r| r.success).count(),
        asr: asr_value,
        ap_clean: average_precision(&clean, ground_truth, cfg_iou).ok(),
        ap: average_precision(&adv, ground_truth, cfg_iou).ok(),
        mean_queries,
    }
}

struct SceneOutcome {
    records: Vec<ImageRecord>,
    ground_truth: Vec<Vec<MaskBox>>,
    error: Option<Error>,
}

fn attack_scene(
    idx: usize,
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    provider: &OracleProvider,
    cfg: &CampaignConfig,
    sink: Option<&ArtifactSink<'_>>,
) -> SceneOutcome {
    let mut out = SceneOutcome { records: Vec::new(), ground_truth: Vec::new(), error: None };
    let targets = record.eligible_targets(manifest.min_height);
    if targets.is_empty() {
        return out;
    }
    let result = (|| -> Result<()> {
        let scene = load_scene(manifest, record)?;
        let oracle: Arc<OracleHandle> = provider.for_scene(&scene.clean, &scene.persons)?;
        let baseline = oracle.detect(&scene.clean)?;
        for (j, target) in targets {
            let stem = artifact_stem(idx, record, j);
            let baseline_tp = label_matched(&target, &baseline, cfg.iou_threshold, cfg.conf_threshold);
            let mut rec = ImageRecord {
                image: record.image.to_string_lossy().into_owned(),
                stem,
                target_index: j,
                target,
                baseline_detections: baseline.clone(),
                baseline_tp,
                attacked_detections: baseline.clone(),
                attacked: false,
                queries: 0,
                best_fitness: None,
                success: false,
            };
            if !baseline_tp {
                if let Some(sink) = sink {
                    sink(&RecordArtifacts { record: &rec, trace: None, adversarial: &scene.clean })?;
                }
                out.records.push(rec);
                out.ground_truth.push(scene.persons.clone());
                continue;
            }
            let stream_id = stream_key(name_id(&record.image.to_string_lossy()), &[idx as u64, j as u64]);
            let de = DeConfig { workers: 1, ..cfg.de.clone() };
            let trace = run_attack_keyed(&scene.clean, &target, &oracle, &de, &cfg.eot, &cfg.template, stream_id)
                .map_err(|f| f.error)?;
            let adv = composite(&scene.clean, &trace.genome()?, &target).quantized_8bit();
            rec.attacked_detections = oracle.detect(&adv)?;
            rec.attacked = true;
            rec.queries = trace.queries;
            rec.best_fitness = trace.best();
            rec.success = !label_matched(&target, &rec.attacked_detections, cfg.iou_threshold, cfg.conf_threshold);
            if let Some(sink) = sink {
                sink(&RecordArtifacts { record: &rec, trace: Some(&trace), adversarial: &adv })?;
            }
            out.records.push(rec);
            out.ground_truth.push(scene.persons.clone());
        }
        Ok(())
    })();
    if let Err(e) = result {
        out.error = Some(e);
    }
    out
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Attacks every eligible target of every manifest image and evaluates the result.
///
/// Scenes run concurrently on `cfg.workers` threads; records are folded in
/// manifest order. The first failing scene aborts the campaign; records of the
/// other scenes are kept in the partial report.
pub fn run_campaign(
    manifest: &DatasetManifest,
    provider: &OracleProvider,
    cfg: &CampaignConfig,
    sink: Option<&ArtifactSink<'_>>,
) -> std::result::Result<EvalReport, CampaignFailure> {
    let fail = |error| CampaignFailure {
        partial: EvalReport { records: vec![], aggregates: aggregate(&[], &[], 0.5, 0.5), warnings: vec![] },
        error,
    };
    if let Err(e) = cfg.de.validate().and_then(|_| cfg.eot.validate()) {
        return Err(fail(e));
    }
    let pool = pool(cfg.workers).map_err(fail)?;
    let outcomes: Vec<SceneOutcome> = pool.install(|| {
        manifest
            .images
            .par_iter()
            .enumerate()
            .map(|(i, r)| attack_scene(i, manifest, r, provider, cfg, sink))
            .collect()
    });
    fold(outcomes, cfg, Vec::new())
}

fn fold(
    outcomes: Vec<SceneOutcome>,
    cfg: &CampaignConfig,
    warnings: Vec<String>,
) -> std::result::Result<EvalReport, CampaignFailure> {
    let mut records = Vec::new();
    let mut gt = Vec::new();
    let mut first_error = None;
    for o in outcomes {
        records.extend(o.records);
        gt.extend(o.ground_truth);
        if first_error.is_none() {
            first_error = o.error;
        }
    }
    let aggregates = aggregate(&records, &gt, cfg.iou_threshold, cfg.conf_threshold);
    let report = EvalReport { records, aggregates, warnings };
    match first_error {
        Some(error) => Err(CampaignFailure { partial: report, error }),
        None => Ok(report),
    }
}

/// Clean-image evaluation: baseline detections only, no attack.
pub fn evaluate_clean(
    manifest: &DatasetManifest,
    provider: &OracleProvider,
    cfg: &CampaignConfig,
) -> std::result::Result<EvalReport, CampaignFailure> {
    transfer_like(manifest, provider, cfg, None)
}

/// Evaluates previously rendered adversarial images from `adv_dir` (named by
/// [`artifact_stem`]) against `provider`. Missing images are reported as
/// warnings and excluded.
pub fn transfer_eval(
    adv_dir: &Path,
    manifest: &DatasetManifest,
    provider: &OracleProvider,
    cfg: &CampaignConfig,
) -> std::result::Result<EvalReport, CampaignFailure> {
    transfer_like(manifest, provider, cfg, Some(adv_dir))
}

fn transfer_like(
    manifest: &DatasetManifest,
    provider: &OracleProvider,
    cfg: &CampaignConfig,
    adv_dir: Option<&Path>,
) -> std::result::Result<EvalReport, CampaignFailure> {
    let mut outcomes = Vec::new();
    let mut warnings = Vec::new();
    for (idx, record) in manifest.images.iter().enumerate() {
        let mut out = SceneOutcome { records: Vec::new(), ground_truth: Vec::new(), error: None };
        let targets = record.eligible_targets(manifest.min_height);
        if targets.is_empty() {
            continue;
        }
        let result = (|| -> Result<()> {
            let scene = load_scene(manifest, record)?;
            let oracle = provider.for_scene(&scene.clean, &scene.persons)?;
            let baseline = oracle.detect(&scene.clean)?;
            for (j, target) in targets {
                let stem = artifact_stem(idx, record, j);
                let attacked_detections = match adv_dir {
                    None => baseline.clone(),
                    Some(dir) => {
                        let p = dir.join(format!("{stem}.png"));
                        if !p.exists() {
                            warnings.push(format!("missing adversarial image {}", p.display()));
                            continue;
                        }
                        oracle.detect(&GrayImage::load_png(&p)?)?
                    }
                };
                let baseline_tp = label_matched(&target, &baseline, cfg.iou_threshold, cfg.conf_threshold);
                let attacked = adv_dir.is_some();
                let success = attacked
                    && baseline_tp
                    && !label_matched(&target, &attacked_detections, cfg.iou_threshold, cfg.conf_threshold);
                out.records.push(ImageRecord {
                    image: record.image.to_string_lossy().into_owned(),
                    stem,
                    target_index: j,
                    target,
                    baseline_detections: baseline.clone(),
                    baseline_tp,
                    attacked_detections,
                    attacked,
                    queries: 0,
                    best_fitness: None,
                    success,
                });
                out.ground_truth.push(scene.persons.clone());
            }
            Ok(())
        })();
        out.error = result.err();
        let stop = out.error.is_some();
        outcomes.push(out);
        if stop {
            break;
        }
    }
    fold(outcomes, cfg, warnings)
}
