use irblock_core::eval::ablation::{run_ablation, AblationSpec};
use irblock_core::eval::{run_campaign, transfer_eval, CampaignConfig, DatasetManifest, GroundTruth, ManifestRecord};
use irblock_core::oracle::stub::StubSpec;
use irblock_core::oracle::{OracleProvider, OracleSpec};
use irblock_core::patch::BlockBounds;
use irblock_core::{DeConfig, Detection, Detector, EotConfig, GenomeTemplate, GrayImage, MaskBox, OracleHandle, Quantization};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

fn dataset(dir: &Path) -> DatasetManifest {
    let mut images = Vec::new();
    for i in 0..3u32 {
        let img = GrayImage::filled(96, 160, 0.2 + 0.1 * i as f64);
        let name = format!("img{i}.png");
        img.save_png(dir.join(&name)).unwrap();
        let boxes = vec![
            GroundTruth::person(MaskBox::new(10, 10, 60, 130)),
            // too short to attack, still counted for AP
            GroundTruth::person(MaskBox::new(75, 10, 15, 40)),
        ];
        images.push(ManifestRecord { image: name.into(), boxes });
    }
    let m = DatasetManifest::new(images);
    m.save(dir.join("manifest.json")).unwrap();
    DatasetManifest::load(dir.join("manifest.json")).unwrap()
}

fn config(k: usize, length: f64) -> CampaignConfig {
    let bounds = BlockBounds { rel_length: irblock_core::patch::Range::fixed(length), ..BlockBounds::default() };
    let template = GenomeTemplate::new(k, bounds, Quantization::Physical).unwrap();
    let de = DeConfig { pop_size: 12, steps: 3, seed: 3, ..DeConfig::default() };
    CampaignConfig::new(de, EotConfig::identity(), template)
}

fn stub_provider(lambda: f64) -> OracleProvider {
    let spec = StubSpec { lambda, ..StubSpec::default() };
    OracleProvider::connect(&["stub:coverage".parse::<OracleSpec>().unwrap()], spec, Duration::from_secs(5)).unwrap()
}

#[test]
fn campaign_attacks_tall_targets_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let report = run_campaign(&m, &stub_provider(8.0), &config(7, 0.16), None).unwrap();
    assert_eq!(report.records.len(), 3);
    assert!(report.records.iter().all(|r| r.attacked && r.baseline_tp && r.target_index == 0));
    let a = &report.aggregates;
    assert_eq!(a.n_true_positive, 3);
    // the stub sees both persons of each image
    assert_eq!(a.ap_clean, Some(1.0));
    let asr = a.asr.unwrap();
    assert_eq!(asr, a.n_success as f64 / 3.0);
    assert!(report.records.iter().all(|r| r.queries <= 12 * 4));
    // workers do not change results
    let par = run_campaign(&m, &stub_provider(8.0), &CampaignConfig { workers: 3, ..config(7, 0.16) }, None).unwrap();
    assert_eq!(report, par);
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 7);
    assert!(csv.lines().any(|l| l.starts_with("# asr,")));
}

#[test]
fn single_cell_ablation_matches_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let p = stub_provider(6.0);
    let direct = run_campaign(&m, &p, &config(5, 0.10), None).unwrap();
    let spec = AblationSpec { ks: vec![5], lengths: vec![0.10], ..AblationSpec::block_grid() };
    let ckpt = dir.path().join("cells");
    let grid = run_ablation(&m, &p, &spec, &config(7, 0.12), Some(&ckpt)).unwrap();
    assert_eq!(grid.cells[0].aggregates.as_ref(), Some(&direct.aggregates));
    // resumed from the checkpoint
    let again = run_ablation(&m, &p, &spec, &config(7, 0.12), Some(&ckpt)).unwrap();
    assert_eq!(again, grid);
    assert!(grid.heatmap_svg().contains("<rect"));
    assert!(grid.pixel_value_svg().is_none());
}

#[test]
fn pixel_value_sweep_produces_chart() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let spec = AblationSpec::pixel_value_sweep(3, 0.12);
    let grid = run_ablation(&m, &stub_provider(4.0), &spec, &config(3, 0.12), None).unwrap();
    assert_eq!(grid.cells.len(), 5);
    assert!(grid.cells.iter().all(|c| c.error.is_none()));
    assert!(grid.pixel_value_svg().unwrap().contains("polyline"));
}

/// Always reports every person at full confidence.
struct Blind(Vec<MaskBox>);

impl Detector for Blind {
    fn name(&self) -> &str {
        "blind"
    }

    fn detect(&self, _image: &GrayImage) -> irblock_core::Result<Vec<Detection>> {
        Ok(self.0.iter().map(|b| Detection::person(b.corners(), 1.0)).collect())
    }
}

#[test]
fn transfer_reproduces_or_resists() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let adv = dir.path().join("adv");
    std::fs::create_dir_all(&adv).unwrap();
    let p = stub_provider(8.0);
    let sink = |a: &irblock_core::eval::RecordArtifacts<'_>| a.adversarial.save_png(adv.join(format!("{}.png", a.record.stem)));
    let report = run_campaign(&m, &p, &config(7, 0.16), Some(&sink)).unwrap();

    let same = transfer_eval(&adv, &m, &p, &config(7, 0.16)).unwrap();
    assert_eq!(same.aggregates.asr, report.aggregates.asr);

    let blind = OracleHandle::custom(Blind(vec![MaskBox::new(10, 10, 60, 130), MaskBox::new(75, 10, 15, 40)]));
    let bp = OracleProvider::from_handles(vec![Arc::new(blind)]).unwrap();
    assert_eq!(transfer_eval(&adv, &m, &bp, &config(7, 0.16)).unwrap().aggregates.asr, Some(0.0));

    std::fs::remove_file(adv.join(format!("{}.png", report.records[1].stem))).unwrap();
    let partial = transfer_eval(&adv, &m, &p, &config(7, 0.16)).unwrap();
    assert_eq!(partial.records.len(), 2);
    assert_eq!(partial.warnings.len(), 1);
}

#[test]
fn missing_image_fails_with_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = dataset(dir.path());
    m.images[2].image = "nope.png".into();
    let failure = run_campaign(&m, &stub_provider(2.0), &config(3, 0.12), None).unwrap_err();
    assert_eq!(failure.partial.records.len(), 2);
}
