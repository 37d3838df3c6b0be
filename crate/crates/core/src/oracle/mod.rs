//! Black-box detector contract and query accounting.
//!
//! A detector only sees images and returns boxes with confidences. The attack
//! minimizes the highest confidence among detections that match the target box.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::patch::MaskBox;
use crate::raster::GrayImage;

pub mod stub;
pub mod wire;

pub use stub::{ContrastStub, CoverageStub, StubKind, StubSpec};
pub use wire::WireDetector;

pub const PERSON: &str = "person";
/// IoU at which a detection is considered to hit a box, both for fitness and metrics.
pub const DEFAULT_IOU_MATCH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(rename = "conf")]
    pub confidence: f64,
    #[serde(rename = "cls")]
    pub class_label: String,
}

impl Detection {
    pub fn person(bbox: [f64; 4], confidence: f64) -> Self {
        Self { x1: bbox[0], y1: bbox[1], x2: bbox[2], y2: bbox[3], confidence, class_label: PERSON.to_owned() }
    }

    pub fn bbox(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_person(&self) -> bool {
        self.class_label == PERSON
    }

    /// Clamps the box to the image and the confidence to `[0, 1]`.
    /// In-range values are left bit-for-bit untouched.
    pub fn clamped(mut self, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        self.x1 = self.x1.clamp(0.0, w);
        self.x2 = self.x2.clamp(0.0, w);
        self.y1 = self.y1.clamp(0.0, h);
        self.y2 = self.y2.clamp(0.0, h);
        self.confidence = self.confidence.clamp(0.0, 1.0);
        self
    }
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Highest person confidence among detections overlapping `target` by at least
/// `iou_match`; zero when nothing matches.
pub fn fitness(detections: &[Detection], target: &MaskBox, iou_match: f64) -> f64 {
    let t = target.corners();
    detections
        .iter()
        .filter(|d| d.is_person() && iou(d.bbox(), t) >= iou_match)
        .map(|d| d.confidence)
        .fold(0.0, f64::max)
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    fn classes(&self) -> Vec<String> {
        vec![PERSON.to_owned()]
    }

    fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    WireSubprocess,
    WireTcp,
    BuiltinStub,
    Ensemble,
    /// Any other in-process [`Detector`].
    Custom,
}

enum Backend {
    Single(Arc<dyn Detector>),
    Ensemble(Vec<Arc<OracleHandle>>),
}

/// A detector together with its query counter.
pub struct OracleHandle {
    name: String,
    kind: BackendKind,
    backend: Backend,
    queries: AtomicU64,
}

impl std::fmt::Debug for OracleHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleHandle")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("queries", &self.queries())
            .finish()
    }
}

impl OracleHandle {
    pub fn new(kind: BackendKind, detector: Arc<dyn Detector>) -> Self {
        Self { name: detector.name().to_owned(), kind, backend: Backend::Single(detector), queries: AtomicU64::new(0) }
    }

    pub fn custom(detector: impl Detector + 'static) -> Self {
        Self::new(BackendKind::Custom, Arc::new(detector))
    }

    pub fn ensemble(members: Vec<Arc<OracleHandle>>) -> Result<Self> {
        if members.is_empty() {
            return Err(invalid("an ensemble needs at least one oracle"));
        }
        let name = members.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join("+");
        Ok(Self { name, kind: BackendKind::Ensemble, backend: Backend::Ensemble(members), queries: AtomicU64::new(0) })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    /// Forward passes issued so far; for an ensemble, the sum over members.
    pub fn queries(&self) -> u64 {
        match &self.backend {
            Backend::Single(_) => self.queries.load(Ordering::Relaxed),
            Backend::Ensemble(m) => m.iter().map(|o| o.queries()).sum(),
        }
    }

    /// Forward passes consumed by one call to [`OracleHandle::objective`].
    pub fn passes_per_objective(&self) -> u64 {
        match &self.backend {
            Backend::Single(_) => 1,
            Backend::Ensemble(m) => m.iter().map(|o| o.passes_per_objective()).sum(),
        }
    }

    /// Runs the detector. An ensemble returns the concatenation of member outputs.
    pub fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        match &self.backend {
            Backend::Single(d) => {
                self.queries.fetch_add(1, Ordering::Relaxed);
                d.detect(image)
            }
            Backend::Ensemble(members) => {
                let mut all = Vec::new();
                for m in members {
                    all.extend(m.detect(image)?);
                }
                Ok(all)
            }
        }
    }

    /// Attack objective on one image: plain fitness for a single detector, the
    /// member mean for an ensemble.
    pub fn objective(&self, image: &GrayImage, target: &MaskBox, iou_match: f64) -> Result<f64> {
        match &self.backend {
            Backend::Single(_) => Ok(fitness(&self.detect(image)?, target, iou_match)),
            Backend::Ensemble(members) => ensemble_fitness(members, image, target, iou_match),
        }
    }
}

/// Mean of per-oracle objective values.
pub fn ensemble_fitness(
    oracles: &[Arc<OracleHandle>],
    image: &GrayImage,
    target: &MaskBox,
    iou_match: f64,
) -> Result<f64> {
    if oracles.is_empty() {
        return Err(invalid("ensemble_fitness needs at least one oracle"));
    }
    let mut sum = 0.0;
    for o in oracles {
        sum += o.objective(image, target, iou_match)?;
    }
    Ok(sum / oracles.len() as f64)
}

/// How to reach one detector: `stub:<kind>`, `cmd:<command line>` or `tcp:<host:port>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleSpec {
    Stub(StubKind),
    Cmd(String),
    Tcp(String),
}

impl std::str::FromStr for OracleSpec {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scheme, rest) = s.split_once(':').ok_or_else(|| invalid(format!("oracle {s:?} lacks a stub:/cmd:/tcp: prefix")))?;
        if rest.trim().is_empty() {
            return Err(invalid(format!("oracle {s:?} has an empty address")));
        }
        match scheme {
            "stub" => Ok(Self::Stub(rest.parse()?)),
            "cmd" => Ok(Self::Cmd(rest.to_owned())),
            "tcp" => Ok(Self::Tcp(rest.to_owned())),
            _ => Err(invalid(format!("unknown oracle scheme {scheme:?}"))),
        }
    }
}

impl std::fmt::Display for OracleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Stub(k) => write!(f, "stub:{}", k.as_str()),
            Self::Cmd(c) => write!(f, "cmd:{c}"),
            Self::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

enum Source {
    Stub(StubKind),
    Shared(Arc<OracleHandle>),
}

/// Builds the oracle for each scene of a campaign.
///
/// Builtin stubs are scene-specific (they take the clean image as reference and
/// the ground-truth person boxes as targets), so a fresh handle is built per
/// scene. Wire backends are connected once and shared.
pub struct OracleProvider {
    sources: Vec<Source>,
    stub: StubSpec,
}

impl OracleProvider {
    pub fn connect(specs: &[OracleSpec], stub: StubSpec, timeout: Duration) -> Result<Self> {
        if specs.is_empty() {
            return Err(invalid("no oracle specified"));
        }
        stub.validate()?;
        let mut sources = Vec::with_capacity(specs.len());
        for spec in specs {
            sources.push(match spec {
                OracleSpec::Stub(kind) => Source::Stub(*kind),
                OracleSpec::Cmd(cmd) => Source::Shared(Arc::new(OracleHandle::new(
                    BackendKind::WireSubprocess,
                    Arc::new(WireDetector::spawn(cmd, timeout)?),
                ))),
                OracleSpec::Tcp(addr) => Source::Shared(Arc::new(OracleHandle::new(
                    BackendKind::WireTcp,
                    Arc::new(WireDetector::connect_tcp(addr, timeout)?),
                ))),
            });
        }
        Ok(Self { sources, stub })
    }

    /// Wraps already-built handles; stubs are not involved.
    pub fn from_handles(handles: Vec<Arc<OracleHandle>>) -> Result<Self> {
        if handles.is_empty() {
            return Err(invalid("no oracle specified"));
        }
        Ok(Self { sources: handles.into_iter().map(Source::Shared).collect(), stub: StubSpec::default() })
    }

    pub fn for_scene(&self, clean: &GrayImage, targets: &[MaskBox]) -> Result<Arc<OracleHandle>> {
        let mut members = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            members.push(match s {
                Source::Shared(h) => h.clone(),
                Source::Stub(kind) => {
                    let spec = StubSpec { kind: *kind, ..self.stub.clone() };
                    Arc::new(OracleHandle::new(BackendKind::BuiltinStub, spec.build(Some(clean.clone()), targets.to_vec())?))
                }
            });
        }
        if members.len() == 1 {
            Ok(members.pop().expect("one member"))
        } else {
            Ok(Arc::new(OracleHandle::ensemble(members)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<Detection>);

    impl Detector for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn detect(&self, _: &GrayImage) -> Result<Vec<Detection>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, [20.0, 20.0, 30.0, 30.0]), 0.0);
        assert_eq!(iou(a, [10.0, 0.0, 20.0, 10.0]), 0.0);
        assert_eq!(iou(a, [5.0, 0.0, 15.0, 10.0]), 50.0 / 150.0);
    }

    #[test]
    fn fitness_examples() {
        let target = MaskBox::new(0, 0, 10, 10);
        assert_eq!(fitness(&[], &target, 0.5), 0.0);
        let two = [Detection::person([0.0, 0.0, 10.0, 10.0], 0.7), Detection::person([0.0, 0.0, 10.0, 9.0], 0.9)];
        assert_eq!(fitness(&two, &target, 0.5), 0.9);
        // a 10x3 strip inside the target has IoU 30/100
        let strip = [Detection::person([0.0, 0.0, 10.0, 3.0], 0.99)];
        assert_eq!(iou(strip[0].bbox(), target.corners()), 0.3);
        assert_eq!(fitness(&strip, &target, 0.5), 0.0);
        let car = [Detection { class_label: "car".into(), ..Detection::person([0.0, 0.0, 10.0, 10.0], 0.8) }];
        assert_eq!(fitness(&car, &target, 0.5), 0.0);
    }

    #[test]
    fn ensemble_means_and_counts() {
        let target = MaskBox::new(0, 0, 10, 10);
        let img = GrayImage::filled(10, 10, 0.0);
        let a = Arc::new(OracleHandle::custom(Fixed(vec![Detection::person([0.0, 0.0, 10.0, 10.0], 0.4)])));
        let b = Arc::new(OracleHandle::custom(Fixed(vec![Detection::person([0.0, 0.0, 10.0, 10.0], 0.8)])));
        let single = ensemble_fitness(&[a.clone()], &img, &target, 0.5).unwrap();
        assert_eq!(single, 0.4);
        let e = OracleHandle::ensemble(vec![a.clone(), b.clone()]).unwrap();
        assert!((e.objective(&img, &target, 0.5).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(a.queries(), 2);
        assert_eq!(b.queries(), 1);
        assert_eq!(e.queries(), 3);
        assert_eq!(e.passes_per_objective(), 2);
        let zeros: Vec<_> = (0..4).map(|_| Arc::new(OracleHandle::custom(Fixed(vec![])))).collect();
        assert_eq!(ensemble_fitness(&zeros, &img, &target, 0.5).unwrap(), 0.0);
        assert!(OracleHandle::ensemble(vec![]).is_err());
    }

    #[test]
    fn oracle_spec_parsing() {
        assert_eq!("stub:coverage".parse::<OracleSpec>().unwrap(), OracleSpec::Stub(StubKind::Coverage));
        assert_eq!("tcp:127.0.0.1:9000".parse::<OracleSpec>().unwrap(), OracleSpec::Tcp("127.0.0.1:9000".into()));
        assert_eq!("cmd:python3 bridge.py --x".parse::<OracleSpec>().unwrap(), OracleSpec::Cmd("python3 bridge.py --x".into()));
        assert!("coverage".parse::<OracleSpec>().is_err());
        assert!("stub:nope".parse::<OracleSpec>().is_err());
        assert!("tcp:".parse::<OracleSpec>().is_err());
        assert_eq!(OracleSpec::Stub(StubKind::Contrast).to_string(), "stub:contrast");
    }

    #[test]
    fn detection_clamping_keeps_in_range_bits() {
        let d = Detection::person([0.1 + 0.2, 1.0 / 3.0, 50.0, 70.0], 0.123456789);
        assert_eq!(d.clone().clamped(100, 100), d);
        let out = Detection::person([-3.0, 2.0, 120.0, 50.0], 1.5).clamped(100, 100);
        assert_eq!(out.bbox(), [0.0, 2.0, 100.0, 50.0]);
        assert_eq!(out.confidence, 1.0);
    }
}
