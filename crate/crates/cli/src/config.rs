//! Run configuration: config file, then `IRBLOCK_*` environment, then flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::Args;
use irblock_core::eval::CampaignConfig;
use irblock_core::oracle::stub::{StubKind, StubSpec};
use irblock_core::oracle::{OracleProvider, OracleSpec};
use irblock_core::patch::{BlockBounds, Range, DEFAULT_L_MAX};
use irblock_core::{DeConfig, EotConfig, GenomeTemplate, MutationBase, Quantization};
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Fully resolved settings of a run. Written to `config.json` in every output
/// directory and accepted back through `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub oracle: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub k: usize,
    pub quantization: Quantization,
    pub l_max: f64,
    pub bounds: BlockBounds,
    pub de: DeConfig,
    pub eot: EotConfig,
    pub stub: StubSpec,
    pub timeout_secs: f64,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            oracle: Vec::new(),
            out: None,
            seed: 0,
            k: 7,
            quantization: Quantization::Physical,
            l_max: DEFAULT_L_MAX,
            bounds: BlockBounds::default(),
            de: DeConfig::default(),
            eot: EotConfig::default(),
            stub: StubSpec::default(),
            timeout_secs: 30.0,
            conf_threshold: 0.5,
            iou_threshold: 0.5,
            workers: 1,
        }
    }
}

fn parse_base(s: &str) -> Result<MutationBase, String> {
    match s {
        "current" => Ok(MutationBase::Current),
        "rand1" => Ok(MutationBase::Rand1),
        _ => Err(format!("unknown mutation base {s:?} (expected current or rand1)")),
    }
}

fn parse_range(s: &str) -> Result<Range, String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let lo = lo.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = hi.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok(Range::new(lo, hi))
}

/// Flags shared by every dataset-level command. Each one overrides the
/// config file when given.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long, env = "IRBLOCK_CONFIG")]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSON).
    #[arg(long, env = "IRBLOCK_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Oracle: stub:coverage, stub:contrast, cmd:<command> or tcp:<host:port>.
    /// Repeat for an ensemble.
    #[arg(long, env = "IRBLOCK_ORACLE")]
    pub oracle: Vec<String>,
    #[arg(long, env = "IRBLOCK_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "IRBLOCK_SEED")]
    pub seed: Option<u64>,
    /// Number of blocks.
    #[arg(long, env = "IRBLOCK_K")]
    pub k: Option<usize>,
    /// Block length as a fraction of the mask width.
    #[arg(long, env = "IRBLOCK_LENGTH")]
    pub length: Option<f64>,
    /// none, grid01 or physical.
    #[arg(long, env = "IRBLOCK_QUANTIZATION")]
    pub quantization: Option<Quantization>,
    /// Population size.
    #[arg(long, env = "IRBLOCK_POP")]
    pub pop: Option<usize>,
    #[arg(long, env = "IRBLOCK_STEPS")]
    pub steps: Option<usize>,
    /// Mutation rate.
    #[arg(long, env = "IRBLOCK_RM")]
    pub rm: Option<f64>,
    /// Crossover rate.
    #[arg(long, env = "IRBLOCK_RC")]
    pub rc: Option<f64>,
    #[arg(long, env = "IRBLOCK_EARLY_STOP")]
    pub early_stop: Option<f64>,
    /// current or rand1.
    #[arg(long, env = "IRBLOCK_BASE", value_parser = parse_base)]
    pub base: Option<MutationBase>,
    /// EOT samples per fitness evaluation.
    #[arg(long, env = "IRBLOCK_EOT_SAMPLES")]
    pub eot_samples: Option<usize>,
    #[arg(long, env = "IRBLOCK_BRIGHTNESS", value_parser = parse_range)]
    pub brightness: Option<Range>,
    #[arg(long, env = "IRBLOCK_DOWNSAMPLE", value_parser = parse_range)]
    pub downsample: Option<Range>,
    #[arg(long, env = "IRBLOCK_TRANSLATE")]
    pub translate: Option<f64>,
    #[arg(long, env = "IRBLOCK_VALUE_JITTER")]
    pub value_jitter: Option<f64>,
    /// Disable every EOT transform.
    #[arg(long)]
    pub identity_eot: bool,
    /// Stub sensitivity.
    #[arg(long, env = "IRBLOCK_LAMBDA")]
    pub lambda: Option<f64>,
    /// Seconds to wait for a wire oracle reply.
    #[arg(long, env = "IRBLOCK_TIMEOUT")]
    pub timeout: Option<f64>,
    /// Scenes processed concurrently.
    #[arg(long, env = "IRBLOCK_WORKERS")]
    pub workers: Option<usize>,
}

fn load_file(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
    };
    Ok(cfg)
}

impl RunArgs {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => load_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if self.manifest.is_some() {
            c.manifest = self.manifest.clone();
        }
        if !self.oracle.is_empty() {
            c.oracle = self.oracle.clone();
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        set!(self.seed => c.seed);
        set!(self.k => c.k);
        set!(self.quantization => c.quantization);
        if let Some(l) = self.length {
            c.bounds.rel_length = Range::fixed(l);
        }
        set!(self.pop => c.de.pop_size);
        set!(self.steps => c.de.steps);
        set!(self.rm => c.de.mutation_rate);
        set!(self.rc => c.de.crossover_rate);
        set!(self.early_stop => c.de.early_stop_conf);
        set!(self.base => c.de.base);
        if self.identity_eot {
            c.eot = EotConfig::identity();
        }
        set!(self.eot_samples => c.eot.n_samples);
        if let Some(r) = self.brightness {
            c.eot.brightness_range = [r.lo, r.hi];
        }
        if let Some(r) = self.downsample {
            c.eot.downsample_range = [r.lo, r.hi];
        }
        set!(self.translate => c.eot.translate_px);
        set!(self.value_jitter => c.eot.value_jitter);
        set!(self.lambda => c.stub.lambda);
        set!(self.timeout => c.timeout_secs);
        set!(self.workers => c.workers);
        // one seed drives every stream
        c.de.seed = c.seed;
        c.eot.seed = c.seed;
        c.de.workers = 1;
        Ok(c)
    }
}

impl RunConfig {
    pub fn template(&self) -> anyhow::Result<GenomeTemplate> {
        Ok(GenomeTemplate::with_l_max(self.k, self.bounds, self.quantization, self.l_max)?)
    }

    pub fn campaign(&self) -> anyhow::Result<CampaignConfig> {
        Ok(CampaignConfig {
            de: self.de.clone(),
            eot: self.eot.clone(),
            template: self.template()?,
            conf_threshold: self.conf_threshold,
            iou_threshold: self.iou_threshold,
            workers: self.workers.max(1),
        })
    }

    pub fn manifest_path(&self) -> anyhow::Result<&Path> {
        let Some(p) = self.manifest.as_deref() else {
            return Err(Usage("--manifest is required".into()).into());
        };
        if !p.exists() {
            return Err(Usage(format!("manifest {} does not exist", p.display())).into());
        }
        Ok(p)
    }

    pub fn out_dir(&self) -> anyhow::Result<&Path> {
        let Some(p) = self.out.as_deref() else {
            return Err(Usage("--out is required".into()).into());
        };
        std::fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))?;
        Ok(p)
    }

    pub fn oracle_specs(&self) -> anyhow::Result<Vec<OracleSpec>> {
        if self.oracle.is_empty() {
            return Err(Usage("--oracle is required".into()).into());
        }
        let specs = self
            .oracle
            .iter()
            .map(|s| s.parse::<OracleSpec>().map_err(|e| Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if specs.iter().filter(|s| matches!(s, OracleSpec::Stub(_))).count() > 1 {
            log::warn!("several stub oracles share the same stub parameters");
        }
        Ok(specs)
    }

    pub fn provider(&self) -> anyhow::Result<OracleProvider> {
        let specs = self.oracle_specs()?;
        if !(self.timeout_secs > 0.0) {
            bail!("timeout must be positive");
        }
        let stub = StubSpec { kind: StubKind::Coverage, ..self.stub.clone() };
        Ok(OracleProvider::connect(&specs, stub, Duration::from_secs_f64(self.timeout_secs))?)
    }

    pub fn write_echo(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "k = 4\nseed = 9\n[de]\npop_size = 12\nsteps = 2\n").unwrap();
        let args = RunArgs { config: Some(p), steps: Some(5), ..RunArgs::default() };
        let c = args.resolve().unwrap();
        assert_eq!((c.k, c.seed, c.de.pop_size, c.de.steps, c.de.seed, c.eot.seed), (4, 9, 12, 5, 9, 9));
        assert_eq!(c.de.mutation_rate, 0.5);
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunArgs { k: Some(3), length: Some(0.1), ..RunArgs::default() }.resolve().unwrap();
        c.write_echo(dir.path()).unwrap();
        let back = RunArgs { config: Some(dir.path().join("config.json")), ..RunArgs::default() }.resolve().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_field_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "k = 4\npopsize = 3\n").unwrap();
        let err = format!("{:#}", RunArgs { config: Some(p), ..RunArgs::default() }.resolve().unwrap_err());
        assert!(err.contains("popsize"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }
}
