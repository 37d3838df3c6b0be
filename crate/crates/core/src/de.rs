//! Differential evolution over block genomes.
//!
//! Each generation derives one trial per individual: a difference-vector mutant
//! (out-of-range components re-drawn uniformly inside their bounds), mixed with
//! the individual by per-component crossover, then kept if its fitness does not
//! exceed the individual's. Fitness is the mean target confidence over EOT draws.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eot::{self, EotConfig};
use crate::error::{invalid, Error, Result};
use crate::oracle::{OracleHandle, DEFAULT_IOU_MATCH};
use crate::patch::{Genome, GenomeDocument, GenomeTemplate, MaskBox};
use crate::raster::GrayImage;
use crate::rng::{purpose, stream, StreamRng};

/// Which vector the scaled difference is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationBase {
    /// The individual being varied.
    #[default]
    Current,
    /// A fourth, randomly chosen individual (DE/rand/1).
    Rand1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub pop_size: usize,
    pub steps: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    /// The run stops once the best fitness drops below this.
    pub early_stop_conf: f64,
    pub seed: u64,
    pub base: MutationBase,
    /// Threads used to evaluate a generation. Results do not depend on it.
    pub workers: usize,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            pop_size: 100,
            steps: 10,
            mutation_rate: 0.5,
            crossover_rate: 0.6,
            early_stop_conf: 0.5,
            seed: 0,
            base: MutationBase::Current,
            workers: 1,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 4 {
            return Err(invalid(format!("population size must be at least 4, got {}", self.pop_size)));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(self.mutation_rate > 0.0 && self.mutation_rate.is_finite()) {
            return Err(invalid(format!("mutation rate must be positive, got {}", self.mutation_rate)));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(invalid(format!("crossover rate must lie in [0, 1], got {}", self.crossover_rate)));
        }
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        Ok(())
    }

    /// Upper bound on objective evaluations for one run.
    pub fn max_evaluations(&self) -> u64 {
        (self.pop_size * (self.steps + 1)) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub members: Vec<Vec<f64>>,
    /// Cached fitness per member; NaN until evaluated.
    pub fitness: Vec<f64>,
    pub generation: usize,
}

impl Population {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// Best fitness after evaluating the initial population, then after each generation.
    pub best_fitness: Vec<f64>,
    pub best_genome: GenomeDocument,
    pub queries: u64,
    pub evaluations: u64,
    /// Completed generations, not counting the initial population.
    pub generations: usize,
    pub terminated_early: bool,
    pub mask: MaskBox,
}

impl RunTrace {
    /// Lowest fitness observed, if anything was evaluated.
    pub fn best(&self) -> Option<f64> {
        self.best_fitness.last().copied()
    }

    pub fn genome(&self) -> Result<Genome> {
        self.best_genome.clone().into_genome()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// An attack aborted by an oracle error; `trace` holds everything up to the failure.
#[derive(Debug, Error)]
#[error("attack aborted after {} evaluations: {error}", trace.evaluations)]
pub struct AttackFailure {
    pub trace: RunTrace,
    #[source]
    pub error: Error,
}

fn check_bounds(template: &GenomeTemplate) -> Result<()> {
    if template.bounds_lo.len() != template.dim() || template.bounds_hi.len() != template.dim() {
        return Err(invalid("template bounds length does not match 5k"));
    }
    for (d, (lo, hi)) in template.bounds_lo.iter().zip(&template.bounds_hi).enumerate() {
        if !(lo <= hi) {
            return Err(invalid(format!("gene {d}: lower bound {lo} exceeds upper bound {hi}")));
        }
    }
    Ok(())
}

#[inline]
fn draw_in<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.gen::<f64>()
    }
}

/// `pop_size` genomes with every gene uniform in its bounds, quantized genes snapped.
pub fn init_population<R: Rng + ?Sized>(config: &DeConfig, template: &GenomeTemplate, rng: &mut R) -> Result<Population> {
    check_bounds(template)?;
    let members = (0..config.pop_size)
        .map(|_| {
            let mut g: Vec<f64> = template
                .bounds_lo
                .iter()
                .zip(&template.bounds_hi)
                .map(|(&lo, &hi)| draw_in(rng, lo, hi))
                .collect();
            template.snap(&mut g);
            g
        })
        .collect();
    Ok(Population { members, fitness: vec![f64::NAN; config.pop_size], generation: 0 })
}

/// `base + rate · (a − b)`, with each out-of-range component replaced by a
/// uniform draw inside its bounds, then quantized.
pub fn mutant<R: Rng + ?Sized>(
    base: &[f64],
    a: &[f64],
    b: &[f64],
    rate: f64,
    template: &GenomeTemplate,
    rng: &mut R,
) -> Vec<f64> {
    let mut out: Vec<f64> = (0..base.len())
        .map(|d| {
            let v = base[d] + rate * (a[d] - b[d]);
            let (lo, hi) = (template.bounds_lo[d], template.bounds_hi[d]);
            if (lo..=hi).contains(&v) {
                v
            } else {
                draw_in(rng, lo, hi)
            }
        })
        .collect();
    template.snap(&mut out);
    out
}

/// Picks `n` distinct indices in `0..len`, all different from `exclude`.
fn distinct_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, exclude: usize, n: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        let i = rng.gen_range(0..len);
        if i != exclude && !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Mutant for individual `g1`, using partners `g2 != g3`, both different from `g1`.
pub fn mutate<R: Rng + ?Sized>(
    pop: &Population,
    g1: usize,
    rate: f64,
    base: MutationBase,
    template: &GenomeTemplate,
    rng: &mut R,
) -> Vec<f64> {
    let m = &pop.members;
    match base {
        MutationBase::Current => {
            let p = distinct_indices(rng, m.len(), g1, 2);
            mutant(&m[g1], &m[p[0]], &m[p[1]], rate, template, rng)
        }
        MutationBase::Rand1 => {
            let p = distinct_indices(rng, m.len(), g1, 3);
            mutant(&m[p[0]], &m[p[1]], &m[p[2]], rate, template, rng)
        }
    }
}

/// Per component, takes the parent's value when a uniform draw in `(0, 1]` is at
/// most `rate`, otherwise keeps the child's.
pub fn crossover<R: Rng + ?Sized>(child: &[f64], parent: &[f64], rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if child.len() != parent.len() {
        return Err(invalid(format!("crossover of vectors with lengths {} and {}", child.len(), parent.len())));
    }
    Ok(child
        .iter()
        .zip(parent)
        .map(|(&c, &p)| {
            let r = 1.0 - rng.gen::<f64>();
            if r <= rate {
                p
            } else {
                c
            }
        })
        .collect())
}

/// The parent survives only if the child is strictly worse.
pub fn select<'a, T: ?Sized>(parent_fitness: f64, child_fitness: f64, parent: &'a T, child: &'a T) -> &'a T {
    if child_fitness > parent_fitness {
        parent
    } else {
        child
    }
}

/// Mean objective over `eot.n_samples` transform draws.
pub fn eot_fitness<R: Rng + ?Sized>(
    genome: &Genome,
    image: &GrayImage,
    mask: &MaskBox,
    oracle: &OracleHandle,
    eot: &EotConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut sum = 0.0;
    for _ in 0..eot.n_samples {
        let t = eot::sample(eot, rng);
        let adv = eot::apply(&t, image, genome, mask);
        sum += oracle.objective(&adv, mask, DEFAULT_IOU_MATCH)?;
    }
    Ok(sum / eot.n_samples as f64)
}

/// Runs the attack with stream id 0. See [`run_attack_keyed`].
pub fn run_attack(
    image: &GrayImage,
    mask: &MaskBox,
    oracle: &OracleHandle,
    de: &DeConfig,
    eot: &EotConfig,
    template: &GenomeTemplate,
) -> std::result::Result<RunTrace, AttackFailure> {
    run_attack_keyed(image, mask, oracle, de, eot, template, 0)
}

struct Attack<'a> {
    image: &'a GrayImage,
    mask: &'a MaskBox,
    oracle: &'a OracleHandle,
    de: &'a DeConfig,
    eot: &'a EotConfig,
    template: &'a GenomeTemplate,
    stream_id: u64,
    passes: u64,
}

impl Attack<'_> {
    fn eot_rng(&self, generation: usize, index: usize) -> StreamRng {
        stream(self.eot.seed, &[self.stream_id, generation as u64, index as u64, purpose::EOT])
    }

    /// Evaluates `candidates` in index order semantics; returns the fitness of the
    /// longest successful prefix and the first error, if any.
    fn evaluate(&self, candidates: &[Vec<f64>], generation: usize) -> (Vec<f64>, Option<Error>) {
        let one = |i: usize| -> Result<f64> {
            let genome = self.template.decode(&candidates[i])?;
            let mut rng = self.eot_rng(generation, i);
            eot_fitness(&genome, self.image, self.mask, self.oracle, self.eot, &mut rng)
        };
        let results: Vec<Result<f64>> = if self.de.workers > 1 {
            (0..candidates.len()).into_par_iter().map(one).collect()
        } else {
            (0..candidates.len()).map(one).collect()
        };
        let mut ok = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(f) => ok.push(f),
                Err(e) => return (ok, Some(e)),
            }
        }
        (ok, None)
    }

    fn run(&self, observe: &mut (dyn FnMut(&Population) + Send)) -> std::result::Result<RunTrace, AttackFailure> {
        let mut init_rng = stream(self.de.seed, &[self.stream_id, 0, 0, purpose::INIT]);
        let mut pop = match init_population(self.de, self.template, &mut init_rng) {
            Ok(p) => p,
            Err(error) => return Err(AttackFailure { trace: self.empty_trace(), error }),
        };

        let mut best_fit = f64::INFINITY;
        let mut best_genes = pop.members[0].clone();
        let mut trace = self.empty_trace();

        let (fits, err) = self.evaluate(&pop.members, 0);
        for (i, &f) in fits.iter().enumerate() {
            pop.fitness[i] = f;
            if f < best_fit {
                best_fit = f;
                best_genes = pop.members[i].clone();
            }
        }
        trace.evaluations += fits.len() as u64;
        if let Some(error) = err {
            if best_fit.is_finite() {
                trace.best_fitness.push(best_fit);
            }
            return Err(self.fail(trace, &best_genes, error));
        }
        trace.best_fitness.push(best_fit);
        observe(&pop);

        let stop = |v: f64| v < self.de.early_stop_conf;
        if stop(best_fit) || self.template.is_point() {
            trace.terminated_early = true;
            return Ok(self.finish(trace, &best_genes));
        }

        for step in 1..=self.de.steps {
            let trials: Vec<Vec<f64>> = (0..pop.len())
                .map(|i| {
                    let mut rng = stream(self.de.seed, &[self.stream_id, step as u64, i as u64, purpose::VARIATION]);
                    let m = mutate(&pop, i, self.de.mutation_rate, self.de.base, self.template, &mut rng);
                    crossover(&m, &pop.members[i], self.de.crossover_rate, &mut rng).expect("equal lengths")
                })
                .collect();

            let (fits, err) = self.evaluate(&trials, step);
            for (i, &f) in fits.iter().enumerate() {
                if f < best_fit {
                    best_fit = f;
                    best_genes = trials[i].clone();
                }
            }
            trace.evaluations += fits.len() as u64;
            if let Some(error) = err {
                trace.best_fitness.push(best_fit);
                return Err(self.fail(trace, &best_genes, error));
            }

            for (i, trial) in trials.into_iter().enumerate() {
                if select(pop.fitness[i], fits[i], &pop.members[i], &trial) == &trial {
                    pop.members[i] = trial;
                    pop.fitness[i] = fits[i];
                }
            }
            pop.generation = step;
            trace.generations = step;
            trace.best_fitness.push(best_fit);
            observe(&pop);

            if stop(best_fit) {
                trace.terminated_early = step < self.de.steps;
                break;
            }
        }
        Ok(self.finish(trace, &best_genes))
    }

    fn empty_trace(&self) -> RunTrace {
        RunTrace {
            best_fitness: Vec::new(),
            best_genome: GenomeDocument {
                k: 0,
                bounds: crate::patch::BoundsDocument { lo: Vec::new(), hi: Vec::new() },
                genes: Vec::new(),
            },
            queries: 0,
            evaluations: 0,
            generations: 0,
            terminated_early: false,
            mask: *self.mask,
        }
    }

    fn finish(&self, mut trace: RunTrace, best: &[f64]) -> RunTrace {
        trace.queries = trace.evaluations * self.eot.n_samples as u64 * self.passes;
        trace.best_genome = GenomeDocument {
            k: self.template.k,
            bounds: crate::patch::BoundsDocument {
                lo: self.template.bounds_lo.clone(),
                hi: self.template.bounds_hi.clone(),
            },
            genes: best.to_vec(),
        };
        trace
    }

    fn fail(&self, trace: RunTrace, best: &[f64], error: Error) -> AttackFailure {
        AttackFailure { trace: self.finish(trace, best), error }
    }
}

/// Optimizes block parameters against `oracle` on one image.
///
/// Random streams are keyed by `(seed, stream_id, generation, individual)`, so a
/// fixed seed gives the same trace for any worker count. The initial population
/// is evaluated once before the first generation. The run stops after the
/// generation in which the best fitness falls below `early_stop_conf`, or right
/// after the initial evaluation when the search space is a single point.
pub fn run_attack_keyed(
    image: &GrayImage,
    mask: &MaskBox,
    oracle: &OracleHandle,
    de: &DeConfig,
    eot: &EotConfig,
    template: &GenomeTemplate,
    stream_id: u64,
) -> std::result::Result<RunTrace, AttackFailure> {
    run_attack_observed(image, mask, oracle, de, eot, template, stream_id, &mut |_| {})
}

/// [`run_attack_keyed`], calling `observe` with the population after the
/// initial evaluation and after every generation.
#[allow(clippy::too_many_arguments)]
pub fn run_attack_observed(
    image: &GrayImage,
    mask: &MaskBox,
    oracle: &OracleHandle,
    de: &DeConfig,
    eot: &EotConfig,
    template: &GenomeTemplate,
    stream_id: u64,
    observe: &mut (dyn FnMut(&Population) + Send),
) -> std::result::Result<RunTrace, AttackFailure> {
    let attack = Attack { image, mask, oracle, de, eot, template, stream_id, passes: oracle.passes_per_objective() };
    let checks = de.validate().and_then(|_| eot.validate()).and_then(|_| mask.validate(image.width(), image.height()));
    if let Err(error) = checks {
        return Err(AttackFailure { trace: attack.empty_trace(), error });
    }
    if de.workers > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(de.workers).build() {
            Ok(pool) => pool.install(|| attack.run(observe)),
            Err(e) => Err(AttackFailure { trace: attack.empty_trace(), error: invalid(format!("thread pool: {e}")) }),
        }
    } else {
        attack.run(observe)
    }
}
