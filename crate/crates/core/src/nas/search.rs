//! Generation-based Bayesian-optimization loop over a discrete search space.

use std::collections::HashSet;
use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::acquisition::{
    adaptive_beta, expected_improvement, Acquisition, DEFAULT_BETA_BASE, DEFAULT_GAMMA, DEFAULT_XI,
};
use super::gp::GpSurrogate;
use crate::arch::ArchSpec;
use crate::error::{CoreError, Result};
use crate::train::Metrics;

pub trait SearchSpace: Sync {
    type Point: Clone + PartialEq + Debug + Serialize + DeserializeOwned + Send + Sync;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Self::Point;
    fn mutate(&self, p: &Self::Point, rng: &mut ChaCha8Rng) -> Self::Point;
    fn encode(&self, p: &Self::Point) -> Vec<f64>;
}

/// The architecture space.
pub struct ArchSpace;

impl SearchSpace for ArchSpace {
    type Point = ArchSpec;
    fn sample(&self, rng: &mut ChaCha8Rng) -> ArchSpec {
        ArchSpec::random(rng)
    }
    fn mutate(&self, p: &ArchSpec, rng: &mut ChaCha8Rng) -> ArchSpec {
        p.mutate(rng)
    }
    fn encode(&self, p: &ArchSpec) -> Vec<f64> {
        p.encode()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub generations: usize,
    pub per_generation: usize,
    pub initial: usize,
    /// Hard cap on evaluations; the last generation is truncated to fit.
    pub budget: usize,
    pub acquisition: Acquisition,
    pub beta_base: f64,
    pub gamma: f64,
    pub xi: f64,
    pub n_random: usize,
    pub n_top: usize,
    pub mutations_per_top: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            generations: 10,
            per_generation: 10,
            initial: 10,
            budget: 100,
            acquisition: Acquisition::Ei,
            beta_base: DEFAULT_BETA_BASE,
            gamma: DEFAULT_GAMMA,
            xi: DEFAULT_XI,
            n_random: 2048,
            n_top: 5,
            mutations_per_top: 32,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial == 0 || self.initial > self.budget {
            return Err(CoreError::Config(format!(
                "need 1 ≤ initial ≤ budget, got {} and {}",
                self.initial, self.budget
            )));
        }
        if self.n_random == 0 && self.n_top == 0 {
            return Err(CoreError::Config("acquisition pool is empty".into()));
        }
        if self.beta_base < 0.0 || self.gamma < 0.0 || self.xi < 0.0 {
            return Err(CoreError::Config("β_base, γ and ξ must be non-negative".into()));
        }
        Ok(())
    }

    /// Evaluations actually run: `min(budget, initial + generations·per_generation)`.
    pub fn total_evaluations(&self) -> usize {
        self.budget.min(self.initial + self.generations * self.per_generation)
    }

    /// Training seed of the `index`-th evaluation.
    pub fn candidate_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64 + 1))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of one candidate evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    /// `None` marks a failed candidate.
    pub score: Option<f64>,
    pub failure: Option<String>,
    /// Mean validation regime uncertainty of the candidate's detector.
    pub uncertainty: Option<f64>,
    pub metrics: Option<Metrics>,
    pub param_count: Option<usize>,
}

impl Evaluation {
    pub fn scored(score: f64) -> Self {
        Self {
            score: Some(score),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalContext {
    pub index: usize,
    pub generation: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord<P> {
    pub index: usize,
    pub generation: usize,
    pub point: P,
    pub encoding: Vec<f64>,
    pub seed: u64,
    pub score: Option<f64>,
    pub failure: Option<String>,
    /// Acquisition value at proposal time (absent for the initial random designs).
    pub acquisition: Option<f64>,
    pub beta: Option<f64>,
    /// Detector uncertainty that set β for this proposal.
    pub uncertainty_t: Option<f64>,
    pub candidate_uncertainty: Option<f64>,
    pub metrics: Option<Metrics>,
    pub param_count: Option<usize>,
    pub report_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    pub evaluations: usize,
    pub failures: usize,
    pub best_index: Option<usize>,
    pub best_score: Option<f64>,
    pub mean_score: Option<f64>,
    pub best_so_far: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace<P> {
    pub records: Vec<EvalRecord<P>>,
    pub generations: Vec<GenerationSummary>,
}

impl<P> SearchTrace<P> {
    pub fn from_records(records: Vec<EvalRecord<P>>) -> Self {
        let generations = summarize(&records);
        Self { records, generations }
    }

    pub fn best(&self) -> Option<&EvalRecord<P>> {
        self.records
            .iter()
            .filter(|r| r.score.is_some())
            .fold(None, |acc: Option<&EvalRecord<P>>, r| match acc {
                Some(b) if b.score >= r.score => Some(b),
                _ => Some(r),
            })
    }

    /// Running maximum of successful scores after each evaluation.
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.records
            .iter()
            .map(|r| {
                if let Some(s) = r.score {
                    best = Some(best.map_or(s, |b| b.max(s)));
                }
                best
            })
            .collect()
    }
}

/// Per-generation best, mean and running best, recomputed from the records.
pub fn summarize<P>(records: &[EvalRecord<P>]) -> Vec<GenerationSummary> {
    let n_gen = records.iter().map(|r| r.generation + 1).max().unwrap_or(0);
    let mut running: Option<f64> = None;
    let mut out = Vec::new();
    for g in 0..n_gen {
        let recs: Vec<&EvalRecord<P>> = records.iter().filter(|r| r.generation == g).collect();
        if recs.is_empty() {
            continue;
        }
        let scored: Vec<(usize, f64)> = recs.iter().filter_map(|r| r.score.map(|s| (r.index, s))).collect();
        let best = scored
            .iter()
            .copied()
            .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((i, s)),
            });
        if let Some((_, s)) = best {
            running = Some(running.map_or(s, |r| r.max(s)));
        }
        out.push(GenerationSummary {
            generation: g,
            evaluations: recs.len(),
            failures: recs.len() - scored.len(),
            best_index: best.map(|b| b.0),
            best_score: best.map(|b| b.1),
            mean_score: (!scored.is_empty()).then(|| scored.iter().map(|s| s.1).sum::<f64>() / scored.len() as f64),
            best_so_far: running,
        });
    }
    out
}

/// Scores fed to the GP. Failed candidates get `worst − std` of the successful
/// scores (0 when nothing has succeeded yet).
pub fn gp_targets<P>(records: &[EvalRecord<P>]) -> Vec<f64> {
    let ok: Vec<f64> = records.iter().filter_map(|r| r.score).collect();
    let sentinel = if ok.is_empty() {
        0.0
    } else {
        let n = ok.len() as f64;
        let mean = ok.iter().sum::<f64>() / n;
        let std = (ok.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        ok.iter().cloned().fold(f64::INFINITY, f64::min) - std
    };
    records.iter().map(|r| r.score.unwrap_or(sentinel)).collect()
}

fn key(enc: &[f64]) -> Vec<u64> {
    enc.iter().map(|v| v.to_bits()).collect()
}

/// One proposed point with its acquisition value.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<P> {
    pub point: P,
    pub encoding: Vec<f64>,
    pub acquisition: f64,
}

/// Maximizes the acquisition over random samples plus mutations of the
/// top-scoring observations, never returning an encoding in `taken`.
#[allow(clippy::too_many_arguments)]
pub fn propose_next<S: SearchSpace>(
    space: &S,
    gp: &GpSurrogate,
    cfg: &SearchConfig,
    observed: &[(S::Point, f64)],
    taken: &HashSet<Vec<u64>>,
    beta: f64,
    best: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Proposal<S::Point>> {
    let mut pool: Vec<S::Point> = (0..cfg.n_random).map(|_| space.sample(rng)).collect();
    let mut ranked: Vec<&(S::Point, f64)> = observed.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (p, _) in ranked.iter().take(cfg.n_top) {
        for _ in 0..cfg.mutations_per_top {
            pool.push(space.mutate(p, rng));
        }
    }
    let mut best_prop: Option<Proposal<S::Point>> = None;
    let mut seen = HashSet::new();
    for p in pool {
        let enc = space.encode(&p);
        let k = key(&enc);
        if taken.contains(&k) || !seen.insert(k) {
            continue;
        }
        let (mu, sigma) = gp.predict(&enc)?;
        let a = match cfg.acquisition {
            Acquisition::Ei => expected_improvement(mu, sigma, best, cfg.xi),
            Acquisition::Ucb => mu + beta * sigma,
        };
        if best_prop.as_ref().is_none_or(|b| a > b.acquisition) {
            best_prop = Some(Proposal {
                point: p,
                encoding: enc,
                acquisition: a,
            });
        }
    }
    if let Some(p) = best_prop {
        return Ok(p);
    }
    // every pooled point was a duplicate: keep mutating observed points
    for _ in 0..10_000 {
        let base = &observed[rng.random_range(0..observed.len())].0;
        let p = space.mutate(base, rng);
        let enc = space.encode(&p);
        if !taken.contains(&key(&enc)) {
            let (mu, sigma) = gp.predict(&enc)?;
            let a = match cfg.acquisition {
                Acquisition::Ei => expected_improvement(mu, sigma, best, cfg.xi),
                Acquisition::Ucb => mu + beta * sigma,
            };
            return Ok(Proposal {
                point: p,
                encoding: enc,
                acquisition: a,
            });
        }
    }
    Err(CoreError::Surrogate("search space exhausted: no unevaluated point found".into()))
}

/// Parallel candidate workers, from `REGIMENAS_THREADS` (default 1).
pub fn worker_count() -> usize {
    std::env::var("REGIMENAS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

struct Planned<P> {
    index: usize,
    point: P,
    encoding: Vec<f64>,
    acquisition: Option<f64>,
    beta: Option<f64>,
    uncertainty_t: Option<f64>,
}

/// Runs the initial random design and the BO generations. Records already in
/// `prior` (a previous partial run with the same config) are reused after
/// checking that the recomputed proposals match them.
///
/// `on_record` sees every record in index order together with the evaluator's
/// extra output (`None` for reused records).
pub fn bo_search<S, T, F, C>(space: &S, cfg: &SearchConfig, prior: &[EvalRecord<S::Point>], eval: F, mut on_record: C) -> Result<SearchTrace<S::Point>>
where
    S: SearchSpace,
    T: Send,
    F: Fn(&S::Point, &EvalContext) -> (Evaluation, T) + Sync,
    C: FnMut(&EvalRecord<S::Point>, Option<T>) -> Result<()>,
{
    cfg.validate()?;
    let total = cfg.total_evaluations();
    if prior.len() > total {
        return Err(CoreError::Config(format!(
            "trace has {} records but the config allows {total}",
            prior.len()
        )));
    }
    let workers = worker_count();
    let mut records: Vec<EvalRecord<S::Point>> = Vec::with_capacity(total);
    let mut taken: HashSet<Vec<u64>> = HashSet::new();

    let mut generation = 0;
    while records.len() < total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(generation as u64);
        let n = if generation == 0 {
            cfg.initial
        } else {
            cfg.per_generation.min(total - records.len())
        };
        let mut plan: Vec<Planned<S::Point>> = Vec::with_capacity(n);
        let start = records.len();
        if generation == 0 {
            let mut attempts = 0;
            while plan.len() < n {
                let p = space.sample(&mut rng);
                let enc = space.encode(&p);
                attempts += 1;
                if taken.insert(key(&enc)) {
                    plan.push(Planned {
                        index: start + plan.len(),
                        point: p,
                        encoding: enc,
                        acquisition: None,
                        beta: None,
                        uncertainty_t: None,
                    });
                } else if attempts > 100_000 {
                    return Err(CoreError::Surrogate("cannot draw distinct initial designs".into()));
                }
            }
        } else {
            let targets = gp_targets(&records);
            let xs: Vec<Vec<f64>> = records.iter().map(|r| r.encoding.clone()).collect();
            let observed: Vec<(S::Point, f64)> = records.iter().map(|r| r.point.clone()).zip(targets.iter().copied()).collect();
            let best = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let uncertainty = records
                .last()
                .and_then(|r| r.candidate_uncertainty)
                .unwrap_or(0.0)
                .clamp(0.0, 1.0);
            let beta = adaptive_beta(cfg.beta_base, cfg.gamma, uncertainty)?;
            let fitted = GpSurrogate::fit(xs, targets);
            match fitted {
                Ok(mut gp) => {
                    for j in 0..n {
                        let prop = propose_next(space, &gp, cfg, &observed, &taken, beta, best, &mut rng)?;
                        taken.insert(key(&prop.encoding));
                        if j + 1 < n {
                            // kriging believer: pretend the posterior mean was observed
                            let (mu, _) = gp.predict(&prop.encoding)?;
                            gp = gp.condition_on(prop.encoding.clone(), mu)?;
                        }
                        plan.push(Planned {
                            index: start + j,
                            point: prop.point,
                            encoding: prop.encoding,
                            acquisition: Some(prop.acquisition),
                            beta: (cfg.acquisition == Acquisition::Ucb).then_some(beta),
                            uncertainty_t: Some(uncertainty),
                        });
                    }
                }
                Err(_) => {
                    // surrogate unusable: fall back to random designs for this generation
                    while plan.len() < n {
                        let p = space.sample(&mut rng);
                        let enc = space.encode(&p);
                        if taken.insert(key(&enc)) {
                            plan.push(Planned {
                                index: start + plan.len(),
                                point: p,
                                encoding: enc,
                                acquisition: None,
                                beta: None,
                                uncertainty_t: Some(uncertainty),
                            });
                        }
                    }
                }
            }
        }

        let mut pending: Vec<Planned<S::Point>> = Vec::new();
        for item in plan {
            if item.index < prior.len() {
                let old = &prior[item.index];
                if old.encoding != item.encoding || old.generation != generation {
                    return Err(CoreError::Config(format!(
                        "trace record {} does not match the proposal recomputed from the config",
                        item.index
                    )));
                }
                on_record(old, None)?;
                records.push(old.clone());
            } else {
                pending.push(item);
            }
        }
        for chunk in pending.chunks(workers) {
            let results: Vec<(Evaluation, T)> = if chunk.len() == 1 {
                let it = &chunk[0];
                let ctx = EvalContext {
                    index: it.index,
                    generation,
                    seed: cfg.candidate_seed(it.index),
                };
                vec![eval(&it.point, &ctx)]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|it| {
                            let ctx = EvalContext {
                                index: it.index,
                                generation,
                                seed: cfg.candidate_seed(it.index),
                            };
                            let eval = &eval;
                            s.spawn(move || eval(&it.point, &ctx))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("candidate worker panicked"))
                        .collect()
                })
            };
            for (it, (ev, extra)) in chunk.iter().zip(results) {
                let rec = EvalRecord {
                    index: it.index,
                    generation,
                    point: it.point.clone(),
                    encoding: it.encoding.clone(),
                    seed: cfg.candidate_seed(it.index),
                    score: ev.score.filter(|s| s.is_finite()),
                    failure: ev
                        .failure
                        .or_else(|| ev.score.filter(|s| !s.is_finite()).map(|s| format!("non-finite score {s}"))),
                    acquisition: it.acquisition,
                    beta: it.beta,
                    uncertainty_t: it.uncertainty_t,
                    candidate_uncertainty: ev.uncertainty,
                    metrics: ev.metrics,
                    param_count: ev.param_count,
                    report_id: format!("gen{generation}/cand{}", it.index - start),
                };
                on_record(&rec, Some(extra))?;
                records.push(rec);
            }
        }
        generation += 1;
    }
    Ok(SearchTrace::from_records(records))
}

/// Uniform random search with the same budget, for comparison.
pub fn random_search<S: SearchSpace, F: Fn(&S::Point) -> f64>(space: &S, budget: usize, seed: u64, f: F) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut taken = HashSet::new();
    let mut scores = Vec::with_capacity(budget);
    let mut attempts = 0;
    while scores.len() < budget && attempts < 100 * budget + 1000 {
        attempts += 1;
        let p = space.sample(&mut rng);
        if taken.insert(key(&space.encode(&p))) {
            scores.push(f(&p));
        }
    }
    scores
}
