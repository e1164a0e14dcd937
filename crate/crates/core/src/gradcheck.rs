//! Central finite-difference audit of the full training objective.
//!
//! For both phases and every parameter block that enters the forward pass,
//! the analytic gradients of `L(S)`, `L(M)`, `L(R)`, `L(G)` and their total
//! are compared with central differences on a sample of coordinates plus
//! one random direction spanning the whole block. One perturbed forward
//! yields all five objectives.
//!
//! Freshly built models have zero biases, which puts ReLUs fed by an empty
//! pooled type exactly on their kink. [`jitter_biases`] moves the audited
//! model off it.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::VideoSample;
use crate::model::{BatchLoss, LossWeights, Model, Objective, Phase};
use crate::params::{Grads, Graph, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AuditOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Differences below this norm count as agreement; central differences
    /// of an O(10) loss carry rounding noise around 1e-10.
    pub abs_floor: f64,
    /// Blocks with more entries are checked on this many sampled coordinates
    /// and one random unit direction.
    pub coords_per_block: usize,
    /// Test hook: shifts the analytic gradient of the named block.
    pub corrupt: Option<String>,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-8,
            coords_per_block: 24,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub phase: Phase,
    pub objective: String,
    pub block: String,
    /// Compared entries, the random direction included.
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<BlockCheck>,
    /// Blocks that do not enter the forward pass of a phase.
    pub unused: Vec<(Phase, String)>,
    pub max_rel_err: f64,
    pub seconds: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn objective_values(g: &Graph, l: &BatchLoss) -> [f64; 5] {
    Objective::ALL.map(|o| g.tape.scalar(l.get(o)))
}

fn forward(store: &ParamStore, model: &Model, videos: &[&VideoSample], phase: Phase, w: &LossWeights) -> [f64; 5] {
    let mut g = Graph::new(store);
    let l = model.batch_loss(&mut g, videos, phase, w);
    objective_values(&g, &l)
}

/// Redraws every bias block from `N(0, std^2)`.
pub fn jitter_biases(model: &mut Model, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.name(id).ends_with(".b")).collect();
    for id in ids {
        for x in model.store.get_mut(id).as_mut_slice() {
            *x = normal.sample(&mut rng);
        }
    }
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let len = norm(&d);
    d.into_iter().map(|x| x / len).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)`, zero when both norms vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn audit(model: &Model, videos: &[&VideoSample], weights: &LossWeights, opts: &AuditOptions) -> AuditReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut unused = Vec::new();
    let mut store = model.store.clone();
    for phase in [Phase::Pretrain, Phase::Full] {
        let (grads, bound): (Vec<Grads>, Vec<bool>) = {
            let mut g = Graph::new(&store);
            let l = model.batch_loss(&mut g, videos, phase, weights);
            let grads = Objective::ALL.iter().map(|&o| g.gradients(l.get(o))).collect();
            (grads, store.ids().map(|id| g.is_bound(id)).collect())
        };
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            if !bound[id.index()] {
                unused.push((phase, name));
                continue;
            }
            let size = store.get(id).len();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (id.index() as u64).wrapping_mul(0x9e37_79b9));
            let coords: Vec<usize> = if size <= opts.coords_per_block {
                (0..size).collect()
            } else {
                let mut c = sample(&mut rng, size, opts.coords_per_block).into_vec();
                c.sort_unstable();
                c
            };
            let mut numeric = vec![Vec::with_capacity(coords.len() + 1); 5];
            for &k in &coords {
                let orig = store.get(id).as_slice()[k];
                store.get_mut(id).as_mut_slice()[k] = orig + opts.step;
                let plus = forward(&store, model, videos, phase, weights);
                store.get_mut(id).as_mut_slice()[k] = orig - opts.step;
                let minus = forward(&store, model, videos, phase, weights);
                store.get_mut(id).as_mut_slice()[k] = orig;
                for o in 0..5 {
                    numeric[o].push((plus[o] - minus[o]) / (2.0 * opts.step));
                }
            }
            let direction = random_direction(&mut rng, size);
            if size > coords.len() {
                let orig = store.get(id).clone();
                let shifted = |sign: f64| {
                    let mut t = orig.clone();
                    for (x, d) in t.as_mut_slice().iter_mut().zip(&direction) {
                        *x += sign * opts.step * d;
                    }
                    t
                };
                store.set(id, shifted(1.0));
                let plus = forward(&store, model, videos, phase, weights);
                store.set(id, shifted(-1.0));
                let minus = forward(&store, model, videos, phase, weights);
                store.set(id, orig);
                for o in 0..5 {
                    numeric[o].push((plus[o] - minus[o]) / (2.0 * opts.step));
                }
            }
            for (o, objective) in Objective::ALL.iter().enumerate() {
                let full = grads[o].get(id).as_slice();
                let mut analytic: Vec<f64> = coords.iter().map(|&k| full[k]).collect();
                if size > coords.len() {
                    analytic.push(crate::tensor::dot(full, &direction));
                }
                if opts.corrupt.as_deref() == Some(name.as_str()) {
                    analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
                }
                let rel_err = relative_error(&analytic, &numeric[o]);
                let diff: Vec<f64> = analytic.iter().zip(&numeric[o]).map(|(a, n)| a - n).collect();
                let abs_err = norm(&diff);
                checks.push(BlockCheck {
                    phase,
                    objective: objective.name().to_string(),
                    block: name.clone(),
                    coords: numeric[o].len(),
                    analytic_norm: norm(&analytic),
                    numeric_norm: norm(&numeric[o]),
                    abs_err,
                    rel_err,
                    passed: rel_err < opts.tolerance || abs_err < opts.abs_floor,
                });
            }
        }
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    AuditReport {
        checks,
        unused,
        max_rel_err,
        seconds: start.elapsed().as_secs_f64(),
    }
}
