//! Evolutionary pruning with retraining, gradient-weighted masks and
//! rewinding.
//!
//! A pool of subnetworks is evolved. Each iteration picks one member, trains
//! it for a few batches while its masks are recomputed from the importance
//! score `α·EMA|grad| + (1−α)·|w|`, and either accepts the result (raising
//! the sparsity of the layers it touched) or rewinds it and perturbs its
//! sparsity plan by mutation or crossover.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::nn::{train_batches, GradStats, ToyNet};

pub const ALPHA_MIN: f64 = 0.05;
pub const ALPHA_MAX: f64 = 0.9;
pub const ALPHA_GAIN: f64 = 1.0;
pub const MAX_SPARSITY: f64 = 0.99;
/// Fraction of the dataset held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Minimum accuracy change (fraction) that counts as progress; negative
    /// values tolerate a small drop per step.
    pub acc_threshold: f64,
    pub iter_nr: usize,
    /// Training batches per iteration.
    pub batch_nr: usize,
    pub pool_size: usize,
    pub initial_sparsity_range: [f64; 2],
    pub mask_increment: f64,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Weighted sparsity the returned solution must reach when possible.
    pub target_sparsity: f64,
    /// Iterations without pool-best improvement before the pool is
    /// differentiated.
    pub stagnation_window: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            acc_threshold: -0.01,
            iter_nr: 300,
            batch_nr: 8,
            pool_size: 4,
            initial_sparsity_range: [0.3, 0.5],
            mask_increment: 0.05,
            seed: 0,
            lr: 0.05,
            batch_size: 32,
            target_sparsity: 0.8,
            stagnation_window: 10,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.initial_sparsity_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(config_err!("initial_sparsity_range must satisfy 0 <= lo <= hi < 1, got [{lo}, {hi}]"));
        }
        if self.pool_size < 2 {
            return Err(config_err!("pool_size must be at least 2, got {}", self.pool_size));
        }
        if !(0.0..1.0).contains(&self.mask_increment) {
            return Err(config_err!("mask_increment must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(config_err!("target_sparsity must be in [0, 1)"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(config_err!("lr must be finite and non-negative, batch_size positive"));
        }
        if !self.acc_threshold.is_finite() || self.stagnation_window == 0 {
            return Err(config_err!("acc_threshold must be finite and stagnation_window positive"));
        }
        Ok(())
    }
}

/// One pool member.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub net: ToyNet,
    /// Per-layer target sparsities applied at the next mask recomputation.
    pub sparsities: Vec<f64>,
    pub accuracy: f64,
    pub age: usize,
    pub grad_stats: GradStats,
}

impl Solution {
    pub fn weighted_sparsity(&self) -> f64 {
        self.net.weighted_sparsity()
    }

    fn same_architecture(&self, other: &Solution) -> bool {
        self.net.spec == other.net.spec && self.sparsities.len() == other.sparsities.len()
    }
}

/// Search state shared by all pool members.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    pub alpha: f64,
    /// Per-layer sensitivity; larger means pruning the layer hurt more.
    pub sensitivity: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    Mutate,
    Crossover,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub member: usize,
    pub layers: Vec<usize>,
    pub layer_sparsities: Vec<f64>,
    pub weighted_sparsity: f64,
    pub accuracy: f64,
    pub alpha: f64,
    pub action: Action,
    pub written: bool,
    pub differentiated: bool,
    pub pool_accuracies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub best: Solution,
    pub met_target: bool,
    pub history: Vec<IterationRecord>,
    pub state: PruneState,
}

/// Importance score per weight: `α·grad + (1−α)·|w|`.
pub fn weight_importance(w: &[f64], grad: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(w.len(), grad.len(), "weight and gradient lengths differ");
    w.iter()
        .zip(grad)
        .map(|(w, g)| alpha * g + (1.0 - alpha) * w.abs())
        .collect()
}

/// Number of weights kept at a given sparsity: `⌈(1−s)·n⌉`.
pub fn keep_count(n: usize, sparsity: f64) -> usize {
    let exact = (1.0 - sparsity) * n as f64;
    // Absorb representation error so e.g. (1 − 0.8)·10 keeps 2, not 3.
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `⌈(1−s)·n⌉` largest scores; ties go to the lower index.
pub fn recompute_mask(wg: &[f64], sparsity: f64) -> Vec<bool> {
    let keep = keep_count(wg.len(), sparsity);
    let mut order: Vec<usize> = (0..wg.len()).collect();
    order.sort_by(|&a, &b| wg[b].total_cmp(&wg[a]).then(a.cmp(&b)));
    let mut mask = vec![false; wg.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

/// Fraction of positions whose mask value differs.
pub fn migration_rate(prev: &[bool], new: &[bool]) -> f64 {
    assert_eq!(prev.len(), new.len(), "mask lengths differ");
    if prev.is_empty() {
        return 0.0;
    }
    prev.iter().zip(new).filter(|(a, b)| a != b).count() as f64 / prev.len() as f64
}

pub fn check_weights_migration(prev: &[bool], new: &[bool]) -> f64 {
    (migration_rate(prev, new) * ALPHA_GAIN).clamp(ALPHA_MIN, ALPHA_MAX)
}

/// Moves the sparsity of a random non-empty layer subset by `±increment`.
/// Weights and masks are untouched; the new plan applies at the next
/// training.
pub fn mutate(sol: &Solution, increment: f64, rng: &mut impl Rng) -> Solution {
    let mut out = sol.clone();
    let n = out.sparsities.len();
    let mut chosen: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    if chosen.is_empty() {
        chosen.push(rng.random_range(0..n));
    }
    for l in chosen {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        out.sparsities[l] = (out.sparsities[l] + sign * increment).clamp(0.0, MAX_SPARSITY);
    }
    out
}

/// Child with `a`'s weights and, per layer, either parent's sparsity.
pub fn crossover(a: &Solution, b: &Solution, rng: &mut impl Rng) -> Result<Solution> {
    if !a.same_architecture(b) {
        return Err(config_err!("crossover parents have different architectures"));
    }
    let mut child = a.clone();
    for (s, &sb) in child.sparsities.iter_mut().zip(&b.sparsities) {
        if rng.random_bool(0.5) {
            *s = sb;
        }
    }
    Ok(child)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Seeded k-means++ / Lloyd over points; returns the cluster of every point.
pub(crate) fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = k.clamp(1, points.len().max(1));
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut t = rng.random_range(0.0..total);
        let mut pick = points.len() - 1;
        for (i, &di) in d.iter().enumerate() {
            if t < di {
                pick = i;
                break;
            }
            t -= di;
        }
        centers.push(points[pick].clone());
    }
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                (0..centers.len())
                    .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])).then(a.cmp(&b)))
                    .expect("at least one center")
            })
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (ci, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == ci).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

/// Clusters the pool by sparsity vector (`k = pool/2`), keeps the most
/// accurate member of every cluster and refills with mutations of the
/// survivors.
pub fn differentiate_pool(pool: &[Solution], increment: f64, rng: &mut impl Rng) -> Vec<Solution> {
    if pool.is_empty() {
        return Vec::new();
    }
    let points: Vec<Vec<f64>> = pool.iter().map(|s| s.sparsities.clone()).collect();
    let assign = kmeans(&points, (pool.len() / 2).max(1), rng);
    let clusters: BTreeSet<usize> = assign.iter().copied().collect();
    let mut survivors: Vec<Solution> = clusters
        .into_iter()
        .map(|c| {
            let best = (0..pool.len())
                .filter(|&i| assign[i] == c)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if pool[b].accuracy >= pool[i].accuracy => Some(b),
                    _ => Some(i),
                })
                .expect("cluster is non-empty");
            pool[best].clone()
        })
        .collect();
    let n_survivors = survivors.len();
    let mut i = 0;
    while survivors.len() < pool.len() {
        let child = mutate(&survivors[i % n_survivors], increment, rng);
        survivors.push(child);
        i += 1;
    }
    survivors
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn apply_plan(sol: &mut Solution, alpha: f64) {
    for ((layer, ema), &s) in sol.net.convs.iter_mut().zip(&sol.grad_stats.ema).zip(&sol.sparsities) {
        let wg = weight_importance(&layer.weights, ema, alpha);
        layer.mask = recompute_mask(&wg, s);
        layer.apply_mask();
    }
}

/// Trains `batch_nr` batches, recomputing masks after each one.
fn train_member(
    sol: &mut Solution,
    cfg: &PruneConfig,
    train: &Dataset,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut batches = Vec::with_capacity(cfg.batch_nr);
    while batches.len() < cfg.batch_nr {
        let mut epoch = train.batches(cfg.batch_size, rng);
        epoch.truncate(cfg.batch_nr - batches.len());
        batches.extend(epoch);
    }
    for batch in &batches {
        train_batches(&mut sol.net, train, std::slice::from_ref(batch), cfg.lr, &mut sol.grad_stats)?;
        apply_plan(sol, alpha);
    }
    Ok(())
}

fn rank_factors(sensitivity: &[f64]) -> Vec<f64> {
    let n = sensitivity.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sensitivity[a].total_cmp(&sensitivity[b]).then(a.cmp(&b)));
    let mut f = vec![0.0; n];
    for (rank, &l) in order.iter().enumerate() {
        f[l] = 1.5 - rank as f64 / (n - 1) as f64;
    }
    f
}

/// Runs the pruning search on `net` (usually pretrained dense). `data` is
/// split into a fixed training set and a 20 % validation set.
pub fn prune_run(cfg: &PruneConfig, net: &ToyNet, data: &Dataset) -> Result<PruneOutcome> {
    cfg.validate()?;
    let (train, val) = data.split(VAL_FRACTION, cfg.seed)?;
    prune_run_split(cfg, net, &train, &val)
}

/// [`prune_run`] on an explicit train/validation split.
pub fn prune_run_split(cfg: &PruneConfig, net: &ToyNet, train: &Dataset, val: &Dataset) -> Result<PruneOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(config_err!("training and validation sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = net.convs.len();
    let mut state = PruneState {
        alpha: ALPHA_MIN,
        sensitivity: vec![0.0; layers],
    };
    let [lo, hi] = cfg.initial_sparsity_range;

    let mut pool = Vec::with_capacity(cfg.pool_size);
    for _ in 0..cfg.pool_size {
        let mut sol = Solution {
            net: net.clone(),
            sparsities: (0..layers).map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect(),
            accuracy: 0.0,
            age: 0,
            grad_stats: GradStats::new(net),
        };
        apply_plan(&mut sol, state.alpha);
        sol.accuracy = sol.net.accuracy(val)?;
        pool.push(sol);
    }

    let mut best: Option<Solution> = None;
    let consider = |best: &mut Option<Solution>, s: &Solution| {
        let better = match best {
            None => true,
            Some(b) => {
                let (bm, sm) = (b.weighted_sparsity() >= cfg.target_sparsity, s.weighted_sparsity() >= cfg.target_sparsity);
                match (bm, sm) {
                    (false, true) => true,
                    (true, false) => false,
                    (true, true) => s.accuracy > b.accuracy,
                    (false, false) => s.weighted_sparsity() > b.weighted_sparsity(),
                }
            }
        };
        if better {
            *best = Some(s.clone());
        }
    };
    for s in &pool {
        consider(&mut best, s);
    }

    let mut history = Vec::with_capacity(cfg.iter_nr);
    let mut pool_best = pool.iter().map(|s| s.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let mut stale = 0;
    let n_chosen = layers.div_ceil(3);

    for iteration in 0..cfg.iter_nr {
        let member = rng.random_range(0..pool.len());
        let mut chosen: Vec<usize> = (0..layers).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(n_chosen);
        chosen.sort_unstable();

        let snapshot = pool[member].clone();
        let prev_masks: Vec<bool> = snapshot.net.convs.iter().flat_map(|c| c.mask.iter().copied()).collect();
        let mut cand = snapshot.clone();
        let trained = train_member(&mut cand, cfg, train, state.alpha, &mut rng);
        let (accuracy, ok) = match trained {
            Ok(()) => (cand.net.accuracy(val)?, true),
            Err(e) => {
                log::warn!("iteration {iteration}: {e}; rewinding");
                (f64::NEG_INFINITY, false)
            }
        };
        let new_masks: Vec<bool> = cand.net.convs.iter().flat_map(|c| c.mask.iter().copied()).collect();
        let delta = accuracy - snapshot.accuracy;
        cand.accuracy = accuracy;
        cand.age += 1;

        let mut written = false;
        let action = if ok && delta > cfg.acc_threshold {
            let pool_acc: Vec<f64> = pool.iter().map(|s| s.accuracy).collect();
            if accuracy >= median(&pool_acc) && cand.weighted_sparsity() >= snapshot.weighted_sparsity() - 1e-12 {
                written = true;
                let factors = rank_factors(&state.sensitivity);
                for &l in &chosen {
                    cand.sparsities[l] = (cand.sparsities[l] + cfg.mask_increment * factors[l]).min(MAX_SPARSITY);
                }
            }
            consider(&mut best, &cand);
            pool[member] = cand;
            Action::Accept
        } else {
            // Rewind to the snapshot; the plan falls back to what its masks hold.
            let mut rewound = snapshot.clone();
            for (s, c) in rewound.sparsities.iter_mut().zip(&rewound.net.convs) {
                *s = c.sparsity();
            }
            let (next, action) = if rng.random_bool(0.5) {
                (mutate(&rewound, cfg.mask_increment, &mut rng), Action::Mutate)
            } else {
                let others: Vec<usize> = (0..pool.len()).filter(|&i| i != member).collect();
                let other = *others.choose(&mut rng).expect("pool has two members");
                (crossover(&rewound, &pool[other], &mut rng)?, Action::Crossover)
            };
            pool[member] = next;
            action
        };

        state.alpha = check_weights_migration(&prev_masks, &new_masks);
        if delta.is_finite() {
            for &l in &chosen {
                state.sensitivity[l] = 0.7 * state.sensitivity[l] + 0.3 * (-delta);
            }
        }

        let now_best = pool.iter().map(|s| s.accuracy).fold(f64::NEG_INFINITY, f64::max);
        if now_best > pool_best {
            pool_best = now_best;
            stale = 0;
        } else {
            stale += 1;
        }
        let differentiated = stale >= cfg.stagnation_window;
        if differentiated {
            pool = differentiate_pool(&pool, cfg.mask_increment, &mut rng);
            stale = 0;
            pool_best = pool.iter().map(|s| s.accuracy).fold(f64::NEG_INFINITY, f64::max);
        }

        let current = &pool[member.min(pool.len() - 1)];
        history.push(IterationRecord {
            iteration,
            member,
            layers: chosen,
            layer_sparsities: current.net.layer_sparsities(),
            weighted_sparsity: current.weighted_sparsity(),
            accuracy: current.accuracy,
            alpha: state.alpha,
            action,
            written,
            differentiated,
            pool_accuracies: pool.iter().map(|s| s.accuracy).collect(),
        });
    }

    let best = best.expect("pool is non-empty");
    Ok(PruneOutcome {
        met_target: best.weighted_sparsity() >= cfg.target_sparsity,
        best,
        history,
        state,
    })
}

/// Trains a dense network for whole epochs; used for the baseline and for
/// pretraining before pruning.
pub fn train_dense(net: &mut ToyNet, train: &Dataset, epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = GradStats::new(net);
    let mut loss = 0.0;
    for _ in 0..epochs {
        let batches = train.batches(batch_size, &mut rng);
        loss = train_batches(net, train, &batches, lr, &mut stats)?;
    }
    Ok(loss)
}
