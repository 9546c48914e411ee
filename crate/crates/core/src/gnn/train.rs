//! Mini-batch training with Adam, early stopping and finite-difference
//! gradient checks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{bce_loss, kink_pattern, loss_and_gradient, model_forward, Mode};
use super::params::ModelParams;
use super::{GnnError, Real, TrainClique};
use crate::metrics::{average_precision, max_recall_full_precision};
use crate::par::{self, Exec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopping {
    /// Validation AP, ties broken by MR.
    #[default]
    Ap,
    /// Validation MR, ties broken by AP.
    Mr,
    /// Train for the full budget and keep the final parameters.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Cliques per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub early_stopping: EarlyStopping,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between log rows (epoch summaries are always logged).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 2,
            epochs: 10,
            seed: 0,
            early_stopping: EarlyStopping::Ap,
            patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: &str| Err(GnnError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam moments");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val_ap: Option<f64>,
    pub val_mr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("epoch,step,loss,val_ap,val_mr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{},{}\n", r.epoch, r.step, r.loss, opt(r.val_ap), opt(r.val_mr)));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: TrainLog,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_ap: Option<f64>,
    pub best_val_mr: Option<f64>,
}

/// Adam state over the flattened parameter vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1, beta2, eps }
    }

    pub fn update<T: Real>(&mut self, params: &mut [T], grads: &[T]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.to_f64().unwrap();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let delta = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p -= T::from_f64(delta).unwrap();
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Query-edge scores and labels of a set of cliques (inference mode).
pub fn query_edge_scores<T: Real>(
    params: &ModelParams<T>,
    cliques: &[TrainClique<'_>],
    exec: Exec,
) -> Result<(Vec<f64>, Vec<bool>), GnnError> {
    let per = par::map(exec, cliques, |c| model_forward(params, &c.descriptors, &c.edges, Mode::Inference));
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (c, s) in cliques.iter().zip(per) {
        let s = s?;
        for ((&v, &y), &q) in s.iter().zip(&c.labels).zip(&c.query_edge) {
            if q {
                scores.push(v.to_f64().unwrap());
                labels.push(y);
            }
        }
    }
    Ok((scores, labels))
}

/// AP and MR over validation query edges; `None` without positives.
pub fn validate<T: Real>(params: &ModelParams<T>, cliques: &[TrainClique<'_>], exec: Exec) -> Result<Option<(f64, f64)>, GnnError> {
    let (scores, labels) = query_edge_scores(params, cliques, exec)?;
    match (average_precision(&scores, &labels), max_recall_full_precision(&scores, &labels)) {
        (Ok(ap), Ok(mr)) => Ok(Some((ap, mr))),
        _ => Ok(None),
    }
}

fn better(metric: EarlyStopping, cand: (f64, f64), best: Option<(f64, f64)>) -> bool {
    let Some(best) = best else { return true };
    let key = |v: (f64, f64)| match metric {
        EarlyStopping::Mr => (v.1, v.0),
        _ => v,
    };
    let (a, b) = (key(cand), key(best));
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

/// Trains on labeled cliques. Every edge of a training clique is supervised;
/// validation uses query edges only. Deterministic for a fixed seed
/// regardless of `exec`.
pub fn train<T: Real>(
    init: ModelParams<T>,
    train_set: &[TrainClique<'_>],
    val_set: &[TrainClique<'_>],
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome<T>, GnnError> {
    config.validate()?;
    init.hyper.validate()?;
    if train_set.is_empty() {
        return Err(GnnError::InvalidConfig("empty training set".into()));
    }
    if !train_set.iter().any(|c| c.labels.iter().any(|&y| y)) {
        return Err(GnnError::NoPositives);
    }
    let mut params = init;
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, f64)> = None;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut window_loss = 0.0;
        let mut window = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results = par::map(exec, batch, |&i| {
                let c = &train_set[i];
                let seed = mix(config.seed, epoch as u64, (i as u64) << 1 | 1);
                loss_and_gradient(&params, &c.descriptors, &c.edges, &c.labels, Mode::Train { seed })
            });
            let mut grad = vec![T::zero(); flat.len()];
            let mut loss = 0.0;
            // fixed reduction order keeps runs identical under any schedule
            for r in results {
                let (l, g) = r?;
                loss += l.to_f64().unwrap();
                for (acc, v) in grad.iter_mut().zip(g.flatten()) {
                    *acc += v;
                }
            }
            let scale = T::from_f64(1.0 / batch.len() as f64).unwrap();
            grad.iter_mut().for_each(|g| *g *= scale);
            loss /= batch.len() as f64;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(GnnError::NonFinite);
            }
            adam.update(&mut flat, &grad);
            params.assign_flat(&flat);
            step += 1;
            epoch_loss += loss;
            window_loss += loss;
            window += 1;
            if config.log_every > 0 && (b + 1) % config.log_every == 0 {
                log.rows.push(LogRow { epoch, step, loss: window_loss / window as f64, val_ap: None, val_mr: None });
                window_loss = 0.0;
                window = 0;
            }
        }
        let batches = order.len().div_ceil(config.batch_size);
        let val = if val_set.is_empty() { None } else { validate(&params, val_set, exec)? };
        log.rows.push(LogRow {
            epoch,
            step,
            loss: epoch_loss / batches as f64,
            val_ap: val.map(|v| v.0),
            val_mr: val.map(|v| v.1),
        });
        log::info!("epoch {epoch}: loss {:.5} val {:?}", epoch_loss / batches as f64, val);
        match (config.early_stopping, val) {
            (EarlyStopping::Off, _) | (_, None) => {
                best_params = params.clone();
                best_epoch = epoch;
                best = val.or(best);
            }
            (metric, Some(v)) => {
                if better(metric, v, best) {
                    best = Some(v);
                    best_params = params.clone();
                    best_epoch = epoch;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience.max(1) {
                        break;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_epoch,
        epochs_run,
        best_val_ap: best.map(|v| v.0),
        best_val_mr: best.map(|v| v.1),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter group.
    pub groups: Vec<(String, f64)>,
    pub checked: usize,
    /// Coordinates whose stencil crosses an activation kink; not compared.
    pub skipped: usize,
}

pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

/// Compares the analytic gradient with fourth-order central differences
/// (five-point stencil, step `epsilon`) on up to
/// `per_group` sampled coordinates of every parameter group. A fixed
/// `dropout_seed` freezes the dropout masks so the loss is a smooth function
/// away from activation kinks; a coordinate whose stencil moves any
/// activation across its kink is skipped.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    params: &ModelParams<f64>,
    clique: &TrainClique<'_>,
    epsilon: f64,
    per_group: usize,
    seed: u64,
    dropout_seed: Option<u64>,
) -> Result<GradCheckReport, GnnError> {
    let mode = match dropout_seed {
        Some(seed) => Mode::Train { seed },
        None => Mode::Inference,
    };
    let (_, grad) = loss_and_gradient(params, &clique.descriptors, &clique.edges, &clique.labels, mode)?;
    let analytic = grad.flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = kink_pattern(params, &clique.descriptors, &clique.edges, mode)?;
    let mut loss_at = |flat: &[f64]| -> Result<Option<f64>, GnnError> {
        probe.assign_flat(flat);
        if kink_pattern(&probe, &clique.descriptors, &clique.edges, mode)? != pattern {
            return Ok(None);
        }
        let scores = model_forward(&probe, &clique.descriptors, &clique.edges, mode)?;
        bce_loss(&scores, &clique.labels).map(Some)
    };
    let mut groups = Vec::new();
    let (mut checked, mut skipped) = (0, 0);
    let mut worst = 0.0f64;
    for (name, range) in params.groups() {
        let mut idx: Vec<usize> = range.collect();
        if idx.len() > per_group {
            idx.shuffle(&mut rng);
            idx.truncate(per_group);
            idx.sort_unstable();
        }
        let mut group_worst = 0.0f64;
        for i in idx {
            let mut x = base.clone();
            let mut at = |h: f64| {
                x[i] = base[i] + h;
                loss_at(&x)
            };
            let (Some(p1), Some(m1), Some(p2), Some(m2)) = (at(epsilon)?, at(-epsilon)?, at(2.0 * epsilon)?, at(-2.0 * epsilon)?)
            else {
                skipped += 1;
                continue;
            };
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            group_worst = group_worst.max(relative_error(numeric, analytic[i]));
            checked += 1;
        }
        worst = worst.max(group_worst);
        groups.push((name, group_worst));
    }
    Ok(GradCheckReport { max_rel_error: worst, groups, checked, skipped })
}
