//! Class-balanced losses, per-writer adaptation and meta-training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::episodes::{sample_episode, DatasetSplit, EpisodeConfig, SampleBatch, SampleClass, UserTask};
use crate::error::{Error, Result};
use crate::netmodel::{Model, ParameterSet};
use crate::preprocess::CropMode;
use crate::scalar::Scalar;

/// Outer-loop update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOptimizer {
    /// `θ ← θ − β·g`.
    #[default]
    Sgd,
    /// Adam with the usual (0.9, 0.999) moments; β is the step size.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    /// Tasks per meta-update (M).
    pub meta_batch: usize,
    /// Inner steps (K).
    pub inner_steps: usize,
    pub alpha: f64,
    pub beta0: f64,
    pub beta_final: f64,
    pub epochs: usize,
    pub msl_epochs: usize,
    pub first_order: bool,
    pub optimizer: MetaOptimizer,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            meta_batch: 4,
            inner_steps: 5,
            alpha: 0.001,
            beta0: 0.001,
            beta_final: 1e-5,
            epochs: 100,
            msl_epochs: 20,
            first_order: false,
            optimizer: MetaOptimizer::Sgd,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_batch == 0 {
            return Err(Error::Parameter("meta_batch must be at least 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Parameter("inner_steps must be at least 1".into()));
        }
        if !(self.beta_final > 0.0 && self.beta_final <= self.beta0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_final ({}) <= beta0 ({})",
                self.beta_final, self.beta0
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            )));
        }
        Ok(())
    }
}

// ---- losses ---------------------------------------------------------------

fn balanced_nll<T: Scalar>(g: &mut Graph<T>, logits: Var, classes: &[SampleClass]) -> Result<Var> {
    if g.value(logits).numel() != classes.len() {
        return Err(Error::dim("loss", "batch", classes.len(), g.value(logits).numel()));
    }
    let count = |c: SampleClass| classes.iter().filter(|&&x| x == c).count();
    let n = [
        count(SampleClass::Genuine),
        count(SampleClass::RandomForgery),
        count(SampleClass::SkilledForgery),
    ];
    let slot = |c: SampleClass| match c {
        SampleClass::Genuine => 0,
        SampleClass::RandomForgery => 1,
        SampleClass::SkilledForgery => 2,
    };
    let labels: Vec<T> = classes.iter().map(|c| T::from_f64_lossy(c.label() as f64)).collect();
    let weights: Vec<T> = classes
        .iter()
        .map(|&c| T::from_f64_lossy(1.0 / n[slot(c)] as f64))
        .collect();
    let logits = g.reshape(logits, &[classes.len()])?;
    let nll = g.bce_with_logits(logits, &labels)?;
    g.dot_const(nll, &weights)
}

/// Adaptation loss: mean NLL over the genuines plus mean NLL over the random
/// forgeries (absent in the one-class case).
pub fn loss_inner<T: Scalar>(g: &mut Graph<T>, logits: Var, classes: &[SampleClass]) -> Result<Var> {
    if classes.contains(&SampleClass::SkilledForgery) {
        return Err(Error::Contract(
            "skilled forgeries cannot be used for adaptation".into(),
        ));
    }
    if !classes.contains(&SampleClass::Genuine) {
        return Err(Error::Data("adaptation set has no genuine signatures".into()));
    }
    balanced_nll(g, logits, classes)
}

/// Meta-update loss: one mean NLL per class present among genuines, random
/// forgeries and skilled forgeries, summed.
pub fn loss_meta<T: Scalar>(g: &mut Graph<T>, logits: Var, classes: &[SampleClass]) -> Result<Var> {
    if classes.is_empty() {
        return Err(Error::Data("meta-update set is empty".into()));
    }
    balanced_nll(g, logits, classes)
}

// ---- schedules ------------------------------------------------------------

/// Per-step weights of the multi-step loss: uniform at epoch 0, moving
/// linearly to all weight on the last step at `msl_epochs`.
pub fn msl_weights(epoch: usize, msl_epochs: usize, k: usize) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    let frac = if msl_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / msl_epochs as f64).min(1.0)
    };
    let mut w = vec![(1.0 - frac) / k as f64; k];
    w[k - 1] += frac;
    w
}

/// Cosine-annealed meta rate at (possibly fractional) `epoch` in `[0, epochs]`.
pub fn cosine_beta(epoch: f64, config: &MetaTrainConfig) -> f64 {
    let span = config.epochs.max(1) as f64;
    let t = (epoch / span).clamp(0.0, 1.0);
    config.beta_final + 0.5 * (config.beta0 - config.beta_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rate used for training epoch `e` of `0..epochs`: the schedule runs from
/// `beta0` on the first epoch to `beta_final` on the last.
pub fn epoch_beta(e: usize, config: &MetaTrainConfig) -> f64 {
    if config.epochs <= 1 {
        return config.beta0;
    }
    cosine_beta(e as f64 * config.epochs as f64 / (config.epochs - 1) as f64, config)
}

/// Task rate from the share of meta-train users with skilled forgeries.
pub fn select_alpha(forgery_fraction: f64) -> f64 {
    if forgery_fraction < 0.1 {
        0.01
    } else {
        0.001
    }
}

// ---- adaptation -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationResult<T> {
    /// `θ′₁ … θ′_K`.
    pub trajectory: Vec<ParameterSet<T>>,
    /// Loss at `θ′₀ … θ′_{K−1}`, i.e. before each step.
    pub per_step_inner_loss: Vec<f64>,
}

impl<T: Scalar> AdaptationResult<T> {
    pub fn adapted(&self) -> &ParameterSet<T> {
        self.trajectory.last().expect("at least one step")
    }
}

fn checked_loss<T: Scalar>(g: &Graph<T>, loss: Var, step: usize) -> Result<f64> {
    let v = g.value(loss).item().as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite adaptation loss at step {step}")));
    }
    Ok(v)
}

/// `K` detached gradient steps on the adaptation loss.
pub fn adapt<T: Scalar, M: Model<T>>(
    model: &M,
    theta: &ParameterSet<T>,
    d_u: &SampleBatch<T>,
    k: usize,
    alpha: f64,
) -> Result<AdaptationResult<T>> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    let mut trajectory = Vec::with_capacity(k);
    let mut losses = Vec::with_capacity(k);
    let mut current = theta.clone();
    for step in 1..=k {
        let mut g = Graph::new();
        let p = current.to_graph(&mut g);
        let x = g.constant(d_u.images.clone());
        let logits = model.forward(&mut g, &p, x)?;
        let loss = loss_inner(&mut g, logits, &d_u.classes)?;
        losses.push(checked_loss(&g, loss, step)?);
        let grads = g.grad_tensors(loss, &p)?;
        let a = T::from_f64_lossy(alpha);
        let next: Vec<Tensor<T>> = current
            .tensors()
            .zip(&grads)
            .map(|(t, gr)| t.zip_map(gr, |w, d| w - a * d))
            .collect();
        current = current.with_tensors(next)?;
        trajectory.push(current.clone());
    }
    Ok(AdaptationResult {
        trajectory,
        per_step_inner_loss: losses,
    })
}

/// Inner loop kept on `g` so that later losses can be differentiated with
/// respect to `theta`. Returns `θ′₁ … θ′_K` as graph nodes.
///
/// With `first_order` the steps are computed detached and re-attached as
/// constant offsets from `theta`, dropping second derivatives.
pub fn adapt_tracked<T: Scalar, M: Model<T>>(
    g: &mut Graph<T>,
    model: &M,
    theta: &[Var],
    d_u: &SampleBatch<T>,
    k: usize,
    alpha: f64,
    first_order: bool,
) -> Result<(Vec<Vec<Var>>, Vec<f64>)> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if first_order {
        let base = ParameterSet::from_entries(
            theta
                .iter()
                .enumerate()
                .map(|(i, &v)| (i.to_string(), g.value(v).clone()))
                .collect(),
        );
        let detached = adapt(model, &base, d_u, k, alpha)?;
        let mut trajectory = Vec::with_capacity(k);
        for p in &detached.trajectory {
            let mut step = Vec::with_capacity(theta.len());
            for (&v, (t, t0)) in theta.iter().zip(p.tensors().zip(base.tensors())) {
                let delta = t.zip_map(t0, |a, b| a - b);
                step.push(g.add_const(v, &delta)?);
            }
            trajectory.push(step);
        }
        return Ok((trajectory, detached.per_step_inner_loss));
    }
    let x = g.constant(d_u.images.clone());
    let mut current = theta.to_vec();
    let mut trajectory = Vec::with_capacity(k);
    let mut losses = Vec::with_capacity(k);
    for step in 1..=k {
        let logits = model.forward(g, &current, x)?;
        let loss = loss_inner(g, logits, &d_u.classes)?;
        losses.push(checked_loss(g, loss, step)?);
        let grads = g.grad(loss, &current, true)?;
        current = g.sgd_step(&current, &grads, T::from_f64_lossy(alpha))?;
        trajectory.push(current.clone());
    }
    Ok((trajectory, losses))
}

// ---- meta-gradient --------------------------------------------------------

/// An outer objective that can be rebuilt on a fresh graph from the
/// meta-parameters.
pub trait EpisodeLoss<T: Scalar> {
    fn build(&self, g: &mut Graph<T>, theta: &[Var]) -> Result<Var>;
}

/// One writer's episode on a concrete model.
pub struct SignatureEpisode<'m, T, M> {
    pub model: &'m M,
    pub adapt_set: SampleBatch<T>,
    pub meta_set: SampleBatch<T>,
    pub inner_steps: usize,
    pub alpha: f64,
    /// Multi-step loss weight per adapted step.
    pub step_weights: Vec<f64>,
    pub first_order: bool,
}

impl<T: Scalar, M: Model<T>> EpisodeLoss<T> for SignatureEpisode<'_, T, M> {
    fn build(&self, g: &mut Graph<T>, theta: &[Var]) -> Result<Var> {
        if self.step_weights.len() != self.inner_steps {
            return Err(Error::Contract(format!(
                "{} step weights for {} inner steps",
                self.step_weights.len(),
                self.inner_steps
            )));
        }
        let (trajectory, _) = adapt_tracked(
            g,
            self.model,
            theta,
            &self.adapt_set,
            self.inner_steps,
            self.alpha,
            self.first_order,
        )?;
        let x = g.constant(self.meta_set.images.clone());
        let mut total: Option<Var> = None;
        for (params, &w) in trajectory.iter().zip(&self.step_weights) {
            if w == 0.0 {
                continue;
            }
            let logits = self.model.forward(g, params, x)?;
            let l = loss_meta(g, logits, &self.meta_set.classes)?;
            let l = g.scale(l, T::from_f64_lossy(w));
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        total.ok_or_else(|| Error::Contract("all step weights are zero".into()))
    }
}

/// Outer loss and its gradient with respect to `theta`.
pub fn meta_gradient<T: Scalar, L: EpisodeLoss<T> + ?Sized>(
    theta: &ParameterSet<T>,
    task: &L,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = theta.to_graph(&mut g);
    let loss = task.build(&mut g, &p)?;
    let value = g.value(loss).item().as_f64();
    let grads = g.grad_tensors(loss, &p)?;
    Ok((value, grads))
}

/// Mean outer loss and mean gradient over a meta-batch. Episodes may run on
/// several threads; the sum is taken in task order.
pub fn batch_meta_gradient<T: Scalar, L: EpisodeLoss<T> + Sync>(
    theta: &ParameterSet<T>,
    tasks: &[L],
) -> Result<(f64, Vec<Tensor<T>>)> {
    if tasks.is_empty() {
        return Err(Error::Data("empty meta-batch".into()));
    }
    let results: Vec<(f64, Vec<Tensor<T>>)> = tasks
        .par_iter()
        .map(|t| meta_gradient(theta, t))
        .collect::<Result<_>>()?;
    let inv = 1.0 / tasks.len() as f64;
    let mut acc: Vec<Vec<f64>> = theta.tensors().map(|t| vec![0.0; t.numel()]).collect();
    let mut loss = 0.0;
    for (l, grads) in &results {
        loss += l;
        for (a, gr) in acc.iter_mut().zip(grads) {
            for (x, &y) in a.iter_mut().zip(gr.data()) {
                *x += y.as_f64();
            }
        }
    }
    let grads = theta
        .tensors()
        .zip(acc)
        .map(|(t, a)| {
            Tensor::new(
                t.shape().to_vec(),
                a.into_iter().map(|v| T::from_f64_lossy(v * inv)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss * inv, grads))
}

/// Applies one outer-loop update.
pub struct MetaUpdater<T> {
    kind: MetaOptimizer,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MetaUpdater<T> {
    pub fn new(kind: MetaOptimizer) -> Self {
        Self {
            kind,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn apply(&mut self, theta: &ParameterSet<T>, grads: &[Tensor<T>], beta: f64) -> Result<ParameterSet<T>> {
        if grads.len() != theta.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                theta.len()
            )));
        }
        self.step += 1;
        let next = match self.kind {
            MetaOptimizer::Sgd => {
                let b = T::from_f64_lossy(beta);
                theta
                    .tensors()
                    .zip(grads)
                    .map(|(t, g)| t.zip_map(g, |w, d| w - b * d))
                    .collect()
            }
            MetaOptimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - B1.powi(self.step as i32);
                let c2 = 1.0 - B2.powi(self.step as i32);
                theta
                    .tensors()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|((t, g), (m, v))| {
                        let mut out = t.clone();
                        for (((w, &d), m), v) in out.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                            let d = d.as_f64();
                            *m = B1 * *m + (1.0 - B1) * d;
                            *v = B2 * *v + (1.0 - B2) * d * d;
                            let upd = beta * (*m / c1) / ((*v / c2).sqrt() + EPS);
                            *w = T::from_f64_lossy(w.as_f64() - upd);
                        }
                        out
                    })
                    .collect()
            }
        };
        theta.with_tensors(next)
    }
}

/// One plain meta-update `θ − β·ḡ` over a meta-batch; returns the new
/// parameters and the mean outer loss.
pub fn meta_step<T: Scalar, L: EpisodeLoss<T> + Sync>(
    theta: &ParameterSet<T>,
    tasks: &[L],
    beta: f64,
) -> Result<(ParameterSet<T>, f64)> {
    let (loss, grads) = batch_meta_gradient(theta, tasks)?;
    let next = MetaUpdater::new(MetaOptimizer::Sgd).apply(theta, &grads, beta)?;
    Ok((next, loss))
}

// ---- meta-training --------------------------------------------------------

/// Validation metrics reported by the hook after each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub eer_global: f64,
    pub eer_user: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// 0 is the untrained starting point.
    pub epoch: usize,
    /// Mean outer loss over the epoch's meta-batches (`None` at epoch 0).
    pub meta_loss: Option<f64>,
    pub beta: Option<f64>,
    pub val: ValidationMetrics,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutcome<T> {
    /// Parameters with the lowest validation global-threshold EER.
    pub best: ParameterSet<T>,
    pub best_epoch: usize,
    pub best_val: ValidationMetrics,
    pub curve: Vec<CurveRow>,
}

/// `splitmix64` over the parts, for independent per-episode seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn episode_batches<'a, T: Scalar>(
    user: &'a UserTask,
    pool: &'a [&'a UserTask],
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<(SampleBatch<T>, SampleBatch<T>)> {
    let ep = sample_episode(user, pool, cfg, seed)?;
    let adapt = SampleBatch::from_samples(&ep.adapt_set, CropMode::Random(derive_seed(seed, &[1])))?;
    let meta = SampleBatch::from_samples(&ep.meta_set, CropMode::Random(derive_seed(seed, &[2])))?;
    Ok((adapt, meta))
}

/// Meta-trains `theta` over `split.meta_train`, calling `val_hook` on the
/// starting parameters and after every epoch, and keeps the best parameters
/// by validation EER. `progress` receives each curve row as it is produced.
pub fn meta_train<T, M, V>(
    model: &M,
    theta: ParameterSet<T>,
    config: &MetaTrainConfig,
    split: &DatasetSplit,
    episode_cfg: &EpisodeConfig,
    mut val_hook: V,
    mut progress: impl FnMut(&CurveRow),
) -> Result<MetaTrainOutcome<T>>
where
    T: Scalar,
    M: Model<T>,
    V: FnMut(&ParameterSet<T>, usize) -> Result<ValidationMetrics>,
{
    config.validate()?;
    episode_cfg.validate()?;
    let users = &split.meta_train;
    if users.is_empty() {
        return Err(Error::Data("meta-train split is empty".into()));
    }
    let m = config.meta_batch.min(users.len());
    let k = config.inner_steps;

    let val = val_hook(&theta, 0)?;
    let first = CurveRow {
        epoch: 0,
        meta_loss: None,
        beta: None,
        val,
    };
    progress(&first);
    let mut curve = vec![first];
    let mut best = (theta.clone(), 0, val);
    let mut theta = theta;
    let mut updater = MetaUpdater::new(config.optimizer);

    for e in 0..config.epochs {
        let beta = epoch_beta(e, config);
        let weights = msl_weights(e, config.msl_epochs, k);
        let mut order: Vec<usize> = (0..users.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[e as u64])));
        let mut loss_sum = 0.0;
        let batches = users.len() / m;
        for b in 0..batches {
            let chunk = &order[b * m..(b + 1) * m];
            let pools: Vec<Vec<&UserTask>> = chunk
                .iter()
                .map(|&u| users.iter().filter(|t| t.user_id != users[u].user_id).collect())
                .collect();
            let tasks = chunk
                .iter()
                .zip(&pools)
                .enumerate()
                .map(|(i, (&u, pool))| {
                    let seed = derive_seed(config.seed, &[e as u64, b as u64, i as u64]);
                    let (adapt_set, meta_set) = episode_batches(&users[u], pool, episode_cfg, seed)?;
                    Ok(SignatureEpisode {
                        model,
                        adapt_set,
                        meta_set,
                        inner_steps: k,
                        alpha: config.alpha,
                        step_weights: weights.clone(),
                        first_order: config.first_order,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_meta_gradient(&theta, &tasks).map_err(|err| match err {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {}, batch {b}: {msg}", e + 1)),
                other => other,
            })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite meta-gradient at epoch {}, batch {b}",
                    e + 1
                )));
            }
            loss_sum += loss;
            theta = updater.apply(&theta, &grads, beta)?;
        }
        let val = val_hook(&theta, e + 1)?;
        let row = CurveRow {
            epoch: e + 1,
            meta_loss: Some(loss_sum / batches as f64),
            beta: Some(beta),
            val,
        };
        progress(&row);
        curve.push(row);
        if val.eer_global < best.2.eer_global {
            best = (theta.clone(), e + 1, val);
        }
    }
    Ok(MetaTrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_val: best.2,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn loss_of(logits: &[f64], classes: &[SampleClass], meta: bool) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_vec(logits.to_vec()));
        let l = if meta {
            loss_meta(&mut g, z, classes)?
        } else {
            loss_inner(&mut g, z, classes)?
        };
        Ok(g.value(l).item())
    }

    use SampleClass::{Genuine as G, RandomForgery as R, SkilledForgery as S};

    #[test]
    fn loss_values() {
        assert!((loss_of(&[0.0; 4], &[G, G, R, R], false).unwrap() - 2.0 * LN2).abs() < 1e-12);
        assert!((loss_of(&[0.0; 3], &[G, R, S], true).unwrap() - 3.0 * LN2).abs() < 1e-12);
        assert!(loss_of(&[40.0, 40.0, -40.0, -40.0], &[G, G, R, R], false).unwrap() < 1e-10);
        assert!(loss_of(&[40.0, -40.0, -40.0], &[G, R, S], true).unwrap() < 1e-10);
        // one-class: the forgery term is absent
        assert!((loss_of(&[0.0; 3], &[G, G, G], false).unwrap() - LN2).abs() < 1e-12);
    }

    #[test]
    fn duplication_leaves_losses_unchanged() {
        let z = [0.3, -1.2, 2.0, 0.7, -0.4];
        let c = [G, G, R, S, S];
        let base = loss_of(&z, &c, true).unwrap();
        let dup = loss_of(&[0.3, -1.2, 2.0, 2.0, 0.7, -0.4], &[G, G, R, R, S, S], true).unwrap();
        assert_eq!(base, dup);
        let inner = loss_of(&[0.3, -1.2, 2.0], &[G, G, R], false).unwrap();
        let inner_dup = loss_of(&[0.3, -1.2, 2.0, 2.0], &[G, G, R, R], false).unwrap();
        assert_eq!(inner, inner_dup);
    }

    #[test]
    fn meta_loss_without_skilled_equals_inner_loss() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let c = [G, R, G, R];
        assert_eq!(loss_of(&z, &c, true).unwrap(), loss_of(&z, &c, false).unwrap());
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(loss_of(&[0.0, 0.0], &[G, S], false), Err(Error::Contract(_))));
        assert!(matches!(loss_of(&[0.0], &[R], false), Err(Error::Data(_))));
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_vec(vec![0.0]));
        assert!(matches!(loss_meta(&mut g, z, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn msl_weight_examples() {
        assert_eq!(msl_weights(0, 20, 5), vec![0.2; 5]);
        assert_eq!(msl_weights(20, 20, 5), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(msl_weights(35, 20, 5), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let w = msl_weights(10, 20, 5);
        for (a, b) in w.iter().zip([0.1, 0.1, 0.1, 0.1, 0.6]) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut last = 0.0;
        for e in 0..40 {
            let w = msl_weights(e, 20, 5);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w[4] >= last);
            last = w[4];
        }
    }

    #[test]
    fn cosine_schedule() {
        let cfg = MetaTrainConfig::default();
        assert!((cosine_beta(0.0, &cfg) - 0.001).abs() < 1e-15);
        assert!((cosine_beta(100.0, &cfg) - 1e-5).abs() < 1e-15);
        assert!((cosine_beta(50.0, &cfg) - 0.000505).abs() < 1e-15);
        assert_eq!(epoch_beta(0, &cfg), cosine_beta(0.0, &cfg));
        assert!((epoch_beta(99, &cfg) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn alpha_rule() {
        assert_eq!(select_alpha(0.0), 0.01);
        assert_eq!(select_alpha(0.05), 0.01);
        assert_eq!(select_alpha(0.1), 0.001);
        assert_eq!(select_alpha(0.5), 0.001);
        assert_eq!(select_alpha(1.0), 0.001);
    }

    #[test]
    fn config_validation() {
        let ok = MetaTrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            MetaTrainConfig {
                meta_batch: 0,
                ..ok.clone()
            },
            MetaTrainConfig {
                inner_steps: 0,
                ..ok.clone()
            },
            MetaTrainConfig {
                beta_final: 0.01,
                ..ok.clone()
            },
            MetaTrainConfig {
                beta_final: 0.0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        }
    }

    /// ½(θ−a)² inner, ½(θ′−b)² outer on a scalar parameter.
    struct Quadratic {
        a: f64,
        b: f64,
        alpha: f64,
    }

    impl EpisodeLoss<f64> for Quadratic {
        fn build(&self, g: &mut Graph<f64>, theta: &[Var]) -> Result<Var> {
            let d = g.scale_shift(theta[0], 1.0, -self.a);
            let sq = g.mul(d, d)?;
            let inner = g.scale(sq, 0.5);
            let gr = g.grad(inner, theta, true)?;
            let adapted = g.sgd_step(theta, &gr, self.alpha)?;
            let d = g.scale_shift(adapted[0], 1.0, -self.b);
            let sq = g.mul(d, d)?;
            Ok(g.scale(sq, 0.5))
        }
    }

    #[test]
    fn meta_step_moves_against_closed_form_gradient() {
        let mut theta = ParameterSet::new();
        theta.push("theta", Tensor::<f64>::scalar(0.0));
        let task = Quadratic {
            a: 1.0,
            b: 2.0,
            alpha: 0.1,
        };
        let (_, grads) = meta_gradient(&theta, &task).unwrap();
        assert!((grads[0].item() + 1.71).abs() < 1e-12);
        let (next, loss) = meta_step(&theta, &[task], 0.5).unwrap();
        assert!((next.get("theta").unwrap().item() - 0.855).abs() < 1e-12);
        assert!((loss - 0.5 * 1.9f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn batch_gradient_is_the_task_mean() {
        let mut theta = ParameterSet::new();
        theta.push("theta", Tensor::<f64>::scalar(0.3));
        let tasks = [
            Quadratic {
                a: 1.0,
                b: 2.0,
                alpha: 0.1,
            },
            Quadratic {
                a: -1.0,
                b: 0.5,
                alpha: 0.2,
            },
        ];
        let g0 = meta_gradient(&theta, &tasks[0]).unwrap().1[0].item();
        let g1 = meta_gradient(&theta, &tasks[1]).unwrap().1[0].item();
        let (_, mean) = batch_meta_gradient(&theta, &tasks).unwrap();
        assert!((mean[0].item() - 0.5 * (g0 + g1)).abs() < 1e-12);
    }

    /// Logistic regression on flattened pixels, standing in for the CNN.
    struct Linear;

    impl Model<f64> for Linear {
        fn forward(&self, g: &mut Graph<f64>, params: &[Var], input: Var) -> Result<Var> {
            let b = g.shape(input)[0];
            let n = g.value(input).numel() / b;
            let x = g.reshape(input, &[b, n])?;
            let y = g.affine(x, params[0], params[1])?;
            g.reshape(y, &[b])
        }

        fn sample_shape(&self) -> Vec<usize> {
            vec![3]
        }
    }

    fn linear_batch(classes: Vec<SampleClass>, seed: u64) -> SampleBatch<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::from_fn(&[classes.len(), 3], |_| rng.gen_range(-1.0..1.0));
        SampleBatch::new(images, classes).unwrap()
    }

    #[test]
    fn one_logistic_step_matches_hand_derivative() {
        let mut theta = ParameterSet::new();
        theta.push("w", Tensor::new(vec![1, 1], vec![0.4]).unwrap());
        theta.push("b", Tensor::<f64>::zeros(&[1]));
        let x = 1.5;
        let d_u = SampleBatch::new(Tensor::new(vec![1, 1], vec![x]).unwrap(), vec![G]).unwrap();
        struct Scalar1;
        impl Model<f64> for Scalar1 {
            fn forward(&self, g: &mut Graph<f64>, p: &[Var], input: Var) -> Result<Var> {
                let y = g.matmul(input, p[0], false, true)?;
                g.reshape(y, &[1])
            }
            fn sample_shape(&self) -> Vec<usize> {
                vec![1]
            }
        }
        let alpha = 0.3;
        let r = adapt(&Scalar1, &theta, &d_u, 1, alpha).unwrap();
        let th = 0.4f64;
        let sig = 1.0 / (1.0 + (th * x).exp());
        let expected = th + alpha * sig * x;
        assert!((r.adapted().get("w").unwrap().item() - expected).abs() < 1e-12);
        let z = adapt(&Scalar1, &theta, &d_u, 3, 0.0).unwrap();
        assert_eq!(z.adapted(), &theta);
    }

    #[test]
    fn second_order_meta_gradient_matches_finite_differences() {
        use crate::diffcore::gradcheck::relative_error;
        let mut theta = ParameterSet::new();
        theta.push("w", Tensor::new(vec![1, 3], vec![0.2, -0.5, 0.3]).unwrap());
        theta.push("b", Tensor::new(vec![1], vec![0.1]).unwrap());
        let episode = SignatureEpisode {
            model: &Linear,
            adapt_set: linear_batch(vec![G, G, R, R, R], 1),
            meta_set: linear_batch(vec![G, G, R, S, S, S], 2),
            inner_steps: 1,
            alpha: 0.7,
            step_weights: vec![1.0],
            first_order: false,
        };
        let (_, grads) = meta_gradient(&theta, &episode).unwrap();
        let h = 1e-5;
        for (ti, (name, t)) in theta.entries().iter().enumerate() {
            for e in 0..t.numel() {
                let bump = |delta: f64| {
                    let tensors: Vec<Tensor<f64>> = theta
                        .entries()
                        .iter()
                        .map(|(n, x)| {
                            let mut x = x.clone();
                            if n == name {
                                x.data_mut()[e] += delta;
                            }
                            x
                        })
                        .collect();
                    let p = theta.with_tensors(tensors).unwrap();
                    meta_gradient(&p, &episode).unwrap().0
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let err = relative_error(grads[ti].data()[e], numeric);
                assert!(err < 1e-3, "{name}[{e}]: {} vs {numeric}", grads[ti].data()[e]);
            }
        }
        // first-order differs once α > 0
        let fo = SignatureEpisode {
            first_order: true,
            ..episode
        };
        let (_, fo_grads) = meta_gradient(&theta, &fo).unwrap();
        assert!(fo_grads[0]
            .data()
            .iter()
            .zip(grads[0].data())
            .any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn adaptation_reports_non_finite_step() {
        let mut theta = ParameterSet::new();
        theta.push("w", Tensor::new(vec![1, 3], vec![f64::NAN, 0.0, 0.0]).unwrap());
        theta.push("b", Tensor::new(vec![1], vec![0.0]).unwrap());
        let d_u = linear_batch(vec![G, R], 3);
        match adapt(&Linear, &theta, &d_u, 2, 0.1) {
            Err(Error::Numeric(m)) => assert!(m.contains("step 1"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 0, 0]);
        assert_ne!(a, derive_seed(1, &[0, 0, 1]));
        assert_ne!(a, derive_seed(2, &[0, 0, 0]));
        assert_eq!(a, derive_seed(1, &[0, 0, 0]));
    }
}
