//! Scoring and verification metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::episodes::{repeated_subsampling, SampleBatch, SampleClass, UserTask};
use crate::error::{Error, Result};
use crate::metalearn::{adapt, derive_seed, ValidationMetrics};
use crate::netmodel::{forward, Model, ParameterSet, INPUT_HEIGHT, INPUT_WIDTH};
use crate::preprocess::{crop_into, crop_offset, CanonicalImage, CropMode};
use crate::scalar::Scalar;

const SCORE_CHUNK: usize = 16;

/// Query scores of one user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserScores {
    pub user_id: u32,
    pub genuine: Vec<f64>,
    pub skilled: Vec<f64>,
    pub random: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub users: Vec<UserScores>,
}

impl ScoreSet {
    pub fn new(users: Vec<UserScores>) -> Result<Self> {
        for u in &users {
            let all = u.genuine.iter().chain(&u.skilled).chain(&u.random);
            if let Some(v) = all.into_iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Parameter(format!(
                    "score {v} of user {} outside [0,1]",
                    u.user_id
                )));
            }
        }
        Ok(Self { users })
    }

    pub fn genuine(&self) -> Vec<f64> {
        self.users.iter().flat_map(|u| u.genuine.iter().copied()).collect()
    }

    pub fn skilled(&self) -> Vec<f64> {
        self.users.iter().flat_map(|u| u.skilled.iter().copied()).collect()
    }

    pub fn random(&self) -> Vec<f64> {
        self.users.iter().flat_map(|u| u.random.iter().copied()).collect()
    }
}

/// `P(genuine)` for each image of `[B, 1, 150, 220]`.
pub fn score_user<T: Scalar, M: Model<T>>(model: &M, theta: &ParameterSet<T>, queries: &Tensor<T>) -> Result<Vec<f64>> {
    let shape = queries.shape();
    let per = shape[1..].iter().product::<usize>();
    let mut out = Vec::with_capacity(shape[0]);
    for start in (0..shape[0]).step_by(SCORE_CHUNK) {
        let n = SCORE_CHUNK.min(shape[0] - start);
        let mut s = shape.to_vec();
        s[0] = n;
        let chunk = Tensor::new(s, queries.data()[start * per..(start + n) * per].to_vec())?;
        let logits = forward(model, theta, &chunk)?;
        out.extend(logits.data().iter().map(|z| sigmoid(z.as_f64())));
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Error rates at a fixed threshold; `None` when the class is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub frr: Option<f64>,
    pub far_random: Option<f64>,
    pub far_skilled: Option<f64>,
}

fn fraction(values: &[f64], pred: impl Fn(f64) -> bool) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().filter(|&&v| pred(v)).count() as f64 / values.len() as f64)
    }
}

/// Genuines below `tau` are rejected; forgeries at or above it are accepted.
pub fn rates_at_threshold(scores: &ScoreSet, tau: f64) -> Rates {
    Rates {
        frr: fraction(&scores.genuine(), |v| v < tau),
        far_random: fraction(&scores.random(), |v| v >= tau),
        far_skilled: fraction(&scores.skilled(), |v| v >= tau),
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// (FRR, FAR) at `tau` on pre-sorted score lists.
fn sorted_rates(genuine: &[f64], forged: &[f64], tau: f64) -> (f64, f64) {
    let rejected = genuine.partition_point(|&v| v < tau);
    let accepted = forged.len() - forged.partition_point(|&v| v < tau);
    (
        rejected as f64 / genuine.len() as f64,
        accepted as f64 / forged.len() as f64,
    )
}

/// Thresholds covering every distinct outcome: the smallest score, a point
/// strictly between each pair of consecutive distinct scores, and one above
/// the largest.
fn candidate_thresholds(genuine: &[f64], forged: &[f64]) -> Vec<f64> {
    let mut all = sorted(genuine.iter().chain(forged).copied().collect());
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(all[0]);
    for w in all.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        out.push(if mid > w[0] { mid } else { w[1] });
    }
    let top = all[all.len() - 1];
    out.push(if top < 1.0 { 0.5 * (top + 1.0) } else { f64::INFINITY });
    out
}

/// Equal error rate between two score lists and the threshold reaching it.
pub fn eer_scores(genuine: &[f64], forged: &[f64]) -> Result<(f64, f64)> {
    if genuine.is_empty() || forged.is_empty() {
        return Err(Error::Data("equal error rate needs genuine and forgery scores".into()));
    }
    let g = sorted(genuine.to_vec());
    let f = sorted(forged.to_vec());
    let mut best: Option<(f64, f64, f64)> = None;
    for tau in candidate_thresholds(&g, &f) {
        let (frr, far) = sorted_rates(&g, &f, tau);
        let gap = (frr - far).abs();
        if best.is_none_or(|(b, _, _)| gap < b) {
            best = Some((gap, 0.5 * (frr + far), tau));
        }
    }
    let (_, eer, tau) = best.expect("at least one candidate");
    Ok((eer, tau))
}

/// EER over the pooled genuine and skilled-forgery scores, with one
/// threshold shared by all users.
pub fn eer_global(scores: &ScoreSet) -> Result<(f64, f64)> {
    eer_scores(&scores.genuine(), &scores.skilled())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserEer {
    pub eer: f64,
    /// Users lacking genuine or skilled scores.
    pub excluded: usize,
}

/// Mean of per-user EERs (user-specific thresholds).
pub fn eer_user(scores: &ScoreSet) -> Result<UserEer> {
    let mut sum = 0.0;
    let mut n = 0;
    let mut excluded = 0;
    for u in &scores.users {
        if u.genuine.is_empty() || u.skilled.is_empty() {
            excluded += 1;
            continue;
        }
        sum += eer_scores(&u.genuine, &u.skilled)?.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no user has both genuine and skilled scores".into()));
    }
    Ok(UserEer {
        eer: sum / n as f64,
        excluded,
    })
}

/// Probability that a genuine outscores a forgery, ties counted half.
pub fn auc(genuine: &[f64], forged: &[f64]) -> Result<f64> {
    if genuine.is_empty() || forged.is_empty() {
        return Err(Error::Data("AUC needs genuine and forgery scores".into()));
    }
    let f = sorted(forged.to_vec());
    let mut wins = 0.0;
    for &g in genuine {
        let below = f.partition_point(|&v| v < g);
        let ties = f.partition_point(|&v| v <= g) - below;
        wins += below as f64 + 0.5 * ties as f64;
    }
    Ok(wins / (genuine.len() * f.len()) as f64)
}

pub const ROC_POINTS: usize = 200;

/// Mean FRR (± population standard deviation across splits) at each point
/// of an even FAR grid over `[0, 1]`, skilled forgeries only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub far: Vec<f64>,
    pub frr_mean: Vec<f64>,
    pub frr_std: Vec<f64>,
}

fn roc_split(scores: &ScoreSet) -> Result<Vec<f64>> {
    let g = sorted(scores.genuine());
    let f = sorted(scores.skilled());
    if g.is_empty() || f.is_empty() {
        return Err(Error::Data("ROC needs genuine and skilled scores".into()));
    }
    let points: Vec<(f64, f64)> = candidate_thresholds(&g, &f)
        .into_iter()
        .map(|t| sorted_rates(&g, &f, t))
        .collect();
    Ok((0..ROC_POINTS)
        .map(|i| {
            let target = i as f64 / (ROC_POINTS - 1) as f64;
            points
                .iter()
                .filter(|(_, far)| *far <= target + 1e-12)
                .map(|(frr, _)| *frr)
                .fold(1.0, f64::min)
        })
        .collect())
}

pub fn roc_curve(splits: &[ScoreSet]) -> Result<RocCurve> {
    if splits.is_empty() {
        return Err(Error::Data("ROC needs at least one split".into()));
    }
    let curves = splits.iter().map(roc_split).collect::<Result<Vec<_>>>()?;
    let mut frr_mean = Vec::with_capacity(ROC_POINTS);
    let mut frr_std = Vec::with_capacity(ROC_POINTS);
    for i in 0..ROC_POINTS {
        let (m, s) = mean_std(curves.iter().map(|c| c[i]));
        frr_mean.push(m);
        frr_std.push(s);
    }
    Ok(RocCurve {
        far: (0..ROC_POINTS).map(|i| i as f64 / (ROC_POINTS - 1) as f64).collect(),
        frr_mean,
        frr_std,
    })
}

/// Mean and population standard deviation.
fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("far,frr_mean,frr_std\n");
        for i in 0..self.far.len() {
            let _ = writeln!(s, "{},{},{}", self.far[i], self.frr_mean[i], self.frr_std[i]);
        }
        s
    }
}

// ---- protocol -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_splits: usize,
    /// Genuine references per user.
    pub n_ref: usize,
    pub inner_steps: usize,
    pub alpha: f64,
    /// Random forgeries added to each adaptation set (0 = one-class).
    pub n_rf_adapt: usize,
    /// Random-forgery queries per user.
    pub n_rf_query: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            n_ref: 5,
            inner_steps: 5,
            alpha: 0.001,
            n_rf_adapt: 0,
            n_rf_query: 10,
            tau: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: usize,
    pub frr: Option<f64>,
    pub far_random: Option<f64>,
    pub far_skilled: Option<f64>,
    pub eer_global: f64,
    pub tau_global: f64,
    pub eer_user: f64,
    pub excluded_users: usize,
    pub auc_skilled: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl MeanStd {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let defined: Vec<f64> = values.flatten().collect();
        if defined.is_empty() {
            return Self { mean: None, std: None };
        }
        let (m, s) = mean_std(defined.into_iter());
        Self {
            mean: Some(m),
            std: Some(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tau: f64,
    pub splits: Vec<SplitMetrics>,
    pub frr: MeanStd,
    pub far_random: MeanStd,
    pub far_skilled: MeanStd,
    pub eer_global: MeanStd,
    pub eer_user: MeanStd,
    pub auc_skilled: MeanStd,
}

impl EvaluationReport {
    pub fn from_splits(tau: f64, splits: Vec<SplitMetrics>) -> Self {
        let stat = |f: fn(&SplitMetrics) -> Option<f64>| MeanStd::of(splits.iter().map(f));
        Self {
            tau,
            frr: stat(|s| s.frr),
            far_random: stat(|s| s.far_random),
            far_skilled: stat(|s| s.far_skilled),
            eer_global: stat(|s| Some(s.eer_global)),
            eer_user: stat(|s| Some(s.eer_user)),
            auc_skilled: stat(|s| Some(s.auc_skilled)),
            splits,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(
            "split,frr,far_random,far_skilled,eer_global,tau_global,eer_user,excluded_users,auc_skilled\n",
        );
        for m in &self.splits {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                m.split,
                opt(m.frr),
                opt(m.far_random),
                opt(m.far_skilled),
                m.eer_global,
                m.tau_global,
                m.eer_user,
                m.excluded_users,
                m.auc_skilled
            );
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let v = |x: &MeanStd| opt(if pick == 0 { x.mean } else { x.std });
            let _ = writeln!(
                s,
                "{label},{},{},{},{},,{},,{}",
                v(&self.frr),
                v(&self.far_random),
                v(&self.far_skilled),
                v(&self.eer_global),
                v(&self.eer_user),
                v(&self.auc_skilled)
            );
        }
        s
    }
}

/// Metrics of one split's scores.
pub fn split_metrics(split: usize, scores: &ScoreSet, tau: f64) -> Result<SplitMetrics> {
    let rates = rates_at_threshold(scores, tau);
    let (eer_g, tau_g) = eer_global(scores)?;
    let user = eer_user(scores)?;
    Ok(SplitMetrics {
        split,
        frr: rates.frr,
        far_random: rates.far_random,
        far_skilled: rates.far_skilled,
        eer_global: eer_g,
        tau_global: tau_g,
        eer_user: user.eer,
        excluded_users: user.excluded,
        auc_skilled: auc(&scores.genuine(), &scores.skilled())?,
    })
}

fn centre_batch<T: Scalar>(images: &[&CanonicalImage]) -> Result<Tensor<T>> {
    let plane = INPUT_HEIGHT * INPUT_WIDTH;
    let mut t = Tensor::zeros(&[images.len().max(1), 1, INPUT_HEIGHT, INPUT_WIDTH]);
    let offset = crop_offset(CropMode::Center);
    for (i, img) in images.iter().enumerate() {
        crop_into(img, offset, &mut t.data_mut()[i * plane..(i + 1) * plane]);
    }
    Ok(t)
}

fn score_images<T: Scalar, M: Model<T>>(
    model: &M,
    theta: &ParameterSet<T>,
    images: &[&CanonicalImage],
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    score_user(model, theta, &centre_batch(images)?)
}

/// Adapts to every user of one partition and scores their queries.
fn score_partition<T: Scalar, M: Model<T>>(
    model: &M,
    theta: &ParameterSet<T>,
    users: &[UserTask],
    partition: &[crate::episodes::UserPartition],
    cfg: &ProtocolConfig,
    split: usize,
) -> Result<ScoreSet> {
    let per_user = (0..users.len())
        .into_par_iter()
        .map(|ui| -> Result<UserScores> {
            let user = &users[ui];
            let part = &partition[ui];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[split as u64, user.user_id as u64]));
            let mut others: Vec<usize> = (0..users.len()).filter(|&j| j != ui).collect();
            others.shuffle(&mut rng);
            // adaptation random forgeries from others' references, queries from
            // others' query genuines
            let pick = |n: usize, refs: bool| -> Vec<&CanonicalImage> {
                let mut out = Vec::with_capacity(n);
                let mut round = 0;
                while out.len() < n {
                    let mut any = false;
                    for &j in &others {
                        let idx = if refs {
                            &partition[j].reference
                        } else {
                            &partition[j].query
                        };
                        if let Some(&i) = idx.get(round) {
                            any = true;
                            if out.len() < n {
                                out.push(&users[j].genuine[i]);
                            }
                        }
                    }
                    if !any {
                        break;
                    }
                    round += 1;
                }
                out
            };
            let rf_adapt = pick(cfg.n_rf_adapt, true);
            let rf_query = pick(cfg.n_rf_query, false);

            let mut adapt_imgs: Vec<&CanonicalImage> = part.reference.iter().map(|&i| &user.genuine[i]).collect();
            let mut classes = vec![SampleClass::Genuine; adapt_imgs.len()];
            adapt_imgs.extend(&rf_adapt);
            classes.resize(adapt_imgs.len(), SampleClass::RandomForgery);
            let d_u = SampleBatch::new(centre_batch(&adapt_imgs)?, classes)?;
            let adapted = adapt(model, theta, &d_u, cfg.inner_steps, cfg.alpha)?;
            let theta_u = adapted.adapted();

            let genuine_q: Vec<&CanonicalImage> = part.query.iter().map(|&i| &user.genuine[i]).collect();
            let skilled_q: Vec<&CanonicalImage> = user.skilled.iter().collect();
            Ok(UserScores {
                user_id: user.user_id,
                genuine: score_images(model, theta_u, &genuine_q)?,
                skilled: score_images(model, theta_u, &skilled_q)?,
                random: score_images(model, theta_u, &rf_query)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(per_user)
}

/// Full protocol output: the report and each split's raw scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolRun {
    pub report: EvaluationReport,
    pub scores: Vec<ScoreSet>,
}

/// Repeated random subsampling: per split, adapt to each user's references
/// (genuine only, plus optional random forgeries) and score the remaining
/// genuines, the user's skilled forgeries and other users' genuines.
pub fn evaluate_protocol<T: Scalar, M: Model<T>>(
    model: &M,
    theta: &ParameterSet<T>,
    test_users: &[UserTask],
    cfg: &ProtocolConfig,
) -> Result<ProtocolRun> {
    if test_users.len() < 2 && (cfg.n_rf_adapt > 0 || cfg.n_rf_query > 0) {
        return Err(Error::Data("random forgeries need at least two test users".into()));
    }
    let partitions = repeated_subsampling(test_users, cfg.n_splits, cfg.n_ref, cfg.seed)?;
    let mut scores = Vec::with_capacity(cfg.n_splits);
    let mut metrics = Vec::with_capacity(cfg.n_splits);
    for (s, part) in partitions.iter().enumerate() {
        let set = score_partition(model, theta, test_users, part, cfg, s)?;
        metrics.push(split_metrics(s, &set, cfg.tau)?);
        scores.push(set);
    }
    Ok(ProtocolRun {
        report: EvaluationReport::from_splits(cfg.tau, metrics),
        scores,
    })
}

/// Single-split protocol used for early stopping.
pub fn validation_metrics<T: Scalar, M: Model<T>>(
    model: &M,
    theta: &ParameterSet<T>,
    val_users: &[UserTask],
    cfg: &ProtocolConfig,
) -> Result<ValidationMetrics> {
    let run = evaluate_protocol(
        model,
        theta,
        val_users,
        &ProtocolConfig {
            n_splits: 1,
            ..cfg.clone()
        },
    )?;
    let m = &run.report.splits[0];
    Ok(ValidationMetrics {
        eer_global: m.eer_global,
        eer_user: m.eer_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(genuine: &[f64], skilled: &[f64]) -> ScoreSet {
        ScoreSet::new(vec![UserScores {
            user_id: 0,
            genuine: genuine.to_vec(),
            skilled: skilled.to_vec(),
            random: vec![],
        }])
        .unwrap()
    }

    /// Every score value (and one above all of them) as a threshold.
    fn brute_force_eer(genuine: &[f64], skilled: &[f64]) -> f64 {
        let mut taus: Vec<f64> = genuine.iter().chain(skilled).copied().collect();
        taus.push(f64::INFINITY);
        taus.sort_by(f64::total_cmp);
        let mut best = (f64::INFINITY, 0.0);
        for t in taus {
            let frr = genuine.iter().filter(|&&v| v < t).count() as f64 / genuine.len() as f64;
            let far = skilled.iter().filter(|&&v| v >= t).count() as f64 / skilled.len() as f64;
            if (frr - far).abs() < best.0 {
                best = ((frr - far).abs(), 0.5 * (frr + far));
            }
        }
        best.1
    }

    #[test]
    fn rate_examples() {
        let r = rates_at_threshold(&one(&[0.9, 0.8], &[0.1]), 0.5);
        assert_eq!((r.frr, r.far_skilled, r.far_random), (Some(0.0), Some(0.0), None));
        let r = rates_at_threshold(&one(&[0.9, 0.8], &[0.1]), 0.0);
        assert_eq!((r.frr, r.far_skilled), (Some(0.0), Some(1.0)));
        let r = rates_at_threshold(&one(&[0.4, 0.6], &[0.5, 0.2]), 0.5);
        assert_eq!((r.frr, r.far_skilled), (Some(0.5), Some(0.5)));
    }

    #[test]
    fn eer_examples() {
        let (eer, tau) = eer_global(&one(&[0.9, 0.8, 0.7, 0.6], &[0.65, 0.3, 0.2, 0.1])).unwrap();
        assert_eq!(eer, 0.25);
        assert!((tau - 0.65).abs() < 0.05, "{tau}");
        assert_eq!(eer_global(&one(&[0.9, 0.8], &[0.1, 0.2])).unwrap().0, 0.0);
        assert_eq!(eer_global(&one(&[0.5; 4], &[0.5; 4])).unwrap().0, 0.5);
        assert!(matches!(eer_global(&one(&[0.5], &[])), Err(Error::Data(_))));
    }

    #[test]
    fn user_thresholds_separate_shifted_users() {
        let s = ScoreSet::new(vec![
            UserScores {
                user_id: 0,
                genuine: vec![0.9],
                skilled: vec![0.6],
                random: vec![],
            },
            UserScores {
                user_id: 1,
                genuine: vec![0.5],
                skilled: vec![0.2],
                random: vec![],
            },
        ])
        .unwrap();
        assert_eq!(eer_user(&s).unwrap().eer, 0.0);
        assert!(eer_global(&s).unwrap().0 > 0.0);
        let single = one(&[0.9, 0.4, 0.7], &[0.5, 0.1]);
        assert_eq!(eer_user(&single).unwrap().eer, eer_global(&single).unwrap().0);
        let u = UserScores {
            user_id: 0,
            genuine: vec![0.9, 0.3],
            skilled: vec![0.5, 0.1],
            random: vec![],
        };
        let same = ScoreSet::new(vec![u.clone(), UserScores { user_id: 1, ..u }]).unwrap();
        assert_eq!(eer_user(&same).unwrap().eer, eer_global(&same).unwrap().0);
        let partial = ScoreSet::new(vec![
            UserScores {
                user_id: 0,
                genuine: vec![0.9],
                skilled: vec![0.1],
                random: vec![],
            },
            UserScores {
                user_id: 1,
                genuine: vec![0.9],
                skilled: vec![],
                random: vec![],
            },
        ])
        .unwrap();
        assert_eq!(eer_user(&partial).unwrap(), UserEer { eer: 0.0, excluded: 1 });
    }

    #[test]
    fn roc_corners_and_single_split() {
        let s = one(&[0.9, 0.4, 0.7, 0.3], &[0.5, 0.1, 0.35]);
        let roc = roc_curve(&[s]).unwrap();
        assert_eq!(roc.far.len(), ROC_POINTS);
        assert_eq!(*roc.frr_mean.last().unwrap(), 0.0);
        assert!(roc.frr_std.iter().all(|&v| v == 0.0));
        assert_eq!(roc.far[0], 0.0);
        assert_eq!(*roc.far.last().unwrap(), 1.0);
    }

    #[test]
    fn auc_values() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5], &[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn midpoint_rounding_is_nudged_up() {
        let a = 0.3f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let c = candidate_thresholds(&[b], &[a]);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(eer_scores(&[b], &[a]).unwrap().0, 0.0);
    }

    fn score_vec(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![(0u32..=20).prop_map(|v| v as f64 / 20.0), 0.0..=1.0f64],
            1..max,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn eer_matches_brute_force(g in score_vec(250), s in score_vec(250)) {
            prop_assert_eq!(eer_scores(&g, &s).unwrap().0, brute_force_eer(&g, &s));
        }

        #[test]
        fn rates_are_monotone(g in score_vec(60), s in score_vec(60), mut taus in prop::collection::vec(0.0..=1.0f64, 2..20)) {
            taus.sort_by(f64::total_cmp);
            let set = one(&g, &s);
            let r: Vec<Rates> = taus.iter().map(|&t| rates_at_threshold(&set, t)).collect();
            for w in r.windows(2) {
                prop_assert!(w[0].frr <= w[1].frr);
                prop_assert!(w[0].far_skilled >= w[1].far_skilled);
            }
        }

        #[test]
        fn roc_mean_is_non_increasing(splits in prop::collection::vec((score_vec(40), score_vec(40)), 1..4)) {
            let sets: Vec<ScoreSet> = splits.iter().map(|(g, s)| one(g, s)).collect();
            let roc = roc_curve(&sets).unwrap();
            prop_assert!(roc.frr_mean.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            prop_assert!(roc.frr_std.iter().all(|&v| v >= 0.0));
            prop_assert!(roc.frr_mean.last().unwrap().abs() < 1e-12);
        }
    }
}
