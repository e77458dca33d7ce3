//! Writer tasks, user splits and episodic sampling.
//!
//! An episode pairs an adaptation set (the user's genuine signatures plus,
//! optionally, random forgeries taken from other users' genuines) with a
//! disjoint meta-update set that may also contain the user's skilled
//! forgeries. Skilled forgeries never enter an adaptation set.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::netmodel::{INPUT_HEIGHT, INPUT_WIDTH};
use crate::preprocess::{crop_into, crop_offset, CanonicalImage, CropMode};
use crate::scalar::Scalar;

/// One writer: genuine signatures and (possibly) skilled forgeries of them.
#[derive(Clone, Debug, PartialEq)]
pub struct UserTask {
    pub user_id: u32,
    pub genuine: Vec<CanonicalImage>,
    pub skilled: Vec<CanonicalImage>,
    /// Whether `skilled` may be used by the meta-update loss.
    pub forgery_available: bool,
}

impl UserTask {
    pub fn new(user_id: u32, genuine: Vec<CanonicalImage>, skilled: Vec<CanonicalImage>) -> Result<Self> {
        if genuine.is_empty() {
            return Err(Error::Data(format!("user {user_id} has no genuine signatures")));
        }
        let forgery_available = !skilled.is_empty();
        Ok(Self {
            user_id,
            genuine,
            skilled,
            forgery_available,
        })
    }
}

/// User-disjoint partition of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub meta_train: Vec<UserTask>,
    pub meta_val: Vec<UserTask>,
    pub meta_test: Vec<UserTask>,
}

/// How users are assigned to the three meta splits.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Index ranges into the task list (e.g. the 350..881 / 300..350 / 0..300
    /// convention for an 881-writer corpus).
    Ranges {
        train: Range<usize>,
        val: Range<usize>,
        test: Range<usize>,
    },
    /// Seeded shuffle then proportional assignment.
    Fractions { train: f64, val: f64, test: f64 },
}

impl SplitSpec {
    pub fn gpds() -> Self {
        SplitSpec::Ranges {
            train: 350..881,
            val: 300..350,
            test: 0..300,
        }
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end && !a.is_empty() && !b.is_empty()
}

pub fn split_users(tasks: Vec<UserTask>, spec: &SplitSpec, seed: u64) -> Result<DatasetSplit> {
    let n = tasks.len();
    let (train, val, test) = match spec {
        SplitSpec::Ranges { train, val, test } => {
            for r in [train, val, test] {
                if r.end > n || r.start > r.end {
                    return Err(Error::Parameter(format!("range {r:?} outside 0..{n}")));
                }
            }
            if overlaps(train, val) || overlaps(train, test) || overlaps(val, test) {
                return Err(Error::Parameter("split ranges overlap".into()));
            }
            (train.clone(), val.clone(), test.clone())
        }
        SplitSpec::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(*f)) || train + val + test > 1.0 + 1e-9 {
                return Err(Error::Parameter(
                    "split fractions must be in [0,1] and sum to at most 1".into(),
                ));
            }
            let nt = (train * n as f64).round() as usize;
            let nv = ((val * n as f64).round() as usize).min(n - nt);
            let ns = ((test * n as f64).round() as usize).min(n - nt - nv);
            (0..nt, nt..nt + nv, nt + nv..nt + nv + ns)
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    if matches!(spec, SplitSpec::Fractions { .. }) {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut slots: Vec<Option<UserTask>> = tasks.into_iter().map(Some).collect();
    let mut take =
        |r: Range<usize>| -> Vec<UserTask> { r.map(|i| slots[order[i]].take().expect("disjoint ranges")).collect() };
    Ok(DatasetSplit {
        meta_train: take(train),
        meta_val: take(val),
        meta_test: take(test),
    })
}

/// Keeps skilled forgeries usable for exactly `⌊fraction·n⌋` seeded-random
/// meta-train users.
pub fn mark_forgery_availability(mut split: DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter(format!("forgery fraction {fraction} outside [0,1]")));
    }
    let n = split.meta_train.len();
    let keep = (fraction * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        let task = &mut split.meta_train[i];
        task.forgery_available = rank < keep && !task.skilled.is_empty();
    }
    Ok(split)
}

/// Fraction of meta-train users whose skilled forgeries are usable.
pub fn forgery_fraction(split: &DatasetSplit) -> f64 {
    if split.meta_train.is_empty() {
        return 0.0;
    }
    split.meta_train.iter().filter(|t| t.forgery_available).count() as f64 / split.meta_train.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleClass {
    Genuine,
    RandomForgery,
    SkilledForgery,
}

impl SampleClass {
    /// 1 for genuine, 0 for either forgery type.
    pub fn label(self) -> u8 {
        matches!(self, SampleClass::Genuine) as u8
    }
}

/// Reference to one image of a user, tagged with its role.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub image: &'a CanonicalImage,
    pub class: SampleClass,
    /// Owner of the image (for random forgeries this is the other user).
    pub source_user: u32,
    /// Index in the owner's genuine or skilled list.
    pub index: usize,
}

impl Sample<'_> {
    fn key(&self) -> (u32, bool, usize) {
        (self.source_user, self.class == SampleClass::SkilledForgery, self.index)
    }
}

#[derive(Clone, Debug)]
pub struct Episode<'a> {
    pub user_id: u32,
    pub adapt_set: Vec<Sample<'a>>,
    pub meta_set: Vec<Sample<'a>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub n_genuine_adapt: usize,
    /// Random forgeries in the adaptation set; 0 gives the one-class variant.
    pub n_rf_adapt: usize,
    pub n_genuine_meta: usize,
    pub n_rf_meta: usize,
    pub use_all_skilled_meta: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_genuine_adapt: 5,
            n_rf_adapt: 0,
            n_genuine_meta: 10,
            n_rf_meta: 10,
            use_all_skilled_meta: true,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_genuine_adapt == 0 {
            return Err(Error::Parameter("n_genuine_adapt must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws `count` random forgeries from the pool's genuines: one per user in a
/// shuffled user order, then a second round, and so on. No image is drawn
/// twice, and `exclude` keys are skipped.
fn draw_random_forgeries<'a>(
    pool: &'a [&'a UserTask],
    count: usize,
    exclude: &[(u32, bool, usize)],
    rng: &mut ChaCha8Rng,
) -> Vec<Sample<'a>> {
    if count == 0 || pool.is_empty() {
        return Vec::new();
    }
    let mut users: Vec<usize> = (0..pool.len()).collect();
    users.shuffle(rng);
    let mut per_user: Vec<Vec<usize>> = users
        .iter()
        .map(|&u| {
            let mut idx: Vec<usize> = (0..pool[u].genuine.len())
                .filter(|&i| !exclude.contains(&(pool[u].user_id, false, i)))
                .collect();
            idx.shuffle(rng);
            idx
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    let mut round = 0;
    while out.len() < count {
        let mut any = false;
        for (slot, &u) in users.iter().enumerate() {
            if out.len() == count {
                break;
            }
            if let Some(&i) = per_user[slot].get(round) {
                any = true;
                out.push(Sample {
                    image: &pool[u].genuine[i],
                    class: SampleClass::RandomForgery,
                    source_user: pool[u].user_id,
                    index: i,
                });
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    per_user.clear();
    out
}

/// Samples the adaptation and meta-update sets for one user. Pure in
/// `(user, pool, cfg, seed)`.
pub fn sample_episode<'a>(
    user: &'a UserTask,
    pool: &'a [&'a UserTask],
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<Episode<'a>> {
    cfg.validate()?;
    if pool.iter().any(|p| p.user_id == user.user_id) {
        return Err(Error::Contract(format!(
            "random-forgery pool contains user {} itself",
            user.user_id
        )));
    }
    let need = cfg.n_genuine_adapt + cfg.n_genuine_meta;
    if user.genuine.len() < need {
        return Err(Error::Data(format!(
            "user {} has {} genuine signatures, episode needs {need}",
            user.user_id,
            user.genuine.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..user.genuine.len()).collect();
    order.shuffle(&mut rng);
    let genuine = |i: usize| Sample {
        image: &user.genuine[i],
        class: SampleClass::Genuine,
        source_user: user.user_id,
        index: i,
    };

    let mut adapt_set: Vec<Sample<'a>> = order[..cfg.n_genuine_adapt].iter().map(|&i| genuine(i)).collect();
    adapt_set.extend(draw_random_forgeries(pool, cfg.n_rf_adapt, &[], &mut rng));

    let mut meta_set: Vec<Sample<'a>> = order[cfg.n_genuine_adapt..need].iter().map(|&i| genuine(i)).collect();
    let used: Vec<_> = adapt_set.iter().map(Sample::key).collect();
    meta_set.extend(draw_random_forgeries(pool, cfg.n_rf_meta, &used, &mut rng));
    if user.forgery_available && cfg.use_all_skilled_meta {
        meta_set.extend(user.skilled.iter().enumerate().map(|(i, img)| Sample {
            image: img,
            class: SampleClass::SkilledForgery,
            source_user: user.user_id,
            index: i,
        }));
    }
    Ok(Episode {
        user_id: user.user_id,
        adapt_set,
        meta_set,
    })
}

/// Network-ready samples: images `[B, 1, 150, 220]` plus per-sample class.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    pub images: Tensor<T>,
    pub classes: Vec<SampleClass>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn new(images: Tensor<T>, classes: Vec<SampleClass>) -> Result<Self> {
        if images.shape().first() != Some(&classes.len()) {
            return Err(Error::dim("sample batch", "batch", classes.len(), images.shape()[0]));
        }
        Ok(Self { images, classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn count(&self, class: SampleClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Crops the samples into a batch. `Random(seed)` draws an independent
    /// offset per sample from `seed`.
    pub fn from_samples(samples: &[Sample<'_>], mode: CropMode) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty sample set".into()));
        }
        let plane = INPUT_HEIGHT * INPUT_WIDTH;
        let mut images = Tensor::zeros(&[samples.len(), 1, INPUT_HEIGHT, INPUT_WIDTH]);
        let mut rng = match mode {
            CropMode::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            CropMode::Center => None,
        };
        for (i, s) in samples.iter().enumerate() {
            let sub_mode = match rng.as_mut() {
                Some(r) => CropMode::Random(r.gen()),
                None => CropMode::Center,
            };
            crop_into(
                s.image,
                crop_offset(sub_mode),
                &mut images.data_mut()[i * plane..(i + 1) * plane],
            );
        }
        Self::new(images, samples.iter().map(|s| s.class).collect())
    }

    pub fn from_images(images: &[&CanonicalImage], class: SampleClass, mode: CropMode) -> Result<Self> {
        let samples: Vec<Sample<'_>> = images
            .iter()
            .enumerate()
            .map(|(i, img)| Sample {
                image: img,
                class,
                source_user: 0,
                index: i,
            })
            .collect();
        Self::from_samples(&samples, mode)
    }
}

/// One evaluation partition of a user's genuines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserPartition {
    pub user_id: u32,
    pub reference: Vec<usize>,
    pub query: Vec<usize>,
}

/// `n_splits` seeded reference/query partitions of every user's genuines.
pub fn repeated_subsampling(
    users: &[UserTask],
    n_splits: usize,
    n_ref: usize,
    seed: u64,
) -> Result<Vec<Vec<UserPartition>>> {
    if n_ref == 0 {
        return Err(Error::Parameter("need at least one reference signature".into()));
    }
    if let Some(u) = users.iter().find(|u| u.genuine.len() <= n_ref) {
        return Err(Error::Data(format!(
            "user {} has {} genuine signatures, needs more than {n_ref}",
            u.user_id,
            u.genuine.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_splits)
        .map(|_| {
            users
                .iter()
                .map(|u| {
                    let mut idx: Vec<usize> = (0..u.genuine.len()).collect();
                    idx.shuffle(&mut rng);
                    let query = idx.split_off(n_ref);
                    UserPartition {
                        user_id: u.user_id,
                        reference: idx,
                        query,
                    }
                })
                .collect()
        })
        .collect())
}
