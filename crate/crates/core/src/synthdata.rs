//! Deterministic synthetic writers.
//!
//! Each writer owns a prototype made of a few cubic Bézier strokes. Genuine
//! samples redraw the prototype with smooth control-point jitter; skilled
//! forgeries redraw it with a larger distortion and a tremor, using the same
//! amount of ink as a genuine stroke.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::episodes::UserTask;
use crate::error::{Error, Result};
use crate::preprocess::{preprocess_signature, RawImage};

pub const RAW_HEIGHT: usize = 400;
pub const RAW_WIDTH: usize = 800;

const STROKE_RADIUS: f64 = 5.0;
const TREMOR_FREQUENCY: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUserSpec {
    pub user_id: u32,
    pub seed: u64,
    pub n_genuine: usize,
    pub n_skilled: usize,
    /// Genuine jitter, as a fraction of the canvas height.
    pub intra_variation: f64,
    /// Forgery distortion, same unit.
    pub forgery_gap: f64,
    /// Amplitude of the forger's tremor, same unit.
    pub tremor: f64,
}

impl SynthUserSpec {
    pub fn new(user_id: u32, seed: u64) -> Self {
        Self {
            user_id,
            seed,
            n_genuine: 24,
            n_skilled: 30,
            intra_variation: 0.012,
            forgery_gap: 0.04,
            tremor: 0.012,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_genuine < 2 {
            return Err(Error::Parameter("n_genuine must be at least 2".into()));
        }
        if self.tremor.is_nan() || self.tremor < 0.0 {
            return Err(Error::Parameter(format!("tremor {} must be non-negative", self.tremor)));
        }
        if !(self.intra_variation >= 0.0 && self.forgery_gap > self.intra_variation) {
            return Err(Error::Parameter(format!(
                "forgery_gap ({}) must exceed intra_variation ({})",
                self.forgery_gap, self.intra_variation
            )));
        }
        Ok(())
    }
}

type Point = (f64, f64);

/// Chain of cubic segments sharing endpoints: `1 + 3·segments` points.
#[derive(Clone, Debug)]
struct Stroke {
    points: Vec<Point>,
}

#[derive(Clone, Debug)]
struct Prototype {
    strokes: Vec<Stroke>,
}

fn prototype(rng: &mut ChaCha8Rng) -> Prototype {
    let h = RAW_HEIGHT as f64;
    let w = RAW_WIDTH as f64;
    let n = rng.gen_range(3..=6);
    let band = 0.8 * w / n as f64;
    let strokes = (0..n)
        .map(|s| {
            let x0 = 0.1 * w + band * s as f64;
            let segments = rng.gen_range(1..=3);
            let mut points = Vec::with_capacity(1 + 3 * segments);
            let mut cursor = (x0 + rng.gen_range(0.0..0.3) * band, rng.gen_range(0.25..0.75) * h);
            points.push(cursor);
            for _ in 0..segments {
                for _ in 0..3 {
                    cursor = (
                        (cursor.0 + rng.gen_range(-0.35..0.6) * band).clamp(0.05 * w, 0.95 * w),
                        (cursor.1 + rng.gen_range(-0.35..0.35) * h).clamp(0.1 * h, 0.9 * h),
                    );
                    points.push(cursor);
                }
            }
            Stroke { points }
        })
        .collect();
    Prototype { strokes }
}

fn bezier(p: &[Point], t: f64) -> Point {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

/// How one sample departs from the prototype.
struct Distortion {
    jitter: f64,
    tremor: f64,
    radius: f64,
    darkness: f64,
}

/// Stamp centres of one rendering, plus the path length without and with
/// tremor.
fn trace(proto: &Prototype, d: &Distortion, rng: &mut ChaCha8Rng) -> (Vec<Point>, f64, f64) {
    let h = RAW_HEIGHT as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // global pose: small shift, rotation and scale
    let angle = d.jitter * 1.5 * normal.sample(rng);
    let scale = 1.0 + d.jitter * 2.0 * normal.sample(rng);
    let shift = (d.jitter * h * normal.sample(rng), d.jitter * h * normal.sample(rng));
    let (sin, cos) = angle.sin_cos();
    let centre = (RAW_WIDTH as f64 / 2.0, h / 2.0);
    let pose = |p: Point| {
        let (x, y) = ((p.0 - centre.0) * scale, (p.1 - centre.1) * scale);
        (
            centre.0 + cos * x - sin * y + shift.0,
            centre.1 + sin * x + cos * y + shift.1,
        )
    };

    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut centres = Vec::new();
    let (mut base_len, mut drawn_len) = (0.0, 0.0);
    for stroke in &proto.strokes {
        let pts: Vec<Point> = stroke
            .points
            .iter()
            .map(|&p| {
                pose((
                    p.0 + d.jitter * h * normal.sample(rng),
                    p.1 + d.jitter * h * normal.sample(rng),
                ))
            })
            .collect();
        let mut travelled = 0.0;
        let mut last: Option<Point> = None;
        for seg in pts.windows(4).step_by(3) {
            let chord: f64 = seg.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).sum();
            let steps = chord.ceil().max(2.0) as usize;
            let mut prev = bezier(seg, 0.0);
            for i in 0..=steps {
                let p = bezier(seg, i as f64 / steps as f64);
                let (dx, dy) = (p.0 - prev.0, p.1 - prev.1);
                let len = dx.hypot(dy);
                travelled += len;
                base_len += len;
                let wobble = d.tremor * h * (travelled * TREMOR_FREQUENCY + phase).sin();
                let (nx, ny) = if len > 0.0 { (-dy / len, dx / len) } else { (0.0, 0.0) };
                let q = (p.0 + nx * wobble, p.1 + ny * wobble);
                if let Some(l) = last {
                    drawn_len += (q.0 - l.0).hypot(q.1 - l.1);
                }
                last = Some(q);
                centres.push(q);
                prev = p;
            }
        }
    }
    (centres, base_len, drawn_len)
}

/// Renders one sample. Tremor lengthens the drawn path, so the line is thinned
/// to keep the amount of ink of an untrembling stroke.
fn render(proto: &Prototype, d: &Distortion, rng: &mut ChaCha8Rng) -> RawImage {
    let (centres, base_len, drawn_len) = trace(proto, d, rng);
    let radius = if drawn_len > base_len && base_len > 0.0 {
        (((2.0 * d.radius + 1.0) * base_len / drawn_len - 1.0) / 2.0).max(1.0)
    } else {
        d.radius
    };
    let mut ink = vec![0.0f32; RAW_HEIGHT * RAW_WIDTH];
    for c in centres {
        stamp(&mut ink, c, radius, d.darkness);
    }
    let pixels = ink.iter().map(|&v| 255 - (v.min(1.0) * 230.0).round() as u8).collect();
    RawImage::new(RAW_HEIGHT, RAW_WIDTH, pixels).expect("raw canvas dimensions")
}

fn stamp(ink: &mut [f32], c: Point, radius: f64, darkness: f64) {
    let r = radius.ceil() as isize + 1;
    let (cx, cy) = (c.0.round() as isize, c.1.round() as isize);
    let outer2 = (radius + 0.5).powi(2);
    let inner2 = (radius - 0.5).max(0.0).powi(2);
    for y in (cy - r).max(0)..(cy + r + 1).min(RAW_HEIGHT as isize) {
        for x in (cx - r).max(0)..(cx + r + 1).min(RAW_WIDTH as isize) {
            let d2 = (x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2);
            if d2 >= outer2 {
                continue;
            }
            let cover = if d2 <= inner2 {
                1.0
            } else {
                (radius + 0.5 - d2.sqrt()).min(1.0)
            };
            let i = y as usize * RAW_WIDTH + x as usize;
            ink[i] = ink[i].max((cover * darkness) as f32);
        }
    }
}

/// Raw renderings of one writer, before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawUser {
    pub user_id: u32,
    pub genuine: Vec<RawImage>,
    pub skilled: Vec<RawImage>,
}

pub fn render_user(spec: &SynthUserSpec) -> Result<RawUser> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proto = prototype(&mut rng);
    let v = spec.intra_variation;
    let genuine = (0..spec.n_genuine)
        .map(|_| {
            let radius = STROKE_RADIUS * (1.0 + 4.0 * v * rng.gen_range(-1.0..1.0));
            let darkness = 1.0 - 6.0 * v * rng.gen_range(0.0..1.0);
            let d = Distortion {
                jitter: v,
                tremor: 0.0,
                radius,
                darkness,
            };
            render(&proto, &d, &mut rng)
        })
        .collect();
    let gap = spec.forgery_gap;
    let skilled = (0..spec.n_skilled)
        .map(|_| {
            let d = Distortion {
                jitter: gap,
                tremor: spec.tremor,
                radius: STROKE_RADIUS * (1.0 + 4.0 * v * rng.gen_range(-1.0..1.0)),
                darkness: 1.0 - 6.0 * v * rng.gen_range(0.0..1.0),
            };
            render(&proto, &d, &mut rng)
        })
        .collect();
    Ok(RawUser {
        user_id: spec.user_id,
        genuine,
        skilled,
    })
}

/// Renders and preprocesses one writer.
pub fn generate_user(spec: &SynthUserSpec) -> Result<UserTask> {
    let raw = render_user(spec)?;
    let genuine = raw
        .genuine
        .iter()
        .map(preprocess_signature)
        .collect::<Result<Vec<_>>>()?;
    let skilled = raw
        .skilled
        .iter()
        .map(preprocess_signature)
        .collect::<Result<Vec<_>>>()?;
    UserTask::new(spec.user_id, genuine, skilled)
}

/// Per-user specs for a corpus: ids `0..n_users`, seeds `base_seed + id`,
/// everything else copied from `template`.
pub fn dataset_specs(n_users: usize, base_seed: u64, template: &SynthUserSpec) -> Result<Vec<SynthUserSpec>> {
    if n_users < 2 {
        return Err(Error::Parameter("a synthetic corpus needs at least 2 users".into()));
    }
    template.validate()?;
    Ok((0..n_users as u32)
        .map(|id| SynthUserSpec {
            user_id: id,
            seed: base_seed.wrapping_add(id as u64),
            ..template.clone()
        })
        .collect())
}

pub fn generate_dataset(n_users: usize, base_seed: u64) -> Result<Vec<UserTask>> {
    generate_dataset_with(n_users, base_seed, &SynthUserSpec::new(0, 0))
}

pub fn generate_dataset_with(n_users: usize, base_seed: u64, template: &SynthUserSpec) -> Result<Vec<UserTask>> {
    dataset_specs(n_users, base_seed, template)?
        .par_iter()
        .map(generate_user)
        .collect()
}

/// Mean squared pixel distance between two canonical images.
pub fn pixel_distance(a: &crate::preprocess::CanonicalImage, b: &crate::preprocess::CanonicalImage) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.pixels().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::CanonicalImage;

    fn small(user_id: u32, seed: u64) -> SynthUserSpec {
        SynthUserSpec {
            n_genuine: 6,
            n_skilled: 6,
            ..SynthUserSpec::new(user_id, seed)
        }
    }

    fn mean_pairwise(a: &[CanonicalImage], b: &[CanonicalImage], same: bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                if same && j <= i {
                    continue;
                }
                sum += pixel_distance(x, y);
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn same_spec_renders_identically() {
        let spec = small(3, 11);
        assert_eq!(render_user(&spec).unwrap(), render_user(&spec).unwrap());
    }

    #[test]
    fn zero_variation_gives_identical_genuines() {
        let spec = SynthUserSpec {
            intra_variation: 0.0,
            ..small(0, 5)
        };
        let u = generate_user(&spec).unwrap();
        assert!(u.genuine.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(u.genuine[0], u.skilled[0]);
    }

    #[test]
    fn spec_invariants_are_enforced() {
        let mut s = SynthUserSpec::new(0, 0);
        s.n_genuine = 1;
        assert!(matches!(generate_user(&s), Err(Error::Parameter(_))));
        let mut s = SynthUserSpec::new(0, 0);
        s.forgery_gap = s.intra_variation;
        assert!(matches!(generate_user(&s), Err(Error::Parameter(_))));
        assert!(generate_dataset(1, 0).is_err());
    }

    #[test]
    fn dataset_is_seeded_per_user() {
        let template = small(0, 0);
        let a = generate_dataset_with(4, 100, &template).unwrap();
        let b = generate_dataset_with(4, 100, &template).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|t| t.user_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let alone = generate_user(&SynthUserSpec {
            user_id: 2,
            seed: 102,
            ..template
        })
        .unwrap();
        assert_eq!(a[2], alone);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(a[i].genuine.iter().all(|g| !a[j].genuine.contains(g)));
                }
            }
        }
    }

    #[test]
    fn distance_ordering_holds_across_seeds() {
        for base in [0u64, 1000, 2000, 3000, 4000] {
            let users = generate_dataset_with(20, base, &small(0, 0)).unwrap();
            let (mut gg, mut gs, mut go) = (0.0, 0.0, 0.0);
            for (i, u) in users.iter().enumerate() {
                gg += mean_pairwise(&u.genuine, &u.genuine, true);
                gs += mean_pairwise(&u.genuine, &u.skilled, false);
                go += mean_pairwise(&u.genuine, &users[(i + 1) % users.len()].genuine, false);
            }
            assert!(gg < gs && gs < go, "base {base}: {gg} {gs} {go}");
        }
    }
}
