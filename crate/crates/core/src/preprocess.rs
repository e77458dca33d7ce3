//! Signature image normalisation: OTSU background removal, centre-of-mass
//! centring on a fixed canvas, resize to the canonical resolution, and the
//! crops fed to the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::netmodel::{INPUT_HEIGHT, INPUT_WIDTH};
use crate::scalar::Scalar;

pub const CANVAS_HEIGHT: usize = 952;
pub const CANVAS_WIDTH: usize = 1360;
pub const CANONICAL_HEIGHT: usize = 170;
pub const CANONICAL_WIDTH: usize = 242;

/// 8-bit grayscale raster, dark ink on a light background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter("raw image must be non-empty".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::dim("raw image", "pixel count", height * width, pixels.len()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }
}

/// A preprocessed signature: 170×242 values in [0, 1], ink positive,
/// background exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalImage {
    pixels: Vec<f32>,
}

impl CanonicalImage {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        let n = CANONICAL_HEIGHT * CANONICAL_WIDTH;
        if pixels.len() != n {
            return Err(Error::dim("canonical image", "pixel count", n, pixels.len()));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("canonical pixels must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * CANONICAL_WIDTH + col]
    }

    /// Ink-weighted centroid `(row, col)`, or `None` for a blank image.
    pub fn center_of_mass(&self) -> Option<(f64, f64)> {
        center_of_mass(&self.pixels, CANONICAL_WIDTH)
    }

    /// Back to dark-on-light 8-bit levels.
    pub fn to_raw(&self) -> RawImage {
        let pixels = self
            .pixels
            .iter()
            .map(|&v| (255.0 - (v * 255.0).round()).clamp(0.0, 255.0) as u8)
            .collect();
        RawImage::new(CANONICAL_HEIGHT, CANONICAL_WIDTH, pixels).expect("canonical extents")
    }
}

fn center_of_mass(values: &[f32], width: usize) -> Option<(f64, f64)> {
    let (mut m, mut mr, mut mc) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 {
            let v = v as f64;
            m += v;
            mr += v * (i / width) as f64;
            mc += v * (i % width) as f64;
        }
    }
    (m > 0.0).then(|| (mr / m, mc / m))
}

/// Between-class variance (up to the constant factor `1/N²`) of splitting at
/// `t`, from class-0 count and level sum.
fn between_class_variance(n0: u64, s0: u64, n: u64, s: u64) -> f64 {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let mu0 = s0 as f64 / n0 as f64;
    let mu1 = (s - s0) as f64 / n1 as f64;
    n0 as f64 * n1 as f64 * (mu0 - mu1) * (mu0 - mu1)
}

/// OTSU threshold: levels `< t` form the ink class, levels `≥ t` the
/// background. Returns the lowest `t` maximising the between-class variance.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let populated = histogram.iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(Error::DegenerateInput(
            "OTSU needs at least two populated gray levels".into(),
        ));
    }
    let n: u64 = histogram.iter().sum();
    let s: u64 = histogram.iter().enumerate().map(|(l, &c)| l as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let (mut best_t, mut best) = (0usize, f64::NEG_INFINITY);
    for t in 0..256 {
        let var = between_class_variance(n0, s0, n, s);
        if var > best {
            best = var;
            best_t = t;
        }
        n0 += histogram[t];
        s0 += t as u64 * histogram[t];
    }
    Ok(best_t as u8)
}

/// Separable triangle-filter weights mapping `src_len` samples onto
/// `dst_len`; each entry is `(first source index, weights)`.
fn resample_weights(src_len: usize, dst_len: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = src_len as f64 / dst_len as f64;
    let support = scale.max(1.0);
    (0..dst_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src_len);
            let mut w: Vec<f64> = (lo..hi)
                .map(|s| (1.0 - ((s as f64 + 0.5) - center).abs() / support).max(0.0))
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (lo, w.into_iter().map(|v| v as f32).collect())
        })
        .collect()
}

/// OTSU-clean, centre on the canvas by centre of mass, and resize to
/// 170×242 with a bilinear (triangle) filter.
pub fn preprocess_signature(raw: &RawImage) -> Result<CanonicalImage> {
    let t = otsu_threshold(&raw.histogram())?;
    let ink: Vec<f32> = raw
        .pixels
        .iter()
        .map(|&p| if p < t { (255 - p) as f32 / 255.0 } else { 0.0 })
        .collect();
    let (cr, cc) = center_of_mass(&ink, raw.width)
        .ok_or_else(|| Error::DegenerateInput("no ink left after thresholding".into()))?;

    // Integer placement of raw pixel (r, c) at canvas (r + dr, c + dc).
    let dr = ((CANVAS_HEIGHT as f64 - 1.0) / 2.0 - cr).round() as isize;
    let dc = ((CANVAS_WIDTH as f64 - 1.0) / 2.0 - cc).round() as isize;
    let r0 = dr.max(0) as usize;
    let r1 = ((raw.height as isize + dr).min(CANVAS_HEIGHT as isize)).max(0) as usize;
    let c0 = dc.max(0) as usize;
    let c1 = ((raw.width as isize + dc).min(CANVAS_WIDTH as isize)).max(0) as usize;
    let at = |r: usize, c: usize| ink[(r as isize - dr) as usize * raw.width + (c as isize - dc) as usize];

    let col_w = resample_weights(CANVAS_WIDTH, CANONICAL_WIDTH);
    let row_w = resample_weights(CANVAS_HEIGHT, CANONICAL_HEIGHT);

    // Horizontal pass over the occupied canvas rows only; the rest is zero.
    let rows = r1.saturating_sub(r0);
    let mut tmp = vec![0.0f32; rows * CANONICAL_WIDTH];
    for r in r0..r1 {
        let line = &mut tmp[(r - r0) * CANONICAL_WIDTH..(r - r0 + 1) * CANONICAL_WIDTH];
        for (j, (lo, w)) in col_w.iter().enumerate() {
            let hi = lo + w.len();
            let (a, b) = ((*lo).max(c0), hi.min(c1));
            let mut s = 0.0f32;
            for c in a..b {
                s += w[c - lo] * at(r, c);
            }
            line[j] = s;
        }
    }
    let mut out = vec![0.0f32; CANONICAL_HEIGHT * CANONICAL_WIDTH];
    for (i, (lo, w)) in row_w.iter().enumerate() {
        let hi = lo + w.len();
        let (a, b) = ((*lo).max(r0), hi.min(r1));
        let dst = &mut out[i * CANONICAL_WIDTH..(i + 1) * CANONICAL_WIDTH];
        for r in a..b {
            let wr = w[r - lo];
            let src = &tmp[(r - r0) * CANONICAL_WIDTH..(r - r0 + 1) * CANONICAL_WIDTH];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += wr * v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    CanonicalImage::new(out)
}

/// How a 150×220 network input is cut from a canonical image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    /// Uniform over all valid offsets, deterministic in the seed.
    Random(u64),
}

pub const CROP_ROWS: usize = CANONICAL_HEIGHT - INPUT_HEIGHT + 1;
pub const CROP_COLS: usize = CANONICAL_WIDTH - INPUT_WIDTH + 1;

/// Top-left `(row, col)` of the crop.
pub fn crop_offset(mode: CropMode) -> (usize, usize) {
    match mode {
        CropMode::Center => (
            (CANONICAL_HEIGHT - INPUT_HEIGHT) / 2,
            (CANONICAL_WIDTH - INPUT_WIDTH) / 2,
        ),
        CropMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (rng.gen_range(0..CROP_ROWS), rng.gen_range(0..CROP_COLS))
        }
    }
}

/// Writes the crop at `offset` into `out` (length 150·220).
pub fn crop_into<T: Scalar>(img: &CanonicalImage, offset: (usize, usize), out: &mut [T]) {
    let (r0, c0) = offset;
    for r in 0..INPUT_HEIGHT {
        let src = &img.pixels[(r0 + r) * CANONICAL_WIDTH + c0..][..INPUT_WIDTH];
        for (d, &s) in out[r * INPUT_WIDTH..(r + 1) * INPUT_WIDTH].iter_mut().zip(src) {
            *d = T::from_f32(s).expect("f32 to scalar");
        }
    }
}

/// A `[1, 150, 220]` crop.
pub fn crop<T: Scalar>(img: &CanonicalImage, mode: CropMode) -> Tensor<T> {
    let mut out = Tensor::zeros(&[1, INPUT_HEIGHT, INPUT_WIDTH]);
    crop_into(img, crop_offset(mode), out.data_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive sweep with exact integer comparison of
    /// `(S0·n1 − S1·n0)² / (n0·n1)` between candidates.
    fn otsu_oracle(h: &[u64; 256]) -> u8 {
        let mut best: Option<(u128, u128, usize)> = None; // (num, den, t)
        for t in 0..256usize {
            let n0: u128 = h[..t].iter().map(|&c| c as u128).sum();
            let n1: u128 = h[t..].iter().map(|&c| c as u128).sum();
            let s0: u128 = h[..t].iter().enumerate().map(|(l, &c)| l as u128 * c as u128).sum();
            let s1: u128 = h[t..]
                .iter()
                .enumerate()
                .map(|(l, &c)| (l + t) as u128 * c as u128)
                .sum();
            let (num, den) = if n0 == 0 || n1 == 0 {
                (0, 1)
            } else {
                let d = (s0 * n1).abs_diff(s1 * n0);
                (d * d, n0 * n1)
            };
            match best {
                Some((bn, bd, _)) if num * bd <= bn * den => {}
                _ => best = Some((num, den, t)),
            }
        }
        best.unwrap().2 as u8
    }

    fn dot_image(h: usize, w: usize, r: usize, c: usize) -> RawImage {
        let mut px = vec![255u8; h * w];
        px[r * w + c] = 0;
        RawImage::new(h, w, px).unwrap()
    }

    #[test]
    fn otsu_two_spikes_take_lowest_threshold() {
        let mut h = [0u64; 256];
        h[0] = 50;
        h[255] = 50;
        assert_eq!(otsu_threshold(&h).unwrap(), 1);
        assert_eq!(otsu_oracle(&h), 1);
    }

    #[test]
    fn otsu_bimodal_lands_between_modes() {
        let mut h = [0u64; 256];
        h[10] = 40;
        h[200] = 60;
        let t = otsu_threshold(&h).unwrap();
        assert!(t > 10 && t <= 200);
        assert_eq!(t, otsu_oracle(&h));
    }

    #[test]
    fn otsu_rejects_constant_images() {
        let mut h = [0u64; 256];
        h[128] = 1000;
        assert!(matches!(otsu_threshold(&h), Err(Error::DegenerateInput(_))));
        assert!(matches!(otsu_threshold(&[0; 256]), Err(Error::DegenerateInput(_))));
    }

    proptest! {
        #[test]
        fn otsu_equals_exhaustive_sweep(counts in proptest::collection::vec(0u64..1000, 256)) {
            let mut h = [0u64; 256];
            h.copy_from_slice(&counts);
            prop_assume!(h.iter().filter(|&&c| c > 0).count() >= 2);
            prop_assert_eq!(otsu_threshold(&h).unwrap(), otsu_oracle(&h));
        }
    }

    #[test]
    fn single_dot_lands_at_the_center() {
        for &(r, c) in &[(3usize, 5usize), (190, 20), (0, 299), (120, 150)] {
            let img = preprocess_signature(&dot_image(200, 300, r, c)).unwrap();
            let (idx, _) = img
                .pixels()
                .iter()
                .enumerate()
                .fold((0, 0.0f32), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let (pr, pc) = (idx / CANONICAL_WIDTH, idx % CANONICAL_WIDTH);
            assert!(pr.abs_diff(85) <= 1 && pc.abs_diff(121) <= 1, "peak at ({pr},{pc})");
            let (mr, mc) = img.center_of_mass().unwrap();
            assert!((mr - 84.5).abs() <= 1.0 && (mc - 120.5).abs() <= 1.0);
        }
    }

    #[test]
    fn blank_image_is_rejected() {
        let white = RawImage::new(10, 10, vec![255; 100]).unwrap();
        assert!(matches!(preprocess_signature(&white), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn preprocessing_is_center_of_mass_fixed_point() {
        // an off-centre blob with a tail
        let (h, w) = (300, 500);
        let mut px = vec![250u8; h * w];
        for r in 40..90 {
            for c in 300..420 {
                px[r * w + c] = 20;
            }
        }
        for c in 100..300 {
            px[60 * w + c] = 40;
            px[61 * w + c] = 40;
        }
        let once = preprocess_signature(&RawImage::new(h, w, px).unwrap()).unwrap();
        let twice = preprocess_signature(&once.to_raw()).unwrap();
        let (a, b) = (once.center_of_mass().unwrap(), twice.center_of_mass().unwrap());
        assert!((a.0 - b.0).abs() <= 1.0 && (a.1 - b.1).abs() <= 1.0, "{a:?} vs {b:?}");
        assert!(once.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        // ink polarity: the blob is brighter than the margin
        let margin: f32 = once.pixels()[..CANONICAL_WIDTH * 10].iter().sum::<f32>();
        assert_eq!(margin, 0.0);
        assert!(once.pixels().iter().cloned().fold(0.0f32, f32::max) > 0.5);
    }

    #[test]
    fn center_crop_offset() {
        assert_eq!(crop_offset(CropMode::Center), (10, 11));
        let img = CanonicalImage::new(
            (0..CANONICAL_HEIGHT * CANONICAL_WIDTH)
                .map(|i| (i % 7) as f32 / 7.0)
                .collect(),
        )
        .unwrap();
        let t: Tensor<f32> = crop(&img, CropMode::Center);
        assert_eq!(t.shape(), &[1, 150, 220]);
        assert_eq!(t.data()[0], img.get(10, 11));
        assert_eq!(t.data()[220 * 149 + 219], img.get(159, 230));
    }

    #[test]
    fn random_crops_are_seeded_and_cover_all_offsets() {
        assert_eq!(crop_offset(CropMode::Random(42)), crop_offset(CropMode::Random(42)));
        let mut rows = [0usize; CROP_ROWS];
        let mut cols = [0usize; CROP_COLS];
        for s in 0..10_000u64 {
            let (r, c) = crop_offset(CropMode::Random(s));
            rows[r] += 1;
            cols[c] += 1;
        }
        assert!(rows.iter().all(|&n| n > 0));
        assert!(cols.iter().all(|&n| n > 0));
    }
}
