//! Patch masks for images (uniform or ridge-response weighted) and token masks
//! for text.
//!
//! Both image strategies share one sampler: every patch gets an exponential key
//! `-ln(u) / w` from the seeded stream and the `k` smallest keys are masked.
//! With equal weights this is a uniform draw without replacement; with unequal
//! weights it is successive weighted sampling without replacement. A flat
//! response therefore reproduces the uniform mask for the same seed exactly.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, PatchGrid};
use crate::ridge_filter::ResponseMap;
use crate::rng::{CounterRng, Stream};
use crate::text::TokenSequence;

/// Text mask ratio when the text is reconstructed with an image as context.
pub const TEXT_RATIO_PAIRED: f64 = 0.30;
/// Text mask ratio for text-only input.
pub const TEXT_RATIO_UNPAIRED: f64 = 0.15;
/// Added to every patch weight so that zero-response patches stay selectable.
pub const WEIGHT_EPS: f64 = 1e-8;

/// `floor(x + 1/2)`, with a small guard against products like `0.35 * 10`
/// landing a hair below the half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    None,
    Random,
    FilterGuided,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "random" => Ok(Self::Random),
            "filter_guided" => Ok(Self::FilterGuided),
            other => Err(Error::Config(format!(
                "mask_mode must be none|random|filter_guided, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Random => "random",
            Self::FilterGuided => "filter_guided",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub grid: PatchGrid,
    pub masked: Vec<bool>,
    pub ratio_requested: f64,
    pub seed: u64,
}

impl PatchMask {
    pub fn empty(grid: PatchGrid) -> Self {
        Self {
            grid,
            masked: vec![false; grid.num_patches()],
            ratio_requested: 0.0,
            seed: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Indices of the `k` smallest exponential keys, returned sorted.
fn exponential_key_select(weights: &[f64], k: usize, rng: &mut CounterRng) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (-rng.open01().ln() / w, i))
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keys.into_iter().take(k).map(|(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

/// Weighted sampling of `round_half_up(ratio * patches)` patches without replacement.
pub fn weighted_patch_mask(grid: PatchGrid, weights: &[f64], ratio: f64, seed: u64) -> Result<PatchMask> {
    check_ratio(ratio)?;
    if weights.len() != grid.num_patches() {
        return Err(Error::Dimension(format!(
            "{} weights for {} patches",
            weights.len(),
            grid.num_patches()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Domain(format!("patch weight {w} must be positive")));
    }
    let k = round_half_up(ratio * grid.num_patches() as f64).min(grid.num_patches());
    let mut rng = CounterRng::for_stream(seed, Stream::ImageMask, &[]);
    let mut masked = vec![false; grid.num_patches()];
    for i in exponential_key_select(weights, k, &mut rng) {
        masked[i] = true;
    }
    Ok(PatchMask {
        grid,
        masked,
        ratio_requested: ratio,
        seed,
    })
}

pub fn random_patch_mask(grid: PatchGrid, ratio: f64, seed: u64) -> Result<PatchMask> {
    weighted_patch_mask(grid, &vec![1.0; grid.num_patches()], ratio, seed)
}

/// Mean response per patch plus [`WEIGHT_EPS`].
pub fn patch_weights(grid: &PatchGrid, response: &ResponseMap) -> Result<Vec<f64>> {
    if response.height != grid.image_height() || response.width != grid.image_width() {
        return Err(Error::Dimension(format!(
            "response is {}x{}, grid covers {}x{}",
            response.height,
            response.width,
            grid.image_height(),
            grid.image_width()
        )));
    }
    let s = grid.patch_size;
    Ok((0..grid.num_patches())
        .map(|p| {
            let (oy, ox) = grid.origin(p);
            let mut sum = 0.0;
            for y in oy..oy + s {
                for x in ox..ox + s {
                    sum += response.get(y, x);
                }
            }
            sum / (s * s) as f64 + WEIGHT_EPS
        })
        .collect())
}

/// Masks patches with probability proportional to their mean ridge response.
pub fn filter_guided_mask(grid: PatchGrid, response: &ResponseMap, ratio: f64, seed: u64) -> Result<PatchMask> {
    check_ratio(ratio)?;
    let weights = patch_weights(&grid, response)?;
    weighted_patch_mask(grid, &weights, ratio, seed)
}

/// Replaces every masked patch with `fill`.
pub fn apply_image_mask(img: &GrayImage, mask: &PatchMask, fill: f64) -> Result<GrayImage> {
    if !mask.grid.matches(img) || mask.masked.len() != mask.grid.num_patches() {
        return Err(Error::Dimension(format!(
            "mask grid {}x{} does not cover a {}x{} image",
            mask.grid.image_height(),
            mask.grid.image_width(),
            img.height(),
            img.width()
        )));
    }
    let mut out = img.clone();
    let s = mask.grid.patch_size;
    for p in mask.masked_indices() {
        let (oy, ox) = mask.grid.origin(p);
        for y in oy..oy + s {
            for x in ox..ox + s {
                out.set(y, x, fill);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    /// Strictly increasing masked positions.
    pub positions: Vec<usize>,
    pub ratio_requested: f64,
    pub seed: u64,
}

impl TokenMask {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// The sequence ids with masked positions replaced by `mask_id`.
    pub fn apply(&self, ids: &[usize], mask_id: usize) -> Vec<usize> {
        let mut out = ids.to_vec();
        for &p in &self.positions {
            out[p] = mask_id;
        }
        out
    }
}

/// Selects `max(1, round_half_up(ratio * maskable))` maskable positions
/// uniformly; the ratio is 0.30 when the text is paired with an image and
/// 0.15 otherwise.
pub fn text_mask(tokens: &TokenSequence, paired_with_image: bool, seed: u64) -> TokenMask {
    let ratio = if paired_with_image {
        TEXT_RATIO_PAIRED
    } else {
        TEXT_RATIO_UNPAIRED
    };
    text_mask_with_ratio(tokens, ratio, seed)
}

pub fn text_mask_with_ratio(tokens: &TokenSequence, ratio: f64, seed: u64) -> TokenMask {
    let candidates: Vec<usize> = tokens
        .maskable
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    let positions = if candidates.is_empty() {
        Vec::new()
    } else {
        let k = round_half_up(ratio * candidates.len() as f64).clamp(1, candidates.len());
        let mut rng = CounterRng::for_stream(seed, Stream::TextMask, &[]);
        exponential_key_select(&vec![1.0; candidates.len()], k, &mut rng)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    };
    TokenMask {
        positions,
        ratio_requested: ratio,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{PAD, START};
    use proptest::prelude::*;

    fn grid(n_side: usize) -> PatchGrid {
        PatchGrid::new(n_side * 2, n_side * 2, 2).unwrap()
    }

    fn flat_response(g: &PatchGrid, v: f64) -> ResponseMap {
        ResponseMap {
            height: g.image_height(),
            width: g.image_width(),
            data: vec![v; g.image_height() * g.image_width()],
            scales: vec![1.0],
        }
    }

    fn seq_with(n_maskable: usize) -> TokenSequence {
        let mut ids = vec![START];
        let mut maskable = vec![false];
        for i in 0..n_maskable {
            ids.push(10 + i);
            maskable.push(true);
        }
        ids.extend([PAD, PAD]);
        maskable.extend([false, false]);
        TokenSequence { ids, maskable }
    }

    #[test]
    fn ratio_extremes() {
        let g = grid(4);
        assert_eq!(random_patch_mask(g, 0.0, 3).unwrap().count(), 0);
        assert_eq!(random_patch_mask(g, 1.0, 3).unwrap().count(), 16);
        let resp = flat_response(&g, 0.0);
        assert_eq!(filter_guided_mask(g, &resp, 1.0, 9).unwrap().count(), 16);
    }

    #[test]
    fn bad_ratio_is_config_error() {
        assert!(matches!(random_patch_mask(grid(2), 1.5, 0), Err(Error::Config(_))));
        assert!(matches!(random_patch_mask(grid(2), -0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_masks_repeat() {
        let g = grid(4);
        let a = random_patch_mask(g, 0.75, 42).unwrap();
        let b = random_patch_mask(g, 0.75, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), 12);
    }

    #[test]
    fn flat_response_reproduces_uniform_mask() {
        let g = grid(4);
        for seed in 0..50 {
            let r = random_patch_mask(g, 0.5, seed).unwrap();
            let f = filter_guided_mask(g, &flat_response(&g, 0.0), 0.5, seed).unwrap();
            assert_eq!(r.masked, f.masked);
        }
    }

    #[test]
    fn response_dimension_mismatch() {
        let g = grid(4);
        let wrong = flat_response(&grid(3), 0.0);
        assert!(matches!(
            filter_guided_mask(g, &wrong, 0.5, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn concentrated_response_wins_single_draw() {
        let g = grid(4);
        let mut resp = flat_response(&g, 0.0);
        // patch 5 covers rows 2..4, cols 2..4
        for y in 2..4 {
            for x in 2..4 {
                resp.data[y * 8 + x] = 1.0;
            }
        }
        let mut counts = [0usize; 16];
        for seed in 0..10_000 {
            let m = filter_guided_mask(g, &resp, 1.0 / 16.0, seed).unwrap();
            for i in m.masked_indices() {
                counts[i] += 1;
            }
        }
        let best = (0..16).max_by_key(|&i| counts[i]).unwrap();
        assert_eq!(best, 5);
        // Weighted-sampling formula: w5 / sum(w) with w = mean + eps.
        let p5 = (1.0 + WEIGHT_EPS) / (1.0 + 16.0 * WEIGHT_EPS);
        assert!((counts[5] as f64 / 10_000.0 - p5).abs() < 1e-3);
    }

    #[test]
    fn weighted_marginal_matches_closed_form() {
        let g = grid(2);
        let mut hits = 0usize;
        let n = 100_000;
        for seed in 0..n {
            let m = weighted_patch_mask(g, &[3.0, 1.0, 1.0, 1.0], 0.25, seed).unwrap();
            assert_eq!(m.count(), 1);
            hits += m.masked[0] as usize;
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn apply_mask_cases() {
        let img = GrayImage::from_fn(8, 8, |y, x| (y * 8 + x) as f64 / 64.0);
        let g = PatchGrid::for_image(&img, 4).unwrap();
        assert_eq!(apply_image_mask(&img, &PatchMask::empty(g), 0.5).unwrap(), img);
        let full = random_patch_mask(g, 1.0, 0).unwrap();
        let out = apply_image_mask(&img, &full, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let mut one = PatchMask::empty(g);
        one.masked[2] = true;
        let out = apply_image_mask(&img, &one, 0.9).unwrap();
        let differing = out.data().iter().zip(img.data()).filter(|(a, b)| a != b).count();
        assert_eq!(differing, 16);
        let wrong = PatchMask::empty(PatchGrid::new(4, 4, 2).unwrap());
        assert!(matches!(apply_image_mask(&img, &wrong, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn text_mask_counts() {
        assert_eq!(text_mask(&seq_with(20), true, 1).len(), 6);
        assert_eq!(text_mask(&seq_with(20), false, 1).len(), 3);
        assert_eq!(text_mask(&seq_with(1), false, 1).positions, vec![1]);
        assert!(text_mask(&seq_with(0), true, 1).is_empty());
    }

    #[test]
    fn text_mask_skips_special_tokens() {
        let s = seq_with(7);
        for seed in 0..200 {
            let m = text_mask(&s, true, seed);
            assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
            assert!(m.positions.iter().all(|&p| s.maskable[p]));
        }
    }

    proptest! {
        #[test]
        fn patch_count_is_exact(tenth in 0usize..=10, side in prop::sample::select(vec![2usize, 4, 8, 14]), seed in any::<u64>()) {
            let ratio = tenth as f64 / 10.0;
            let g = grid(side);
            let total = g.num_patches();
            let m = random_patch_mask(g, ratio, seed).unwrap();
            prop_assert_eq!(m.count(), round_half_up(ratio * total as f64));
            let resp = flat_response(&g, 0.3);
            let f = filter_guided_mask(g, &resp, ratio, seed).unwrap();
            prop_assert_eq!(f.count(), m.count());
        }

        #[test]
        fn token_count_is_exact(n in 0usize..60, paired in any::<bool>(), seed in any::<u64>()) {
            let m = text_mask(&seq_with(n), paired, seed);
            let r = if paired { TEXT_RATIO_PAIRED } else { TEXT_RATIO_UNPAIRED };
            let expected = if n == 0 { 0 } else { round_half_up(r * n as f64).max(1) };
            prop_assert_eq!(m.len(), expected);
        }
    }
}
