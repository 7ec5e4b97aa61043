//! Loading study files and turning them into model samples.

use std::path::{Path, PathBuf};

use rand::RngCore;

use super::config::{ReconTarget, RunConfig};
use crate::error::{Error, Result};
use crate::imaging::{load_image, patchify, GrayImage, PatchGrid};
use crate::masking::{patch_weights, text_mask, weighted_patch_mask, MaskMode};
use crate::model::network::Sample;
use crate::model::params::Mat;
use crate::reports::{parse_study, StudyRecord};
use crate::ridge_filter::multiscale_response;
use crate::rng::{CounterRng, Stream};
use crate::text::{encode, TokenSequence, Vocabulary};

/// A study with everything that does not change between steps.
#[derive(Debug, Clone)]
pub struct PreparedStudy {
    pub record: StudyRecord,
    pub text: String,
    /// `P x patch_dim` raw patches.
    pub patches: Mat,
    /// `P x patch_dim` reconstruction target.
    pub target: Mat,
    /// Filter-guided sampling weights per patch.
    pub ridge_weights: Vec<f64>,
}

/// Parses a JSONL study file; errors name the 1-based line.
pub fn read_studies(path: &Path) -> Result<Vec<StudyRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let rec = parse_study(trimmed).map_err(|e| match e {
                Error::Parse { offset: o, message } => Error::Parse {
                    offset: offset + o,
                    message: format!("line {}: {message}", i + 1),
                },
                other => other,
            })?;
            out.push(rec);
        }
        offset += line.len();
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("{} contains no studies", path.display())));
    }
    Ok(out)
}

fn to_mat(patches: Vec<Vec<f64>>) -> Mat {
    let rows = patches.len();
    let cols = patches.first().map_or(0, Vec::len);
    Mat::from_shape_vec((rows, cols), patches.into_iter().flatten().collect()).expect("equal patch sizes")
}

pub fn prepare_image(img: &GrayImage, cfg: &RunConfig) -> Result<(Mat, Mat, Vec<f64>)> {
    let response = multiscale_response(img, &cfg.scales)?;
    let grid = PatchGrid::for_image(img, cfg.patch_size)?;
    let weights = patch_weights(&grid, &response)?;
    let (raw, _) = patchify(img, cfg.patch_size)?;
    let target = match cfg.recon_target {
        ReconTarget::Raw => to_mat(raw.clone()),
        ReconTarget::Filtered => to_mat(patchify(&response.to_display_image(), cfg.patch_size)?.0),
    };
    Ok((to_mat(raw), target, weights))
}

fn image_path(base: &Path, rec: &StudyRecord) -> Result<PathBuf> {
    let rel = rec
        .image
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("study {} has no image path", rec.study_id)))?;
    Ok(base.join(rel))
}

/// Loads images (relative to the study file) and report text.
pub fn prepare_studies(path: &Path, cfg: &RunConfig) -> Result<Vec<PreparedStudy>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_studies(path)?
        .into_iter()
        .map(|record| {
            let img = load_image(image_path(base, &record)?, cfg.image_size)?;
            let (patches, target, ridge_weights) = prepare_image(&img, cfg)?;
            Ok(PreparedStudy {
                text: record.text(cfg.report_format)?,
                record,
                patches,
                target,
                ridge_weights,
            })
        })
        .collect()
}

pub fn build_vocab(studies: &[PreparedStudy], cfg: &RunConfig) -> Result<Vocabulary> {
    Vocabulary::build(studies.iter().map(|s| s.text.as_str()), cfg.min_count)
}

/// Token sequence truncated to its content (START plus words, no PAD).
pub fn content_tokens(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let mut seq = encode(text, vocab, max_len)?;
    let n = seq.content_len();
    seq.ids.truncate(n);
    seq.maskable.truncate(n);
    Ok(seq)
}

/// Independent 64-bit seed for one `(kind, coords)` draw.
pub fn derive_seed(seed: u64, kind: Stream, coords: &[u64]) -> u64 {
    CounterRng::for_stream(seed, kind, coords).next_u64()
}

/// Training sample for `study` at `step`, slot `slot` of the batch. Image
/// and text masks are redrawn every step.
pub fn make_sample(study: &PreparedStudy, vocab: &Vocabulary, cfg: &RunConfig, step: u64, slot: u64) -> Result<Sample> {
    let tokens = content_tokens(&study.text, vocab, cfg.max_len)?;
    let num = study.patches.nrows();
    let grid = PatchGrid::new(cfg.image_size, cfg.image_size, cfg.patch_size)?;
    let image_seed = derive_seed(cfg.seed, Stream::ImageMask, &[step, slot]);
    let patch_mask = match cfg.mask_mode {
        MaskMode::None => vec![false; num],
        MaskMode::Random => weighted_patch_mask(grid, &vec![1.0; num], cfg.image_mask_ratio, image_seed)?.masked,
        MaskMode::FilterGuided => {
            weighted_patch_mask(grid, &study.ridge_weights, cfg.image_mask_ratio, image_seed)?.masked
        }
    };
    let text_seed = derive_seed(cfg.seed, Stream::TextMask, &[step, slot]);
    let tmask = text_mask(&tokens, true, text_seed);
    Ok(Sample {
        patches: study.patches.clone(),
        target: study.target.clone(),
        patch_mask,
        ids: tokens.ids,
        text_mask: tmask.positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::synth_dataset;

    #[test]
    fn prepared_shapes_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(6, 4, dir.path()).unwrap();
        let cfg = RunConfig::default();
        let studies = prepare_studies(&dir.path().join("studies.jsonl"), &cfg).unwrap();
        assert_eq!(studies.len(), 6);
        assert_eq!(studies[0].patches.shape(), &[16, 64]);
        let vocab = build_vocab(&studies, &cfg).unwrap();
        let s = make_sample(&studies[0], &vocab, &cfg, 0, 0).unwrap();
        assert_eq!(s.patch_mask.iter().filter(|&&m| m).count(), 8);
        assert!(!s.text_mask.is_empty());
        assert_eq!(s.ids[0], crate::text::START);
        assert!(!s.ids.contains(&crate::text::PAD));
        assert_eq!(s, make_sample(&studies[0], &vocab, &cfg, 0, 0).unwrap());
        assert_ne!(
            s.patch_mask,
            make_sample(&studies[0], &vocab, &cfg, 1, 0).unwrap().patch_mask
        );
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        std::fs::write(&p, "{\"study_id\":\"a\",\"triplets\":[]}\n{bad\n").unwrap();
        let e = read_studies(&p).unwrap_err();
        assert_eq!(e.code(), "E_PARSE");
        assert!(e.to_string().contains("line 2"), "{e}");
    }
}
