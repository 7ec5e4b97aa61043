//! Image-text retrieval: recall@k in both directions from unimodal
//! embeddings.

use std::path::Path;

use serde::Serialize;

use super::config::RunConfig;
use super::data::{content_tokens, prepare_studies, PreparedStudy};
use super::train::load_run;
use crate::error::{Error, Result};
use crate::model::network::embed;
use crate::model::params::{Mat, ModelDims, ModelParams};
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub pairs: usize,
    pub k: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Rank of the true match in each row of `sim` (1 = best). Ties count
/// against the query: every other candidate scoring at least as high as the
/// true match is ranked ahead of it.
pub fn true_ranks(sim: &Mat) -> Vec<usize> {
    (0..sim.nrows())
        .map(|i| {
            let own = sim[[i, i]];
            1 + (0..sim.ncols()).filter(|&j| j != i && sim[[i, j]] >= own).count()
        })
        .collect()
}

pub fn recall_at_k(sim: &Mat, k: usize) -> f64 {
    let ranks = true_ranks(sim);
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// `(z_im, z_txt)` stacked over `studies`.
pub fn embed_studies(
    params: &ModelParams,
    dims: &ModelDims,
    vocab: &Vocabulary,
    studies: &[PreparedStudy],
    max_len: usize,
) -> Result<(Mat, Mat)> {
    let mut zi = Mat::zeros((studies.len(), dims.d_proj));
    let mut zt = Mat::zeros((studies.len(), dims.d_proj));
    for (i, s) in studies.iter().enumerate() {
        let tokens = content_tokens(&s.text, vocab, max_len)?;
        let (a, b) = embed(params, dims, &s.patches, &tokens.ids)?;
        zi.row_mut(i).assign(&a.row(0));
        zt.row_mut(i).assign(&b.row(0));
    }
    Ok((zi, zt))
}

pub fn retrieval(
    params: &ModelParams,
    dims: &ModelDims,
    vocab: &Vocabulary,
    studies: &[PreparedStudy],
    max_len: usize,
    k: usize,
) -> Result<RetrievalReport> {
    if k == 0 || studies.len() < k {
        return Err(Error::Config(format!(
            "recall@{k} needs at least {k} held-out pairs, got {}",
            studies.len()
        )));
    }
    let (zi, zt) = embed_studies(params, dims, vocab, studies, max_len)?;
    let sim = zi.dot(&zt.t());
    Ok(RetrievalReport {
        pairs: studies.len(),
        k,
        image_to_text: recall_at_k(&sim, k),
        text_to_image: recall_at_k(&sim.t().to_owned(), k),
    })
}

/// Loads the checkpoint (config hash checked) and scores `data`.
pub fn eval_retrieval(cfg: &RunConfig, checkpoint: &Path, data: &Path, k: usize) -> Result<RetrievalReport> {
    let (params, dims, vocab) = load_run(cfg, checkpoint)?;
    let studies = prepare_studies(data, cfg)?;
    retrieval(&params, &dims, &vocab, &studies, cfg.max_len, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ranks_with_pessimistic_ties() {
        let sim = array![[0.9, 0.1, 0.2], [0.5, 0.5, 0.1], [0.3, 0.8, 0.4]];
        assert_eq!(true_ranks(&sim), vec![1, 2, 2]);
        assert!((recall_at_k(&sim, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&sim, 3), 1.0);
    }

    #[test]
    fn constant_scores_never_count_as_hits() {
        let sim = Mat::from_elem((4, 4), 0.25);
        assert_eq!(recall_at_k(&sim, 1), 0.0);
        assert_eq!(recall_at_k(&sim, 4), 1.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        use crate::pipeline::data::{build_vocab, prepare_image};
        use crate::pipeline::synth::generate_study;
        let cfg = RunConfig::default();
        let studies: Vec<PreparedStudy> = (0..32)
            .map(|i| {
                let s = generate_study(77, i);
                let (patches, target, ridge_weights) = prepare_image(&s.image, &cfg).unwrap();
                PreparedStudy {
                    text: s.record.text(cfg.report_format).unwrap(),
                    record: s.record,
                    patches,
                    target,
                    ridge_weights,
                }
            })
            .collect();
        let vocab = build_vocab(&studies, &cfg).unwrap();
        let dims = cfg.dims(vocab.len());
        let mut hits = 0.0;
        for seed in 0..4 {
            let params = ModelParams::init(&dims, seed);
            let r = retrieval(&params, &dims, &vocab, &studies, cfg.max_len, 1).unwrap();
            hits += r.image_to_text * 32.0;
            let all = retrieval(&params, &dims, &vocab, &studies, cfg.max_len, 32).unwrap();
            assert_eq!((all.image_to_text, all.text_to_image), (1.0, 1.0));
        }
        // chance is one hit per 32 queries; four models give four expected
        assert!(hits <= 12.0, "{hits}");
        let e = retrieval(
            &ModelParams::init(&dims, 0),
            &dims,
            &vocab,
            &studies[..3],
            cfg.max_len,
            4,
        )
        .unwrap_err();
        assert_eq!(e.code(), "E_CONFIG");
    }
}
