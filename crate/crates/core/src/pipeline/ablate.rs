//! Controlled A/B runs along one axis: masking strategy or report format.
//! Arms share data, seeds and every other setting.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::config::RunConfig;
use super::data::{build_vocab, prepare_studies};
use super::eval::retrieval;
use super::train::{pretrain_on, TrainOptions};
use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::reports::ReportFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Masking,
    Report,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masking" => Ok(Self::Masking),
            "report" => Ok(Self::Report),
            other => Err(Error::Config(format!(
                "ablation axis must be masking|report, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Masking => "masking",
            Self::Report => "report",
        })
    }
}

impl AblationAxis {
    /// Arm names and the configuration each one runs.
    pub fn arms(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            Self::Masking => [MaskMode::None, MaskMode::Random, MaskMode::FilterGuided]
                .into_iter()
                .map(|m| {
                    let cfg = RunConfig {
                        mask_mode: m,
                        report_format: ReportFormat::Manuscript,
                        ..base.clone()
                    };
                    (m.to_string(), cfg)
                })
                .collect(),
            Self::Report => [
                ReportFormat::Passthrough,
                ReportFormat::TripletString,
                ReportFormat::Manuscript,
            ]
            .into_iter()
            .map(|r| {
                let cfg = RunConfig {
                    mask_mode: MaskMode::FilterGuided,
                    report_format: r,
                    ..base.clone()
                };
                (r.to_string(), cfg)
            })
            .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub axis: String,
    pub arm: String,
    /// Seed, or `median` for a summary row.
    pub seed: String,
    /// Mean total loss over the last (up to) 20 steps.
    pub final_loss: f64,
    pub i2t_r1: f64,
    pub t2i_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r5: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates every arm under every seed. Runs land in
/// `base.out_dir/<axis>/<arm>/seed-<s>`.
pub fn ablate(base: &RunConfig, axis: AblationAxis, seeds: &[u64]) -> Result<Vec<ArmResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (arm, arm_cfg) in axis.arms(base) {
        let train = prepare_studies(&arm_cfg.train_data, &arm_cfg)?;
        let held_out = prepare_studies(&arm_cfg.eval_data, &arm_cfg)?;
        let vocab = build_vocab(&train, &arm_cfg)?;
        let k5 = 5.min(held_out.len());
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                out_dir: base
                    .out_dir
                    .join(axis.to_string())
                    .join(&arm)
                    .join(format!("seed-{seed}")),
                ..arm_cfg.clone()
            };
            let out = pretrain_on(&cfg, &TrainOptions::default(), &train, vocab.clone())?;
            let tail = out.reports.len().min(20);
            let final_loss = out.reports[out.reports.len() - tail..]
                .iter()
                .map(|r| r.total)
                .sum::<f64>()
                / tail as f64;
            let r1 = retrieval(&out.params, &out.dims, &out.vocab, &held_out, cfg.max_len, 1)?;
            let r5 = retrieval(&out.params, &out.dims, &out.vocab, &held_out, cfg.max_len, k5)?;
            rows.push(ArmResult {
                axis: axis.to_string(),
                arm: arm.clone(),
                seed: seed.to_string(),
                final_loss,
                i2t_r1: r1.image_to_text,
                t2i_r1: r1.text_to_image,
                i2t_r5: r5.image_to_text,
                t2i_r5: r5.text_to_image,
            });
        }
    }
    Ok(rows)
}

/// One median row per arm, in arm order.
pub fn summarize(rows: &[ArmResult]) -> Vec<ArmResult> {
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    arms.into_iter()
        .map(|arm| {
            let of = |f: fn(&ArmResult) -> f64| median(rows.iter().filter(|r| r.arm == arm).map(f).collect());
            ArmResult {
                axis: rows[0].axis.clone(),
                arm: arm.to_string(),
                seed: "median".into(),
                final_loss: of(|r| r.final_loss),
                i2t_r1: of(|r| r.i2t_r1),
                t2i_r1: of(|r| r.t2i_r1),
                i2t_r5: of(|r| r.i2t_r5),
                t2i_r5: of(|r| r.t2i_r5),
            }
        })
        .collect()
}

pub const CSV_HEADER: &str = "axis,arm,seed,final_loss,i2t_r1,t2i_r1,i2t_r5,t2i_r5";

pub fn to_csv(rows: &[ArmResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.axis, r.arm, r.seed, r.final_loss, r.i2t_r1, r.t2i_r1, r.i2t_r5, r.t2i_r5
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::synth_dataset;

    #[test]
    fn arms_differ_only_on_the_axis() {
        let base = RunConfig::default();
        for axis in [AblationAxis::Masking, AblationAxis::Report] {
            let arms = axis.arms(&base);
            assert_eq!(arms.len(), 3);
            for (_, c) in &arms {
                let mut normalized = c.clone();
                normalized.mask_mode = base.mask_mode;
                normalized.report_format = base.report_format;
                assert_eq!(normalized, base);
            }
        }
        assert_eq!(AblationAxis::Masking.arms(&base)[2].1.mask_mode, MaskMode::FilterGuided);
        assert!("other".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn three_arms_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(8, 1, &dir.path().join("train")).unwrap();
        synth_dataset(6, 2, &dir.path().join("eval")).unwrap();
        let base = RunConfig {
            d_model: 8,
            d_proj: 4,
            heads: 2,
            blocks: 1,
            batch_size: 4,
            steps: 2,
            train_data: dir.path().join("train/studies.jsonl"),
            eval_data: dir.path().join("eval/studies.jsonl"),
            out_dir: dir.path().join("abl"),
            ..RunConfig::default()
        };
        let rows = ablate(&base, AblationAxis::Report, &[3]).unwrap();
        assert_eq!(rows.len(), 3);
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(summarize(&rows).len(), 3);
    }

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
    }
}
