//! Run configuration: a flat `key = value` TOML file plus `key=value`
//! overrides, with a canonical text form whose SHA-256 is stored in
//! checkpoints.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::model::params::ModelDims;
use crate::reports::ReportFormat;

/// What the image decoder reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconTarget {
    /// Raw intensities.
    Raw,
    /// Multi-scale ridge response scaled to [0, 1] by its maximum.
    Filtered,
}

impl FromStr for ReconTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "filtered" => Ok(Self::Filtered),
            other => Err(Error::Config(format!(
                "recon_target must be raw|filtered, got {other:?}"
            ))),
        }
    }
}

impl Display for ReconTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Filtered => "filtered",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub scales: Vec<f64>,
    pub mask_mode: MaskMode,
    pub recon_target: ReconTarget,
    pub image_mask_ratio: f64,
    pub report_format: ReportFormat,
    pub max_len: usize,
    pub min_count: usize,
    pub d_model: usize,
    pub d_proj: usize,
    pub heads: usize,
    pub blocks: usize,
    pub cross_blocks: usize,
    pub mlp_ratio: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            scales: vec![1.0, 2.0, 4.0],
            mask_mode: MaskMode::FilterGuided,
            recon_target: ReconTarget::Raw,
            image_mask_ratio: 0.5,
            report_format: ReportFormat::Manuscript,
            max_len: 64,
            min_count: 1,
            d_model: 64,
            d_proj: 32,
            heads: 4,
            blocks: 2,
            cross_blocks: 1,
            mlp_ratio: 2,
            batch_size: 16,
            steps: 200,
            lr_peak: 3e-4,
            lr_min: 1e-5,
            warmup_frac: 0.1,
            weight_decay: 0.05,
            seed: 0,
            train_data: PathBuf::from("data/train/studies.jsonl"),
            eval_data: PathBuf::from("data/eval/studies.jsonl"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Keys that locate files rather than shape the run; they are excluded
/// from the hash so a checkpoint can be evaluated from another directory.
const PATH_KEYS: [&str; 3] = ["train_data", "eval_data", "out_dir"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse::<f64>(key, s))
        .collect()
}

fn fmt_f64(v: f64) -> String {
    // shortest round-tripping form
    format!("{v:?}")
}

impl RunConfig {
    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        let per_side = self.image_size / self.patch_size;
        ModelDims {
            num_patches: per_side * per_side,
            patch_dim: self.patch_size * self.patch_size,
            vocab_size,
            max_len: self.max_len,
            d_model: self.d_model,
            d_proj: self.d_proj,
            heads: self.heads,
            blocks: self.blocks,
            cross_blocks: self.cross_blocks,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim().trim_matches('"');
        match key {
            "image_size" => self.image_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "mask_mode" => self.mask_mode = parse(key, v)?,
            "recon_target" => self.recon_target = parse(key, v)?,
            "image_mask_ratio" => self.image_mask_ratio = parse(key, v)?,
            "report_format" => self.report_format = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "min_count" => self.min_count = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "d_proj" => self.d_proj = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "cross_blocks" => self.cross_blocks = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr_peak" => self.lr_peak = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "warmup_frac" => self.warmup_frac = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_data" => self.train_data = PathBuf::from(v),
            "eval_data" => self.eval_data = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parses a flat TOML document on top of the defaults. Relative paths
    /// resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {}", e.message())))?;
        let mut cfg = Self::default();
        for (key, value) in &table {
            let text = match value {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => fmt_f64(*f),
                toml::Value::Boolean(b) => b.to_string(),
                toml::Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        toml::Value::Integer(n) => Ok(n.to_string()),
                        toml::Value::Float(f) => Ok(fmt_f64(*f)),
                        other => Err(Error::Config(format!("{key}: unsupported list item {other}"))),
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                other => return Err(Error::Config(format!("{key}: unsupported value {other}"))),
            };
            cfg.set(key, &text)?;
        }
        if let Some(base) = base_dir {
            for key in PATH_KEYS {
                if table.contains_key(key) {
                    let p = match key {
                        "train_data" => &mut cfg.train_data,
                        "eval_data" => &mut cfg.eval_data,
                        _ => &mut cfg.out_dir,
                    };
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, path.parent())?;
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("d_proj", self.d_proj),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("cross_blocks", self.cross_blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("min_count", self.min_count),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        for (k, v) in [
            ("image_mask_ratio", self.image_mask_ratio),
            ("warmup_frac", self.warmup_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "scales must be non-empty and positive, got {:?}",
                self.scales
            )));
        }
        if !(self.lr_peak > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_peak {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_peak, lr_peak > 0; got {} / {}",
                self.lr_min, self.lr_peak
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Every key as `key = value`, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let scales = self.scales.iter().map(|&s| fmt_f64(s)).collect::<Vec<_>>().join(", ");
        let q = |p: &Path| format!("{:?}", p.to_string_lossy());
        let mut v = vec![
            ("batch_size", self.batch_size.to_string()),
            ("blocks", self.blocks.to_string()),
            ("cross_blocks", self.cross_blocks.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_proj", self.d_proj.to_string()),
            ("eval_data", q(&self.eval_data)),
            ("heads", self.heads.to_string()),
            ("image_mask_ratio", fmt_f64(self.image_mask_ratio)),
            ("image_size", self.image_size.to_string()),
            ("lr_min", fmt_f64(self.lr_min)),
            ("lr_peak", fmt_f64(self.lr_peak)),
            ("mask_mode", format!("\"{}\"", self.mask_mode)),
            ("max_len", self.max_len.to_string()),
            ("min_count", self.min_count.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("out_dir", q(&self.out_dir)),
            ("patch_size", self.patch_size.to_string()),
            ("recon_target", format!("\"{}\"", self.recon_target)),
            ("report_format", format!("\"{}\"", self.report_format)),
            ("scales", format!("[{scales}]")),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("train_data", q(&self.train_data)),
            ("warmup_frac", fmt_f64(self.warmup_frac)),
            ("weight_decay", fmt_f64(self.weight_decay)),
        ];
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// TOML text that parses back to `self`.
    pub fn to_toml(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The hashed form: [`Self::to_toml`] without the path keys.
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| !PATH_KEYS.contains(k))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Learning rate for 0-based `step`: linear warmup over the first
    /// `warmup_frac` of the run to `lr_peak`, then cosine decay to `lr_min`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_frac * self.steps as f64).round() as usize;
        if step < warmup {
            return self.lr_peak * (step + 1) as f64 / warmup as f64;
        }
        let span = (self.steps - warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr_peak - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml(), None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn file_values_and_overrides() {
        let mut c = RunConfig::from_toml_str(
            "steps = 20\nscales = [1, 2.5]\nmask_mode = \"random\"\nlr_peak = 1e-3\n",
            None,
        )
        .unwrap();
        assert_eq!(c.steps, 20);
        assert_eq!(c.scales, vec![1.0, 2.5]);
        assert_eq!(c.mask_mode, MaskMode::Random);
        c.apply_override("batch_size=4").unwrap();
        c.apply_override("scales=3,4").unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.scales, vec![3.0, 4.0]);
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "nope = 1",
            "steps = \"many\"",
            "image_mask_ratio = 1.5",
            "patch_size = 7",
            "scales = []",
            "heads = 5",
            "steps = [",
        ] {
            let e = RunConfig::from_toml_str(bad, None).unwrap_err();
            assert_eq!(e.code(), "E_CONFIG", "{bad}");
        }
        assert!(RunConfig::default().apply_override("steps").is_err());
    }

    #[test]
    fn hash_tracks_run_shape_not_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let c = RunConfig::from_toml_str("train_data = \"d/t.jsonl\"", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(c.train_data, PathBuf::from("/cfg/d/t.jsonl"));
        assert_eq!(c.out_dir, RunConfig::default().out_dir);
    }

    #[test]
    fn schedule_endpoints() {
        let c = RunConfig::default();
        assert!((c.lr_at(0) - 3e-4 / 20.0).abs() < 1e-18);
        assert!((c.lr_at(19) - 3e-4).abs() < 1e-18);
        assert!((c.lr_at(20) - 3e-4).abs() < 1e-18);
        assert!(c.lr_at(100) < 3e-4 && c.lr_at(100) > 1e-5);
        assert!((c.lr_at(200) - 1e-5).abs() < 1e-18);
        let lrs: Vec<f64> = (20..200).map(|s| c.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
