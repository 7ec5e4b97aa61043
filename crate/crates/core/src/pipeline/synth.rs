//! Synthetic paired studies: a dark noisy 32x32 field with one to three
//! bright structures, one per quadrant, and triplets that describe them.
//!
//! Structures render anti-aliased with coverage in [0, 1]:
//!
//! | entity  | shape                          | peak |
//! |---------|--------------------------------|------|
//! | tube    | thin line through the quadrant | 0.80 |
//! | nodule  | small sharp disc               | 0.90 |
//! | opacity | large soft disc                | 0.50 |

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::imaging::{write_pgm, GrayImage};
use crate::reports::{Exist, StudyRecord, Triplet};
use crate::rng::{CounterRng, Stream};

pub const ENTITIES: [&str; 3] = ["tube", "opacity", "nodule"];
pub const POSITIONS: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];
pub const SYNTH_SIZE: usize = 32;
const BACKGROUND: f64 = 0.1;
const NOISE_STD: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudy {
    pub record: StudyRecord,
    pub image: GrayImage,
    /// Per-pixel structure coverage in [0, 1].
    pub coverage: GrayImage,
    /// `(entity, quadrant)` of every rendered structure.
    pub rendered: Vec<(usize, usize)>,
}

fn quadrant_center(q: usize) -> (f64, f64) {
    let half = SYNTH_SIZE as f64 / 2.0;
    let cy = if q < 2 { half / 2.0 } else { 1.5 * half };
    let cx = if q % 2 == 0 { half / 2.0 } else { 1.5 * half };
    (cy - 0.5, cx - 0.5)
}

/// Coverage of one structure at pixel center `(y, x)`.
fn coverage(entity: usize, cy: f64, cx: f64, angle: f64, y: f64, x: f64) -> f64 {
    let (dy, dx) = (y - cy, x - cx);
    match entity {
        0 => {
            let (s, c) = angle.sin_cos();
            let along = dx * c + dy * s;
            let across = (-dx * s + dy * c).abs();
            let half_len = 6.0;
            let end = (along.abs() - half_len).max(0.0);
            let dist = (across * across + end * end).sqrt();
            (0.8 + 0.5 - dist).clamp(0.0, 1.0)
        }
        1 => {
            let dist = (dy * dy + dx * dx).sqrt();
            ((5.5 - dist) / 2.5 + 0.5).clamp(0.0, 1.0)
        }
        _ => {
            let dist = (dy * dy + dx * dx).sqrt();
            (2.0 + 0.5 - dist).clamp(0.0, 1.0)
        }
    }
}

const PEAK: [f64; 3] = [0.8, 0.5, 0.9];

const ENTITY_WORDS: [&[&str]; 3] = [
    &["tube", "line", "catheter", "linear density"],
    &["opacity", "haziness", "airspace disease", "consolidation"],
    &["nodule", "nodular density", "small mass", "rounded lesion"],
];

const POSITION_WORDS: [&[&str]; 4] = [
    &["upper left", "left upper zone", "left apex", "lul"],
    &["upper right", "right upper zone", "right apex", "rul"],
    &["lower left", "left base", "left lower zone", "lll"],
    &["lower right", "right base", "right lower zone", "rll"],
];

const FILLERS: [&str; 6] = [
    "heart size is normal.",
    "no acute osseous abnormality.",
    "comparison with prior study.",
    "lungs otherwise clear.",
    "mediastinal contours unremarkable.",
    "technically limited study.",
];

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

/// Free text in one of several author styles with synonyms and filler.
fn free_text_report<R: Rng>(rng: &mut R, present: &[(usize, usize)], absent: &[(usize, usize)]) -> String {
    let style = rng.random_range(0..4);
    let mut sentences: Vec<String> = Vec::new();
    for &(e, q) in present {
        let ent = pick(rng, ENTITY_WORDS[e]);
        let pos = pick(rng, POSITION_WORDS[q]);
        sentences.push(match style {
            0 => format!("{ent} in the {pos}."),
            1 => format!("there is a {ent} projecting over the {pos}."),
            2 => format!("{pos}: {ent}."),
            _ => format!("{ent} seen at {pos}."),
        });
    }
    for &(e, q) in absent {
        if rng.random_bool(0.5) {
            continue;
        }
        let ent = pick(rng, ENTITY_WORDS[e]);
        let pos = pick(rng, POSITION_WORDS[q]);
        sentences.push(match style % 2 {
            0 => format!("no {ent} in the {pos}."),
            _ => format!("{pos} clear of {ent}."),
        });
    }
    if present.is_empty() {
        sentences.push(
            pick(
                rng,
                &["no acute cardiopulmonary process.", "normal study.", "unremarkable."],
            )
            .to_string(),
        );
    }
    for _ in 0..rng.random_range(0..=2) {
        sentences.push(pick(rng, &FILLERS).to_string());
    }
    sentences.shuffle(rng);
    sentences.join(" ")
}

/// Study `index` of the dataset keyed by `seed`; a pure function of both.
pub fn generate_study(seed: u64, index: u64) -> SyntheticStudy {
    let mut rng = CounterRng::for_stream(seed, Stream::Synth, &[index]);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut image = GrayImage::from_fn(SYNTH_SIZE, SYNTH_SIZE, |_, _| {
        (BACKGROUND + rng.sample(noise)).clamp(0.0, 1.0)
    });
    let mut cov_total = GrayImage::filled(SYNTH_SIZE, SYNTH_SIZE, 0.0);
    let count = rng.random_range(1..=3usize);
    let mut quadrants: Vec<usize> = (0..4).collect();
    quadrants.shuffle(&mut rng);
    let mut rendered = Vec::with_capacity(count);
    for &q in &quadrants[..count] {
        let entity = rng.random_range(0..ENTITIES.len());
        let (qy, qx) = quadrant_center(q);
        let cy = qy + rng.random_range(-1.5..1.5);
        let cx = qx + rng.random_range(-1.5..1.5);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        for y in 0..SYNTH_SIZE {
            for x in 0..SYNTH_SIZE {
                let c = coverage(entity, cy, cx, angle, y as f64, x as f64);
                if c > 0.0 {
                    let v = image.get(y, x);
                    image.set(y, x, v + c * (PEAK[entity] - v));
                    cov_total.set(y, x, cov_total.get(y, x).max(c));
                }
            }
        }
        rendered.push((entity, q));
    }
    rendered.sort_unstable();
    let mut absent = Vec::new();
    for _ in 0..rng.random_range(0..=2usize) {
        let e = rng.random_range(0..ENTITIES.len());
        let q = rng.random_range(0..POSITIONS.len());
        if !rendered.iter().any(|&(_, rq)| rq == q) && !absent.contains(&(e, q)) {
            absent.push((e, q));
        }
    }
    let mut triplets: Vec<Triplet> = rendered
        .iter()
        .map(|&(e, q)| (e, q, Exist::Present))
        .chain(absent.iter().map(|&(e, q)| (e, q, Exist::Absent)))
        .map(|(e, q, x)| Triplet::new(ENTITIES[e], POSITIONS[q], x).expect("fixed vocabulary"))
        .collect();
    triplets.shuffle(&mut rng);
    let report = free_text_report(&mut rng, &rendered, &absent);
    let study_id = format!("synth-{seed}-{index:06}");
    SyntheticStudy {
        record: StudyRecord {
            image: Some(format!("images/{study_id}.pgm")),
            study_id,
            triplets,
            report: Some(report),
        },
        image,
        coverage: cov_total,
        rendered,
    }
}

/// Writes `studies.jsonl` and `images/*.pgm` under `out_dir`.
pub fn synth_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<Vec<SyntheticStudy>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let studies: Vec<SyntheticStudy> = (0..n as u64).map(|i| generate_study(seed, i)).collect();
    let mut jsonl = String::new();
    for s in &studies {
        let rel = s.record.image.as_deref().expect("set by generate_study");
        write_pgm(out_dir.join(rel), &s.image)?;
        jsonl.push_str(&s.record.to_json_line());
        jsonl.push('\n');
    }
    let path = out_dir.join("studies.jsonl");
    std::fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;
    Ok(studies)
}
