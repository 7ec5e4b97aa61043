use ridgevlp::imaging::PatchGrid;
use ridgevlp::masking::filter_guided_mask;
use ridgevlp::pipeline::data::{build_vocab, make_sample, prepare_studies};
use ridgevlp::pipeline::eval::eval_retrieval;
use ridgevlp::pipeline::synth::synth_dataset;
use ridgevlp::pipeline::train::{pretrain, TrainOptions};
use ridgevlp::pipeline::RunConfig;
use ridgevlp::ridge_filter::multiscale_response;

fn tiny(root: &std::path::Path) -> RunConfig {
    RunConfig {
        train_data: root.join("data/studies.jsonl"),
        eval_data: root.join("data/studies.jsonl"),
        out_dir: root.join("run"),
        d_model: 16,
        d_proj: 8,
        heads: 2,
        blocks: 1,
        batch_size: 4,
        steps: 6,
        ..RunConfig::default()
    }
}

#[test]
fn ridge_weights_follow_rendered_structures() {
    let dir = tempfile::tempdir().unwrap();
    let studies = synth_dataset(40, 11, dir.path()).unwrap();
    let (mut covered, mut n_covered, mut empty, mut n_empty) = (0.0, 0, 0.0, 0);
    let (mut covered_hits, mut draws) = (0, 0);
    let (mut any_cov, mut patches) = (0, 0);
    for s in &studies {
        let grid = PatchGrid::for_image(&s.image, 8).unwrap();
        let response = multiscale_response(&s.image, &[1.0, 2.0, 4.0]).unwrap();
        for p in 0..grid.num_patches() {
            let (y0, x0) = grid.origin(p);
            let cov = (0..8)
                .flat_map(|dy| (0..8).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| s.coverage.get(y0 + dy, x0 + dx))
                .sum::<f64>()
                / 64.0;
            let r = (0..8)
                .flat_map(|dy| (0..8).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| response.get(y0 + dy, x0 + dx))
                .sum::<f64>();
            patches += 1;
            any_cov += (cov > 0.0) as usize;
            if cov > 0.2 {
                covered += r;
                n_covered += 1;
            } else if cov == 0.0 {
                empty += r;
                n_empty += 1;
            }
        }
        let mask = filter_guided_mask(grid, &response, 0.25, 3).unwrap();
        for p in mask.masked_indices() {
            let (y0, x0) = grid.origin(p);
            draws += 1;
            covered_hits += (0..64).any(|i| s.coverage.get(y0 + i / 8, x0 + i % 8) > 0.0) as usize;
        }
    }
    let (covered, empty) = (covered / n_covered as f64, empty / n_empty as f64);
    assert!(covered > 3.0 * empty, "covered {covered} empty {empty}");
    let base = any_cov as f64 / patches as f64;
    let hit = covered_hits as f64 / draws as f64;
    assert!(hit > base + 0.1, "masked on structure {hit:.3}, base rate {base:.3}");
}

#[test]
fn masks_depend_only_on_seed_step_and_slot() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(6, 4, &dir.path().join("data")).unwrap();
    let cfg = tiny(dir.path());
    let studies = prepare_studies(&cfg.train_data, &cfg).unwrap();
    let vocab = build_vocab(&studies, &cfg).unwrap();
    let a = make_sample(&studies[2], &vocab, &cfg, 5, 1).unwrap();
    let b = make_sample(&studies[2], &vocab, &cfg, 5, 1).unwrap();
    assert_eq!((&a.patch_mask, &a.text_mask), (&b.patch_mask, &b.text_mask));
    let other_steps: Vec<_> = (0..8)
        .map(|step| make_sample(&studies[2], &vocab, &cfg, step, 1).unwrap().patch_mask)
        .collect();
    assert!(other_steps.iter().any(|m| *m != a.patch_mask));
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(8, 9, &dir.path().join("data")).unwrap();
    let cfg = tiny(dir.path());
    let out = pretrain(&cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.reports.len(), 6);
    assert!(out.reports.iter().all(|r| r.total.is_finite() && !r.itm_skipped));
    let report = eval_retrieval(&cfg, &out.checkpoint, &cfg.eval_data, 8).unwrap();
    assert_eq!((report.image_to_text, report.text_to_image), (1.0, 1.0));
    let moved = RunConfig {
        train_data: dir.path().join("elsewhere.jsonl"),
        ..cfg.clone()
    };
    assert!(eval_retrieval(&moved, &out.checkpoint, &cfg.eval_data, 1).is_ok());
    let changed = RunConfig { steps: 7, ..cfg };
    assert_eq!(
        eval_retrieval(&changed, &out.checkpoint, &changed.eval_data, 1)
            .unwrap_err()
            .code(),
        "E_CHECKPOINT"
    );
}
