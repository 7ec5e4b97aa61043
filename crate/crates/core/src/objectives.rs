//! Masked reconstruction, contrastive and matching losses with analytic
//! gradients, and their unit-weight sum over a batch.

use ndarray::Axis;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::layers::{linear_backward, linear_forward, softmax_rows};
use crate::model::network::{backward, forward, OutputGrads, Sample};
use crate::model::params::{LinearParams, Mat, ModelDims, ModelParams};
use crate::rng::{CounterRng, Stream};

/// Mean cross-entropy over the listed `(row, class)` targets.
pub fn cross_entropy(logits: &Mat, targets: &[(usize, usize)]) -> (f64, Mat) {
    let mut grad = Mat::zeros(logits.raw_dim());
    if targets.is_empty() {
        return (0.0, grad);
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for &(r, c) in targets {
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[c];
        let mut g = grad.row_mut(r);
        for (gi, &v) in g.iter_mut().zip(row.iter()) {
            *gi += (v - lse).exp() / n;
        }
        g[c] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// Masked-token term: mean cross-entropy over every masked position in the
/// batch. `logits[k]` is `L_k x V`, `ids[k]` the clean targets.
pub fn mvlm_text(logits: &[Mat], ids: &[&[usize]], masks: &[&[usize]]) -> (f64, Vec<Mat>) {
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((l, t), m) in logits.iter().zip(ids).zip(masks) {
        let targets: Vec<(usize, usize)> = m.iter().map(|&p| (p, t[p])).collect();
        let (mean, mut g) = cross_entropy(l, &targets);
        if total > 0 {
            let w = m.len() as f64 / total as f64;
            loss += w * mean;
            g *= w;
        }
        grads.push(g);
    }
    (loss, grads)
}

/// Masked-patch term: `(1 / Omega) * sum |target - recon|` over the pixels of
/// every masked patch in the batch. Returns the loss, gradients with respect
/// to the reconstructions, and Omega.
pub fn mvlm_image(recon: &[Mat], target: &[&Mat], masks: &[&[bool]]) -> (f64, Vec<Mat>, usize) {
    let omega: usize = recon
        .iter()
        .zip(masks)
        .map(|(r, m)| r.ncols() * m.iter().filter(|&&x| x).count())
        .sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(recon.len());
    for ((r, t), m) in recon.iter().zip(target).zip(masks) {
        let mut g = Mat::zeros(r.raw_dim());
        for (p, &masked) in m.iter().enumerate() {
            if !masked {
                continue;
            }
            for ((gv, &rv), &tv) in g.row_mut(p).iter_mut().zip(r.row(p)).zip(t.row(p)) {
                let diff = tv - rv;
                loss += diff.abs();
                // subgradient 0 at ties
                *gv = if diff > 0.0 {
                    -1.0
                } else if diff < 0.0 {
                    1.0
                } else {
                    0.0
                };
            }
        }
        grads.push(g);
    }
    if omega > 0 {
        let inv = 1.0 / omega as f64;
        loss *= inv;
        for g in &mut grads {
            *g *= inv;
        }
    }
    (loss, grads, omega)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvlmOutput {
    pub text: f64,
    pub image: f64,
    pub omega: usize,
    pub d_logits: Vec<Mat>,
    pub d_recon: Vec<Mat>,
}

/// Both reconstruction terms. Fails when neither modality has anything
/// masked.
pub fn mvlm_loss(
    logits: &[Mat],
    ids: &[&[usize]],
    text_masks: &[&[usize]],
    recon: &[Mat],
    target: &[&Mat],
    patch_masks: &[&[bool]],
) -> Result<MvlmOutput> {
    let no_text = text_masks.iter().all(|m| m.is_empty());
    let no_image = patch_masks.iter().all(|m| !m.iter().any(|&x| x));
    if no_text && no_image {
        return Err(Error::Validation(
            "degenerate batch: no masked tokens and no masked patches".into(),
        ));
    }
    let (text, d_logits) = mvlm_text(logits, ids, text_masks);
    let (image, d_recon, omega) = mvlm_image(recon, target, patch_masks);
    Ok(MvlmOutput {
        text,
        image,
        omega,
        d_logits,
        d_recon,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItcOutput {
    pub loss: f64,
    pub d_z_im: Mat,
    pub d_z_txt: Mat,
    pub d_tau: f64,
}

/// Symmetric InfoNCE over `S = z_im z_txt^T / tau` with a single leading
/// `1/N` over both directions.
pub fn itc_loss(z_im: &Mat, z_txt: &Mat, tau: f64) -> Result<ItcOutput> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if z_im.shape() != z_txt.shape() || z_im.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "contrastive inputs {:?} vs {:?}",
            z_im.shape(),
            z_txt.shape()
        )));
    }
    let n = z_im.nrows();
    let nf = n as f64;
    let s = z_im.dot(&z_txt.t()) / tau;
    // image-to-text: softmax along each row; text-to-image: along each column
    let mut p_row = s.clone();
    softmax_rows(&mut p_row);
    let mut p_col = s.t().to_owned();
    softmax_rows(&mut p_col);
    let p_col = p_col.t().to_owned();
    let mut loss = 0.0;
    for k in 0..n {
        loss -= p_row[[k, k]].ln() + p_col[[k, k]].ln();
    }
    loss /= nf;
    let mut ds = (&p_row + &p_col) / nf;
    for k in 0..n {
        ds[[k, k]] -= 2.0 / nf;
    }
    let d_z_im = ds.dot(z_txt) / tau;
    let d_z_txt = ds.t().dot(z_im) / tau;
    let d_tau = -(&ds * &s).sum() / tau;
    Ok(ItcOutput {
        loss,
        d_z_im,
        d_z_txt,
        d_tau,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItmOutput {
    pub loss: f64,
    pub d_cross_im: Mat,
    pub d_cross_txt: Mat,
    pub d_head: LinearParams,
}

/// Label index of a matched pair in the two-way head output.
pub const ITM_MATCHED: usize = 1;

/// `h = cross_im ⊙ cross_txt`, two-way linear head, mean cross-entropy over
/// rows. `labels[i]` is true for matched pairs.
pub fn itm_loss(head: &LinearParams, cross_im: &Mat, cross_txt: &Mat, labels: &[bool]) -> Result<ItmOutput> {
    if cross_im.shape() != cross_txt.shape() || cross_im.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "matching inputs {:?} / {:?} with {} labels",
            cross_im.shape(),
            cross_txt.shape(),
            labels.len()
        )));
    }
    let h = cross_im * cross_txt;
    let logits = linear_forward(head, &h);
    let targets: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .map(|(i, &m)| (i, if m { ITM_MATCHED } else { 1 - ITM_MATCHED }))
        .collect();
    let (loss, dlogits) = cross_entropy(&logits, &targets);
    let mut d_head = LinearParams::zeros(head.w.nrows(), head.w.ncols());
    let dh = linear_backward(head, &h, &dlogits, &mut d_head);
    Ok(ItmOutput {
        loss,
        d_cross_im: &dh * cross_txt,
        d_cross_txt: &dh * cross_im,
        d_head,
    })
}

/// One uniformly drawn mismatched partner per sample, never itself. `None`
/// for a batch of one.
pub fn negative_pairing(batch_size: usize, seed: u64, step: u64) -> Option<Vec<usize>> {
    if batch_size < 2 {
        return None;
    }
    let mut rng = CounterRng::for_stream(seed, Stream::Negatives, &[step]);
    Some(
        (0..batch_size)
            .map(|k| {
                let j = rand::Rng::random_range(&mut rng, 0..batch_size - 1);
                if j >= k {
                    j + 1
                } else {
                    j
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub mvlm_text: f64,
    pub mvlm_image: f64,
    pub itc: f64,
    pub itm: f64,
    pub total: f64,
    /// Omega: number of masked pixels behind the image term.
    pub masked_pixel_count: usize,
    pub itm_skipped: bool,
}

/// Unit-weight sum. `itm = None` marks a batch where matching was skipped.
pub fn total_loss(
    mvlm_text: f64,
    mvlm_image: f64,
    itc: f64,
    itm: Option<f64>,
    masked_pixel_count: usize,
) -> LossReport {
    let itm_value = itm.unwrap_or(0.0);
    LossReport {
        mvlm_text,
        mvlm_image,
        itc,
        itm: itm_value,
        total: mvlm_text + mvlm_image + itc + itm_value,
        masked_pixel_count,
        itm_skipped: itm.is_none(),
    }
}

impl LossReport {
    /// One loss-log line: `{step, mvlm_text, mvlm_image, itc, itm, total, tau}`.
    pub fn to_json_line(&self, step: u64, tau: f64) -> String {
        serde_json::json!({
            "step": step,
            "mvlm_text": self.mvlm_text,
            "mvlm_image": self.mvlm_image,
            "itc": self.itc,
            "itm": self.itm,
            "total": self.total,
            "tau": tau,
        })
        .to_string()
    }
}

/// Forward the batch, evaluate every loss, and optionally backpropagate.
/// Gradients are with respect to every entry of `params`, `log_tau`
/// included.
pub fn batch_loss(
    params: &ModelParams,
    dims: &ModelDims,
    batch: &[Sample],
    negatives: Option<&[usize]>,
    with_grads: bool,
) -> Result<(LossReport, Option<ModelParams>)> {
    let trace = forward(params, dims, batch, negatives)?;
    let ids: Vec<&[usize]> = batch.iter().map(|s| s.ids.as_slice()).collect();
    let tmask: Vec<&[usize]> = batch.iter().map(|s| s.text_mask.as_slice()).collect();
    let targets: Vec<&Mat> = batch.iter().map(|s| &s.target).collect();
    let pmask: Vec<&[bool]> = batch.iter().map(|s| s.patch_mask.as_slice()).collect();
    let mvlm = mvlm_loss(&trace.logits, &ids, &tmask, &trace.recon, &targets, &pmask)?;
    let tau = params.tau();
    let itc = itc_loss(&trace.z_im, &trace.z_txt, tau)?;
    let itm = match negatives {
        Some(_) => {
            let n = batch.len();
            let d = dims.d_model;
            let mut ci = Mat::zeros((2 * n, d));
            let mut ct = Mat::zeros((2 * n, d));
            ci.slice_mut(ndarray::s![..n, ..]).assign(&trace.cross_im);
            ci.slice_mut(ndarray::s![n.., ..]).assign(&trace.cross_im_neg);
            ct.slice_mut(ndarray::s![..n, ..]).assign(&trace.cross_txt);
            ct.slice_mut(ndarray::s![n.., ..]).assign(&trace.cross_txt_neg);
            let labels: Vec<bool> = (0..2 * n).map(|i| i < n).collect();
            Some(itm_loss(&params.itm_head, &ci, &ct, &labels)?)
        }
        None => None,
    };
    let report = total_loss(
        mvlm.text,
        mvlm.image,
        itc.loss,
        itm.as_ref().map(|o| o.loss),
        mvlm.omega,
    );
    if !with_grads {
        return Ok((report, None));
    }
    let mut dy = OutputGrads::zeros_for(&trace);
    dy.z_im = itc.d_z_im;
    dy.z_txt = itc.d_z_txt;
    dy.logits = mvlm.d_logits;
    dy.recon = mvlm.d_recon;
    if let Some(o) = &itm {
        let n = batch.len();
        let split = |m: &Mat| {
            let (a, b) = m.view().split_at(Axis(0), n);
            (a.to_owned(), b.to_owned())
        };
        (dy.cross_im, dy.cross_im_neg) = split(&o.d_cross_im);
        (dy.cross_txt, dy.cross_txt_neg) = split(&o.d_cross_txt);
    }
    let mut grads = backward(params, &trace, &dy);
    if let Some(o) = itm {
        grads.itm_head = o.d_head;
    }
    grads.log_tau[[0, 0]] = itc.d_tau * tau;
    Ok((report, Some(grads)))
}

/// Per-tensor agreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub scalars: usize,
    /// `|a - n| / max(1e-8, |n|)` with Euclidean norms over the tensor.
    pub rel_error: f64,
    pub abs_error: f64,
    pub numeric_norm: f64,
}

/// Central differences of `loss` over every scalar of `params`, compared
/// tensor by tensor with `analytic`.
pub fn gradient_check(
    params: &ModelParams,
    analytic: &ModelParams,
    h: f64,
    loss: &dyn Fn(&ModelParams) -> f64,
) -> Vec<TensorCheck> {
    gradient_check_where(params, analytic, h, loss, &|_| true)
}

/// [`gradient_check`] restricted to the tensors whose name passes `keep`.
pub fn gradient_check_where(
    params: &ModelParams,
    analytic: &ModelParams,
    h: f64,
    loss: &dyn Fn(&ModelParams) -> f64,
    keep: &dyn Fn(&str) -> bool,
) -> Vec<TensorCheck> {
    let mut work = params.clone();
    let names: Vec<(String, usize)> = params.named().into_iter().map(|(n, m)| (n, m.len())).collect();
    let analytic = analytic.named();
    let mut out = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.into_iter().enumerate() {
        if !keep(&name) {
            continue;
        }
        let mut sq_diff = 0.0;
        let mut sq_num = 0.0;
        for idx in 0..len {
            let orig = params.named()[ti].1.as_slice().expect("contiguous")[idx];
            let mut eval = |v: f64| {
                work.named_mut()[ti].1.as_slice_mut().expect("contiguous")[idx] = v;
                loss(&work)
            };
            let num = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            eval(orig);
            let a = analytic[ti].1.as_slice().expect("contiguous")[idx];
            sq_diff += (a - num) * (a - num);
            sq_num += num * num;
        }
        out.push(TensorCheck {
            name,
            scalars: len,
            rel_error: sq_diff.sqrt() / sq_num.sqrt().max(1e-8),
            abs_error: sq_diff.sqrt(),
            numeric_norm: sq_num.sqrt(),
        });
    }
    out
}
