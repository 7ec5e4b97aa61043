//! Encoders, cross-modal fusion, decoders and the batch-level forward trace.
//!
//! Per sample the forward pass runs both unimodal encoders on clean and
//! masked inputs, fuses masked queries with clean context, and projects the
//! clean class/start features for the contrastive head:
//!
//! ```text
//! A  = f_im(I)      Am = f_im(I_m)      B  = f_txt(T)      Bm = f_txt(T_m)
//! recon  = d_im(g_im(Am, B)[1..])        logits = d_txt(g_txt(Bm, A))
//! z_im   = norm(proj_im(A[0]))           z_txt  = norm(proj_txt(B[0]))
//! ```

use ndarray::s;

use super::layers::{
    block_backward, block_forward, cross_block_backward, cross_block_forward, l2_normalize, l2_normalize_backward,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, BlockCache, CrossBlockCache,
    LayerNormCache,
};
use super::params::{
    CrossEncoderParams, ImageEncoderParams, LinearParams, Mat, ModelDims, ModelParams, TextEncoderParams,
};
use crate::error::{Error, Result};
use crate::text::MASK;

/// One training or evaluation pair in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `P x patch_dim` encoder input.
    pub patches: Mat,
    /// `P x patch_dim` reconstruction target (raw or ridge-filtered patches).
    pub target: Mat,
    pub patch_mask: Vec<bool>,
    /// Token ids starting with START, without PAD.
    pub ids: Vec<usize>,
    /// Strictly increasing positions into `ids`.
    pub text_mask: Vec<usize>,
}

impl Sample {
    pub fn masked_ids(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for &p in &self.text_mask {
            ids[p] = MASK;
        }
        ids
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let shape = [dims.num_patches, dims.patch_dim];
        if self.patches.shape() != shape || self.target.shape() != shape {
            return Err(Error::Dimension(format!(
                "patches {:?} / target {:?}, model expects {:?}",
                self.patches.shape(),
                self.target.shape(),
                shape
            )));
        }
        if self.patch_mask.len() != dims.num_patches {
            return Err(Error::Dimension(format!(
                "patch mask has {} entries for {} patches",
                self.patch_mask.len(),
                dims.num_patches
            )));
        }
        if self.ids.is_empty() || self.ids.len() > dims.max_len {
            return Err(Error::Dimension(format!(
                "text length {} outside [1, {}]",
                self.ids.len(),
                dims.max_len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| t >= dims.vocab_size) {
            return Err(Error::Dimension(format!(
                "token id {bad} >= vocab size {}",
                dims.vocab_size
            )));
        }
        if self.text_mask.iter().any(|&p| p >= self.ids.len()) || !self.text_mask.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Dimension("text mask positions out of range or unsorted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ImageCache {
    patches: Mat,
    masked: Vec<bool>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

/// `f_im`: returns `(P + 1) x d` features, class token first. Masked patches
/// enter as the learned mask embedding.
pub fn encode_image(p: &ImageEncoderParams, heads: usize, patches: &Mat, masked: &[bool]) -> Result<(Mat, ImageCache)> {
    let num = p.pos.nrows() - 1;
    if patches.nrows() != num || patches.ncols() != p.patch_embed.w.nrows() || masked.len() != num {
        return Err(Error::Dimension(format!(
            "image encoder expects {num} x {} patches, got {:?}",
            p.patch_embed.w.nrows(),
            patches.shape()
        )));
    }
    let emb = linear_forward(&p.patch_embed, patches);
    let mut x = p.pos.clone();
    x.row_mut(0).scaled_add(1.0, &p.cls_token.row(0));
    for (i, &m) in masked.iter().enumerate() {
        let src = if m { p.mask_embed.row(0) } else { emb.row(i) };
        x.row_mut(i + 1).scaled_add(1.0, &src);
    }
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (y, c) = block_forward(b, &x, heads);
        blocks.push(c);
        x = y;
    }
    let (out, norm) = layer_norm_forward(&p.norm, &x);
    Ok((
        out,
        ImageCache {
            patches: patches.clone(),
            masked: masked.to_vec(),
            blocks,
            norm,
        },
    ))
}

pub fn encode_image_backward(p: &ImageEncoderParams, c: &ImageCache, dout: &Mat, g: &mut ImageEncoderParams) {
    let mut dx = layer_norm_backward(&p.norm, &c.norm, dout, &mut g.norm);
    for ((b, bc), gb) in p.blocks.iter().zip(&c.blocks).zip(g.blocks.iter_mut()).rev() {
        dx = block_backward(b, bc, &dx, gb);
    }
    g.pos += &dx;
    g.cls_token.row_mut(0).scaled_add(1.0, &dx.row(0));
    let mut demb = dx.slice(s![1.., ..]).to_owned();
    for (i, &m) in c.masked.iter().enumerate() {
        if m {
            g.mask_embed.row_mut(0).scaled_add(1.0, &demb.row(i));
            demb.row_mut(i).fill(0.0);
        }
    }
    linear_backward(&p.patch_embed, &c.patches, &demb, &mut g.patch_embed);
}

#[derive(Debug, Clone)]
pub struct TextCache {
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

/// `f_txt`: returns `L x d` features, START feature first.
pub fn encode_text(p: &TextEncoderParams, heads: usize, ids: &[usize]) -> Result<(Mat, TextCache)> {
    if ids.is_empty() || ids.len() > p.pos.nrows() {
        return Err(Error::Dimension(format!(
            "text length {} outside [1, {}]",
            ids.len(),
            p.pos.nrows()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= p.token_embed.nrows()) {
        return Err(Error::Dimension(format!("token id {bad} out of vocabulary")));
    }
    let mut x = p.pos.slice(s![..ids.len(), ..]).to_owned();
    for (i, &t) in ids.iter().enumerate() {
        x.row_mut(i).scaled_add(1.0, &p.token_embed.row(t));
    }
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (y, c) = block_forward(b, &x, heads);
        blocks.push(c);
        x = y;
    }
    let (out, norm) = layer_norm_forward(&p.norm, &x);
    Ok((
        out,
        TextCache {
            ids: ids.to_vec(),
            blocks,
            norm,
        },
    ))
}

pub fn encode_text_backward(p: &TextEncoderParams, c: &TextCache, dout: &Mat, g: &mut TextEncoderParams) {
    let mut dx = layer_norm_backward(&p.norm, &c.norm, dout, &mut g.norm);
    for ((b, bc), gb) in p.blocks.iter().zip(&c.blocks).zip(g.blocks.iter_mut()).rev() {
        dx = block_backward(b, bc, &dx, gb);
    }
    let l = c.ids.len();
    let mut gpos = g.pos.slice_mut(s![..l, ..]);
    gpos += &dx;
    for (i, &t) in c.ids.iter().enumerate() {
        g.token_embed.row_mut(t).scaled_add(1.0, &dx.row(i));
    }
}

#[derive(Debug, Clone)]
pub struct CrossCache {
    pub blocks: Vec<CrossBlockCache>,
    norm: LayerNormCache,
}

/// Which cross-modal encoder to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `g_im`: image queries, text context.
    Image,
    /// `g_txt`: text queries, image context.
    Text,
}

impl ModelParams {
    pub fn cross(&self, dir: Direction) -> &CrossEncoderParams {
        match dir {
            Direction::Image => &self.cross_image,
            Direction::Text => &self.cross_text,
        }
    }

    pub fn cross_mut(&mut self, dir: Direction) -> &mut CrossEncoderParams {
        match dir {
            Direction::Image => &mut self.cross_image,
            Direction::Text => &mut self.cross_text,
        }
    }
}

/// Output has the query's shape.
pub fn cross_encode(p: &CrossEncoderParams, heads: usize, query: &Mat, context: &Mat) -> Result<(Mat, CrossCache)> {
    let d = p.norm.gamma.ncols();
    if query.ncols() != d || context.ncols() != d || context.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "cross encoder width {d}, query {:?}, context {:?}",
            query.shape(),
            context.shape()
        )));
    }
    let mut x = query.clone();
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (y, c) = cross_block_forward(b, &x, context, heads);
        blocks.push(c);
        x = y;
    }
    let (out, norm) = layer_norm_forward(&p.norm, &x);
    Ok((out, CrossCache { blocks, norm }))
}

/// Returns `(d query, d context)`.
pub fn cross_encode_backward(
    p: &CrossEncoderParams,
    c: &CrossCache,
    dout: &Mat,
    g: &mut CrossEncoderParams,
) -> (Mat, Mat) {
    let mut dx = layer_norm_backward(&p.norm, &c.norm, dout, &mut g.norm);
    let mut dctx: Option<Mat> = None;
    for ((b, bc), gb) in p.blocks.iter().zip(&c.blocks).zip(g.blocks.iter_mut()).rev() {
        let (nx, nc) = cross_block_backward(b, bc, &dx, gb);
        dx = nx;
        dctx = Some(match dctx {
            Some(acc) => acc + &nc,
            None => nc,
        });
    }
    let dctx = dctx.unwrap_or_else(|| Mat::zeros((0, dx.ncols())));
    (dx, dctx)
}

#[derive(Debug, Clone)]
struct ProjCache {
    input: Mat,
    z: Mat,
    norm: f64,
}

fn project(p: &LinearParams, row: Mat) -> (Mat, ProjCache) {
    let u = linear_forward(p, &row);
    let (z, norm) = l2_normalize(&u);
    (z.clone(), ProjCache { input: row, z, norm })
}

fn project_backward(p: &LinearParams, c: &ProjCache, dz: &Mat, g: &mut LinearParams) -> Mat {
    let du = l2_normalize_backward(&c.z, c.norm, dz);
    linear_backward(p, &c.input, &du, g)
}

#[derive(Debug, Clone)]
struct SampleTrace {
    a: (Mat, ImageCache),
    /// `None` when no patch is masked, in which case `Am == A`.
    am: Option<(Mat, ImageCache)>,
    b: (Mat, TextCache),
    bm: (Mat, TextCache),
    cross_im: (Mat, CrossCache),
    cross_txt: (Mat, CrossCache),
    proj_im: ProjCache,
    proj_txt: ProjCache,
}

impl SampleTrace {
    fn am(&self) -> &Mat {
        self.am.as_ref().map_or(&self.a.0, |x| &x.0)
    }
}

/// Everything the backward pass needs, plus the model outputs the
/// objectives consume.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    samples: Vec<SampleTrace>,
    neg: Vec<(CrossCache, CrossCache)>,
    /// Per-sample ITM negative index, `None` when ITM is skipped.
    pub negatives: Option<Vec<usize>>,
    /// `N x d_proj`, unit rows.
    pub z_im: Mat,
    pub z_txt: Mat,
    /// `N x d` class/start rows of the matched cross encodings.
    pub cross_im: Mat,
    pub cross_txt: Mat,
    /// Same for the mismatched pairs (empty when ITM is skipped).
    pub cross_im_neg: Mat,
    pub cross_txt_neg: Mat,
    /// Per sample, `P x patch_dim`.
    pub recon: Vec<Mat>,
    /// Per sample, `L x V`.
    pub logits: Vec<Mat>,
}

/// Upstream gradients for every output in [`ForwardTrace`].
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub z_im: Mat,
    pub z_txt: Mat,
    pub cross_im: Mat,
    pub cross_txt: Mat,
    pub cross_im_neg: Mat,
    pub cross_txt_neg: Mat,
    pub recon: Vec<Mat>,
    pub logits: Vec<Mat>,
}

impl OutputGrads {
    pub fn zeros_for(t: &ForwardTrace) -> Self {
        Self {
            z_im: Mat::zeros(t.z_im.raw_dim()),
            z_txt: Mat::zeros(t.z_txt.raw_dim()),
            cross_im: Mat::zeros(t.cross_im.raw_dim()),
            cross_txt: Mat::zeros(t.cross_txt.raw_dim()),
            cross_im_neg: Mat::zeros(t.cross_im_neg.raw_dim()),
            cross_txt_neg: Mat::zeros(t.cross_txt_neg.raw_dim()),
            recon: t.recon.iter().map(|m| Mat::zeros(m.raw_dim())).collect(),
            logits: t.logits.iter().map(|m| Mat::zeros(m.raw_dim())).collect(),
        }
    }
}

fn stack_rows(rows: &[Mat], width: usize) -> Mat {
    let mut out = Mat::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&r.row(0));
    }
    out
}

/// Unimodal embeddings only: the `z_im`, `z_txt` pair used for retrieval.
pub fn embed(params: &ModelParams, dims: &ModelDims, patches: &Mat, ids: &[usize]) -> Result<(Mat, Mat)> {
    let no_mask = vec![false; dims.num_patches];
    let (a, _) = encode_image(&params.image_encoder, dims.heads, patches, &no_mask)?;
    let (b, _) = encode_text(&params.text_encoder, dims.heads, ids)?;
    let (zi, _) = project(&params.image_proj, a.slice(s![0..1, ..]).to_owned());
    let (zt, _) = project(&params.text_proj, b.slice(s![0..1, ..]).to_owned());
    Ok((zi, zt))
}

/// Full forward pass over a batch. `negatives[k]` names the text/image
/// partner of sample `k` in its mismatched ITM pair.
pub fn forward(
    params: &ModelParams,
    dims: &ModelDims,
    batch: &[Sample],
    negatives: Option<&[usize]>,
) -> Result<ForwardTrace> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    if let Some(neg) = negatives {
        if neg.len() != batch.len() || neg.iter().enumerate().any(|(k, &j)| j >= batch.len() || j == k) {
            return Err(Error::Dimension("negative pairing does not match batch".into()));
        }
    }
    let h = dims.heads;
    let d = dims.d_model;
    let mut samples = Vec::with_capacity(batch.len());
    let mut recon = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    for s in batch {
        s.validate(dims)?;
        let a = encode_image(&params.image_encoder, h, &s.patches, &vec![false; dims.num_patches])?;
        let am = if s.patch_mask.iter().any(|&m| m) {
            Some(encode_image(&params.image_encoder, h, &s.patches, &s.patch_mask)?)
        } else {
            None
        };
        let b = encode_text(&params.text_encoder, h, &s.ids)?;
        let bm = encode_text(&params.text_encoder, h, &s.masked_ids())?;
        let am_out = am.as_ref().map_or(&a.0, |x| &x.0);
        let cross_im = cross_encode(&params.cross_image, h, am_out, &b.0)?;
        let cross_txt = cross_encode(&params.cross_text, h, &bm.0, &a.0)?;
        recon.push(linear_forward(
            &params.image_decoder,
            &cross_im.0.slice(s![1.., ..]).to_owned(),
        ));
        logits.push(linear_forward(&params.text_decoder, &cross_txt.0));
        let (_, proj_im) = project(&params.image_proj, a.0.slice(s![0..1, ..]).to_owned());
        let (_, proj_txt) = project(&params.text_proj, b.0.slice(s![0..1, ..]).to_owned());
        samples.push(SampleTrace {
            a,
            am,
            b,
            bm,
            cross_im,
            cross_txt,
            proj_im,
            proj_txt,
        });
    }
    let mut neg = Vec::new();
    let mut cim_neg = Vec::new();
    let mut ctxt_neg = Vec::new();
    if let Some(pairs) = negatives {
        for (k, &j) in pairs.iter().enumerate() {
            let (sk, sj) = (&samples[k], &samples[j]);
            let ci = cross_encode(&params.cross_image, h, sk.am(), &sj.b.0)?;
            let ct = cross_encode(&params.cross_text, h, &sj.bm.0, &sk.a.0)?;
            cim_neg.push(ci.0);
            ctxt_neg.push(ct.0);
            neg.push((ci.1, ct.1));
        }
    }
    let dp = dims.d_proj;
    Ok(ForwardTrace {
        z_im: stack_rows(&samples.iter().map(|s| s.proj_im.z.clone()).collect::<Vec<_>>(), dp),
        z_txt: stack_rows(&samples.iter().map(|s| s.proj_txt.z.clone()).collect::<Vec<_>>(), dp),
        cross_im: stack_rows(&samples.iter().map(|s| s.cross_im.0.clone()).collect::<Vec<_>>(), d),
        cross_txt: stack_rows(&samples.iter().map(|s| s.cross_txt.0.clone()).collect::<Vec<_>>(), d),
        cross_im_neg: stack_rows(&cim_neg, d),
        cross_txt_neg: stack_rows(&ctxt_neg, d),
        negatives: negatives.map(<[usize]>::to_vec),
        samples,
        neg,
        recon,
        logits,
    })
}

fn first_row_grad(rows: usize, d: usize, g: ndarray::ArrayView1<f64>) -> Mat {
    let mut m = Mat::zeros((rows, d));
    m.row_mut(0).assign(&g);
    m
}

/// Parameter gradients for upstream output gradients `dy`. The ITM head and
/// the temperature get no contribution here; the objectives own them.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, dy: &OutputGrads) -> ModelParams {
    let mut g = params.zeros_like();
    let d = params.image_proj.w.nrows();
    let n = trace.samples.len();
    let mut da: Vec<Mat> = trace.samples.iter().map(|s| Mat::zeros(s.a.0.raw_dim())).collect();
    let mut dam: Vec<Mat> = da.clone();
    let mut db: Vec<Mat> = trace.samples.iter().map(|s| Mat::zeros(s.b.0.raw_dim())).collect();
    let mut dbm: Vec<Mat> = db.clone();

    for (k, s) in trace.samples.iter().enumerate() {
        let dz = dy.z_im.slice(s![k..k + 1, ..]).to_owned();
        let dcls = project_backward(&params.image_proj, &s.proj_im, &dz, &mut g.image_proj);
        da[k].row_mut(0).scaled_add(1.0, &dcls.row(0));
        let dz = dy.z_txt.slice(s![k..k + 1, ..]).to_owned();
        let dstart = project_backward(&params.text_proj, &s.proj_txt, &dz, &mut g.text_proj);
        db[k].row_mut(0).scaled_add(1.0, &dstart.row(0));

        let rows = s.cross_im.0.nrows();
        let mut dci = first_row_grad(rows, d, dy.cross_im.row(k));
        let fused = s.cross_im.0.slice(s![1.., ..]).to_owned();
        let dfused = linear_backward(&params.image_decoder, &fused, &dy.recon[k], &mut g.image_decoder);
        dci.slice_mut(s![1.., ..]).scaled_add(1.0, &dfused);
        let (dq, dc) = cross_encode_backward(&params.cross_image, &s.cross_im.1, &dci, &mut g.cross_image);
        dam[k] += &dq;
        db[k] += &dc;

        let mut dct = linear_backward(&params.text_decoder, &s.cross_txt.0, &dy.logits[k], &mut g.text_decoder);
        dct.row_mut(0).scaled_add(1.0, &dy.cross_txt.row(k));
        let (dq, dc) = cross_encode_backward(&params.cross_text, &s.cross_txt.1, &dct, &mut g.cross_text);
        dbm[k] += &dq;
        da[k] += &dc;
    }
    if let Some(pairs) = &trace.negatives {
        for (k, &j) in pairs.iter().enumerate() {
            let (ci, ct) = &trace.neg[k];
            let dci = first_row_grad(trace.samples[k].am().nrows(), d, dy.cross_im_neg.row(k));
            let (dq, dc) = cross_encode_backward(&params.cross_image, ci, &dci, &mut g.cross_image);
            dam[k] += &dq;
            db[j] += &dc;
            let dct = first_row_grad(trace.samples[j].bm.0.nrows(), d, dy.cross_txt_neg.row(k));
            let (dq, dc) = cross_encode_backward(&params.cross_text, ct, &dct, &mut g.cross_text);
            dbm[j] += &dq;
            da[k] += &dc;
        }
    }
    for k in 0..n {
        let s = &trace.samples[k];
        match &s.am {
            Some((_, cache)) => {
                encode_image_backward(&params.image_encoder, cache, &dam[k], &mut g.image_encoder);
                encode_image_backward(&params.image_encoder, &s.a.1, &da[k], &mut g.image_encoder);
            }
            None => {
                let total = &da[k] + &dam[k];
                encode_image_backward(&params.image_encoder, &s.a.1, &total, &mut g.image_encoder);
            }
        }
        encode_text_backward(&params.text_encoder, &s.b.1, &db[k], &mut g.text_encoder);
        encode_text_backward(&params.text_encoder, &s.bm.1, &dbm[k], &mut g.text_encoder);
    }
    g
}
