//! Parameter containers. Every container can enumerate its matrices with
//! stable dotted names, which the optimizer, checkpoints and gradient checks
//! rely on.

use ndarray::Array2;
use rand::Rng;
use rand_distr::Normal;

use crate::rng::{CounterRng, Stream};

pub type Mat = Array2<f64>;

pub trait Visit {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Visit for Mat {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Visit> Visit for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

macro_rules! visit_fields {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl Visit for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
                $( self.$field.visit(&join(prefix, stringify!($field)), f); )+
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
                $( self.$field.visit_mut(&join(prefix, stringify!($field)), f); )+
            }
        }
    };
}

/// `y = x w + b` with `w: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Mat,
    pub b: Mat,
}
visit_fields!(LinearParams { w, b });

impl LinearParams {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Mat::zeros((inp, out)),
            b: Mat::zeros((1, out)),
        }
    }
}

/// Bias-free `y = x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w: Mat,
}
visit_fields!(ProjectionParams { w });

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Mat,
    pub beta: Mat,
}
visit_fields!(LayerNormParams { gamma, beta });

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Mat::ones((1, d)),
            beta: Mat::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: LinearParams,
    /// Keys carry no bias: a key bias shifts every score of a query equally
    /// and cancels in the softmax.
    pub k: ProjectionParams,
    pub v: LinearParams,
    pub o: LinearParams,
}
visit_fields!(AttentionParams { q, k, v, o });

impl AttentionParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            q: LinearParams::zeros(d, d),
            k: ProjectionParams { w: Mat::zeros((d, d)) },
            v: LinearParams::zeros(d, d),
            o: LinearParams::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}
visit_fields!(MlpParams { fc1, fc2 });

/// Pre-norm self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}
visit_fields!(BlockParams { ln1, attn, ln2, mlp });

/// Pre-norm cross-attention block: queries from one modality, keys and
/// values from the other.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlockParams {
    pub ln_query: LayerNormParams,
    pub ln_context: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}
visit_fields!(CrossBlockParams {
    ln_query,
    ln_context,
    attn,
    ln2,
    mlp
});

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    pub patch_embed: LinearParams,
    pub cls_token: Mat,
    pub mask_embed: Mat,
    pub pos: Mat,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
}
visit_fields!(ImageEncoderParams {
    patch_embed,
    cls_token,
    mask_embed,
    pos,
    blocks,
    norm
});

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub token_embed: Mat,
    pub pos: Mat,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
}
visit_fields!(TextEncoderParams {
    token_embed,
    pos,
    blocks,
    norm
});

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoderParams {
    pub blocks: Vec<CrossBlockParams>,
    pub norm: LayerNormParams,
}
visit_fields!(CrossEncoderParams { blocks, norm });

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub image_encoder: ImageEncoderParams,
    pub text_encoder: TextEncoderParams,
    pub cross_image: CrossEncoderParams,
    pub cross_text: CrossEncoderParams,
    pub image_decoder: LinearParams,
    pub text_decoder: LinearParams,
    pub image_proj: LinearParams,
    pub text_proj: LinearParams,
    pub itm_head: LinearParams,
    /// `1 x 1`, natural log of the contrastive temperature.
    pub log_tau: Mat,
}
visit_fields!(ModelParams {
    image_encoder,
    text_encoder,
    cross_image,
    cross_text,
    image_decoder,
    text_decoder,
    image_proj,
    text_proj,
    itm_head,
    log_tau,
});

/// Network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub num_patches: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub d_proj: usize,
    pub heads: usize,
    pub blocks: usize,
    pub cross_blocks: usize,
    pub mlp_ratio: usize,
}

pub const INIT_STD: f64 = 0.02;
pub const INIT_TAU: f64 = 0.07;
/// Lower clamp on the contrastive temperature.
pub const TAU_FLOOR: f64 = 1e-3;

fn self_block(d: usize, hidden: usize) -> BlockParams {
    BlockParams {
        ln1: LayerNormParams::new(d),
        attn: AttentionParams::zeros(d),
        ln2: LayerNormParams::new(d),
        mlp: MlpParams {
            fc1: LinearParams::zeros(d, hidden),
            fc2: LinearParams::zeros(hidden, d),
        },
    }
}

fn cross_block(d: usize, hidden: usize) -> CrossBlockParams {
    CrossBlockParams {
        ln_query: LayerNormParams::new(d),
        ln_context: LayerNormParams::new(d),
        attn: AttentionParams::zeros(d),
        ln2: LayerNormParams::new(d),
        mlp: MlpParams {
            fc1: LinearParams::zeros(d, hidden),
            fc2: LinearParams::zeros(hidden, d),
        },
    }
}

/// Biases, layer-norm gains/shifts and the temperature keep their constant
/// initialization; everything else is drawn from N(0, 0.02^2).
pub fn is_constant_init(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".gamma") || name.ends_with(".beta") || name == "log_tau"
}

impl ModelParams {
    /// All-zero weights (unit layer-norm gains, `log_tau = ln 0.07`).
    pub fn zeros(dims: &ModelDims) -> Self {
        let d = dims.d_model;
        let hidden = d * dims.mlp_ratio;
        let cross = |n| CrossEncoderParams {
            blocks: (0..n).map(|_| cross_block(d, hidden)).collect(),
            norm: LayerNormParams::new(d),
        };
        Self {
            image_encoder: ImageEncoderParams {
                patch_embed: LinearParams::zeros(dims.patch_dim, d),
                cls_token: Mat::zeros((1, d)),
                mask_embed: Mat::zeros((1, d)),
                pos: Mat::zeros((dims.num_patches + 1, d)),
                blocks: (0..dims.blocks).map(|_| self_block(d, hidden)).collect(),
                norm: LayerNormParams::new(d),
            },
            text_encoder: TextEncoderParams {
                token_embed: Mat::zeros((dims.vocab_size, d)),
                pos: Mat::zeros((dims.max_len, d)),
                blocks: (0..dims.blocks).map(|_| self_block(d, hidden)).collect(),
                norm: LayerNormParams::new(d),
            },
            cross_image: cross(dims.cross_blocks),
            cross_text: cross(dims.cross_blocks),
            image_decoder: LinearParams::zeros(d, dims.patch_dim),
            text_decoder: LinearParams::zeros(d, dims.vocab_size),
            image_proj: LinearParams::zeros(d, dims.d_proj),
            text_proj: LinearParams::zeros(d, dims.d_proj),
            itm_head: LinearParams::zeros(d, 2),
            log_tau: Mat::from_elem((1, 1), INIT_TAU.ln()),
        }
    }

    /// Seeded initialization. Each tensor draws from its own stream, keyed by
    /// its position in the parameter listing.
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut index = 0u64;
        p.visit_mut("", &mut |name, m| {
            if !is_constant_init(&name) {
                let mut rng = CounterRng::for_stream(seed, Stream::Init, &[index]);
                m.mapv_inplace(|_| rng.sample(normal));
            }
            index += 1;
        });
        p
    }

    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, m| out.push((n, m)));
        out
    }

    pub fn visit_all_mut(&mut self, mut f: impl FnMut(&str, &mut Mat)) {
        self.visit_mut("", &mut |n, m| f(&n, m));
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, m| m.fill(0.0));
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.visit_mut("", &mut |_, m| *m *= s);
    }

    pub fn tau(&self) -> f64 {
        self.log_tau[[0, 0]].exp()
    }

    pub fn max_abs(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, m)| m.iter())
            .fold(0.0, |a, &v| a.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}
