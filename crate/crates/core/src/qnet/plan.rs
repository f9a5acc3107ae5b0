//! Parameter layout: every named tensor's slice in the flat vector.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{NetConfig, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub off: usize,
    pub len: usize,
}

impl Span {
    pub fn range(self) -> Range<usize> {
        self.off..self.off + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(f64),
    Const(f64),
}

/// One named tensor in the layout table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    pub cin: usize,
    pub cout: usize,
    /// Input height and width of this stage.
    pub h: usize,
    pub w: usize,
    pub weight: Span,
    pub bias: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct ExtractorPlan {
    pub convs: Vec<ConvPlan>,
    pub c_last: usize,
    pub tokens: usize,
    pub proj_w: Span,
    pub proj_b: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct EncPlan {
    pub wq: Span,
    pub bq: Span,
    pub wk: Span,
    pub wv: Span,
    pub bv: Span,
    pub wo: Span,
    pub bo: Span,
    pub ln1_g: Span,
    pub ln1_b: Span,
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
    pub ln2_g: Span,
    pub ln2_b: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub bg: ExtractorPlan,
    pub fg: ExtractorPlan,
    pub coord_w: Span,
    pub coord_b: Span,
    /// FFM token count: background + foreground + 1 coord token.
    pub n_tokens: usize,
    pub pos: Span,
    pub ffm: Vec<EncPlan>,
    pub step: Span,
    pub agent: Vec<EncPlan>,
    pub head_w: Span,
    pub head_b: Span,
    pub total: usize,
    pub layout: Vec<LayoutEntry>,
    inits: Vec<(Span, Init)>,
}

struct Builder {
    total: usize,
    layout: Vec<LayoutEntry>,
    inits: Vec<(Span, Init)>,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: &[usize], init: Init) -> Span {
        let span = Span {
            off: self.total,
            len: shape.iter().product(),
        };
        self.layout.push(LayoutEntry {
            name,
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.inits.push((span, init));
        self.total += span.len;
        span
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> (Span, Span) {
        let bound = (1.0 / din as f64).sqrt();
        let w = self.alloc(format!("{name}.w"), &[din, dout], Init::Uniform(bound));
        let b = self.alloc(format!("{name}.b"), &[dout], Init::Const(0.0));
        (w, b)
    }

    fn extractor(&mut self, name: &str, h: usize, w: usize, channels: &[usize], d: usize) -> ExtractorPlan {
        let mut convs = Vec::with_capacity(channels.len());
        let (mut ch, mut cw, mut cin) = (h, w, 1);
        for (s, &cout) in channels.iter().enumerate() {
            let bound = (1.0 / (cin * 9) as f64).sqrt();
            let weight = self.alloc(
                format!("{name}.conv{s}.w"),
                &[cout, cin, 3, 3],
                Init::Uniform(bound),
            );
            let bias = self.alloc(format!("{name}.conv{s}.b"), &[cout], Init::Const(0.0));
            convs.push(ConvPlan {
                cin,
                cout,
                h: ch,
                w: cw,
                weight,
                bias,
            });
            cin = cout;
            ch /= 2;
            cw /= 2;
        }
        let (proj_w, proj_b) = self.linear(&format!("{name}.proj"), cin, d);
        ExtractorPlan {
            convs,
            c_last: cin,
            tokens: ch * cw,
            proj_w,
            proj_b,
        }
    }

    fn encoder(&mut self, name: &str, d: usize, d_ff: usize) -> EncPlan {
        let (wq, bq) = self.linear(&format!("{name}.attn.q"), d, d);
        // keys carry no bias: softmax is invariant to it
        let wk = self.alloc(
            format!("{name}.attn.k.w"),
            &[d, d],
            Init::Uniform((1.0 / d as f64).sqrt()),
        );
        let (wv, bv) = self.linear(&format!("{name}.attn.v"), d, d);
        let (wo, bo) = self.linear(&format!("{name}.attn.out"), d, d);
        let ln1_g = self.alloc(format!("{name}.ln1.gamma"), &[d], Init::Const(1.0));
        let ln1_b = self.alloc(format!("{name}.ln1.beta"), &[d], Init::Const(0.0));
        let (w1, b1) = self.linear(&format!("{name}.ff1"), d, d_ff);
        let (w2, b2) = self.linear(&format!("{name}.ff2"), d_ff, d);
        let ln2_g = self.alloc(format!("{name}.ln2.gamma"), &[d], Init::Const(1.0));
        let ln2_b = self.alloc(format!("{name}.ln2.beta"), &[d], Init::Const(0.0));
        EncPlan {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            ln1_g,
            ln1_b,
            w1,
            b1,
            w2,
            b2,
            ln2_g,
            ln2_b,
        }
    }
}

pub(crate) const N_ACTIONS: usize = 16;
pub(crate) const HISTORY: usize = 4;
const EMBED_INIT: f64 = 0.02;

impl Plan {
    /// Assumes `cfg` has been validated.
    pub fn new(cfg: &NetConfig) -> Self {
        let d = cfg.d_model;
        let d_ff = cfg.d_ff();
        let mut b = Builder {
            total: 0,
            layout: vec![],
            inits: vec![],
        };
        let bg = b.extractor("bg", cfg.bg_h, cfg.bg_w, &cfg.conv_channels, d);
        let fg = b.extractor("fg", cfg.fg_h, cfg.fg_w, &cfg.conv_channels, d);
        let (coord_w, coord_b) = b.linear("coord", 8, d);
        let n_tokens = bg.tokens + fg.tokens + 1;
        let pos = b.alloc("ffm.pos".into(), &[n_tokens, d], Init::Uniform(EMBED_INIT));
        let ffm = (0..cfg.ffm_layers)
            .map(|l| b.encoder(&format!("ffm.layer{l}"), d, d_ff))
            .collect();
        let step = b.alloc("agent.step".into(), &[HISTORY, d], Init::Uniform(EMBED_INIT));
        let agent = (0..cfg.agent_layers)
            .map(|l| b.encoder(&format!("agent.layer{l}"), d, d_ff))
            .collect();
        let head_w = b.alloc("head.w".into(), &[d, N_ACTIONS], Init::Const(0.0));
        let head_b = b.alloc("head.b".into(), &[N_ACTIONS], Init::Const(0.0));
        Plan {
            d,
            heads: cfg.n_heads,
            d_ff,
            bg,
            fg,
            coord_w,
            coord_b,
            n_tokens,
            pos,
            ffm,
            step,
            agent,
            head_w,
            head_b,
            total: b.total,
            layout: b.layout,
            inits: b.inits,
        }
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.total];
        for &(span, init) in &self.inits {
            for v in &mut p[span.range()] {
                *v = match init {
                    Init::Uniform(bound) => T::of(rng.gen_range(-bound..=bound)),
                    Init::Const(c) => T::of(c),
                };
            }
        }
        p
    }
}
