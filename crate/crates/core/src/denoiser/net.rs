use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ConditioningInput, ModelConfig, ParamSet};
use crate::autograd::{AttnSpec, Mat, Real, Tape, Var};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayer {
    attn: AttnIdx,
    ln1: LnIdx,
    ff: FfIdx,
    ln2: LnIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayer {
    self_attn: AttnIdx,
    ln1: LnIdx,
    cross: AttnIdx,
    ln2: LnIdx,
    ff: FfIdx,
    ln3: LnIdx,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Parameter indices of every model component.
#[derive(Debug, Clone)]
pub struct Layout {
    tok: usize,
    pos: usize,
    elem: usize,
    count: usize,
    slot_pos: usize,
    bit: usize,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    out_w: usize,
    out_b: usize,
    entries: Vec<(String, usize, usize, Init)>,
}

struct Builder {
    entries: Vec<(String, usize, usize, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.entries.push((name, rows, cols, init));
        self.entries.len() - 1
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(format!("{p}.wq"), d, d, Init::Normal),
            bq: self.add(format!("{p}.bq"), 1, d, Init::Zero),
            wk: self.add(format!("{p}.wk"), d, d, Init::Normal),
            bk: self.add(format!("{p}.bk"), 1, d, Init::Zero),
            wv: self.add(format!("{p}.wv"), d, d, Init::Normal),
            bv: self.add(format!("{p}.bv"), 1, d, Init::Zero),
            wo: self.add(format!("{p}.wo"), d, d, Init::Normal),
            bo: self.add(format!("{p}.bo"), 1, d, Init::Zero),
        }
    }

    fn ff(&mut self, p: &str, d: usize, dff: usize) -> FfIdx {
        FfIdx {
            w1: self.add(format!("{p}.w1"), d, dff, Init::Normal),
            b1: self.add(format!("{p}.b1"), 1, dff, Init::Zero),
            w2: self.add(format!("{p}.w2"), dff, d, Init::Normal),
            b2: self.add(format!("{p}.b2"), 1, d, Init::Zero),
        }
    }

    fn ln(&mut self, p: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{p}.gamma"), 1, d, Init::One),
            b: self.add(format!("{p}.beta"), 1, d, Init::Zero),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder { entries: Vec::new() };
        let tok = b.add("tok_emb".into(), cfg.vocab_size, d, Init::Normal);
        let pos = b.add("pos_emb".into(), cfg.max_len, d, Init::Normal);
        let elem = b.add("formula.elem_emb".into(), cfg.n_elements, d, Init::Normal);
        let count = b.add("formula.count_emb".into(), cfg.max_count + 1, d, Init::Normal);
        let slot_pos = b.add("formula.pos_emb".into(), cfg.n_elements, d, Init::Normal);
        let bit = b.add("fp.bit_emb".into(), cfg.fp_bits, d, Init::Normal);
        let enc = (0..cfg.fp_attn_layers)
            .map(|i| {
                let p = format!("fp.layer{i}");
                EncLayer {
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                }
            })
            .collect();
        let dec = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("block{i}");
                DecLayer {
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    cross: b.attn(&format!("{p}.cross_attn"), d),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
                    ln3: b.ln(&format!("{p}.ln3"), d),
                }
            })
            .collect();
        let out_w = b.add("out.w".into(), d, cfg.vocab_size, Init::Normal);
        let out_b = b.add("out.b".into(), 1, cfg.vocab_size, Init::Zero);
        Layout {
            tok,
            pos,
            elem,
            count,
            slot_pos,
            bit,
            enc,
            dec,
            out_w,
            out_b,
            entries: b.entries,
        }
    }

    pub fn out_w_index(&self) -> usize {
        self.out_w
    }

    pub fn out_b_index(&self) -> usize {
        self.out_b
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `(name, rows, cols)` for every parameter in layout order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    Layout::new(cfg)
        .entries
        .into_iter()
        .map(|(n, r, c, _)| (n, r, c))
        .collect()
}

pub(crate) fn init_params<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamSetOf<T> {
    let normal = Normal::new(0.0, 0.02).unwrap();
    let lay = Layout::new(cfg);
    let mut names = Vec::new();
    let mut mats = Vec::new();
    for (name, r, c, init) in lay.entries {
        let data = match init {
            Init::Normal => (0..r * c).map(|_| T::lit(normal.sample(rng))).collect(),
            Init::Zero => vec![T::zero(); r * c],
            Init::One => vec![T::one(); r * c],
        };
        names.push(name);
        mats.push(Mat::from_vec(r, c, data));
    }
    ParamSetOf { names, mats }
}

pub(crate) struct ParamSetOf<T> {
    pub names: Vec<String>,
    pub mats: Vec<Mat<T>>,
}

impl From<ParamSetOf<f32>> for ParamSet {
    fn from(p: ParamSetOf<f32>) -> Self {
        ParamSet {
            names: p.names,
            mats: p.mats,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DropCfg {
    pub p: f64,
    pub p_fp: f64,
}

pub(crate) enum CondSource<'a, T> {
    PerExample(&'a [&'a ConditioningInput]),
    /// One precomputed conditioning sequence shared by every row of the batch.
    Shared(&'a Mat<T>, &'a [bool]),
}

/// Forward-pass builder over a borrowed parameter list.
pub(crate) struct Net<'a, T: Real> {
    cfg: &'a ModelConfig,
    lay: &'a Layout,
    src: &'a [Mat<T>],
    trainable: bool,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(cfg: &'a ModelConfig, lay: &'a Layout, src: &'a [Mat<T>], trainable: bool) -> Self {
        Net {
            cfg,
            lay,
            src,
            trainable,
            vars: vec![None; src.len()],
        }
    }

    fn p(&mut self, tape: &mut Tape<T>, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = if self.trainable {
            tape.param(i, self.src[i].clone())
        } else {
            tape.input(self.src[i].clone())
        };
        self.vars[i] = Some(v);
        v
    }

    fn dropout<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, x: Var, drop: Option<DropCfg>, rng: &mut R) -> Var {
        match drop {
            Some(d) if d.p > 0.0 => {
                let n = tape.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= d.p).collect();
                tape.dropout(x, &keep, d.p)
            }
            _ => x,
        }
    }

    fn linear(&mut self, tape: &mut Tape<T>, x: Var, w: usize, b: usize) -> Var {
        let wv = self.p(tape, w);
        let bv = self.p(tape, b);
        let h = tape.matmul(x, wv, false);
        tape.add_bias(h, bv)
    }

    fn layer_norm(&mut self, tape: &mut Tape<T>, x: Var, ln: LnIdx) -> Var {
        let g = self.p(tape, ln.g);
        let b = self.p(tape, ln.b);
        tape.layer_norm(x, g, b)
    }

    fn mha(&mut self, tape: &mut Tape<T>, a: AttnIdx, xq: Var, xkv: Var, spec: AttnSpec) -> Var {
        let q = self.linear(tape, xq, a.wq, a.bq);
        let k = self.linear(tape, xkv, a.wk, a.bk);
        let v = self.linear(tape, xkv, a.wv, a.bv);
        let o = tape.attention(q, k, v, spec);
        self.linear(tape, o, a.wo, a.bo)
    }

    fn feed_forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        f: FfIdx,
        x: Var,
        drop: Option<DropCfg>,
        rng: &mut R,
    ) -> Var {
        let h = self.linear(tape, x, f.w1, f.b1);
        let h = tape.gelu(h);
        let h = self.dropout(tape, h, drop, rng);
        self.linear(tape, h, f.w2, f.b2)
    }

    /// Post-norm residual: `LN(x + dropout(sub))`.
    fn residual<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        sub: Var,
        ln: LnIdx,
        drop: Option<DropCfg>,
        rng: &mut R,
    ) -> Var {
        let sub = self.dropout(tape, sub, drop, rng);
        let s = tape.add(x, sub);
        self.layer_norm(tape, s, ln)
    }

    /// Concatenated `[formula slots; fingerprint bits]` per example and the
    /// matching key mask.
    pub fn encode_cond<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        conds: &[&ConditioningInput],
        drop: Option<DropCfg>,
        rng: &mut R,
    ) -> (Var, Vec<bool>) {
        let b = conds.len();
        let ne = self.cfg.n_elements;
        let mut slots = Vec::with_capacity(b * ne);
        let mut counts = Vec::with_capacity(b * ne);
        let mut fmask = Vec::with_capacity(b * ne);
        for c in conds {
            for (s, &n) in c.formula_counts.iter().enumerate() {
                slots.push(s);
                counts.push((n as usize).min(self.cfg.max_count));
                fmask.push(n > 0);
            }
        }
        let elem = self.p(tape, self.lay.elem);
        let cnt = self.p(tape, self.lay.count);
        let spos = self.p(tape, self.lay.slot_pos);
        let e = tape.gather(elem, &slots);
        let c = tape.gather(cnt, &counts);
        let s = tape.gather(spos, &slots);
        let zc = tape.add(e, c);
        let zc = tape.add(zc, s);
        let zc = self.dropout(tape, zc, drop, rng);

        // whole-fingerprint dropout, decided per example
        let bits: Vec<&[u32]> = conds
            .iter()
            .map(|c| match drop {
                Some(d) if d.p_fp > 0.0 && rng.random::<f64>() < d.p_fp => &[][..],
                _ => &c.active_bits[..],
            })
            .collect();
        let nf = bits.iter().map(|b| b.len()).max().unwrap_or(0);
        if nf == 0 {
            return (zc, fmask);
        }
        let mut ids = Vec::with_capacity(b * nf);
        let mut bmask = Vec::with_capacity(b * nf);
        for bs in &bits {
            for j in 0..nf {
                ids.push(bs.get(j).map_or(0, |&x| x as usize));
                bmask.push(j < bs.len());
            }
        }
        let table = self.p(tape, self.lay.bit);
        let mut x = tape.gather(table, &ids);
        x = self.dropout(tape, x, drop, rng);
        for li in 0..self.lay.enc.len() {
            let l = self.lay.enc[li].clone();
            let spec = AttnSpec {
                batch: b,
                q_len: nf,
                k_len: nf,
                heads: self.cfg.n_heads,
                shared_kv: false,
                key_mask: bmask.clone(),
            };
            let a = self.mha(tape, l.attn, x, x, spec);
            x = self.residual(tape, x, a, l.ln1, drop, rng);
            let f = self.feed_forward(tape, l.ff, x, drop, rng);
            x = self.residual(tape, x, f, l.ln2, drop, rng);
        }
        let z = tape.concat_seq(zc, x, b, ne, nf);
        let mut mask = Vec::with_capacity(b * (ne + nf));
        for i in 0..b {
            mask.extend_from_slice(&fmask[i * ne..(i + 1) * ne]);
            mask.extend_from_slice(&bmask[i * nf..(i + 1) * nf]);
        }
        (z, mask)
    }

    /// Logits for a padded batch, `[batch * max_seq_len, vocab]`.
    pub fn logits<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        seqs: &[Vec<TokenId>],
        cond: CondSource<'_, T>,
        drop: Option<DropCfg>,
        rng: &mut R,
    ) -> Var {
        let b = seqs.len();
        let lmax = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let (z, cmask, shared) = match cond {
            CondSource::PerExample(conds) => {
                let (z, m) = self.encode_cond(tape, conds, drop, rng);
                (z, m, false)
            }
            CondSource::Shared(z, m) => (tape.input(z.clone()), m.to_vec(), true),
        };
        let kv_batch = if shared { 1 } else { b };
        let k_len = cmask.len() / kv_batch;

        let mut ids = Vec::with_capacity(b * lmax);
        let mut pos = Vec::with_capacity(b * lmax);
        let mut smask = Vec::with_capacity(b * lmax);
        for s in seqs {
            for j in 0..lmax {
                ids.push(s.get(j).map_or(0, |&t| t as usize));
                pos.push(j);
                smask.push(j < s.len());
            }
        }
        let tok = self.p(tape, self.lay.tok);
        let pe = self.p(tape, self.lay.pos);
        let te = tape.gather(tok, &ids);
        let pe = tape.gather(pe, &pos);
        let mut x = tape.add(te, pe);
        x = self.dropout(tape, x, drop, rng);
        for li in 0..self.lay.dec.len() {
            let l = self.lay.dec[li].clone();
            let spec = AttnSpec {
                batch: b,
                q_len: lmax,
                k_len: lmax,
                heads: self.cfg.n_heads,
                shared_kv: false,
                key_mask: smask.clone(),
            };
            let a = self.mha(tape, l.self_attn, x, x, spec);
            x = self.residual(tape, x, a, l.ln1, drop, rng);
            let spec = AttnSpec {
                batch: b,
                q_len: lmax,
                k_len,
                heads: self.cfg.n_heads,
                shared_kv: shared,
                key_mask: cmask.clone(),
            };
            let c = self.mha(tape, l.cross, x, z, spec);
            x = self.residual(tape, x, c, l.ln2, drop, rng);
            let f = self.feed_forward(tape, l.ff, x, drop, rng);
            x = self.residual(tape, x, f, l.ln3, drop, rng);
        }
        self.linear(tape, x, self.lay.out_w, self.lay.out_b)
    }
}

/// Cut padded `[batch * lmax, vocab]` logits back into per-sequence blocks.
pub(crate) fn split_rows<T: Real>(m: Mat<T>, seqs: &[Vec<TokenId>]) -> Vec<Mat<T>> {
    let lmax = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let v = m.cols;
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let start = i * lmax * v;
            Mat::from_vec(s.len(), v, m.data[start..start + s.len() * v].to_vec())
        })
        .collect()
}
