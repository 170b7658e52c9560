//! A small pre-LN transformer classifier whose matmul weights run through
//! block-quantized linear layers.
//!
//! Shapes follow the row-major convention of the quantized layer: weights are
//! `out x in`, an input of `n x in` rows produces `n x out`. The six matmuls
//! per block (attention q/k/v/o and the two MLP layers) are quantized; token
//! embedding, position table, layer norms, and the classifier head stay
//! dense. With every quantizer masked off the same code path is exact dense
//! backprop, which the finite-difference test below pins down.
//!
//! Parameters live in one canonical order — embed, pos, then per block
//! [ln1, wq, wk, wv, wo, ln2, fc1, fc2] (weight before bias), then the final
//! norm and head. `param_metas`, `params`, `params_mut`, initialization, and
//! the gradient vector returned by `backward` all follow it.

use mxfp4::linear::{
    backward_double_quant, backward_from_masters, forward, forward_with_weight_tape, ForwardTape,
    LayerQuantConfig, LayerStreams, TapeOperand,
};
use mxfp4::rng::DetRng;
use mxfp4::{quantize_matrix, GroupAxis, Matrix};

use crate::config::{DataSection, GradientPath, ModelSection};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;
/// Tensor-id offset for parameter-initialization streams.
const INIT_STREAM_BASE: u64 = 2_000_000;
pub const QLAYERS_PER_BLOCK: usize = 6;
pub const QLAYER_NAMES: [&str; QLAYERS_PER_BLOCK] = ["wq", "wk", "wv", "wo", "fc1", "fc2"];

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    pub len: usize,
    /// Weight decay applies only to matmul weights.
    pub decay: bool,
    /// Index of the quantized layer this tensor is the weight of, if any.
    pub qid: Option<usize>,
}

// ---------------------------------------------------------------------------
// Dense pieces
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DenseLinear {
    /// out x in
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLinear {
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.w.transpose());
        add_bias(&mut y, &self.b);
        y
    }

    fn backward(&self, x: &Matrix, gy: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
        let dx = gy.matmul(&self.w);
        let dw = gy.transpose().matmul(x);
        (dx, dw, col_sums(gy))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub struct LnCache {
    xhat: Matrix,
    inv: Vec<f64>,
}

impl LayerNorm {
    fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let (n, d) = x.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv = Vec::with_capacity(n);
        let mut y = Matrix::zeros(n, d);
        for r in 0..n {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let iv = 1.0 / (var + LN_EPS).sqrt();
            inv.push(iv);
            for c in 0..d {
                let h = (x.get(r, c) - mu) * iv;
                xhat.set(r, c, h);
                y.set(r, c, self.gamma[c] * h + self.beta[c]);
            }
        }
        (y, LnCache { xhat, inv })
    }

    fn backward(&self, cache: &LnCache, gy: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
        let (n, d) = gy.shape();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dx = Matrix::zeros(n, d);
        for r in 0..n {
            let mut mean_dh = 0.0;
            let mut mean_dh_xhat = 0.0;
            for c in 0..d {
                let g = gy.get(r, c);
                let h = cache.xhat.get(r, c);
                dgamma[c] += g * h;
                dbeta[c] += g;
                let dh = g * self.gamma[c];
                mean_dh += dh;
                mean_dh_xhat += dh * h;
            }
            mean_dh /= d as f64;
            mean_dh_xhat /= d as f64;
            for c in 0..d {
                let dh = gy.get(r, c) * self.gamma[c];
                let h = cache.xhat.get(r, c);
                dx.set(r, c, cache.inv[r] * (dh - mean_dh - h * mean_dh_xhat));
            }
        }
        (dx, dgamma, dbeta)
    }
}

// ---------------------------------------------------------------------------
// Quantized linear layer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct QuantLinear {
    /// Stream id; unique per quantized layer across the model.
    pub qid: u64,
    /// out x in
    pub w: Matrix,
    pub b: Vec<f64>,
}

pub struct QuantCache {
    /// Master input, kept for the masters gradient path.
    pub x: Matrix,
    pub tape: ForwardTape,
}

impl QuantCache {
    /// The weight operand actually used in the forward matmul, out x in.
    pub fn weight_operand(&self) -> Matrix {
        self.tape.w_t.to_dense().transpose()
    }
}

impl QuantLinear {
    fn forward(
        &self,
        x: &Matrix,
        cfg: &LayerQuantConfig,
        seed: u64,
        step: u64,
        guide: Option<&Matrix>,
    ) -> Result<(Matrix, QuantCache)> {
        let streams = LayerStreams::new(seed, self.qid, step);
        let (mut y, tape) = match guide {
            Some(g) if cfg.mask.q2 => {
                let q = mxfp4::ema::quantize_matrix_ema(
                    &self.w.transpose(),
                    &g.transpose(),
                    GroupAxis::ColGroups,
                    cfg.forward_format,
                    cfg.scale_rule,
                )?;
                forward_with_weight_tape(x, TapeOperand::Quantized(q), cfg, &streams)?
            }
            _ => forward(x, &self.w, cfg, &streams)?,
        };
        add_bias(&mut y, &self.b);
        Ok((y, QuantCache { x: x.clone(), tape }))
    }

    fn backward(
        &self,
        cache: &QuantCache,
        gy: &Matrix,
        cfg: &LayerQuantConfig,
        path: GradientPath,
        seed: u64,
        step: u64,
    ) -> Result<(Matrix, Matrix, Vec<f64>)> {
        let streams = LayerStreams::new(seed, self.qid, step);
        let (dx, dw) = match path {
            GradientPath::Tape => backward_double_quant(gy, &cache.tape, cfg, &streams)?,
            GradientPath::Masters => backward_from_masters(gy, &cache.x, &self.w, cfg, &streams)?,
        };
        Ok((dx, dw, col_sums(gy)))
    }
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: QuantLinear,
    pub wk: QuantLinear,
    pub wv: QuantLinear,
    pub wo: QuantLinear,
    pub ln2: LayerNorm,
    pub fc1: QuantLinear,
    pub fc2: QuantLinear,
    tokens: usize,
    heads: usize,
}

pub struct BlockCache {
    ln1: LnCache,
    q_c: QuantCache,
    k_c: QuantCache,
    v_c: QuantCache,
    /// Softmax matrices, one T x T per (sample, head), sample-major.
    attn: Vec<Matrix>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    wo_c: QuantCache,
    ln2: LnCache,
    fc1_c: QuantCache,
    /// fc1 output before the nonlinearity.
    relu_in: Matrix,
    fc2_c: QuantCache,
}

impl BlockCache {
    pub fn qcache(&self, slot: usize) -> &QuantCache {
        match slot {
            0 => &self.q_c,
            1 => &self.k_c,
            2 => &self.v_c,
            3 => &self.wo_c,
            4 => &self.fc1_c,
            5 => &self.fc2_c,
            _ => panic!("quantized-layer slot {slot} out of range"),
        }
    }

    pub fn min_abs_relu_input(&self) -> f64 {
        self.relu_in.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

struct QuantCtx<'a> {
    cfg: &'a LayerQuantConfig,
    seed: u64,
    step: u64,
    /// EMA guide per quantized layer of this block, when enabled.
    guides: Option<&'a [&'a Matrix]>,
}

impl QuantCtx<'_> {
    fn guide(&self, slot: usize) -> Option<&Matrix> {
        self.guides.map(|g| g[slot])
    }
}

impl Block {
    fn forward(&self, h: &Matrix, ctx: &QuantCtx) -> Result<(Matrix, BlockCache)> {
        let (a_in, ln1_c) = self.ln1.forward(h);
        let (q, q_c) = self.wq.forward(&a_in, ctx.cfg, ctx.seed, ctx.step, ctx.guide(0))?;
        let (k, k_c) = self.wk.forward(&a_in, ctx.cfg, ctx.seed, ctx.step, ctx.guide(1))?;
        let (v, v_c) = self.wv.forward(&a_in, ctx.cfg, ctx.seed, ctx.step, ctx.guide(2))?;

        let width = h.cols();
        let dh = width / self.heads;
        let batch = h.rows() / self.tokens;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut z = Matrix::zeros(h.rows(), width);
        let mut attn = Vec::with_capacity(batch * self.heads);
        for s in 0..batch {
            for hd in 0..self.heads {
                let qs = head_slice(&q, s, self.tokens, hd, dh);
                let ks = head_slice(&k, s, self.tokens, hd, dh);
                let vs = head_slice(&v, s, self.tokens, hd, dh);
                let a = softmax_rows(&qs.matmul(&ks.transpose()).scale(scale));
                let zs = a.matmul(&vs);
                head_write(&mut z, &zs, s, self.tokens, hd, dh);
                attn.push(a);
            }
        }
        let (attn_out, wo_c) = self.wo.forward(&z, ctx.cfg, ctx.seed, ctx.step, ctx.guide(3))?;
        let h1 = h.add(&attn_out);

        let (m_in, ln2_c) = self.ln2.forward(&h1);
        let (f1, fc1_c) = self.fc1.forward(&m_in, ctx.cfg, ctx.seed, ctx.step, ctx.guide(4))?;
        let r = relu(&f1);
        let (f2, fc2_c) = self.fc2.forward(&r, ctx.cfg, ctx.seed, ctx.step, ctx.guide(5))?;
        let out = h1.add(&f2);

        Ok((
            out,
            BlockCache {
                ln1: ln1_c,
                q_c,
                k_c,
                v_c,
                attn,
                q,
                k,
                v,
                wo_c,
                ln2: ln2_c,
                fc1_c,
                relu_in: f1,
                fc2_c,
            },
        ))
    }

    /// Returns the gradient w.r.t. the block input plus this block's 16
    /// parameter gradients in canonical order.
    fn backward(
        &self,
        cache: &BlockCache,
        d_out: &Matrix,
        ctx: &QuantCtx,
        path: GradientPath,
    ) -> Result<(Matrix, Vec<Vec<f64>>)> {
        // MLP branch.
        let (dr, dw_fc2, db_fc2) =
            self.fc2.backward(&cache.fc2_c, d_out, ctx.cfg, path, ctx.seed, ctx.step)?;
        let df1 = relu_backward(&cache.relu_in, &dr);
        let (dm_in, dw_fc1, db_fc1) =
            self.fc1.backward(&cache.fc1_c, &df1, ctx.cfg, path, ctx.seed, ctx.step)?;
        let (dh1_mlp, dg_ln2, db_ln2) = self.ln2.backward(&cache.ln2, &dm_in);
        let dh1 = d_out.add(&dh1_mlp);

        // Attention branch.
        let (dz, dw_wo, db_wo) =
            self.wo.backward(&cache.wo_c, &dh1, ctx.cfg, path, ctx.seed, ctx.step)?;
        let width = d_out.cols();
        let dh = width / self.heads;
        let batch = d_out.rows() / self.tokens;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(d_out.rows(), width);
        let mut dk = Matrix::zeros(d_out.rows(), width);
        let mut dv = Matrix::zeros(d_out.rows(), width);
        for s in 0..batch {
            for hd in 0..self.heads {
                let a = &cache.attn[s * self.heads + hd];
                let dzs = head_slice(&dz, s, self.tokens, hd, dh);
                let qs = head_slice(&cache.q, s, self.tokens, hd, dh);
                let ks = head_slice(&cache.k, s, self.tokens, hd, dh);
                let vs = head_slice(&cache.v, s, self.tokens, hd, dh);
                let da = dzs.matmul(&vs.transpose());
                let ds = softmax_backward(a, &da).scale(scale);
                head_write(&mut dq, &ds.matmul(&ks), s, self.tokens, hd, dh);
                head_write(&mut dk, &ds.transpose().matmul(&qs), s, self.tokens, hd, dh);
                head_write(&mut dv, &a.transpose().matmul(&dzs), s, self.tokens, hd, dh);
            }
        }
        let (dxq, dw_wq, db_wq) =
            self.wq.backward(&cache.q_c, &dq, ctx.cfg, path, ctx.seed, ctx.step)?;
        let (dxk, dw_wk, db_wk) =
            self.wk.backward(&cache.k_c, &dk, ctx.cfg, path, ctx.seed, ctx.step)?;
        let (dxv, dw_wv, db_wv) =
            self.wv.backward(&cache.v_c, &dv, ctx.cfg, path, ctx.seed, ctx.step)?;
        let da_in = dxq.add(&dxk).add(&dxv);
        let (dh_attn, dg_ln1, db_ln1) = self.ln1.backward(&cache.ln1, &da_in);
        let dh_total = dh1.add(&dh_attn);

        let grads = vec![
            dg_ln1,
            db_ln1,
            dw_wq.data().to_vec(),
            db_wq,
            dw_wk.data().to_vec(),
            db_wk,
            dw_wv.data().to_vec(),
            db_wv,
            dw_wo.data().to_vec(),
            db_wo,
            dg_ln2,
            db_ln2,
            dw_fc1.data().to_vec(),
            db_fc1,
            dw_fc2.data().to_vec(),
            db_fc2,
        ];
        Ok((dh_total, grads))
    }

    fn qlinear(&self, slot: usize) -> &QuantLinear {
        match slot {
            0 => &self.wq,
            1 => &self.wk,
            2 => &self.wv,
            3 => &self.wo,
            4 => &self.fc1,
            5 => &self.fc2,
            _ => panic!("quantized-layer slot {slot} out of range"),
        }
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Model {
    pub embed: DenseLinear,
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub lnf: LayerNorm,
    pub head: DenseLinear,
    tokens: usize,
    token_dim: usize,
    width: usize,
    classes: usize,
}

pub struct ModelCache {
    tok: Matrix,
    pub blocks: Vec<BlockCache>,
    lnf: LnCache,
    pooled: Matrix,
}

impl ModelCache {
    /// Cache of quantized layer `qid` (block-major, slot order
    /// wq, wk, wv, wo, fc1, fc2).
    pub fn qcache(&self, qid: usize) -> &QuantCache {
        self.blocks[qid / QLAYERS_PER_BLOCK].qcache(qid % QLAYERS_PER_BLOCK)
    }
}

impl Model {
    pub fn new(seed: u64, model: &ModelSection, data: &DataSection) -> Self {
        let width = model.width;
        let hidden = width * model.mlp_ratio;
        // Dedicated init stream per tensor, in declaration order; zero-init
        // tensors still reserve a stream id so adding one later can't shift
        // every weight after it.
        struct Init {
            seed: u64,
            idx: u64,
        }
        impl Init {
            fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
                let mut rng = DetRng::for_stream(self.seed, INIT_STREAM_BASE + self.idx, 0, 0);
                self.idx += 1;
                Matrix::from_fn(rows, cols, |_, _| 0.02 * rng.normal())
            }
            fn skip(&mut self, n: u64) {
                self.idx += n;
            }
            fn qlinear(&mut self, qid: usize, rows: usize, cols: usize) -> QuantLinear {
                let w = self.matrix(rows, cols);
                self.skip(1); // bias
                QuantLinear { qid: qid as u64, w, b: vec![0.0; rows] }
            }
        }
        let mut init = Init { seed, idx: 0 };

        let embed = DenseLinear { w: init.matrix(width, data.token_dim), b: vec![0.0; width] };
        init.skip(1); // embed bias (zeros, stream reserved)
        let pos = init.matrix(data.tokens, width);
        let mut blocks = Vec::with_capacity(model.depth);
        for bi in 0..model.depth {
            init.skip(2); // ln1 gamma/beta
            let base = bi * QLAYERS_PER_BLOCK;
            let wq = init.qlinear(base, width, width);
            let wk = init.qlinear(base + 1, width, width);
            let wv = init.qlinear(base + 2, width, width);
            let wo = init.qlinear(base + 3, width, width);
            init.skip(2); // ln2 gamma/beta
            let fc1 = init.qlinear(base + 4, hidden, width);
            let fc2 = init.qlinear(base + 5, width, hidden);
            blocks.push(Block {
                ln1: LayerNorm { gamma: vec![1.0; width], beta: vec![0.0; width] },
                wq,
                wk,
                wv,
                wo,
                ln2: LayerNorm { gamma: vec![1.0; width], beta: vec![0.0; width] },
                fc1,
                fc2,
                tokens: data.tokens,
                heads: model.heads,
            });
        }
        init.skip(2); // final norm gamma/beta
        let head = DenseLinear { w: init.matrix(data.classes, width), b: vec![0.0; data.classes] };
        Model {
            embed,
            pos,
            blocks,
            lnf: LayerNorm { gamma: vec![1.0; width], beta: vec![0.0; width] },
            head,
            tokens: data.tokens,
            token_dim: data.token_dim,
            width,
            classes: data.classes,
        }
    }

    pub fn qlayer_count(&self) -> usize {
        self.blocks.len() * QLAYERS_PER_BLOCK
    }

    pub fn qlayer(&self, qid: usize) -> &QuantLinear {
        self.blocks[qid / QLAYERS_PER_BLOCK].qlinear(qid % QLAYERS_PER_BLOCK)
    }

    pub fn qlayer_name(&self, qid: usize) -> String {
        format!("block{}.{}", qid / QLAYERS_PER_BLOCK, QLAYER_NAMES[qid % QLAYERS_PER_BLOCK])
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// logits (batch x classes) plus everything backward needs. `guides`,
    /// when present, holds one guide matrix per quantized layer in qid order.
    pub fn forward(
        &self,
        x: &Matrix,
        cfg: &LayerQuantConfig,
        seed: u64,
        step: u64,
        guides: Option<&[&Matrix]>,
    ) -> Result<(Matrix, ModelCache)> {
        assert_eq!(x.cols(), self.tokens * self.token_dim, "input feature width");
        if let Some(g) = guides {
            assert_eq!(g.len(), self.qlayer_count(), "one guide per quantized layer");
        }
        let batch = x.rows();
        let bt = batch * self.tokens;
        let tok = Matrix::from_fn(bt, self.token_dim, |r, c| {
            x.get(r / self.tokens, (r % self.tokens) * self.token_dim + c)
        });
        let mut h = self.embed.forward(&tok);
        for r in 0..bt {
            for c in 0..self.width {
                h.set(r, c, h.get(r, c) + self.pos.get(r % self.tokens, c));
            }
        }
        let mut bcaches = Vec::with_capacity(self.blocks.len());
        for (bi, blk) in self.blocks.iter().enumerate() {
            let ctx = QuantCtx {
                cfg,
                seed,
                step,
                guides: guides.map(|g| &g[bi * QLAYERS_PER_BLOCK..(bi + 1) * QLAYERS_PER_BLOCK]),
            };
            let (h2, bc) = blk.forward(&h, &ctx)?;
            h = h2;
            bcaches.push(bc);
        }
        let (hn, lnf_c) = self.lnf.forward(&h);
        let pooled = Matrix::from_fn(batch, self.width, |s, c| {
            let mut acc = 0.0;
            for t in 0..self.tokens {
                acc += hn.get(s * self.tokens + t, c);
            }
            acc / self.tokens as f64
        });
        let logits = self.head.forward(&pooled);
        Ok((logits, ModelCache { tok, blocks: bcaches, lnf: lnf_c, pooled }))
    }

    /// Parameter gradients in canonical order.
    pub fn backward(
        &self,
        cache: &ModelCache,
        dlogits: &Matrix,
        cfg: &LayerQuantConfig,
        path: GradientPath,
        seed: u64,
        step: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let batch = dlogits.rows();
        let bt = batch * self.tokens;
        let (dpooled, dw_head, db_head) = self.head.backward(&cache.pooled, dlogits);
        let mut dh = Matrix::from_fn(bt, self.width, |r, c| {
            dpooled.get(r / self.tokens, c) / self.tokens as f64
        });
        let (dxn, dg_lnf, db_lnf) = self.lnf.backward(&cache.lnf, &dh);
        dh = dxn;

        let mut block_grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.blocks.len());
        for (bi, blk) in self.blocks.iter().enumerate().rev() {
            let ctx = QuantCtx { cfg, seed, step, guides: None };
            let (dprev, grads) = blk.backward(&cache.blocks[bi], &dh, &ctx, path)?;
            dh = dprev;
            block_grads.push(grads);
        }
        block_grads.reverse();

        // Position table gets the summed gradient over samples; the embedding
        // backward consumes the same dh.
        let mut dpos = vec![0.0; self.tokens * self.width];
        for r in 0..bt {
            for c in 0..self.width {
                dpos[(r % self.tokens) * self.width + c] += dh.get(r, c);
            }
        }
        let (_, dw_embed, db_embed) = self.embed.backward(&cache.tok, &dh);

        let mut out = Vec::with_capacity(3 + self.blocks.len() * 16 + 4);
        out.push(dw_embed.data().to_vec());
        out.push(db_embed);
        out.push(dpos);
        for grads in block_grads {
            out.extend(grads);
        }
        out.push(dg_lnf);
        out.push(db_lnf);
        out.push(dw_head.data().to_vec());
        out.push(db_head);
        Ok(out)
    }

    pub fn param_metas(&self) -> Vec<ParamMeta> {
        let meta = |name: String, len: usize, decay: bool, qid: Option<usize>| ParamMeta {
            name,
            len,
            decay,
            qid,
        };
        let mut out = Vec::new();
        out.push(meta("embed.w".into(), self.embed.w.data().len(), true, None));
        out.push(meta("embed.b".into(), self.embed.b.len(), false, None));
        out.push(meta("pos".into(), self.pos.data().len(), false, None));
        for (bi, blk) in self.blocks.iter().enumerate() {
            out.push(meta(format!("block{bi}.ln1.g"), blk.ln1.gamma.len(), false, None));
            out.push(meta(format!("block{bi}.ln1.b"), blk.ln1.beta.len(), false, None));
            for slot in 0..QLAYERS_PER_BLOCK {
                if slot == 4 {
                    out.push(meta(format!("block{bi}.ln2.g"), blk.ln2.gamma.len(), false, None));
                    out.push(meta(format!("block{bi}.ln2.b"), blk.ln2.beta.len(), false, None));
                }
                let q = blk.qlinear(slot);
                let qid = bi * QLAYERS_PER_BLOCK + slot;
                let name = self.qlayer_name(qid);
                out.push(meta(format!("{name}.w"), q.w.data().len(), true, Some(qid)));
                out.push(meta(format!("{name}.b"), q.b.len(), false, None));
            }
        }
        out.push(meta("lnf.g".into(), self.lnf.gamma.len(), false, None));
        out.push(meta("lnf.b".into(), self.lnf.beta.len(), false, None));
        out.push(meta("head.w".into(), self.head.w.data().len(), true, None));
        out.push(meta("head.b".into(), self.head.b.len(), false, None));
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.push(self.embed.w.data());
        out.push(&self.embed.b);
        out.push(self.pos.data());
        for blk in &self.blocks {
            out.push(&blk.ln1.gamma);
            out.push(&blk.ln1.beta);
            out.push(blk.wq.w.data());
            out.push(&blk.wq.b);
            out.push(blk.wk.w.data());
            out.push(&blk.wk.b);
            out.push(blk.wv.w.data());
            out.push(&blk.wv.b);
            out.push(blk.wo.w.data());
            out.push(&blk.wo.b);
            out.push(&blk.ln2.gamma);
            out.push(&blk.ln2.beta);
            out.push(blk.fc1.w.data());
            out.push(&blk.fc1.b);
            out.push(blk.fc2.w.data());
            out.push(&blk.fc2.b);
        }
        out.push(&self.lnf.gamma);
        out.push(&self.lnf.beta);
        out.push(self.head.w.data());
        out.push(&self.head.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.embed.w.data_mut());
        out.push(&mut self.embed.b);
        out.push(self.pos.data_mut());
        for blk in &mut self.blocks {
            out.push(&mut blk.ln1.gamma);
            out.push(&mut blk.ln1.beta);
            out.push(blk.wq.w.data_mut());
            out.push(&mut blk.wq.b);
            out.push(blk.wk.w.data_mut());
            out.push(&mut blk.wk.b);
            out.push(blk.wv.w.data_mut());
            out.push(&mut blk.wv.b);
            out.push(blk.wo.w.data_mut());
            out.push(&mut blk.wo.b);
            out.push(&mut blk.ln2.gamma);
            out.push(&mut blk.ln2.beta);
            out.push(blk.fc1.w.data_mut());
            out.push(&mut blk.fc1.b);
            out.push(blk.fc2.w.data_mut());
            out.push(&mut blk.fc2.b);
        }
        out.push(&mut self.lnf.gamma);
        out.push(&mut self.lnf.beta);
        out.push(self.head.w.data_mut());
        out.push(&mut self.head.b);
        out
    }

    /// The quantized weight each active layer would publish right now, using
    /// deterministic nearest rounding on the current masters (the inference
    /// view of the network).
    pub fn quantized_weight_view(&self, qid: usize, cfg: &LayerQuantConfig) -> Result<Matrix> {
        let w = &self.qlayer(qid).w;
        if !cfg.mask.q2 {
            return Ok(w.clone());
        }
        let q = quantize_matrix(
            &w.transpose(),
            GroupAxis::ColGroups,
            cfg.forward_format,
            cfg.scale_rule,
            mxfp4::Rounding::Deterministic,
            &LayerStreams::new(0, qid as u64, 0).quantizer(mxfp4::linear::QuantizerSlot::Q2),
        )?;
        Ok(q.dequantize().transpose())
    }
}

// ---------------------------------------------------------------------------
// Loss and helpers
// ---------------------------------------------------------------------------

/// Mean cross entropy and its logits gradient (already divided by batch).
pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (n, k) = logits.shape();
    assert_eq!(n, labels.len());
    let mut dl = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        loss += mx + denom.ln() - row[labels[r]];
        for c in 0..k {
            let p = (row[c] - mx).exp() / denom;
            dl.set(r, c, (p - f64::from(u8::from(c == labels[r]))) / n as f64);
        }
    }
    (loss / n as f64, dl)
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let n = logits.rows();
    let hits = (0..n)
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best == labels[r]
        })
        .count();
    hits as f64 / n as f64
}

fn add_bias(y: &mut Matrix, b: &[f64]) {
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            y.set(r, c, y.get(r, c) + b[c]);
        }
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += m.get(r, c);
        }
    }
    out
}

fn relu(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c).max(0.0))
}

fn relu_backward(x: &Matrix, gy: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| if x.get(r, c) > 0.0 { gy.get(r, c) } else { 0.0 })
}

fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let row = s.row(r);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        for c in 0..s.cols() {
            out.set(r, c, (s.get(r, c) - mx).exp() / denom);
        }
    }
    out
}

/// dS for A = softmax(S): A .* (dA - rowsum(dA .* A)).
fn softmax_backward(a: &Matrix, da: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let dot: f64 = (0..a.cols()).map(|c| da.get(r, c) * a.get(r, c)).sum();
        for c in 0..a.cols() {
            out.set(r, c, a.get(r, c) * (da.get(r, c) - dot));
        }
    }
    out
}

fn head_slice(m: &Matrix, sample: usize, tokens: usize, head: usize, dh: usize) -> Matrix {
    Matrix::from_fn(tokens, dh, |r, c| m.get(sample * tokens + r, head * dh + c))
}

fn head_write(dst: &mut Matrix, src: &Matrix, sample: usize, tokens: usize, head: usize, dh: usize) {
    for r in 0..tokens {
        for c in 0..dh {
            dst.set(sample * tokens + r, head * dh + c, src.get(r, c));
        }
    }
}
