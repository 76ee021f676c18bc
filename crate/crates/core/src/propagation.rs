//! Cross-modal knowledge propagation.
//!
//! Each block takes a modality's features together with the two prompts
//! addressed to it, projects the concatenation down to `d`, runs `m`
//! residual self-attention layers across the instances of the batch (with
//! missing instances excluded as keys), and projects back up into renewed
//! features and renewed prompts.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::Modality;
use crate::error::{CompError, Result};
use crate::nn::Linear;
use crate::params::{Mat, ParamId, ParamStore};
use crate::prompting::{momentum_update, prototype_attention, FrozenPrototypes, PromptGenerator};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && d % heads == 0, "heads must divide d");
        Self {
            query: Linear::new(store, &format!("{name}/q"), d, d, rng),
            key: Linear::new(store, &format!("{name}/k"), d, d, rng),
            value: Linear::new(store, &format!("{name}/v"), d, d, rng),
            output: Linear::new(store, &format!("{name}/o"), d, d, rng),
            heads,
        }
    }

    /// Scaled dot-product attention across rows. Keys of unobserved rows
    /// are set to `mask_neg`; every row still queries. Returns `None` when
    /// no row is observed, in which case the layer is skipped.
    pub fn forward(&self, g: &mut Graph, x: Var, observed: &[bool], mask_neg: f64) -> Option<Var> {
        let (n, d) = g.shape(x);
        assert_eq!(observed.len(), n, "one indicator per row");
        if !observed.iter().any(|&o| o) {
            log::debug!("self-attention skipped: no observed instance");
            return None;
        }
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let key_mask = Array2::from_shape_fn((n, n), |(_, j)| !observed[j]);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, scale);
            let logits = g.fill(logits, key_mask.clone(), mask_neg);
            let attn = g.softmax_rows(logits);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        Some(self.output.forward(g, cat))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Standalone masked attention; the caller adds the residual.
pub fn masked_self_attention(
    g: &mut Graph,
    attention: &MultiHeadAttention,
    x: Var,
    observed: &[bool],
    mask_neg: f64,
) -> Option<Var> {
    attention.forward(g, x, observed, mask_neg)
}

/// One propagation block for one host modality.
#[derive(Debug, Clone, PartialEq)]
pub struct KpBlock {
    pub down: Linear,
    pub layers: Vec<MultiHeadAttention>,
    pub up: Linear,
    pub d: usize,
    pub p: usize,
}

/// Renewed features and the two renewed prompts, in the order the prompts
/// were supplied.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub features: Var,
    pub prompts: [Var; 2],
}

impl KpBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        p: usize,
        m_msa: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let down = Linear::new(store, &format!("{name}/down"), d + 2 * p, d, rng);
        let layers = (0..m_msa)
            .map(|k| MultiHeadAttention::new(store, &format!("{name}/msa{k}"), d, heads, rng))
            .collect();
        let up = Linear::new(store, &format!("{name}/up"), d, d + 2 * p, rng);
        Self { down, layers, up, d, p }
    }

    /// `G₀ = down([Z, P¹, P²])`, `G_k = G_{k-1} + MSA(G_{k-1})`,
    /// `[Z̄, P̄¹, P̄²] = up(G_m)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        z: Var,
        prompts: [Var; 2],
        observed: &[bool],
        mask_neg: f64,
    ) -> Result<BlockOutput> {
        let (n, d) = g.shape(z);
        if d != self.d {
            return Err(CompError::Validation(format!("block expects width {}, got {d}", self.d)));
        }
        for p in prompts {
            if g.shape(p) != (n, self.p) {
                return Err(CompError::Validation(format!(
                    "prompt shape {:?}, expected ({n}, {})",
                    g.shape(p),
                    self.p
                )));
            }
        }
        if observed.len() != n {
            return Err(CompError::Validation("one indicator per row required".into()));
        }
        let cat = g.concat_cols(&[z, prompts[0], prompts[1]]);
        let mut h = self.down.forward(g, cat);
        for layer in &self.layers {
            if let Some(att) = layer.forward(g, h, observed, mask_neg) {
                h = g.add(h, att);
            }
        }
        let out = self.up.forward(g, h);
        let features = g.slice_cols(out, 0, self.d);
        let p1 = g.slice_cols(out, self.d, self.d + self.p);
        let p2 = g.slice_cols(out, self.d + self.p, self.d + 2 * self.p);
        Ok(BlockOutput {
            features,
            prompts: [p1, p2],
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.down.weight, self.down.bias];
        for l in &self.layers {
            out.extend(l.params());
        }
        out.extend([self.up.weight, self.up.bias]);
        out
    }
}

/// Values observed while running the pipeline, for inspection in tests and
/// diagnostics.
#[derive(Debug, Clone, Default)]
pub struct PipelineTrace {
    /// Prototypes read at each block, canonical modality order.
    pub prototypes: Vec<Vec<Mat>>,
    /// Momentum-blended prompts fed into each block, indexed `[block][host][slot]`.
    pub prompts: Vec<Vec<[Mat; 2]>>,
    /// Freshly generated prompts per block and source modality.
    pub fresh: Vec<Vec<Mat>>,
}

/// `L` interleaved prompt-generation and propagation blocks over the three
/// modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub blocks: Vec<[KpBlock; 3]>,
    pub generators: Vec<[PromptGenerator; 3]>,
    pub lambda: f64,
    pub mask_neg: f64,
    pub p: usize,
}

impl Propagation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        blocks: usize,
        d: usize,
        p: usize,
        m_msa: usize,
        heads: usize,
        lambda: f64,
        mask_neg: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut kp = Vec::with_capacity(blocks);
        let mut pg = Vec::with_capacity(blocks);
        for l in 0..blocks {
            pg.push(Modality::ALL.map(|m| {
                PromptGenerator::new(store, &format!("{}/pg{l}", m.name()), d, p, rng)
            }));
            kp.push(Modality::ALL.map(|m| {
                KpBlock::new(store, &format!("{}/kp{l}", m.name()), d, p, m_msa, heads, rng)
            }));
        }
        Self {
            blocks: kp,
            generators: pg,
            lambda,
            mask_neg,
            p,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Run every block. With `prototypes` the prompts use prototype
    /// attention; without, they come from the feature path alone.
    ///
    /// The prompt from `v` to host `u` at block `l` is
    /// `λ·P̄^{vu}_{l-1} + (1-λ)·P̃^v_l`, where `P̄^{vu}_{l-1}` is what `u`'s
    /// previous block returned for that slot (zero before the first block).
    pub fn run(
        &self,
        g: &mut Graph,
        features: [Var; 3],
        observed: &[Vec<bool>; 3],
        prototypes: Option<&[FrozenPrototypes; 3]>,
        mut trace: Option<&mut PipelineTrace>,
    ) -> Result<[Var; 3]> {
        let n = g.shape(features[0]).0;
        let mut current = features;
        let zero = g.constant(Mat::zeros((n, self.p)));
        let mut returned: [[Var; 2]; 3] = [[zero; 2]; 3];
        for (l, (blocks, gens)) in self.blocks.iter().zip(&self.generators).enumerate() {
            let mut fresh = [zero; 3];
            for m in Modality::ALL {
                let u = m.index();
                let attended = prototypes.map(|protos| {
                    let s = prototype_attention(g, current[u], &protos[u], &observed[u], self.mask_neg);
                    (s, &protos[u])
                });
                fresh[u] = gens[u].generate(g, attended, current[u]);
            }
            let mut next = current;
            let mut next_returned = returned;
            let mut fed = Vec::with_capacity(3);
            for m in Modality::ALL {
                let u = m.index();
                let [v, w] = m.others();
                let pv = momentum_update(g, returned[u][0], fresh[v.index()], self.lambda)?;
                let pw = momentum_update(g, returned[u][1], fresh[w.index()], self.lambda)?;
                let out = blocks[u].forward(g, current[u], [pv, pw], &observed[u], self.mask_neg)?;
                next[u] = out.features;
                next_returned[u] = out.prompts;
                fed.push([g.value(pv).clone(), g.value(pw).clone()]);
            }
            if let Some(t) = trace.as_deref_mut() {
                if let Some(protos) = prototypes {
                    t.prototypes.push(protos.iter().map(|p| g.value(p.var()).clone()).collect());
                }
                t.prompts.push(fed);
                t.fresh.push(fresh.iter().map(|&f| g.value(f).clone()).collect());
                log::trace!("block {l} done");
            }
            current = next;
            returned = next_returned;
        }
        Ok(current)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for (blocks, gens) in self.blocks.iter().zip(&self.generators) {
            for b in blocks {
                out.extend(b.params());
            }
            for p in gens {
                out.extend(p.params());
            }
        }
        out
    }
}
