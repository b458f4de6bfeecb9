use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};

use super::nn::{
    Attention, AttentionCache, Builder, Embedding, FeedForward, FeedForwardCache, LayerNorm,
    LayerNormCache, Linear, Mask, Stylize, StylizeCache, Tensors, TimeMlp, TimeMlpCache,
};
use super::{
    build_local_mask, dropout, dropout_backward, key_padding_mask, DenoiserConfig,
    DenoiserError, PARAM_PAD_INPUT, PARAM_STATES,
};
use crate::cadseq::{CommandKind, FlatParamSeq, SlotName, NUM_COMMANDS, NUM_LEVELS, PAD_OWNER};

/// Command id used for padding positions of the repeated command stream.
const CMD_PAD: usize = NUM_COMMANDS;
/// Slot id used for padding positions.
const SLOT_PAD: usize = SlotName::ALL.len();

/// Per-position conditioning derived from the clean command sequence: the
/// owning command kind, the slot name and the owning instance index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub cmds: Vec<usize>,
    pub slots: Vec<usize>,
    pub owners: Vec<usize>,
}

impl ParamLayout {
    /// Layout of every effective slot, without padding.
    pub fn from_commands(kinds: &[CommandKind]) -> Self {
        let mut out = Self {
            cmds: Vec::new(),
            slots: Vec::new(),
            owners: Vec::new(),
        };
        for (owner, &k) in kinds.iter().enumerate() {
            for &s in k.layout() {
                out.cmds.push(k.id());
                out.slots.push(s.cell() - 1);
                out.owners.push(owner);
            }
        }
        out
    }

    /// Layout of a flattened sequence, padding included.
    pub fn from_flat(flat: &FlatParamSeq) -> Self {
        let mut out = Self::from_commands(&[]);
        let offsets = flat.slot_offsets();
        for i in 0..flat.len() {
            match flat.repeated_cmds[i] {
                Some(k) => {
                    out.cmds.push(k.id());
                    out.slots.push(k.layout()[offsets[i]].cell() - 1);
                    out.owners.push(flat.owners[i]);
                }
                None => out.push_pad(),
            }
        }
        out
    }

    pub fn push_pad(&mut self) {
        self.cmds.push(CMD_PAD);
        self.slots.push(SLOT_PAD);
        self.owners.push(PAD_OWNER);
    }

    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn is_pad(&self, i: usize) -> bool {
        self.owners[i] == PAD_OWNER
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_pad(i)).collect()
    }

    /// Checks that positions group into whole commands, in order, with the
    /// slot layout of each command kind, and that padding only trails.
    pub fn check(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::LayoutMismatch(m));
        if self.cmds.len() != self.len() || self.slots.len() != self.len() {
            return bad("parallel lists differ in length".into());
        }
        let mut i = 0;
        let mut prev_owner: Option<usize> = None;
        while i < self.len() {
            if self.is_pad(i) {
                if self.owners[i..].iter().any(|&o| o != PAD_OWNER) {
                    return bad(format!("content after padding at position {i}"));
                }
                if self.cmds[i] != CMD_PAD || self.slots[i] != SLOT_PAD {
                    return bad(format!("padding position {i} carries a command"));
                }
                i += 1;
                continue;
            }
            let owner = self.owners[i];
            if prev_owner.is_some_and(|p| owner <= p) {
                return bad(format!("owner {owner} at position {i} is not increasing"));
            }
            let Some(kind) = CommandKind::from_id(self.cmds[i]) else {
                return bad(format!("unknown command id at position {i}"));
            };
            let layout = kind.layout();
            for (k, slot) in layout.iter().enumerate() {
                let j = i + k;
                if j >= self.len() || self.owners[j] != owner || self.cmds[j] != kind.id() {
                    return bad(format!("{} at position {i} is missing slots", kind.name()));
                }
                if self.slots[j] != slot.cell() - 1 {
                    return bad(format!("slot order broken at position {j}"));
                }
            }
            if i + layout.len() < self.len() && self.owners[i + layout.len()] == owner {
                return bad(format!("{} at position {i} has extra slots", kind.name()));
            }
            prev_owner = Some(owner);
            i += layout.len().max(1);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    global: Option<(LayerNorm, Attention)>,
    local: Option<(LayerNorm, Attention)>,
    ln_cross: LayerNorm,
    cross: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

type SubCache = (LayerNormCache, AttentionCache, Option<Array2<f64>>);

struct BlockCache {
    global: Option<SubCache>,
    local: Option<SubCache>,
    cross: SubCache,
    ln_ffn: LayerNormCache,
    ffn: FeedForwardCache,
    drop_ffn: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct Layers {
    tok: Embedding,
    pos: Embedding,
    slot: Embedding,
    cmd: Embedding,
    time: TimeMlp,
    style_theta: Stylize,
    style_zeta: Stylize,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
}

/// Stage-2 denoiser. Each block runs global self-attention, local
/// self-attention restricted to the owning command instance, cross-attention
/// to the repeated command features, and a feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct ParamNet {
    config: DenoiserConfig,
    pub params: Tensors,
    layers: Layers,
}

pub struct ParamCache {
    inputs: Vec<usize>,
    layout: ParamLayout,
    film: Array2<f64>,
    time: TimeMlpCache,
    style_theta: StylizeCache,
    style_zeta: StylizeCache,
    zeta: Array2<f64>,
    blocks: Vec<BlockCache>,
    ln_out: LayerNormCache,
    normed_out: Array2<f64>,
}

struct Masks {
    global: Option<Mask>,
    local: Mask,
}

impl ParamNet {
    pub fn new<R: Rng>(config: &DenoiserConfig, rng: &mut R) -> Result<Self, DenoiserError> {
        config.check()?;
        let d = config.d_model;
        let mut params = Tensors::new();
        let layers = {
            let mut b = Builder::new(&mut params, rng, config.init_std);
            let tok = Embedding::with_zero_row(&mut b, "tok_emb", PARAM_STATES + 1, d, PARAM_PAD_INPUT);
            let pos = Embedding::new(&mut b, "pos_emb", config.max_param_len, d);
            let slot = Embedding::with_zero_row(&mut b, "slot_emb", SLOT_PAD + 1, d, SLOT_PAD);
            let cmd = Embedding::with_zero_row(&mut b, "cmd_emb", CMD_PAD + 1, d, CMD_PAD);
            let time = TimeMlp::new(&mut b, "time", d);
            let style_theta = Stylize::new(&mut b, "style_theta_ln", d);
            let style_zeta = Stylize::new(&mut b, "style_zeta_ln", d);
            let h = config.n_heads;
            let blocks = (0..config.n_blocks_param)
                .map(|i| {
                    b.push(format!("block{i}"));
                    let global = config.use_global_attention.then(|| {
                        (
                            LayerNorm::new(&mut b, "ln_global", d),
                            Attention::new(&mut b, "global_attn", d, h),
                        )
                    });
                    let local = config.use_local_attention.then(|| {
                        (
                            LayerNorm::new(&mut b, "ln_local", d),
                            Attention::new(&mut b, "local_attn", d, h),
                        )
                    });
                    let blk = Block {
                        global,
                        local,
                        ln_cross: LayerNorm::new(&mut b, "ln_cross", d),
                        cross: Attention::new(&mut b, "cross_attn", d, h),
                        ln_ffn: LayerNorm::new(&mut b, "ln_ffn", d),
                        ffn: FeedForward::new(&mut b, "ffn", d, config.ffn_mult * d),
                    };
                    b.pop();
                    blk
                })
                .collect();
            let ln_out = LayerNorm::new(&mut b, "ln_out", d);
            let head = Linear::new(&mut b, "head", d, NUM_LEVELS);
            Layers {
                tok,
                pos,
                slot,
                cmd,
                time,
                style_theta,
                style_zeta,
                blocks,
                ln_out,
                head,
            }
        };
        Ok(Self {
            config: config.clone(),
            params,
            layers,
        })
    }

    pub fn from_params(config: &DenoiserConfig, params: Tensors) -> Result<Self, DenoiserError> {
        let mut rng = crate::rng::substream(0, &[]);
        let mut net = Self::new(config, &mut rng)?;
        if !net.params.same_layout(&params) {
            return Err(DenoiserError::WeightLayout);
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn inputs(&self, tokens: &[usize], layout: &ParamLayout) -> Result<Vec<usize>, DenoiserError> {
        if tokens.len() != layout.len() {
            return Err(DenoiserError::LayoutMismatch(format!(
                "{} tokens for {} layout positions",
                tokens.len(),
                layout.len()
            )));
        }
        if layout.len() > self.config.max_param_len {
            return Err(DenoiserError::LengthExceeded {
                got: layout.len(),
                max: self.config.max_param_len,
            });
        }
        layout.check()?;
        tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| {
                if layout.is_pad(i) {
                    Ok(PARAM_PAD_INPUT)
                } else if tok < PARAM_STATES {
                    Ok(tok)
                } else {
                    Err(DenoiserError::BadToken {
                        token: tok,
                        states: PARAM_STATES,
                    })
                }
            })
            .collect()
    }

    fn masks(layout: &ParamLayout) -> Masks {
        let pad = layout.pad_mask();
        Masks {
            global: pad.iter().any(|&p| p).then(|| key_padding_mask(&pad)),
            local: build_local_mask(&layout.owners),
        }
    }

    /// Stylized parameter features and stylized repeated-command features,
    /// both `L x d`, as fed to the first block.
    pub fn stylize(
        &self,
        tokens: &[usize],
        layout: &ParamLayout,
        t: usize,
    ) -> Result<(Array2<f64>, Array2<f64>), DenoiserError> {
        let inputs = self.inputs(tokens, layout)?;
        let s = self.embed(&inputs, layout, t);
        Ok((s.0, s.1))
    }

    #[allow(clippy::type_complexity)]
    fn embed(
        &self,
        inputs: &[usize],
        layout: &ParamLayout,
        t: usize,
    ) -> (
        Array2<f64>,
        Array2<f64>,
        Array2<f64>,
        TimeMlpCache,
        StylizeCache,
        StylizeCache,
    ) {
        let p = &self.params;
        let l = &self.layers;
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let pos = l.pos.forward(p, &positions);
        let x = l.tok.forward(p, inputs) + &pos + l.slot.forward(p, &layout.slots);
        let z = l.cmd.forward(p, &layout.cmds) + &pos;
        let (film, time) = l.time.forward(p, t);
        let (h, st) = l.style_theta.forward(p, x.view(), film.view());
        let (zeta, sz) = l.style_zeta.forward(p, z.view(), film.view());
        (h, zeta, film, time, st, sz)
    }

    /// Output of block `block`'s local-attention sublayer (before the
    /// residual add) for block input `h`.
    pub fn local_sublayer(
        &self,
        block: usize,
        h: ArrayView2<f64>,
        layout: &ParamLayout,
    ) -> Option<Array2<f64>> {
        let (ln, att) = self.layers.blocks.get(block)?.local.as_ref()?;
        let mask = build_local_mask(&layout.owners);
        let (x, _) = ln.forward(&self.params, h);
        Some(att.forward(&self.params, x.view(), x.view(), Some(&mask)).0)
    }

    /// Logits over the 256 value tokens, `L x 256`. Rows at padding
    /// positions are computed but meaningless.
    pub fn forward(
        &self,
        tokens: &[usize],
        layout: &ParamLayout,
        t: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<f64>, ParamCache), DenoiserError> {
        let inputs = self.inputs(tokens, layout)?;
        let p = &self.params;
        let l = &self.layers;
        let (mut h, zeta, film, time, style_theta, style_zeta) = self.embed(&inputs, layout, t);
        let masks = Self::masks(layout);
        let drop = self.config.dropout;
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for blk in &l.blocks {
            let global = blk.global.as_ref().map(|(ln, att)| {
                sublayer(p, drop, ln, att, &mut h, None, masks.global.as_ref(), rng.as_deref_mut())
            });
            let local = blk.local.as_ref().map(|(ln, att)| {
                sublayer(p, drop, ln, att, &mut h, None, Some(&masks.local), rng.as_deref_mut())
            });
            let cross = sublayer(
                p,
                drop,
                &blk.ln_cross,
                &blk.cross,
                &mut h,
                Some(&zeta),
                masks.global.as_ref(),
                rng.as_deref_mut(),
            );
            let (f_in, ln_ffn) = blk.ln_ffn.forward(p, h.view());
            let (mut f, ffn) = blk.ffn.forward(p, f_in.view());
            let drop_ffn = dropout(&mut f, drop, rng.as_deref_mut());
            h += &f;
            blocks.push(BlockCache {
                global,
                local,
                cross,
                ln_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (normed_out, ln_out) = l.ln_out.forward(p, h.view());
        let logits = l.head.forward(p, normed_out.view());
        let cache = ParamCache {
            inputs,
            layout: layout.clone(),
            film,
            time,
            style_theta,
            style_zeta,
            zeta,
            blocks,
            ln_out,
            normed_out,
        };
        Ok((logits, cache))
    }

    pub fn backward(&self, cache: &ParamCache, dlogits: ArrayView2<f64>, grads: &mut Tensors) {
        let p = &self.params;
        let l = &self.layers;
        let dnormed = l.head.backward(p, grads, cache.normed_out.view(), dlogits);
        let mut dh = l.ln_out.backward(p, grads, &cache.ln_out, dnormed.view());
        let mut dzeta = Array2::zeros(cache.zeta.raw_dim());
        for (blk, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            let mut df = dh.clone();
            dropout_backward(&mut df, &bc.drop_ffn);
            let d_in = blk.ffn.backward(p, grads, &bc.ffn, df.view());
            dh += &blk.ln_ffn.backward(p, grads, &bc.ln_ffn, d_in.view());

            let (lc, ac, dm) = &bc.cross;
            let mut d_o = dh.clone();
            dropout_backward(&mut d_o, dm);
            let (dq, dkv) = blk.cross.backward(p, grads, ac, d_o.view());
            dh += &blk.ln_cross.backward(p, grads, lc, dq.view());
            dzeta += &dkv;

            for (layer, c) in [(&blk.local, &bc.local), (&blk.global, &bc.global)] {
                if let (Some((ln, att)), Some((lc, ac, dm))) = (layer, c) {
                    let mut d_o = dh.clone();
                    dropout_backward(&mut d_o, dm);
                    let (dq, dkv) = att.backward(p, grads, ac, d_o.view());
                    let d_in = dq + dkv;
                    dh += &ln.backward(p, grads, lc, d_in.view());
                }
            }
        }
        let mut dfilm = Array2::zeros(cache.film.raw_dim());
        let film = cache.film.view();
        let dx = l
            .style_theta
            .backward(p, grads, &cache.style_theta, film, dh.view(), &mut dfilm);
        let dz = l
            .style_zeta
            .backward(p, grads, &cache.style_zeta, film, dzeta.view(), &mut dfilm);
        l.time.backward(p, grads, &cache.time, dfilm.view());
        let positions: Vec<usize> = (0..cache.inputs.len()).collect();
        l.tok.backward(grads, &cache.inputs, dx.view());
        l.slot.backward(grads, &cache.layout.slots, dx.view());
        l.pos.backward(grads, &positions, dx.view());
        l.cmd.backward(grads, &cache.layout.cmds, dz.view());
        l.pos.backward(grads, &positions, dz.view());
    }
}

/// Pre-norm attention branch added to `h` in place.
#[allow(clippy::too_many_arguments)]
fn sublayer<R: RngCore + ?Sized>(
    p: &Tensors,
    drop: f64,
    ln: &LayerNorm,
    att: &Attention,
    h: &mut Array2<f64>,
    kv: Option<&Array2<f64>>,
    mask: Option<&Mask>,
    rng: Option<&mut R>,
) -> SubCache {
    let (x, lc) = ln.forward(p, h.view());
    let kv = kv.map_or(x.view(), |k| k.view());
    let (mut o, ac) = att.forward(p, x.view(), kv, mask);
    let dm = dropout(&mut o, drop, rng);
    *h += &o;
    (lc, ac, dm)
}
