use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};

use super::nn::{
    Attention, AttentionCache, Builder, Embedding, FeedForward, FeedForwardCache, LayerNorm,
    LayerNormCache, Linear, Stylize, StylizeCache, Tensors, TimeMlp, TimeMlpCache,
};
use super::{
    dropout, dropout_backward, ConditionMode, DenoiserConfig, DenoiserError, CMD_STATES,
};
use crate::cadseq::{MAX_COMMANDS, NUM_COMMANDS};

#[derive(Debug, Clone)]
struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

struct BlockCache {
    ln_self: LayerNormCache,
    self_attn: AttentionCache,
    drop_self: Option<Array2<f64>>,
    cross: Option<(LayerNormCache, AttentionCache, Option<Array2<f64>>)>,
    ln_ffn: LayerNormCache,
    ffn: FeedForwardCache,
    drop_ffn: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct Layers {
    tok: Embedding,
    pos: Embedding,
    time: TimeMlp,
    style: Stylize,
    cond: Option<Linear>,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
}

/// Stage-1 denoiser: stylized command embeddings through a pre-norm
/// Transformer encoder, with cross-attention to the length condition when
/// the net is conditioned.
#[derive(Debug, Clone)]
pub struct CommandNet {
    config: DenoiserConfig,
    pub params: Tensors,
    layers: Layers,
}

pub struct CommandCache {
    states: Vec<usize>,
    film: Array2<f64>,
    time: TimeMlpCache,
    style: StylizeCache,
    cond: Option<(Array2<f64>, Array2<f64>)>,
    blocks: Vec<BlockCache>,
    ln_out: LayerNormCache,
    normed_out: Array2<f64>,
}

impl CommandNet {
    pub fn new<R: Rng>(config: &DenoiserConfig, rng: &mut R) -> Result<Self, DenoiserError> {
        config.check()?;
        let d = config.d_model;
        let mut params = Tensors::new();
        let layers = {
            let mut b = Builder::new(&mut params, rng, config.init_std);
            let tok = Embedding::new(&mut b, "tok_emb", CMD_STATES, d);
            let pos = Embedding::new(&mut b, "pos_emb", config.max_cmd_len, d);
            let time = TimeMlp::new(&mut b, "time", d);
            let style = Stylize::new(&mut b, "style_ln", d);
            let cond = (config.condition == ConditionMode::Length)
                .then(|| Linear::new(&mut b, "cond", MAX_COMMANDS, d));
            let blocks = (0..config.n_blocks_cmd)
                .map(|i| {
                    b.push(format!("block{i}"));
                    let blk = Block {
                        ln_self: LayerNorm::new(&mut b, "ln_self", d),
                        self_attn: Attention::new(&mut b, "self_attn", d, config.n_heads),
                        cross: cond.is_some().then(|| {
                            (
                                LayerNorm::new(&mut b, "ln_cross", d),
                                Attention::new(&mut b, "cross_attn", d, config.n_heads),
                            )
                        }),
                        ln_ffn: LayerNorm::new(&mut b, "ln_ffn", d),
                        ffn: FeedForward::new(&mut b, "ffn", d, config.ffn_mult * d),
                    };
                    b.pop();
                    blk
                })
                .collect();
            let ln_out = LayerNorm::new(&mut b, "ln_out", d);
            let head = Linear::new(&mut b, "head", d, NUM_COMMANDS);
            Layers {
                tok,
                pos,
                time,
                style,
                cond,
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

    /// Rebuilds the architecture for `config` and installs `params`.
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

    /// One-hot length indicator through a linear layer, `1 x d_model`.
    pub fn encode_length_condition(&self, n: usize) -> Result<Array2<f64>, DenoiserError> {
        let lin = self.layers.cond.ok_or(DenoiserError::ConditionMismatch)?;
        Ok(lin.forward(&self.params, one_hot_length(n)?.view()))
    }

    /// Logits over the six commands, `L x 6`. Pass an rng to enable dropout.
    pub fn forward(
        &self,
        states: &[usize],
        t: usize,
        cond: Option<usize>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<f64>, CommandCache), DenoiserError> {
        let p = &self.params;
        let l = &self.layers;
        if states.len() > self.config.max_cmd_len {
            return Err(DenoiserError::LengthExceeded {
                got: states.len(),
                max: self.config.max_cmd_len,
            });
        }
        if let Some(&bad) = states.iter().find(|&&s| s >= CMD_STATES) {
            return Err(DenoiserError::BadToken {
                token: bad,
                states: CMD_STATES,
            });
        }
        if cond.is_some() != l.cond.is_some() {
            return Err(DenoiserError::ConditionMismatch);
        }
        let positions: Vec<usize> = (0..states.len()).collect();
        let x = l.tok.forward(p, states) + l.pos.forward(p, &positions);
        let (film, time) = l.time.forward(p, t);
        let (mut h, style) = l.style.forward(p, x.view(), film.view());
        let cond = match (cond, l.cond) {
            (Some(n), Some(lin)) => {
                let onehot = one_hot_length(n)?;
                let c = lin.forward(p, onehot.view());
                Some((onehot, c))
            }
            _ => None,
        };
        let drop = self.config.dropout;
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for blk in &l.blocks {
            let (a_in, ln_self) = blk.ln_self.forward(p, h.view());
            let (mut a, self_attn) = blk.self_attn.forward(p, a_in.view(), a_in.view(), None);
            let drop_self = dropout(&mut a, drop, rng.as_deref_mut());
            h += &a;
            let cross = match (&blk.cross, &cond) {
                (Some((ln, att)), Some((_, c))) => {
                    let (q_in, ln_c) = ln.forward(p, h.view());
                    let (mut o, ac) = att.forward(p, q_in.view(), c.view(), None);
                    let dm = dropout(&mut o, drop, rng.as_deref_mut());
                    h += &o;
                    Some((ln_c, ac, dm))
                }
                _ => None,
            };
            let (f_in, ln_ffn) = blk.ln_ffn.forward(p, h.view());
            let (mut f, ffn) = blk.ffn.forward(p, f_in.view());
            let drop_ffn = dropout(&mut f, drop, rng.as_deref_mut());
            h += &f;
            blocks.push(BlockCache {
                ln_self,
                self_attn,
                drop_self,
                cross,
                ln_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (normed_out, ln_out) = l.ln_out.forward(p, h.view());
        let logits = l.head.forward(p, normed_out.view());
        let cache = CommandCache {
            states: states.to_vec(),
            film,
            time,
            style,
            cond,
            blocks,
            ln_out,
            normed_out,
        };
        Ok((logits, cache))
    }

    /// Accumulates into `grads` the gradient of a scalar whose gradient with
    /// respect to the logits is `dlogits`.
    pub fn backward(&self, cache: &CommandCache, dlogits: ArrayView2<f64>, grads: &mut Tensors) {
        let p = &self.params;
        let l = &self.layers;
        let dnormed = l.head.backward(p, grads, cache.normed_out.view(), dlogits);
        let mut dh = l.ln_out.backward(p, grads, &cache.ln_out, dnormed.view());
        let mut dc = cache.cond.as_ref().map(|(_, c)| Array2::zeros(c.raw_dim()));
        for (blk, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            let mut df = dh.clone();
            dropout_backward(&mut df, &bc.drop_ffn);
            let d_in = blk.ffn.backward(p, grads, &bc.ffn, df.view());
            dh += &blk.ln_ffn.backward(p, grads, &bc.ln_ffn, d_in.view());
            if let (Some((ln, att)), Some((ln_c, ac, dm))) = (&blk.cross, &bc.cross) {
                let mut d_o = dh.clone();
                dropout_backward(&mut d_o, dm);
                let (dq, dkv) = att.backward(p, grads, ac, d_o.view());
                dh += &ln.backward(p, grads, ln_c, dq.view());
                if let Some(dc) = dc.as_mut() {
                    *dc += &dkv;
                }
            }
            let mut da = dh.clone();
            dropout_backward(&mut da, &bc.drop_self);
            let (dq, dkv) = blk.self_attn.backward(p, grads, &bc.self_attn, da.view());
            let d_in = dq + dkv;
            dh += &blk.ln_self.backward(p, grads, &bc.ln_self, d_in.view());
        }
        if let (Some(lin), Some((onehot, _)), Some(dc)) = (l.cond, &cache.cond, dc) {
            lin.backward(p, grads, onehot.view(), dc.view());
        }
        let mut dfilm = Array2::zeros(cache.film.raw_dim());
        let dx = l
            .style
            .backward(p, grads, &cache.style, cache.film.view(), dh.view(), &mut dfilm);
        l.time.backward(p, grads, &cache.time, dfilm.view());
        l.tok.backward(grads, &cache.states, dx.view());
        let positions: Vec<usize> = (0..cache.states.len()).collect();
        l.pos.backward(grads, &positions, dx.view());
    }
}

fn one_hot_length(n: usize) -> Result<Array2<f64>, DenoiserError> {
    if !(1..=MAX_COMMANDS).contains(&n) {
        return Err(DenoiserError::OutOfRange(n));
    }
    let mut v = Array2::zeros((1, MAX_COMMANDS));
    v[[0, n - 1]] = 1.0;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::nn::Id;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn logits_are_finite_for_all_absorbing_input() {
        let net = CommandNet::new(&DenoiserConfig::miniature(), &mut rng()).unwrap();
        let (logits, _) = net.forward(&[6; 10], 100, None, None).unwrap();
        assert_eq!(logits.dim(), (10, NUM_COMMANDS));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_overlong_and_mismatched_inputs() {
        let net = CommandNet::new(&DenoiserConfig::miniature(), &mut rng()).unwrap();
        assert!(matches!(
            net.forward(&[0; 13], 1, None, None),
            Err(DenoiserError::LengthExceeded { got: 13, max: 12 })
        ));
        assert_eq!(
            net.forward(&[0; 3], 1, Some(3), None).err(),
            Some(DenoiserError::ConditionMismatch)
        );
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let mut net = CommandNet::new(&DenoiserConfig::miniature(), &mut rng()).unwrap();
        let pos = net.params.find("pos_emb").unwrap();
        net.params[pos].fill(0.0);
        let a = [0, 1, 1, 4, 6, 5];
        let perm = [3, 0, 5, 1, 4, 2];
        let b: Vec<usize> = perm.iter().map(|&i| a[i]).collect();
        let (la, _) = net.forward(&a, 17, None, None).unwrap();
        let (lb, _) = net.forward(&b, 17, None, None).unwrap();
        for (row, &i) in perm.iter().enumerate() {
            for c in 0..NUM_COMMANDS {
                assert_abs_diff_eq!(lb[[row, c]], la[[i, c]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn length_condition_encoding() {
        let cfg = DenoiserConfig {
            condition: ConditionMode::Length,
            ..DenoiserConfig::miniature()
        };
        let mut net = CommandNet::new(&cfg, &mut rng()).unwrap();
        let a = net.encode_length_condition(4).unwrap();
        let b = net.encode_length_condition(8).unwrap();
        assert_eq!(a.dim(), (1, 32));
        assert_ne!(a, b);
        assert_eq!(net.encode_length_condition(0), Err(DenoiserError::OutOfRange(0)));
        assert_eq!(net.encode_length_condition(61), Err(DenoiserError::OutOfRange(61)));
        let w = net.params.find("cond.w").unwrap();
        net.params[w].fill(0.0);
        let zero = net.encode_length_condition(30).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_sensitivity_and_identity_modulation() {
        let mut r = rng();
        let mut net = CommandNet::new(&DenoiserConfig::miniature(), &mut r).unwrap();
        // zero-initialized modulation: every step gives the same output
        let (a, _) = net.forward(&[0, 3, 4, 5], 2, None, None).unwrap();
        let (b, _) = net.forward(&[0, 3, 4, 5], 90, None, None).unwrap();
        assert_eq!(a, b);
        let out = net.params.find("time.out.w").unwrap();
        net.params[out].mapv_inplace(|_| r.random_range(-0.1..0.1));
        let (a, _) = net.forward(&[0, 3, 4, 5], 2, None, None).unwrap();
        let (b, _) = net.forward(&[0, 3, 4, 5], 90, None, None).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn weights_round_trip_through_from_params() {
        let cfg = DenoiserConfig::miniature();
        let net = CommandNet::new(&cfg, &mut rng()).unwrap();
        let copy = CommandNet::from_params(&cfg, net.params.clone()).unwrap();
        let (a, _) = net.forward(&[0, 1, 4, 5], 5, None, None).unwrap();
        let (b, _) = copy.forward(&[0, 1, 4, 5], 5, None, None).unwrap();
        assert_eq!(a, b);
        let mut wrong = net.params.clone();
        wrong.add("extra", Array2::zeros((1, 1)));
        assert!(CommandNet::from_params(&cfg, wrong).is_err());
        assert_eq!(net.params.name(Id(0)), "tok_emb");
    }
}
