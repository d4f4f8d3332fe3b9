//! Pre-norm transformer encoder over the joint multimodal sequence.
//!
//! Each layer applies residual multi-headed self-attention followed by a
//! residual feed-forward block, both with layer norm inside the residual
//! branch: `x' = x + MSA(LN(x))`, `x = x' + FFN(LN(x'))`. Attention is
//! full, with no masking between modalities.

use crate::config::ModelConfig;
use crate::input::Segments;
use crate::params::{EnteredParams, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::input::INIT_STD;

#[derive(Debug)]
pub struct EncoderLayer {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl EncoderLayer {
    pub fn register(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.embed_dim;
        let f = d * cfg.ffn_mult;
        let mut reg = |suffix: &str, shape: Vec<usize>, init: Init| {
            store.register(format!("enc.{index}.{suffix}"), shape, init, rng)
        };
        Self {
            wq: reg("wq", vec![d, d], Init::Normal(INIT_STD)),
            bq: reg("bq", vec![d], Init::Const(0.0)),
            wk: reg("wk", vec![d, d], Init::Normal(INIT_STD)),
            bk: reg("bk", vec![d], Init::Const(0.0)),
            wv: reg("wv", vec![d, d], Init::Normal(INIT_STD)),
            bv: reg("bv", vec![d], Init::Const(0.0)),
            wo: reg("wo", vec![d, d], Init::Normal(INIT_STD)),
            bo: reg("bo", vec![d], Init::Const(0.0)),
            ln1_gain: reg("ln1.gain", vec![d], Init::Const(1.0)),
            ln1_bias: reg("ln1.bias", vec![d], Init::Const(0.0)),
            ln2_gain: reg("ln2.gain", vec![d], Init::Const(1.0)),
            ln2_bias: reg("ln2.bias", vec![d], Init::Const(0.0)),
            ffn_w1: reg("ffn.w1", vec![d, f], Init::Normal(INIT_STD)),
            ffn_b1: reg("ffn.b1", vec![f], Init::Const(0.0)),
            ffn_w2: reg("ffn.w2", vec![f, d], Init::Normal(INIT_STD)),
            ffn_b2: reg("ffn.b2", vec![d], Init::Const(0.0)),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        x: TensorId,
        cfg: &ModelConfig,
        attn_sink: Option<&mut Vec<Vec<f64>>>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let heads = cfg.heads;
        let dh = cfg.embed_dim / heads;
        let seq = tape.shape(x)[0];

        // Attention sub-block.
        let h = tape.layer_norm(x, entered.id(self.ln1_gain), entered.id(self.ln1_bias))?;
        let q = tape.matmul(h, entered.id(self.wq))?;
        let q = tape.add_row(q, entered.id(self.bq))?;
        let k = tape.matmul(h, entered.id(self.wk))?;
        let k = tape.add_row(k, entered.id(self.bk))?;
        let v = tape.matmul(h, entered.id(self.wv))?;
        let v = tape.add_row(v, entered.id(self.bv))?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let weights = tape.softmax(logits, 1)?;
            head_outputs.push((weights, tape.matmul(weights, vh)?));
        }
        if let Some(sink) = attn_sink {
            for (weights, _) in &head_outputs {
                sink.push(tape.value(*weights).to_vec());
            }
        }
        let outs: Vec<TensorId> = head_outputs.iter().map(|&(_, o)| o).collect();
        let cat = tape.concat_cols(&outs)?;
        let msa = tape.matmul(cat, entered.id(self.wo))?;
        let msa = tape.add_row(msa, entered.id(self.bo))?;
        let msa = self.maybe_dropout(tape, msa, cfg, dropout.as_deref_mut())?;
        let x = tape.add(x, msa)?;

        // Feed-forward sub-block.
        let h2 = tape.layer_norm(x, entered.id(self.ln2_gain), entered.id(self.ln2_bias))?;
        let f1 = tape.matmul(h2, entered.id(self.ffn_w1))?;
        let f1 = tape.add_row(f1, entered.id(self.ffn_b1))?;
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(f1, entered.id(self.ffn_w2))?;
        let f2 = tape.add_row(f2, entered.id(self.ffn_b2))?;
        let f2 = self.maybe_dropout(tape, f2, cfg, dropout)?;
        let out = tape.add(x, f2)?;
        debug_assert_eq!(tape.shape(out)[0], seq);
        Ok(out)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: TensorId,
        cfg: &ModelConfig,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let Some(rng) = rng else { return Ok(x) };
        if cfg.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - cfg.dropout;
        let shape = tape.shape(x).to_vec();
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(mask, shape)?;
        tape.mul(x, mask)
    }
}

/// Per-layer, per-head attention matrices captured during a forward pass.
#[derive(Debug, Clone)]
pub struct Attention {
    /// `layers[l][h]` is the row-major L x L row-stochastic matrix.
    pub layers: Vec<Vec<Vec<f64>>>,
    pub seq_len: usize,
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// (m + 1) x d language rows, classification token first.
    pub lang: TensorId,
    /// (n + 1) x d vision rows, classification token first.
    pub vision: TensorId,
    /// q x d detection rows.
    pub det: TensorId,
    pub segments: Segments,
    pub attention: Option<Attention>,
}

#[derive(Debug, Default)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: (0..cfg.depth)
                .map(|i| EncoderLayer::register(store, cfg, i, rng))
                .collect(),
        }
    }

    /// Run all layers and split the result by segment offsets.
    pub fn forward(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        x0: TensorId,
        segments: Segments,
        cfg: &ModelConfig,
        retain_attention: bool,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        if tape.shape(x0)[0] != segments.total() {
            return Err(Error::Dimension(format!(
                "sequence of {} rows does not match segments totalling {}",
                tape.shape(x0)[0],
                segments.total()
            )));
        }
        let mut x = x0;
        let mut attention = retain_attention.then(|| Attention {
            layers: Vec::with_capacity(self.layers.len()),
            seq_len: segments.total(),
        });
        for layer in &self.layers {
            let mut sink = retain_attention.then(Vec::new);
            x = layer.forward(tape, entered, x, cfg, sink.as_mut(), dropout.as_deref_mut())?;
            if let (Some(att), Some(heads)) = (&mut attention, sink) {
                att.layers.push(heads);
            }
        }
        let (lang, vision, det) = segments.split(tape, x)?;
        Ok(EncoderOutput { lang, vision, det, segments, attention })
    }
}

impl EncoderOutput {
    /// Attention from one detection token to the n patch positions in a
    /// given layer, averaged over heads. Requires attention retention.
    pub fn attention_map(&self, layer: usize, det_index: usize) -> Result<Vec<f64>> {
        let att = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::State("attention was not retained".into()))?;
        let heads = att
            .layers
            .get(layer)
            .ok_or_else(|| Error::State(format!("layer {layer} out of range")))?;
        if det_index >= self.segments.queries {
            return Err(Error::State(format!("detection token {det_index} out of range")));
        }
        let row = self.segments.det_start() + det_index;
        let patch0 = self.segments.vis_start() + 1;
        let n = self.segments.patches;
        let l = att.seq_len;
        let mut out = vec![0.0; n];
        for head in heads {
            for (j, o) in out.iter_mut().enumerate() {
                *o += head[row * l + patch0 + j];
            }
        }
        let scale = 1.0 / heads.len() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(out)
    }

    /// Per-head variant of [`EncoderOutput::attention_map`].
    pub fn attention_map_head(
        &self,
        layer: usize,
        head: usize,
        det_index: usize,
    ) -> Result<Vec<f64>> {
        let att = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::State("attention was not retained".into()))?;
        let heads = att
            .layers
            .get(layer)
            .ok_or_else(|| Error::State(format!("layer {layer} out of range")))?;
        let mat = heads
            .get(head)
            .ok_or_else(|| Error::State(format!("head {head} out of range")))?;
        let row = self.segments.det_start() + det_index;
        let patch0 = self.segments.vis_start() + 1;
        let l = att.seq_len;
        Ok((0..self.segments.patches).map(|j| mat[row * l + patch0 + j]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn segments_for(cfg: &ModelConfig, m: usize) -> Segments {
        Segments { text_len: m, patches: cfg.patches(), queries: cfg.det_tokens }
    }

    fn random_input(cfg: &ModelConfig, m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = segments_for(cfg, m);
        (0..seg.total() * cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_depth_encoder_is_identity_split() {
        let mut cfg = tiny();
        cfg.depth = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let m = 3;
        let seg = segments_for(&cfg, m);
        let data = random_input(&cfg, m, 2);
        let x0 = tape.constant(data.clone(), vec![seg.total(), cfg.embed_dim]).unwrap();
        let out = enc.forward(&mut tape, &entered, x0, seg, &cfg, false, None).unwrap();
        let d = cfg.embed_dim;
        assert_eq!(tape.value(out.lang), &data[..seg.lang_len() * d]);
        assert_eq!(
            tape.value(out.det),
            &data[seg.det_start() * d..seg.total() * d]
        );
        assert!(out.attention.is_none());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let m = 4;
        let seg = segments_for(&cfg, m);
        let x0 = tape
            .constant(random_input(&cfg, m, 4), vec![seg.total(), cfg.embed_dim])
            .unwrap();
        let out = enc.forward(&mut tape, &entered, x0, seg, &cfg, true, None).unwrap();
        let att = out.attention.as_ref().unwrap();
        assert_eq!(att.layers.len(), cfg.depth);
        let l = seg.total();
        for heads in &att.layers {
            assert_eq!(heads.len(), cfg.heads);
            for mat in heads {
                for row in 0..l {
                    let s: f64 = mat[row * l..(row + 1) * l].iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                    assert!(mat[row * l..(row + 1) * l].iter().all(|&w| (0.0..=1.0).contains(&w)));
                }
            }
        }

        // Heatmap rows: nonnegative, bounded, and a patch-slice mass <= 1.
        let map = out.attention_map(0, 1).unwrap();
        assert_eq!(map.len(), cfg.patches());
        let mass: f64 = map.iter().sum();
        assert!(mass <= 1.0 + 1e-9);
        assert!(map.iter().all(|&w| (0.0..=1.0).contains(&w)));
        // Per-head export agrees with the mean over heads.
        let per_head: Vec<Vec<f64>> = (0..cfg.heads)
            .map(|h| out.attention_map_head(0, h, 1).unwrap())
            .collect();
        for j in 0..map.len() {
            let mean: f64 = per_head.iter().map(|m| m[j]).sum::<f64>() / cfg.heads as f64;
            assert!((map[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_not_retained_is_state_error() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let seg = segments_for(&cfg, 2);
        let x0 = tape
            .constant(random_input(&cfg, 2, 8), vec![seg.total(), cfg.embed_dim])
            .unwrap();
        let out = enc.forward(&mut tape, &entered, x0, seg, &cfg, false, None).unwrap();
        assert!(matches!(out.attention_map(0, 0), Err(Error::State(_))));
    }

    #[test]
    fn uniform_attention_from_zeroed_projections() {
        // Zero q/k projections give zero logits, hence exactly uniform
        // attention rows of 1/L.
        let mut cfg = tiny();
        cfg.depth = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &cfg, &mut rng);
        for name in ["enc.0.wq", "enc.0.bq", "enc.0.wk", "enc.0.bk"] {
            let id = store.find(name).unwrap();
            store.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let seg = segments_for(&cfg, 2);
        let x0 = tape
            .constant(random_input(&cfg, 2, 6), vec![seg.total(), cfg.embed_dim])
            .unwrap();
        let out = enc.forward(&mut tape, &entered, x0, seg, &cfg, true, None).unwrap();
        let l = seg.total() as f64;
        let map = out.attention_map(0, 0).unwrap();
        for w in map {
            assert!((w - 1.0 / l).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_rows_are_permutation_equivariant() {
        // The detection segment has no positional content, so swapping two
        // detection rows of the input swaps the corresponding output rows.
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &cfg, &mut rng);
        let m = 3;
        let seg = segments_for(&cfg, m);
        let d = cfg.embed_dim;
        let base = random_input(&cfg, m, 9);
        let mut swapped = base.clone();
        let r0 = seg.det_start() * d;
        let r1 = (seg.det_start() + 1) * d;
        for j in 0..d {
            swapped.swap(r0 + j, r1 + j);
        }

        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let entered = store.enter(&mut tape).unwrap();
            let x0 = tape.constant(data, vec![seg.total(), d]).unwrap();
            let out = enc.forward(&mut tape, &entered, x0, seg, &cfg, false, None).unwrap();
            tape.value(out.det).to_vec()
        };
        let out_base = run(base);
        let out_swapped = run(swapped);
        for j in 0..d {
            assert!((out_base[j] - out_swapped[d + j]).abs() < 1e-12);
            assert!((out_base[d + j] - out_swapped[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        // d=16, D=2, heads=2: gradients of sum(o_det) w.r.t. layer weights
        // against central differences, spot-checking coordinates of every
        // parameter.
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &cfg, &mut rng);
        let m = 2;
        let seg = segments_for(&cfg, m);
        let input = random_input(&cfg, m, 10);

        let loss_of = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let entered = store.enter(&mut tape).unwrap();
            let x0 = tape.constant(input.clone(), vec![seg.total(), cfg.embed_dim]).unwrap();
            let out = enc.forward(&mut tape, &entered, x0, seg, &cfg, false, None).unwrap();
            let s = tape.sum(out.det);
            tape.item(s)
        };

        let analytic = {
            let mut tape = Tape::new();
            let entered = store.enter(&mut tape).unwrap();
            let x0 = tape.constant(input.clone(), vec![seg.total(), cfg.embed_dim]).unwrap();
            let out = enc.forward(&mut tape, &entered, x0, seg, &cfg, false, None).unwrap();
            let s = tape.sum(out.det);
            tape.backward(s).unwrap();
            store.grads_from_tape(&tape, &entered)
        };

        let h = 1e-5;
        let mut probe = ChaCha8Rng::seed_from_u64(12);
        for pi in 0..store.len() {
            let id = crate::params::ParamId(pi);
            let numel = store.get(id).numel();
            for _ in 0..3.min(numel) {
                let ci = probe.random_range(0..numel);
                let orig = store.get(id).value[ci];
                store.get_mut(id).value[ci] = orig + h;
                let up = loss_of(&store);
                store.get_mut(id).value[ci] = orig - h;
                let down = loss_of(&store);
                store.get_mut(id).value[ci] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[pi][ci];
                let err = (a - numeric).abs();
                let tol = 1e-5 * a.abs().max(numeric.abs()) + 1e-7;
                assert!(err <= tol, "param {pi} coord {ci}: {a} vs {numeric}");
            }
        }
    }
}
