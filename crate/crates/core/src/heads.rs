//! Output heads over the encoder: box regression, token classification,
//! and the projection heads feeding the alignment losses.
//!
//! The transformed text classification feature is added to the detection
//! features before the detection and classification heads (bypassable for
//! the ablated variant). Alignment projections consume the raw detection
//! outputs.

use crate::config::ModelConfig;
use crate::encoder::EncoderOutput;
use crate::geometry::BBox;
use crate::input::INIT_STD;
use crate::params::{EnteredParams, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::Result;
use rand_chacha::ChaCha8Rng;

/// Two-layer MLP with a gelu in between; the owner decides what to do
/// with the raw output.
#[derive(Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        dims: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (d_in, d_hidden, d_out) = dims;
        Self {
            w1: store.register(format!("{prefix}.w1"), vec![d_in, d_hidden], Init::Normal(INIT_STD), rng),
            b1: store.register(format!("{prefix}.b1"), vec![d_hidden], Init::Const(0.0), rng),
            w2: store.register(format!("{prefix}.w2"), vec![d_hidden, d_out], Init::Normal(INIT_STD), rng),
            b2: store.register(format!("{prefix}.b2"), vec![d_out], Init::Const(0.0), rng),
        }
    }

    fn forward(&self, tape: &mut Tape, entered: &EnteredParams, x: TensorId) -> Result<TensorId> {
        let h = tape.matmul(x, entered.id(self.w1))?;
        let h = tape.add_row(h, entered.id(self.b1))?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, entered.id(self.w2))?;
        tape.add_row(out, entered.id(self.b2))
    }
}

/// Box regression head: d -> d -> 4, sigmoid output in (0,1)^4.
#[derive(Debug)]
pub struct DetectionHead {
    mlp: Mlp,
}

/// Token classification head: d -> d -> (max_text_len + 1) logits. Slot 0
/// is the no-text class absorbing unmatched detection tokens; slot j >= 1
/// refers to token position j of the phrase.
#[derive(Debug)]
pub struct ClassificationHead {
    mlp: Mlp,
}

/// Linear projections into the shared alignment space, L2-normalized per
/// row before any similarity is taken.
#[derive(Debug)]
pub struct ProjectionHeads {
    pub obj_text: ParamId,
    pub obj_det: ParamId,
    pub pa_text: ParamId,
    pub pa_vision: ParamId,
}

#[derive(Debug)]
pub struct Heads {
    detect: DetectionHead,
    classify: ClassificationHead,
    project: ProjectionHeads,
}

/// Box and class predictions for the Q query features (Q = q detection
/// tokens, or 1 in the variant without them).
#[derive(Debug)]
pub struct Predictions {
    /// Q x 4 sigmoided (cx, cy, w, h).
    pub boxes: TensorId,
    /// Q x (max_text_len + 1) raw logits.
    pub class_logits: TensorId,
    /// Row softmax of the logits.
    pub class_probs: TensorId,
    pub queries: usize,
}

impl Predictions {
    /// Detached copy of the predicted boxes.
    pub fn boxes_detached(&self, tape: &Tape) -> Result<Vec<BBox>> {
        let v = tape.value(self.boxes);
        (0..self.queries)
            .map(|i| BBox::new(v[i * 4], v[i * 4 + 1], v[i * 4 + 2], v[i * 4 + 3]))
            .collect()
    }

    /// Detached copy of the class distributions, one row per query.
    pub fn probs_detached(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let v = tape.value(self.class_probs);
        let w = tape.shape(self.class_probs)[1];
        (0..self.queries).map(|i| v[i * w..(i + 1) * w].to_vec()).collect()
    }
}

/// Projected, unit-norm embeddings for the alignment losses.
#[derive(Debug)]
pub struct AlignmentEmbeddings {
    /// m x align_dim text token embeddings (classification row excluded).
    pub text: TensorId,
    /// Q x align_dim detection embeddings from the raw detection outputs.
    pub det: TensorId,
    /// m x align_dim text embeddings for patch alignment.
    pub pa_text: TensorId,
    /// n x align_dim patch embeddings (classification row excluded).
    pub pa_vision: TensorId,
}

/// Add the text classification feature to every detection feature row.
pub fn fuse_cls(tape: &mut Tape, det: TensorId, text_cls: TensorId) -> Result<TensorId> {
    tape.add_row(det, text_cls)
}

impl Heads {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let da = cfg.align_dim;
        Self {
            detect: DetectionHead { mlp: Mlp::register(store, "head.det", (d, d, 4), rng) },
            classify: ClassificationHead {
                mlp: Mlp::register(store, "head.cls", (d, d, cfg.max_text_len + 1), rng),
            },
            project: ProjectionHeads {
                obj_text: store.register("proj.obj_text", vec![d, da], Init::Normal(INIT_STD), rng),
                obj_det: store.register("proj.obj_det", vec![d, da], Init::Normal(INIT_STD), rng),
                pa_text: store.register("proj.pa_text", vec![d, da], Init::Normal(INIT_STD), rng),
                pa_vision: store.register("proj.pa_vision", vec![d, da], Init::Normal(INIT_STD), rng),
            },
        }
    }

    /// The feature rows consumed by the output heads: cls-fused detection
    /// outputs, or the text classification feature alone when detection
    /// tokens are disabled.
    fn query_features(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        cfg: &ModelConfig,
    ) -> Result<TensorId> {
        if !cfg.use_det_tokens {
            return tape.slice_rows(enc.lang, 0, 1);
        }
        if cfg.use_cls_fusion {
            let text_cls = tape.slice_rows(enc.lang, 0, 1)?;
            fuse_cls(tape, enc.det, text_cls)
        } else {
            Ok(enc.det)
        }
    }

    pub fn predict(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        enc: &EncoderOutput,
        cfg: &ModelConfig,
    ) -> Result<Predictions> {
        let feats = self.query_features(tape, enc, cfg)?;
        let raw = self.detect.mlp.forward(tape, entered, feats)?;
        let boxes = tape.sigmoid(raw);
        let class_logits = self.classify.mlp.forward(tape, entered, feats)?;
        let class_probs = tape.softmax(class_logits, 1)?;
        Ok(Predictions { boxes, class_logits, class_probs, queries: cfg.num_queries() })
    }

    /// Project encoder outputs into the alignment space. Text rows exclude
    /// the classification token; vision rows exclude the visual
    /// classification token.
    pub fn project_for_alignment(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        enc: &EncoderOutput,
        cfg: &ModelConfig,
    ) -> Result<AlignmentEmbeddings> {
        let m = enc.segments.text_len;
        let n = enc.segments.patches;
        let tokens = tape.slice_rows(enc.lang, 1, m)?;
        let patches = tape.slice_rows(enc.vision, 1, n)?;
        let det_raw = if cfg.use_det_tokens {
            enc.det
        } else {
            tape.slice_rows(enc.lang, 0, 1)?
        };
        let project = |tape: &mut Tape, x: TensorId, w: ParamId| -> Result<TensorId> {
            let p = tape.matmul(x, entered.id(w))?;
            tape.l2_normalize_rows(p)
        };
        Ok(AlignmentEmbeddings {
            text: project(tape, tokens, self.project.obj_text)?,
            det: project(tape, det_raw, self.project.obj_det)?,
            pa_text: project(tape, tokens, self.project.pa_text)?,
            pa_vision: project(tape, patches, self.project.pa_vision)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::Segments;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny()
    }

    /// Fabricated encoder output over leaf tensors so gradients can be
    /// probed.
    fn fake_encoder_output(
        tape: &mut Tape,
        cfg: &ModelConfig,
        m: usize,
        seed: u64,
    ) -> EncoderOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let mut mk = |rows: usize| {
            let data: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            tape.leaf(data, vec![rows, d]).unwrap()
        };
        EncoderOutput {
            lang: mk(m + 1),
            vision: mk(cfg.patches() + 1),
            det: mk(cfg.det_tokens),
            segments: Segments { text_len: m, patches: cfg.patches(), queries: cfg.det_tokens },
            attention: None,
        }
    }

    fn heads_for(cfg: &ModelConfig) -> (ParamStore, Heads) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let heads = Heads::register(&mut store, cfg, &mut rng);
        (store, heads)
    }

    #[test]
    fn fuse_cls_zero_is_identity_and_adds_elementwise() {
        let mut tape = Tape::new();
        let det = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let zero = tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let same = fuse_cls(&mut tape, det, zero).unwrap();
        assert_eq!(tape.value(same), tape.value(det));

        let one_row = tape.constant(vec![5.0, 6.0], vec![1, 2]).unwrap();
        let cls = tape.constant(vec![0.5, -0.5], vec![1, 2]).unwrap();
        let fused = fuse_cls(&mut tape, one_row, cls).unwrap();
        assert_eq!(tape.value(fused), &[5.5, 5.5]);
    }

    #[test]
    fn predictions_are_distributions_and_valid_boxes() {
        let cfg = tiny();
        let (store, heads) = heads_for(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let enc = fake_encoder_output(&mut tape, &cfg, 4, 2);
        let pred = heads.predict(&mut tape, &entered, &enc, &cfg).unwrap();
        assert_eq!(pred.queries, cfg.det_tokens);

        let probs = pred.probs_detached(&tape);
        for row in &probs {
            assert_eq!(row.len(), cfg.max_text_len + 1);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for b in pred.boxes_detached(&tape).unwrap() {
            assert!(b.w > 0.0 && b.h > 0.0 && b.w < 1.0 && b.h < 1.0);
            assert!((0.0..1.0).contains(&b.cx) && (0.0..1.0).contains(&b.cy));
        }
    }

    #[test]
    fn cls_fusion_is_live_in_the_gradient() {
        let cfg = tiny();
        let (store, heads) = heads_for(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let enc = fake_encoder_output(&mut tape, &cfg, 4, 3);
        let pred = heads.predict(&mut tape, &entered, &enc, &cfg).unwrap();
        // First box coordinate of the first query.
        let b00 = tape.slice_rows(pred.boxes, 0, 1).unwrap();
        let b00 = tape.slice_cols(b00, 0, 1).unwrap();
        let loss = tape.sum(b00);
        tape.backward(loss).unwrap();
        let lang_grad = tape.grad(enc.lang).unwrap();
        let d = cfg.embed_dim;
        let cls_grad_norm: f64 = lang_grad[..d].iter().map(|g| g * g).sum::<f64>();
        assert!(cls_grad_norm > 0.0, "fusion did not propagate to the text cls feature");
    }

    #[test]
    fn without_fusion_the_cls_feature_is_dead() {
        let mut cfg = tiny();
        cfg.use_cls_fusion = false;
        let (store, heads) = heads_for(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let enc = fake_encoder_output(&mut tape, &cfg, 4, 4);
        let pred = heads.predict(&mut tape, &entered, &enc, &cfg).unwrap();
        let s = tape.sum(pred.boxes);
        tape.backward(s).unwrap();
        assert!(tape.grad(enc.lang).is_none(), "bypassed fusion must not touch o_l");
    }

    #[test]
    fn no_det_variant_produces_exactly_one_box_from_cls() {
        let mut cfg = tiny();
        cfg.use_det_tokens = false;
        let (store, heads) = heads_for(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let enc = fake_encoder_output(&mut tape, &cfg, 4, 5);
        let pred = heads.predict(&mut tape, &entered, &enc, &cfg).unwrap();
        assert_eq!(pred.queries, 1);
        assert_eq!(tape.shape(pred.boxes), &[1, 4]);
        // Detection rows are unused in this variant.
        let s = tape.sum(pred.boxes);
        tape.backward(s).unwrap();
        assert!(tape.grad(enc.det).is_none());
        assert!(tape.grad(enc.lang).is_some());
    }

    #[test]
    fn alignment_projections_are_unit_rows() {
        let cfg = tiny();
        let (store, heads) = heads_for(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let enc = fake_encoder_output(&mut tape, &cfg, 5, 6);
        let proj = heads.project_for_alignment(&mut tape, &entered, &enc, &cfg).unwrap();

        for (t, rows) in [
            (proj.text, 5),
            (proj.det, cfg.det_tokens),
            (proj.pa_text, 5),
            (proj.pa_vision, cfg.patches()),
        ] {
            let shape = tape.shape(t).to_vec();
            assert_eq!(shape, vec![rows, cfg.align_dim]);
            let v = tape.value(t);
            for i in 0..rows {
                let norm: f64 =
                    v[i * cfg.align_dim..(i + 1) * cfg.align_dim].iter().map(|x| x * x).sum();
                assert!((norm - 1.0).abs() < 1e-9, "row {i} norm^2 {norm}");
            }
        }

        // Cosine similarity of a row with itself is 1.
        let v = tape.value(proj.text);
        let dot: f64 = v[..cfg.align_dim].iter().map(|x| x * x).sum();
        assert!((dot - 1.0).abs() < 1e-9);
    }
}
