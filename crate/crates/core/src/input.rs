//! Multi-modal input embedding: phrase tokens, image patches, and
//! learnable detection tokens are embedded separately and concatenated
//! into the joint encoder sequence `[text; vision; detection]`.

use crate::config::ModelConfig;
use crate::image_io::Image;
use crate::params::{EnteredParams, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Standard deviation for embedding/weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Pixel standardization applied before patch projection.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.5;

/// Word projection plus classification token, learned positional table,
/// and the modality type vector shared by every text position.
#[derive(Debug)]
pub struct LanguageEmbedding {
    /// d x v word projection; column t is the embedding of token id t.
    pub word_proj: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub type_vec: ParamId,
}

/// Text embedding output plus bookkeeping about truncation.
#[derive(Debug)]
pub struct TextEmbedding {
    /// (m + 1) x d rows: classification token then the m word embeddings.
    pub tokens: TensorId,
    pub len: usize,
    pub truncated: bool,
}

impl LanguageEmbedding {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            word_proj: store.register(
                "lang.word_proj",
                vec![d, cfg.vocab_size],
                Init::Normal(INIT_STD),
                rng,
            ),
            cls: store.register("lang.cls", vec![1, d], Init::Normal(INIT_STD), rng),
            pos: store.register(
                "lang.pos",
                vec![cfg.max_text_len + 1, d],
                Init::Normal(INIT_STD),
                rng,
            ),
            type_vec: store.register("lang.type", vec![d], Init::Normal(INIT_STD), rng),
        }
    }

    /// Embed token ids into the (m + 1) x d text sequence. Phrases longer
    /// than the maximum text length are truncated in place and flagged.
    pub fn embed(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        token_ids: &[usize],
        cfg: &ModelConfig,
    ) -> Result<TextEmbedding> {
        if token_ids.is_empty() {
            return Err(Error::Input("cannot embed an empty phrase".into()));
        }
        let truncated = token_ids.len() > cfg.max_text_len;
        if truncated {
            log::warn!(
                "phrase of {} tokens truncated to {}",
                token_ids.len(),
                cfg.max_text_len
            );
        }
        let ids = &token_ids[..token_ids.len().min(cfg.max_text_len)];
        let m = ids.len();

        let words = tape.embed_lookup(entered.id(self.word_proj), ids)?;
        let seq = tape.concat_rows(&[entered.id(self.cls), words])?;
        let pos = tape.slice_rows(entered.id(self.pos), 0, m + 1)?;
        let seq = tape.add(seq, pos)?;
        let seq = tape.add_row(seq, entered.id(self.type_vec))?;
        Ok(TextEmbedding { tokens: seq, len: m, truncated })
    }
}

/// Patch projection plus classification token, positional table, and the
/// vision modality type vector.
#[derive(Debug)]
pub struct VisionEmbedding {
    /// d x 3s^2 patch projection.
    pub patch_proj: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub type_vec: ParamId,
}

impl VisionEmbedding {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_proj: store.register(
                "vis.patch_proj",
                vec![d, cfg.patch_dim()],
                Init::Normal(INIT_STD),
                rng,
            ),
            cls: store.register("vis.cls", vec![1, d], Init::Normal(INIT_STD), rng),
            pos: store.register(
                "vis.pos",
                vec![cfg.patches() + 1, d],
                Init::Normal(INIT_STD),
                rng,
            ),
            type_vec: store.register("vis.type", vec![d], Init::Normal(INIT_STD), rng),
        }
    }

    /// Flatten the image into standardized row-major patches and project
    /// into the (n + 1) x d vision sequence.
    pub fn embed(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        image: &Image,
        cfg: &ModelConfig,
    ) -> Result<TensorId> {
        if image.width != cfg.image_width || image.height != cfg.image_height {
            return Err(Error::Dimension(format!(
                "image {}x{} does not match configured {}x{}",
                image.width, image.height, cfg.image_width, cfg.image_height
            )));
        }
        let s = cfg.patch_size;
        let n = cfg.patches();
        let pd = cfg.patch_dim();
        let cols = cfg.image_width / s;
        let mut patches = vec![0.0; n * pd];
        for j in 0..n {
            let y0 = (j / cols) * s;
            let x0 = (j % cols) * s;
            let dst = &mut patches[j * pd..(j + 1) * pd];
            let mut at = 0;
            for dy in 0..s {
                for dx in 0..s {
                    let px = image.pixel(x0 + dx, y0 + dy);
                    for c in 0..3 {
                        dst[at] = (px[c] - PIXEL_MEAN) / PIXEL_STD;
                        at += 1;
                    }
                }
            }
        }
        let patches = tape.constant(patches, vec![n, pd])?;
        let proj_t = tape.transpose(entered.id(self.patch_proj))?;
        let feats = tape.matmul(patches, proj_t)?;
        let seq = tape.concat_rows(&[entered.id(self.cls), feats])?;
        let seq = tape.add(seq, entered.id(self.pos))?;
        let seq = tape.add_row(seq, entered.id(self.type_vec))?;
        Ok(seq)
    }
}

/// The q learnable detection token rows. They carry no positional table;
/// each row is an independent object query.
#[derive(Debug)]
pub struct DetectionTokens {
    pub tokens: ParamId,
}

impl DetectionTokens {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            tokens: store.register(
                "det.tokens",
                vec![cfg.det_tokens, cfg.embed_dim],
                Init::Normal(INIT_STD),
                rng,
            ),
        }
    }
}

/// Row offsets of the three segments inside the joint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments {
    pub text_len: usize,
    pub patches: usize,
    pub queries: usize,
}

impl Segments {
    pub fn lang_start(&self) -> usize {
        0
    }

    pub fn lang_len(&self) -> usize {
        self.text_len + 1
    }

    pub fn vis_start(&self) -> usize {
        self.text_len + 1
    }

    pub fn vis_len(&self) -> usize {
        self.patches + 1
    }

    pub fn det_start(&self) -> usize {
        self.text_len + self.patches + 2
    }

    pub fn total(&self) -> usize {
        self.text_len + self.patches + self.queries + 2
    }

    /// Slice the joint sequence back into (language, vision, detection).
    pub fn split(&self, tape: &mut Tape, x: TensorId) -> Result<(TensorId, TensorId, TensorId)> {
        let lang = tape.slice_rows(x, self.lang_start(), self.lang_len())?;
        let vis = tape.slice_rows(x, self.vis_start(), self.vis_len())?;
        let det = tape.slice_rows(x, self.det_start(), self.queries)?;
        Ok((lang, vis, det))
    }
}

/// Concatenate the three modality sequences in language, vision,
/// detection order.
pub fn assemble(
    tape: &mut Tape,
    text: TensorId,
    vision: TensorId,
    detection: TensorId,
) -> Result<(TensorId, Segments)> {
    let seg = Segments {
        text_len: tape.shape(text)[0] - 1,
        patches: tape.shape(vision)[0] - 1,
        queries: tape.shape(detection)[0],
    };
    let x0 = tape.concat_rows(&[text, vision, detection])?;
    Ok((x0, seg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn setup(cfg: &ModelConfig) -> (ParamStore, LanguageEmbedding, VisionEmbedding, DetectionTokens)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let lang = LanguageEmbedding::register(&mut store, cfg, &mut rng);
        let vis = VisionEmbedding::register(&mut store, cfg, &mut rng);
        let det = DetectionTokens::register(&mut store, cfg, &mut rng);
        (store, lang, vis, det)
    }

    #[test]
    fn text_embedding_shape_and_truncation() {
        let cfg = tiny_cfg();
        let (store, lang, _, _) = setup(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();

        let one = lang.embed(&mut tape, &entered, &[3], &cfg).unwrap();
        assert_eq!(tape.shape(one.tokens), &[2, cfg.embed_dim]);
        assert!(!one.truncated);

        let long: Vec<usize> = (0..cfg.max_text_len + 4).map(|i| i % cfg.vocab_size).collect();
        let t = lang.embed(&mut tape, &entered, &long, &cfg).unwrap();
        assert!(t.truncated);
        assert_eq!(t.len, cfg.max_text_len);

        assert!(matches!(
            lang.embed(&mut tape, &entered, &[], &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn text_rows_decompose_into_projection_plus_tables() {
        let cfg = tiny_cfg();
        let (store, lang, _, _) = setup(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let ids = [7usize, 2, 7, 0];
        let emb = lang.embed(&mut tape, &entered, &ids, &cfg).unwrap();
        let d = cfg.embed_dim;
        let out = tape.value(emb.tokens).to_vec();

        let wp = store.get(lang.word_proj);
        let pos = store.get(lang.pos);
        let ty = store.get(lang.type_vec);
        let cls = store.get(lang.cls);
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..d {
                // Same summation order as the implementation, so equality
                // is exact.
                let expected = (wp.value[j * cfg.vocab_size + id] + pos.value[(i + 1) * d + j])
                    + ty.value[j];
                assert_eq!(out[(i + 1) * d + j], expected, "row {i} col {j}");
            }
        }
        for j in 0..d {
            let expected = (cls.value[j] + pos.value[j]) + ty.value[j];
            assert_eq!(out[j], expected);
        }
    }

    #[test]
    fn zeroed_tables_leave_only_cls() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lang = LanguageEmbedding {
            word_proj: store.register(
                "w",
                vec![cfg.embed_dim, cfg.vocab_size],
                Init::Const(0.0),
                &mut rng,
            ),
            cls: store.register("c", vec![1, cfg.embed_dim], Init::Const(1.0), &mut rng),
            pos: store.register(
                "p",
                vec![cfg.max_text_len + 1, cfg.embed_dim],
                Init::Const(0.0),
                &mut rng,
            ),
            type_vec: store.register("t", vec![cfg.embed_dim], Init::Const(0.0), &mut rng),
        };
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let emb = lang.embed(&mut tape, &entered, &[1, 2], &cfg).unwrap();
        let v = tape.value(emb.tokens);
        assert!(v[..cfg.embed_dim].iter().all(|&x| x == 1.0));
        assert!(v[cfg.embed_dim..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vision_embedding_row_count() {
        let cfg = ModelConfig::toy(); // 64x64, s=8 -> n = 64
        let (store, _, vis, _) = setup(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let img = Image::filled(64, 64, 0.3);
        let seq = vis.embed(&mut tape, &entered, &img, &cfg).unwrap();
        assert_eq!(tape.shape(seq), &[65, cfg.embed_dim]);

        let wrong = Image::filled(32, 64, 0.3);
        assert!(matches!(
            vis.embed(&mut tape, &entered, &wrong, &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn constant_image_gives_identical_patch_rows() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        // Zero positional/type tables so patch rows are directly
        // comparable.
        let vis = VisionEmbedding {
            patch_proj: store.register(
                "w",
                vec![cfg.embed_dim, cfg.patch_dim()],
                Init::Normal(0.02),
                &mut rng,
            ),
            cls: store.register("c", vec![1, cfg.embed_dim], Init::Normal(0.02), &mut rng),
            pos: store.register(
                "p",
                vec![cfg.patches() + 1, cfg.embed_dim],
                Init::Const(0.0),
                &mut rng,
            ),
            type_vec: store.register("t", vec![cfg.embed_dim], Init::Const(0.0), &mut rng),
        };
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let img = Image::filled(cfg.image_width, cfg.image_height, 0.7);
        let seq = vis.embed(&mut tape, &entered, &img, &cfg).unwrap();
        let v = tape.value(seq).to_vec();
        let d = cfg.embed_dim;
        let first = &v[d..2 * d];
        for p in 1..cfg.patches() {
            assert_eq!(&v[(p + 1) * d..(p + 2) * d], first, "patch {p}");
        }

        // A single lit pixel perturbs exactly one patch row.
        let mut lit = img.clone();
        lit.set_pixel(11, 3, [1.0, 0.2, 0.1]); // patch row 0, col 1 -> cell 1
        let seq2 = vis.embed(&mut tape, &entered, &lit, &cfg).unwrap();
        let v2 = tape.value(seq2);
        let mut changed = Vec::new();
        for p in 0..cfg.patches() {
            if v2[(p + 1) * d..(p + 2) * d] != v[(p + 1) * d..(p + 2) * d] {
                changed.push(p);
            }
        }
        assert_eq!(changed, vec![1]);
    }

    #[test]
    fn assemble_orders_segments_and_splits_back() {
        let cfg = ModelConfig::toy();
        let (store, lang, vis, det) = setup(&cfg);
        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let ids: Vec<usize> = (0..8).collect();
        let text = lang.embed(&mut tape, &entered, &ids, &cfg).unwrap();
        let img = Image::filled(64, 64, 0.4);
        let vision = vis.embed(&mut tape, &entered, &img, &cfg).unwrap();
        let dets = entered.id(det.tokens);
        let (x0, seg) = assemble(&mut tape, text.tokens, vision, dets).unwrap();

        assert_eq!(tape.shape(x0)[0], 8 + 64 + 5 + 2);
        assert_eq!(seg.total(), 79);
        assert_eq!(
            (seg.lang_start(), seg.vis_start(), seg.det_start()),
            (0, 9, 74)
        );

        let (l, v, dt) = seg.split(&mut tape, x0).unwrap();
        assert_eq!(tape.value(l), tape.value(text.tokens));
        assert_eq!(tape.value(v), tape.value(vision));
        assert_eq!(tape.value(dt), tape.value(dets));
    }

    #[test]
    fn modality_type_vectors_initialized_distinct() {
        let cfg = tiny_cfg();
        let (store, lang, vis, _) = setup(&cfg);
        assert_ne!(store.get(lang.type_vec).value, store.get(vis.type_vec).value);
    }
}
