//! The full network: embeddings, encoder, and heads behind one forward
//! call. Forward passes are split into three stages (input construction,
//! encoder, heads) so the latency benchmark can time them separately.

use crate::config::ModelConfig;
use crate::encoder::{Encoder, EncoderOutput};
use crate::heads::{AlignmentEmbeddings, Heads, Predictions};
use crate::image_io::Image;
use crate::input::{assemble, DetectionTokens, LanguageEmbedding, Segments, TextEmbedding, VisionEmbedding};
use crate::params::{EnteredParams, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lang: LanguageEmbedding,
    pub vis: VisionEmbedding,
    pub det: DetectionTokens,
    pub encoder: Encoder,
    pub heads: Heads,
}

/// Everything produced by one forward pass, tape included, so callers can
/// attach losses and run backward.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub entered: EnteredParams,
    pub text: TextEmbedding,
    pub encoder: EncoderOutput,
    pub predictions: Predictions,
    pub alignment: AlignmentEmbeddings,
}

impl Model {
    /// Build a model with freshly initialized parameters. Registration
    /// order is fixed, so a seed fully determines the weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lang = LanguageEmbedding::register(&mut store, &config, &mut rng);
        let vis = VisionEmbedding::register(&mut store, &config, &mut rng);
        let det = DetectionTokens::register(&mut store, &config, &mut rng);
        let encoder = Encoder::register(&mut store, &config, &mut rng);
        let heads = Heads::register(&mut store, &config, &mut rng);
        Ok(Self { config, store, lang, vis, det, encoder, heads })
    }

    /// Stage 1: embed both modalities and assemble the joint sequence.
    pub fn stage_embed(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        image: &Image,
        token_ids: &[usize],
    ) -> Result<(TensorId, Segments, TextEmbedding)> {
        let text = self.lang.embed(tape, entered, token_ids, &self.config)?;
        let vision = self.vis.embed(tape, entered, image, &self.config)?;
        if self.config.use_det_tokens {
            let (x0, seg) = assemble(tape, text.tokens, vision, entered.id(self.det.tokens))?;
            Ok((x0, seg, text))
        } else {
            // Ablated variant: no detection segment at all.
            let seg = Segments { text_len: text.len, patches: self.config.patches(), queries: 0 };
            let x0 = tape.concat_rows(&[text.tokens, vision])?;
            Ok((x0, seg, text))
        }
    }

    /// Stage 2: run the encoder.
    pub fn stage_encode(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        x0: TensorId,
        segments: Segments,
        retain_attention: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        self.encoder.forward(tape, entered, x0, segments, &self.config, retain_attention, dropout_rng)
    }

    /// Stage 3: output heads and alignment projections.
    pub fn stage_heads(
        &self,
        tape: &mut Tape,
        entered: &EnteredParams,
        enc: &EncoderOutput,
    ) -> Result<(Predictions, AlignmentEmbeddings)> {
        let pred = self.heads.predict(tape, entered, enc, &self.config)?;
        let align = self.heads.project_for_alignment(tape, entered, enc, &self.config)?;
        Ok((pred, align))
    }

    fn forward_inner(
        &self,
        image: &Image,
        token_ids: &[usize],
        retain_attention: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let entered = self.store.enter(&mut tape)?;
        let (x0, seg, text) = self.stage_embed(&mut tape, &entered, image, token_ids)?;
        let enc = self.stage_encode(&mut tape, &entered, x0, seg, retain_attention, dropout_rng)?;
        let (predictions, alignment) = self.stage_heads(&mut tape, &entered, &enc)?;
        Ok(ForwardPass { tape, entered, text, encoder: enc, predictions, alignment })
    }

    /// Inference-flavored forward pass.
    pub fn forward(
        &self,
        image: &Image,
        token_ids: &[usize],
        retain_attention: bool,
    ) -> Result<ForwardPass> {
        self.forward_inner(image, token_ids, retain_attention, None)
    }

    /// Training-flavored forward pass; applies dropout when configured.
    pub fn forward_train(
        &self,
        image: &Image,
        token_ids: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.forward_inner(image, token_ids, false, dropout_rng)
    }
}
