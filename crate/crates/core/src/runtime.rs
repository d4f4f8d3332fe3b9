//! Training, inference, and evaluation loops.
//!
//! Batch items run forward/backward in parallel; gradients are reduced in
//! item order and every random choice is seeded, so a (seed, config,
//! dataset) triple fully determines the metrics log regardless of worker
//! count.

use crate::data::{tokenize, Dataset, GroundingSample, Vocabulary};
use crate::geometry::{iou, BBox};
use crate::image_io::Image;
use crate::losses::{total_loss, LossBreakdown, LossToggles};
use crate::matching::{build_cost, hungarian, Assignment};
use crate::model::{ForwardPass, Model};
use crate::optim::{AdamW, Schedule, BASE_LR, WEIGHT_DECAY};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: LossToggles,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Worker threads for batch parallelism; None uses the global pool.
    pub threads: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            seed: 0,
            toggles: LossToggles::default(),
            base_lr: BASE_LR,
            weight_decay: WEIGHT_DECAY,
            warmup_fraction: 0.10,
            clip_norm: 1.0,
            threads: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_bbox: f64,
    pub l_cls: f64,
    pub l_oa: f64,
    pub l_pa: f64,
    pub l_total: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Line-delimited JSON, one record per epoch.
pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Forward, match, and compute the combined loss for one sample; the
/// assignment is returned so callers can reuse it (gradient checks freeze
/// it across evaluations).
pub fn sample_forward(
    model: &Model,
    sample: &GroundingSample,
    toggles: &LossToggles,
    dropout_seed: Option<u64>,
) -> Result<(ForwardPass, Assignment, LossBreakdown)> {
    let mut dropout_rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut fp = model.forward_train(&sample.image, &sample.token_ids, dropout_rng.as_mut())?;
    let assignment = match_sample(model, &fp, sample)?;
    let nodes = total_loss(
        &mut fp.tape,
        &fp.predictions,
        &fp.alignment,
        &sample.gt,
        &assignment,
        &model.config,
        toggles,
    )?;
    let breakdown = nodes.breakdown;
    let total = nodes.total;
    fp.tape.backward(total)?;
    Ok((fp, assignment, breakdown))
}

/// Hungarian assignment between current predictions and the sample's
/// ground truth, on detached values.
pub fn match_sample(
    model: &Model,
    fp: &ForwardPass,
    sample: &GroundingSample,
) -> Result<Assignment> {
    let boxes = fp.predictions.boxes_detached(&fp.tape)?;
    let probs = fp.predictions.probs_detached(&fp.tape);
    let num_classes = model.config.max_text_len + 1;
    let dists: Vec<Vec<f64>> = (0..sample.gt.num_boxes())
        .map(|k| sample.gt.class_distribution(k, num_classes))
        .collect();
    let cost = build_cost(&boxes, &probs, &sample.gt.boxes, &dists, &model.config)?;
    hungarian(&cost)
}

/// Per-parameter gradients of the combined loss for one sample.
pub fn sample_gradients(
    model: &Model,
    sample: &GroundingSample,
    toggles: &LossToggles,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let (fp, _, breakdown) = sample_forward(model, sample, toggles, dropout_seed)?;
    let grads = model.store.grads_from_tape(&fp.tape, &fp.entered);
    Ok((breakdown, grads))
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::State(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Train in place, returning per-epoch metrics. Validation accuracy is
/// measured on `val` when given, otherwise on the training set.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    val: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    if model.config.vocab_size != data.vocab.len() {
        return Err(Error::Contract(format!(
            "model vocab_size {} does not match dataset vocabulary of {}",
            model.config.vocab_size,
            data.vocab.len()
        )));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::Input("epochs and batch_size must be positive".into()));
    }

    let n = data.len();
    let steps_per_epoch = n.div_ceil(opts.batch_size);
    let total_steps = steps_per_epoch * opts.epochs;
    let schedule = Schedule::linear_warmup_decay(opts.base_lr, total_steps, opts.warmup_fraction);
    let mut optimizer = AdamW::new(&model.store, opts.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let use_dropout = model.config.dropout > 0.0;

    let mut metrics = Vec::with_capacity(opts.epochs);
    let mut global_step = 0usize;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sums = LossBreakdown::default();
        let mut last_lr = 0.0;

        for chunk in order.chunks(opts.batch_size) {
            let step = global_step;
            let seed = opts.seed;
            let results: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> =
                in_pool(opts.threads, || {
                    chunk
                        .par_iter()
                        .map(|&idx| {
                            let dropout_seed = use_dropout.then(|| {
                                seed ^ ((step as u64) << 24) ^ (idx as u64).wrapping_mul(0x9E37)
                            });
                            sample_gradients(
                                model,
                                &data.samples[idx],
                                &opts.toggles,
                                dropout_seed,
                            )
                        })
                        .collect()
                })?;

            model.store.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for (j, r) in results.into_iter().enumerate() {
                match r {
                    Ok((breakdown, grads)) => {
                        model.store.accumulate_grads(&grads, scale);
                        epoch_sums.accumulate(&breakdown);
                    }
                    Err(e) => {
                        return Err(Error::Numeric(format!(
                            "epoch {epoch}, step {global_step}: sample {} ({:?}) failed: {e}; \
                             batch indices {:?}",
                            chunk[j], data.samples[chunk[j]].phrase, chunk
                        )));
                    }
                }
            }

            let norm = model.store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, step {global_step}: non-finite gradient norm; \
                     batch indices {:?}",
                    chunk
                )));
            }
            if norm > opts.clip_norm {
                model.store.scale_grads(opts.clip_norm / norm);
            }
            last_lr = schedule.lr(global_step);
            optimizer.step(&mut model.store, last_lr)?;
            global_step += 1;
        }

        epoch_sums.scale(1.0 / n as f64);
        let eval_set = val.unwrap_or(data);
        let val_acc = in_pool(opts.threads, || evaluate(model, eval_set))??.accuracy;
        let m = EpochMetrics {
            epoch,
            l_bbox: epoch_sums.l_bbox,
            l_cls: epoch_sums.l_cls,
            l_oa: epoch_sums.l_oa,
            l_pa: epoch_sums.l_pa,
            l_total: epoch_sums.l_total,
            val_acc,
            lr: last_lr,
        };
        log::info!(
            "epoch {epoch}: total {:.4} bbox {:.4} cls {:.4} oa {:.4} pa {:.4} acc {:.4} lr {:.2e}",
            m.l_total,
            m.l_bbox,
            m.l_cls,
            m.l_oa,
            m.l_pa,
            m.val_acc,
            m.lr
        );
        metrics.push(m);
    }
    Ok(metrics)
}

/// Index and score of the selected prediction: the argmax over queries of
/// `1 - P(no-text)`, ties broken by the lowest index.
pub fn select_prediction(probs: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, row) in probs.iter().enumerate() {
        let score = 1.0 - row[0];
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    (best, best_score)
}

/// Full inference output for one image/phrase pair.
#[derive(Debug, Clone, Serialize)]
pub struct Inference {
    pub bbox: BBox,
    /// Pixel corner coordinates.
    pub box_px: [f64; 4],
    /// 1 - P(no-text) of the selected prediction.
    pub score: f64,
    /// Class distribution of the selected prediction over
    /// `max_text_len + 1` slots (slot 0 is the no-text class).
    pub token_distribution: Vec<f64>,
    pub selected: usize,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<Vec<f64>>,
}

/// Run the model on one image and phrase. `heatmap_layer` selects a layer
/// whose detection-to-patch attention (for the selected prediction,
/// averaged over heads) is exported.
pub fn infer(
    model: &Model,
    vocab: &Vocabulary,
    image: &Image,
    phrase: &str,
    heatmap_layer: Option<usize>,
) -> Result<Inference> {
    let token_ids = tokenize(phrase, vocab, model.config.max_text_len);
    if token_ids.is_empty() {
        return Err(Error::Input(format!("phrase {phrase:?} has no tokens")));
    }
    let fp = model.forward(image, &token_ids, heatmap_layer.is_some())?;
    let probs = fp.predictions.probs_detached(&fp.tape);
    let (selected, score) = select_prediction(&probs);
    let boxes = fp.predictions.boxes_detached(&fp.tape)?;
    let bbox = boxes[selected];
    let heatmap = match heatmap_layer {
        Some(layer) => Some(fp.encoder.attention_map(layer, selected)?),
        None => None,
    };
    Ok(Inference {
        bbox,
        box_px: bbox.to_pixel_xyxy(model.config.image_width, model.config.image_height),
        score,
        token_distribution: probs[selected].clone(),
        selected,
        truncated: fp.text.truncated,
        heatmap,
    })
}

/// Attention export for the visualization command.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionExport {
    pub layer: usize,
    pub selected: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Head-averaged detection-to-patch weights, one per patch.
    pub mean: Vec<f64>,
    pub per_head: Vec<Vec<f64>>,
}

pub fn attention_export(
    model: &Model,
    vocab: &Vocabulary,
    image: &Image,
    phrase: &str,
    layer: usize,
) -> Result<AttentionExport> {
    let token_ids = tokenize(phrase, vocab, model.config.max_text_len);
    if token_ids.is_empty() {
        return Err(Error::Input(format!("phrase {phrase:?} has no tokens")));
    }
    let fp = model.forward(image, &token_ids, true)?;
    let probs = fp.predictions.probs_detached(&fp.tape);
    let (selected, _) = select_prediction(&probs);
    let mean = fp.encoder.attention_map(layer, selected)?;
    let per_head = (0..model.config.heads)
        .map(|h| fp.encoder.attention_map_head(layer, h, selected))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionExport {
        layer,
        selected,
        grid_rows: model.config.image_height / model.config.patch_size,
        grid_cols: model.config.image_width / model.config.patch_size,
        mean,
        per_head,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub iou: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub total: usize,
    pub correct: usize,
    pub per_sample: Vec<SampleEval>,
}

/// Accuracy at IoU >= 0.5 (boundary inclusive) of an arbitrary predictor.
pub fn evaluate_with<F>(data: &Dataset, predict: F) -> Result<Evaluation>
where
    F: Fn(&GroundingSample) -> Result<BBox> + Sync,
{
    if data.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    let ious: Vec<Result<f64>> = data
        .samples
        .par_iter()
        .map(|s| predict(s).map(|b| iou(&b, &s.gt.boxes[0])))
        .collect();
    let mut per_sample = Vec::with_capacity(ious.len());
    let mut correct = 0usize;
    for (index, r) in ious.into_iter().enumerate() {
        let iou_v = r?;
        let ok = iou_v >= 0.5;
        if ok {
            correct += 1;
        }
        per_sample.push(SampleEval { index, iou: iou_v, correct: ok });
    }
    let total = per_sample.len();
    Ok(Evaluation { accuracy: correct as f64 / total as f64, total, correct, per_sample })
}

/// Accuracy of the model's selected predictions over a dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    evaluate_with(data, |s| {
        let fp = model.forward(&s.image, &s.token_ids, false)?;
        let probs = fp.predictions.probs_detached(&fp.tape);
        let (selected, _) = select_prediction(&probs);
        Ok(fp.predictions.boxes_detached(&fp.tape)?[selected])
    })
}
