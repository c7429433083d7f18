//! End-to-end training: a centroid-regression task head on the encoder's
//! [CLS] feature plus the λ-weighted multi-level contrastive objective on
//! token features, optimized with Adam. Also home to the evaluation metrics
//! (task loss, per-layer contrast losses, token separability margin, linear
//! probe), the sampling benchmark, and the attention exporter.
//!
//! Determinism contract: with a fixed config and dataset, every run yields
//! bitwise-identical parameters and metric records (wall time aside). All
//! randomness flows through named substreams of the config seed; per-sample
//! contrast streams are derived from (seed, sample_index) and then split per
//! layer, so neither batch order within a step nor thread count affects
//! results.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::contrast::{
    icon_forward, icon_grad, icon_level_grad, multi_level_forward, ContrastConfig, FeatureMap,
    MLCConfig, SamplerKind,
};
use crate::error::{Error, Result};
use crate::maskgrid::{
    center_crop_pair, random_crop_pair, token_mask_from_pixels, PixelMask, TokenMask,
};
use crate::numerics::{l2_normalize, seeded_rng, Tensor};
use crate::sampler::{fps2d, random_sample};
use crate::synthworld::{load_dataset, SceneSample};
use crate::vit::{
    cls_attention_row, load_checkpoint, save_checkpoint, vit_backward, vit_forward, ForwardRecord,
    ViTConfig, ViTParams,
};

/// Dominance threshold used for evaluation metrics (separability margin,
/// probe labels, attention mass), regardless of the run's training `beta`.
/// Margins are only comparable across runs when they score the same token
/// partition; a run trained at a different threshold must not get to grade
/// itself on an easier split. Held-out contrast loss still uses the run's
/// own `beta` because it mirrors the training objective.
pub const REFERENCE_BETA: f64 = 0.5;

/// The task head regresses the normalized silhouette centroid (row, col).
pub const TARGET_DIM: usize = 2;

// Substream namespaces under the config seed. Contrast streams use the bare
// sample index to stay (seed, sample_index, layer_index)-addressable; the
// constants below are large enough that they cannot collide with realistic
// sample counters.
const NS_INIT: u64 = 0x5EED_1A17;
const NS_DATA: u64 = 0xDA7A_0001;
const NS_EVAL: u64 = 0xE7A1_0002;
const NS_PROBE: u64 = 0x9806_0003;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to the square root of the second-moment estimate, not under it.
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "adam eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam state holds {} entries, got {} params / {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "adam gradient".into(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Full run configuration. The encoder's frame size doubles as the crop
/// size: training crops randomly, evaluation center-crops.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub contrast: ContrastConfig,
    pub mlc: MLCConfig,
    /// When false the contrastive term applies to the final layer only.
    pub multi_level: bool,
    /// Weight of the contrastive term in the total loss; 0 disables it.
    pub lambda: f64,
    /// Patch dominance threshold for training-time token masks.
    pub beta: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Samples held out from training (the dataset tail) for metrics.
    pub eval_samples: usize,
    pub seed: u64,
    pub dataset: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vit: ViTConfig::default(),
            contrast: ContrastConfig::default(),
            mlc: MLCConfig::default(),
            multi_level: true,
            lambda: 1.0,
            beta: 0.5,
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 30,
            eval_samples: 48,
            seed: 0,
            dataset: PathBuf::from("scenes.icds"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.contrast.validate()?;
        self.mlc.layer_weights(self.vit.layers)?;
        self.adam.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidConfig("eval_samples must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metric log; `wall_time_s` is the only field allowed to
/// differ between reruns of the same config.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub icon_per_layer: Vec<f64>,
    pub total_loss: f64,
    pub margin_per_layer: Vec<f64>,
    pub probe_accuracy: f64,
    pub wall_time_s: f64,
}

/// Aggregate metrics over an evaluation set (center-cropped).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub task_loss: f64,
    /// Per-layer contrast losses averaged over non-degenerate samples.
    pub icon_per_layer: Vec<f64>,
    pub total_loss: f64,
    pub margin_per_layer: Vec<f64>,
    pub probe_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub records: Vec<MetricRecord>,
    pub params: ViTParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// Samples whose token mask lost one class (contrast skipped for them).
    pub degenerate_skips: usize,
}

/// Normalized (row, col) centroid of the mask, or None when it is empty.
pub fn mask_centroid(mask: &PixelMask) -> Option<[f64; 2]> {
    let mut sum_r = 0.0;
    let mut sum_c = 0.0;
    let mut n = 0.0;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) == 1 {
                sum_r += r as f64 + 0.5;
                sum_c += c as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return None;
    }
    Some([
        sum_r / n / mask.height as f64,
        sum_c / n / mask.width as f64,
    ])
}

fn head_forward(head_w: &Tensor, head_b: &Tensor, cls: &[f64]) -> Vec<f64> {
    let d = cls.len();
    (0..TARGET_DIM)
        .map(|o| {
            let mut acc = head_b[o];
            for (i, &x) in cls.iter().enumerate() {
                acc += head_w[o * d + i] * x;
            }
            acc
        })
        .collect()
}

/// Per-sample backward result, reduced in sample order. Loss values are
/// not tracked here; the metric record reports held-out losses instead.
struct SamplePass {
    grads: ViTParams,
    d_head_w: Vec<f64>,
    d_head_b: Vec<f64>,
    degenerate: bool,
}

fn sample_pass(
    cfg: &TrainConfig,
    params: &ViTParams,
    head_w: &Tensor,
    head_b: &Tensor,
    image: &crate::maskgrid::ImageTensor,
    mask: &PixelMask,
    sample_index: u64,
) -> Result<SamplePass> {
    let d = cfg.vit.dim;
    let record = vit_forward(image, params, &cfg.vit)?;
    let cls = record.final_cls();
    let pred = head_forward(head_w, head_b, cls);

    let mut diff = vec![0.0; TARGET_DIM];
    let mut degenerate = false;
    match mask_centroid(mask) {
        Some(target) => {
            for o in 0..TARGET_DIM {
                diff[o] = pred[o] - target[o];
            }
        }
        // a crop that lost the whole silhouette carries no task signal
        None => degenerate = true,
    }
    let mut d_head_w = vec![0.0; TARGET_DIM * d];
    let mut d_head_b = vec![0.0; TARGET_DIM];
    let mut d_cls = vec![0.0; d];
    for o in 0..TARGET_DIM {
        d_head_b[o] = diff[o];
        for i in 0..d {
            d_head_w[o * d + i] = diff[o] * cls[i];
            d_cls[i] += head_w[o * d + i] * diff[o];
        }
    }

    let mut token_grads = vec![vec![0.0; cfg.vit.n_tokens() * d]; cfg.vit.layers];
    if cfg.lambda != 0.0 {
        let tmask = token_mask_from_pixels(mask, cfg.vit.patch, cfg.beta)?;
        let icon_rng = seeded_rng(cfg.seed).substream(&[sample_index]);
        if cfg.multi_level {
            let feats = record.all_features()?;
            let ml = multi_level_forward(&feats, &tmask, &cfg.contrast, &cfg.mlc, &icon_rng)?;
            degenerate |= ml.degenerate;
            let g = icon_grad(&feats, &tmask, &cfg.contrast, &ml)?;
            for (layer, mut gl) in g.into_iter().enumerate() {
                for v in &mut gl {
                    *v *= cfg.lambda;
                }
                token_grads[layer] = gl;
            }
        } else {
            // single-level path draws from the same substream the final
            // layer would get under multi-level fusion
            let fmap = record.features(cfg.vit.layers)?;
            let mut layer_rng = icon_rng.substream(&[cfg.vit.layers as u64]);
            let level = icon_forward(&fmap, &tmask, &cfg.contrast, &mut layer_rng)?;
            degenerate |= level.degenerate;
            let mut gl = icon_level_grad(&fmap, &tmask, &cfg.contrast, &level)?;
            for v in &mut gl {
                *v *= cfg.lambda;
            }
            token_grads[cfg.vit.layers - 1] = gl;
        }
    }

    let grads = vit_backward(&record, params, &cfg.vit, &token_grads, &d_cls)?;
    Ok(SamplePass {
        grads,
        d_head_w,
        d_head_b,
        degenerate,
    })
}

fn flatten_all(params: &ViTParams, head_w: &Tensor, head_b: &Tensor) -> Vec<f64> {
    let mut flat = params.to_flat();
    flat.extend_from_slice(head_w.data());
    flat.extend_from_slice(head_b.data());
    flat
}

fn unflatten_all(
    flat: &[f64],
    params: &mut ViTParams,
    head_w: &mut Tensor,
    head_b: &mut Tensor,
) -> Result<()> {
    let nv = params.n_params();
    params.load_flat(&flat[..nv])?;
    let nw = head_w.len();
    head_w.data_mut().copy_from_slice(&flat[nv..nv + nw]);
    head_b.data_mut().copy_from_slice(&flat[nv + nw..]);
    Ok(())
}

/// Train on `dataset` (its tail of `eval_samples` is held out for metrics).
///
/// `threads` > 1 splits each batch across that many OS threads; per-sample
/// results are still reduced in sample order, so the trajectory is
/// identical to the single-threaded one.
pub fn train(cfg: &TrainConfig, dataset: &[SceneSample], threads: usize) -> Result<TrainOutputs> {
    cfg.validate()?;
    if dataset.len() <= cfg.eval_samples {
        return Err(Error::InvalidConfig(format!(
            "dataset holds {} samples but {} are reserved for evaluation",
            dataset.len(),
            cfg.eval_samples
        )));
    }
    let n_train = dataset.len() - cfg.eval_samples;
    let (train_set, eval_set) = dataset.split_at(n_train);
    let threads = threads.max(1);
    let d = cfg.vit.dim;

    let mut init_rng = seeded_rng(cfg.seed).substream(&[NS_INIT]);
    let mut params = ViTParams::init(&cfg.vit, &mut init_rng)?;
    let mut head_w = Tensor::randn(&[TARGET_DIM, d], 0.02, &mut init_rng);
    let mut head_b = Tensor::zeros(&[TARGET_DIM]);

    let mut adam = AdamState::new(params.n_params() + head_w.len() + head_b.len());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut degenerate_skips = 0usize;
    let mut sample_counter = 0u64;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut data_rng = seeded_rng(cfg.seed).substream(&[NS_DATA, epoch as u64]);
        let mut order: Vec<usize> = (0..n_train).collect();
        data_rng.shuffle(&mut order);

        for batch in order.chunks(cfg.batch_size) {
            // crops are drawn sequentially so thread count cannot shift them
            let mut work = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train_set[i];
                let (img_c, mask_c) = random_crop_pair(
                    &s.image,
                    &s.mask,
                    cfg.vit.height,
                    cfg.vit.width,
                    &mut data_rng,
                )?;
                work.push((img_c, mask_c, sample_counter));
                sample_counter += 1;
            }

            let passes: Vec<Result<SamplePass>> = if threads == 1 || work.len() == 1 {
                work.iter()
                    .map(|(img, mask, idx)| {
                        sample_pass(cfg, &params, &head_w, &head_b, img, mask, *idx)
                    })
                    .collect()
            } else {
                let chunk = work.len().div_ceil(threads);
                let params_ref = &params;
                let head_w_ref = &head_w;
                let head_b_ref = &head_b;
                std::thread::scope(|scope| {
                    let handles: Vec<_> = work
                        .chunks(chunk)
                        .map(|part| {
                            scope.spawn(move || {
                                part.iter()
                                    .map(|(img, mask, idx)| {
                                        sample_pass(
                                            cfg, params_ref, head_w_ref, head_b_ref, img, mask,
                                            *idx,
                                        )
                                    })
                                    .collect::<Vec<_>>()
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .flat_map(|h| h.join().expect("worker thread panicked"))
                        .collect()
                })
            };

            let scale = 1.0 / batch.len() as f64;
            let mut g_vit = ViTParams::zeros(&cfg.vit)?;
            let mut g_head_w = vec![0.0; head_w.len()];
            let mut g_head_b = vec![0.0; head_b.len()];
            for pass in passes {
                let pass = pass?;
                g_vit.add_scaled(&pass.grads, scale)?;
                for (a, b) in g_head_w.iter_mut().zip(&pass.d_head_w) {
                    *a += scale * b;
                }
                for (a, b) in g_head_b.iter_mut().zip(&pass.d_head_b) {
                    *a += scale * b;
                }
                if pass.degenerate {
                    degenerate_skips += 1;
                }
            }

            let mut flat = flatten_all(&params, &head_w, &head_b);
            let mut flat_grads = g_vit.to_flat();
            flat_grads.extend_from_slice(&g_head_w);
            flat_grads.extend_from_slice(&g_head_b);
            adam_step(&mut adam, &mut flat, &flat_grads, &cfg.adam)?;
            unflatten_all(&flat, &mut params, &mut head_w, &mut head_b)?;
        }

        let report = evaluate(cfg, &params, &head_w, &head_b, eval_set)?;
        records.push(MetricRecord {
            epoch,
            task_loss: report.task_loss,
            icon_per_layer: report.icon_per_layer,
            total_loss: report.total_loss,
            margin_per_layer: report.margin_per_layer,
            probe_accuracy: report.probe_accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutputs {
        records,
        params,
        head_w,
        head_b,
        degenerate_skips,
    })
}

/// Metrics over `samples` using center crops and reference-β token masks.
/// Contrast losses are measured with fixed per-sample eval streams so the
/// numbers are comparable across epochs and runs.
pub fn evaluate(
    cfg: &TrainConfig,
    params: &ViTParams,
    head_w: &Tensor,
    head_b: &Tensor,
    samples: &[SceneSample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    let layers = cfg.vit.layers;
    let mut task_sum = 0.0;
    let mut icon_sum = vec![0.0; layers];
    let mut icon_count = vec![0usize; layers];
    let mut margin_sum = vec![0.0; layers];
    let mut margin_count = vec![0usize; layers];
    let mut probe_features: Vec<Vec<f64>> = Vec::new();
    let mut probe_labels: Vec<u8> = Vec::new();

    for (i, s) in samples.iter().enumerate() {
        let (img_c, mask_c) = center_crop_pair(&s.image, &s.mask, cfg.vit.height, cfg.vit.width)?;
        let record = vit_forward(&img_c, params, &cfg.vit)?;
        let pred = head_forward(head_w, head_b, record.final_cls());
        if let Some(target) = mask_centroid(&mask_c) {
            for o in 0..TARGET_DIM {
                let diff = pred[o] - target[o];
                task_sum += 0.5 * diff * diff;
            }
        }

        // Contrast loss mirrors the training objective, so it keeps the
        // run's own threshold; comparative metrics score a fixed reference
        // partition so runs trained at different thresholds stay on one scale.
        let tmask = token_mask_from_pixels(&mask_c, cfg.vit.patch, cfg.beta)?;
        let ref_tmask = token_mask_from_pixels(&mask_c, cfg.vit.patch, REFERENCE_BETA)?;
        let feats = record.all_features()?;
        let rng = seeded_rng(cfg.seed).substream(&[NS_EVAL, i as u64]);
        let ml = multi_level_forward(&feats, &tmask, &cfg.contrast, &cfg.mlc, &rng)?;
        for (l, level) in ml.levels.iter().enumerate() {
            if !level.degenerate {
                icon_sum[l] += level.loss;
                icon_count[l] += 1;
            }
        }
        for (l, fmap) in feats.iter().enumerate() {
            if let Ok(m) = token_separability(fmap, &ref_tmask) {
                margin_sum[l] += m;
                margin_count[l] += 1;
            }
        }

        let last = &feats[layers - 1];
        for t in 0..last.n_tokens() {
            probe_features.push(last.token(t).to_vec());
            probe_labels.push(ref_tmask.data()[t]);
        }
    }

    let n = samples.len() as f64;
    let icon_per_layer: Vec<f64> = icon_sum
        .iter()
        .zip(&icon_count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let margin_per_layer: Vec<f64> = margin_sum
        .iter()
        .zip(&margin_count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let weights = if cfg.multi_level {
        cfg.mlc.layer_weights(layers)?
    } else {
        let mut w = vec![0.0; layers];
        w[layers - 1] = 1.0;
        w
    };
    let icon_weighted: f64 = weights
        .iter()
        .zip(&icon_per_layer)
        .map(|(w, l)| w * l)
        .sum();
    let probe_accuracy = match linear_probe(
        &probe_features,
        &probe_labels,
        seeded_rng(cfg.seed).substream(&[NS_PROBE]).next_u64(),
    ) {
        Ok(acc) => acc,
        Err(Error::DegenerateMask { .. }) => 0.0,
        Err(e) => return Err(e),
    };

    Ok(EvalReport {
        n_samples: samples.len(),
        task_loss: task_sum / n,
        icon_per_layer,
        total_loss: task_sum / n + cfg.lambda * icon_weighted,
        margin_per_layer,
        probe_accuracy,
    })
}

/// Mean within-class cosine similarity minus mean between-class cosine
/// similarity of L2-normalized token features; positive values mean the
/// classes form tighter, separated clusters.
///
/// The within-class term averages the two per-class means, so the rarer
/// class (usually agent tokens, a handful against dozens of environment
/// tokens) carries equal weight. Pooling all within-class pairs instead
/// would let the majority class dominate and the statistic would mostly
/// measure environment homogeneity. Requires at least two tokens per class.
pub fn token_separability(fmap: &FeatureMap, tmask: &TokenMask) -> Result<f64> {
    fmap.matches(tmask)?;
    let n_a = tmask.count_agent();
    let n_e = tmask.count_environment();
    if n_a == 0 || n_e == 0 {
        return Err(Error::DegenerateMask {
            agent: n_a,
            environment: n_e,
        });
    }
    if n_a < 2 || n_e < 2 {
        return Err(Error::EmptyInput("within-class token pairs"));
    }
    let dim = fmap.dim;
    let mut sum_a = vec![0.0; dim];
    let mut sum_e = vec![0.0; dim];
    for t in 0..fmap.n_tokens() {
        let unit = l2_normalize(fmap.token(t))?;
        let acc = if tmask.data()[t] == 1 {
            &mut sum_a
        } else {
            &mut sum_e
        };
        for (a, u) in acc.iter_mut().zip(&unit) {
            *a += u;
        }
    }
    // For unit vectors, sum of pairwise dots within a class is |S|^2 - n.
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let (na, ne) = (n_a as f64, n_e as f64);
    let within_a = (sq(&sum_a) - na) / (na * (na - 1.0));
    let within_e = (sq(&sum_e) - ne) / (ne * (ne - 1.0));
    let within = 0.5 * (within_a + within_e);
    let between = sum_a
        .iter()
        .zip(&sum_e)
        .map(|(a, e)| a * e)
        .sum::<f64>()
        / (na * ne);
    Ok(within - between)
}

/// Fraction of the [CLS] token's attention (over tokens, head-averaged) that
/// lands on agent tokens at the given 1-based layer.
pub fn cls_attention_agent_mass(
    record: &ForwardRecord,
    tmask: &TokenMask,
    layer: usize,
) -> Result<f64> {
    let row = cls_attention_row(record, layer)?;
    if row.len() != tmask.len() {
        return Err(Error::ShapeMismatch(format!(
            "attention row has {} entries, token mask {}",
            row.len(),
            tmask.len()
        )));
    }
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return Err(Error::NonFinite {
            context: "attention mass".into(),
        });
    }
    let agent: f64 = row
        .iter()
        .zip(tmask.data())
        .filter(|(_, &m)| m == 1)
        .map(|(v, _)| v)
        .sum();
    Ok(agent / total)
}

/// Held-out accuracy of a logistic-regression probe separating agent from
/// environment tokens on frozen features.
///
/// Classes are balanced by subsampling the majority class before the 80/20
/// split, so chance level is 0.5 regardless of silhouette size.
pub fn linear_probe(features: &[Vec<f64>], labels: &[u8], split_seed: u64) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let agent_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let env_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    if agent_idx.is_empty() || env_idx.is_empty() {
        return Err(Error::DegenerateMask {
            agent: agent_idx.len(),
            environment: env_idx.len(),
        });
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch("ragged probe features".into()));
    }

    let mut rng = seeded_rng(split_seed);
    let m = agent_idx.len().min(env_idx.len());
    let mut pool = rng.partial_shuffle(&agent_idx, m);
    pool.extend(rng.partial_shuffle(&env_idx, m));
    let pool = rng.partial_shuffle(&pool, pool.len());
    let n_test = (pool.len() / 5).max(1);
    let (test, train) = pool.split_at(n_test);

    let unit = |i: usize| -> Vec<f64> {
        l2_normalize(&features[i]).unwrap_or_else(|_| vec![0.0; dim])
    };
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..250 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for &i in train {
            let x = unit(i);
            let z: f64 = b + w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - labels[i] as f64;
            for (g, c) in gw.iter_mut().zip(&x) {
                *g += err * c;
            }
            gb += err;
        }
        let scale = lr / train.len() as f64;
        for (a, g) in w.iter_mut().zip(&gw) {
            *a -= scale * g;
        }
        b -= scale * gb;
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let x = unit(i);
            let z: f64 = b + w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (labels[i] == 1)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Resolved-config echo followed by one JSON record per line.
pub fn write_metric_log(path: &Path, cfg: &TrainConfig, records: &[MetricRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let header = serde_json::json!({ "config": cfg });
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Malformed(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Encoder parameters plus the task head and the resolved config, in the
/// shared checkpoint container.
pub fn save_train_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    params: &ViTParams,
    head_w: &Tensor,
    head_b: &Tensor,
) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = params.entries();
    entries.push(("head_w".into(), head_w));
    entries.push(("head_b".into(), head_b));
    let meta = serde_json::json!({ "train_config": cfg });
    save_checkpoint(path, &entries, &meta)
}

pub fn load_train_checkpoint(path: &Path) -> Result<(TrainConfig, ViTParams, Tensor, Tensor)> {
    let ckpt = load_checkpoint(path)?;
    let cfg_value = ckpt
        .meta
        .get("train_config")
        .ok_or_else(|| Error::Malformed("checkpoint metadata lacks train_config".into()))?;
    let cfg: TrainConfig = serde_json::from_value(cfg_value.clone())
        .map_err(|e| Error::Malformed(format!("bad train_config in checkpoint: {e}")))?;
    let params = ViTParams::from_checkpoint(&cfg.vit, &ckpt)?;
    let head_w = ckpt.get("head_w")?.clone();
    let head_b = ckpt.get("head_b")?.clone();
    if head_w.shape() != [TARGET_DIM, cfg.vit.dim] || head_b.shape() != [TARGET_DIM] {
        return Err(Error::ShapeMismatch(format!(
            "task head shapes {:?}/{:?} do not match the config",
            head_w.shape(),
            head_b.shape()
        )));
    }
    Ok((cfg, params, head_w, head_b))
}

/// Run training from a config: load the dataset, train, optionally write the
/// checkpoint and metric log. Thread count comes from `ICON_THREADS` (>= 1).
pub fn run_training(
    cfg: &TrainConfig,
    out_checkpoint: Option<&Path>,
    out_metrics: Option<&Path>,
) -> Result<TrainOutputs> {
    let dataset = load_dataset(&cfg.dataset)?;
    let threads = std::env::var("ICON_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    let outputs = train(cfg, &dataset, threads)?;
    if let Some(path) = out_metrics {
        write_metric_log(path, cfg, &outputs.records)?;
    }
    if let Some(path) = out_checkpoint {
        save_train_checkpoint(path, cfg, &outputs.params, &outputs.head_w, &outputs.head_b)?;
    }
    Ok(outputs)
}

/// Median wall time for drawing one (agent, environment) key pair.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchRecord {
    pub sampler: SamplerKind,
    pub n_agent: usize,
    pub n_env: usize,
    pub median_seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time both samplers drawing key sets of each requested size from random
/// masks on a `grid_h x grid_w` grid. Every rep re-rolls the mask and both
/// samplers see identical masks and budgets.
pub fn bench_sampling(
    grid_h: usize,
    grid_w: usize,
    counts: &[(usize, usize)],
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("key-count pairs"));
    }
    if reps == 0 {
        return Err(Error::EmptyInput("benchmark repetitions"));
    }
    let cells = grid_h * grid_w;
    let max_agent = counts.iter().map(|c| c.0).max().unwrap();
    let max_env = counts.iter().map(|c| c.1).max().unwrap();
    if max_agent + max_env > cells {
        return Err(Error::RegionExhausted {
            requested: max_agent + max_env,
            available: cells,
        });
    }
    let agent_cells = (cells / 3).clamp(max_agent, cells - max_env);

    // masks are prepared once per rep, outside the timed section
    let base = seeded_rng(seed);
    let mut masks = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut rng = base.substream(&[r as u64]);
        let full = TokenMask::new(grid_h, grid_w, vec![1; cells])?;
        let chosen = random_sample(&full, agent_cells, &mut rng)?;
        let mut data = vec![0u8; cells];
        for idx in &chosen.indices {
            data[idx.flat(grid_w)] = 1;
        }
        masks.push(TokenMask::new(grid_h, grid_w, data)?);
    }

    const INNER: u32 = 8;
    let mut out = Vec::new();
    for kind in [SamplerKind::Fps, SamplerKind::Random] {
        for &(n_agent, n_env) in counts {
            let mut times = Vec::with_capacity(reps);
            for (r, mask) in masks.iter().enumerate() {
                let env_mask = mask.complement();
                let mut rng = base.substream(&[r as u64, n_agent as u64, n_env as u64]);
                let begin = Instant::now();
                for _ in 0..INNER {
                    match kind {
                        SamplerKind::Fps => {
                            fps2d(mask, n_agent, &mut rng)?;
                            fps2d(&env_mask, n_env, &mut rng)?;
                        }
                        SamplerKind::Random => {
                            random_sample(mask, n_agent, &mut rng)?;
                            random_sample(&env_mask, n_env, &mut rng)?;
                        }
                    }
                }
                times.push(begin.elapsed().as_secs_f64() / INNER as f64);
            }
            out.push(BenchRecord {
                sampler: kind,
                n_agent,
                n_env,
                median_seconds: median(times),
            });
        }
    }
    Ok(out)
}

/// Write a layer's [CLS] attention over tokens for one dataset image:
/// `<base>.f32` holds the raw row-major grid as little-endian f32, and
/// `<base>.pgm` a min-max normalized 8-bit visualization.
pub fn export_attention(
    checkpoint: &Path,
    dataset: &Path,
    image_index: usize,
    layer: usize,
    out_base: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let (cfg, params, _, _) = load_train_checkpoint(checkpoint)?;
    let samples = load_dataset(dataset)?;
    let sample = samples.get(image_index).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "image index {image_index} out of range for {} samples",
            samples.len()
        ))
    })?;
    let (img_c, _) = center_crop_pair(&sample.image, &sample.mask, cfg.vit.height, cfg.vit.width)?;
    let record = vit_forward(&img_c, &params, &cfg.vit)?;
    let row = cls_attention_row(&record, layer)?;
    let normalized = crate::vit::attention_map(&record, layer)?;

    let raw_path = out_base.with_extension("f32");
    let mut raw = Vec::with_capacity(row.len() * 4);
    for &v in &row {
        raw.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;

    let pgm_path = out_base.with_extension("pgm");
    let mut pgm = format!("P5\n{} {}\n255\n", cfg.vit.grid_w(), cfg.vit.grid_h()).into_bytes();
    pgm.extend(normalized.iter().map(|&v| (v * 255.0).round() as u8));
    std::fs::write(&pgm_path, pgm).map_err(|e| Error::io(&pgm_path, e))?;
    Ok((raw_path, pgm_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{make_dataset, SceneConfig};

    fn tiny_scene_cfg() -> SceneConfig {
        SceneConfig {
            height: 24,
            width: 24,
            links: 2,
            link_len: (5.0, 8.0),
            link_width: (3.0, 4.5),
            distractors: 1,
            ..SceneConfig::default()
        }
    }

    fn tiny_train_cfg(dataset: PathBuf) -> TrainConfig {
        TrainConfig {
            vit: ViTConfig {
                height: 16,
                width: 16,
                channels: 3,
                patch: 4,
                dim: 8,
                layers: 2,
                heads: 2,
                mlp_ratio: 2.0,
            },
            contrast: ContrastConfig {
                n_agent: 3,
                n_env: 8,
                ..ContrastConfig::default()
            },
            batch_size: 4,
            epochs: 2,
            eval_samples: 4,
            seed: 11,
            dataset,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path, n: usize, seed: u64) -> (PathBuf, Vec<SceneSample>) {
        let path = dir.join(format!("scenes_{n}_{seed}.icds"));
        let samples = make_dataset(n, &tiny_scene_cfg(), seed, &path).unwrap();
        (path, samples)
    }

    #[test]
    fn adam_matches_a_hand_traced_scalar_run() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut state = AdamState::new(1);
        let mut p = vec![1.0];

        // step 1, g = 0.5
        adam_step(&mut state, &mut p, &[0.5], &cfg).unwrap();
        let m1 = 0.1_f64 * 0.5;
        let v1 = 0.001_f64 * 0.25;
        let expect1 = 1.0 - 0.1 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
        assert!((p[0] - expect1).abs() < 1e-15, "{} vs {expect1}", p[0]);

        // step 2, g = -0.25
        adam_step(&mut state, &mut p, &[-0.25], &cfg).unwrap();
        let m2 = 0.9 * m1 + 0.1 * (-0.25);
        let v2 = 0.999 * v1 + 0.001 * 0.0625;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let expect2 = expect1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect2).abs() < 1e-15, "{} vs {expect2}", p[0]);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_alone() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(3);
        let mut p = vec![0.5, -2.0, 7.0];
        let before = p.clone();
        for _ in 0..4 {
            adam_step(&mut state, &mut p, &[0.0, 0.0, 0.0], &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(
            adam_step(&mut state, &mut p, &[f64::NAN, 0.0], &cfg),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            adam_step(&mut state, &mut p, &[1.0], &cfg),
            Err(Error::ShapeMismatch(_))
        ));
        let bad = AdamConfig {
            lr: -1.0,
            ..AdamConfig::default()
        };
        assert!(adam_step(&mut state, &mut p, &[0.0, 0.0], &bad).is_err());
    }

    #[test]
    fn centroid_of_a_known_mask() {
        let mut mask = PixelMask::zeros(4, 8);
        mask.set(1, 2, 1);
        mask.set(3, 6, 1);
        let c = mask_centroid(&mask).unwrap();
        assert!((c[0] - (1.5 + 3.5) / 2.0 / 4.0).abs() < 1e-15);
        assert!((c[1] - (2.5 + 6.5) / 2.0 / 8.0).abs() < 1e-15);
        assert_eq!(mask_centroid(&PixelMask::zeros(4, 8)), None);
    }

    #[test]
    fn separability_is_one_for_orthogonal_classes_and_zero_for_identical() {
        // 2x2 grid, dim 2: agent tokens on e1, environment tokens on e2
        let tmask = TokenMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let fmap = FeatureMap::new(
            2,
            2,
            2,
            vec![3.0, 0.0, 5.0, 0.0, 0.0, 1.0, 0.0, 2.0],
        )
        .unwrap();
        let margin = token_separability(&fmap, &tmask).unwrap();
        assert!((margin - 1.0).abs() < 1e-12);

        let same = FeatureMap::new(2, 2, 2, vec![1.0; 8]).unwrap();
        let margin = token_separability(&same, &tmask).unwrap();
        assert!(margin.abs() < 1e-12);

        let all_agent = TokenMask::new(2, 2, vec![1; 4]).unwrap();
        assert!(matches!(
            token_separability(&fmap, &all_agent),
            Err(Error::DegenerateMask { .. })
        ));

        // A lone token forms no within-class pair, so the class-balanced
        // within term is undefined for its class.
        let singleton = TokenMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert!(matches!(
            token_separability(&fmap, &singleton),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn separability_matches_pairwise_oracle_on_unbalanced_classes() {
        // 3 agent vs 13 environment tokens: a pooled pair average would be
        // dominated by environment pairs, so this exercises the balancing.
        // The oracle normalizes and loops over every pair explicitly.
        let (gh, gw, dim) = (4, 4, 5);
        let n = gh * gw;
        let mut rng = seeded_rng(11);
        let data: Vec<f64> = (0..n * dim).map(|_| rng.next_normal()).collect();
        let fmap = FeatureMap::new(gh, gw, dim, data).unwrap();
        let mut mask = vec![0u8; n];
        for t in [0, 5, 10] {
            mask[t] = 1;
        }
        let tmask = TokenMask::new(gh, gw, mask.clone()).unwrap();

        let unit = |t: usize| {
            let v = fmap.token(t);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let cos = |a: usize, b: usize| {
            unit(a)
                .iter()
                .zip(unit(b))
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let (mut wa, mut we, mut bt) = ((0.0, 0u32), (0.0, 0u32), (0.0, 0u32));
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let slot = match (mask[a], mask[b]) {
                    (1, 1) => &mut wa,
                    (0, 0) => &mut we,
                    _ => &mut bt,
                };
                slot.0 += cos(a, b);
                slot.1 += 1;
            }
        }
        let oracle = 0.5 * (wa.0 / wa.1 as f64 + we.0 / we.1 as f64) - bt.0 / bt.1 as f64;
        let got = token_separability(&fmap, &tmask).unwrap();
        assert!((got - oracle).abs() < 1e-12, "got {got}, oracle {oracle}");
    }

    #[test]
    fn separability_of_random_features_averages_near_zero() {
        // Independent Gaussian features carry no class structure; at dim 32
        // individual cosines are small and the trial-mean margin settles
        // well inside +/-0.05.
        let (gh, gw, dim) = (7, 7, 32);
        let n = gh * gw;
        let mut total = 0.0;
        for trial in 0..100 {
            let mut rng = seeded_rng(1000 + trial);
            let data: Vec<f64> = (0..n * dim).map(|_| rng.next_normal()).collect();
            let fmap = FeatureMap::new(gh, gw, dim, data).unwrap();
            let mut mask = vec![0u8; n];
            for m in mask.iter_mut().take(8) {
                *m = 1;
            }
            let tmask = TokenMask::new(gh, gw, mask).unwrap();
            total += token_separability(&fmap, &tmask).unwrap();
        }
        let mean = total / 100.0;
        assert!(mean.abs() < 0.05, "mean margin {mean}");
    }

    #[test]
    fn probe_separates_linearly_separable_classes() {
        let mut rng = seeded_rng(5);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let label = (i % 2) as u8;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            features.push(vec![
                sign * 1.0 + 0.2 * rng.next_normal(),
                0.2 * rng.next_normal(),
                0.2 * rng.next_normal(),
            ]);
            labels.push(label);
        }
        let acc = linear_probe(&features, &labels, 7).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");

        let one_class = vec![0u8; 200];
        assert!(matches!(
            linear_probe(&features, &one_class, 7),
            Err(Error::DegenerateMask { .. })
        ));
    }

    #[test]
    fn probe_is_deterministic_for_a_fixed_split_seed() {
        let mut rng = seeded_rng(9);
        let features: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.next_normal()).collect())
            .collect();
        let labels: Vec<u8> = (0..60).map(|i| (i % 3 == 0) as u8).collect();
        let a = linear_probe(&features, &labels, 123).unwrap();
        let b = linear_probe(&features, &labels, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_runs_and_the_task_loss_decreases() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 16, 3);
        let mut cfg = tiny_train_cfg(path);
        cfg.epochs = 6;
        let out = train(&cfg, &samples, 1).unwrap();
        assert_eq!(out.records.len(), 6);
        for r in &out.records {
            assert!(r.task_loss.is_finite());
            assert_eq!(r.icon_per_layer.len(), cfg.vit.layers);
            assert_eq!(r.margin_per_layer.len(), cfg.vit.layers);
            assert!((0.0..=1.0).contains(&r.probe_accuracy));
            assert!(r.icon_per_layer.iter().all(|v| v.is_finite()));
        }
        let first = out.records.first().unwrap().task_loss;
        let last = out.records.last().unwrap().task_loss;
        assert!(
            last < first,
            "task loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn reruns_are_bitwise_identical_apart_from_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 4);
        let cfg = tiny_train_cfg(path);
        let a = train(&cfg, &samples, 1).unwrap();
        let b = train(&cfg, &samples, 1).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.head_w, b.head_w);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            let mut rb = rb.clone();
            rb.wall_time_s = ra.wall_time_s;
            assert_eq!(*ra, rb);
        }
    }

    #[test]
    fn zero_lambda_trajectory_ignores_the_contrast_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 6);
        let mut a_cfg = tiny_train_cfg(path);
        a_cfg.lambda = 0.0;
        let mut b_cfg = a_cfg.clone();
        b_cfg.contrast.n_agent = 1;
        b_cfg.contrast.n_env = 2;
        b_cfg.contrast.sampler = SamplerKind::Random;
        b_cfg.mlc.gamma = 3.0;
        b_cfg.beta = 0.25;
        let a = train(&a_cfg, &samples, 1).unwrap();
        let b = train(&b_cfg, &samples, 1).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.head_w, b.head_w);
        assert_eq!(a.head_b, b.head_b);
        let tasks_a: Vec<f64> = a.records.iter().map(|r| r.task_loss).collect();
        let tasks_b: Vec<f64> = b.records.iter().map(|r| r.task_loss).collect();
        assert_eq!(tasks_a, tasks_b);
    }

    #[test]
    fn thread_count_does_not_change_the_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 8);
        let cfg = tiny_train_cfg(path);
        let a = train(&cfg, &samples, 1).unwrap();
        let b = train(&cfg, &samples, 3).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.head_w, b.head_w);
        assert_eq!(a.head_b, b.head_b);
    }

    #[test]
    fn single_level_runs_and_differs_from_multi_level() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 10);
        let multi = tiny_train_cfg(path);
        let mut single = multi.clone();
        single.multi_level = false;
        let a = train(&multi, &samples, 1).unwrap();
        let b = train(&single, &samples, 1).unwrap();
        assert_ne!(a.params.to_flat(), b.params.to_flat());
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 12);
        let cfg = tiny_train_cfg(path);
        let out = train(&cfg, &samples, 1).unwrap();
        let ckpt = dir.path().join("run.ickp");
        save_train_checkpoint(&ckpt, &cfg, &out.params, &out.head_w, &out.head_b).unwrap();
        let (cfg2, params2, head_w2, head_b2) = load_train_checkpoint(&ckpt).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(out.params.to_flat(), params2.to_flat());
        assert_eq!(out.head_w, head_w2);
        assert_eq!(out.head_b, head_b2);
    }

    #[test]
    fn metric_log_layout_and_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 14);
        let cfg = tiny_train_cfg(path);
        let out = train(&cfg, &samples, 1).unwrap();
        let log_a = dir.path().join("a.jsonl");
        let log_b = dir.path().join("b.jsonl");
        write_metric_log(&log_a, &cfg, &out.records).unwrap();
        write_metric_log(&log_b, &cfg, &out.records).unwrap();
        let text = std::fs::read_to_string(&log_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + out.records.len());
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["config"]["seed"], serde_json::json!(cfg.seed));
        let parsed: MetricRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(parsed, out.records[0]);
        assert_eq!(
            std::fs::read(&log_a).unwrap(),
            std::fs::read(&log_b).unwrap()
        );
    }

    #[test]
    fn run_training_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = tiny_dataset(dir.path(), 12, 16);
        let cfg = tiny_train_cfg(path);
        let ckpt = dir.path().join("out.ickp");
        let log = dir.path().join("out.jsonl");
        let out = run_training(&cfg, Some(&ckpt), Some(&log)).unwrap();
        assert!(ckpt.exists() && log.exists());
        assert_eq!(out.records.len(), cfg.epochs);
        let (cfg2, _, _, _) = load_train_checkpoint(&ckpt).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn evaluate_rejects_an_empty_set_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 18);
        let cfg = tiny_train_cfg(path);
        let mut rng = seeded_rng(0);
        let params = ViTParams::init(&cfg.vit, &mut rng).unwrap();
        let head_w = Tensor::randn(&[TARGET_DIM, cfg.vit.dim], 0.02, &mut rng);
        let head_b = Tensor::zeros(&[TARGET_DIM]);
        assert!(matches!(
            evaluate(&cfg, &params, &head_w, &head_b, &[]),
            Err(Error::EmptyInput(_))
        ));
        let a = evaluate(&cfg, &params, &head_w, &head_b, &samples[..4]).unwrap();
        let b = evaluate(&cfg, &params, &head_w, &head_b, &samples[..4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples, 4);
    }

    #[test]
    fn bench_covers_every_sampler_and_count() {
        let counts = [(2, 6), (4, 12)];
        let out = bench_sampling(8, 8, &counts, 9, 1).unwrap();
        assert_eq!(out.len(), 4);
        for r in &out {
            assert!(r.median_seconds > 0.0);
        }
        for kind in [SamplerKind::Fps, SamplerKind::Random] {
            for &(na, ne) in &counts {
                assert!(out
                    .iter()
                    .any(|r| r.sampler == kind && r.n_agent == na && r.n_env == ne));
            }
        }
        assert!(bench_sampling(3, 3, &[(5, 5)], 3, 1).is_err());
        assert!(bench_sampling(8, 8, &[], 3, 1).is_err());
        assert!(bench_sampling(8, 8, &[(2, 6)], 0, 1).is_err());
    }

    #[test]
    fn attention_export_writes_raw_floats_and_a_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let (path, samples) = tiny_dataset(dir.path(), 12, 20);
        let mut cfg = tiny_train_cfg(path.clone());
        cfg.epochs = 1;
        let out = train(&cfg, &samples, 1).unwrap();
        let ckpt = dir.path().join("run.ickp");
        save_train_checkpoint(&ckpt, &cfg, &out.params, &out.head_w, &out.head_b).unwrap();

        let base = dir.path().join("attn");
        let (raw_path, pgm_path) = export_attention(&ckpt, &path, 2, cfg.vit.layers, &base).unwrap();
        let raw = std::fs::read(&raw_path).unwrap();
        assert_eq!(raw.len(), 4 * cfg.vit.n_tokens());
        let first = f32::from_le_bytes(raw[0..4].try_into().unwrap());
        assert!(first.is_finite() && first >= 0.0);

        let pgm = std::fs::read(&pgm_path).unwrap();
        let header = format!("P5\n{} {}\n255\n", cfg.vit.grid_w(), cfg.vit.grid_h());
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + cfg.vit.n_tokens());

        assert!(export_attention(&ckpt, &path, 99, cfg.vit.layers, &base).is_err());
        assert!(export_attention(&ckpt, &path, 0, 9, &base).is_err());
    }
}
