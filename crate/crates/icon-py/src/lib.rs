//! Python bindings: the contrastive-learning primitives (token thresholds,
//! 2D farthest point sampling, the InfoNCE losses, depth weights), the
//! scene generator, an encoder handle, and a config-driven training entry
//! point. Everything is seed-parameterized and deterministic, mirroring the
//! Rust API.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use icon_core::contrast::{
    info_nce_raw, multi_level_icon, ContrastConfig, FeatureMap, MLCConfig, SamplerKind,
};
use icon_core::maskgrid::{token_mask_from_pixels, ImageTensor, PixelMask, TokenMask};
use icon_core::numerics::seeded_rng;
use icon_core::sampler::{fps2d, random_sample};
use icon_core::synthworld::{render_scene, SceneConfig};
use icon_core::trainrun::{
    load_train_checkpoint, run_training, token_separability, TrainConfig,
};
use icon_core::vit::{vit_forward, ViTConfig, ViTParams};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn token_mask_from_flat(grid_h: usize, grid_w: usize, mask: Vec<u8>) -> PyResult<TokenMask> {
    TokenMask::new(grid_h, grid_w, mask).map_err(err)
}

fn sampler_from_str(name: &str) -> PyResult<SamplerKind> {
    match name {
        "fps" => Ok(SamplerKind::Fps),
        "random" => Ok(SamplerKind::Random),
        other => Err(err(format!(
            "unknown sampler {other:?} (expected \"fps\" or \"random\")"
        ))),
    }
}

/// Propagate a pixel mask to the patch grid: a token is 1 iff its patch
/// holds strictly more than `beta * patch^2` mask pixels.
#[pyfunction]
fn threshold_tokens(
    mask: Vec<u8>,
    height: usize,
    width: usize,
    patch: usize,
    beta: f64,
) -> PyResult<Vec<u8>> {
    let pixel_mask = PixelMask::new(height, width, mask).map_err(err)?;
    let tokens = token_mask_from_pixels(&pixel_mask, patch, beta).map_err(err)?;
    Ok(tokens.data().to_vec())
}

/// Farthest point sampling over the cells where `mask == 1`; returns
/// 1-based (row, col) grid indices in selection order.
#[pyfunction]
fn fps_indices(
    mask: Vec<u8>,
    grid_h: usize,
    grid_w: usize,
    n: usize,
    seed: u64,
) -> PyResult<Vec<(usize, usize)>> {
    let tmask = token_mask_from_flat(grid_h, grid_w, mask)?;
    let set = fps2d(&tmask, n, &mut seeded_rng(seed)).map_err(err)?;
    Ok(set.indices.iter().map(|i| (i.k, i.l)).collect())
}

/// Uniform sampling without replacement over the cells where `mask == 1`.
#[pyfunction]
fn random_indices(
    mask: Vec<u8>,
    grid_h: usize,
    grid_w: usize,
    n: usize,
    seed: u64,
) -> PyResult<Vec<(usize, usize)>> {
    let tmask = token_mask_from_flat(grid_h, grid_w, mask)?;
    let set = random_sample(&tmask, n, &mut seeded_rng(seed)).map_err(err)?;
    Ok(set.indices.iter().map(|i| (i.k, i.l)).collect())
}

/// InfoNCE where every positive key competes against all negatives but
/// never against the other positives.
#[pyfunction]
#[pyo3(signature = (query, positives, negatives, tau=0.1, normalize=true))]
fn info_nce(
    query: Vec<f64>,
    positives: Vec<Vec<f64>>,
    negatives: Vec<Vec<f64>>,
    tau: f64,
    normalize: bool,
) -> PyResult<f64> {
    info_nce_raw(&query, &positives, &negatives, tau, normalize).map_err(err)
}

/// Depth-fusion weights: softmax of `gamma * layer_index` over layers.
#[pyfunction]
fn layer_weights(layers: usize, gamma: f64) -> PyResult<Vec<f64>> {
    MLCConfig { gamma }.layer_weights(layers).map_err(err)
}

/// Multi-level symmetric contrastive loss over per-layer token features
/// (each `grid_h * grid_w * dim`, row-major).
#[pyfunction]
#[pyo3(signature = (per_layer, token_mask, grid_h, grid_w, dim, tau=0.1, n_agent=10, n_env=50, normalize=true, sampler="fps", gamma=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn icon_loss(
    per_layer: Vec<Vec<f64>>,
    token_mask: Vec<u8>,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    tau: f64,
    n_agent: usize,
    n_env: usize,
    normalize: bool,
    sampler: &str,
    gamma: f64,
    seed: u64,
) -> PyResult<f64> {
    let maps: Vec<FeatureMap> = per_layer
        .into_iter()
        .map(|data| FeatureMap::new(grid_h, grid_w, dim, data))
        .collect::<icon_core::Result<_>>()
        .map_err(err)?;
    let tmask = token_mask_from_flat(grid_h, grid_w, token_mask)?;
    let cfg = ContrastConfig {
        tau,
        n_agent,
        n_env,
        normalize,
        sampler: sampler_from_str(sampler)?,
    };
    let mlc = MLCConfig { gamma };
    multi_level_icon(&maps, &tmask, &cfg, &mlc, &seeded_rng(seed)).map_err(err)
}

/// Mean within-class minus between-class cosine similarity of token
/// features (`grid_h * grid_w * dim`, row-major). The within term averages
/// the two per-class means, so both classes need at least two tokens.
#[pyfunction]
fn separability(
    features: Vec<f64>,
    token_mask: Vec<u8>,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
) -> PyResult<f64> {
    let fmap = FeatureMap::new(grid_h, grid_w, dim, features).map_err(err)?;
    let tmask = token_mask_from_flat(grid_h, grid_w, token_mask)?;
    token_separability(&fmap, &tmask).map_err(err)
}

/// Render one scene; returns (rgb_bytes, mask_bytes, agent_state) with the
/// image row-major interleaved and the state holding the normalized
/// centroid followed by the joint angles.
#[pyfunction]
#[pyo3(signature = (seed, height=64, width=64, hard=false, links=3, distractors=2))]
fn scene(
    seed: u64,
    height: usize,
    width: usize,
    hard: bool,
    links: usize,
    distractors: usize,
) -> PyResult<(Vec<u8>, Vec<u8>, Vec<f64>)> {
    let cfg = SceneConfig {
        height,
        width,
        links,
        distractors,
        hard,
        ..SceneConfig::default()
    };
    let sample = render_scene(&cfg, &mut seeded_rng(seed)).map_err(err)?;
    Ok((
        sample.image.to_u8(),
        sample.mask.data().to_vec(),
        sample.agent_state,
    ))
}

/// Generate `n` scenes and write them as an ICDS dataset file.
#[pyfunction]
#[pyo3(signature = (path, n, seed, height=64, width=64, hard=false, link_len=None, link_width=None, distractors=None))]
#[allow(clippy::too_many_arguments)]
fn make_dataset(
    path: &str,
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    hard: bool,
    link_len: Option<(f64, f64)>,
    link_width: Option<(f64, f64)>,
    distractors: Option<usize>,
) -> PyResult<()> {
    let defaults = SceneConfig::default();
    let cfg = SceneConfig {
        height,
        width,
        hard,
        link_len: link_len.unwrap_or(defaults.link_len),
        link_width: link_width.unwrap_or(defaults.link_width),
        distractors: distractors.unwrap_or(defaults.distractors),
        ..defaults
    };
    icon_core::synthworld::make_dataset(n, &cfg, seed, std::path::Path::new(path))
        .map_err(err)?;
    Ok(())
}

/// Train from a JSON config string (the TrainConfig schema); optionally
/// writes the checkpoint and metric log, and returns the metric records as
/// a JSON array string.
#[pyfunction]
#[pyo3(signature = (config_json, out_checkpoint=None, out_metrics=None))]
fn train(
    config_json: &str,
    out_checkpoint: Option<&str>,
    out_metrics: Option<&str>,
) -> PyResult<String> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(err)?;
    cfg.validate().map_err(err)?;
    let out = run_training(
        &cfg,
        out_checkpoint.map(std::path::Path::new),
        out_metrics.map(std::path::Path::new),
    )
    .map_err(err)?;
    serde_json::to_string(&out.records).map_err(err)
}

/// A ViT feature extractor handle: either freshly initialized or loaded
/// from a training checkpoint.
#[pyclass]
struct Encoder {
    cfg: ViTConfig,
    params: ViTParams,
}

#[pymethods]
impl Encoder {
    /// Random initialization from a seed.
    #[new]
    #[pyo3(signature = (seed=0, height=56, width=56, patch=8, dim=32, layers=4, heads=4))]
    fn new(
        seed: u64,
        height: usize,
        width: usize,
        patch: usize,
        dim: usize,
        layers: usize,
        heads: usize,
    ) -> PyResult<Self> {
        let cfg = ViTConfig {
            height,
            width,
            patch,
            dim,
            layers,
            heads,
            ..ViTConfig::default()
        };
        cfg.validate().map_err(err)?;
        let params = ViTParams::init(&cfg, &mut seeded_rng(seed)).map_err(err)?;
        Ok(Encoder { cfg, params })
    }

    /// Load the encoder stored in a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Self> {
        let (cfg, params, _, _) = load_train_checkpoint(std::path::Path::new(path)).map_err(err)?;
        Ok(Encoder {
            cfg: cfg.vit,
            params,
        })
    }

    /// (grid_h, grid_w, dim) of the token feature maps.
    #[getter]
    fn grid(&self) -> (usize, usize, usize) {
        (self.cfg.grid_h(), self.cfg.grid_w(), self.cfg.dim)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }

    /// Token features of one layer (1-based) for an RGB image given as
    /// `height * width * 3` bytes; row-major `n_tokens x dim`.
    fn features(&self, image: Vec<u8>, layer: usize) -> PyResult<Vec<f64>> {
        let img =
            ImageTensor::from_u8(self.cfg.height, self.cfg.width, self.cfg.channels, &image)
                .map_err(err)?;
        let record = vit_forward(&img, &self.params, &self.cfg).map_err(err)?;
        Ok(record.features(layer).map_err(err)?.data().to_vec())
    }

    /// Final-layer [CLS] feature.
    fn cls(&self, image: Vec<u8>) -> PyResult<Vec<f64>> {
        let img =
            ImageTensor::from_u8(self.cfg.height, self.cfg.width, self.cfg.channels, &image)
                .map_err(err)?;
        let record = vit_forward(&img, &self.params, &self.cfg).map_err(err)?;
        Ok(record.final_cls().to_vec())
    }

    /// The [CLS] token's head-averaged attention over tokens at a layer,
    /// as a row-major `grid_h x grid_w` map.
    fn attention(&self, image: Vec<u8>, layer: usize) -> PyResult<Vec<f64>> {
        let img =
            ImageTensor::from_u8(self.cfg.height, self.cfg.width, self.cfg.channels, &image)
                .map_err(err)?;
        let record = vit_forward(&img, &self.params, &self.cfg).map_err(err)?;
        icon_core::vit::cls_attention_row(&record, layer).map_err(err)
    }
}

#[pymodule]
fn icon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(threshold_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(fps_indices, m)?)?;
    m.add_function(wrap_pyfunction!(random_indices, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(layer_weights, m)?)?;
    m.add_function(wrap_pyfunction!(icon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(separability, m)?)?;
    m.add_function(wrap_pyfunction!(scene, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Encoder>()?;
    Ok(())
}
