//! A minimal pre-norm Vision Transformer over f64, exposing every layer's
//! token features (for the multi-level contrastive objective) and a
//! hand-derived backward pass that accepts upstream gradients injected at
//! each layer's token outputs plus a gradient on the final [CLS] feature.
//!
//! The head that consumes [CLS] lives with the training loop; this module
//! deliberately applies no final layer norm, so the head reads the raw
//! final-layer [CLS] feature.

use std::io::{Read, Write};
use std::path::Path;

use crate::contrast::FeatureMap;
use crate::error::{Error, Result};
use crate::maskgrid::{patchify_image, ImageTensor};
use crate::numerics::{Rng, Tensor};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    /// Input image height (after any cropping).
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Token embedding dimension.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            height: 56,
            width: 56,
            channels: 3,
            patch: 8,
            dim: 32,
            layers: 4,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("image dims must be positive".into()));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} must be divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.layers == 0 || self.heads == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig(
                "dim, layers, and heads must be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed dim {} must be divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.hidden_dim() == 0 {
            return Err(Error::InvalidConfig(format!(
                "mlp ratio {} yields an empty hidden layer",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    /// Patch tokens (excluding [CLS]).
    pub fn n_tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Sequence length including [CLS].
    pub fn seq_len(&self) -> usize {
        self.n_tokens() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn patch_vec_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// One encoder layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All encoder weights. Weight matrices are row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
}

impl ViTParams {
    /// Seeded initialization: weights and embeddings from a normal with
    /// std 0.02, biases zero, layer-norm gains one.
    pub fn init(cfg: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hid = cfg.hidden_dim();
        let mut layers = Vec::with_capacity(cfg.layers);
        let randn = |shape: &[usize], rng: &mut Rng| Tensor::randn(shape, INIT_STD, rng);
        let mut p = ViTParams {
            patch_w: randn(&[d, cfg.patch_vec_len()], rng),
            patch_b: Tensor::zeros(&[d]),
            cls: randn(&[d], rng),
            pos: randn(&[cfg.seq_len(), d], rng),
            layers: vec![],
        };
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                ln1_g: Tensor::from_vec(&[d], vec![1.0; d])?,
                ln1_b: Tensor::zeros(&[d]),
                wq: randn(&[d, d], rng),
                bq: Tensor::zeros(&[d]),
                wk: randn(&[d, d], rng),
                bk: Tensor::zeros(&[d]),
                wv: randn(&[d, d], rng),
                bv: Tensor::zeros(&[d]),
                wo: randn(&[d, d], rng),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::from_vec(&[d], vec![1.0; d])?,
                ln2_b: Tensor::zeros(&[d]),
                w1: randn(&[hid, d], rng),
                b1: Tensor::zeros(&[hid]),
                w2: randn(&[d, hid], rng),
                b2: Tensor::zeros(&[d]),
            });
        }
        p.layers = layers;
        Ok(p)
    }

    /// Zero-valued parameters with the same shapes (gradient accumulators).
    pub fn zeros(cfg: &ViTConfig) -> Result<Self> {
        let d = cfg.dim;
        let hid = cfg.hidden_dim();
        let layer = || LayerParams {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[hid, d]),
            b1: Tensor::zeros(&[hid]),
            w2: Tensor::zeros(&[d, hid]),
            b2: Tensor::zeros(&[d]),
        };
        cfg.validate()?;
        Ok(ViTParams {
            patch_w: Tensor::zeros(&[d, cfg.patch_vec_len()]),
            patch_b: Tensor::zeros(&[d]),
            cls: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[cfg.seq_len(), d]),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
        })
    }

    /// Named tensors in canonical (checkpoint and flattening) order.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("cls".into(), &self.cls),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            out.extend([
                (format!("layer{n}.ln1_g"), &l.ln1_g),
                (format!("layer{n}.ln1_b"), &l.ln1_b),
                (format!("layer{n}.wq"), &l.wq),
                (format!("layer{n}.bq"), &l.bq),
                (format!("layer{n}.wk"), &l.wk),
                (format!("layer{n}.bk"), &l.bk),
                (format!("layer{n}.wv"), &l.wv),
                (format!("layer{n}.bv"), &l.bv),
                (format!("layer{n}.wo"), &l.wo),
                (format!("layer{n}.bo"), &l.bo),
                (format!("layer{n}.ln2_g"), &l.ln2_g),
                (format!("layer{n}.ln2_b"), &l.ln2_b),
                (format!("layer{n}.w1"), &l.w1),
                (format!("layer{n}.b1"), &l.b1),
                (format!("layer{n}.w2"), &l.w2),
                (format!("layer{n}.b2"), &l.b2),
            ]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Concatenate all tensors in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for (_, t) in self.entries() {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// Overwrite all tensors from a flat vector in canonical order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} values, model wants {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Element-wise `self += scale * other` over all tensors.
    pub fn add_scaled(&mut self, other: &ViTParams, scale: f64) -> Result<()> {
        let theirs = other.entries();
        for (mine, (name, t)) in self.tensors_mut().into_iter().zip(theirs) {
            if mine.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!("parameter {name}")));
            }
            for (a, b) in mine.data_mut().iter_mut().zip(t.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }
}

fn layer_norm_forward(
    x: &[f64],
    rows: usize,
    d: usize,
    g: &[f64],
    b: &[f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
    y: &mut [f64],
) {
    for t in 0..rows {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = inv;
        for i in 0..d {
            let xh = (row[i] - mean) * inv;
            xhat[t * d + i] = xh;
            y[t * d + i] = xh * g[i] + b[i];
        }
    }
}

/// Accumulates into `dx`, `dg`, `db`.
fn layer_norm_backward(
    dy: &[f64],
    rows: usize,
    d: usize,
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    for t in 0..rows {
        let off = t * d;
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dyv = dy[off + i];
            let xh = xhat[off + i];
            dg[i] += dyv * xh;
            db[i] += dyv;
            let dxh = dyv * g[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = inv_std[t];
        for i in 0..d {
            let dxh = dy[off + i] * g[i];
            dx[off + i] += inv * (dxh - mean_dxhat - xhat[off + i] * mean_dxhat_xhat);
        }
    }
}

/// `y[t] = W x[t] + b` for row-major `W: [dout, din]`.
fn linear_forward(x: &[f64], rows: usize, din: usize, w: &[f64], b: &[f64], dout: usize, y: &mut [f64]) {
    for t in 0..rows {
        let xin = &x[t * din..(t + 1) * din];
        let yout = &mut y[t * dout..(t + 1) * dout];
        yout.copy_from_slice(b);
        for (o, yo) in yout.iter_mut().enumerate() {
            let wrow = &w[o * din..(o + 1) * din];
            let mut acc = 0.0;
            for i in 0..din {
                acc += wrow[i] * xin[i];
            }
            *yo += acc;
        }
    }
}

/// Accumulates `dw`, `db`, and `dx` for [`linear_forward`].
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for t in 0..rows {
        let xin = &x[t * din..(t + 1) * din];
        let dyo = &dy[t * dout..(t + 1) * dout];
        let dxo = &mut dx[t * din..(t + 1) * din];
        for (o, &g) in dyo.iter().enumerate() {
            db[o] += g;
            let wrow = &w[o * din..(o + 1) * din];
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwrow[i] += g * xin[i];
                dxo[i] += g * wrow[i];
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    y1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax attention probabilities, `heads x T x T` row-major.
    attn: Vec<f64>,
    concat: Vec<f64>,
    ln2: LnCache,
    y2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    x_out: Vec<f64>,
}

/// Every intermediate needed by the backward pass and by feature/attention
/// readouts.
pub struct ForwardRecord {
    cfg: ViTConfig,
    patch_vecs: Vec<f64>,
    x0: Vec<f64>,
    layers: Vec<LayerCache>,
}

impl ForwardRecord {
    fn check_layer(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.cfg.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                layers: self.cfg.layers,
            });
        }
        Ok(layer - 1)
    }

    /// Token features of `layer` (1-based), arranged on the patch grid.
    pub fn features(&self, layer: usize) -> Result<FeatureMap> {
        let i = self.check_layer(layer)?;
        let d = self.cfg.dim;
        FeatureMap::new(
            self.cfg.grid_h(),
            self.cfg.grid_w(),
            d,
            self.layers[i].x_out[d..].to_vec(),
        )
    }

    /// All layers' token features, shallow to deep.
    pub fn all_features(&self) -> Result<Vec<FeatureMap>> {
        (1..=self.cfg.layers).map(|l| self.features(l)).collect()
    }

    /// [CLS] feature of `layer` (1-based).
    pub fn cls(&self, layer: usize) -> Result<&[f64]> {
        let i = self.check_layer(layer)?;
        Ok(&self.layers[i].x_out[..self.cfg.dim])
    }

    pub fn final_cls(&self) -> &[f64] {
        &self.layers[self.cfg.layers - 1].x_out[..self.cfg.dim]
    }

    /// Softmax attention probabilities of `layer`, `heads x T x T`.
    pub fn attention(&self, layer: usize) -> Result<&[f64]> {
        let i = self.check_layer(layer)?;
        Ok(&self.layers[i].attn)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }
}

/// Linear projection of the flattened patches, [CLS] prepended, positional
/// embeddings added. Returns the `T x D` embedded sequence.
pub fn patch_embed(img: &ImageTensor, params: &ViTParams, cfg: &ViTConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if img.height != cfg.height || img.width != cfg.width || img.channels != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{}x{} vs configured {}x{}x{}",
            img.height, img.width, img.channels, cfg.height, cfg.width, cfg.channels
        )));
    }
    let (x0, _) = embed_with_patches(img, params, cfg)?;
    Ok(x0)
}

fn embed_with_patches(
    img: &ImageTensor,
    params: &ViTParams,
    cfg: &ViTConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = cfg.dim;
    let t = cfg.seq_len();
    let plen = cfg.patch_vec_len();
    let patches = patchify_image(img, cfg.patch)?;
    let mut patch_vecs = Vec::with_capacity(cfg.n_tokens() * plen);
    for p in &patches {
        patch_vecs.extend_from_slice(p);
    }
    let mut x0 = vec![0.0; t * d];
    x0[..d].copy_from_slice(params.cls.data());
    linear_forward(
        &patch_vecs,
        cfg.n_tokens(),
        plen,
        params.patch_w.data(),
        params.patch_b.data(),
        d,
        &mut x0[d..],
    );
    for (xi, pi) in x0.iter_mut().zip(params.pos.data()) {
        *xi += pi;
    }
    Ok((x0, patch_vecs))
}

/// Full encoder forward pass with all intermediates recorded.
pub fn vit_forward(img: &ImageTensor, params: &ViTParams, cfg: &ViTConfig) -> Result<ForwardRecord> {
    cfg.validate()?;
    if img.height != cfg.height || img.width != cfg.width || img.channels != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{}x{} vs configured {}x{}x{}",
            img.height, img.width, img.channels, cfg.height, cfg.width, cfg.channels
        )));
    }
    let (x0, patch_vecs) = embed_with_patches(img, params, cfg)?;
    let t = cfg.seq_len();
    let d = cfg.dim;
    let hid = cfg.hidden_dim();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut layers = Vec::with_capacity(cfg.layers);
    let mut x = x0.clone();
    for (li, lp) in params.layers.iter().enumerate() {
        let x_in = x;
        let mut ln1 = LnCache {
            xhat: vec![0.0; t * d],
            inv_std: vec![0.0; t],
        };
        let mut y1 = vec![0.0; t * d];
        layer_norm_forward(
            &x_in,
            t,
            d,
            lp.ln1_g.data(),
            lp.ln1_b.data(),
            &mut ln1.xhat,
            &mut ln1.inv_std,
            &mut y1,
        );
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        linear_forward(&y1, t, d, lp.wq.data(), lp.bq.data(), d, &mut q);
        linear_forward(&y1, t, d, lp.wk.data(), lp.bk.data(), d, &mut k);
        linear_forward(&y1, t, d, lp.wv.data(), lp.bv.data(), d, &mut v);

        let mut attn = vec![0.0; heads * t * t];
        let mut concat = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qrow = &q[i * d + off..i * d + off + dh];
                let arow = &mut attn[(h * t + i) * t..(h * t + i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..t {
                    let krow = &k[j * d + off..j * d + off + dh];
                    let mut s = 0.0;
                    for m in 0..dh {
                        s += qrow[m] * krow[m];
                    }
                    let s = s * scale;
                    arow[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut z = 0.0;
                for aj in arow.iter_mut() {
                    *aj = (*aj - max).exp();
                    z += *aj;
                }
                for aj in arow.iter_mut() {
                    *aj /= z;
                }
                let crow = &mut concat[i * d + off..i * d + off + dh];
                for j in 0..t {
                    let a = attn[(h * t + i) * t + j];
                    let vrow = &v[j * d + off..j * d + off + dh];
                    for m in 0..dh {
                        crow[m] += a * vrow[m];
                    }
                }
            }
        }
        let mut x_mid = x_in.clone();
        {
            // attention output projection, added residually
            let mut proj = vec![0.0; t * d];
            linear_forward(&concat, t, d, lp.wo.data(), lp.bo.data(), d, &mut proj);
            for (xm, p) in x_mid.iter_mut().zip(&proj) {
                *xm += p;
            }
        }
        let mut ln2 = LnCache {
            xhat: vec![0.0; t * d],
            inv_std: vec![0.0; t],
        };
        let mut y2 = vec![0.0; t * d];
        layer_norm_forward(
            &x_mid,
            t,
            d,
            lp.ln2_g.data(),
            lp.ln2_b.data(),
            &mut ln2.xhat,
            &mut ln2.inv_std,
            &mut y2,
        );
        let mut h_pre = vec![0.0; t * hid];
        linear_forward(&y2, t, d, lp.w1.data(), lp.b1.data(), hid, &mut h_pre);
        let h_act: Vec<f64> = h_pre.iter().map(|&h| gelu(h)).collect();
        let mut x_out = x_mid.clone();
        {
            let mut mlp = vec![0.0; t * d];
            linear_forward(&h_act, t, hid, lp.w2.data(), lp.b2.data(), d, &mut mlp);
            for (xo, m) in x_out.iter_mut().zip(&mlp) {
                *xo += m;
            }
        }
        if x_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("encoder layer {} output", li + 1),
            });
        }
        layers.push(LayerCache {
            ln1,
            y1,
            q,
            k,
            v,
            attn,
            concat,
            ln2,
            y2,
            h_pre,
            h_act,
            x_out: x_out.clone(),
        });
        x = x_out;
    }
    Ok(ForwardRecord {
        cfg: *cfg,
        patch_vecs,
        x0,
        layers,
    })
}

/// Backward pass: accumulate parameter gradients from upstream gradients
/// injected at every layer's token outputs (`token_grads[i]`, `N x D` for
/// 1-based layer i+1) and a gradient on the final layer's [CLS] feature.
pub fn vit_backward(
    record: &ForwardRecord,
    params: &ViTParams,
    cfg: &ViTConfig,
    token_grads: &[Vec<f64>],
    cls_grad: &[f64],
) -> Result<ViTParams> {
    if token_grads.len() != cfg.layers {
        return Err(Error::RecordMismatch(format!(
            "{} upstream token gradients for {} layers",
            token_grads.len(),
            cfg.layers
        )));
    }
    let t = cfg.seq_len();
    let d = cfg.dim;
    let n = cfg.n_tokens();
    if cls_grad.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "cls gradient has {} entries, wants {d}",
            cls_grad.len()
        )));
    }
    for (i, g) in token_grads.iter().enumerate() {
        if g.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "layer {} token gradient has {} entries, wants {}",
                i + 1,
                g.len(),
                n * d
            )));
        }
    }
    if record.layers.len() != cfg.layers || record.x0.len() != t * d {
        return Err(Error::RecordMismatch(
            "forward record does not match the configuration".into(),
        ));
    }

    let hid = cfg.hidden_dim();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = ViTParams::zeros(cfg)?;

    // dx holds the gradient at the current layer's output; start at the top
    // with the final layer's injection plus the [CLS] head gradient.
    let mut dx = vec![0.0; t * d];
    dx[..d].copy_from_slice(cls_grad);
    dx[d..].copy_from_slice(&token_grads[cfg.layers - 1]);

    for li in (0..cfg.layers).rev() {
        let lc = &record.layers[li];
        let lp = &params.layers[li];
        let lg = &mut grads.layers[li];

        // MLP branch: x_out = x_mid + W2·gelu(W1·ln2(x_mid) + b1) + b2
        let mut d_hact = vec![0.0; t * hid];
        linear_backward(
            &lc.h_act,
            &dx,
            lp.w2.data(),
            t,
            hid,
            d,
            lg.w2.data_mut(),
            lg.b2.data_mut(),
            &mut d_hact,
        );
        let mut d_hpre = vec![0.0; t * hid];
        for i in 0..t * hid {
            d_hpre[i] = d_hact[i] * gelu_prime(lc.h_pre[i]);
        }
        let mut d_y2 = vec![0.0; t * d];
        linear_backward(
            &lc.y2,
            &d_hpre,
            lp.w1.data(),
            t,
            d,
            hid,
            lg.w1.data_mut(),
            lg.b1.data_mut(),
            &mut d_y2,
        );
        // residual: dx continues to x_mid, plus the LN2 path
        let mut d_xmid = dx;
        layer_norm_backward(
            &d_y2,
            t,
            d,
            lp.ln2_g.data(),
            &lc.ln2.xhat,
            &lc.ln2.inv_std,
            &mut d_xmid,
            lg.ln2_g.data_mut(),
            lg.ln2_b.data_mut(),
        );

        // Attention branch: x_mid = x_in + Wo·concat + bo
        let mut d_concat = vec![0.0; t * d];
        linear_backward(
            &lc.concat,
            &d_xmid,
            lp.wo.data(),
            t,
            d,
            d,
            lg.wo.data_mut(),
            lg.bo.data_mut(),
            &mut d_concat,
        );
        let mut d_q = vec![0.0; t * d];
        let mut d_k = vec![0.0; t * d];
        let mut d_v = vec![0.0; t * d];
        let mut d_arow = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let dcrow = &d_concat[i * d + off..i * d + off + dh];
                let arow = &lc.attn[(h * t + i) * t..(h * t + i + 1) * t];
                // dA = dO·Vᵀ and dV += Aᵀ·dO, fused over j
                let mut dot_da_a = 0.0;
                for j in 0..t {
                    let vrow = &lc.v[j * d + off..j * d + off + dh];
                    let dvrow = &mut d_v[j * d + off..j * d + off + dh];
                    let a = arow[j];
                    let mut da = 0.0;
                    for m in 0..dh {
                        da += dcrow[m] * vrow[m];
                        dvrow[m] += a * dcrow[m];
                    }
                    d_arow[j] = da;
                    dot_da_a += da * a;
                }
                // softmax row backward, then scores → q, k
                let qrow = &lc.q[i * d + off..i * d + off + dh];
                let dqrow_base = i * d + off;
                for j in 0..t {
                    let ds = arow[j] * (d_arow[j] - dot_da_a) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &lc.k[j * d + off..j * d + off + dh];
                    let dkrow = &mut d_k[j * d + off..j * d + off + dh];
                    for m in 0..dh {
                        d_q[dqrow_base + m] += ds * krow[m];
                        dkrow[m] += ds * qrow[m];
                    }
                }
            }
        }
        let mut d_y1 = vec![0.0; t * d];
        linear_backward(
            &lc.y1,
            &d_q,
            lp.wq.data(),
            t,
            d,
            d,
            lg.wq.data_mut(),
            lg.bq.data_mut(),
            &mut d_y1,
        );
        linear_backward(
            &lc.y1,
            &d_k,
            lp.wk.data(),
            t,
            d,
            d,
            lg.wk.data_mut(),
            lg.bk.data_mut(),
            &mut d_y1,
        );
        linear_backward(
            &lc.y1,
            &d_v,
            lp.wv.data(),
            t,
            d,
            d,
            lg.wv.data_mut(),
            lg.bv.data_mut(),
            &mut d_y1,
        );
        // residual: d_xmid continues to x_in, plus the LN1 path
        let mut d_xin = d_xmid;
        layer_norm_backward(
            &d_y1,
            t,
            d,
            lp.ln1_g.data(),
            &lc.ln1.xhat,
            &lc.ln1.inv_std,
            &mut d_xin,
            lg.ln1_g.data_mut(),
            lg.ln1_b.data_mut(),
        );
        // inject the next-lower layer's upstream token gradient at its output
        if li > 0 {
            for (dst, src) in d_xin[d..].iter_mut().zip(&token_grads[li - 1]) {
                *dst += src;
            }
        }
        dx = d_xin;
    }

    // Embedding: x0 = [cls; W_p·patches + b_p] + pos
    for (dp, dxv) in grads.pos.data_mut().iter_mut().zip(&dx) {
        *dp += dxv;
    }
    for (dc, dxv) in grads.cls.data_mut().iter_mut().zip(&dx[..d]) {
        *dc += dxv;
    }
    let plen = cfg.patch_vec_len();
    let mut d_patchvec = vec![0.0; n * plen];
    linear_backward(
        &record.patch_vecs,
        &dx[d..],
        params.patch_w.data(),
        n,
        plen,
        d,
        grads.patch_w.data_mut(),
        grads.patch_b.data_mut(),
        &mut d_patchvec,
    );
    Ok(grads)
}

/// Mean over heads of the [CLS]-query attention row at `layer` (1-based),
/// keeping only the entries that attend to patch tokens (row-major token
/// order). Entries are nonnegative; their sum is the share of [CLS]
/// attention that lands on patch tokens.
pub fn cls_attention_row(record: &ForwardRecord, layer: usize) -> Result<Vec<f64>> {
    let attn = record.attention(layer)?;
    let cfg = record.config();
    let t = cfg.seq_len();
    let n = cfg.n_tokens();
    let mut row = vec![0.0; n];
    for h in 0..cfg.heads {
        let cls_row = &attn[h * t * t..h * t * t + t];
        for j in 0..n {
            row[j] += cls_row[j + 1];
        }
    }
    for r in &mut row {
        *r /= cfg.heads as f64;
    }
    Ok(row)
}

/// [`cls_attention_row`] min-max rescaled to [0, 1] on the token grid
/// (constant rows map to all zeros).
pub fn attention_map(record: &ForwardRecord, layer: usize) -> Result<Vec<f64>> {
    let row = cls_attention_row(record, layer)?;
    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    Ok(row
        .iter()
        .map(|&v| if span > 0.0 { (v - min) / span } else { 0.0 })
        .collect())
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "ICKP", u32 LE version, u32 LE header length,
// UTF-8 JSON header {"params": [{"name", "shape"}...], "meta": {...}}, then
// raw little-endian f64 blobs in header order.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    params: Vec<HeaderEntry>,
    meta: serde_json::Value,
}

/// A loaded checkpoint: named tensors in file order plus the JSON metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Malformed(format!("checkpoint has no tensor named {name}")))
    }
}

pub fn save_checkpoint(
    path: &Path,
    entries: &[(String, &Tensor)],
    meta: &serde_json::Value,
) -> Result<()> {
    let header = Header {
        params: entries
            .iter()
            .map(|(name, t)| HeaderEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Malformed(format!("header encode: {e}")))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut w, CHECKPOINT_MAGIC)?;
    write(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
    write(&mut w, &(header_bytes.len() as u32).to_le_bytes())?;
    write(&mut w, &header_bytes)?;
    for (_, t) in entries {
        for v in t.data() {
            write(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("checkpoint magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "ICKP".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Truncated("checkpoint version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Truncated("checkpoint header length".into()))?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Truncated("checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.params.len());
    let mut f64buf = [0u8; 8];
    for entry in header.params {
        let len: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut f64buf)
                .map_err(|_| Error::Truncated(format!("tensor {}", entry.name)))?;
            data.push(f64::from_le_bytes(f64buf));
        }
        tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Malformed(
                "checkpoint has trailing bytes beyond the declared tensors".into(),
            ))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(Checkpoint {
        tensors,
        meta: header.meta,
    })
}

impl ViTParams {
    /// Reconstruct parameters from a checkpoint, validating every shape.
    pub fn from_checkpoint(cfg: &ViTConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut params = ViTParams::zeros(cfg)?;
        let wanted: Vec<(String, Vec<usize>)> = params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for ((name, shape), dst) in wanted.iter().zip(params.tensors_mut()) {
            let src = ckpt.get(name)?;
            if src.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {name} has shape {:?}, model wants {:?}",
                    src.shape(),
                    shape
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(params)
    }
}
