//! The agent-centric contrastive objective: class-mean queries over token
//! features, sampled key sets, the temperature-scaled InfoNCE variant whose
//! per-positive denominator pairs that positive against all negatives, the
//! symmetric agent/environment combination, depth-weighted multi-level
//! fusion, and the analytic gradients with respect to token features.

use crate::error::{Error, Result};
use crate::maskgrid::TokenMask;
use crate::numerics::{dot, l2_normalize, log_sum_exp, softmax, Rng};
use crate::sampler::{fps2d, random_sample, SampleSet};

/// Whether a token belongs to the agent or its environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Agent,
    Environment,
}

/// Token features arranged on the patch grid, one D-vector per cell,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid_h * grid_w * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature map {grid_h}x{grid_w}x{dim} wants {} values, got {}",
                grid_h * grid_w * dim,
                data.len()
            )));
        }
        Ok(FeatureMap {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Feature of the t-th token (row-major flat index).
    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shape guard: the mask must cover exactly this grid.
    pub fn matches(&self, tmask: &TokenMask) -> Result<()> {
        if self.grid_h != tmask.grid_h || self.grid_w != tmask.grid_w {
            return Err(Error::ShapeMismatch(format!(
                "feature map {}x{} vs token mask {}x{}",
                self.grid_h, self.grid_w, tmask.grid_h, tmask.grid_w
            )));
        }
        Ok(())
    }
}

/// A class-mean anchor vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub vector: Vec<f64>,
    pub class: TokenClass,
}

/// Features gathered at sampled grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    pub vectors: Vec<Vec<f64>>,
    pub class: TokenClass,
    pub sources: SampleSet,
}

impl KeySet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Key-selection strategy.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Fps,
    Random,
}

/// Hyperparameters of the per-layer contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    /// Temperature applied to every dot product.
    pub tau: f64,
    /// Requested number of agent keys (clamped to the region size).
    pub n_agent: usize,
    /// Requested number of environment keys (clamped to the region size).
    pub n_env: usize,
    /// L2-normalize the query and all keys before dot products.
    pub normalize: bool,
    pub sampler: SamplerKind,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.1,
            n_agent: 10,
            n_env: 50,
            normalize: true,
            sampler: SamplerKind::Fps,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.tau
            )));
        }
        if self.n_agent == 0 || self.n_env == 0 {
            return Err(Error::InvalidConfig(
                "key counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Depth weighting of the per-layer losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MLCConfig {
    /// Sharpness of the depth weighting; positive values favor deeper
    /// layers.
    pub gamma: f64,
}

impl Default for MLCConfig {
    fn default() -> Self {
        MLCConfig { gamma: 1.0 }
    }
}

impl MLCConfig {
    /// Normalized layer weights for `layers` levels: softmax of
    /// `gamma * i` over layer indices i = 1..=layers. They sum to 1 and are
    /// strictly increasing in depth when gamma > 0.
    pub fn layer_weights(&self, layers: usize) -> Result<Vec<f64>> {
        if layers == 0 {
            return Err(Error::EmptyInput("layer weights"));
        }
        let idx: Vec<f64> = (1..=layers).map(|i| i as f64).collect();
        softmax(&idx, self.gamma)
    }
}

/// Class-mean queries: q_agent averages the features where the mask is 1,
/// q_env averages the rest.
pub fn compute_queries(fmap: &FeatureMap, tmask: &TokenMask) -> Result<(Query, Query)> {
    fmap.matches(tmask)?;
    let n_agent = tmask.count_agent();
    let n_env = tmask.count_environment();
    if n_agent == 0 || n_env == 0 {
        return Err(Error::DegenerateMask {
            agent: n_agent,
            environment: n_env,
        });
    }
    let dim = fmap.dim;
    let mut q_a = vec![0.0; dim];
    let mut q_e = vec![0.0; dim];
    for t in 0..fmap.n_tokens() {
        let f = fmap.token(t);
        let target = if tmask.data()[t] == 1 {
            &mut q_a
        } else {
            &mut q_e
        };
        for d in 0..dim {
            target[d] += f[d];
        }
    }
    for d in 0..dim {
        q_a[d] /= n_agent as f64;
        q_e[d] /= n_env as f64;
    }
    Ok((
        Query {
            vector: q_a,
            class: TokenClass::Agent,
        },
        Query {
            vector: q_e,
            class: TokenClass::Environment,
        },
    ))
}

/// Gather the features at sampled positions into a key set.
pub fn gather_keys(fmap: &FeatureMap, sources: SampleSet, class: TokenClass) -> KeySet {
    let vectors = sources
        .indices
        .iter()
        .map(|idx| fmap.token(idx.flat(fmap.grid_w)).to_vec())
        .collect();
    KeySet {
        vectors,
        class,
        sources,
    }
}

fn maybe_normalize(v: &[f64], normalize: bool) -> Result<Vec<f64>> {
    if normalize {
        l2_normalize(v)
    } else {
        Ok(v.to_vec())
    }
}

fn check_finite(s: f64) -> Result<f64> {
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::NonFinite {
            context: "contrastive similarity".into(),
        })
    }
}

/// Temperature-scaled contrastive loss on raw vectors: the mean over
/// positives of `-log( e^{s⁺} / (e^{s⁺} + Σ e^{s⁻}) )` with `s = q·k/τ`,
/// evaluated in log-sum-exp form. Each positive competes against all
/// negatives but not against other positives.
pub fn info_nce_raw(
    q: &[f64],
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    tau: f64,
    normalize: bool,
) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive keys"));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let qn = maybe_normalize(q, normalize)?;
    let mut s_pos = Vec::with_capacity(pos.len());
    for k in pos {
        s_pos.push(check_finite(dot(&qn, &maybe_normalize(k, normalize)?) / tau)?);
    }
    let mut s_neg = Vec::with_capacity(neg.len());
    for k in neg {
        s_neg.push(check_finite(dot(&qn, &maybe_normalize(k, normalize)?) / tau)?);
    }
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(1 + s_neg.len());
    for &sp in &s_pos {
        scores.clear();
        scores.push(sp);
        scores.extend_from_slice(&s_neg);
        total += log_sum_exp(&scores) - sp;
    }
    Ok(total / pos.len() as f64)
}

/// Typed wrapper over [`info_nce_raw`].
pub fn info_nce(q: &Query, pos: &KeySet, neg: &KeySet, tau: f64, normalize: bool) -> Result<f64> {
    info_nce_raw(&q.vector, &pos.vectors, &neg.vectors, tau, normalize)
}

/// Loss plus gradients with respect to the *raw* (pre-normalization) query
/// and key vectors.
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_query: Vec<f64>,
    pub d_pos: Vec<Vec<f64>>,
    pub d_neg: Vec<Vec<f64>>,
}

/// Pull the gradient on a normalized vector `y = x / ||x||` back to `x`:
/// `dx = (dy − (dy·y) y) / ||x||`.
fn normalize_backward(x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let y: Vec<f64> = x.iter().map(|&v| v / norm).collect();
    let proj = dot(dy, &y);
    Ok(dy
        .iter()
        .zip(&y)
        .map(|(&g, &yv)| (g - proj * yv) / norm)
        .collect())
}

/// Analytic backward of [`info_nce_raw`].
///
/// Writing `Z_p = e^{s_p} + Σ_n e^{s_n}` for the p-th positive's partition
/// and `σ_{p·} = e^{s_·} / Z_p`, the similarity gradients are
/// `∂L/∂s_p = (σ_pp − 1)/|P|` and `∂L/∂s_n = (Σ_p σ_pn)/|P|`; they chain
/// into the vectors through `s = q·k/τ` and, when enabled, the
/// normalization map.
pub fn info_nce_grad_raw(
    q: &[f64],
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    tau: f64,
    normalize: bool,
) -> Result<InfoNceGrad> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive keys"));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let dim = q.len();
    let qn = maybe_normalize(q, normalize)?;
    let pos_n: Vec<Vec<f64>> = pos
        .iter()
        .map(|k| maybe_normalize(k, normalize))
        .collect::<Result<_>>()?;
    let neg_n: Vec<Vec<f64>> = neg
        .iter()
        .map(|k| maybe_normalize(k, normalize))
        .collect::<Result<_>>()?;
    let s_pos: Vec<f64> = pos_n
        .iter()
        .map(|k| check_finite(dot(&qn, k) / tau))
        .collect::<Result<_>>()?;
    let s_neg: Vec<f64> = neg_n
        .iter()
        .map(|k| check_finite(dot(&qn, k) / tau))
        .collect::<Result<_>>()?;

    let np = pos.len() as f64;
    let mut loss = 0.0;
    let mut ds_pos = vec![0.0; pos.len()];
    let mut ds_neg = vec![0.0; neg.len()];
    let mut scores = Vec::with_capacity(1 + s_neg.len());
    for (p, &sp) in s_pos.iter().enumerate() {
        scores.clear();
        scores.push(sp);
        scores.extend_from_slice(&s_neg);
        let lse = log_sum_exp(&scores);
        loss += lse - sp;
        // softmax over {positive p} ∪ negatives for this partition
        let sigma_pp = (sp - lse).exp();
        ds_pos[p] = (sigma_pp - 1.0) / np;
        for (n, &sn) in s_neg.iter().enumerate() {
            ds_neg[n] += (sn - lse).exp() / np;
        }
    }
    loss /= np;

    // s = qn·kn / τ, so ∂s/∂qn = kn/τ and ∂s/∂kn = qn/τ.
    let mut d_qn = vec![0.0; dim];
    let mut d_pos_n: Vec<Vec<f64>> = vec![vec![0.0; dim]; pos.len()];
    let mut d_neg_n: Vec<Vec<f64>> = vec![vec![0.0; dim]; neg.len()];
    for (p, kn) in pos_n.iter().enumerate() {
        let g = ds_pos[p] / tau;
        for d in 0..dim {
            d_qn[d] += g * kn[d];
            d_pos_n[p][d] = g * qn[d];
        }
    }
    for (n, kn) in neg_n.iter().enumerate() {
        let g = ds_neg[n] / tau;
        for d in 0..dim {
            d_qn[d] += g * kn[d];
            d_neg_n[n][d] = g * qn[d];
        }
    }

    let (d_query, d_pos, d_neg) = if normalize {
        (
            normalize_backward(q, &d_qn)?,
            pos.iter()
                .zip(&d_pos_n)
                .map(|(x, dy)| normalize_backward(x, dy))
                .collect::<Result<_>>()?,
            neg.iter()
                .zip(&d_neg_n)
                .map(|(x, dy)| normalize_backward(x, dy))
                .collect::<Result<_>>()?,
        )
    } else {
        (d_qn, d_pos_n, d_neg_n)
    };
    Ok(InfoNceGrad {
        loss,
        d_query,
        d_pos,
        d_neg,
    })
}

/// One layer's contrastive forward: loss, degeneracy flag, and the sampled
/// key positions (recorded so the backward pass reuses them).
#[derive(Debug, Clone, PartialEq)]
pub struct IconLevel {
    pub loss: f64,
    /// True when the mask has no agent or no environment tokens; the loss
    /// is 0 and must be excluded from gradients.
    pub degenerate: bool,
    pub agent_keys: SampleSet,
    pub env_keys: SampleSet,
}

fn sample_region(
    tmask: &TokenMask,
    requested: usize,
    kind: SamplerKind,
    rng: &mut Rng,
) -> Result<SampleSet> {
    let n = requested.min(tmask.count_agent());
    let mut set = match kind {
        SamplerKind::Fps => fps2d(tmask, n, rng),
        SamplerKind::Random => random_sample(tmask, n, rng),
    }?;
    // The loss is a function of the key set, not of selection order:
    // canonicalize to row-major so the numerics never depend on sampler
    // internals. When a budget clamps to the whole region, every sampler
    // yields the same keys and therefore bitwise the same loss.
    set.indices.sort_unstable();
    Ok(set)
}

/// One layer's symmetric contrastive loss with recorded key positions.
///
/// Key counts are clamped to each region's size; a mask whose agent or
/// environment class is empty yields the degenerate zero-loss result.
pub fn icon_forward(
    fmap: &FeatureMap,
    tmask: &TokenMask,
    cfg: &ContrastConfig,
    rng: &mut Rng,
) -> Result<IconLevel> {
    cfg.validate()?;
    let (q_a, q_e) = match compute_queries(fmap, tmask) {
        Ok(qs) => qs,
        Err(Error::DegenerateMask { .. }) => {
            return Ok(IconLevel {
                loss: 0.0,
                degenerate: true,
                agent_keys: SampleSet { indices: vec![] },
                env_keys: SampleSet { indices: vec![] },
            })
        }
        Err(e) => return Err(e),
    };
    let env_mask = tmask.complement();
    let agent_keys = sample_region(tmask, cfg.n_agent, cfg.sampler, rng)?;
    let env_keys = sample_region(&env_mask, cfg.n_env, cfg.sampler, rng)?;
    let k_a = gather_keys(fmap, agent_keys, TokenClass::Agent);
    let k_e = gather_keys(fmap, env_keys, TokenClass::Environment);
    let loss = info_nce(&q_a, &k_a, &k_e, cfg.tau, cfg.normalize)?
        + info_nce(&q_e, &k_e, &k_a, cfg.tau, cfg.normalize)?;
    Ok(IconLevel {
        loss,
        degenerate: false,
        agent_keys: k_a.sources,
        env_keys: k_e.sources,
    })
}

/// Scalar convenience over [`icon_forward`].
pub fn icon_loss(
    fmap: &FeatureMap,
    tmask: &TokenMask,
    cfg: &ContrastConfig,
    rng: &mut Rng,
) -> Result<f64> {
    Ok(icon_forward(fmap, tmask, cfg, rng)?.loss)
}

/// Depth-weighted multi-level forward: per-layer losses plus their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelIcon {
    pub loss: f64,
    pub degenerate: bool,
    pub weights: Vec<f64>,
    pub levels: Vec<IconLevel>,
}

/// Weighted sum of per-layer contrastive losses; keys are re-sampled per
/// layer from an independent substream indexed by the 1-based layer number,
/// so results do not depend on evaluation order.
pub fn multi_level_forward(
    per_layer: &[FeatureMap],
    tmask: &TokenMask,
    cfg: &ContrastConfig,
    mlc: &MLCConfig,
    rng: &Rng,
) -> Result<MultiLevelIcon> {
    if per_layer.is_empty() {
        return Err(Error::EmptyInput("per-layer feature maps"));
    }
    let weights = mlc.layer_weights(per_layer.len())?;
    let mut levels = Vec::with_capacity(per_layer.len());
    let mut loss = 0.0;
    let mut degenerate = false;
    for (i, fmap) in per_layer.iter().enumerate() {
        let mut layer_rng = rng.substream(&[(i + 1) as u64]);
        let level = icon_forward(fmap, tmask, cfg, &mut layer_rng)?;
        degenerate |= level.degenerate;
        loss += weights[i] * level.loss;
        levels.push(level);
    }
    if degenerate {
        loss = 0.0;
    }
    Ok(MultiLevelIcon {
        loss,
        degenerate,
        weights,
        levels,
    })
}

/// Scalar convenience over [`multi_level_forward`].
pub fn multi_level_icon(
    per_layer: &[FeatureMap],
    tmask: &TokenMask,
    cfg: &ContrastConfig,
    mlc: &MLCConfig,
    rng: &Rng,
) -> Result<f64> {
    Ok(multi_level_forward(per_layer, tmask, cfg, mlc, rng)?.loss)
}

/// Combined objective: `task + λ·contrast`.
pub fn total_loss(task_loss: f64, icon: f64, lambda: f64) -> f64 {
    task_loss + lambda * icon
}

/// Gradient of one layer's symmetric loss with respect to that layer's
/// token features, reusing the key positions recorded in `level`.
///
/// Every token contributes to exactly one class mean, so every token
/// receives a query-path gradient; sampled keys additionally receive the
/// key-path gradient, scattered back to their source cells.
pub fn icon_level_grad(
    fmap: &FeatureMap,
    tmask: &TokenMask,
    cfg: &ContrastConfig,
    level: &IconLevel,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; fmap.n_tokens() * fmap.dim];
    if level.degenerate {
        return Ok(grad);
    }
    fmap.matches(tmask)?;
    for (set, want) in [(&level.agent_keys, 1u8), (&level.env_keys, 0u8)] {
        for idx in &set.indices {
            if idx.k == 0 || idx.l == 0 || idx.k > fmap.grid_h || idx.l > fmap.grid_w {
                return Err(Error::RecordMismatch(format!(
                    "recorded key ({}, {}) is outside the {}x{} grid",
                    idx.k, idx.l, fmap.grid_h, fmap.grid_w
                )));
            }
            if tmask.get(idx.k - 1, idx.l - 1) != want {
                return Err(Error::RecordMismatch(format!(
                    "recorded key ({}, {}) is not in its class region",
                    idx.k, idx.l
                )));
            }
        }
    }
    let (q_a, q_e) = compute_queries(fmap, tmask)?;
    let k_a = gather_keys(fmap, level.agent_keys.clone(), TokenClass::Agent);
    let k_e = gather_keys(fmap, level.env_keys.clone(), TokenClass::Environment);
    let g1 = info_nce_grad_raw(&q_a.vector, &k_a.vectors, &k_e.vectors, cfg.tau, cfg.normalize)?;
    let g2 = info_nce_grad_raw(&q_e.vector, &k_e.vectors, &k_a.vectors, cfg.tau, cfg.normalize)?;

    let dim = fmap.dim;
    let n_agent = tmask.count_agent() as f64;
    let n_env = tmask.count_environment() as f64;
    // Class means distribute their gradient equally over members.
    for t in 0..fmap.n_tokens() {
        let (dq, count) = if tmask.data()[t] == 1 {
            (&g1.d_query, n_agent)
        } else {
            (&g2.d_query, n_env)
        };
        for d in 0..dim {
            grad[t * dim + d] += dq[d] / count;
        }
    }
    // Keys scatter back to their source cells; agent keys are positives in
    // the first term and negatives in the second, and vice versa.
    for (j, idx) in level.agent_keys.indices.iter().enumerate() {
        let t = idx.flat(fmap.grid_w);
        for d in 0..dim {
            grad[t * dim + d] += g1.d_pos[j][d] + g2.d_neg[j][d];
        }
    }
    for (j, idx) in level.env_keys.indices.iter().enumerate() {
        let t = idx.flat(fmap.grid_w);
        for d in 0..dim {
            grad[t * dim + d] += g1.d_neg[j][d] + g2.d_pos[j][d];
        }
    }
    Ok(grad)
}

/// Gradient of the multi-level loss with respect to every layer's token
/// features, reusing the forward pass's recorded key positions. Layer i's
/// gradient is its level gradient scaled by the depth weight.
pub fn icon_grad(
    per_layer: &[FeatureMap],
    tmask: &TokenMask,
    cfg: &ContrastConfig,
    forward: &MultiLevelIcon,
) -> Result<Vec<Vec<f64>>> {
    if per_layer.len() != forward.levels.len() {
        return Err(Error::RecordMismatch(format!(
            "{} feature maps vs {} recorded levels",
            per_layer.len(),
            forward.levels.len()
        )));
    }
    let mut out = Vec::with_capacity(per_layer.len());
    for (i, fmap) in per_layer.iter().enumerate() {
        if forward.degenerate {
            out.push(vec![0.0; fmap.n_tokens() * fmap.dim]);
            continue;
        }
        let mut g = icon_level_grad(fmap, tmask, cfg, &forward.levels[i])?;
        for v in &mut g {
            *v *= forward.weights[i];
        }
        out.push(g);
    }
    Ok(out)
}
