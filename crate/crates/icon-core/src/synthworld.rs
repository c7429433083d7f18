//! Procedural agent-in-scene generator: an articulated arm (capsule links
//! plus a disk end-effector) rendered over parameterized backgrounds with an
//! exact binary silhouette mask, plus the bit-exact ICDS dataset format.
//!
//! The silhouette is painted without anti-aliasing so patch-dominance
//! thresholds have unambiguous ground truth; backgrounds may be smooth.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::maskgrid::{ImageTensor, PixelMask};
use crate::numerics::{seeded_rng, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"ICDS";
pub const DATASET_VERSION: u32 = 1;

const MAX_PLACEMENT_ATTEMPTS: usize = 64;

/// Colors the arm's links draw from; the end-effector uses
/// [`EFFECTOR_COLOR`]. Hard-mode distractors reuse these.
const AGENT_PALETTE: [[u8; 3]; 5] = [
    [205, 92, 92],
    [70, 130, 180],
    [244, 164, 96],
    [106, 168, 79],
    [186, 85, 211],
];
const EFFECTOR_COLOR: [u8; 3] = [230, 230, 60];
/// Distractor colors in easy mode, disjoint from the agent palette.
const NEUTRAL_PALETTE: [[u8; 3]; 4] = [
    [45, 45, 45],
    [235, 235, 235],
    [128, 0, 128],
    [0, 128, 128],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    #[default]
    Noise,
    Checker,
    Gradient,
}

/// Generator parameters; lengths and widths are in full pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Arm links (2 or 3).
    pub links: usize,
    pub link_len: (f64, f64),
    pub link_width: (f64, f64),
    pub background: Background,
    /// Non-agent clutter objects (0 to 3).
    pub distractors: usize,
    /// Hard mode: distractors reuse the agent's colors (decoy limbs), so
    /// color alone cannot separate agent from environment.
    pub hard: bool,
    /// Accepted silhouette size as a fraction of the frame; placements
    /// outside the band are resampled.
    pub min_area_frac: f64,
    pub max_area_frac: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            links: 3,
            link_len: (9.0, 15.0),
            link_width: (4.0, 6.0),
            background: Background::Noise,
            distractors: 2,
            hard: false,
            min_area_frac: 0.03,
            max_area_frac: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig(
                "frame must be at least 16x16".into(),
            ));
        }
        if !(2..=3).contains(&self.links) {
            return Err(Error::InvalidConfig(format!(
                "link count must be 2 or 3, got {}",
                self.links
            )));
        }
        if self.distractors > 3 {
            return Err(Error::InvalidConfig(format!(
                "distractor count must be at most 3, got {}",
                self.distractors
            )));
        }
        let ordered = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if !ordered(self.link_len) || !ordered(self.link_width) {
            return Err(Error::InvalidConfig(
                "link length/width ranges must be positive and ordered".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_area_frac)
            || !(0.0..=1.0).contains(&self.max_area_frac)
            || self.min_area_frac >= self.max_area_frac
        {
            return Err(Error::InvalidConfig(
                "area fraction band must satisfy 0 <= min < max <= 1".into(),
            ));
        }
        Ok(())
    }

    /// Entries in `agent_state`: normalized centroid (2) + joint angles.
    pub fn state_dim(&self) -> usize {
        2 + self.links
    }
}

/// One rendered observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: ImageTensor,
    pub mask: PixelMask,
    /// `[centroid_row, centroid_col, angle_1, ..]`; the centroid is the mask
    /// pixel centroid normalized to [0, 1], angles are absolute radians.
    /// All values are quantized through f32 so dataset round-trips are
    /// exact.
    pub agent_state: Vec<f64>,
}

struct Canvas {
    h: usize,
    w: usize,
    pixels: Vec<u8>,
    mask: Vec<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            pixels: vec![0; h * w * 3],
            mask: vec![0; h * w],
        }
    }

    #[inline]
    fn put(&mut self, r: usize, c: usize, color: [u8; 3], agent: bool) {
        let i = (r * self.w + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
        if agent {
            self.mask[r * self.w + c] = 1;
        }
    }

    /// Thick segment: paint every pixel whose center is within `half_width`
    /// of the segment (x0,y0)-(x1,y1). x runs along columns, y along rows.
    fn capsule(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, half_width: f64, color: [u8; 3], agent: bool) {
        let lo_r = ((y0.min(y1) - half_width - 1.0).floor().max(0.0)) as usize;
        let hi_r = ((y0.max(y1) + half_width + 1.0).ceil().min(self.h as f64 - 1.0)) as usize;
        let lo_c = ((x0.min(x1) - half_width - 1.0).floor().max(0.0)) as usize;
        let hi_c = ((x0.max(x1) + half_width + 1.0).ceil().min(self.w as f64 - 1.0)) as usize;
        let dx = x1 - x0;
        let dy = y1 - y0;
        let len2 = dx * dx + dy * dy;
        let hw2 = half_width * half_width;
        for r in lo_r..=hi_r {
            for c in lo_c..=hi_c {
                let px = c as f64 + 0.5;
                let py = r as f64 + 0.5;
                let t = if len2 > 0.0 {
                    (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let ex = x0 + t * dx - px;
                let ey = y0 + t * dy - py;
                if ex * ex + ey * ey <= hw2 {
                    self.put(r, c, color, agent);
                }
            }
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, radius: f64, color: [u8; 3], agent: bool) {
        self.capsule(cx, cy, cx, cy, radius, color, agent);
    }

    fn rect(&mut self, r0: usize, c0: usize, r1: usize, c1: usize, color: [u8; 3]) {
        for r in r0..=r1.min(self.h - 1) {
            for c in c0..=c1.min(self.w - 1) {
                self.put(r, c, color, false);
            }
        }
    }
}

fn uniform_in(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

fn paint_background(canvas: &mut Canvas, style: Background, rng: &mut Rng) {
    let (h, w) = (canvas.h, canvas.w);
    match style {
        Background::Noise => {
            // grayish speckle around a per-scene base tone with a mild tint
            let base = 60 + rng.next_below(120) as i32;
            let tint: [i32; 3] = [
                rng.next_below(25) as i32 - 12,
                rng.next_below(25) as i32 - 12,
                rng.next_below(25) as i32 - 12,
            ];
            for r in 0..h {
                for c in 0..w {
                    let jitter = rng.next_below(61) as i32 - 30;
                    let mut color = [0u8; 3];
                    for ch in 0..3 {
                        color[ch] = (base + tint[ch] + jitter).clamp(0, 255) as u8;
                    }
                    canvas.put(r, c, color, false);
                }
            }
        }
        Background::Checker => {
            let cell = 4 + rng.next_below(9) as usize;
            let off_r = rng.next_below(cell as u64) as usize;
            let off_c = rng.next_below(cell as u64) as usize;
            let mut colors = [[0u8; 3]; 2];
            for color in &mut colors {
                for ch in color.iter_mut() {
                    *ch = 40 + rng.next_below(180) as u8;
                }
            }
            for r in 0..h {
                for c in 0..w {
                    let parity = (((r + off_r) / cell) + ((c + off_c) / cell)) % 2;
                    canvas.put(r, c, colors[parity], false);
                }
            }
        }
        Background::Gradient => {
            let mut ends = [[0f64; 3]; 2];
            for end in &mut ends {
                for ch in end.iter_mut() {
                    *ch = 30.0 + rng.next_below(196) as f64;
                }
            }
            let horizontal = rng.next_below(2) == 0;
            for r in 0..h {
                for c in 0..w {
                    let t = if horizontal {
                        c as f64 / (w - 1) as f64
                    } else {
                        r as f64 / (h - 1) as f64
                    };
                    let mut color = [0u8; 3];
                    for ch in 0..3 {
                        color[ch] = (ends[0][ch] + t * (ends[1][ch] - ends[0][ch])).round() as u8;
                    }
                    canvas.put(r, c, color, false);
                }
            }
        }
    }
}

fn paint_distractors(canvas: &mut Canvas, cfg: &SceneConfig, rng: &mut Rng) {
    let (h, w) = (canvas.h as f64, canvas.w as f64);
    for _ in 0..cfg.distractors {
        let color = if cfg.hard {
            // decoys reuse the agent's colors (including the effector's)
            match rng.next_below(AGENT_PALETTE.len() as u64 + 1) as usize {
                i if i < AGENT_PALETTE.len() => AGENT_PALETTE[i],
                _ => EFFECTOR_COLOR,
            }
        } else {
            NEUTRAL_PALETTE[rng.next_below(NEUTRAL_PALETTE.len() as u64) as usize]
        };
        let shape = rng.next_below(if cfg.hard { 2 } else { 3 });
        match shape {
            0 => {
                let r = 3.0 + 4.0 * rng.next_f64();
                let cx = uniform_in(rng, (r, w - r));
                let cy = uniform_in(rng, (r, h - r));
                canvas.disk(cx, cy, r, color, false);
            }
            1 if cfg.hard => {
                // an arm-like decoy capsule
                let len = uniform_in(rng, cfg.link_len);
                let hw = uniform_in(rng, cfg.link_width) / 2.0;
                let x0 = uniform_in(rng, (hw + len, w - hw - len));
                let y0 = uniform_in(rng, (hw + len, h - hw - len));
                let ang = rng.next_f64() * std::f64::consts::TAU;
                canvas.capsule(
                    x0,
                    y0,
                    x0 + len * ang.cos(),
                    y0 + len * ang.sin(),
                    hw,
                    color,
                    false,
                );
            }
            _ => {
                let rh = 5 + rng.next_below(9) as usize;
                let rw = 5 + rng.next_below(9) as usize;
                let r0 = rng.next_below((canvas.h - rh) as u64) as usize;
                let c0 = rng.next_below((canvas.w - rw) as u64) as usize;
                canvas.rect(r0, c0, r0 + rh - 1, c0 + rw - 1, color);
            }
        }
    }
}

struct ArmGeometry {
    /// Joint chain: base plus one point per link.
    joints: Vec<(f64, f64)>,
    angles: Vec<f64>,
    half_widths: Vec<f64>,
    effector_radius: f64,
}

fn sample_arm(cfg: &SceneConfig, rng: &mut Rng) -> ArmGeometry {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let base = (
        uniform_in(rng, (w * 0.25, w * 0.75)),
        uniform_in(rng, (h * 0.25, h * 0.75)),
    );
    let mut joints = vec![base];
    let mut angles = Vec::with_capacity(cfg.links);
    let mut half_widths = Vec::with_capacity(cfg.links);
    let mut effector_radius = 0.0;
    for i in 0..cfg.links {
        let angle = rng.next_f64() * std::f64::consts::TAU;
        let len = uniform_in(rng, cfg.link_len);
        let hw = uniform_in(rng, cfg.link_width) / 2.0;
        let (x, y) = joints[i];
        joints.push((x + len * angle.cos(), y + len * angle.sin()));
        angles.push(angle);
        half_widths.push(hw);
        effector_radius = hw + 1.5;
    }
    ArmGeometry {
        joints,
        angles,
        half_widths,
        effector_radius,
    }
}

fn arm_in_frame(cfg: &SceneConfig, arm: &ArmGeometry) -> bool {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let margin = arm
        .half_widths
        .iter()
        .cloned()
        .fold(arm.effector_radius, f64::max)
        + 1.0;
    arm.joints
        .iter()
        .all(|&(x, y)| x >= margin && y >= margin && x <= w - margin && y <= h - margin)
}

fn paint_arm(canvas: &mut Canvas, arm: &ArmGeometry, colors: &[[u8; 3]]) {
    for i in 0..arm.angles.len() {
        let (x0, y0) = arm.joints[i];
        let (x1, y1) = arm.joints[i + 1];
        canvas.capsule(x0, y0, x1, y1, arm.half_widths[i], colors[i], true);
    }
    let (ex, ey) = *arm.joints.last().expect("arm has joints");
    canvas.disk(ex, ey, arm.effector_radius, EFFECTOR_COLOR, true);
}

fn mask_fraction(mask: &[u8]) -> f64 {
    mask.iter().map(|&b| b as usize).sum::<usize>() as f64 / mask.len() as f64
}

/// Render a scene: background, then distractors, then the arm on top. The
/// mask is set exactly on arm pixels. Returns the pre-arm canvas too so
/// tests can verify that nothing outside the mask was touched by the arm.
fn render_with_snapshot(cfg: &SceneConfig, rng: &mut Rng) -> Result<(Vec<u8>, SceneSample)> {
    cfg.validate()?;
    let mut canvas = Canvas::new(cfg.height, cfg.width);
    paint_background(&mut canvas, cfg.background, rng);
    paint_distractors(&mut canvas, cfg, rng);
    let pre_arm = canvas.pixels.clone();

    // accept a placement only when it is fully in frame and its silhouette
    // lands inside the configured area band
    let mut arm = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let candidate = sample_arm(cfg, rng);
        if !arm_in_frame(cfg, &candidate) {
            continue;
        }
        let mut scratch = Canvas::new(cfg.height, cfg.width);
        paint_arm(&mut scratch, &candidate, &vec![[255, 255, 255]; cfg.links]);
        let frac = mask_fraction(&scratch.mask);
        if frac >= cfg.min_area_frac && frac <= cfg.max_area_frac {
            arm = Some(candidate);
            break;
        }
    }
    let arm = arm.ok_or(Error::AgentOutOfFrame {
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })?;
    let colors: Vec<[u8; 3]> = (0..cfg.links)
        .map(|_| AGENT_PALETTE[rng.next_below(AGENT_PALETTE.len() as u64) as usize])
        .collect();
    paint_arm(&mut canvas, &arm, &colors);

    // mask pixel centroid, normalized; quantized through f32 like the file
    let mut sum_r = 0.0;
    let mut sum_c = 0.0;
    let mut count = 0.0;
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            if canvas.mask[r * cfg.width + c] == 1 {
                sum_r += r as f64 + 0.5;
                sum_c += c as f64 + 0.5;
                count += 1.0;
            }
        }
    }
    let mut agent_state = vec![
        sum_r / count / cfg.height as f64,
        sum_c / count / cfg.width as f64,
    ];
    agent_state.extend(arm.angles.iter());
    let agent_state: Vec<f64> = agent_state.into_iter().map(|v| v as f32 as f64).collect();

    let sample = SceneSample {
        image: ImageTensor::from_u8(cfg.height, cfg.width, 3, &canvas.pixels)?,
        mask: PixelMask::new(cfg.height, cfg.width, canvas.mask)?,
        agent_state,
    };
    Ok((pre_arm, sample))
}

/// Deterministic scene render; identical `(cfg, rng state)` produce
/// byte-identical samples.
pub fn render_scene(cfg: &SceneConfig, rng: &mut Rng) -> Result<SceneSample> {
    Ok(render_with_snapshot(cfg, rng)?.1)
}

/// Generate `n` samples (sample i from the substream `(base_seed, i)`) and
/// write them as an ICDS file. Returns the samples.
pub fn make_dataset(
    n: usize,
    cfg: &SceneConfig,
    base_seed: u64,
    path: &Path,
) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let base = seeded_rng(base_seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = base.substream(&[i as u64]);
        samples.push(render_scene(cfg, &mut rng)?);
    }
    write_dataset(&samples, cfg.state_dim(), cfg.height, cfg.width, path)?;
    Ok(samples)
}

/// Serialize samples in the ICDS layout. All samples must share dimensions.
pub fn write_dataset(
    samples: &[SceneSample],
    state_dim: usize,
    height: usize,
    width: usize,
    path: &Path,
) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.image.height != height
            || s.image.width != width
            || s.image.channels != 3
            || s.mask.height != height
            || s.mask.width != width
        {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} dims differ from dataset dims {height}x{width}x3"
            )));
        }
        if s.agent_state.len() != state_dim {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} has {} state values, dataset wants {state_dim}",
                s.agent_state.len()
            )));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |bytes: &[u8]| -> Result<()> { w.write_all(bytes).map_err(|e| Error::io(path, e)) };
    put(DATASET_MAGIC)?;
    for v in [
        DATASET_VERSION,
        samples.len() as u32,
        height as u32,
        width as u32,
        3u32,
        state_dim as u32,
    ] {
        put(&v.to_le_bytes())?;
    }
    for s in samples {
        put(&s.image.to_u8())?;
        put(s.mask.data())?;
        for &v in &s.agent_state {
            put(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an ICDS file back; exact inverse of [`write_dataset`].
pub fn load_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("dataset magic".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: "ICDS".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |what: &str| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Truncated(format!("dataset {what}")))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = read_u32("sample count")? as usize;
    let height = read_u32("height")? as usize;
    let width = read_u32("width")? as usize;
    let channels = read_u32("channel count")? as usize;
    let state_dim = read_u32("state dim")? as usize;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Malformed(format!(
            "dataset declares empty dims {height}x{width}x{channels}"
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = vec![0u8; height * width * channels];
        r.read_exact(&mut img)
            .map_err(|_| Error::Truncated(format!("sample {i} image")))?;
        let mut mask = vec![0u8; height * width];
        r.read_exact(&mut mask)
            .map_err(|_| Error::Truncated(format!("sample {i} mask")))?;
        if mask.iter().any(|&b| b > 1) {
            return Err(Error::Malformed(format!(
                "sample {i} mask holds values other than 0/1"
            )));
        }
        let mut state = Vec::with_capacity(state_dim);
        let mut f32buf = [0u8; 4];
        for _ in 0..state_dim {
            r.read_exact(&mut f32buf)
                .map_err(|_| Error::Truncated(format!("sample {i} agent state")))?;
            state.push(f32::from_le_bytes(f32buf) as f64);
        }
        samples.push(SceneSample {
            image: ImageTensor::from_u8(height, width, channels, &img)?,
            mask: PixelMask::new(height, width, mask)?,
            agent_state: state,
        });
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Malformed(
                "dataset has trailing bytes beyond the declared samples".into(),
            ))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(samples)
}
