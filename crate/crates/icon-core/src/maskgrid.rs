//! Image/mask alignment: patchifying full-resolution planes into the ViT
//! grid, propagating pixel masks to token-level masks, and paired cropping.

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// H x W x C image with values in `[0, 1]`, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width}x{channels} wants {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// 8-bit pixels scaled to `[0, 1]` by dividing by 255.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        ImageTensor::new(height, width, channels, data)
    }

    /// Quantize back to 8-bit (values are clamped first).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Binary pixel mask: 1 where the agent occupies the pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} wants {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::ShapeMismatch(
                "mask entries must be 0 or 1".to_string(),
            ));
        }
        Ok(PixelMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[row * self.width + col] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }
}

/// The pixel mask repartitioned into non-overlapping P x P blocks.
///
/// Concatenating the blocks back in row-major order reconstructs the mask
/// exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    /// `grid_h * grid_w` blocks, each `patch * patch` mask values row-major.
    patches: Vec<Vec<u8>>,
}

impl PatchGrid {
    pub fn patch_at(&self, k: usize, l: usize) -> &[u8] {
        &self.patches[k * self.grid_w + l]
    }

    /// Agent-pixel count of patch (k, l).
    pub fn patch_sum(&self, k: usize, l: usize) -> usize {
        self.patch_at(k, l).iter().map(|&b| b as usize).sum()
    }

    /// Undo the partition; exact inverse of [`patchify`].
    pub fn reassemble(&self) -> PixelMask {
        let h = self.grid_h * self.patch;
        let w = self.grid_w * self.patch;
        let mut mask = PixelMask::zeros(h, w);
        for k in 0..self.grid_h {
            for l in 0..self.grid_w {
                let block = self.patch_at(k, l);
                for pr in 0..self.patch {
                    for pc in 0..self.patch {
                        mask.set(
                            k * self.patch + pr,
                            l * self.patch + pc,
                            block[pr * self.patch + pc],
                        );
                    }
                }
            }
        }
        mask
    }
}

/// Patch-level mask: entry (k, l) is 1 when patch (k, l) is agent-dominated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub grid_h: usize,
    pub grid_w: usize,
    data: Vec<u8>,
}

impl TokenMask {
    pub fn new(grid_h: usize, grid_w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid_h * grid_w {
            return Err(Error::ShapeMismatch(format!(
                "token mask {grid_h}x{grid_w} wants {} entries, got {}",
                grid_h * grid_w,
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::ShapeMismatch(
                "token mask entries must be 0 or 1".to_string(),
            ));
        }
        Ok(TokenMask {
            grid_h,
            grid_w,
            data,
        })
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> u8 {
        self.data[k * self.grid_w + l]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of agent tokens.
    pub fn count_agent(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    /// Number of environment tokens.
    pub fn count_environment(&self) -> usize {
        self.len() - self.count_agent()
    }

    /// The environment-region mask `1 - m`.
    pub fn complement(&self) -> TokenMask {
        TokenMask {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            data: self.data.iter().map(|&b| 1 - b).collect(),
        }
    }
}

/// Split a pixel mask into non-overlapping P x P blocks, row-major.
pub fn patchify(mask: &PixelMask, patch: usize) -> Result<PatchGrid> {
    check_divisible(mask.height, mask.width, patch)?;
    let grid_h = mask.height / patch;
    let grid_w = mask.width / patch;
    let mut patches = Vec::with_capacity(grid_h * grid_w);
    for k in 0..grid_h {
        for l in 0..grid_w {
            let mut block = Vec::with_capacity(patch * patch);
            for pr in 0..patch {
                for pc in 0..patch {
                    block.push(mask.get(k * patch + pr, l * patch + pc));
                }
            }
            patches.push(block);
        }
    }
    Ok(PatchGrid {
        grid_h,
        grid_w,
        patch,
        patches,
    })
}

/// Flatten an image into row-major P x P x C patch vectors, the same
/// partition [`patchify`] applies to masks. Used by the patch embedding.
pub fn patchify_image(img: &ImageTensor, patch: usize) -> Result<Vec<Vec<f64>>> {
    check_divisible(img.height, img.width, patch)?;
    let grid_h = img.height / patch;
    let grid_w = img.width / patch;
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for k in 0..grid_h {
        for l in 0..grid_w {
            let mut flat = Vec::with_capacity(patch * patch * img.channels);
            for pr in 0..patch {
                for pc in 0..patch {
                    for ch in 0..img.channels {
                        flat.push(img.get(k * patch + pr, l * patch + pc, ch));
                    }
                }
            }
            out.push(flat);
        }
    }
    Ok(out)
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 {
        return Err(Error::InvalidConfig("patch size must be positive".into()));
    }
    if height % patch != 0 {
        return Err(Error::Indivisible {
            name: "height",
            extent: height,
            patch,
        });
    }
    if width % patch != 0 {
        return Err(Error::Indivisible {
            name: "width",
            extent: width,
            patch,
        });
    }
    Ok(())
}

/// Patch-dominance threshold: token (k, l) is agent iff
/// `sum(p_{k,l}) > beta * P^2`, with strict inequality. `beta = 1.0`
/// therefore yields an all-zero token mask.
pub fn threshold_tokens(grid: &PatchGrid, beta: f64) -> Result<TokenMask> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    let cutoff = beta * (grid.patch * grid.patch) as f64;
    let mut data = Vec::with_capacity(grid.grid_h * grid.grid_w);
    for k in 0..grid.grid_h {
        for l in 0..grid.grid_w {
            data.push(if (grid.patch_sum(k, l) as f64) > cutoff {
                1
            } else {
                0
            });
        }
    }
    TokenMask::new(grid.grid_h, grid.grid_w, data)
}

/// Pixel mask straight to token mask.
pub fn token_mask_from_pixels(mask: &PixelMask, patch: usize, beta: f64) -> Result<TokenMask> {
    threshold_tokens(&patchify(mask, patch)?, beta)
}

fn check_crop(src_h: usize, src_w: usize, crop_h: usize, crop_w: usize) -> Result<()> {
    if crop_h > src_h || crop_w > src_w {
        return Err(Error::CropTooLarge {
            crop_h,
            crop_w,
            src_h,
            src_w,
        });
    }
    Ok(())
}

fn crop_both(
    img: &ImageTensor,
    mask: &PixelMask,
    top: usize,
    left: usize,
    crop_h: usize,
    crop_w: usize,
) -> (ImageTensor, PixelMask) {
    let mut out_img = ImageTensor::zeros(crop_h, crop_w, img.channels);
    let mut out_mask = PixelMask::zeros(crop_h, crop_w);
    for r in 0..crop_h {
        for c in 0..crop_w {
            for ch in 0..img.channels {
                out_img.set(r, c, ch, img.get(top + r, left + c, ch));
            }
            out_mask.set(r, c, mask.get(top + r, left + c));
        }
    }
    (out_img, out_mask)
}

/// Apply one random crop window to the image and its mask (training path).
pub fn random_crop_pair(
    img: &ImageTensor,
    mask: &PixelMask,
    crop_h: usize,
    crop_w: usize,
    rng: &mut Rng,
) -> Result<(ImageTensor, PixelMask)> {
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height, img.width, mask.height, mask.width
        )));
    }
    check_crop(img.height, img.width, crop_h, crop_w)?;
    let top = rng.next_below((img.height - crop_h + 1) as u64) as usize;
    let left = rng.next_below((img.width - crop_w + 1) as u64) as usize;
    Ok(crop_both(img, mask, top, left, crop_h, crop_w))
}

/// Static center crop (inference path); offsets are `floor((src - crop) / 2)`.
pub fn center_crop_pair(
    img: &ImageTensor,
    mask: &PixelMask,
    crop_h: usize,
    crop_w: usize,
) -> Result<(ImageTensor, PixelMask)> {
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height, img.width, mask.height, mask.width
        )));
    }
    check_crop(img.height, img.width, crop_h, crop_w)?;
    let top = (img.height - crop_h) / 2;
    let left = (img.width - crop_w) / 2;
    Ok(crop_both(img, mask, top, left, crop_h, crop_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn mask_from(rows: &[&[u8]]) -> PixelMask {
        let h = rows.len();
        let w = rows[0].len();
        let data: Vec<u8> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PixelMask::new(h, w, data).unwrap()
    }

    #[test]
    fn patchify_4x4_into_2x2() {
        let mask = mask_from(&[
            &[1, 1, 0, 0],
            &[1, 0, 0, 0],
            &[0, 0, 1, 1],
            &[0, 0, 1, 1],
        ]);
        let grid = patchify(&mask, 2).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w), (2, 2));
        assert_eq!(grid.patch_at(0, 0), &[1, 1, 1, 0]);
        assert_eq!(grid.patch_at(1, 1), &[1, 1, 1, 1]);
        assert_eq!(grid.reassemble(), mask);
    }

    #[test]
    fn patchify_identity_partition() {
        let mask = mask_from(&[&[1, 0, 1], &[0, 1, 0], &[1, 1, 1]]);
        let grid = patchify(&mask, 3).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w), (1, 1));
        assert_eq!(grid.patch_at(0, 0), mask.data());
    }

    #[test]
    fn patchify_indivisible_errors() {
        let mask = PixelMask::zeros(5, 4);
        let err = patchify(&mask, 2).unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn threshold_direct_case() {
        // patch [[1,1],[0,1]] has sum 3; 3 > 0.5 * 4 so the token is agent.
        let mask = mask_from(&[&[1, 1], &[0, 1]]);
        let tm = token_mask_from_pixels(&mask, 2, 0.5).unwrap();
        assert_eq!(tm.get(0, 0), 1);
    }

    #[test]
    fn threshold_strict_inequality_edges() {
        let ones = mask_from(&[&[1, 1], &[1, 1]]);
        let tm = token_mask_from_pixels(&ones, 2, 1.0).unwrap();
        assert_eq!(tm.get(0, 0), 0, "4 > 4 must be false");

        let zeros = PixelMask::zeros(2, 2);
        let tm = token_mask_from_pixels(&zeros, 2, 0.0).unwrap();
        assert_eq!(tm.get(0, 0), 0, "0 > 0 must be false");
    }

    #[test]
    fn threshold_matches_pixel_counting_brute_force() {
        let mut rng = seeded_rng(2024);
        for _ in 0..50 {
            let h = 8;
            let w = 12;
            let p = 4;
            let data: Vec<u8> = (0..h * w).map(|_| (rng.next_u64() & 1) as u8).collect();
            let mask = PixelMask::new(h, w, data).unwrap();
            for beta in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let tm = token_mask_from_pixels(&mask, p, beta).unwrap();
                for k in 0..h / p {
                    for l in 0..w / p {
                        let mut count = 0usize;
                        for pr in 0..p {
                            for pc in 0..p {
                                count += mask.get(k * p + pr, l * p + pc) as usize;
                            }
                        }
                        let expect = u8::from(count as f64 > beta * (p * p) as f64);
                        assert_eq!(tm.get(k, l), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn agent_plus_environment_counts_cover_grid() {
        let mask = mask_from(&[
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
            &[0, 0, 0, 0],
            &[0, 0, 0, 1],
        ]);
        let tm = token_mask_from_pixels(&mask, 2, 0.5).unwrap();
        assert_eq!(tm.count_agent() + tm.count_environment(), 4);
        assert_eq!(tm.complement().count_agent(), tm.count_environment());
    }

    #[test]
    fn raising_beta_is_monotone() {
        let mut rng = seeded_rng(55);
        let data: Vec<u8> = (0..64).map(|_| (rng.next_u64() & 1) as u8).collect();
        let mask = PixelMask::new(8, 8, data).unwrap();
        let mut prev: Option<TokenMask> = None;
        for beta in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let tm = token_mask_from_pixels(&mask, 4, beta).unwrap();
            if let Some(lower) = &prev {
                for (hi, lo) in tm.data().iter().zip(lower.data()) {
                    assert!(hi <= lo, "raising beta must never set a new token");
                }
            }
            prev = Some(tm);
        }
    }

    #[test]
    fn crop_identity_when_full_size() {
        let img = ImageTensor::from_u8(4, 4, 1, &[10u8; 16]).unwrap();
        let mask = PixelMask::zeros(4, 4);
        let mut rng = seeded_rng(0);
        let (ci, cm) = random_crop_pair(&img, &mask, 4, 4, &mut rng).unwrap();
        assert_eq!(ci, img);
        assert_eq!(cm, mask);
        let (ci, cm) = center_crop_pair(&img, &mask, 4, 4).unwrap();
        assert_eq!(ci, img);
        assert_eq!(cm, mask);
    }

    #[test]
    fn random_crop_alignment_and_determinism() {
        let mut rng = seeded_rng(3);
        let h = 6;
        let w = 6;
        let img_data: Vec<u8> = (0..h * w).map(|i| i as u8).collect();
        let img = ImageTensor::from_u8(h, w, 1, &img_data).unwrap();
        let mask_data: Vec<u8> = (0..h * w).map(|_| (rng.next_u64() & 1) as u8).collect();
        let mask = PixelMask::new(h, w, mask_data).unwrap();

        let (ci, cm) = random_crop_pair(&img, &mask, 4, 4, &mut seeded_rng(77)).unwrap();
        let (ci2, cm2) = random_crop_pair(&img, &mask, 4, 4, &mut seeded_rng(77)).unwrap();
        assert_eq!(ci, ci2);
        assert_eq!(cm, cm2);

        // The image value encodes its source position, so the window the
        // mask was cut from must be the same one.
        let first = (ci.get(0, 0, 0) * 255.0).round() as usize;
        let top = first / w;
        let left = first % w;
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(cm.get(r, c), mask.get(top + r, left + c));
            }
        }
    }

    #[test]
    fn center_crop_offsets() {
        let img = ImageTensor::zeros(64, 64, 3);
        let mut mask = PixelMask::zeros(64, 64);
        mask.set(4, 4, 1);
        let (_, cm) = center_crop_pair(&img, &mask, 56, 56).unwrap();
        // offset is (4, 4), so source pixel (4, 4) lands at (0, 0)
        assert_eq!(cm.get(0, 0), 1);

        // odd remainder floors: (5 - 2) / 2 = 1
        let img = ImageTensor::zeros(5, 5, 1);
        let mut mask = PixelMask::zeros(5, 5);
        mask.set(1, 1, 1);
        let (_, cm) = center_crop_pair(&img, &mask, 2, 2).unwrap();
        assert_eq!(cm.get(0, 0), 1);
    }

    #[test]
    fn crop_too_large_errors() {
        let img = ImageTensor::zeros(4, 4, 1);
        let mask = PixelMask::zeros(4, 4);
        assert!(center_crop_pair(&img, &mask, 5, 4).is_err());
        assert!(random_crop_pair(&img, &mask, 4, 6, &mut seeded_rng(0)).is_err());
    }
}
