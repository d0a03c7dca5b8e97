//! Patch grids, frame orderings and the (anchor, target, delay) pairs that the
//! contrastive objective predicts.
//!
//! Images are ordered top-down: a patch predicts patches further down its own
//! column, skipping the first `skip` rows (which overlap it). Sequences use
//! plain forward delays with no skip.

use crate::error::{GimError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Partly overlapping square patches of one image.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
    pub stride_px: usize,
    /// `[rows, cols, channels, patch_px, patch_px]`
    pub patches: Tensor,
}

/// Grid dimensions for an `h x w` image, or an error listing valid sizes.
pub fn grid_dims(h: usize, w: usize, patch_px: usize, overlap_px: usize) -> Result<(usize, usize)> {
    if patch_px == 0 || overlap_px >= patch_px {
        return Err(GimError::invalid(
            "extract_patch_grid",
            format!("overlap {overlap_px} must be smaller than patch size {patch_px}"),
        ));
    }
    let stride = patch_px - overlap_px;
    let dim = |extent: usize, axis: &str| -> Result<usize> {
        if extent < patch_px || (extent - patch_px) % stride != 0 {
            return Err(GimError::invalid(
                "extract_patch_grid",
                format!(
                    "image {axis} {extent} does not tile with patch {patch_px} and stride {stride}; \
                     valid sizes are {patch_px} + {stride}*n (e.g. {}, {}, {})",
                    patch_px,
                    patch_px + stride,
                    patch_px + 2 * stride
                ),
            ));
        }
        Ok((extent - patch_px) / stride + 1)
    };
    Ok((dim(h, "height")?, dim(w, "width")?))
}

pub fn extract_patch_grid(image: &Tensor, patch_px: usize, overlap_px: usize) -> Result<PatchGrid> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(GimError::invalid(
            "extract_patch_grid",
            format!("expected [C, H, W], got {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (rows, cols) = grid_dims(h, w, patch_px, overlap_px)?;
    let stride = patch_px - overlap_px;
    let src = image.data();
    let mut out = Vec::with_capacity(rows * cols * c * patch_px * patch_px);
    for i in 0..rows {
        for j in 0..cols {
            for ch in 0..c {
                for y in 0..patch_px {
                    let base = (ch * h + i * stride + y) * w + j * stride;
                    out.extend_from_slice(&src[base..base + patch_px]);
                }
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch_px,
        stride_px: stride,
        patches: Tensor::from_parts(vec![rows, cols, c, patch_px, patch_px], out),
    })
}

/// Patches of a batch of images `[n, C, H, W]`, flattened to
/// `[n * rows * cols, C, patch_px, patch_px]` in image-major, row-major order.
pub fn extract_patch_batch(images: &Tensor, patch_px: usize, overlap_px: usize) -> Result<(Tensor, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(GimError::invalid(
            "extract_patch_batch",
            format!("expected [N, C, H, W], got {s:?}"),
        ));
    }
    let mut parts = Vec::with_capacity(s[0]);
    let mut dims = (0, 0);
    for n in 0..s[0] {
        let grid = extract_patch_grid(&images.index0(n)?, patch_px, overlap_px)?;
        dims = (grid.rows, grid.cols);
        parts.push(grid.patches);
    }
    let stacked = Tensor::stack(&parts)?;
    let c = s[1];
    let flat = stacked.reshape(&[s[0] * dims.0 * dims.1, c, patch_px, patch_px])?;
    Ok((flat, dims.0, dims.1))
}

impl PatchGrid {
    /// Averages every patch back onto the image plane.
    pub fn reassemble(&self) -> Tensor {
        let s = self.patches.shape();
        let c = s[2];
        let h = (self.rows - 1) * self.stride_px + self.patch_px;
        let w = (self.cols - 1) * self.stride_px + self.patch_px;
        let mut sum = vec![0.0; c * h * w];
        let mut count = vec![0.0; c * h * w];
        let src = self.patches.data();
        let p = self.patch_px;
        for i in 0..self.rows {
            for j in 0..self.cols {
                for ch in 0..c {
                    for y in 0..p {
                        for x in 0..p {
                            let v = src[((((i * self.cols + j) * c + ch) * p + y) * p) + x];
                            let at = (ch * h + i * self.stride_px + y) * w + j * self.stride_px + x;
                            sum[at] += v;
                            count[at] += 1.0;
                        }
                    }
                }
            }
        }
        let data = sum.iter().zip(&count).map(|(s, n)| s / n).collect();
        Tensor::from_parts(vec![c, h, w], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PredictionPair {
    pub anchor: usize,
    pub target: usize,
    pub delay: usize,
}

/// Pairs in anchor-major order within each delay, delays ascending.
#[derive(Clone, Debug)]
pub struct PredictionPairSet {
    pub pairs: Vec<PredictionPair>,
    pub k_max: usize,
    pub skip: usize,
}

impl PredictionPairSet {
    pub fn delays(&self) -> Vec<usize> {
        (1 + self.skip..=self.k_max + self.skip).collect()
    }

    pub fn with_delay(&self, k: usize) -> impl Iterator<Item = &PredictionPair> {
        self.pairs.iter().filter(move |p| p.delay == k)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Top-down pairs on a `rows x cols` grid with flat index `i * cols + j`:
/// patch `(i, j)` predicts `(i + k, j)` for `k` in `1 + skip ..= k_max + skip`.
pub fn build_prediction_pairs_grid(rows: usize, cols: usize, k_max: usize, skip: usize) -> Result<PredictionPairSet> {
    if k_max == 0 {
        return Err(GimError::invalid("build_prediction_pairs_grid", "K must be >= 1"));
    }
    if rows < skip + 2 || cols == 0 {
        return Err(GimError::invalid(
            "build_prediction_pairs_grid",
            format!("a {rows}x{cols} grid has no row at distance {} (skip={skip})", skip + 1),
        ));
    }
    let mut pairs = Vec::new();
    for k in 1 + skip..=k_max + skip {
        for i in 0..rows {
            if i + k >= rows {
                break;
            }
            for j in 0..cols {
                pairs.push(PredictionPair {
                    anchor: i * cols + j,
                    target: (i + k) * cols + j,
                    delay: k,
                });
            }
        }
    }
    Ok(PredictionPairSet { pairs, k_max, skip })
}

/// Forward pairs `(t, t + k, k)` for `k` in `1..=k_max`.
pub fn build_prediction_pairs_seq(len: usize, k_max: usize) -> Result<PredictionPairSet> {
    if k_max == 0 || len <= k_max {
        return Err(GimError::invalid(
            "build_prediction_pairs_seq",
            format!("need T > K >= 1, got T={len}, K={k_max}"),
        ));
    }
    let mut pairs = Vec::new();
    for k in 1..=k_max {
        for t in 0..len - k {
            pairs.push(PredictionPair {
                anchor: t,
                target: t + k,
                delay: k,
            });
        }
    }
    Ok(PredictionPairSet {
        pairs,
        k_max,
        skip: 0,
    })
}

/// Uniform start offset of a `window`-long slice of a length-`len` axis.
pub fn window_offset(len: usize, window: usize, rng: &mut SeededRng) -> Result<usize> {
    if window == 0 || len < window {
        return Err(GimError::invalid(
            "subsample_loss_window",
            format!("window {window} does not fit in length {len}"),
        ));
    }
    Ok(rng.below(len - window + 1))
}

/// Contiguous `window` rows of `z_seq: [T, d]` starting at a uniform random offset.
pub fn subsample_loss_window(z_seq: &Tensor, window: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let s = z_seq.shape();
    if s.len() != 2 {
        return Err(GimError::invalid(
            "subsample_loss_window",
            format!("expected [T, d], got {s:?}"),
        ));
    }
    let start = window_offset(s[0], window, rng)?;
    let d = s[1];
    Ok(Tensor::from_parts(
        vec![window, d],
        z_seq.data()[start * d..(start + window) * d].to_vec(),
    ))
}
