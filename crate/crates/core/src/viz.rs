//! PCA patch visualization: project patch features onto their first three
//! principal components, split foreground from background by thresholding
//! the first component, and color foreground cells by the per-component
//! min-max normalized scores. Background cells render black.

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::tensor::{pca_fit, Tensor};

/// Variance below this (relative to the data's scale) counts as "all rows
/// identical".
const VARIANCE_FLOOR: f64 = 1e-12;

/// A colored patch grid. `cells` is row-major; `None` is background.
#[derive(Clone, Debug)]
pub struct PatchVisualization {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<[f64; 3]>>,
    pub label: String,
    pub threshold: f64,
    pub eigenvalues: Vec<f64>,
}

impl PatchVisualization {
    pub fn foreground(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn sidecar(&self) -> VizSidecar {
        VizSidecar {
            label: self.label.clone(),
            rows: self.rows,
            cols: self.cols,
            threshold: self.threshold,
            eigenvalues: self.eigenvalues.clone(),
            foreground: self.foreground(),
        }
    }
}

/// What the CLI writes next to each rendered image.
#[derive(Clone, Debug, Serialize)]
pub struct VizSidecar {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub threshold: f64,
    pub eigenvalues: Vec<f64>,
    pub foreground: usize,
}

/// Project `feature` (one row per patch) onto its first three principal
/// components, split foreground from background with a 1-D 2-means
/// threshold on the first component (the cluster with the larger mean
/// absolute score is foreground), and min-max normalize the foreground
/// scores per component into RGB.
pub fn visualize_feature(
    feature: &Tensor,
    patch_grid: (usize, usize),
    label: impl Into<String>,
) -> Result<PatchVisualization> {
    let (rows, cols) = patch_grid;
    let &[n, d] = feature.shape() else {
        return Err(CoreError::dimension(
            "visualize_feature",
            format!("expected a rank-2 feature matrix, got {:?}", feature.shape()),
        ));
    };
    if n != rows * cols {
        return Err(CoreError::dimension(
            "visualize_feature",
            format!("{n} patches do not fill a {rows}x{cols} grid"),
        ));
    }
    if n < 4 {
        return Err(CoreError::argument(
            "visualize_feature",
            format!("need at least 4 patches, got {n}"),
        ));
    }
    if d < 3 {
        return Err(CoreError::argument(
            "visualize_feature",
            format!("need at least 3 feature channels for an RGB map, got {d}"),
        ));
    }

    let pca = pca_fit(feature, 3)?;
    let scale = feature.data().iter().map(|v| v * v).sum::<f64>() / feature.len() as f64;
    if pca.eigenvalues[0] <= VARIANCE_FLOOR * (1.0 + scale) {
        return Err(CoreError::degenerate(
            "visualize_feature",
            "patch features carry no variance; every row is the same patch",
        ));
    }

    let comp1: Vec<f64> = pca.scores.data().iter().step_by(3).copied().collect();
    let (lo_mean, hi_mean) = two_means(&comp1);
    if (lo_mean.abs() - hi_mean.abs()).abs() <= f64::EPSILON * (1.0 + hi_mean.abs()) {
        return Err(CoreError::degenerate(
            "visualize_feature",
            "first-component clusters are symmetric; cannot tell foreground from background",
        ));
    }
    let threshold = 0.5 * (lo_mean + hi_mean);
    let upper_is_foreground = hi_mean.abs() > lo_mean.abs();
    let foreground: Vec<bool> = comp1
        .iter()
        .map(|&s| if upper_is_foreground { s > threshold } else { s < threshold })
        .collect();
    if foreground.iter().all(|&f| !f) {
        return Err(CoreError::degenerate(
            "visualize_feature",
            "every patch fell on the background side of the threshold",
        ));
    }

    // Min-max bounds per component over foreground patches only.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (i, fg) in foreground.iter().enumerate() {
        if *fg {
            for c in 0..3 {
                let s = pca.scores.data()[i * 3 + c];
                lo[c] = lo[c].min(s);
                hi[c] = hi[c].max(s);
            }
        }
    }
    let cells = foreground
        .iter()
        .enumerate()
        .map(|(i, fg)| {
            fg.then(|| {
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    let range = hi[c] - lo[c];
                    // A constant component over the foreground has no
                    // contrast to show; park it mid-scale.
                    rgb[c] = if range > 0.0 {
                        (pca.scores.data()[i * 3 + c] - lo[c]) / range
                    } else {
                        0.5
                    };
                }
                rgb
            })
        })
        .collect();

    Ok(PatchVisualization {
        rows,
        cols,
        cells,
        label: label.into(),
        threshold,
        eigenvalues: pca.eigenvalues,
    })
}

/// 1-D Lloyd iteration with extreme-point initialization, which keeps both
/// clusters nonempty. Returns the two cluster means, lower first.
fn two_means(scores: &[f64]) -> (f64, f64) {
    let mut lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let (mut lo_sum, mut lo_n, mut hi_sum, mut hi_n) = (0.0, 0usize, 0.0, 0usize);
        for &s in scores {
            if s <= mid {
                lo_sum += s;
                lo_n += 1;
            } else {
                hi_sum += s;
                hi_n += 1;
            }
        }
        if lo_n == 0 || hi_n == 0 {
            break;
        }
        let next_lo = lo_sum / lo_n as f64;
        let next_hi = hi_sum / hi_n as f64;
        if next_lo == lo && next_hi == hi {
            break;
        }
        lo = next_lo;
        hi = next_hi;
    }
    (lo, hi)
}

/// Render the grid as a binary PPM (P6), each cell as a `scale` x `scale`
/// block, background black.
pub fn render_ppm(viz: &PatchVisualization, scale: usize) -> Result<Vec<u8>> {
    if scale == 0 {
        return Err(CoreError::argument("render_ppm", "scale must be at least 1"));
    }
    let (w, h) = (viz.cols * scale, viz.rows * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for py in 0..h {
        let row = py / scale;
        for px in 0..w {
            let cell = viz.cells[row * viz.cols + px / scale];
            let rgb = cell.map_or([0u8; 3], |c| c.map(|v| (v * 255.0).round() as u8));
            out.extend_from_slice(&rgb);
        }
    }
    Ok(out)
}

/// [`render_ppm`] straight to a file.
pub fn save_ppm(
    path: impl AsRef<std::path::Path>,
    viz: &PatchVisualization,
    scale: usize,
) -> Result<()> {
    std::fs::write(path, render_ppm(viz, scale)?)?;
    Ok(())
}
