//! PCA patch-visualization tests: an exactly known two-cluster fixture, the
//! rescaling invariant, PPM round trips through a local parser, and the
//! degenerate / precondition errors.

mod support;

use dbfusion_core::error::CoreError;
use dbfusion_core::tensor::Tensor;
use dbfusion_core::vision::EncoderConfig;
use dbfusion_core::viz::{render_ppm, visualize_feature, PatchVisualization};
use support::{assert_close, rand_vec, rng};

const GRID: usize = 8;
const D: usize = 6;

/// An 8x8 grid of 6-channel patch features: a 4x5 "object" block of cells
/// near the center sits ten units away from the background along channel 0,
/// with small per-cell jitter on both sides. Returns the features and the
/// object mask.
fn two_cluster_fixture(seed: u64) -> (Tensor, Vec<bool>) {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(GRID * GRID * D);
    let mut object = Vec::with_capacity(GRID * GRID);
    for row in 0..GRID {
        for col in 0..GRID {
            let is_object = (2..=5).contains(&row) && (2..=6).contains(&col);
            object.push(is_object);
            let jitter = rand_vec(&mut r, D);
            for (c, j) in jitter.into_iter().enumerate() {
                let mean = if is_object && c == 0 { 10.0 } else { 0.0 };
                let sigma = if is_object { 0.3 } else { 0.01 };
                data.push(mean + sigma * j);
            }
        }
    }
    (Tensor::new(&[GRID * GRID, D], data).unwrap(), object)
}

/// Minimal P6 parser: returns (width, height, rgb bytes).
fn parse_ppm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .expect("P6 header has three newline-terminated lines");
    let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("P6"), "magic number");
    let mut dims = lines.next().unwrap().split_whitespace();
    let w: usize = dims.next().unwrap().parse().unwrap();
    let h: usize = dims.next().unwrap().parse().unwrap();
    assert_eq!(lines.next(), Some("255"), "max channel value");
    (w, h, bytes[header_end + 1..].to_vec())
}

#[test]
fn two_cluster_features_mask_the_object_cells_exactly() {
    let (features, object) = two_cluster_fixture(11);
    let viz = visualize_feature(&features, (GRID, GRID), "caption").unwrap();

    assert_eq!(viz.rows, GRID);
    assert_eq!(viz.cols, GRID);
    assert_eq!(viz.cells.len(), GRID * GRID);
    for (i, cell) in viz.cells.iter().enumerate() {
        assert_eq!(
            cell.is_some(),
            object[i],
            "cell {i} foreground flag disagrees with the planted object mask"
        );
    }
    assert_eq!(viz.foreground(), object.iter().filter(|&&o| o).count());

    // The separation axis dominates the spectrum and colors stay in range.
    assert_eq!(viz.eigenvalues.len(), 3);
    assert!(
        viz.eigenvalues[0] > 10.0 * viz.eigenvalues[1],
        "first component should carry the object/background split, got {:?}",
        viz.eigenvalues
    );
    for cell in viz.cells.iter().flatten() {
        for (c, v) in cell.iter().enumerate() {
            assert!((0.0..=1.0).contains(v), "channel {c} out of range: {v}");
        }
    }
}

#[test]
fn positively_rescaling_the_features_keeps_the_partition() {
    let (features, _) = two_cluster_fixture(29);
    let scaled = Tensor::new(
        &[GRID * GRID, D],
        features.data().iter().map(|v| 3.7 * v).collect(),
    )
    .unwrap();

    let base = visualize_feature(&features, (GRID, GRID), "caption").unwrap();
    let big = visualize_feature(&scaled, (GRID, GRID), "caption").unwrap();

    assert_close(
        big.threshold / base.threshold,
        3.7,
        1e-6,
        "threshold should scale with the features",
    );
    for (i, (a, b)) in base.cells.iter().zip(&big.cells).enumerate() {
        match (a, b) {
            (None, None) => {}
            (Some(ca), Some(cb)) => {
                for c in 0..3 {
                    assert_close(cb[c], ca[c], 1e-6, &format!("cell {i} channel {c}"));
                }
            }
            _ => panic!("cell {i} changed sides under a positive rescale"),
        }
    }
}

#[test]
fn identical_patches_are_degenerate() {
    let row: Vec<f64> = (0..D).map(|c| c as f64 + 1.0).collect();
    let data: Vec<f64> = std::iter::repeat(row).take(GRID * GRID).flatten().collect();
    let features = Tensor::new(&[GRID * GRID, D], data).unwrap();
    let err = visualize_feature(&features, (GRID, GRID), "ocr").unwrap_err();
    assert!(
        matches!(err, CoreError::Degenerate { .. }),
        "identical rows should be degenerate, got {err}"
    );
    assert!(err.to_string().contains("no variance"), "unexpected message: {err}");
}

#[test]
fn mirror_image_clusters_are_degenerate() {
    // Two clusters at +/-10 along channel 0: the mean sits exactly between
    // them, so neither side has the larger mean magnitude.
    let mut data = vec![0.0; 4 * 3];
    data[0] = 10.0;
    data[3] = 10.0;
    data[6] = -10.0;
    data[9] = -10.0;
    let features = Tensor::new(&[4, 3], data).unwrap();
    let err = visualize_feature(&features, (2, 2), "caption").unwrap_err();
    assert!(
        matches!(err, CoreError::Degenerate { .. }),
        "symmetric clusters should be degenerate, got {err}"
    );
    assert!(err.to_string().contains("symmetric"), "unexpected message: {err}");
}

#[test]
fn shape_and_size_preconditions_are_checked() {
    let (features, _) = two_cluster_fixture(3);

    let err = visualize_feature(&features, (GRID, GRID - 1), "caption").unwrap_err();
    assert!(matches!(err, CoreError::Dimension { .. }), "grid mismatch: {err}");

    let rank1 = Tensor::new(&[D], vec![0.0; D]).unwrap();
    let err = visualize_feature(&rank1, (1, D), "caption").unwrap_err();
    assert!(matches!(err, CoreError::Dimension { .. }), "rank-1 input: {err}");

    let two = Tensor::new(&[2, D], vec![0.0; 2 * D]).unwrap();
    let err = visualize_feature(&two, (1, 2), "caption").unwrap_err();
    assert!(matches!(err, CoreError::Argument { .. }), "too few patches: {err}");

    let narrow = Tensor::new(&[4, 2], vec![0.0; 8]).unwrap();
    let err = visualize_feature(&narrow, (2, 2), "caption").unwrap_err();
    assert!(matches!(err, CoreError::Argument { .. }), "too few channels: {err}");
}

#[test]
fn a_lone_foreground_patch_gets_the_mid_scale_color() {
    // One outlier patch among three identical background patches: every
    // component's foreground min-max range is empty, so the color parks at
    // mid scale rather than collapsing to black.
    let mut data = vec![0.0; 4 * 3];
    data[0] = 12.0;
    let features = Tensor::new(&[4, 3], data).unwrap();
    let viz = visualize_feature(&features, (2, 2), "caption").unwrap();

    assert_eq!(viz.foreground(), 1);
    assert_eq!(viz.cells[0], Some([0.5, 0.5, 0.5]));
    assert!(viz.cells[1..].iter().all(|c| c.is_none()));

    let (_, _, body) = parse_ppm(&render_ppm(&viz, 1).unwrap());
    assert_eq!(&body[..3], &[128, 128, 128], "mid scale should quantize to 128");
    assert!(body[3..].iter().all(|&b| b == 0), "background must stay black");
}

#[test]
fn ppm_blocks_round_trip_the_cell_colors() {
    let (features, _) = two_cluster_fixture(47);
    let viz = visualize_feature(&features, (GRID, GRID), "caption").unwrap();
    let scale = 8;
    let bytes = render_ppm(&viz, scale).unwrap();

    let (w, h, body) = parse_ppm(&bytes);
    assert_eq!((w, h), (GRID * scale, GRID * scale));
    assert_eq!(body.len(), 3 * w * h);
    assert_eq!(bytes.len(), "P6\n64 64\n255\n".len() + 3 * w * h);

    for row in 0..GRID {
        for col in 0..GRID {
            let top_left = {
                let p = 3 * ((row * scale) * w + col * scale);
                [body[p], body[p + 1], body[p + 2]]
            };
            // Every pixel of the block carries the cell color.
            for dy in 0..scale {
                for dx in 0..scale {
                    let p = 3 * ((row * scale + dy) * w + col * scale + dx);
                    assert_eq!(
                        [body[p], body[p + 1], body[p + 2]],
                        top_left,
                        "block ({row},{col}) is not a solid color"
                    );
                }
            }
            match viz.cells[row * GRID + col] {
                None => assert_eq!(top_left, [0, 0, 0], "background cell not black"),
                Some(rgb) => {
                    for c in 0..3 {
                        let back = top_left[c] as f64 / 255.0;
                        assert!(
                            (back - rgb[c]).abs() <= 1.0 / 255.0,
                            "cell ({row},{col}) channel {c} lost more than one quantum"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn cell_colors_do_not_depend_on_the_render_scale() {
    let (features, _) = two_cluster_fixture(5);
    let viz = visualize_feature(&features, (GRID, GRID), "caption").unwrap();
    let (w1, _, small) = parse_ppm(&render_ppm(&viz, 1).unwrap());
    let (w4, _, big) = parse_ppm(&render_ppm(&viz, 4).unwrap());

    for row in 0..GRID {
        for col in 0..GRID {
            let a = 3 * (row * w1 + col);
            let b = 3 * ((row * 4) * w4 + col * 4);
            assert_eq!(&small[a..a + 3], &big[b..b + 3], "cell ({row},{col})");
        }
    }
}

#[test]
fn an_all_background_grid_renders_black() {
    let viz = PatchVisualization {
        rows: 2,
        cols: 2,
        cells: vec![None; 4],
        label: "caption".into(),
        threshold: 0.0,
        eigenvalues: vec![1.0, 0.5, 0.25],
    };
    let (w, h, body) = parse_ppm(&render_ppm(&viz, 3).unwrap());
    assert_eq!((w, h), (6, 6));
    assert!(body.iter().all(|&b| b == 0));

    let err = render_ppm(&viz, 0).unwrap_err();
    assert!(matches!(err, CoreError::Argument { .. }), "scale 0: {err}");
}

#[test]
fn the_default_encoder_grid_is_eight_by_eight() {
    // The rendering pipeline hands (grid, grid) to visualize_feature; the
    // stock encoder tiles 64x64 images into 8x8 patches.
    assert_eq!(EncoderConfig::default().grid(), 8);
}

#[test]
fn the_sidecar_mirrors_the_visualization() {
    let (features, object) = two_cluster_fixture(13);
    let viz = visualize_feature(&features, (GRID, GRID), "grounding").unwrap();
    let sidecar = viz.sidecar();

    assert_eq!(sidecar.label, "grounding");
    assert_eq!((sidecar.rows, sidecar.cols), (GRID, GRID));
    assert_eq!(sidecar.threshold, viz.threshold);
    assert_eq!(sidecar.eigenvalues, viz.eigenvalues);
    assert_eq!(sidecar.foreground, object.iter().filter(|&&o| o).count());

    let json = serde_json::to_string(&sidecar).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed["label"], "grounding");
    assert_eq!(parsed["foreground"], sidecar.foreground as u64);
    assert_eq!(parsed["eigenvalues"].as_array().unwrap().len(), 3);
}
