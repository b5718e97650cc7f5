//! Diagnostic artifacts: class-ordered similarity heatmaps and embedding
//! dumps for external projection tools.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::idcrm::sample_correlation;

/// Rendered side length above which the heatmap is block-mean downsampled.
pub const MAX_HEATMAP_SIDE: usize = 2048;

/// A label-ordered similarity matrix ready for rasterization.
#[derive(Debug, Clone)]
pub struct HeatmapSpec {
    /// Cosine similarity permuted so same-class rows/columns are adjacent.
    pub similarity: Array2<f64>,
    /// The permutation applied: `order[i]` is the original index shown at
    /// row/column `i`.
    pub order: Vec<usize>,
}

/// Diverging colormap: −1 ↦ blue, 0 ↦ white, +1 ↦ red.
fn diverging_rgb(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - v.abs())).round() as u8;
    if v >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Average an n×n matrix down to side×side by block means; block `i` covers
/// source rows `[i·n/side, (i+1)·n/side)`.
fn block_mean(m: &Array2<f64>, side: usize) -> Array2<f64> {
    let n = m.nrows();
    let bounds = |i: usize| (i * n / side, (i + 1) * n / side);
    Array2::from_shape_fn((side, side), |(r, c)| {
        let (r0, r1) = bounds(r);
        let (c0, c1) = bounds(c);
        let mut sum = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                sum += m[[i, j]];
            }
        }
        sum / ((r1 - r0) * (c1 - c0)) as f64
    })
}

fn write_matrix_csv(m: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Cosine self-similarity of `z`, rows and columns permuted so nodes sorted
/// by label are adjacent, written as a PNG at `out_path` plus the raw
/// permuted matrix as a `.csv` sidecar. One pixel per node up to
/// [`MAX_HEATMAP_SIDE`], block-mean downsampled beyond that.
pub fn similarity_heatmap(
    z: &Array2<f64>,
    labels: &[usize],
    out_path: &Path,
) -> Result<HeatmapSpec> {
    let n = z.nrows();
    if labels.len() != n {
        return Err(Error::LabelsLength {
            got: labels.len(),
            expected: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (labels[i], i));

    let sim = sample_correlation(z, z)?;
    let permuted = Array2::from_shape_fn((n, n), |(i, j)| sim[[order[i], order[j]]]);

    let side = n.min(MAX_HEATMAP_SIDE);
    let shown = if side < n {
        block_mean(&permuted, side)
    } else {
        permuted.clone()
    };
    let mut img = image::RgbImage::new(side as u32, side as u32);
    for i in 0..side {
        for j in 0..side {
            img.put_pixel(j as u32, i as u32, image::Rgb(diverging_rgb(shown[[i, j]])));
        }
    }
    img.save(out_path)
        .map_err(|e| Error::Image(e.to_string()))?;

    write_matrix_csv(&permuted, &out_path.with_extension("csv"))?;
    Ok(HeatmapSpec {
        similarity: permuted,
        order,
    })
}

/// Write `z` with a trailing label column; header `e0,…,e{d−1},label`.
/// Values use shortest round-trip formatting, so a read-back is bit-exact.
pub fn dump_embeddings(z: &Array2<f64>, labels: &[usize], out_path: &Path) -> Result<()> {
    let (n, d) = z.dim();
    if labels.len() != n {
        return Err(Error::LabelsLength {
            got: labels.len(),
            expected: n,
        });
    }
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("e{j},"));
    }
    out.push_str("label\n");
    for i in 0..n {
        for j in 0..d {
            out.push_str(&format!("{:?},", z[[i, j]]));
        }
        out.push_str(&format!("{}\n", labels[i]));
    }
    std::fs::write(out_path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn colormap_endpoints() {
        assert_eq!(diverging_rgb(1.0), [255, 0, 0]);
        assert_eq!(diverging_rgb(-1.0), [0, 0, 255]);
        assert_eq!(diverging_rgb(0.0), [255, 255, 255]);
        assert_eq!(diverging_rgb(2.0), [255, 0, 0]);
    }

    #[test]
    fn one_hot_classes_give_exact_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let labels = vec![0, 0, 1, 1];
        let spec = similarity_heatmap(&z, &labels, &dir.path().join("h.png")).unwrap();
        assert_eq!(spec.order, vec![0, 1, 2, 3]);
        for i in 0..4 {
            for j in 0..4 {
                let want = if (i < 2) == (j < 2) { 1.0 } else { 0.0 };
                assert_eq!(spec.similarity[[i, j]], want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn shuffled_labels_are_reordered_into_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let labels = vec![0, 1, 0, 1];
        let spec = similarity_heatmap(&z, &labels, &dir.path().join("h.png")).unwrap();
        assert_eq!(spec.order, vec![0, 2, 1, 3]);
        for i in 0..4 {
            for j in 0..4 {
                let want = if (i < 2) == (j < 2) { 1.0 } else { 0.0 };
                assert_eq!(spec.similarity[[i, j]], want);
            }
        }
    }

    #[test]
    fn matrix_matches_permuted_self_correlation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = sub_rng(31, 80);
        let z = Array2::from_shape_fn((12, 5), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let spec = similarity_heatmap(&z, &labels, &dir.path().join("h.png")).unwrap();
        let sim = sample_correlation(&z, &z).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(spec.similarity[[i, j]], sim[[spec.order[i], spec.order[j]]]);
            }
        }
        // Already-sorted labels leave the matrix untouched.
        let sorted: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let spec = similarity_heatmap(&z, &sorted, &dir.path().join("h2.png")).unwrap();
        assert_eq!(spec.order, (0..12).collect::<Vec<_>>());
        assert_eq!(spec.similarity, sim);
    }

    #[test]
    fn isotropic_embeddings_have_small_off_block_mass() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = sub_rng(32, 81);
        let z = Array2::from_shape_fn((60, 64), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let labels: Vec<usize> = (0..60).map(|i| i / 30).collect();
        let spec = similarity_heatmap(&z, &labels, &dir.path().join("h.png")).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..60 {
            for j in 0..60 {
                if (i < 30) != (j < 30) {
                    sum += spec.similarity[[i, j]].abs();
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        assert!(mean < 0.2, "mean off-block {mean}");
    }

    #[test]
    fn png_and_csv_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("fig.png");
        let z = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        let labels = vec![0usize; 10];
        similarity_heatmap(&z, &labels, &png).unwrap();
        let img = image::open(&png).unwrap();
        assert_eq!((img.width(), img.height()), (10, 10));
        let csv = std::fs::read_to_string(dir.path().join("fig.csv")).unwrap();
        assert_eq!(csv.lines().count(), 10);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 10);
    }

    #[test]
    fn block_mean_halves_a_small_matrix() {
        let m = array![
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0]
        ];
        let down = block_mean(&m, 2);
        assert_eq!(down, array![[1.0, 2.0], [3.0, 4.0]]);
        // Uneven split: 3 -> 2 puts one row/column in the first block.
        let m3 = array![[6.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 12.0]];
        let down = block_mean(&m3, 2);
        assert_eq!(down[[0, 0]], 6.0);
        assert_eq!(down[[1, 1]], 3.0);
    }

    #[test]
    fn embeddings_round_trip_and_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let mut rng = sub_rng(33, 82);
        let z = Array2::from_shape_fn((7, 4), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let labels: Vec<usize> = (0..7).map(|i| i % 2).collect();
        dump_embeddings(&z, &labels, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "e0,e1,e2,e3,label");
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 5);
            for j in 0..4 {
                assert_eq!(cells[j].parse::<f64>().unwrap(), z[[i, j]]);
            }
            assert_eq!(cells[4].parse::<usize>().unwrap(), labels[i]);
        }
        assert_eq!(text.lines().count(), 8);

        let empty = Array2::<f64>::zeros((0, 3));
        let path0 = dir.path().join("empty.csv");
        dump_embeddings(&empty, &[], &path0).unwrap();
        assert_eq!(std::fs::read_to_string(&path0).unwrap(), "e0,e1,e2,label\n");

        assert!(dump_embeddings(&z, &[0], &path).is_err());
    }
}
