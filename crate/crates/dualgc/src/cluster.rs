//! Self-supervised clustering head: k-means initialization, Student-t soft
//! assignments, the sharpened target distribution, the KL alignment loss,
//! and per-cluster confidence selection.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Default Lloyd iteration cap.
pub const KMEANS_MAX_ITER: usize = 300;

/// Snapshot of the clustering head over one embedding matrix.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    /// C×d cluster centers.
    pub centers: Array2<f64>,
    /// N×C Student-t soft assignments, row-stochastic.
    pub q: Array2<f64>,
    /// N×C sharpened target distribution, row-stochastic.
    pub p: Array2<f64>,
    /// Row-argmax of `q`.
    pub pseudo_labels: Vec<usize>,
    pub confident_mask: Vec<bool>,
}

impl ClusterModel {
    /// Run k-means on `z`, then derive Q, P, pseudo-labels, and the
    /// per-cluster confidence mask.
    pub fn fit(
        z: &Array2<f64>,
        c: usize,
        rng: &mut ChaCha8Rng,
        confidence_fraction: f64,
    ) -> Result<Self> {
        let (centers, assignments) = kmeans(z, c, rng, KMEANS_MAX_ITER)?;
        let q = soft_assign(z, &centers);
        let p = target_distribution(&q);
        let pseudo_labels = argmax_rows(&q);
        let confident_mask = select_confident(z, &centers, &assignments, confidence_fraction)?;
        Ok(Self {
            centers,
            q,
            p,
            pseudo_labels,
            confident_mask,
        })
    }
}

/// Row-argmax with ties broken by lowest column index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn dist2(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// Assignment ties break to the lowest center index; an empty cluster is
/// reseeded to the point farthest from its own center. Deterministic for a
/// fixed generator state.
pub fn kmeans(
    z: &Array2<f64>,
    c: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let n = z.nrows();
    if c == 0 || c > n {
        return Err(Error::InvalidParameter(format!(
            "kmeans needs 0 < C <= N, got C = {c}, N = {n}"
        )));
    }
    let d = z.ncols();

    // k-means++ seeding: squared-distance weighting; uniform fallback when
    // every remaining distance is zero (coincident points).
    let mut centers = Array2::zeros((c, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&z.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(z.row(i), centers.row(0))).collect();
    for k in 1..c {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let dist = WeightedIndex::new(&min_d2)
                .map_err(|e| Error::InvalidParameter(format!("kmeans++ weights: {e}")))?;
            dist.sample(rng)
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(k).assign(&z.row(pick));
        for (i, m) in min_d2.iter_mut().enumerate() {
            *m = m.min(dist2(z.row(i), centers.row(k)));
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..max_iter {
        // Assign.
        let mut changed = false;
        for (i, slot) in assignments.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_d = dist2(z.row(i), centers.row(0));
            for k in 1..c {
                let dk = dist2(z.row(i), centers.row(k));
                if dk < best_d {
                    best_d = dk;
                    best = k;
                }
            }
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }

        // Reseed empty clusters to the globally farthest point.
        let mut counts = vec![0usize; c];
        for &a in &assignments {
            counts[a] += 1;
        }
        for k in 0..c {
            if counts[k] > 0 {
                continue;
            }
            let mut far_i = 0usize;
            let mut far_d = -1.0;
            for (i, &a) in assignments.iter().enumerate() {
                let di = dist2(z.row(i), centers.row(a));
                if di > far_d {
                    far_d = di;
                    far_i = i;
                }
            }
            counts[assignments[far_i]] -= 1;
            assignments[far_i] = k;
            counts[k] = 1;
            let row = z.row(far_i).to_owned();
            centers.row_mut(k).assign(&row);
            changed = true;
        }

        // Update means.
        let mut sums = Array2::<f64>::zeros((c, d));
        for (i, &a) in assignments.iter().enumerate() {
            for j in 0..d {
                sums[[a, j]] += z[[i, j]];
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                let inv = 1.0 / counts[k] as f64;
                for j in 0..d {
                    centers[[k, j]] = sums[[k, j]] * inv;
                }
            }
        }

        if !changed {
            break;
        }
    }
    Ok((centers, assignments))
}

/// Within-cluster sum of squares for a given clustering.
pub fn wcss(z: &Array2<f64>, centers: &Array2<f64>, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| dist2(z.row(i), centers.row(a)))
        .sum()
}

/// Student-t (one degree of freedom) soft assignment:
/// `q[i][j] ∝ (1 + ‖z_i − μ_j‖²)^{-1}`, rows normalized to 1.
pub fn soft_assign(z: &Array2<f64>, centers: &Array2<f64>) -> Array2<f64> {
    let (n, c) = (z.nrows(), centers.nrows());
    let mut q = Array2::zeros((n, c));
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..c {
            let v = 1.0 / (1.0 + dist2(z.row(i), centers.row(j)));
            q[[i, j]] = v;
            sum += v;
        }
        for j in 0..c {
            q[[i, j]] /= sum;
        }
    }
    q
}

/// DEC-style sharpening: `p[i][j] ∝ q[i][j]² / f_j` with `f_j = Σ_i q[i][j]`,
/// rows renormalized. A zero column of `q` is excluded with a warning.
pub fn target_distribution(q: &Array2<f64>) -> Array2<f64> {
    let (n, c) = q.dim();
    let f: Vec<f64> = (0..c).map(|j| q.column(j).sum()).collect();
    if f.contains(&0.0) {
        log::warn!("target_distribution: zero-frequency cluster column excluded");
    }
    let mut p = Array2::zeros((n, c));
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..c {
            let v = if f[j] > 0.0 {
                q[[i, j]] * q[[i, j]] / f[j]
            } else {
                0.0
            };
            p[[i, j]] = v;
            sum += v;
        }
        if sum > 0.0 {
            for j in 0..c {
                p[[i, j]] /= sum;
            }
        }
    }
    p
}

/// `Σ_ij p[i][j]·ln(p[i][j]/q[i][j]) / N`; zero-p terms contribute nothing
/// and q is floored at 1e-12.
pub fn kl_loss(p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", p.dim()),
            got: format!("{:?}", q.dim()),
        });
    }
    let n = p.nrows() as f64;
    let mut total = 0.0;
    for (pv, qv) in p.iter().zip(q.iter()) {
        if *pv > 0.0 {
            total += pv * (pv / qv.max(1e-12)).ln();
        }
    }
    Ok(total / n)
}

/// Within each cluster, mark the ⌈fraction·n_c⌉ members closest to their
/// assigned center; distance ties break to the lowest node index.
pub fn select_confident(
    z: &Array2<f64>,
    centers: &Array2<f64>,
    assignments: &[usize],
    fraction: f64,
) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence fraction {fraction} must lie in (0, 1]"
        )));
    }
    if assignments.len() != z.nrows() {
        return Err(Error::LabelsLength {
            got: assignments.len(),
            expected: z.nrows(),
        });
    }
    let c = centers.nrows();
    let mut members: Vec<Vec<(usize, f64)>> = vec![Vec::new(); c];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push((i, dist2(z.row(i), centers.row(a))));
    }
    let mut mask = vec![false; z.nrows()];
    for group in &mut members {
        if group.is_empty() {
            continue;
        }
        group.sort_unstable_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let take = (fraction * group.len() as f64).ceil() as usize;
        for &(i, _) in group.iter().take(take) {
            mask[i] = true;
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Tape builders.
// ---------------------------------------------------------------------------

/// Student-t soft assignment on the tape, with trainable centers.
///
/// Distances expand as ‖z_i‖² + ‖μ_j‖² − 2·z_iᵀμ_j so the whole computation
/// stays in matrix ops.
pub fn soft_assign_on_tape(tape: &mut Tape, z: Var, centers: Var) -> Var {
    let n = tape.value(z).nrows();
    let c = tape.value(centers).nrows();

    let z_sq = tape.hadamard(z, z);
    let z_norms = tape.row_sums(z_sq); // N×1
    let zn = tape.broadcast_col(z_norms, c); // N×C

    let c_sq = tape.hadamard(centers, centers);
    let c_norms = tape.row_sums(c_sq); // C×1
    let c_norms_t = tape.transpose(c_norms); // 1×C
    let cn = tape.broadcast_row(c_norms_t, n); // N×C

    let ct = tape.transpose(centers);
    let cross = tape.matmul(z, ct); // N×C
    let cross2 = tape.scale(cross, -2.0);

    let sums = tape.add(zn, cn);
    let dist2 = tape.add(sums, cross2);
    let shifted = tape.add_scalar(dist2, 1.0);
    let kernel = tape.recip(shifted);
    tape.row_normalize_sum(kernel)
}

/// KL alignment loss on the tape against a constant (detached) target P:
/// `(Σ p ln p − Σ p ln q) / N`.
pub fn kl_loss_on_tape(tape: &mut Tape, q: Var, p: &Array2<f64>) -> Var {
    let n = p.nrows() as f64;
    let p_entropy: f64 = p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
        / n;
    let pc = tape.constant(p.clone());
    let ln_q = tape.ln_clamped(q);
    let cross = tape.hadamard(pc, ln_q);
    let cross_sum = tape.sum_all(cross);
    let neg_cross = tape.scale(cross_sum, -1.0 / n);
    tape.add_scalar(neg_cross, p_entropy)
}
