//! Two-view graph augmentation.
//!
//! View 1 pairs noise-perturbed features with a row-stochastic KNN graph
//! over the original features; view 2 pairs an independently perturbed copy
//! with the personalized-PageRank diffusion of the normalized adjacency.
//! Both views of a run are generated once up front; per-epoch noise
//! resampling is available behind a config switch.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph, NormalizedAdjacency, DEFAULT_DENSE_CAP};
use crate::linalg::Lu;
use crate::par;
use crate::rng::{stream, sub_rng};

/// The augmented pair of views consumed by the siamese encoder.
#[derive(Debug, Clone)]
pub struct ViewPair {
    /// Perturbed features for view 1.
    pub x1: Array2<f64>,
    /// Perturbed features for view 2.
    pub x2: Array2<f64>,
    /// Row-stochastic KNN graph (view-1 propagation matrix).
    pub a_f: Array2<f64>,
    /// Symmetric diffusion matrix (view-2 propagation matrix).
    pub a_d: Array2<f64>,
}

/// Multiply features elementwise by i.i.d. Gaussian noise.
pub fn perturb_features(
    x: &Array2<f64>,
    noise_mean: f64,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if noise_std < 0.0 {
        return Err(Error::InvalidParameter(
            "noise_std must be nonnegative".into(),
        ));
    }
    let normal = Normal::new(noise_mean, noise_std)
        .map_err(|e| Error::InvalidParameter(format!("bad noise parameters: {e}")))?;
    let mut out = x.clone();
    for v in out.iter_mut() {
        *v *= normal.sample(rng);
    }
    Ok(out)
}

/// Build the row-stochastic KNN graph: per row, keep the `k` largest cosine
/// similarities to other rows (ties broken by lowest index) and softmax over
/// the kept values only, so each row has exactly `k` nonzero entries.
pub fn knn_graph(x: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "knn k = {k} must satisfy 0 < k < N = {n}"
        )));
    }
    if n > DEFAULT_DENSE_CAP {
        return Err(Error::InvalidParameter(format!(
            "knn graph is dense N x N; N = {n} exceeds cap {DEFAULT_DENSE_CAP}"
        )));
    }

    // Row-normalize with an epsilon guard so zero rows stay defined.
    let d = x.ncols();
    let mut zero_rows = 0usize;
    let mut unit = x.clone();
    for mut row in unit.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            zero_rows += 1;
        }
        let inv = 1.0 / (norm + 1e-12);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    if zero_rows > 0 {
        log::warn!("knn_graph: {zero_rows} zero-norm feature row(s); using epsilon-guarded norms");
    }

    let rows = par::map_indexed(n, |i| {
        let ri = unit.row(i);
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let mut dot = 0.0;
                let rj = unit.row(j);
                for t in 0..d {
                    dot += ri[t] * rj[t];
                }
                (j, dot.clamp(-1.0, 1.0))
            })
            .collect();
        sims.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        sims.truncate(k);
        // Softmax over kept entries only.
        let max = sims
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<(usize, f64)> =
            sims.iter().map(|&(j, s)| (j, (s - max).exp())).collect();
        let total: f64 = weights.iter().map(|&(_, w)| w).sum();
        for (_, w) in &mut weights {
            *w /= total;
        }
        weights
    });

    let mut a = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, w) in row {
            a[[i, j]] = w;
        }
    }
    Ok(a)
}

/// Personalized-PageRank diffusion `α (I − (1−α) Ã)^{-1}`.
///
/// The closed form equals the series `Σ_{k≥0} α(1−α)^k Ã^k`. Below the dense
/// cap the resolvent is solved directly via LU; above it the truncated series
/// substitutes, running terms until `α(1−α)^K < 1e-7`.
pub fn ppr_diffusion(a_norm: &NormalizedAdjacency, alpha: f64) -> Result<Array2<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha = {alpha} must lie in (0, 1]"
        )));
    }
    let n = a_norm.num_nodes();
    if alpha == 1.0 {
        return Ok(Array2::eye(n));
    }

    let mut out = if n <= DEFAULT_DENSE_CAP {
        let mut m = -((1.0 - alpha) * a_norm.dense()?);
        for i in 0..n {
            m[[i, i]] += 1.0;
        }
        let inv = Lu::factor(&m)?.solve(&Array2::eye(n))?;
        alpha * inv
    } else {
        // Term k adds α(1−α)^k Ã^k; stop once the coefficient is negligible.
        let mut acc = Array2::eye(n) * alpha;
        let mut power = Array2::eye(n);
        let mut coef = alpha;
        loop {
            coef *= 1.0 - alpha;
            if coef < 1e-7 {
                break;
            }
            power = a_norm.matmul(&power);
            acc.scaled_add(coef, &power);
        }
        acc
    };

    // The exact diffusion is entrywise nonnegative; scrub the tiny negative
    // round-off the solver can leave behind.
    for v in out.iter_mut() {
        if *v < 0.0 {
            debug_assert!(*v > -1e-9, "diffusion entry {v} below round-off tolerance");
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Generate the full view pair for one run.
///
/// The two feature copies draw independent noise from per-view sub-streams;
/// the KNN graph is built from the original (unperturbed) features and the
/// diffusion from the normalized adjacency.
pub fn make_views(g: &Graph, alpha: f64, k: usize, noise_std: f64, seed: u64) -> Result<ViewPair> {
    let x = g.features();
    let x1 = perturb_features(x, 1.0, noise_std, &mut sub_rng(seed, stream::VIEW1_NOISE))?;
    let x2 = perturb_features(x, 1.0, noise_std, &mut sub_rng(seed, stream::VIEW2_NOISE))?;
    let a_f = knn_graph(x, k)?;
    let a_d = ppr_diffusion(&normalize_adjacency(g), alpha)?;
    Ok(ViewPair { x1, x2, a_f, a_d })
}

/// Redraw the per-view noise for one epoch (used when per-epoch resampling
/// is enabled). Streams are derived from the epoch index so every epoch and
/// view reads an independent slice of the seed's randomness.
pub fn resample_noise(
    views: &mut ViewPair,
    x: &Array2<f64>,
    noise_std: f64,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let s1 = stream::VIEW1_NOISE + ((epoch as u64 + 1) << 32);
    let s2 = stream::VIEW2_NOISE + ((epoch as u64 + 1) << 32);
    views.x1 = perturb_features(x, 1.0, noise_std, &mut sub_rng(seed, s1))?;
    views.x2 = perturb_features(x, 1.0, noise_std, &mut sub_rng(seed, s2))?;
    Ok(())
}
