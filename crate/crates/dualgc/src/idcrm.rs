//! Dual correlation reduction: cross-view correlation matrices, the
//! clustering-refined affinity target, and the three associated losses.
//!
//! The sample-level loss pulls the cross-view sample correlation toward the
//! affinity target (or the identity, as an ablation), the feature-level loss
//! pushes the cross-view feature correlation of the cluster-level embeddings
//! toward the identity, and the propagation regularizer penalizes divergence
//! between an embedding and its one-step propagated version.
//!
//! Every loss exists twice: a value-level function for evaluation and tests,
//! and a tape builder producing the differentiable node used in training.
//! Both compute the same formula.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::tape::{Tape, Var};

/// Cross-view correlation matrices at the two granularities.
#[derive(Debug, Clone)]
pub struct CorrelationPair {
    /// N×N sample-level cosine correlation.
    pub s_n: Array2<f64>,
    /// d×d feature-level cosine correlation of the cluster-level embeddings.
    pub s_f: Array2<f64>,
}

/// The refined sample-level regression target.
#[derive(Debug, Clone)]
pub struct AffinityTarget {
    /// N×N target: 0/1 at refined pairs, self-looped adjacency elsewhere.
    pub matrix: Array2<f64>,
    pub confident_mask: Vec<bool>,
}

fn unit_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / norm.max(1e-12);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} columns", a.ncols()),
            got: format!("{} columns", b.ncols()),
        });
    }
    let mut s = unit_rows(a).dot(&unit_rows(b).t());
    s.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(s)
}

/// Cross-view sample correlation: `s[i][j] = cos(z1_i, z2_j)`.
pub fn sample_correlation(z1: &Array2<f64>, z2: &Array2<f64>) -> Result<Array2<f64>> {
    if z1.nrows() != z2.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", z1.nrows()),
            got: format!("{} rows", z2.nrows()),
        });
    }
    cosine_matrix(z1, z2)
}

/// Cross-view feature correlation between two d×K cluster-level embeddings:
/// `s[i][j] = cos(row i of zt1, row j of zt2)`.
pub fn feature_correlation(zt1: &Array2<f64>, zt2: &Array2<f64>) -> Result<Array2<f64>> {
    if zt1.dim() != zt2.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", zt1.dim()),
            got: format!("{:?}", zt2.dim()),
        });
    }
    cosine_matrix(zt1, zt2)
}

/// Build the affinity target from the self-looped adjacency and the current
/// high-confidence pseudo-labels: pairs of confident samples get 1 (same
/// label) or 0 (different label); every other entry keeps its adjacency
/// value. The rule is symmetric and leaves the diagonal at 1.
pub fn build_affinity_target(
    a_selfloop: &Array2<f64>,
    pseudo_labels: &[usize],
    confident_mask: &[bool],
    num_classes: usize,
) -> Result<AffinityTarget> {
    let n = a_selfloop.nrows();
    if a_selfloop.ncols() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", a_selfloop.nrows(), a_selfloop.ncols()),
        });
    }
    if pseudo_labels.len() != n || confident_mask.len() != n {
        return Err(Error::LabelsLength {
            got: pseudo_labels.len().min(confident_mask.len()),
            expected: n,
        });
    }
    for &l in pseudo_labels {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
    }
    let mut t = a_selfloop.clone();
    for i in 0..n {
        if !confident_mask[i] {
            continue;
        }
        for j in 0..n {
            if !confident_mask[j] {
                continue;
            }
            t[[i, j]] = if pseudo_labels[i] == pseudo_labels[j] {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(AffinityTarget {
        matrix: t,
        confident_mask: confident_mask.to_vec(),
    })
}

/// Sample-level loss: `(1/N²) Σ_ij (s_n[i][j] − T[i][j])²`.
pub fn sample_loss(s_n: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if s_n.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.dim()),
            got: format!("{:?}", s_n.dim()),
        });
    }
    let n2 = (s_n.nrows() * s_n.ncols()) as f64;
    Ok(s_n
        .iter()
        .zip(target.iter())
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        / n2)
}

/// Pool node embeddings into the d×K cluster-level embedding: column k is
/// the mean of the rows whose pseudo-label is k, or the global row mean for
/// an empty group.
pub fn readout(z: &Array2<f64>, pseudo_labels: &[usize], k: usize) -> Result<Array2<f64>> {
    let (n, d) = z.dim();
    if pseudo_labels.len() != n {
        return Err(Error::LabelsLength {
            got: pseudo_labels.len(),
            expected: n,
        });
    }
    if k == 0 {
        return Err(Error::InvalidParameter("readout needs K >= 1".into()));
    }
    for &l in pseudo_labels {
        if l >= k {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: k,
            });
        }
    }
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &g) in pseudo_labels.iter().enumerate() {
        counts[g] += 1;
        for j in 0..d {
            sums[[g, j]] += z[[i, j]];
        }
    }
    let global: Vec<f64> = (0..d).map(|j| z.column(j).sum() / n as f64).collect();
    let mut out = Array2::zeros((d, k));
    for g in 0..k {
        for j in 0..d {
            out[[j, g]] = if counts[g] == 0 {
                global[j]
            } else {
                sums[[g, j]] / counts[g] as f64
            };
        }
    }
    Ok(out)
}

/// Feature-level loss: diagonal entries are pulled to 1 with weight 1/d²,
/// off-diagonal entries to 0 with weight 1/(d²−d).
pub fn feature_loss(s_f: &Array2<f64>) -> Result<f64> {
    let d = s_f.nrows();
    if s_f.ncols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("{d}x{d}"),
            got: format!("{}x{}", s_f.nrows(), s_f.ncols()),
        });
    }
    if d < 2 {
        return Err(Error::InvalidParameter(
            "feature loss needs d >= 2 (off-diagonal term undefined)".into(),
        ));
    }
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            let v = s_f[[i, j]];
            if i == j {
                diag += (v - 1.0) * (v - 1.0);
            } else {
                off += v * v;
            }
        }
    }
    let d = d as f64;
    Ok(diag / (d * d) + off / (d * d - d))
}

/// Jensen–Shannon divergence between the row distributions of Z and ÃZ.
///
/// Each row of Z and of ÃZ becomes a distribution through a row softmax;
/// the result is the mean over rows of ½KL(p‖m) + ½KL(q‖m), m = (p+q)/2,
/// hence always in [0, ln 2].
pub fn propagation_reg(z: &Array2<f64>, a_norm: &NormalizedAdjacency) -> Result<f64> {
    if a_norm.num_nodes() != z.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", a_norm.num_nodes()),
            got: format!("{} rows", z.nrows()),
        });
    }
    let az = a_norm.matmul(z);
    let p = row_softmax(z);
    let q = row_softmax(&az);
    let n = z.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..z.ncols() {
            let (pi, qi) = (p[[i, j]], q[[i, j]]);
            let m = 0.5 * (pi + qi);
            if pi > 0.0 {
                total += 0.5 * pi * (pi / m).ln();
            }
            if qi > 0.0 {
                total += 0.5 * qi * (qi / m).ln();
            }
        }
    }
    Ok(total / n as f64)
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Combined objective: `l_n + l_f + gamma · l_r`.
pub fn idcrm_loss(l_n: f64, l_f: f64, l_r: f64, gamma: f64) -> f64 {
    l_n + l_f + gamma * l_r
}

// ---------------------------------------------------------------------------
// Tape builders (the differentiable path used by the trainer).
// ---------------------------------------------------------------------------

/// Cosine correlation on the tape: `unit(a) · unit(b)ᵀ`.
pub fn correlation_on_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let na = tape.row_normalize_l2(a);
    let nb = tape.row_normalize_l2(b);
    let nbt = tape.transpose(nb);
    tape.matmul(na, nbt)
}

/// `(1/N²) Σ (s − T)²` with a constant target.
pub fn sample_loss_on_tape(tape: &mut Tape, s_n: Var, target: &Array2<f64>) -> Var {
    let n2 = (target.nrows() * target.ncols()) as f64;
    let t = tape.constant(target.clone());
    let diff = tape.sub(s_n, t);
    let sq = tape.hadamard(diff, diff);
    let sum = tape.sum_all(sq);
    tape.scale(sum, 1.0 / n2)
}

/// Readout on the tape: group means transposed into the d×K layout.
pub fn readout_on_tape(tape: &mut Tape, z: Var, pseudo_labels: &[usize], k: usize) -> Var {
    let means = tape.group_mean_rows(z, pseudo_labels, k);
    tape.transpose(means)
}

/// Feature loss on the tape, as a single weighted square sum of `s_f − I`.
pub fn feature_loss_on_tape(tape: &mut Tape, s_f: Var) -> Var {
    let d = tape.value(s_f).nrows();
    assert!(d >= 2, "feature loss needs d >= 2");
    let df = d as f64;
    let eye = Array2::eye(d);
    // Off-diagonal entries of s_f − I equal those of s_f, so one weighted
    // sum covers both terms.
    let mut weights = Array2::from_elem((d, d), 1.0 / (df * df - df));
    for i in 0..d {
        weights[[i, i]] = 1.0 / (df * df);
    }
    let eye = tape.constant(eye);
    let diff = tape.sub(s_f, eye);
    let sq = tape.hadamard(diff, diff);
    let w = tape.constant(weights);
    let weighted = tape.hadamard(sq, w);
    tape.sum_all(weighted)
}

/// JSD propagation regularizer on the tape. `a_dense` is the (constant)
/// dense normalized adjacency.
pub fn propagation_reg_on_tape(tape: &mut Tape, z: Var, a_dense: Var) -> Var {
    let n = tape.value(z).nrows();
    let az = tape.matmul(a_dense, z);
    let p = tape.row_softmax(z);
    let q = tape.row_softmax(az);
    let sum_pq = tape.add(p, q);
    let m = tape.scale(sum_pq, 0.5);
    let ln_m = tape.ln_clamped(m);

    let ln_p = tape.ln_clamped(p);
    let diff_p = tape.sub(ln_p, ln_m);
    let term_p = tape.hadamard(p, diff_p);
    let kl_p = tape.sum_all(term_p);

    let ln_q = tape.ln_clamped(q);
    let diff_q = tape.sub(ln_q, ln_m);
    let term_q = tape.hadamard(q, diff_q);
    let kl_q = tape.sum_all(term_q);

    let total = tape.add(kl_p, kl_q);
    tape.scale(total, 0.5 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, Graph};
    use crate::rng::sub_rng;
    use ndarray::array;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = sub_rng(seed, 77);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sample_correlation_diagonal_of_shared_input() {
        let z = random_matrix(6, 4, 1);
        let s = sample_correlation(&z, &z).unwrap();
        for i in 0..6 {
            assert!((s[[i, i]] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_correlation_signs() {
        let z1 = array![[1.0, 0.0], [0.0, 2.0]];
        let z2 = array![[0.0, 3.0], [-1.0, 0.0]];
        let s = sample_correlation(&z1, &z2).unwrap();
        assert!((s[[0, 0]]).abs() < 1e-12); // orthogonal
        assert!((s[[0, 1]] + 1.0).abs() < 1e-9); // opposite
    }

    #[test]
    fn correlations_stay_in_unit_interval() {
        let s = sample_correlation(&random_matrix(8, 3, 2), &random_matrix(8, 3, 3)).unwrap();
        assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    fn four_cycle_selfloop() -> Array2<f64> {
        let mut a = Array2::eye(4);
        for &(i, j) in &[(0usize, 1usize), (1, 2), (2, 3), (3, 0)] {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    #[test]
    fn affinity_without_confidence_is_adjacency() {
        let a = four_cycle_selfloop();
        let t = build_affinity_target(&a, &[0, 0, 1, 1], &[false; 4], 2).unwrap();
        assert_eq!(t.matrix, a);
    }

    #[test]
    fn affinity_saturates_when_all_same_label() {
        let a = four_cycle_selfloop();
        let t = build_affinity_target(&a, &[1, 1, 1, 1], &[true; 4], 2).unwrap();
        assert!(t.matrix.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn affinity_four_cycle_example() {
        // Labels [0,0,1,1] on a self-looped 4-cycle, everyone confident:
        // the target becomes two all-ones 2×2 blocks.
        let a = four_cycle_selfloop();
        let t = build_affinity_target(&a, &[0, 0, 1, 1], &[true; 4], 2).unwrap();
        let want = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ];
        assert_eq!(t.matrix, want);
    }

    #[test]
    fn affinity_is_relabeling_invariant() {
        let a = four_cycle_selfloop();
        let mask = [true, false, true, true];
        let t1 = build_affinity_target(&a, &[0, 0, 1, 1], &mask, 2).unwrap();
        let t2 = build_affinity_target(&a, &[1, 1, 0, 0], &mask, 2).unwrap();
        assert_eq!(t1.matrix, t2.matrix);
    }

    #[test]
    fn affinity_diagonal_and_symmetry() {
        let a = four_cycle_selfloop();
        let t = build_affinity_target(&a, &[0, 1, 0, 1], &[true, true, false, true], 2).unwrap();
        for i in 0..4 {
            assert_eq!(t.matrix[[i, i]], 1.0);
            for j in 0..4 {
                assert_eq!(t.matrix[[i, j]], t.matrix[[j, i]]);
            }
        }
    }

    #[test]
    fn affinity_rejects_bad_labels() {
        let a = four_cycle_selfloop();
        assert!(build_affinity_target(&a, &[0, 0, 2, 1], &[true; 4], 2).is_err());
    }

    #[test]
    fn sample_loss_minimum_and_arithmetic() {
        let t = four_cycle_selfloop();
        assert_eq!(sample_loss(&t, &t).unwrap(), 0.0);
        let s = Array2::zeros((2, 2));
        let eye = Array2::eye(2);
        assert!((sample_loss(&s, &eye).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_loss_matches_straightline_oracle() {
        let s = random_matrix(5, 5, 4);
        let t = random_matrix(5, 5, 5);
        let got = sample_loss(&s, &t).unwrap();
        let mut want = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let d = s[[i, j]] - t[[i, j]];
                want += d * d;
            }
        }
        want /= 25.0;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn readout_singleton_groups_transpose() {
        let z = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let zt = readout(&z, &[0, 1, 2], 3).unwrap();
        assert_eq!(zt, array![[1.0, 3.0, 5.0], [2.0, 4.0, 6.0]]);
    }

    #[test]
    fn readout_single_group_is_global_mean() {
        let z = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let zt = readout(&z, &[0, 0, 0], 1).unwrap();
        assert_eq!(zt, array![[3.0], [4.0]]);
    }

    #[test]
    fn readout_empty_group_falls_back_to_global_mean() {
        let z = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let zt = readout(&z, &[0, 0, 2], 3).unwrap();
        assert_eq!(zt.column(1).to_vec(), vec![3.0, 4.0]);
        assert_eq!(zt.column(2).to_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn feature_correlation_examples() {
        let zt = array![[1.0, 0.0], [0.0, 1.0]];
        let s = feature_correlation(&zt, &zt).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-9 && s[[0, 1]].abs() < 1e-12);

        let same = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let s = feature_correlation(&same, &same).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn feature_correlation_matches_bruteforce() {
        let zt1 = random_matrix(4, 3, 6);
        let zt2 = random_matrix(4, 3, 7);
        let s = feature_correlation(&zt1, &zt2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..3).map(|t| zt1[[i, t]] * zt2[[j, t]]).sum();
                let n1: f64 = zt1.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                let n2: f64 = zt2.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                let want = dot / (n1.max(1e-12) * n2.max(1e-12));
                assert!((s[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_loss_examples() {
        assert_eq!(feature_loss(&Array2::eye(3)).unwrap(), 0.0);
        let ones = Array2::ones((2, 2));
        assert!((feature_loss(&ones).unwrap() - 1.0).abs() < 1e-15);
        let zeros = Array2::zeros((2, 2));
        assert!((feature_loss(&zeros).unwrap() - 0.5).abs() < 1e-15);
        assert!(feature_loss(&Array2::ones((1, 1))).is_err());
    }

    fn toy_norm(n: usize) -> NormalizedAdjacency {
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        normalize_adjacency(&Graph::build(vec![vec![0.0]; n], &edges, None, None).unwrap())
    }

    #[test]
    fn propagation_reg_zero_at_identity() {
        let g = Graph::build(vec![vec![0.0]; 3], &[], None, None).unwrap();
        let a = normalize_adjacency(&g); // edgeless -> identity
        let z = random_matrix(3, 4, 8);
        assert!(propagation_reg(&z, &a).unwrap().abs() < 1e-15);
    }

    #[test]
    fn propagation_reg_is_bounded() {
        let a = toy_norm(6);
        for seed in 0..5 {
            let z = random_matrix(6, 4, 100 + seed) * 50.0;
            let v = propagation_reg(&z, &a).unwrap();
            assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn propagation_reg_matches_kl_oracle() {
        let a = toy_norm(3);
        let z = array![[0.5, -0.2, 1.0], [0.0, 0.3, -0.7], [1.2, 0.1, 0.4]];
        let got = propagation_reg(&z, &a).unwrap();

        // Direct KL-sum oracle.
        let dense = a.dense().unwrap();
        let az = dense.dot(&z);
        let softmax = |m: &Array2<f64>| {
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let s: f64 = row.sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            out
        };
        let p = softmax(&z);
        let q = softmax(&az);
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let m = 0.5 * (p[[i, j]] + q[[i, j]]);
                want += 0.5 * p[[i, j]] * (p[[i, j]] / m).ln();
                want += 0.5 * q[[i, j]] * (q[[i, j]] / m).ln();
            }
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn idcrm_loss_arithmetic() {
        assert_eq!(idcrm_loss(0.0, 0.0, 0.0, 123.0), 0.0);
        assert!((idcrm_loss(0.5, 1.0, 0.001, 1000.0) - 2.5).abs() < 1e-12);
        assert_eq!(idcrm_loss(0.5, 1.0, 0.7, 0.0), 1.5);
    }

    #[test]
    fn losses_invariant_under_positive_row_rescaling() {
        let z1 = random_matrix(6, 4, 9);
        let z2 = random_matrix(6, 4, 10);
        let t = Array2::eye(6);
        let base = sample_loss(&sample_correlation(&z1, &z2).unwrap(), &t).unwrap();
        let mut rng = sub_rng(11, 78);
        let mut z1s = z1.clone();
        let mut z2s = z2.clone();
        for i in 0..6 {
            let f1: f64 = rng.random_range(0.1..10.0);
            let f2: f64 = rng.random_range(0.1..10.0);
            z1s.row_mut(i).iter_mut().for_each(|v| *v *= f1);
            z2s.row_mut(i).iter_mut().for_each(|v| *v *= f2);
        }
        let scaled = sample_loss(&sample_correlation(&z1s, &z2s).unwrap(), &t).unwrap();
        assert!((base - scaled).abs() < 1e-9);

        let fbase = feature_loss(&feature_correlation(&z1, &z2).unwrap()).unwrap();
        let fscaled = feature_loss(&feature_correlation(&z1s, &z2s).unwrap()).unwrap();
        assert!((fbase - fscaled).abs() < 1e-9);
    }

    #[test]
    fn tape_losses_match_value_losses() {
        let z1 = random_matrix(6, 4, 12);
        let z2 = random_matrix(6, 4, 13);
        let labels = [0usize, 1, 0, 2, 1, 0];
        let a = toy_norm(6);
        let target = build_affinity_target(
            &four_by_six_selfloop(),
            &labels,
            &[true, true, false, true, false, true],
            3,
        )
        .unwrap();

        let mut tape = Tape::new();
        let z1v = tape.param(z1.clone());
        let z2v = tape.param(z2.clone());
        let s_n = correlation_on_tape(&mut tape, z1v, z2v);
        let l_n = sample_loss_on_tape(&mut tape, s_n, &target.matrix);
        let zt1 = readout_on_tape(&mut tape, z1v, &labels, 3);
        let zt2 = readout_on_tape(&mut tape, z2v, &labels, 3);
        let s_f = correlation_on_tape(&mut tape, zt1, zt2);
        let l_f = feature_loss_on_tape(&mut tape, s_f);
        let adense = tape.constant(a.dense().unwrap());
        let l_r = propagation_reg_on_tape(&mut tape, z1v, adense);

        let want_ln = sample_loss(&sample_correlation(&z1, &z2).unwrap(), &target.matrix).unwrap();
        let rt1 = readout(&z1, &labels, 3).unwrap();
        let rt2 = readout(&z2, &labels, 3).unwrap();
        let want_lf = feature_loss(&feature_correlation(&rt1, &rt2).unwrap()).unwrap();
        let want_lr = propagation_reg(&z1, &a).unwrap();

        assert!((tape.scalar(l_n) - want_ln).abs() < 1e-12);
        assert!((tape.scalar(l_f) - want_lf).abs() < 1e-12);
        assert!((tape.scalar(l_r) - want_lr).abs() < 1e-12);
    }

    fn four_by_six_selfloop() -> Array2<f64> {
        let mut a = Array2::eye(6);
        for &(i, j) in &[(0usize, 1usize), (1, 2), (2, 3), (3, 4), (4, 5)] {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    #[test]
    fn tape_loss_gradients_match_finite_differences() {
        let labels = [0usize, 1, 0, 1];
        let target =
            build_affinity_target(&Array2::eye(4), &labels, &[true, true, true, true], 2).unwrap();
        let a = toy_norm(4).dense().unwrap();

        let build = |tape: &mut Tape, vars: &[Var]| -> Var {
            let s_n = correlation_on_tape(tape, vars[0], vars[1]);
            let l_n = sample_loss_on_tape(tape, s_n, &target.matrix);
            let zt1 = readout_on_tape(tape, vars[0], &labels, 2);
            let zt2 = readout_on_tape(tape, vars[1], &labels, 2);
            let s_f = correlation_on_tape(tape, zt1, zt2);
            let l_f = feature_loss_on_tape(tape, s_f);
            let ad = tape.constant(a.clone());
            let l_r = propagation_reg_on_tape(tape, vars[0], ad);
            let lnf = tape.add(l_n, l_f);
            let lr_scaled = tape.scale(l_r, 2.0);
            tape.add(lnf, lr_scaled)
        };

        let mut rng = sub_rng(14, 79);
        let inputs: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((4, 3), |_| rng.random_range(0.3..1.5)))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        let h = 1e-5;
        for (pi, base) in inputs.iter().enumerate() {
            let g = grads.get(vars[pi]).unwrap();
            for r in 0..base.nrows() {
                for c in 0..base.ncols() {
                    let eval = |delta: f64| {
                        let mut tape = Tape::new();
                        let vars: Vec<Var> = inputs
                            .iter()
                            .enumerate()
                            .map(|(i, m)| {
                                let mut m = m.clone();
                                if i == pi {
                                    m[[r, c]] += delta;
                                }
                                tape.param(m)
                            })
                            .collect();
                        let loss = build(&mut tape, &vars);
                        tape.scalar(loss)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let got = g[[r, c]];
                    let denom = fd.abs().max(got.abs());
                    let ok = if denom < 1e-8 {
                        (fd - got).abs() < 1e-8
                    } else {
                        (fd - got).abs() / denom < 1e-4
                    };
                    assert!(ok, "z{pi} ({r},{c}): analytic {got}, fd {fd}");
                }
            }
        }
    }
}
