//! Training orchestration: branch-wise and united reconstruction
//! pretraining, center initialization, fine-tuning on the combined
//! objective, ablation sweeps, and the run artifacts they produce.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::{self, ViewPair};
use crate::cluster::{self, argmax_rows};
use crate::encoder::{self, encode_views, save_checkpoint, EncoderDims, EncoderState};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::idcrm;
use crate::metrics::{self, Metrics, MetricsReport};
use crate::rng::{stream, sub_rng};
use crate::tape::{Tape, Var};

/// Which matrix the cross-view sample correlation is pulled toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleTarget {
    /// Clustering-refined affinity matrix, rebuilt every epoch.
    Affinity,
    /// Fixed identity matrix (plain cross-view decorrelation).
    Identity,
}

impl std::str::FromStr for SampleTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affinity" => Ok(Self::Affinity),
            "identity" => Ok(Self::Identity),
            other => Err(Error::InvalidParameter(format!(
                "unknown sample target {other:?} (expected affinity or identity)"
            ))),
        }
    }
}

/// Loss-term switches. The sample term runs when either the full module or
/// the affinity-recovery strategy alone is enabled; the feature term when
/// either the full module or the redundancy-reduction strategy is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_preg: bool,
    pub use_idcrm: bool,
    pub use_ars: bool,
    pub use_rrs: bool,
    pub sample_target: SampleTarget,
}

impl AblationFlags {
    /// Everything the full method uses.
    pub fn full() -> Self {
        Self {
            use_preg: true,
            use_idcrm: true,
            use_ars: false,
            use_rrs: false,
            sample_target: SampleTarget::Affinity,
        }
    }

    /// Bare baseline: reconstruction and clustering alignment only.
    pub fn baseline() -> Self {
        Self {
            use_preg: false,
            use_idcrm: false,
            use_ars: false,
            use_rrs: false,
            sample_target: SampleTarget::Affinity,
        }
    }

    /// Parse a variant name: `B` optionally followed by `-P` (propagation
    /// regularization), `-I` (full correlation-reduction module), `-R`
    /// (feature-level reduction alone), `-A` (sample-level recovery alone),
    /// e.g. `B-P-I` or `B-R-A`.
    pub fn variant(name: &str) -> Result<Self> {
        let mut parts = name.split('-');
        if parts.next() != Some("B") {
            return Err(Error::InvalidParameter(format!(
                "variant {name:?} must start with B"
            )));
        }
        let mut flags = Self::baseline();
        for p in parts {
            match p {
                "P" => flags.use_preg = true,
                "I" => flags.use_idcrm = true,
                "R" => flags.use_rrs = true,
                "A" => flags.use_ars = true,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown variant token {other:?} in {name:?}"
                    )))
                }
            }
        }
        Ok(flags)
    }

    pub fn sample_enabled(&self) -> bool {
        self.use_idcrm || self.use_ars
    }

    pub fn feature_enabled(&self) -> bool {
        self.use_idcrm || self.use_rrs
    }

    pub fn propagation_enabled(&self) -> bool {
        self.use_preg
    }
}

impl std::fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "B")?;
        if self.use_preg {
            write!(f, "-P")?;
        }
        if self.use_idcrm {
            write!(f, "-I")?;
        }
        if self.use_rrs {
            write!(f, "-R")?;
        }
        if self.use_ars {
            write!(f, "-A")?;
        }
        Ok(())
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs_pretrain: usize,
    pub epochs_init: usize,
    pub epochs_finetune: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub knn_k: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub ablation: AblationFlags,
    /// Fraction of each cluster marked high-confidence when refining the
    /// affinity target.
    pub confidence_fraction: f64,
    /// Weight of the structure term inside the reconstruction loss.
    pub adjacency_weight: f64,
    /// Redraw the per-view feature noise every fine-tuning epoch.
    pub resample_noise: bool,
    /// Cluster count; defaults to the labeled class count.
    pub clusters: Option<usize>,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub divergence_threshold: f64,
    /// Where to store the trained (or, on divergence, last good) state.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs_pretrain: 30,
            epochs_init: 100,
            epochs_finetune: 400,
            lambda: 10.0,
            gamma: 1e3,
            alpha: 0.2,
            knn_k: 5,
            noise_std: 0.1,
            seed: 0,
            ablation: AblationFlags::full(),
            confidence_fraction: 0.6,
            adjacency_weight: 0.1,
            resample_noise: false,
            clusters: None,
            hidden: vec![256],
            latent: 20,
            divergence_threshold: 1e8,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // `<= 0.0` alone would let NaN through.
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("adjacency_weight", self.adjacency_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        if !(self.confidence_fraction > 0.0 && self.confidence_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "confidence fraction {} must lie in (0, 1]",
                self.confidence_fraction
            )));
        }
        if self.latent == 0 {
            return Err(Error::InvalidParameter("latent width must be > 0".into()));
        }
        Ok(())
    }

    fn dims_for(&self, input: usize) -> EncoderDims {
        EncoderDims {
            input,
            hidden: self.hidden.clone(),
            latent: self.latent,
        }
    }
}

/// One logged epoch. Components are stored as their weighted contribution
/// to the total (the propagation and alignment terms arrive pre-multiplied
/// by γ and λ); a disabled term logs 0, so `total` always equals the sum of
/// the five components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub l_n: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// Output of one full training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub predictions: Vec<usize>,
    /// Scores against ground truth; absent for unlabeled graphs.
    pub metrics: Option<Metrics>,
    pub wall_clock_secs: f64,
}

/// First-order adaptive-moment optimizer with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Option<&Array2<f64>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    *pv -= self.lr * (mv / bc1) / ((vv / bc2).sqrt() + self.eps);
                });
        }
    }
}

fn finite_params(state: &EncoderState, centers: &Array2<f64>) -> bool {
    state
        .params()
        .into_iter()
        .all(|p| p.iter().all(|v| v.is_finite()))
        && centers.iter().all(|v| v.is_finite())
}

/// Reconstruction-only pretraining: `epochs_pretrain` branch-wise epochs
/// (the attribute branch decodes features, the graph branch reproduces its
/// view's structure, parameters disjoint) followed by `epochs_init` united
/// epochs on the full reconstruction objective. Returns the trained state
/// and one record per epoch.
pub fn pretrain(
    g: &Graph,
    views: &ViewPair,
    cfg: &TrainConfig,
) -> Result<(EncoderState, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut state = EncoderState::init(cfg.dims_for(g.num_features()), cfg.seed);
    let mut records = Vec::new();
    let shapes: Vec<(usize, usize)> = state.params().iter().map(|p| p.dim()).collect();

    // Phase 1: each branch learns its own reconstruction.
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    for epoch in 0..cfg.epochs_pretrain {
        let mut tape = Tape::new();
        let vars = state.to_tape(&mut tape, true);
        let x = [
            tape.constant(views.x1.clone()),
            tape.constant(views.x2.clone()),
        ];
        let a = [
            tape.constant(views.a_f.clone()),
            tape.constant(views.a_d.clone()),
        ];
        let (n, d) = views.x1.dim();

        let mut feature = None;
        let mut structure = None;
        for v in 0..2 {
            let za = vars.attribute_branch(&mut tape, x[v]);
            let xhat = vars.decode(&mut tape, za);
            let diff = tape.sub(xhat, x[v]);
            let sq = tape.hadamard(diff, diff);
            let sum = tape.sum_all(sq);
            let mse = tape.scale(sum, 1.0 / (n * d) as f64);
            feature = Some(match feature {
                None => mse,
                Some(acc) => tape.add(acc, mse),
            });

            let zg = vars.graph_branch(&mut tape, x[v], a[v]);
            let zt = tape.transpose(zg);
            let zzt = tape.matmul(zg, zt);
            let sig = tape.sigmoid(zzt);
            let adiff = tape.sub(a[v], sig);
            let asq = tape.hadamard(adiff, adiff);
            let asum = tape.sum_all(asq);
            let aterm = tape.scale(asum, 1.0 / (n * n) as f64);
            structure = Some(match structure {
                None => aterm,
                Some(acc) => tape.add(acc, aterm),
            });
        }
        let feature = tape.scale(feature.expect("two views"), 0.5);
        let structure = tape.scale(structure.expect("two views"), 0.5);
        let weighted = tape.scale(structure, cfg.adjacency_weight);
        let total_var = tape.add(feature, weighted);
        let total = tape.scalar(total_var);
        if !total.is_finite() {
            return Err(Error::Diverged { epoch, loss: total });
        }
        let grads = tape.backward(total_var);
        let grad_refs: Vec<Option<&Array2<f64>>> =
            vars.all().iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut state.params_mut(), &grad_refs);
        records.push(EpochRecord {
            phase: "pretrain".into(),
            epoch,
            l_n: 0.0,
            l_f: 0.0,
            l_r: 0.0,
            l_rec: total,
            l_kl: 0.0,
            total,
        });
    }

    // Phase 2: united reconstruction through the fused encoder.
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    for e in 0..cfg.epochs_init {
        let epoch = cfg.epochs_pretrain + e;
        let mut tape = Tape::new();
        let vars = state.to_tape(&mut tape, true);
        let x = [
            tape.constant(views.x1.clone()),
            tape.constant(views.x2.clone()),
        ];
        let a = [
            tape.constant(views.a_f.clone()),
            tape.constant(views.a_d.clone()),
        ];
        let z = [
            vars.encode(&mut tape, x[0], a[0]),
            vars.encode(&mut tape, x[1], a[1]),
        ];
        let recon = encoder::recon_loss_on_tape(&mut tape, &vars, x, a, z, cfg.adjacency_weight);
        let total = tape.scalar(recon.total);
        if !total.is_finite() {
            return Err(Error::Diverged { epoch, loss: total });
        }
        let grads = tape.backward(recon.total);
        let grad_refs: Vec<Option<&Array2<f64>>> =
            vars.all().iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut state.params_mut(), &grad_refs);
        records.push(EpochRecord {
            phase: "pretrain".into(),
            epoch,
            l_n: 0.0,
            l_f: 0.0,
            l_r: 0.0,
            l_rec: total,
            l_kl: 0.0,
            total,
        });
    }
    Ok((state, records))
}

/// Clustering-head state carried between fine-tuning epochs.
struct HeadState {
    p: Array2<f64>,
    pseudo: Vec<usize>,
    target: Array2<f64>,
}

fn refresh_head(
    state: &EncoderState,
    centers: &Array2<f64>,
    views: &ViewPair,
    a_selfloop: &Array2<f64>,
    c: usize,
    cfg: &TrainConfig,
) -> Result<HeadState> {
    let lat = encode_views(state, &views.x1, &views.x2, &views.a_f, &views.a_d)?;
    let q = cluster::soft_assign(&lat.z_fused, centers);
    let p = cluster::target_distribution(&q);
    let pseudo = argmax_rows(&q);
    let mask = cluster::select_confident(&lat.z_fused, centers, &pseudo, cfg.confidence_fraction)?;
    let target = match cfg.ablation.sample_target {
        SampleTarget::Affinity => {
            idcrm::build_affinity_target(a_selfloop, &pseudo, &mask, c)?.matrix
        }
        SampleTarget::Identity => Array2::<f64>::eye(a_selfloop.nrows()),
    };
    Ok(HeadState { p, pseudo, target })
}

/// Run the full schedule on one graph: pretraining, k-means center
/// initialization, `epochs_finetune` epochs on the combined objective, and
/// a final k-means over the fused embedding for predictions.
pub fn train(g: &Graph, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let c = cfg.clusters.unwrap_or_else(|| g.num_classes());
    let mut views = augment::make_views(g, cfg.alpha, cfg.knn_k, cfg.noise_std, cfg.seed)?;
    let a_norm = normalize_adjacency(g);
    let a_norm_dense = a_norm.dense()?;
    let a_selfloop = g.adjacency_dense(true)?;

    let (mut state, mut records) = pretrain(g, &views, cfg)?;

    // Center initialization over the pretrained fused embedding.
    let lat = encode_views(&state, &views.x1, &views.x2, &views.a_f, &views.a_d)?;
    let (mut centers, _) = cluster::kmeans(
        &lat.z_fused,
        c,
        &mut sub_rng(cfg.seed, stream::KMEANS_INIT),
        cluster::KMEANS_MAX_ITER,
    )?;
    let mut head = refresh_head(&state, &centers, &views, &a_selfloop, c, cfg)?;

    let mut shapes: Vec<(usize, usize)> = state.params().iter().map(|p| p.dim()).collect();
    shapes.push(centers.dim());
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    let flags = cfg.ablation;

    for epoch in 0..cfg.epochs_finetune {
        if cfg.resample_noise && epoch > 0 {
            augment::resample_noise(&mut views, g.features(), cfg.noise_std, cfg.seed, epoch)?;
        }

        let mut tape = Tape::new();
        let vars = state.to_tape(&mut tape, true);
        let centers_var = tape.param(centers.clone());
        let x = [
            tape.constant(views.x1.clone()),
            tape.constant(views.x2.clone()),
        ];
        let a = [
            tape.constant(views.a_f.clone()),
            tape.constant(views.a_d.clone()),
        ];
        let z1 = vars.encode(&mut tape, x[0], a[0]);
        let z2 = vars.encode(&mut tape, x[1], a[1]);
        let zsum = tape.add(z1, z2);
        let z = tape.scale(zsum, 0.5);

        let recon =
            encoder::recon_loss_on_tape(&mut tape, &vars, x, a, [z1, z2], cfg.adjacency_weight);
        let q_var = cluster::soft_assign_on_tape(&mut tape, z, centers_var);
        let kl_raw = cluster::kl_loss_on_tape(&mut tape, q_var, &head.p);
        let kl = tape.scale(kl_raw, cfg.lambda);

        let mut terms: Vec<Var> = vec![recon.total, kl];
        let mut l_n_val = 0.0;
        let mut l_f_val = 0.0;
        let mut l_r_val = 0.0;
        if flags.sample_enabled() {
            let s_n = idcrm::correlation_on_tape(&mut tape, z1, z2);
            let l_n = idcrm::sample_loss_on_tape(&mut tape, s_n, &head.target);
            l_n_val = tape.scalar(l_n);
            terms.push(l_n);
        }
        if flags.feature_enabled() {
            let zt1 = idcrm::readout_on_tape(&mut tape, z1, &head.pseudo, c);
            let zt2 = idcrm::readout_on_tape(&mut tape, z2, &head.pseudo, c);
            let s_f = idcrm::correlation_on_tape(&mut tape, zt1, zt2);
            let l_f = idcrm::feature_loss_on_tape(&mut tape, s_f);
            l_f_val = tape.scalar(l_f);
            terms.push(l_f);
        }
        if flags.propagation_enabled() {
            let a_var = tape.constant(a_norm_dense.clone());
            let raw = idcrm::propagation_reg_on_tape(&mut tape, z, a_var);
            let l_r = tape.scale(raw, cfg.gamma);
            l_r_val = tape.scalar(l_r);
            terms.push(l_r);
        }
        let total_var = terms
            .into_iter()
            .reduce(|acc, t| tape.add(acc, t))
            .expect("at least two terms");
        let total = tape.scalar(total_var);

        let record = EpochRecord {
            phase: "finetune".into(),
            epoch,
            l_n: l_n_val,
            l_f: l_f_val,
            l_r: l_r_val,
            l_rec: tape.scalar(recon.total),
            l_kl: tape.scalar(kl),
            total,
        };

        if !total.is_finite() || total > cfg.divergence_threshold {
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(&state, Some(&centers), path)?;
            }
            return Err(Error::Diverged { epoch, loss: total });
        }

        let grads = tape.backward(total_var);
        let mut param_vars = vars.all();
        param_vars.push(centers_var);
        let grad_refs: Vec<Option<&Array2<f64>>> =
            param_vars.iter().map(|&v| grads.get(v)).collect();

        let snapshot = (state.clone(), centers.clone());
        {
            let mut params = state.params_mut();
            params.push(&mut centers);
            adam.step(&mut params, &grad_refs);
        }
        if !finite_params(&state, &centers) {
            let (s, ce) = snapshot;
            state = s;
            centers = ce;
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(&state, Some(&centers), path)?;
            }
            return Err(Error::Diverged { epoch, loss: total });
        }

        head = refresh_head(&state, &centers, &views, &a_selfloop, c, cfg)?;
        records.push(record);
    }

    // Final inference: fresh k-means over the fused embedding.
    let lat = encode_views(&state, &views.x1, &views.x2, &views.a_f, &views.a_d)?;
    let (_, predictions) = cluster::kmeans(
        &lat.z_fused,
        c,
        &mut sub_rng(cfg.seed, stream::KMEANS_FINAL),
        cluster::KMEANS_MAX_ITER,
    )?;
    let metrics = match g.labels() {
        Some(truth) => Some(metrics::evaluate(truth, &predictions)?),
        None => None,
    };
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&state, Some(&centers), path)?;
    }
    Ok(TrainReport {
        seed: cfg.seed,
        epochs: records,
        predictions,
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Train once per seed and aggregate the scores. The aggregate is `None`
/// when the graph has no labels to score against.
pub fn train_multi(
    g: &Graph,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(Vec<TrainReport>, Option<MetricsReport>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("at least one seed required".into()));
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        if let (Some(base), true) = (&cfg.checkpoint, seeds.len() > 1) {
            run_cfg.checkpoint = Some(with_seed_suffix(base, seed));
        }
        reports.push(train(g, &run_cfg)?);
    }
    let runs: Option<Vec<Metrics>> = reports.iter().map(|r| r.metrics).collect();
    Ok((reports, runs.map(|r| MetricsReport::from_runs(&r))))
}

fn with_seed_suffix(path: &std::path::Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("bin");
    path.with_file_name(format!("{stem}_seed{seed}.{ext}"))
}

/// One ablation table row.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: MetricsReport,
}

/// Train every variant with the same seed list and aggregate per variant.
pub fn run_ablation(
    g: &Graph,
    base: &TrainConfig,
    variants: &[AblationFlags],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("at least one seed required".into()));
    }
    if g.labels().is_none() {
        return Err(Error::InvalidParameter(
            "ablation scoring requires a labeled graph".into(),
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.ablation = variant;
        cfg.checkpoint = None;
        let (_, report) = train_multi(g, &cfg, seeds)?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            metrics: report.expect("labeled graph yields metrics"),
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct ReportLine<'a> {
    seed: u64,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// One JSON object per epoch (all seeds concatenated, each line tagged).
pub fn write_report_jsonl(reports: &[TrainReport], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for report in reports {
        for record in &report.epochs {
            let line = ReportLine {
                seed: report.seed,
                record,
            };
            out.push_str(&serde_json::to_string(&line).expect("epoch record serializes"));
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Aggregated scores as deterministic, pretty-printed JSON.
pub fn write_metrics_json(report: &MetricsReport, path: &std::path::Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("metrics serialize");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// `node,label` rows for one run's predictions.
pub fn write_predictions_csv(predictions: &[usize], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("node,label\n");
    for (i, p) in predictions.iter().enumerate() {
        out.push_str(&format!("{i},{p}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sbm_generate;

    fn toy_graph() -> Graph {
        sbm_generate(
            &[12, 12],
            0.5,
            0.02,
            &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
            0.2,
            99,
        )
        .unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            epochs_pretrain: 3,
            epochs_init: 3,
            epochs_finetune: 5,
            knn_k: 3,
            hidden: vec![16],
            latent: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = toy_config();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg = toy_config();
        cfg.confidence_fraction = 0.0;
        assert!(cfg.validate().is_err());
        cfg = toy_config();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        assert!(toy_config().validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["B", "B-P", "B-I", "B-P-I", "B-R", "B-A", "B-R-A"] {
            let flags = AblationFlags::variant(name).unwrap();
            assert_eq!(flags.to_string(), name);
        }
        assert!(AblationFlags::variant("B-X").is_err());
        assert!(AblationFlags::variant("C").is_err());
        let full = AblationFlags::variant("B-P-I").unwrap();
        assert_eq!(full, AblationFlags::full());
        assert!(full.sample_enabled() && full.feature_enabled());
        let rra = AblationFlags::variant("B-R-A").unwrap();
        assert!(rra.sample_enabled() && rra.feature_enabled());
        assert!(!rra.propagation_enabled());
        assert!(!AblationFlags::variant("B").unwrap().sample_enabled());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Array2::from_elem((1, 1), 10.0);
        let mut adam = Adam::new(0.1, &[(1, 1)]);
        for _ in 0..500 {
            let g = Array2::from_elem((1, 1), 2.0 * (x[[0, 0]] - 3.0));
            adam.step(&mut [&mut x], &[Some(&g)]);
        }
        assert!((x[[0, 0]] - 3.0).abs() < 1e-3, "got {}", x[[0, 0]]);
    }

    #[test]
    fn pretrain_zero_epochs_returns_initialization() {
        let g = toy_graph();
        let mut cfg = toy_config();
        cfg.epochs_pretrain = 0;
        cfg.epochs_init = 0;
        let views = augment::make_views(&g, cfg.alpha, cfg.knn_k, cfg.noise_std, cfg.seed).unwrap();
        let (state, records) = pretrain(&g, &views, &cfg).unwrap();
        assert!(records.is_empty());
        let fresh = EncoderState::init(cfg.dims_for(g.num_features()), cfg.seed);
        for (a, b) in state.params().iter().zip(fresh.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pretrain_loss_decreases_and_is_deterministic() {
        let g = toy_graph();
        let mut cfg = toy_config();
        cfg.epochs_pretrain = 10;
        cfg.epochs_init = 5;
        let views = augment::make_views(&g, cfg.alpha, cfg.knn_k, cfg.noise_std, cfg.seed).unwrap();
        let (state_a, records_a) = pretrain(&g, &views, &cfg).unwrap();
        let (state_b, records_b) = pretrain(&g, &views, &cfg).unwrap();
        assert_eq!(records_a, records_b);
        for (a, b) in state_a.params().iter().zip(state_b.params().iter()) {
            assert_eq!(a, b);
        }
        for w in records_a[..10].windows(2) {
            assert!(
                w[1].l_rec < w[0].l_rec,
                "pretrain loss rose: {} -> {}",
                w[0].l_rec,
                w[1].l_rec
            );
        }
    }

    #[test]
    fn train_produces_consistent_report() {
        let g = toy_graph();
        let report = train(&g, &toy_config()).unwrap();
        assert_eq!(report.predictions.len(), g.num_nodes());
        assert!(report.metrics.is_some());
        assert_eq!(report.epochs.len(), 3 + 3 + 5);
        for r in &report.epochs {
            for v in [r.l_n, r.l_f, r.l_r, r.l_rec, r.l_kl, r.total] {
                assert!(v.is_finite());
            }
            let sum = r.l_n + r.l_f + r.l_r + r.l_rec + r.l_kl;
            assert!(
                (r.total - sum).abs() < 1e-9,
                "total {} != component sum {sum}",
                r.total
            );
        }
    }

    #[test]
    fn train_is_deterministic() {
        let g = toy_graph();
        let cfg = toy_config();
        let a = train(&g, &cfg).unwrap();
        let b = train(&g, &cfg).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.metrics.unwrap(), b.metrics.unwrap());
    }

    #[test]
    fn first_epoch_components_are_isolated_across_variants() {
        let g = toy_graph();
        let mut cfg = toy_config();
        cfg.epochs_finetune = 1;
        let mut first = Vec::new();
        for name in ["B", "B-P", "B-P-I", "B-R-A"] {
            cfg.ablation = AblationFlags::variant(name).unwrap();
            let report = train(&g, &cfg).unwrap();
            let rec = report
                .epochs
                .iter()
                .find(|r| r.phase == "finetune")
                .unwrap()
                .clone();
            first.push(rec);
        }
        // Shared terms agree bitwise at epoch 0.
        for rec in &first {
            assert_eq!(rec.l_rec, first[0].l_rec);
            assert_eq!(rec.l_kl, first[0].l_kl);
        }
        assert_eq!(first[1].l_r, first[2].l_r); // B-P vs B-P-I
        assert_eq!(first[2].l_n, first[3].l_n); // B-P-I vs B-R-A
        assert_eq!(first[2].l_f, first[3].l_f);
        // Disabled terms log zero.
        assert_eq!(first[0].l_n, 0.0);
        assert_eq!(first[0].l_f, 0.0);
        assert_eq!(first[0].l_r, 0.0);
        assert_eq!(first[3].l_r, 0.0);
    }

    #[test]
    fn totals_differ_only_by_the_gated_term() {
        let g = toy_graph();
        let mut cfg = toy_config();
        cfg.epochs_finetune = 1;
        cfg.ablation = AblationFlags::variant("B").unwrap();
        let off = train(&g, &cfg).unwrap();
        cfg.ablation = AblationFlags::variant("B-P").unwrap();
        let on = train(&g, &cfg).unwrap();
        let off0 = off.epochs.iter().find(|r| r.phase == "finetune").unwrap();
        let on0 = on.epochs.iter().find(|r| r.phase == "finetune").unwrap();
        assert!((on0.total - off0.total - on0.l_r).abs() < 1e-12);
    }

    #[test]
    fn divergence_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("last_good.ckpt");
        let g = toy_graph();
        let mut cfg = toy_config();
        cfg.learning_rate = 1e5;
        cfg.epochs_pretrain = 0;
        cfg.epochs_init = 0;
        cfg.epochs_finetune = 50;
        cfg.divergence_threshold = 1e4;
        cfg.checkpoint = Some(ckpt.clone());
        match train(&g, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
        let (state, centers) = encoder::load_checkpoint(&ckpt).unwrap();
        assert!(finite_params(&state, &centers.unwrap()));
    }

    #[test]
    fn ablation_rows_share_seeds_and_duplicate_variants_match() {
        let g = toy_graph();
        let mut cfg = toy_config();
        cfg.epochs_pretrain = 1;
        cfg.epochs_init = 1;
        cfg.epochs_finetune = 2;
        let b = AblationFlags::variant("B").unwrap();
        let rows = run_ablation(&g, &cfg, &[b, b], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].metrics, rows[1].metrics);
        assert_eq!(rows[0].metrics.acc.values.len(), 2);
        assert!(run_ablation(&g, &cfg, &[b], &[]).is_err());
    }

    #[test]
    fn artifact_writers_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = toy_graph();
        let cfg = toy_config();
        let (reports, summary) = train_multi(&g, &cfg, &[5, 6]).unwrap();
        let summary = summary.unwrap();

        let m1 = dir.path().join("metrics_a.json");
        let m2 = dir.path().join("metrics_b.json");
        write_metrics_json(&summary, &m1).unwrap();
        write_metrics_json(&summary, &m2).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

        let jl = dir.path().join("report.jsonl");
        write_report_jsonl(&reports, &jl).unwrap();
        let text = std::fs::read_to_string(&jl).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2 * (3 + 3 + 5));
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["seed"], 5);
        assert_eq!(first["phase"], "pretrain");

        let pc = dir.path().join("predictions.csv");
        write_predictions_csv(&reports[0].predictions, &pc).unwrap();
        let text = std::fs::read_to_string(&pc).unwrap();
        assert!(text.starts_with("node,label\n0,"));
        assert_eq!(text.lines().count(), g.num_nodes() + 1);
    }
}
