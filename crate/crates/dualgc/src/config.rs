//! Experiment configuration: a layered TOML file, per-dataset defaults, and
//! command-line overrides, resolved into one [`TrainConfig`].
//!
//! Precedence, lowest to highest: built-in defaults, per-dataset defaults
//! keyed on the bundle's `name`, the config file, explicit flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::trainer::{AblationFlags, SampleTarget, TrainConfig};

/// Per-dataset learning rate and diffusion retention defaults.
pub fn dataset_defaults(name: &str) -> (f64, f64) {
    match name.to_ascii_lowercase().as_str() {
        "acm" => (5e-5, 0.3),
        "amap" => (1e-3, 0.2),
        "dblp" => (1e-4, 0.2),
        "cite" | "citeseer" => (1e-5, 0.2),
        "pubmed" => (1e-5, 0.1),
        "corafull" => (1e-5, 0.2),
        _ => (1e-4, 0.2),
    }
}

/// `[train]` section; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub epochs_pretrain: Option<usize>,
    pub epochs_init: Option<usize>,
    pub epochs_finetune: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub knn_k: Option<usize>,
    pub noise_std: Option<f64>,
    pub confidence_fraction: Option<f64>,
    pub adjacency_weight: Option<f64>,
    #[serde(alias = "resample_noise_per_epoch")]
    pub resample_noise: Option<bool>,
    pub clusters: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub latent: Option<usize>,
    pub divergence_threshold: Option<f64>,
}

/// `[ablation]` section; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub use_preg: Option<bool>,
    pub use_idcrm: Option<bool>,
    pub use_ars: Option<bool>,
    pub use_rrs: Option<bool>,
    pub sample_target: Option<String>,
}

/// Root of the experiment file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub train: Option<TrainSection>,
    pub ablation: Option<AblationSection>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count())
                .unwrap_or(0),
            msg: e.message().to_string(),
        })
    }
}

/// Flag-level overrides; any `Some` wins over the file and defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub knn_k: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clusters: Option<usize>,
    pub confidence_fraction: Option<f64>,
    pub sample_target: Option<SampleTarget>,
}

/// Resolve one training configuration. `dataset_name` (the bundle's `meta`
/// name) selects the per-dataset learning rate and retention defaults.
pub fn build_config(
    file: &FileConfig,
    dataset_name: Option<&str>,
    over: &Overrides,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(name) = dataset_name {
        let (lr, alpha) = dataset_defaults(name);
        cfg.learning_rate = lr;
        cfg.alpha = alpha;
    }

    if let Some(t) = &file.train {
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &t.$field { cfg.$field = v.clone(); })*
            };
        }
        apply!(
            learning_rate,
            epochs_pretrain,
            epochs_init,
            epochs_finetune,
            lambda,
            gamma,
            alpha,
            knn_k,
            noise_std,
            confidence_fraction,
            adjacency_weight,
            resample_noise,
            hidden,
            latent,
            divergence_threshold
        );
        if t.clusters.is_some() {
            cfg.clusters = t.clusters;
        }
    }
    if let Some(a) = &file.ablation {
        let mut flags = AblationFlags::full();
        if let Some(v) = a.use_preg {
            flags.use_preg = v;
        }
        if let Some(v) = a.use_idcrm {
            flags.use_idcrm = v;
        }
        if let Some(v) = a.use_ars {
            flags.use_ars = v;
        }
        if let Some(v) = a.use_rrs {
            flags.use_rrs = v;
        }
        if let Some(v) = &a.sample_target {
            flags.sample_target = v.parse()?;
        }
        cfg.ablation = flags;
    }

    if let Some(v) = over.seed {
        cfg.seed = v;
    }
    if let Some(v) = over.epochs {
        cfg.epochs_finetune = v;
    }
    if let Some(v) = over.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = over.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = over.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = over.knn_k {
        cfg.knn_k = v;
    }
    if let Some(v) = over.learning_rate {
        cfg.learning_rate = v;
    }
    if over.clusters.is_some() {
        cfg.clusters = over.clusters;
    }
    if let Some(v) = over.confidence_fraction {
        cfg.confidence_fraction = v;
    }
    if let Some(v) = over.sample_target {
        cfg.ablation.sample_target = v;
    }

    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_inputs() {
        let cfg = build_config(&FileConfig::default(), None, &Overrides::default()).unwrap();
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.epochs_finetune, 400);
        assert_eq!(cfg.lambda, 10.0);
        assert_eq!(cfg.gamma, 1e3);
    }

    #[test]
    fn dataset_name_selects_table_entries() {
        let cfg = build_config(&FileConfig::default(), Some("acm"), &Overrides::default()).unwrap();
        assert_eq!(cfg.learning_rate, 5e-5);
        assert_eq!(cfg.alpha, 0.3);
        let cfg = build_config(
            &FileConfig::default(),
            Some("PUBMED"),
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.learning_rate, 1e-5);
        assert_eq!(cfg.alpha, 0.1);
        let cfg = build_config(&FileConfig::default(), Some("sbm"), &Overrides::default()).unwrap();
        assert_eq!(cfg.learning_rate, 1e-4);
    }

    #[test]
    fn file_overrides_dataset_defaults() {
        let file: FileConfig = toml::from_str(
            r#"
            seeds = [1, 2]
            [train]
            learning_rate = 3e-4
            epochs_finetune = 7
            hidden = [32, 16]
            clusters = 4
            [ablation]
            use_preg = false
            sample_target = "identity"
            "#,
        )
        .unwrap();
        assert_eq!(file.seeds, Some(vec![1, 2]));
        let cfg = build_config(&file, Some("acm"), &Overrides::default()).unwrap();
        assert_eq!(cfg.learning_rate, 3e-4);
        assert_eq!(cfg.alpha, 0.3); // untouched by the file
        assert_eq!(cfg.epochs_finetune, 7);
        assert_eq!(cfg.hidden, vec![32, 16]);
        assert_eq!(cfg.clusters, Some(4));
        assert!(!cfg.ablation.use_preg);
        assert_eq!(cfg.ablation.sample_target, SampleTarget::Identity);
    }

    #[test]
    fn flags_override_everything() {
        let file: FileConfig =
            toml::from_str("[train]\nlearning_rate = 3e-4\nalpha = 0.5").unwrap();
        let over = Overrides {
            learning_rate: Some(9e-3),
            alpha: Some(0.4),
            epochs: Some(11),
            seed: Some(77),
            clusters: Some(6),
            sample_target: Some(SampleTarget::Identity),
            ..Overrides::default()
        };
        let cfg = build_config(&file, Some("dblp"), &over).unwrap();
        assert_eq!(cfg.learning_rate, 9e-3);
        assert_eq!(cfg.alpha, 0.4);
        assert_eq!(cfg.epochs_finetune, 11);
        assert_eq!(cfg.seed, 77);
        assert_eq!(cfg.clusters, Some(6));
        assert_eq!(cfg.ablation.sample_target, SampleTarget::Identity);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nlearnin_rate = 1.0").is_err());
        let file: FileConfig = toml::from_str("[train]\nlearning_rate = -1.0").unwrap();
        assert!(build_config(&file, None, &Overrides::default()).is_err());
        let file: FileConfig = toml::from_str("[ablation]\nsample_target = \"nonsense\"").unwrap();
        assert!(build_config(&file, None, &Overrides::default()).is_err());
    }

    #[test]
    fn load_reports_parse_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seeds = [1,\n oops").unwrap();
        match FileConfig::load(&path) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "seeds = [3]\n[train]\nlatent = 8\n").unwrap();
        let file = FileConfig::load(&path).unwrap();
        assert_eq!(file.seeds, Some(vec![3]));
        assert_eq!(file.train.unwrap().latent, Some(8));
    }
}
