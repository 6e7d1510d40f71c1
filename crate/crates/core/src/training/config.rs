//! Run configuration and its plain-text `section.key = value` file form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::autodiff::AdamWConfig;
use crate::deformation::FitOptions;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PartialChamfer};
use crate::nets::ArchConfig;
use crate::occlusion::{OcclusionKind, OcclusionSpec, DEFAULT_NOISE_SIGMA};
use crate::retrieval::{RetrievalOptions, ScoreMode};
use crate::shapes::Category;

/// Occlusion applied to training and evaluation targets. Each sample draws
/// its ratio uniformly from `[ratio_min, ratio_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionDefaults {
    pub kind: OcclusionKind,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub noise_sigma: f64,
    /// Ratio used for held-out evaluation partials.
    pub eval_ratio: f64,
}

impl Default for OcclusionDefaults {
    fn default() -> Self {
        OcclusionDefaults {
            kind: OcclusionKind::Ball { center: None },
            ratio_min: 0.25,
            ratio_max: 0.75,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            eval_ratio: 0.5,
        }
    }
}

impl OcclusionDefaults {
    pub fn spec(&self, ratio: f64, seed: u64) -> OcclusionSpec {
        OcclusionSpec::new(self.kind, ratio, seed).with_noise(self.noise_sigma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub checkpoint_every: usize,
    /// Abort when a sample's loss exceeds this multiple of the first loss.
    pub divergence_factor: f64,
    pub categories: Vec<Category>,
    pub db_per_category: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    /// Draw a fresh source for every (epoch, target); otherwise one per target.
    pub resample_sources: bool,
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub symmetry_categories: Vec<Category>,
    /// Full branch also gets the Chamfer, symmetry and reconstruction terms.
    pub full_branch_basic: bool,
    pub partial_chamfer: PartialChamfer,
    pub optim: AdamWConfig,
    /// Samples whose gradients are averaged per optimizer step.
    pub accumulate: usize,
    /// Training pairs used to initialize the running normalization statistics
    /// before the first step; 0 keeps the initial (0, 1) statistics.
    pub calibrate: usize,
    pub occlusion: OcclusionDefaults,
    pub retrieval: RetrievalOptions,
    /// Restrict retrieval to sources of the target's category.
    pub within_category: bool,
    pub fit: FitOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 200,
            checkpoint_every: 10,
            divergence_factor: 1e3,
            categories: Category::ALL.to_vec(),
            db_per_category: 10,
            train_per_category: 50,
            test_per_category: 10,
            resample_sources: true,
            arch: ArchConfig::default(),
            weights: LossWeights::default(),
            symmetry_categories: Category::ALL.to_vec(),
            full_branch_basic: true,
            partial_chamfer: PartialChamfer::Observed,
            optim: AdamWConfig::default(),
            accumulate: 1,
            calibrate: 32,
            occlusion: OcclusionDefaults::default(),
            retrieval: RetrievalOptions::default(),
            within_category: true,
            fit: FitOptions::default(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl TrainConfig {
    /// Single-machine preset: 256 points, narrow heads, 50 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            arch: ArchConfig::desk(),
            accumulate: 4,
            fit: FitOptions {
                steps: 200,
                ..FitOptions::default()
            },
            ..Self::default()
        }
    }

    pub fn eval_options(&self) -> super::EvalOptions {
        super::EvalOptions {
            retrieval: self.retrieval,
            within_category: self.within_category,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let o = &self.occlusion;
        if !(0.0 <= o.ratio_min && o.ratio_min <= o.ratio_max && o.ratio_max < 1.0) || !(0.0..1.0).contains(&o.eval_ratio) {
            return Err(Error::Config("occlusion ratios must satisfy 0 <= min <= max < 1".into()));
        }
        if self.accumulate == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("accumulate and checkpoint_every must be positive".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("no categories selected".into()));
        }
        if self.retrieval.n_samples == 0 || self.retrieval.top_k == 0 {
            return Err(Error::Config("retrieval needs n_samples >= 1 and top_k >= 1".into()));
        }
        if !(self.optim.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.arch;
        let o = &self.occlusion;
        let r = &self.retrieval;
        let anchor = match o.kind {
            OcclusionKind::Ball { center: Some(c) } | OcclusionKind::Plane { normal: Some(c) } => list(&c),
            _ => String::new(),
        };
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.epochs", self.epochs.to_string()),
            ("run.checkpoint_every", self.checkpoint_every.to_string()),
            ("run.divergence_factor", self.divergence_factor.to_string()),
            ("data.categories", list(&self.categories)),
            ("data.db_per_category", self.db_per_category.to_string()),
            ("data.train_per_category", self.train_per_category.to_string()),
            ("data.test_per_category", self.test_per_category.to_string()),
            ("data.resample_sources", self.resample_sources.to_string()),
            ("arch.points", a.points.to_string()),
            ("arch.feat", a.feat.to_string()),
            ("arch.encoder_hidden", list(&a.encoder_hidden)),
            ("arch.residual_hidden", list(&a.residual_hidden)),
            ("arch.heads", a.heads.to_string()),
            ("arch.agnn_blocks", a.agnn_blocks.to_string()),
            ("arch.regressor_hidden", list(&a.regressor_hidden)),
            ("arch.recon_hidden", list(&a.recon_hidden)),
            ("arch.leaky_slope", a.leaky_slope.to_string()),
            ("arch.bn_momentum", a.bn_momentum.to_string()),
            ("arch.bn_eps", a.bn_eps.to_string()),
            ("arch.norm", a.norm.name().to_string()),
            ("loss.lambda0", self.weights.lambda0.to_string()),
            ("loss.lambda1", self.weights.lambda1.to_string()),
            ("loss.lambda2", self.weights.lambda2.to_string()),
            ("loss.symmetry_categories", list(&self.symmetry_categories)),
            ("loss.full_branch_basic", self.full_branch_basic.to_string()),
            ("loss.partial_chamfer", self.partial_chamfer.name().to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("optim.accumulate", self.accumulate.to_string()),
            ("optim.calibrate", self.calibrate.to_string()),
            ("occlusion.kind", o.kind.name().to_string()),
            ("occlusion.anchor", anchor),
            ("occlusion.ratio_min", o.ratio_min.to_string()),
            ("occlusion.ratio_max", o.ratio_max.to_string()),
            ("occlusion.noise_sigma", o.noise_sigma.to_string()),
            ("occlusion.eval_ratio", o.eval_ratio.to_string()),
            ("retrieval.n_samples", r.n_samples.to_string()),
            ("retrieval.top_k", r.top_k.to_string()),
            ("retrieval.trim", r.trim.to_string()),
            ("retrieval.mode", r.mode.name().to_string()),
            ("retrieval.seed", r.seed.to_string()),
            ("retrieval.within_category", self.within_category.to_string()),
            ("fit.steps", self.fit.steps.to_string()),
            ("fit.lr", self.fit.lr.to_string()),
            ("fit.symmetry_weight", self.fit.symmetry_weight.to_string()),
            ("fit.connectivity_weight", self.fit.connectivity_weight.to_string()),
        ]
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let a = &mut self.arch;
        let o = &mut self.occlusion;
        let r = &mut self.retrieval;
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.epochs" => self.epochs = parse(key, v)?,
            "run.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "run.divergence_factor" => self.divergence_factor = parse(key, v)?,
            "data.categories" => self.categories = parse_list(key, v)?,
            "data.db_per_category" => self.db_per_category = parse(key, v)?,
            "data.train_per_category" => self.train_per_category = parse(key, v)?,
            "data.test_per_category" => self.test_per_category = parse(key, v)?,
            "data.resample_sources" => self.resample_sources = parse(key, v)?,
            "arch.points" => a.points = parse(key, v)?,
            "arch.feat" => a.feat = parse(key, v)?,
            "arch.encoder_hidden" => a.encoder_hidden = parse_list(key, v)?,
            "arch.residual_hidden" => a.residual_hidden = parse_list(key, v)?,
            "arch.heads" => a.heads = parse(key, v)?,
            "arch.agnn_blocks" => a.agnn_blocks = parse(key, v)?,
            "arch.regressor_hidden" => a.regressor_hidden = parse_list(key, v)?,
            "arch.recon_hidden" => a.recon_hidden = parse_list(key, v)?,
            "arch.leaky_slope" => a.leaky_slope = parse(key, v)?,
            "arch.bn_momentum" => a.bn_momentum = parse(key, v)?,
            "arch.bn_eps" => a.bn_eps = parse(key, v)?,
            "arch.norm" => a.norm = parse(key, v)?,
            "loss.lambda0" => self.weights.lambda0 = parse(key, v)?,
            "loss.lambda1" => self.weights.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.weights.lambda2 = parse(key, v)?,
            "loss.symmetry_categories" => self.symmetry_categories = parse_list(key, v)?,
            "loss.full_branch_basic" => self.full_branch_basic = parse(key, v)?,
            "loss.partial_chamfer" => self.partial_chamfer = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.accumulate" => self.accumulate = parse(key, v)?,
            "optim.calibrate" => self.calibrate = parse(key, v)?,
            "occlusion.kind" => {
                o.kind = parse(key, v)?;
            }
            "occlusion.anchor" => {
                let anchor: Vec<f64> = parse_list(key, v)?;
                let c = match anchor.as_slice() {
                    [] => None,
                    [x, y, z] => Some([*x, *y, *z]),
                    _ => return Err(Error::Config(format!("`{key}` needs three values"))),
                };
                o.kind = match o.kind {
                    OcclusionKind::Ball { .. } => OcclusionKind::Ball { center: c },
                    OcclusionKind::Plane { .. } => OcclusionKind::Plane { normal: c },
                    k if c.is_none() => k,
                    _ => return Err(Error::Config("anchors apply to ball and plane occlusion only".into())),
                };
            }
            "occlusion.ratio_min" => o.ratio_min = parse(key, v)?,
            "occlusion.ratio_max" => o.ratio_max = parse(key, v)?,
            "occlusion.noise_sigma" => o.noise_sigma = parse(key, v)?,
            "occlusion.eval_ratio" => o.eval_ratio = parse(key, v)?,
            "retrieval.n_samples" => r.n_samples = parse(key, v)?,
            "retrieval.top_k" => r.top_k = parse(key, v)?,
            "retrieval.trim" => r.trim = parse(key, v)?,
            "retrieval.mode" => r.mode = parse::<ScoreMode>(key, v)?,
            "retrieval.seed" => r.seed = parse(key, v)?,
            "retrieval.within_category" => self.within_category = parse(key, v)?,
            "fit.steps" => self.fit.steps = parse(key, v)?,
            "fit.lr" => self.fit.lr = parse(key, v)?,
            "fit.symmetry_weight" => self.fit.symmetry_weight = parse(key, v)?,
            "fit.connectivity_weight" => self.fit.connectivity_weight = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a run-config file on top of `base`. Blank lines and `#`
    /// comments are ignored; keys must be known.
    pub fn from_config_str(text: &str, base: TrainConfig) -> Result<Self> {
        let mut cfg = base;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_config_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NormPolicy;

    #[test]
    fn round_trips_through_text() {
        let mut c = TrainConfig::desk();
        c.seed = 42;
        c.occlusion.kind = OcclusionKind::Plane { normal: Some([0.0, 0.6, 0.8]) };
        c.symmetry_categories = vec![Category::Chair, Category::Table];
        c.arch.norm = NormPolicy::Batch;
        let text = c.to_config_string();
        let back = TrainConfig::from_config_str(&text, TrainConfig::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = TrainConfig::from_config_str("run.bogus = 1", TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        let err = TrainConfig::from_config_str("# c\n\nrun.epochs = many", TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("line 3"));
        assert!(TrainConfig::from_config_str("arch.heads = 3", TrainConfig::default()).is_err());
    }

    #[test]
    fn presets() {
        let d = TrainConfig::default();
        assert_eq!((d.arch.points, d.arch.feat, d.epochs, d.optim.lr), (1024, 256, 200, 1e-3));
        assert_eq!(d.weights, LossWeights { lambda0: 3.0, lambda1: 0.3, lambda2: 1.0 });
        assert_eq!((d.retrieval.n_samples, d.retrieval.top_k, d.retrieval.trim), (1000, 10, 0.1));
        let k = TrainConfig::desk();
        assert_eq!((k.arch.points, k.epochs), (256, 50));
    }
}
