use std::path::Path;

use serde::{Deserialize, Serialize};

use msnimble::diffabund::DaConfig;
use msnimble::factor::FactorConfig;
use msnimble::mechanism::MechanismConfig;
use msnimble::mtgwas::GwasConfig;
use msnimble::pipeline::PipelineConfig;
use msnimble::simulate::SimConfig;
use msnimble::{Error, SelectionCdf};

/// Every tunable of a run. Values come from defaults, then the TOML file,
/// then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    /// Number of latent factors; parallel analysis picks it when absent.
    pub k: Option<usize>,
    /// Design columns of interest; the first column when empty.
    pub interest: Vec<String>,
    pub cdf: SelectionCdf,
    pub mechanism: MechanismConfig,
    pub factor: FactorConfig,
    pub da: DaConfig,
    pub gwas: GwasConfig,
    pub simulation: SimulationRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationRun {
    pub replicates: usize,
    /// q-value thresholds at which FDP and power are reported.
    pub q_thresholds: Vec<f64>,
    pub design: SimConfig,
}

impl Default for SimulationRun {
    fn default() -> Self {
        SimulationRun {
            replicates: 10,
            q_thresholds: vec![0.05, 0.1, 0.2],
            design: SimConfig::desk(0),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let factor = FactorConfig::default();
        RunConfig {
            seed: factor.seed,
            threads: 0,
            k: None,
            interest: Vec::new(),
            cdf: SelectionCdf::default(),
            mechanism: MechanismConfig::default(),
            factor,
            da: DaConfig::default(),
            gwas: GwasConfig::default(),
            simulation: SimulationRun::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub k: Option<usize>,
    pub interest: Option<Vec<String>>,
    pub cdf: Option<SelectionCdf>,
    pub quadrature_order: Option<usize>,
    pub max_weight: Option<f64>,
    pub fisher_max_iter: Option<usize>,
    pub fisher_tol: Option<f64>,
    pub q_thresh: Option<f64>,
    pub refine_iters: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> msnimble::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {}", path.display(), e.message())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.threads {
            self.threads = v;
        }
        if o.k.is_some() {
            self.k = o.k;
        }
        if let Some(v) = &o.interest {
            self.interest = v.clone();
        }
        if let Some(v) = o.cdf {
            self.cdf = v;
        }
        if let Some(v) = o.quadrature_order {
            self.da.quadrature_order = v;
        }
        if let Some(v) = o.max_weight {
            self.da.max_weight = v;
            self.factor.max_weight = v;
        }
        if let Some(v) = o.fisher_max_iter {
            self.da.max_iter = v;
        }
        if let Some(v) = o.fisher_tol {
            self.da.tol = v;
        }
        if let Some(v) = o.q_thresh {
            self.factor.q_thresh = v;
        }
        if let Some(v) = o.refine_iters {
            self.factor.refine_iters = v;
        }
        // One seed drives every random choice of the run.
        self.factor.seed = self.seed;
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            cdf: self.cdf,
            mechanism: self.mechanism.clone(),
            factor: self.factor.clone(),
            da: self.da.clone(),
            k: self.k,
        }
    }
}

/// `t4`, `t:<df>`, `logistic` or `normal`.
pub fn parse_cdf(s: &str) -> Result<SelectionCdf, String> {
    match s {
        "t4" => Ok(SelectionCdf::default()),
        "logistic" => Ok(SelectionCdf::logistic()),
        "normal" => Ok(SelectionCdf::normal()),
        _ => {
            let df = s
                .strip_prefix("t:")
                .and_then(|d| d.parse::<f64>().ok())
                .ok_or_else(|| format!("unknown selection CDF `{s}` (expected t4, t:<df>, logistic or normal)"))?;
            SelectionCdf::student_t(df).map_err(|e| e.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut cfg: RunConfig = toml::from_str("seed = 9\nk = 3\n[da]\nmax_iter = 4\n[factor]\nq_thresh = 0.2\n").unwrap();
        assert_eq!((cfg.seed, cfg.k, cfg.da.max_iter, cfg.factor.q_thresh), (9, Some(3), 4, 0.2));
        assert_eq!(cfg.da.tol, DaConfig::default().tol);
        cfg.apply(&Overrides { k: Some(5), max_weight: Some(20.0), ..Default::default() });
        assert_eq!((cfg.k, cfg.da.max_weight, cfg.factor.max_weight, cfg.factor.seed), (Some(5), 20.0, 20.0, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
    }

    #[test]
    fn cdf_names() {
        assert_eq!(parse_cdf("t4").unwrap(), SelectionCdf::default());
        assert_eq!(parse_cdf("t:7").unwrap(), SelectionCdf::student_t(7.0).unwrap());
        assert!(parse_cdf("cauchy").is_err());
        assert!(parse_cdf("t:-1").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
