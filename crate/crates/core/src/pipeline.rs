//! The full analysis in one call: partition, mechanisms, factors, then
//! differential abundance.

use serde::{Deserialize, Serialize};

use crate::dataset::{partition_metabolites, DesignMatrix, MetabolitePartition, ObservedMatrix};
use crate::diffabund::{run_da, DaConfig, DaTable};
use crate::error::Result;
use crate::factor::{estimate_factors, select_k, FactorConfig, FactorEstimate, WeightMatrix};
use crate::mechanism::{build_instruments, estimate_mechanism, MechanismConfig, MechanismEstimate};
use crate::selection::SelectionCdf;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub cdf: SelectionCdf,
    pub mechanism: MechanismConfig,
    pub factor: FactorConfig,
    pub da: DaConfig,
    /// Number of factors; chosen by parallel analysis when absent.
    pub k: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub partition: MetabolitePartition,
    pub mechanisms: MechanismEstimate,
    pub factors: FactorEstimate,
    pub weights: WeightMatrix,
    pub da: DaTable,
}

pub fn estimate_mechanisms(m: &ObservedMatrix, part: &MetabolitePartition, cdf: &SelectionCdf, cfg: &MechanismConfig) -> Result<MechanismEstimate> {
    let inst = build_instruments(m, part, cfg.num_candidates)?;
    estimate_mechanism(m, part, &inst, cdf, cfg)
}

pub fn run_pipeline(m: &ObservedMatrix, x: &DesignMatrix, cfg: &PipelineConfig) -> Result<PipelineResult> {
    let partition = partition_metabolites(m);
    let mechanisms = estimate_mechanisms(m, &partition, &cfg.cdf, &cfg.mechanism)?;
    let k = match cfg.k {
        Some(k) => k,
        None => select_k(m, &partition, x, &cfg.factor)?,
    };
    let (factors, weights) = estimate_factors(m, &partition, x, &mechanisms, k, &cfg.factor)?;
    let da = run_da(m, &partition, x, &mechanisms, &factors, &cfg.da)?;
    Ok(PipelineResult {
        partition,
        mechanisms,
        factors,
        weights,
        da,
    })
}
