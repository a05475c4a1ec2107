use dlfm_core::{ConstraintAtom, Controls, LossAtom, ModelSpec, RegularizerAtom};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk fit configuration.
///
/// `loss` and `constraints` apply to every factor; `losses` and
/// `factor_constraints` give one entry per factor instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub schema_version: u32,
    pub k: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossAtom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses: Option<Vec<LossAtom>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintAtom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_constraints: Option<Vec<Vec<ConstraintAtom>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub p_regularizers: Vec<RegularizerAtom>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub f_regularizers: Vec<RegularizerAtom>,
    #[serde(default)]
    pub controls: Controls,
    /// Samples form a time series.
    #[serde(default)]
    pub ordered: bool,
}

impl FitConfig {
    pub fn from_spec(spec: &ModelSpec, ordered: bool) -> Self {
        FitConfig {
            schema_version: SCHEMA_VERSION,
            k: spec.k,
            n: spec.n,
            loss: None,
            losses: Some(spec.losses.clone()),
            constraints: Vec::new(),
            factor_constraints: Some(spec.constraints.clone()),
            p_regularizers: spec.p_regularizers.clone(),
            f_regularizers: spec.f_regularizers.clone(),
            controls: spec.controls.clone(),
            ordered,
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: FitConfig =
            serde_json::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Input(format!(
                "config: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_spec(&self) -> Result<ModelSpec, CliError> {
        let losses = match (&self.loss, &self.losses) {
            (Some(l), None) => vec![l.clone(); self.k],
            (None, Some(ls)) => ls.clone(),
            (Some(_), Some(_)) => return Err(CliError::Input("config: give either loss or losses, not both".into())),
            (None, None) => return Err(CliError::Input("config: missing field `loss`".into())),
        };
        let constraints = match &self.factor_constraints {
            None => vec![self.constraints.clone(); self.k],
            Some(_) if !self.constraints.is_empty() => {
                return Err(CliError::Input(
                    "config: give either constraints or factor_constraints, not both".into(),
                ))
            }
            Some(fc) => fc.clone(),
        };
        Ok(ModelSpec {
            k: self.k,
            n: self.n,
            losses,
            constraints,
            p_regularizers: self.p_regularizers.clone(),
            f_regularizers: self.f_regularizers.clone(),
            controls: self.controls.clone(),
        })
    }
}
