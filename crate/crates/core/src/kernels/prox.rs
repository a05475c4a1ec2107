//! Proximal operators of the parameter-side regularizers.

use crate::error::{DlfmError, Result};
use crate::model::RegularizerAtom;

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Prox of `step · reg` applied to a single factor's parameter block.
pub fn prox_block(reg: &RegularizerAtom, point: &[f64], step: f64) -> Result<Vec<f64>> {
    match *reg {
        RegularizerAtom::L1 { weight } => {
            let t = step * weight;
            Ok(point.iter().map(|v| soft_threshold(*v, t)).collect())
        }
        RegularizerAtom::GroupL2 { weight } => {
            let t = step * weight;
            let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= t {
                Ok(vec![0.0; point.len()])
            } else {
                let scale = 1.0 - t / norm;
                Ok(point.iter().map(|v| v * scale).collect())
            }
        }
        RegularizerAtom::KlChain { .. } => {
            Err(DlfmError::Unsupported("kl_chain has no parameter-side prox".into()))
        }
    }
}

/// Prox of `step · reg` over all factor blocks; group norms act per factor.
pub fn prox(reg: &RegularizerAtom, blocks: &[Vec<f64>], step: f64) -> Result<Vec<Vec<f64>>> {
    blocks.iter().map(|b| prox_block(reg, b, step)).collect()
}

/// Prox of a sum of L1 and group-L2 terms on one block.
///
/// Soft-thresholding followed by block shrinkage is exact for this pair.
pub(crate) fn prox_sum(regs: &[RegularizerAtom], point: &[f64], step: f64) -> Vec<f64> {
    let l1: f64 = regs
        .iter()
        .filter_map(|r| match r {
            RegularizerAtom::L1 { weight } => Some(*weight),
            _ => None,
        })
        .sum();
    let group: f64 = regs
        .iter()
        .filter_map(|r| match r {
            RegularizerAtom::GroupL2 { weight } => Some(*weight),
            _ => None,
        })
        .sum();
    let mut x: Vec<f64> = point.iter().map(|v| soft_threshold(*v, step * l1)).collect();
    if group > 0.0 {
        x = prox_block(&RegularizerAtom::GroupL2 { weight: group }, &x, step).unwrap();
    }
    x
}
