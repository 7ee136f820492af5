use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Mean absolute difference over all elements. Element-mean
/// normalization keeps weights near 1 meaningful across input sizes.
pub fn recon_loss<T: Scalar>(g: &mut Graph<T>, z: Var, z_hat: Var) -> Result<Var> {
    let d = g.sub(z_hat, z)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Mean squared code entry: the zero-mean unit-prior regularizer on
/// the content code, normalized per element.
pub fn kl_loss<T: Scalar>(g: &mut Graph<T>, z_c: Var) -> Result<Var> {
    let sq = g.mul(z_c, z_c)?;
    Ok(g.mean_all(sq))
}

/// Loss weights at a given step: the reconstruction-adjacent weights
/// λ1 (code prior) and λ3 (MI) ramp linearly from 0 to 1 over
/// `warmup` steps; the Siamese weight λ2 is constant 1.
pub fn lambda_schedule(step: u64, warmup: u64) -> (f64, f64, f64) {
    let ramp = if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    };
    (ramp, 1.0, ramp)
}

/// Per-step training telemetry. `total` always equals
/// `recon + λ1·kl + λ2·siamese + λ3·mi` as computed in-graph; a
/// `stepped` of false records a non-finite loss that left parameters
/// untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
    pub siamese: f64,
    pub mi: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mi_upper: f64,
    pub mi_lower: f64,
    pub stepped: bool,
}
