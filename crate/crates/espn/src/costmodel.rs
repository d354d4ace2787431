//! Analytical memory-cost model comparing backpropagation, forward-mode
//! differentiation and evolution strategies for meta-learning.
//!
//! All byte quantities are exact integers; the only real-valued output is
//! the Jacobian-to-population ratio.

use serde::{Deserialize, Serialize};

use crate::error::{EspnError, Result};

pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostInputs {
    /// Sum of intermediate-tensor bytes produced by one inner-loop step.
    pub g: u64,
    /// Task length in inner-loop steps.
    pub l: u64,
    /// Meta-learner parameter count.
    pub d_phi: u64,
    /// Inner-loop model state size (for ProtoNet: D_c * N).
    pub d_psi: u64,
    /// Population size.
    pub p: u64,
    pub bytes_per_scalar: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostReport {
    /// Backpropagation graph bytes: g * l.
    pub omega_bp: u64,
    /// Forward-mode Jacobian bytes: D_psi * D_phi * bytes.
    pub omega_fm: u64,
    /// ES population matrix bytes: P * D_phi * bytes.
    pub omega_es: u64,
    /// Task length at which backprop overtakes forward-mode.
    pub l1: u64,
    /// Task length at which backprop overtakes ES.
    pub l2: u64,
    /// D_psi / P: how much smaller the population matrix is than the
    /// dominant Jacobian.
    pub fm_to_es_ratio: f64,
}

/// Inner-loop model state size of a ProtoNet: the stored class prototypes,
/// D_psi = D_c * way = 4 * channels * way for a 32x32 input and 4 blocks.
pub fn protonet_state_size(channels: u64, way: u64) -> u64 {
    4 * channels * way
}

/// The MAML special case: the adapted parameters ARE the model state,
/// D_psi = D_phi.
pub fn maml_state_size(d_phi: u64) -> u64 {
    d_phi
}

pub fn compute_costs(inp: &CostInputs) -> Result<CostReport> {
    if inp.g == 0 {
        return Err(EspnError::UndefinedThreshold);
    }
    let omega_bp = inp.g * inp.l;
    let omega_fm = inp.d_psi * inp.d_phi * inp.bytes_per_scalar;
    let omega_es = inp.p * inp.d_phi * inp.bytes_per_scalar;
    Ok(CostReport {
        omega_bp,
        omega_fm,
        omega_es,
        l1: omega_fm.div_ceil(inp.g),
        l2: omega_es.div_ceil(inp.g),
        fm_to_es_ratio: inp.d_psi as f64 / inp.p as f64,
    })
}

impl CostReport {
    pub fn render_text(&self) -> String {
        format!(
            "omega_BP (backprop graph)      {:>16} bytes\n\
             omega_FM (forward-mode Jacobian){:>15} bytes\n\
             omega_ES (population matrix)   {:>16} bytes\n\
             l1 (BP = FM crossover)         {:>16} steps\n\
             l2 (BP = ES crossover)         {:>16} steps\n\
             FM / ES memory ratio           {:>16.3}\n",
            self.omega_bp, self.omega_fm, self.omega_es, self.l1, self.l2, self.fm_to_es_ratio
        )
    }
}
