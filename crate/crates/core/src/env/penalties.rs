use crate::error::usage;
use crate::Result;

use super::hospital::HIGH_INTENSITY;

/// Penalty for treating a patient whose condition-specific risk the
/// treating specialist cannot see: `1.5 * [specialty != condition] * risk * action`.
///
/// `risk` is `h[j, condition]`, the patient's risk for its own condition.
pub fn blind_penalty(specialty: usize, condition: usize, risk: f64, action: usize) -> f64 {
    if specialty == condition {
        0.0
    } else {
        1.5 * risk * action as f64
    }
}

/// Drug matrices must be square, symmetric, zero on the diagonal and in `[0, 1]`.
#[allow(clippy::needless_range_loop)]
pub fn validate_drug_matrix(d: &[[f64; 3]; 3]) -> Result<()> {
    for i in 0..3 {
        if d[i][i] != 0.0 {
            return Err(usage!("drug matrix diagonal entry {} is {}, expected 0", i, d[i][i]));
        }
        for j in 0..3 {
            if !(0.0..=1.0).contains(&d[i][j]) {
                return Err(usage!("drug matrix entry ({}, {}) = {} outside [0, 1]", i, j, d[i][j]));
            }
            if d[i][j] != d[j][i] {
                return Err(usage!("drug matrix is not symmetric at ({}, {})", i, j));
            }
        }
    }
    Ok(())
}

/// Adverse-interaction penalty over every pair of agents that both chose
/// high intensity: `1.5 * sum_{i<j} [a_i = 2][a_j = 2] D[k_i, k_j]`.
pub fn drug_penalty(actions: &[usize], conditions: &[usize], d: &[[f64; 3]; 3]) -> Result<f64> {
    validate_drug_matrix(d)?;
    if actions.len() != conditions.len() {
        return Err(usage!(
            "{} actions but {} conditions",
            actions.len(),
            conditions.len()
        ));
    }
    let mut total = 0.0;
    for i in 0..actions.len() {
        for j in i + 1..actions.len() {
            if actions[i] == HIGH_INTENSITY && actions[j] == HIGH_INTENSITY {
                total += d[conditions[i]][conditions[j]];
            }
        }
    }
    Ok(1.5 * total)
}

/// Over-budget use of high-intensity resources: `0.5 * max(0, #[a = 2] - B)`.
pub fn resource_penalty(actions: &[usize], budget: usize) -> f64 {
    let high = actions.iter().filter(|&&a| a == HIGH_INTENSITY).count();
    0.5 * high.saturating_sub(budget) as f64
}
