use crate::diffcore::Var;
use crate::error::usage;
use crate::Result;

/// Probability floor in [`influence_loss_probs`].
pub const KL_FLOOR: f64 = 1e-8;

/// `-(1 / (B N (N-1))) * sum ΔQ_j(m_i)` over every sample and ordered
/// sender/receiver pair. `dq` holds exactly those `B N (N-1)` entries.
pub fn value_aware_loss<'t>(dq: Var<'t>, batch: usize, agents: usize) -> Result<Var<'t>> {
    if agents < 2 {
        return Err(usage!("value-aware loss needs at least two agents"));
    }
    if batch == 0 || dq.len() != batch * agents * (agents - 1) {
        return Err(usage!(
            "expected {} decision-impact entries, got {}",
            batch * agents * (agents - 1),
            dq.len()
        ));
    }
    Ok(-dq.mean())
}

/// Negative mean KL between receiver policies with and without a message.
/// Each row of `with` / `without` holds one receiver's utilities for one
/// (sample, sender, receiver) triple; policies are `softmax(u / tau)`.
pub fn influence_loss<'t>(with: Var<'t>, without: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if with.shape() != without.shape() || with.rows() == 0 {
        return Err(usage!("influence loss inputs must share a non-empty shape"));
    }
    if !(tau > 0.0) {
        return Err(usage!("policy temperature must be positive"));
    }
    let lp = with.scale(1.0 / tau).log_softmax_rows();
    let lq = without.scale(1.0 / tau).log_softmax_rows();
    let kl = (lp.exp() * (lp - lq)).sum_cols();
    Ok(-kl.mean())
}

/// [`influence_loss`] on explicit distributions: `pairs` lists
/// `(p_with, p_without)` for every ordered pair, normalized by `N (N-1)`.
pub fn influence_loss_probs(pairs: &[(&[f64], &[f64])], agents: usize) -> Result<f64> {
    if agents < 2 || pairs.len() != agents * (agents - 1) {
        return Err(usage!("expected N (N-1) policy pairs"));
    }
    let mut total = 0.0;
    for (p, q) in pairs {
        if p.len() != q.len() {
            return Err(usage!("policy supports differ in size"));
        }
        for (&pi, &qi) in p.iter().zip(q.iter()) {
            let (pi, qi) = (pi.max(KL_FLOOR), qi.max(KL_FLOOR));
            total += pi * libm::log(pi / qi);
        }
    }
    Ok(-total / pairs.len() as f64)
}
