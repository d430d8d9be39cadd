//! Value-aware communication: decision-impact (`ΔQ`) estimates, message
//! masks, guidance potentials, priority ordering, sequential action
//! selection and the auxiliary communication losses.

mod delta_q;
mod losses;
mod select;

pub use delta_q::{beta_schedule, delta_q_critic, delta_q_mc, hybrid_delta_q, McEstimate};
pub use losses::{influence_loss, influence_loss_probs, value_aware_loss, KL_FLOOR};
pub use select::{guidance_potential, sequential_select, JointScorer, Selection, UtilityTable, Visibility};

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::usage;
use crate::rng::{self, Rng};
use crate::Result;

/// Per-agent message rows, `agents x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageTensor {
    agents: usize,
    dim: usize,
    data: Vec<f64>,
}

impl MessageTensor {
    pub fn new(agents: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != agents * dim {
            return Err(usage!("{} message values for {} x {}", data.len(), agents, dim));
        }
        Ok(Self { agents, dim, data })
    }

    pub fn zeros(agents: usize, dim: usize) -> Self {
        Self { agents, dim, data: alloc::vec![0.0; agents * dim] }
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy with every row outside `mask` (bit `i` = agent `i`) zeroed.
    pub fn masked(&self, mask: usize) -> Vec<f64> {
        let mut out = self.data.clone();
        for i in 0..self.agents {
            if mask & (1 << i) == 0 {
                out[i * self.dim..(i + 1) * self.dim].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        out
    }

    /// Messages visible at priority rank `k`: rows of agents ranked
    /// before `k`.
    pub fn masked_view(&self, order: &PriorityOrder, k: usize) -> Vec<f64> {
        self.masked(order.predecessor_mask(k))
    }
}

/// How an ordering is drawn from guidance potentials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// Argsort of `-GP`, ties broken by agent index.
    Deterministic,
    /// Argsort of `-(GP + temperature * Gumbel noise)`.
    Stochastic { temperature: f64 },
}

/// A permutation of agents: `agents()[k]` acts at rank `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorityOrder {
    order: Vec<usize>,
    potentials: Vec<f64>,
    mode: OrderMode,
}

impl PriorityOrder {
    pub fn from_permutation(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = alloc::vec![false; n];
        for &a in &order {
            if a >= n || seen[a] {
                return Err(usage!("{:?} is not a permutation", order));
            }
            seen[a] = true;
        }
        Ok(Self { potentials: alloc::vec![0.0; n], order, mode: OrderMode::Deterministic })
    }

    /// Agents in index order.
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            potentials: alloc::vec![0.0; n],
            mode: OrderMode::Deterministic,
        }
    }

    pub fn agents(&self) -> &[usize] {
        &self.order
    }

    pub fn potentials(&self) -> &[f64] {
        &self.potentials
    }

    pub fn mode(&self) -> OrderMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn rank_of(&self, agent: usize) -> usize {
        self.order.iter().position(|&a| a == agent).expect("agent in order")
    }

    /// Bitmask of agents ranked strictly before `k`.
    pub fn predecessor_mask(&self, k: usize) -> usize {
        self.order[..k].iter().fold(0, |m, &a| m | (1 << a))
    }
}

/// Orders agents by descending guidance potential.
pub fn priority_order(gp: &[f64], mode: OrderMode, rng: &mut Rng) -> Result<PriorityOrder> {
    if gp.iter().any(|x| !x.is_finite()) {
        return Err(crate::error::numerical!("guidance potentials must be finite"));
    }
    let keys: Vec<f64> = match mode {
        OrderMode::Deterministic => gp.to_vec(),
        OrderMode::Stochastic { temperature } => {
            gp.iter().map(|g| g + temperature * rng::gumbel(rng)).collect()
        }
    };
    let mut order: Vec<usize> = (0..gp.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    Ok(PriorityOrder { order, potentials: gp.to_vec(), mode })
}
