use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::PriorityOrder;
use crate::error::usage;
use crate::nets::Critic;
use crate::rng::{self, Rng};
use crate::Result;

/// Which other agents' messages an agent conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    /// Agents ranked earlier (sequential, leader-follower).
    Predecessors,
    /// Every other agent, all acting simultaneously.
    All,
}

/// Utilities of every agent for every subset of visible senders at one
/// state: `get(agent, mask)` where bit `i` of `mask` means agent `i`'s
/// message is visible. An agent never sees its own message.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityTable {
    agents: usize,
    actions: usize,
    values: Vec<f64>,
}

impl UtilityTable {
    pub fn from_fn<F>(agents: usize, actions: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<Vec<f64>>,
    {
        let masks = 1usize << agents;
        let mut values = vec![0.0; agents * masks * actions];
        for k in 0..agents {
            for mask in (0..masks).filter(|m| m & (1 << k) == 0) {
                let u = f(k, mask)?;
                if u.len() != actions {
                    return Err(usage!("utility row has {} entries, expected {}", u.len(), actions));
                }
                let at = (k * masks + mask) * actions;
                values[at..at + actions].copy_from_slice(&u);
            }
        }
        Ok(Self { agents, actions, values })
    }

    /// Evaluates the critic's utility network once on every
    /// (agent, visible subset) pair. `msgs` is `agents x msg` flattened.
    pub fn from_critic(critic: &Critic, w: &[f64], obs: &[Vec<f64>], msgs: &[f64]) -> Result<Self> {
        let s = critic.shapes();
        let n = s.agents;
        if obs.len() != n || msgs.len() != n * s.msg {
            return Err(usage!("utility table needs {} observations and messages", n));
        }
        let masks = 1usize << n;
        let mut inputs = Vec::with_capacity(n * masks / 2 * s.utility_input());
        let mut keys = Vec::new();
        for (k, o) in obs.iter().enumerate() {
            if o.len() != s.obs {
                return Err(usage!("observation width {} != {}", o.len(), s.obs));
            }
            for mask in (0..masks).filter(|m| m & (1 << k) == 0) {
                inputs.extend_from_slice(o);
                for i in 0..n {
                    let row = &msgs[i * s.msg..(i + 1) * s.msg];
                    if mask & (1 << i) != 0 {
                        inputs.extend_from_slice(row);
                    } else {
                        inputs.extend(core::iter::repeat_n(0.0, s.msg));
                    }
                }
                keys.push((k, mask));
            }
        }
        let out = critic.utilities_eval(w, &inputs, keys.len());
        let mut values = vec![0.0; n * masks * s.actions];
        for (r, &(k, mask)) in keys.iter().enumerate() {
            let at = (k * masks + mask) * s.actions;
            values[at..at + s.actions].copy_from_slice(&out[r * s.actions..(r + 1) * s.actions]);
        }
        Ok(Self { agents: n, actions: s.actions, values })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn get(&self, agent: usize, mask: usize) -> &[f64] {
        let masks = 1usize << self.agents;
        let at = (agent * masks + (mask & !(1 << agent))) * self.actions;
        &self.values[at..at + self.actions]
    }

    pub fn best(&self, agent: usize, mask: usize) -> (usize, f64) {
        let u = self.get(agent, mask);
        let a = crate::nets::argmax(u);
        (a, u[a])
    }

    /// Mask an agent sees at rank `k` under `order`.
    pub fn visible_mask(&self, order: &PriorityOrder, k: usize, vis: Visibility) -> usize {
        let all = (1usize << self.agents) - 1;
        match vis {
            Visibility::Predecessors => order.predecessor_mask(k),
            Visibility::All => all & !(1 << order.agents()[k]),
        }
    }
}

/// Mixes chosen utilities into a joint value: `sum_i w_i u_i + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl JointScorer {
    pub fn sum(agents: usize) -> Self {
        Self { weights: vec![1.0; agents], bias: 0.0 }
    }

    pub fn from_critic(critic: &Critic, w: &[f64], state: &[f64]) -> Self {
        Self { weights: critic.mixer_weights_eval(w), bias: critic.bias_eval(w, state) }
    }
}

/// A joint action with the message mask each agent conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub actions: Vec<usize>,
    pub masks: Vec<usize>,
    /// Joint value of the chosen actions under their masks.
    pub value: f64,
}

/// Leader-follower action selection: the agent at rank `k` maximizes its
/// utility given the messages it may see. With probability `epsilon` an
/// agent acts uniformly at random instead.
pub fn sequential_select(
    table: &UtilityTable,
    scorer: &JointScorer,
    order: &PriorityOrder,
    vis: Visibility,
    epsilon: f64,
    rng: &mut Rng,
) -> Selection {
    let n = table.agents();
    let mut actions = vec![0; n];
    let mut masks = vec![0; n];
    let mut value = scorer.bias;
    for k in 0..n {
        let agent = order.agents()[k];
        let mask = table.visible_mask(order, k, vis);
        let (best, _) = table.best(agent, mask);
        let a = if epsilon > 0.0 && rng::unit(rng) < epsilon {
            rng::index(rng, table.actions())
        } else {
            best
        };
        actions[agent] = a;
        masks[agent] = mask;
        value += scorer.weights[agent] * table.get(agent, mask)[a];
    }
    Selection { actions, masks, value }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Guidance potential of every agent: the joint value of greedy
/// sequential selection with the agent leading minus with it acting last,
/// averaged over follower orderings. All orderings are used when there
/// are at most `samples` of them; otherwise `samples` are drawn.
pub fn guidance_potential(
    table: &UtilityTable,
    scorer: &JointScorer,
    samples: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let n = table.agents();
    let mut gp = vec![0.0; n];
    if n < 2 {
        return gp;
    }
    for (i, g) in gp.iter_mut().enumerate() {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let all = permutations(&others);
        let chosen: Vec<Vec<usize>> = if all.len() <= samples.max(1) {
            all
        } else {
            (0..samples.max(1)).map(|_| all[rng::index(rng, all.len())].clone()).collect()
        };
        let mut total = 0.0;
        for rest in &chosen {
            let mut lead = vec![i];
            lead.extend_from_slice(rest);
            let mut last = rest.clone();
            last.push(i);
            let value = |order: Vec<usize>| {
                let order = PriorityOrder::from_permutation(order).expect("valid permutation");
                let mut unused = rng::seeded(0);
                sequential_select(table, scorer, &order, Visibility::Predecessors, 0.0, &mut unused).value
            };
            total += value(lead) - value(last);
        }
        *g = total / chosen.len() as f64;
    }
    gp
}
