//! Dynamic group interaction: pairwise interaction scores between person
//! states, a differentiable (softmax-relaxed) group assignment, and
//! group-level recurrent state updates.
//!
//! A scene with N people carries N-1 groups. Assignment is recomputed each
//! timestep: person i scores every group by the mean pairwise interaction
//! with its previous members (an empty group is scored by the person's
//! self-interaction), then joins the argmax. The argmax is approximated by
//! a low-temperature softmax, which keeps the whole mechanism
//! differentiable; the hard index is kept alongside for reporting and for
//! the membership sets of the group-state update.

use crate::ad::{Tape, Var};
use crate::nn::{LstmCell, ParamId, ParamStore, xavier};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("need at least 2 people, got {0}")]
    TooFewPeople(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite group score for person {person}; model state has diverged")]
    NonFiniteScores { person: usize },
}

/// Parameters of the pairwise interaction score (registration half).
#[derive(Clone, Copy, Debug)]
pub struct InteractionParams {
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub w_hs: ParamId,
    pub b_hs: ParamId,
    pub h_p: usize,
}

impl InteractionParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, h_p: usize) -> Self {
        let w_hh = store.register(format!("{prefix}.w_hh"), xavier(rng, &[h_p, h_p], h_p, h_p));
        let b_hh = store.register(format!("{prefix}.b_hh"), ArrayD::zeros(IxDyn(&[h_p])));
        let w_hs = store.register(format!("{prefix}.w_hs"), xavier(rng, &[h_p], h_p, 1));
        let b_hs = store.register(format!("{prefix}.b_hs"), ArrayD::zeros(IxDyn(&[])));
        InteractionParams { w_hh, b_hh, w_hs, b_hs, h_p }
    }

    pub fn bind(&self, vars: &[Var]) -> InteractionVars {
        InteractionVars {
            w_hh: vars[self.w_hh.0],
            b_hh: vars[self.b_hh.0],
            w_hs: vars[self.w_hs.0],
            b_hs: vars[self.b_hs.0],
            h_p: self.h_p,
        }
    }
}

/// Tape-bound interaction parameters for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct InteractionVars {
    pub w_hh: Var,
    pub b_hh: Var,
    pub w_hs: Var,
    pub b_hs: Var,
    pub h_p: usize,
}

/// Group membership at one timestep: a relaxed row-stochastic matrix plus
/// the hard argmax per person.
#[derive(Clone, Debug)]
pub struct GroupAssignment {
    /// Per-person soft assignment over the N-1 groups, on the tape.
    pub soft: Vec<Var>,
    /// Per-person hard group index.
    pub hard: Vec<usize>,
}

impl GroupAssignment {
    pub fn n(&self) -> usize {
        self.hard.len()
    }

    pub fn n_groups(&self) -> usize {
        self.n() - 1
    }

    /// Member count per group; sums to N.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_groups()];
        for &g in &self.hard {
            counts[g] += 1;
        }
        counts
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        self.hard
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| (g == k).then_some(i))
            .collect()
    }

    pub fn soft_matrix(&self, t: &Tape) -> Array2<f64> {
        let n = self.n();
        let mut m = Array2::zeros((n, self.n_groups()));
        for (i, &row) in self.soft.iter().enumerate() {
            let v = t.value(row);
            for k in 0..self.n_groups() {
                m[[i, k]] = v[[k]];
            }
        }
        m
    }

    /// Diagnostic record of one step's assignment.
    pub fn to_json(&self, t: &Tape) -> serde_json::Value {
        let soft: Vec<Vec<f64>> = self
            .soft
            .iter()
            .map(|&row| t.value(row).iter().copied().collect())
            .collect();
        serde_json::json!({ "soft": soft, "hard": self.hard })
    }
}

/// Hidden and cell states of the N-1 group LSTMs, plus member counts.
#[derive(Clone, Debug)]
pub struct GroupStates {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub counts: Vec<usize>,
}

impl GroupStates {
    pub fn zeros(t: &Tape, n_groups: usize, g_size: usize, counts: Vec<usize>) -> Self {
        assert_eq!(counts.len(), n_groups);
        GroupStates {
            h: (0..n_groups).map(|_| t.zeros(&[g_size])).collect(),
            c: (0..n_groups).map(|_| t.zeros(&[g_size])).collect(),
            counts,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.h.len()
    }
}

/// Starting assignment: persons 0 and 1 share group 0, person i >= 2 sits
/// alone in group i-1. Counts are [2, 1, ..., 1] over the N-1 groups.
pub fn init_groups(t: &Tape, n: usize) -> Result<GroupAssignment, GroupError> {
    if n < 2 {
        return Err(GroupError::TooFewPeople(n));
    }
    let n_groups = n - 1;
    let hard: Vec<usize> = (0..n).map(|i| i.saturating_sub(1)).collect();
    let soft = hard
        .iter()
        .map(|&g| {
            let mut row = vec![0.0; n_groups];
            row[g] = 1.0;
            t.leaf1(ndarray::Array1::from_vec(row))
        })
        .collect();
    Ok(GroupAssignment { soft, hard })
}

/// Pairwise interaction score `sigma(W_hs (W_hh (h_i + h_j) + b_hh) + b_hs)`.
/// Symmetric in its two arguments and strictly inside (0,1).
///
/// Note the score factors additively: it equals `sigma(u_i + u_j + c)`
/// with `u_i = W_hs W_hh h_i` and a constant `c`, so no parameter setting
/// can rank both within-group pairs of two u-homogeneous groups above
/// their cross pairs (the cross logit is the mean of the self logits).
/// Downstream, [`assign_groups`] therefore drifts toward a single cluster
/// on symmetric scenes; see the acceptance suite's group-recovery check.
pub fn interaction_score(
    t: &Tape,
    h_i: Var,
    h_j: Var,
    params: &InteractionVars,
) -> Result<Var, GroupError> {
    for (what, v) in [("h_i", h_i), ("h_j", h_j)] {
        let len = t.shape(v).iter().product::<usize>();
        if len != params.h_p {
            return Err(GroupError::ShapeMismatch { what, expected: params.h_p, got: len });
        }
    }
    let s = t.add(h_i, h_j);
    let inner = t.add(t.matvec(params.w_hh, s), params.b_hh);
    let score = t.add(t.dot(params.w_hs, inner), params.b_hs);
    Ok(t.sigmoid(score))
}

/// All pairwise scores as an upper-triangular-shared table; `p[i][j]` and
/// `p[j][i]` are the same tape node.
fn score_table(
    t: &Tape,
    states: &[Var],
    params: &InteractionVars,
) -> Result<Vec<Vec<Var>>, GroupError> {
    let n = states.len();
    let mut table: Vec<Vec<Option<Var>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let p = interaction_score(t, states[i], states[j], params)?;
            table[i][j] = Some(p);
            table[j][i] = Some(p);
        }
    }
    Ok(table
        .into_iter()
        .map(|row| row.into_iter().map(|p| p.expect("filled")).collect())
        .collect())
}

/// Re-estimate every person's group from the previous memberships.
///
/// Person i scores group k by the mean of `p_ij` over k's previous members
/// (including `p_ii` when k is i's own previous group, since i is a member);
/// an empty group is scored by `p_ii` alone. The soft row is
/// `softmax(scores / temperature)`; the hard index is the argmax with ties
/// broken toward the person's previous group, then the lowest group index.
/// With `gumbel`, i.i.d. Gumbel(0,1) noise is added to the scores before
/// the softmax and the argmax is taken over the perturbed scores.
pub fn assign_groups(
    t: &Tape,
    states: &[Var],
    prev: &GroupAssignment,
    params: &InteractionVars,
    temperature: f64,
    mut gumbel: Option<&mut ChaCha8Rng>,
) -> Result<GroupAssignment, GroupError> {
    if !(temperature > 0.0) {
        return Err(GroupError::BadTemperature(temperature));
    }
    let n = states.len();
    if n < 2 {
        return Err(GroupError::TooFewPeople(n));
    }
    if prev.n() != n {
        return Err(GroupError::ShapeMismatch { what: "prev assignment", expected: n, got: prev.n() });
    }
    let n_groups = n - 1;
    let p = score_table(t, states, params)?;

    let mut soft = Vec::with_capacity(n);
    let mut hard = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand = Vec::with_capacity(n_groups);
        for k in 0..n_groups {
            let members = prev.members(k);
            let score = if members.is_empty() {
                p[i][i]
            } else {
                let sum = t.add_n(&members.iter().map(|&j| p[i][j]).collect::<Vec<_>>());
                t.scale(sum, 1.0 / members.len() as f64)
            };
            cand.push(score);
        }
        let mut logits = t.stack0(&cand);
        if let Some(rng) = gumbel.as_deref_mut() {
            let noise: Vec<f64> = (0..n_groups)
                .map(|_| {
                    let u: f64 = rng.random_range(f64::EPSILON..1.0);
                    -(-u.ln()).ln()
                })
                .collect();
            logits = t.add(logits, t.leaf1(ndarray::Array1::from_vec(noise)));
        }
        soft.push(t.softmax_t(logits, temperature));

        let vals = t.value(logits);
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GroupError::NonFiniteScores { person: i });
        }
        let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let prev_group = prev.hard[i];
        let chosen = if vals[[prev_group]] == best {
            prev_group
        } else {
            (0..n_groups).find(|&k| vals[[k]] == best).expect("argmax exists")
        };
        hard.push(chosen);
    }
    Ok(GroupAssignment { soft, hard })
}

/// Advance every group LSTM one step. A nonempty group's input is the mean
/// over its members of `W_hg h_i`; an empty group steps on a zero input so
/// its state stays defined.
pub fn update_group_states(
    t: &Tape,
    assignment: &GroupAssignment,
    states: &[Var],
    prev: &GroupStates,
    w_hg: Var,
    cell: &LstmCell,
    cell_vars: &[Var],
) -> Result<GroupStates, GroupError> {
    let n_groups = prev.n_groups();
    if assignment.n_groups() != n_groups {
        return Err(GroupError::ShapeMismatch {
            what: "assignment groups",
            expected: n_groups,
            got: assignment.n_groups(),
        });
    }
    if assignment.n() != states.len() {
        return Err(GroupError::ShapeMismatch {
            what: "person states",
            expected: assignment.n(),
            got: states.len(),
        });
    }
    let g_size = cell.hidden;
    let mut h = Vec::with_capacity(n_groups);
    let mut c = Vec::with_capacity(n_groups);
    for k in 0..n_groups {
        let members = assignment.members(k);
        let input = if members.is_empty() {
            t.zeros(&[g_size])
        } else {
            let projected: Vec<Var> = members.iter().map(|&i| t.matvec(w_hg, states[i])).collect();
            let sum = t.add_n(&projected);
            t.scale(sum, 1.0 / members.len() as f64)
        };
        let (hk, ck) = cell.step(t, cell_vars, input, prev.h[k], prev.c[k]);
        h.push(hk);
        c.push(ck);
    }
    Ok(GroupStates { h, c, counts: assignment.counts() })
}

/// The interaction context of person i: its hard group's hidden state.
pub fn group_context(assignment: &GroupAssignment, states: &GroupStates, i: usize) -> Var {
    states.h[assignment.hard[i]]
}

/// Differentiable context: the soft-assignment mixture of group states,
/// `sum_k soft_ik * h_k`. At low temperature the soft row is near one-hot,
/// so this converges to [`group_context`]; unlike the hard lookup it is
/// smooth in every parameter, so the assignment mechanism receives
/// learning signal.
pub fn soft_group_context(
    t: &Tape,
    assignment: &GroupAssignment,
    states: &GroupStates,
    i: usize,
) -> Var {
    let row = assignment.soft[i];
    let terms: Vec<Var> = (0..states.n_groups())
        .map(|k| t.mul_scalar(states.h[k], t.at(row, k)))
        .collect();
    t.add_n(&terms)
}

/// Straight-through context: forward value is exactly the hard group's
/// hidden state ([`group_context`]), while gradients flow through the soft
/// mixture ([`soft_group_context`]). An alternative to the soft mixture for
/// callers that want the rollout to consume the discrete assignment
/// verbatim; note the surrogate gradient is biased wherever the soft row is
/// far from one-hot, so finite-difference checks only agree with it once
/// the assignment scores are well separated relative to the temperature.
pub fn st_group_context(
    t: &Tape,
    assignment: &GroupAssignment,
    states: &GroupStates,
    i: usize,
) -> Var {
    let hard = group_context(assignment, states, i);
    let soft = soft_group_context(t, assignment, states, i);
    t.straight_through(hard, soft)
}
