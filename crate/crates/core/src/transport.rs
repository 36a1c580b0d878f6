//! 1-Wasserstein distances between weighted atoms in phase space, exact via
//! a primal-dual transportation solver, and the split functionals 𝒳 and 𝒱 of
//! a coupling.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpyError};
use crate::parallel::{for_each_chunk, pairwise_sum, Exec, PairwiseSum};

/// Largest N₁·N₂ handled by the exact solver.
pub const SIZE_CAP: usize = 4_000_000;

/// A weighted point cloud in R^{2d}, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct Atoms<'a> {
    pub dim: usize,
    pub positions: &'a [f64],
    pub velocities: &'a [f64],
    pub weights: &'a [f64],
}

impl<'a> Atoms<'a> {
    pub fn new(dim: usize, positions: &'a [f64], velocities: &'a [f64], weights: &'a [f64]) -> Result<Self> {
        let n = weights.len();
        if dim == 0 || positions.len() != n * dim || velocities.len() != n * dim {
            return invalid("atoms: positions, velocities and weights disagree in length");
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return invalid("atoms: weights must be finite and non-negative");
        }
        Ok(Self {
            dim,
            positions,
            velocities,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    fn x(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
    fn v(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// |p - q| on R^{2d}.
pub fn ground_cost(a: &Atoms<'_>, i: usize, b: &Atoms<'_>, j: usize) -> f64 {
    (dist2(a.x(i), b.x(j)) + dist2(a.v(i), b.v(j))).sqrt()
}

/// A transport plan as a list of (i, j, mass).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub n_left: usize,
    pub n_right: usize,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl Coupling {
    /// i ↦ i with the left weights; for atoms sampled with a common seed.
    pub fn identity(weights: &[f64]) -> Self {
        Self {
            n_left: weights.len(),
            n_right: weights.len(),
            pairs: weights.iter().enumerate().map(|(i, &w)| (i, i, w)).collect(),
        }
    }

    /// Largest marginal mismatch against the given weights.
    pub fn marginal_error(&self, left: &[f64], right: &[f64]) -> f64 {
        let mut l = vec![0.0; self.n_left];
        let mut r = vec![0.0; self.n_right];
        for &(i, j, m) in &self.pairs {
            l[i] += m;
            r[j] += m;
        }
        let e1 = l.iter().zip(left).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let e2 = r.iter().zip(right).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if left.len() != self.n_left || right.len() != self.n_right {
            return f64::INFINITY;
        }
        e1.max(e2)
    }

    /// Σ mass·|p_i - q_j|.
    pub fn cost(&self, a: &Atoms<'_>, b: &Atoms<'_>) -> Result<f64> {
        self.check_sizes(a, b)?;
        let mut s = PairwiseSum::new();
        for &(i, j, m) in &self.pairs {
            s.add(m * ground_cost(a, i, b, j));
        }
        Ok(s.total())
    }

    fn check_sizes(&self, a: &Atoms<'_>, b: &Atoms<'_>) -> Result<()> {
        if a.len() != self.n_left || b.len() != self.n_right || a.dim != b.dim {
            return invalid("coupling does not match the ensembles");
        }
        Ok(())
    }

    /// CSV with header `i,j,mass`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "i,j,mass")?;
        for &(i, j, m) in &self.pairs {
            writeln!(w, "{i},{j},{m:e}")?;
        }
        Ok(())
    }
}

/// Exact W₁ with its optimal plan and LP certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct W1Result {
    pub distance: f64,
    pub coupling: Coupling,
    /// Dual objective of the final potentials.
    pub dual: f64,
    /// |primal - dual| / max(primal, 1e-300).
    pub duality_gap: f64,
    pub augmentations: usize,
}

/// Exact 1-Wasserstein distance for the Euclidean cost on R^{2d}.
///
/// Equal sizes with equal weights are solved as an assignment problem on unit
/// supplies; otherwise the weights are used as they are. Both go through the
/// same successive-shortest-path solver with node potentials.
///
/// The pair is solved in a canonical orientation, so swapping the arguments
/// transposes the plan and leaves the distance bitwise unchanged.
pub fn w1_exact(a: &Atoms<'_>, b: &Atoms<'_>, exec: Exec) -> Result<W1Result> {
    if canonical_order(a, b) != std::cmp::Ordering::Greater {
        return w1_oriented(a, b, exec);
    }
    let mut r = w1_oriented(b, a, exec)?;
    let c = &mut r.coupling;
    std::mem::swap(&mut c.n_left, &mut c.n_right);
    for p in c.pairs.iter_mut() {
        *p = (p.1, p.0, p.2);
    }
    c.pairs.sort_by_key(|p| (p.0, p.1));
    Ok(r)
}

fn canonical_order(a: &Atoms<'_>, b: &Atoms<'_>) -> std::cmp::Ordering {
    let key = |x: &Atoms<'_>| (x.len(), x.weights.iter().chain(x.positions).chain(x.velocities).copied().collect::<Vec<f64>>());
    let (ka, kb) = (key(a), key(b));
    ka.0.cmp(&kb.0).then_with(|| {
        ka.1.iter()
            .zip(&kb.1)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

fn w1_oriented(a: &Atoms<'_>, b: &Atoms<'_>, exec: Exec) -> Result<W1Result> {
    if a.dim != b.dim {
        return invalid("ensembles live in different dimensions");
    }
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return invalid("ensembles must be non-empty");
    }
    if n1.saturating_mul(n2) > SIZE_CAP {
        return Err(VpyError::SizeCap {
            size: n1 * n2,
            cap: SIZE_CAP,
        });
    }
    let (ma, mb) = (pairwise_sum(a.weights), pairwise_sum(b.weights));
    if (ma - mb).abs() > 1e-12 * ma.max(mb) {
        return invalid(format!("total masses differ: {ma} vs {mb}"));
    }
    let mut cost = vec![0.0; n1 * n2];
    for_each_chunk(exec, &mut cost, n2, |i, row| {
        for (j, c) in row.iter_mut().enumerate() {
            *c = ground_cost(a, i, b, j);
        }
    });
    let equal = n1 == n2 && {
        let w0 = a.weights[0];
        a.weights.iter().chain(b.weights).all(|&w| w == w0)
    };
    let (supply, demand, scale) = if equal {
        (vec![1.0; n1], vec![1.0; n2], a.weights[0])
    } else {
        (a.weights.to_vec(), b.weights.iter().map(|w| w * ma / mb).collect(), 1.0)
    };
    let sol = solve_transport(&cost, n1, n2, supply, demand)?;
    let mut pairs = Vec::new();
    let mut primal = PairwiseSum::new();
    for i in 0..n1 {
        for j in 0..n2 {
            let f = sol.flow[i * n2 + j];
            if f > 0.0 {
                pairs.push((i, j, f * scale));
                primal.add(f * scale * cost[i * n2 + j]);
            }
        }
    }
    let distance = primal.total();
    let dual = sol.dual * scale;
    Ok(W1Result {
        distance,
        coupling: Coupling {
            n_left: n1,
            n_right: n2,
            pairs,
        },
        dual,
        duality_gap: (distance - dual).abs() / distance.max(1e-300),
        augmentations: sol.augmentations,
    })
}

struct TransportSolution {
    flow: Vec<f64>,
    dual: f64,
    augmentations: usize,
}

/// Successive shortest paths on the bipartite residual graph with dense
/// Dijkstra and Johnson potentials. Reduced cost of i→j is
/// c_ij + π_i - π_j; of the reverse arc j→i it is -c_ij + π_j - π_i.
fn solve_transport(cost: &[f64], n1: usize, n2: usize, supply: Vec<f64>, demand: Vec<f64>) -> Result<TransportSolution> {
    let total: f64 = supply.iter().sum();
    let eps = 1e-14 * total.max(1.0);
    let mut left = supply.clone();
    let mut deficit = demand.clone();
    let mut flow = vec![0.0; n1 * n2];
    let mut pi_r = vec![0.0; n1];
    let mut pi_c = vec![0.0; n2];
    let mut dist_r = vec![f64::INFINITY; n1];
    let mut dist_c = vec![f64::INFINITY; n2];
    let mut done_r = vec![false; n1];
    let mut done_c = vec![false; n2];
    let mut pred_r = vec![usize::MAX; n1];
    let mut pred_c = vec![usize::MAX; n2];
    let mut augmentations = 0usize;
    let mut touched_r: Vec<usize> = Vec::new();
    let mut touched_c: Vec<usize> = Vec::new();
    for s in 0..n1 {
        while left[s] > eps {
            for &i in &touched_r {
                dist_r[i] = f64::INFINITY;
                done_r[i] = false;
            }
            for &j in &touched_c {
                dist_c[j] = f64::INFINITY;
                done_c[j] = false;
            }
            touched_r.clear();
            touched_c.clear();
            dist_r[s] = 0.0;
            touched_r.push(s);
            let (target, reach) = loop {
                // unvisited node with the smallest tentative distance
                let mut best = f64::INFINITY;
                let mut node: Option<(bool, usize)> = None;
                for &i in &touched_r {
                    if !done_r[i] && dist_r[i] < best {
                        best = dist_r[i];
                        node = Some((true, i));
                    }
                }
                for &j in &touched_c {
                    if !done_c[j] && dist_c[j] < best {
                        best = dist_c[j];
                        node = Some((false, j));
                    }
                }
                match node {
                    None => {
                        return Err(VpyError::NumericFailure {
                            what: "transport problem became infeasible".into(),
                            estimate: left[s],
                        })
                    }
                    Some((true, i)) => {
                        done_r[i] = true;
                        let row = &cost[i * n2..(i + 1) * n2];
                        for j in 0..n2 {
                            if done_c[j] {
                                continue;
                            }
                            let rc = (row[j] + pi_r[i] - pi_c[j]).max(0.0);
                            let nd = best + rc;
                            if nd < dist_c[j] {
                                if dist_c[j] == f64::INFINITY {
                                    touched_c.push(j);
                                }
                                dist_c[j] = nd;
                                pred_c[j] = i;
                            }
                        }
                    }
                    Some((false, j)) => {
                        done_c[j] = true;
                        if deficit[j] > eps {
                            break (j, best);
                        }
                        for i in 0..n1 {
                            if done_r[i] || flow[i * n2 + j] <= 0.0 {
                                continue;
                            }
                            let rc = (-cost[i * n2 + j] + pi_c[j] - pi_r[i]).max(0.0);
                            let nd = best + rc;
                            if nd < dist_r[i] {
                                if dist_r[i] == f64::INFINITY {
                                    touched_r.push(i);
                                }
                                dist_r[i] = nd;
                                pred_r[i] = j;
                            }
                        }
                    }
                }
            };
            // potentials: π += min(dist, D); untouched nodes shift by D
            for i in 0..n1 {
                pi_r[i] += if done_r[i] { dist_r[i] } else { reach };
            }
            for j in 0..n2 {
                pi_c[j] += if done_c[j] { dist_c[j] } else { reach };
            }
            // bottleneck along the path
            let mut amount = left[s].min(deficit[target]);
            let mut j = target;
            loop {
                let i = pred_c[j];
                if i == s {
                    break;
                }
                let jp = pred_r[i];
                amount = amount.min(flow[i * n2 + jp]);
                j = jp;
            }
            let mut j = target;
            loop {
                let i = pred_c[j];
                flow[i * n2 + j] += amount;
                if i == s {
                    break;
                }
                let jp = pred_r[i];
                let f = &mut flow[i * n2 + jp];
                *f -= amount;
                if *f <= eps {
                    *f = 0.0;
                }
                j = jp;
            }
            left[s] -= amount;
            deficit[target] -= amount;
            augmentations += 1;
        }
    }
    let mut dual = PairwiseSum::new();
    for j in 0..n2 {
        dual.add(demand[j] * pi_c[j]);
    }
    for i in 0..n1 {
        dual.add(-supply[i] * pi_r[i]);
    }
    Ok(TransportSolution {
        flow,
        dual: dual.total(),
        augmentations,
    })
}

/// (𝒳, 𝒱, 𝒳 + 𝒱) for a coupling of time-t states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledBound {
    pub position: f64,
    pub velocity: f64,
    pub sum: f64,
}

/// 𝒳(t) = Σ m_ij |X₁ᵢ - X₂ⱼ|, 𝒱(t) likewise; the sum bounds W₁ from above.
/// `t1` and `t2` are the snapshot times, which must agree.
pub fn w1_coupled_bound(pi0: &Coupling, a: &Atoms<'_>, t1: f64, b: &Atoms<'_>, t2: f64) -> Result<CoupledBound> {
    if (t1 - t2).abs() > 1e-12 * t1.abs().max(1.0) {
        return invalid(format!("trajectories are sampled at different times ({t1} vs {t2})"));
    }
    pi0.check_sizes(a, b)?;
    let mut xs = PairwiseSum::new();
    let mut vs = PairwiseSum::new();
    for &(i, j, m) in &pi0.pairs {
        xs.add(m * dist2(a.x(i), b.x(j)).sqrt());
        vs.add(m * dist2(a.v(i), b.v(j)).sqrt());
    }
    let (position, velocity) = (xs.total(), vs.total());
    Ok(CoupledBound {
        position,
        velocity,
        sum: position + velocity,
    })
}

/// (Γ₁(t), Γ₂(t))_# π₀ on atoms: the same (i, j, mass) list, checked against
/// the time-t ensembles. Weights never change under the flow.
pub fn pushforward_coupling(pi0: &Coupling, a: &Atoms<'_>, t1: f64, b: &Atoms<'_>, t2: f64) -> Result<Coupling> {
    if (t1 - t2).abs() > 1e-12 * t1.abs().max(1.0) {
        return invalid(format!("trajectories are sampled at different times ({t1} vs {t2})"));
    }
    pi0.check_sizes(a, b)?;
    Ok(pi0.clone())
}
