//! Oracles shared by the integration tests. Nothing here calls the library's
//! linear solvers: absorption quantities come from matrix powers instead.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ttarisk::markov_model::{
    build_extended_from_probs, build_modified_matrix, trip_end_probability, ChainParams, MatrixKind, TrafficEnv,
    TransitionMatrix,
};

pub type Dense = Vec<Vec<f64>>;

pub fn dense(m: &TransitionMatrix) -> Dense {
    m.rows().to_vec()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// `h(x) = lim P^n(x, accident)` by repeated squaring until the transient
/// mass left in every row is below `tol`.
pub fn absorption_by_squaring(m: &TransitionMatrix, tol: f64) -> Vec<f64> {
    let accident = m.accident_state();
    let n = m.dimension();
    let absorbing: Vec<bool> = (0..n).map(|i| m.get(i, i) == 1.0).collect();
    let mut p = dense(m);
    for _ in 0..200 {
        let left = (0..n)
            .map(|i| (0..n).filter(|&j| !absorbing[j]).map(|j| p[i][j]).sum::<f64>())
            .fold(0.0, f64::max);
        if left < tol {
            break;
        }
        p = matmul(&p, &p);
    }
    (0..n).map(|i| p[i][accident]).collect()
}

/// `g(x) = sum_n P_x(T > n)` for a chain with a single absorbing state, from
/// the doubling recursion `S_2n = S_n + Q^n S_n` with `S_n = sum_{k<n} Q^k`.
pub fn exit_time_by_doubling(m: &TransitionMatrix, tol: f64) -> Vec<f64> {
    let accident = m.accident_state();
    let idx: Vec<usize> = (0..m.dimension()).filter(|&i| i != accident).collect();
    let k = idx.len();
    let mut q: Dense = idx.iter().map(|&i| idx.iter().map(|&j| m.get(i, j)).collect()).collect();
    let mut s: Dense = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..200 {
        let mass = q.iter().map(|r| r.iter().sum::<f64>()).fold(0.0, f64::max);
        if mass < tol {
            break;
        }
        let qs = matmul(&q, &s);
        for i in 0..k {
            for j in 0..k {
                s[i][j] += qs[i][j];
            }
        }
        q = matmul(&q, &q);
    }
    let mut g = vec![0.0; m.dimension()];
    for (r, &i) in idx.iter().enumerate() {
        g[i] = s[r].iter().sum();
    }
    g
}

/// One point of the solver/oracle grid.
#[derive(Debug, Clone, Copy)]
pub struct GridPoint {
    pub d: usize,
    pub alpha: f64,
    pub beta: f64,
    pub c: usize,
}

/// D in {4, 8, 16}, alpha in {0.01, 0.02}, beta in {0.2, 0.34}, c in {D-1, D}.
pub fn acceptance_grid() -> Vec<GridPoint> {
    let mut out = Vec::new();
    for d in [4, 8, 16] {
        for alpha in [0.01, 0.02] {
            for beta in [0.2, 0.34] {
                for c in [d - 1, d] {
                    out.push(GridPoint { d, alpha, beta, c });
                }
            }
        }
    }
    out
}

pub const TASK1_FLOW: f64 = 1500.0;

/// Trip-end probability for the 807 m section at the task-1 equilibrium speed.
pub fn default_p3() -> f64 {
    let env = TrafficEnv::with_flow(TASK1_FLOW).unwrap();
    let speed = env.equilibrium_speed(env.density_k).unwrap();
    trip_end_probability(807.0, speed, 1.0 / 15.0).unwrap()
}

/// Modified and extended matrices at task-1 traffic.
pub fn grid_matrices(pt: &GridPoint, p3: f64) -> (TransitionMatrix, TransitionMatrix) {
    let params = ChainParams::new(pt.alpha, pt.beta, pt.c, pt.d).unwrap();
    let (p0, q0) = TrafficEnv::with_flow(TASK1_FLOW).unwrap().free_state_probs().unwrap();
    (
        build_modified_matrix(&params, p0, q0).unwrap(),
        build_extended_from_probs(&params, p0, q0, p3).unwrap(),
    )
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Expected nonzero entries of each row, written out from the row classes.
pub fn expected_entries(kind: MatrixKind, a: f64, b: f64, c: usize, d: usize, p0: f64, p3: f64) -> Vec<BTreeMap<usize, f64>> {
    let g = a + b;
    let n = if kind == MatrixKind::Extended { d + 3 } else { d + 2 };
    let mut rows = vec![BTreeMap::new(); n];
    if kind == MatrixKind::Extended {
        rows[0] = BTreeMap::from([(0, p0 * (1.0 - p3)), (1, (1.0 - p0) * (1.0 - p3)), (d + 2, p3)]);
        rows[d + 2] = BTreeMap::from([(d + 2, 1.0)]);
    } else {
        rows[0] = BTreeMap::from([(0, p0), (1, 1.0 - p0)]);
    }
    for i in 1..=d {
        rows[i] = match kind {
            MatrixKind::Ideal if i < c => BTreeMap::from([(i + 1, 1.0)]),
            MatrixKind::Ideal if i == c => BTreeMap::from([(i, 1.0)]),
            MatrixKind::Ideal => BTreeMap::from([(i - 1, 1.0)]),
            _ if i < c => BTreeMap::from([(i - 1, a), (i, b), (i + 1, 1.0 - g)]),
            _ if i == c => BTreeMap::from([(i - 1, g / 2.0), (i, 1.0 - g), (i + 1, g / 2.0)]),
            _ => BTreeMap::from([(i - 1, 1.0 - g), (i, b), (i + 1, a)]),
        };
    }
    rows[d + 1] = BTreeMap::from([(d + 1, 1.0)]);
    rows
}
