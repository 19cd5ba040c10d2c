//! Sequential minimal optimization for the soft-margin SVM dual.
//!
//! Solves `min_a 0.5 a'Qa - e'a` subject to `0 <= a_t <= C` and `y'a = 0`,
//! where `Q_st = y_s y_t K_st`. Each step updates the maximal violating pair:
//! the first index has the largest `-y G` among points that may still grow,
//! the second the smallest `-y G` among points that may shrink. Since
//! `-y_t G_t = -E_t` for the bias-free prediction error `E`, this is the pair
//! with the largest `|E_1 - E_2|` that admits a feasible step.

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct SmoParams {
    pub c: f64,
    /// Stop once the maximal KKT violation `m - M` falls to this value.
    pub tol: f64,
    /// Consecutive steps without objective gain tolerated before giving up.
    pub max_passes: usize,
    pub max_iter: Option<usize>,
    /// Record the dual objective after every step.
    pub trace_objective: bool,
}

impl Default for SmoParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-3,
            max_passes: 10,
            max_iter: None,
            trace_objective: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    /// Decision function is `sum_t alpha_t y_t K(x_t, x) - rho`.
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `m - M` at exit.
    pub violation: f64,
    /// Dual objective `e'a - 0.5 a'Qa`, starting at 0 for `a = 0`.
    pub objective_trace: Vec<f64>,
}

/// Row-major symmetric kernel matrix.
pub struct KernelMatrix {
    n: usize,
    data: Vec<f64>,
}

impl KernelMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        use rayon::prelude::*;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| if j < i { 0.0 } else { f(i, j) }).collect())
            .collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                data[i * n + j] = rows[i][j];
                data[j * n + i] = rows[i][j];
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    // With G = Qa - e: e'a - 0.5 a'Qa = 0.5 * sum a_t (1 - G_t).
    0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (1.0 - g)).sum::<f64>()
}

/// Runs SMO on labels `y` in {-1, +1}.
pub fn solve(kernel: &KernelMatrix, y: &[f64], params: &SmoParams) -> SmoSolution {
    let n = y.len();
    assert_eq!(kernel.len(), n, "kernel matrix and labels disagree");
    let c = params.c;
    let max_iter = params.max_iter.unwrap_or_else(|| 10_000_000usize.max(100 * n));

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut trace = Vec::new();
    let mut objective = 0.0;
    if params.trace_objective {
        trace.push(objective);
    }

    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let mut stalled = 0;
    let mut converged = false;
    let mut violation;

    loop {
        let mut i = usize::MAX;
        let mut m = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut big_m = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > m {
                m = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < big_m {
                big_m = v;
                j = t;
            }
        }
        violation = m - big_m;
        if i == usize::MAX || j == usize::MAX || violation <= params.tol {
            converged = true;
            break;
        }
        if iterations >= max_iter || stalled >= params.max_passes {
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let k_ii = kernel.get(i, i);
        let k_jj = kernel.get(j, j);
        let k_ij = kernel.get(i, j);
        if y[i] != y[j] {
            let mut quad = k_ii + k_jj - 2.0 * k_ij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k_ii + k_jj - 2.0 * k_ij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let d_i = (alpha[i] - old_i) * y[i];
        let d_j = (alpha[j] - old_j) * y[j];
        let (row_i, row_j) = (kernel.row(i), kernel.row(j));
        for t in 0..n {
            grad[t] += y[t] * (row_i[t] * d_i + row_j[t] * d_j);
        }

        let next = dual_objective(&alpha, &grad);
        if next - objective <= 1e-15 * objective.abs().max(1.0) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        objective = next;
        if params.trace_objective {
            trace.push(objective);
        }
    }

    let rho = compute_rho(&alpha, &grad, y, c);
    SmoSolution {
        alpha,
        rho,
        iterations,
        converged,
        violation,
        objective_trace: trace,
    }
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Largest KKT violation of a solution, measured on the margin `y f(x) - 1`.
pub fn kkt_violation(kernel: &KernelMatrix, y: &[f64], alpha: &[f64], rho: f64, c: f64) -> f64 {
    let n = y.len();
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let f: f64 = (0..n).map(|s| alpha[s] * y[s] * kernel.get(s, t)).sum::<f64>() - rho;
        let margin = y[t] * f - 1.0;
        let v = if alpha[t] <= 0.0 {
            (-margin).max(0.0)
        } else if alpha[t] >= c {
            margin.max(0.0)
        } else {
            margin.abs()
        };
        worst = worst.max(v);
    }
    worst
}
