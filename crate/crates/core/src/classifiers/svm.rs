//! Soft-margin RBF support vector machine.
//!
//! Each unordered class pair gets a binary machine trained by sequential
//! minimal optimisation on the dual
//!
//! ```text
//! min ½ αᵀQα − eᵀα   s.t.  0 ≤ αᵢ ≤ C,  yᵀα = 0,   Qᵢⱼ = yᵢyⱼ·exp(−γ‖xᵢ − xⱼ‖²)
//! ```
//!
//! using maximal-violating-pair selection with second-order gain (the
//! working-set rule of Fan, Chen & Lin, 2005). The solver stops when the
//! KKT gap `m(α) − M(α)` drops below `tol`.

use serde::{Deserialize, Serialize};

use super::{Classifier, Label, LabeledDataset};
use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// RBF width γ (often written `g`).
    pub gamma: f64,
    pub c: f64,
    /// KKT gap tolerance.
    pub tol: f64,
    /// Upper bound on SMO pair updates per binary machine.
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            gamma: 0.005,
            c: 1000.0,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Full dual solution of one binary problem.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySolution {
    pub alpha: Vec<f64>,
    /// Decision function is `Σ αᵢyᵢK(xᵢ, x) − rho`.
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the dual for labels `y ∈ {+1, −1}`.
pub fn solve_binary(x: &[Vec<f64>], y: &[f64], cfg: &SvmConfig) -> BinarySolution {
    let n = x.len();
    let c = cfg.c;
    let mut kernel = vec![0.0; n * n];
    for i in 0..n {
        kernel[i * n + i] = 1.0;
        for j in 0..i {
            let v = rbf(cfg.gamma, &x[i], &x[j]);
            kernel[i * n + j] = v;
            kernel[j * n + i] = v;
        }
    }
    let k = |i: usize, j: usize| kernel[i * n + j];

    let mut alpha = vec![0.0; n];
    // Gradient of the dual objective: Qα − e.
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v >= gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut obj_min = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                if !in_low(alpha[t], y[t]) {
                    continue;
                }
                let yg = y[t] * grad[t];
                if yg >= gmax2 {
                    gmax2 = yg;
                }
                let diff = gmax + yg;
                if diff > 0.0 {
                    let quad = (k(i, i) + k(t, t) - 2.0 * k(i, t)).max(TAU);
                    let obj = -(diff * diff) / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else {
            converged = true;
            break;
        };
        if gmax + gmax2 < cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * k(i, j);
        if y[i] != y[j] {
            let quad = (k(i, i) + k(j, j) + 2.0 * qij).max(TAU);
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
            let quad = (k(i, i) + k(j, j) - 2.0 * qij).max(TAU);
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
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(t, i) * di + y[j] * k(t, j) * dj);
        }
    }

    // rho: mean of yG over free vectors, else midpoint of the feasible band.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
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
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    BinarySolution {
        alpha,
        rho,
        iterations,
        converged,
    }
}

/// One pairwise machine; `positive` wins when the decision value is > 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMachine {
    pub positive: Label,
    pub negative: Label,
    pub support_vectors: Vec<Vec<f64>>,
    /// αᵢ ∈ (0, C].
    pub alphas: Vec<f64>,
    /// +1 / −1.
    pub ys: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl BinaryMachine {
    pub fn decision(&self, gamma: f64, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(self.alphas.iter().zip(&self.ys))
            .map(|(sv, (a, y))| a * y * rbf(gamma, sv, x))
            .sum::<f64>()
            - self.rho
    }

    pub fn dual_residual(&self) -> f64 {
        self.alphas.iter().zip(&self.ys).map(|(a, y)| a * y).sum()
    }
}

/// One-vs-one ensemble of binary machines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub c: f64,
    pub tol: f64,
    pub machines: Vec<BinaryMachine>,
}

impl SvmModel {
    pub fn train(ds: &LabeledDataset, cfg: &SvmConfig) -> Result<Self> {
        if !(cfg.gamma > 0.0) || !(cfg.c > 0.0) || !(cfg.tol > 0.0) {
            return Err(Error::invalid("SVM needs gamma > 0, C > 0 and tol > 0"));
        }
        let classes = ds.classes_present();
        if classes.len() < 2 {
            return Err(Error::invalid("SVM training needs at least two classes"));
        }
        let mut machines = Vec::new();
        for (a, &pos) in classes.iter().enumerate() {
            for &neg in &classes[a + 1..] {
                let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = ds
                    .iter()
                    .filter(|(_, l)| *l == pos || *l == neg)
                    .map(|(x, l)| (x.to_vec(), if l == pos { 1.0 } else { -1.0 }))
                    .unzip();
                let sol = solve_binary(&xs, &ys, cfg);
                let mut m = BinaryMachine {
                    positive: pos,
                    negative: neg,
                    support_vectors: Vec::new(),
                    alphas: Vec::new(),
                    ys: Vec::new(),
                    rho: sol.rho,
                    iterations: sol.iterations,
                    converged: sol.converged,
                };
                for ((x, y), a) in xs.into_iter().zip(ys).zip(sol.alpha) {
                    if a > 0.0 {
                        m.support_vectors.push(x);
                        m.alphas.push(a);
                        m.ys.push(y);
                    }
                }
                machines.push(m);
            }
        }
        Ok(Self {
            gamma: cfg.gamma,
            c: cfg.c,
            tol: cfg.tol,
            machines,
        })
    }

    /// Decision value of every pairwise machine, in training order.
    pub fn decisions(&self, x: &[f64]) -> Vec<f64> {
        self.machines.iter().map(|m| m.decision(self.gamma, x)).collect()
    }
}

impl Classifier for SvmModel {
    /// One-vs-one vote. Ties go to the larger summed decision value in each
    /// class's favour, then to label order.
    fn predict(&self, x: &[f64]) -> Label {
        let mut votes = [0usize; Label::COUNT];
        let mut margin = [0.0f64; Label::COUNT];
        let mut seen = [false; Label::COUNT];
        for m in &self.machines {
            let d = m.decision(self.gamma, x);
            seen[m.positive.index()] = true;
            seen[m.negative.index()] = true;
            if d > 0.0 {
                votes[m.positive.index()] += 1;
            } else {
                votes[m.negative.index()] += 1;
            }
            margin[m.positive.index()] += d;
            margin[m.negative.index()] -= d;
        }
        let mut best: Option<usize> = None;
        for i in (0..Label::COUNT).filter(|&i| seen[i]) {
            best = match best {
                None => Some(i),
                Some(b) if votes[i] > votes[b] || (votes[i] == votes[b] && margin[i] > margin[b]) => Some(i),
                keep => keep,
            };
        }
        Label::ALL[best.expect("model has at least one machine")]
    }
}
