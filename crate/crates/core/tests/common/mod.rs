//! Independent oracles for integration tests. Nothing here calls the
//! library's metric code.
#![allow(dead_code)]

use crossbias::backends::synthetic::{Factor, WorldSpec};
use crossbias::{AuditConfig, BiasAxis, Fragment};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;

/// Wasserstein-1 by solving the transport linear program.
pub fn lp_w1(p: &[f64], q: &[f64], ordinal: bool) -> f64 {
    let k = p.len();
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let mut vars = vec![Vec::with_capacity(k); k];
    for (i, row) in vars.iter_mut().enumerate() {
        for j in 0..k {
            let cost = if ordinal {
                (i as f64 - j as f64).abs()
            } else if i == j {
                0.0
            } else {
                1.0
            };
            row.push(problem.add_var(cost, (0.0, f64::INFINITY)));
        }
    }
    for i in 0..k {
        let row: Vec<_> = (0..k).map(|j| (vars[i][j], 1.0)).collect();
        problem.add_constraint(&row, ComparisonOp::Eq, p[i]);
        let col: Vec<_> = (0..k).map(|j| (vars[j][i], 1.0)).collect();
        problem.add_constraint(&col, ComparisonOp::Eq, q[i]);
    }
    problem.solve().expect("transport LP is feasible").objective()
}

pub fn point_mass(k: usize, c: usize) -> Vec<f64> {
    (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
}

/// Normalized deviation computed with the LP oracle.
pub fn oracle_w_bar(d: &[f64], ideal: &[f64], ordinal: bool) -> f64 {
    let worst = (0..ideal.len())
        .map(|c| lp_w1(&point_mass(ideal.len(), c), ideal, ordinal))
        .fold(0.0, f64::max);
    if worst == 0.0 {
        0.0
    } else {
        lp_w1(d, ideal, ordinal) / worst
    }
}

pub fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(2)).collect();
        let s: f64 = w.iter().sum();
        if s > 1e-6 {
            return w.iter().map(|x| x / s).collect();
        }
    }
}

/// Axes `a0, a1, ...` with categories `a{i}v{j}`.
pub fn synthetic_axes(ks: &[usize]) -> Vec<BiasAxis> {
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let cats: Vec<String> = (0..k).map(|j| format!("a{i}v{j}")).collect();
            BiasAxis {
                id: format!("a{i}"),
                prompt_fragments: cats.iter().map(|c| Fragment::Before(c.clone())).collect(),
                categories: cats,
                question: None,
                ordinal: true,
            }
        })
        .collect()
}

pub fn config_with_world(axes: Vec<BiasAxis>, world: WorldSpec) -> AuditConfig {
    let mut config = AuditConfig::new(axes, "A photo of a person");
    config.synthetic = Some(world);
    crossbias::validate_config(config).expect("valid test config")
}

/// Joint distribution enumerated cell by cell from factor weights.
pub struct Joint {
    pub ks: Vec<usize>,
    pub cells: Vec<(Vec<usize>, f64)>,
}

pub fn joint_from_factors(axes: &[BiasAxis], factors: &[Factor]) -> Joint {
    let ks: Vec<usize> = axes.iter().map(|a| a.k()).collect();
    let mut assignment = vec![0usize; ks.len()];
    let mut cells = Vec::new();
    'outer: loop {
        let mut w = 1.0;
        for f in factors {
            let mut index = 0;
            for id in &f.axes {
                let a = axes.iter().position(|x| &x.id == id).unwrap();
                index = index * ks[a] + assignment[a];
            }
            w *= f.weights[index];
        }
        cells.push((assignment.clone(), w));
        for a in (0..ks.len()).rev() {
            assignment[a] += 1;
            if assignment[a] < ks[a] {
                continue 'outer;
            }
            assignment[a] = 0;
        }
        break;
    }
    let total: f64 = cells.iter().map(|c| c.1).sum();
    for c in &mut cells {
        c.1 /= total;
    }
    Joint { ks, cells }
}

impl Joint {
    /// Distribution of `measured` given every `(axis, category)` in `fixed`.
    pub fn conditional(&self, fixed: &[(usize, usize)], measured: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.ks[measured]];
        for (assignment, p) in &self.cells {
            if fixed.iter().all(|&(a, c)| assignment[a] == c) {
                out[assignment[measured]] += p;
            }
        }
        let s: f64 = out.iter().sum();
        out.iter().map(|x| x / s).collect()
    }

    /// Sensitivity matrix of the unmodified prompt, by enumeration, with
    /// uniform ideals.
    pub fn sensitivity(&self, ordinal: bool) -> Vec<Vec<f64>> {
        let n = self.ks.len();
        let ideal = |k: usize| vec![1.0 / k as f64; k];
        (0..n)
            .map(|x| {
                (0..n)
                    .map(|y| {
                        let init = self.conditional(&[], y);
                        let mut mix = vec![0.0; self.ks[y]];
                        for c in 0..self.ks[x] {
                            for (m, v) in mix.iter_mut().zip(self.conditional(&[(x, c)], y)) {
                                *m += v / self.ks[x] as f64;
                            }
                        }
                        oracle_w_bar(&init, &ideal(self.ks[y]), ordinal) - oracle_w_bar(&mix, &ideal(self.ks[y]), ordinal)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Random positive factor weights: one unary factor per axis and one pair
/// factor between each consecutive pair.
pub fn random_factors(rng: &mut impl Rng, axes: &[BiasAxis], pair_strength: f64) -> Vec<Factor> {
    let mut factors: Vec<Factor> = axes
        .iter()
        .map(|a| Factor {
            axes: vec![a.id.clone()],
            weights: (0..a.k()).map(|_| 0.05 + rng.gen::<f64>()).collect(),
        })
        .collect();
    for pair in axes.windows(2) {
        factors.push(Factor {
            axes: vec![pair[0].id.clone(), pair[1].id.clone()],
            weights: (0..pair[0].k() * pair[1].k())
                .map(|_| (pair_strength * (rng.gen::<f64>() - 0.5)).exp())
                .collect(),
        });
    }
    factors
}

/// Least-squares fit `y = a + b x`; returns `R²`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
