//! Test-only oracles and random instance builders. Nothing here calls the
//! solver under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vat_scm::{MonthKey, Panel, PriceSeries, StudyDesign};

pub fn m(s: &str) -> MonthKey {
    s.parse().unwrap()
}

pub fn objective(cols: &[Vec<f64>], y: &[f64], w: &[f64]) -> f64 {
    (0..y.len())
        .map(|t| {
            let fit: f64 = cols.iter().zip(w).map(|(c, wj)| wj * c[t]).sum();
            (y[t] - fit).powi(2)
        })
        .sum()
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Finest grid resolution `n` (step `1/n`, at most 1/1000) whose simplex
/// lattice has at most `budget` points in dimension `j`.
pub fn grid_resolution(j: usize, budget: f64) -> u64 {
    (1..=1000u64)
        .rev()
        .find(|&n| binomial(n + j as u64 - 1, j as u64 - 1) <= budget)
        .unwrap_or(1)
}

/// Exhaustive search over the simplex lattice with step `1/n`.
pub fn grid_search(cols: &[Vec<f64>], y: &[f64], n: u64) -> (Vec<f64>, f64) {
    let j = cols.len();
    let t_len = y.len();
    let mut best = (vec![0.0; j], f64::INFINITY);
    let mut counts = vec![0u64; j];
    // residual kept incrementally along the recursion
    let mut resid = y.to_vec();
    #[allow(clippy::too_many_arguments)]
    fn rec(
        k: usize,
        left: u64,
        n: u64,
        cols: &[Vec<f64>],
        counts: &mut [u64],
        resid: &mut [f64],
        best: &mut (Vec<f64>, f64),
        t_len: usize,
    ) {
        let j = cols.len();
        if k == j - 1 {
            counts[k] = left;
            let w = left as f64 / n as f64;
            let f: f64 = (0..t_len).map(|t| (resid[t] - w * cols[k][t]).powi(2)).sum();
            if f < best.1 {
                best.1 = f;
                best.0 = counts.iter().map(|c| *c as f64 / n as f64).collect();
            }
            return;
        }
        for c in 0..=left {
            counts[k] = c;
            let w = c as f64 / n as f64;
            for t in 0..t_len {
                resid[t] -= w * cols[k][t];
            }
            rec(k + 1, left - c, n, cols, counts, resid, best, t_len);
            for t in 0..t_len {
                resid[t] += w * cols[k][t];
            }
        }
    }
    rec(0, n, n, cols, &mut counts, &mut resid, &mut best, t_len);
    best
}

/// Pairwise mass-transfer refinement: repeatedly moves weight between two
/// coordinates with an exact one-dimensional line search. Converges to the
/// global minimum of the convex problem from any feasible start.
pub fn pairwise_refine(cols: &[Vec<f64>], y: &[f64], start: &[f64]) -> (Vec<f64>, f64) {
    let j = cols.len();
    let mut w = start.to_vec();
    let mut r: Vec<f64> = (0..y.len())
        .map(|t| y[t] - cols.iter().zip(&w).map(|(c, wj)| wj * c[t]).sum::<f64>())
        .collect();
    for _sweep in 0..200_000 {
        let mut moved = 0.0f64;
        for a in 0..j {
            for b in 0..j {
                if a == b {
                    continue;
                }
                // w_a += d, w_b -= d with d in [-w_a, w_b]
                let dir: Vec<f64> = (0..y.len()).map(|t| cols[a][t] - cols[b][t]).collect();
                let dd: f64 = dir.iter().map(|x| x * x).sum();
                if dd == 0.0 {
                    continue;
                }
                let rd: f64 = r.iter().zip(&dir).map(|(x, y)| x * y).sum();
                let d = (rd / dd).clamp(-w[a], w[b]);
                if d == 0.0 {
                    continue;
                }
                w[a] += d;
                w[b] -= d;
                for t in 0..y.len() {
                    r[t] -= d * dir[t];
                }
                moved = moved.max(d.abs());
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    let f = objective(cols, y, &w);
    (w, f)
}

/// Grid search followed by pairwise refinement.
pub fn brute_force_minimum(cols: &[Vec<f64>], y: &[f64], budget: f64) -> (Vec<f64>, f64) {
    let n = grid_resolution(cols.len(), budget);
    let (w0, _) = grid_search(cols, y, n);
    pairwise_refine(cols, y, &w0)
}

/// Random small instance: donors are random walks around 100, the target is
/// either a noisy convex combination or an arbitrary walk.
pub fn random_instance(seed: u64, j: usize, t_len: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.3, 0.8).unwrap();
    let cols: Vec<Vec<f64>> = (0..j)
        .map(|_| {
            let mut v = 100.0 + rng.random_range(-5.0..5.0);
            (0..t_len)
                .map(|_| {
                    v += step.sample(&mut rng);
                    v
                })
                .collect()
        })
        .collect();
    let y = if rng.random_bool(0.5) {
        let raw: Vec<f64> = (0..j).map(|_| rng.random_range(0.0..1.0f64).powi(2)).collect();
        let s: f64 = raw.iter().sum();
        let noise = Normal::new(0.0, 0.4).unwrap();
        (0..t_len)
            .map(|t| cols.iter().zip(&raw).map(|(c, w)| w / s * c[t]).sum::<f64>() + noise.sample(&mut rng))
            .collect()
    } else {
        let mut v = 100.0 + rng.random_range(-6.0..6.0);
        (0..t_len)
            .map(|_| {
                v += step.sample(&mut rng);
                v
            })
            .collect()
    };
    (cols, y)
}

/// Wraps columns and a target into a panel with `pre` fitting months and
/// `post` extra months of the same values.
pub fn panel_from_columns(cols: &[Vec<f64>], y: &[f64], post: &[Vec<f64>], post_y: &[f64]) -> Panel {
    let start = m("2022-11");
    let pre_len = y.len() as i64;
    let total = pre_len + post_y.len() as i64;
    let design = StudyDesign::new(
        start,
        start.add_months(pre_len - 1),
        start.add_months(pre_len),
        start.add_months(total - 1),
    )
    .unwrap();
    let series = |id: String, pre: &[f64], post: &[f64]| {
        let vals: Vec<f64> = pre.iter().chain(post).copied().collect();
        PriceSeries::from_values(id.clone(), id, start, &vals).unwrap()
    };
    let treated = series("treated".into(), y, post_y);
    let donors = cols
        .iter()
        .zip(post)
        .enumerate()
        .map(|(i, (c, p))| series(format!("u{i:02}"), c, p))
        .collect();
    Panel::new(treated, donors, design).unwrap()
}

/// Writes `panel` as CSV into `dir` along with a config naming every donor,
/// and returns the config path.
pub fn write_fixture(dir: &std::path::Path, panel: &Panel, extra: &str) -> std::path::PathBuf {
    vat_scm::ingest::write_panel_file(dir.join("panel.csv"), panel).unwrap();
    let donors: Vec<String> = panel.donor_ids().iter().map(|d| format!("\"{d}\"")).collect();
    let text = format!(
        "treated_id = \"{}\"\ndonor_ids = [{}]\ndata = [\"panel.csv\"]\noutput_dir = \"out\"\n{extra}",
        panel.treated.id(),
        donors.join(", "),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}
