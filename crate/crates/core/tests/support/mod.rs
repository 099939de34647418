//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cckd::features::{Cohort, Split, StructuredEncoder};
use cckd::synthdata::{generate_cohort, split_cohort, SynthConfig};

/// Generated and split cohort.
pub fn cohort(cfg: &SynthConfig) -> Cohort {
    let mut s = generate_cohort(cfg).expect("valid synthetic config");
    split_cohort(&mut s.cohort, 0.8, cfg.seed).expect("splittable cohort");
    s.cohort
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counted ½.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, n×n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).max(1e-300).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// L2-regularized logistic regression (penalty `ridge/2·‖w‖²`, intercept
/// unpenalized) fitted by Newton's method on column-standardized inputs.
/// Returns test-set decision values.
pub fn logistic_oracle(train_x: &[Vec<f64>], train_y: &[u8], test_x: &[Vec<f64>], ridge: f64) -> Vec<f64> {
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let prep = |r: &Vec<f64>| -> Vec<f64> {
        let mut z: Vec<f64> = r.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect();
        z.push(1.0);
        z
    };
    let xs: Vec<Vec<f64>> = train_x.iter().map(prep).collect();
    let p = d + 1;
    let mut w = vec![0.0; p];
    for _ in 0..50 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        for (x, &y) in xs.iter().zip(train_y) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-z).exp());
            let r = mu - f64::from(y);
            let s = mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += r * x[a];
                let sa = s * x[a];
                for b in 0..=a {
                    hess[a * p + b] += sa * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[b * p + a] = hess[a * p + b];
            }
        }
        for a in 0..d {
            grad[a] += ridge * w[a];
            hess[a * p + a] += ridge;
        }
        hess[d * p + d] += 1e-9;
        let step = cholesky_solve(&hess, &grad, p);
        let mut max_step = 0.0_f64;
        for (wi, si) in w.iter_mut().zip(&step) {
            *wi -= si;
            max_step = max_step.max(si.abs());
        }
        if max_step < 1e-10 {
            break;
        }
    }
    test_x
        .iter()
        .map(|r| prep(r).iter().zip(&w).map(|(a, b)| a * b).sum())
        .collect()
}

pub struct OracleAurocs {
    pub note: f64,
    pub structured: f64,
}

/// Test-split AUROC of the logistic oracle on each modality.
pub fn oracle_aurocs(c: &Cohort) -> OracleAurocs {
    let train = c.split(Split::Train);
    let test = c.split(Split::Test);
    let y_train: Vec<u8> = train.iter().map(|r| r.label).collect();
    let y_test: Vec<u8> = test.iter().map(|r| r.label).collect();
    let notes = |rs: &[&cckd::features::PatientRecord]| -> Vec<Vec<f64>> {
        rs.iter().map(|r| r.note_emb.clone().expect("note embedding")).collect()
    };
    let enc = StructuredEncoder::fit(c).unwrap();
    let structured = |rs: &[&cckd::features::PatientRecord]| -> Vec<Vec<f64>> {
        rs.iter().map(|r| enc.encode(r, &c.table).unwrap()).collect()
    };
    let note_scores = logistic_oracle(&notes(&train), &y_train, &notes(&test), 1.0);
    let struct_scores = logistic_oracle(&structured(&train), &y_train, &structured(&test), 1.0);
    OracleAurocs {
        note: pairwise_auroc(&note_scores, &y_test),
        structured: pairwise_auroc(&struct_scores, &y_test),
    }
}
