#![allow(dead_code)]

use meco_core::rng::SeededRng;
use meco_core::{Answer, FirstToken, ScoredItem};
use nalgebra::{DMatrix, SymmetricEigen};

/// Leading eigenvector of the covariance of the mean-centered rows, and the
/// gap between the two largest eigenvalues relative to the largest.
pub fn dense_pca(rows: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let n = rows.len();
    let d = rows[0].len();
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let second = if d > 1 {
        eig.eigenvalues[order[1]]
    } else {
        0.0
    };
    let v: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
    let gap = if top > 0.0 { (top - second) / top } else { 0.0 };
    (v, gap)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Counting oracle: (accuracy, precision, recall, f1) with Yes positive.
/// Unparsed predictions count as wrong for accuracy and are left out of the
/// confusion counts.
pub fn brute_metrics(outcomes: &[(Option<Answer>, Answer)]) -> (f64, f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    let mut correct = 0.0;
    for (pred, label) in outcomes {
        if *pred == Some(*label) {
            correct += 1.0;
        }
        match (pred, label) {
            (Some(Answer::Yes), Answer::Yes) => tp += 1.0,
            (Some(Answer::Yes), Answer::No) => fp += 1.0,
            (Some(Answer::No), Answer::Yes) => fneg += 1.0,
            _ => {}
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fneg);
    let f1 = div(2.0 * precision * recall, precision + recall);
    (div(correct, outcomes.len() as f64), precision, recall, f1)
}

/// Correct verdicts of the dual-threshold rule written out directly.
pub fn dual_threshold_correct(items: &[ScoredItem], l_yes: f64, l_no: f64) -> usize {
    items
        .iter()
        .filter(|it| {
            let s = it.meta_score.unwrap();
            let verdict = match it.first_token {
                FirstToken::Yes if s >= l_yes => Answer::Yes,
                FirstToken::Yes => Answer::No,
                FirstToken::No if s <= l_no => Answer::No,
                FirstToken::No => Answer::Yes,
                FirstToken::Other(_) => return false,
            };
            verdict == it.label
        })
        .count()
}

pub fn naive_correct(items: &[ScoredItem]) -> usize {
    items
        .iter()
        .filter(|it| it.first_token.answer() == Some(it.label))
        .count()
}

/// Best accuracy over a `side x side` grid of threshold pairs spanning the
/// observed scores.
pub fn grid_best(items: &[ScoredItem], side: usize) -> (usize, f64, f64) {
    let scores: Vec<f64> = items.iter().filter_map(|i| i.meta_score).collect();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min) - 1e-3;
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-3;
    let at = |k: usize| lo + (hi - lo) * k as f64 / (side - 1) as f64;
    let mut best = (0, 0.0, 0.0);
    for a in 0..side {
        for b in 0..side {
            let c = dual_threshold_correct(items, at(a), at(b));
            if c > best.0 {
                best = (c, at(a), at(b));
            }
        }
    }
    best
}

/// Scored items with arbitrary tokens, scores and labels; about one in
/// twenty first tokens is neither Yes nor No.
pub fn random_scored(rng: &mut SeededRng, n: usize) -> Vec<ScoredItem> {
    let shift = rng.gaussian(0.0, 1.0);
    (0..n)
        .map(|i| {
            let u = rng.uniform();
            let first_token = if u < 0.05 {
                FirstToken::Other("Maybe".into())
            } else if u < 0.55 {
                FirstToken::Yes
            } else {
                FirstToken::No
            };
            let label = if rng.uniform() < 0.5 {
                Answer::Yes
            } else {
                Answer::No
            };
            let lean = if label == Answer::Yes { 0.5 } else { -0.5 };
            let score = if rng.uniform() < 0.1 {
                (rng.index(5) as f64) * 0.25
            } else {
                rng.gaussian(lean + shift, 1.0)
            };
            let p_yes = rng.uniform() * 0.9 + 0.01;
            ScoredItem {
                item_id: i as u64,
                first_token,
                meta_score: Some(score),
                p_yes,
                p_no: (1.0 - p_yes) * rng.uniform(),
                label,
            }
        })
        .collect()
}

pub fn random_rows(rng: &mut SeededRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let scales: Vec<f64> = (0..d).map(|_| 0.2 + 2.0 * rng.uniform()).collect();
    (0..n)
        .map(|_| scales.iter().map(|s| rng.gaussian(0.0, *s)).collect())
        .collect()
}
