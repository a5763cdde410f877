//! Brute-force re-implementations of the robust aggregators.
//!
//! Contributions are small integers so every sum, mean and midpoint is
//! exact in f64 and comparisons can be bitwise.
#![allow(dead_code)]

use fedrec_poison::defense::aggregate::AggregatorKind;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Median by repeatedly stripping the current min and max.
pub fn oracle_median(contribs: &[Vec<f64>]) -> Vec<f64> {
    let dim = contribs[0].len();
    (0..dim)
        .map(|d| {
            let mut col: Vec<f64> = contribs.iter().map(|c| c[d]).collect();
            while col.len() > 2 {
                let (imax, _) =
                    col.iter()
                        .enumerate()
                        .fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
                col.remove(imax);
                let (imin, _) =
                    col.iter()
                        .enumerate()
                        .fold((0, f64::MAX), |b, (i, &x)| if x < b.1 { (i, x) } else { b });
                col.remove(imin);
            }
            if col.len() == 1 {
                col[0]
            } else {
                0.5 * (col[0] + col[1])
            }
        })
        .collect()
}

pub fn oracle_trimmed(contribs: &[Vec<f64>], f: usize) -> Vec<f64> {
    let dim = contribs[0].len();
    (0..dim)
        .map(|d| {
            let mut col: Vec<f64> = contribs.iter().map(|c| c[d]).collect();
            for _ in 0..f {
                let imax = (0..col.len())
                    .max_by(|&a, &b| col[a].total_cmp(&col[b]))
                    .unwrap();
                col.remove(imax);
                let imin = (0..col.len())
                    .min_by(|&a, &b| col[a].total_cmp(&col[b]))
                    .unwrap();
                col.remove(imin);
            }
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// All `k`-subsets of `items`.
pub fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut out = subsets(&items[1..], k - 1);
    out.iter_mut().for_each(|s| s.insert(0, items[0]));
    out.extend(subsets(&items[1..], k));
    out
}

/// Krum score: minimum over every choice of `n − f − 2` peers of the summed
/// squared distances. Once Multi-Krum has shrunk the pool below `f + 3`,
/// the single nearest peer is used.
pub fn oracle_krum_scores(contribs: &[&[f64]], f: usize) -> Vec<f64> {
    let n = contribs.len();
    let k = if n >= f + 3 { n - f - 2 } else { 1 };
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            subsets(&others, k)
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|&j| sq_dist(contribs[i], contribs[j]))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn oracle_krum(contribs: &[&[f64]], f: usize) -> usize {
    let scores = oracle_krum_scores(contribs, f);
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    scores.iter().position(|&s| s == best).unwrap()
}

pub fn oracle_multi_krum_select(contribs: &[Vec<f64>], f: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..contribs.len()).collect();
    let mut chosen = Vec::new();
    while chosen.len() < contribs.len() - 2 * f {
        let pick = if remaining.len() == 1 {
            0
        } else {
            let subset: Vec<&[f64]> = remaining.iter().map(|&i| contribs[i].as_slice()).collect();
            oracle_krum(&subset, f)
        };
        chosen.push(remaining.remove(pick));
    }
    chosen
}

pub fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    (0..dim)
        .map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64)
        .collect()
}

pub fn oracle_combine(kind: AggregatorKind, frac: f64, contribs: &[Vec<f64>]) -> Vec<f64> {
    let n = contribs.len();
    let f = (frac * n as f64).ceil() as usize;
    let total: Vec<f64> = (0..contribs[0].len())
        .map(|d| contribs.iter().map(|c| c[d]).sum())
        .collect();
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x * n as f64).collect::<Vec<f64>>();
    match kind {
        AggregatorKind::Median => scale(oracle_median(contribs)),
        AggregatorKind::TrimmedMean => scale(oracle_trimmed(contribs, f.min((n - 1) / 2))),
        AggregatorKind::Krum | AggregatorKind::MultiKrum | AggregatorKind::Bulyan => {
            if 2 * f >= n || n < f + 3 {
                return total;
            }
            let rep = match kind {
                AggregatorKind::Krum => contribs[oracle_krum(&refs(contribs), f)].clone(),
                AggregatorKind::MultiKrum => {
                    let chosen: Vec<Vec<f64>> = oracle_multi_krum_select(contribs, f)
                        .into_iter()
                        .map(|i| contribs[i].clone())
                        .collect();
                    mean_of(&chosen)
                }
                _ => {
                    let chosen: Vec<Vec<f64>> = oracle_multi_krum_select(contribs, f)
                        .into_iter()
                        .map(|i| contribs[i].clone())
                        .collect();
                    let trim = f.min((chosen.len() - 1) / 2);
                    oracle_trimmed(&chosen, trim)
                }
            };
            scale(rep)
        }
        _ => unreachable!(),
    }
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=8);
    let dim = rng.random_range(1..=4);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-6..=6) as f64).collect())
        .collect()
}
