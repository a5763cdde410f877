//! Server-side aggregation rules.
//!
//! Each parameter (one item embedding, or one flattened tower tensor) is
//! aggregated on its own list of contributions. Robust rules produce one
//! representative vector which is multiplied by the contribution count, so
//! every rule keeps the step scale of plain summation.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::model::{GradientUpdate, Mlp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    Sum,
    NormBound,
    Median,
    TrimmedMean,
    Krum,
    MultiKrum,
    Bulyan,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Sum => "sum",
            AggregatorKind::NormBound => "norm_bound",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::Krum => "krum",
            AggregatorKind::MultiKrum => "multi_krum",
            AggregatorKind::Bulyan => "bulyan",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        [
            AggregatorKind::Sum,
            AggregatorKind::NormBound,
            AggregatorKind::Median,
            AggregatorKind::TrimmedMean,
            AggregatorKind::Krum,
            AggregatorKind::MultiKrum,
            AggregatorKind::Bulyan,
        ]
        .into_iter()
        .find(|k| k.name() == s || k.name().replace('_', "") == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    /// L2 bound τ applied to each contribution by `norm_bound`.
    pub norm_bound: f64,
    /// Estimated Byzantine share. Per parameter, `f = ceil(fraction · n)`.
    pub byzantine_fraction: f64,
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        AggregatorSpec {
            kind: AggregatorKind::Sum,
            norm_bound: 1.0,
            byzantine_fraction: 0.05,
        }
    }
}

/// Counters collected while aggregating one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AggregationStats {
    pub parameters: usize,
    /// Parameters where a Krum-family rule had too few contributions and
    /// fell back to summation.
    pub fallbacks: usize,
}

pub fn sum(contribs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; contribs[0].len()];
    for c in contribs {
        for (o, x) in out.iter_mut().zip(c.iter()) {
            *o += x;
        }
    }
    out
}

fn mean(contribs: &[&[f64]]) -> Vec<f64> {
    let n = contribs.len() as f64;
    sum(contribs).into_iter().map(|v| v / n).collect()
}

fn column(contribs: &[&[f64]], d: usize) -> Vec<f64> {
    let mut col: Vec<f64> = contribs.iter().map(|c| c[d]).collect();
    col.sort_by(f64::total_cmp);
    col
}

/// Coordinate-wise median; even counts take the midpoint of the middle pair.
pub fn median(contribs: &[&[f64]]) -> Vec<f64> {
    let n = contribs.len();
    (0..contribs[0].len())
        .map(|d| {
            let col = column(contribs, d);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect()
}

/// Coordinate-wise mean after dropping the `f` largest and `f` smallest values.
pub fn trimmed_mean(contribs: &[&[f64]], f: usize) -> Vec<f64> {
    let n = contribs.len();
    assert!(2 * f < n, "cannot trim {f} from each side of {n} values");
    (0..contribs[0].len())
        .map(|d| {
            let col = column(contribs, d);
            let kept = &col[f..n - f];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: sum of squared distances to the `n − f − 2` nearest peers.
pub fn krum_scores(contribs: &[&[f64]], f: usize) -> Vec<f64> {
    let n = contribs.len();
    let neighbours = n.saturating_sub(f + 2).max(1).min(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .filter(|&k| k != i)
                .map(|k| squared_distance(contribs[i], contribs[k]))
                .collect();
            dists.sort_by(f64::total_cmp);
            dists[..neighbours].iter().sum()
        })
        .collect()
}

fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

/// Whether Krum-family rules are defined for `n` contributions and `f` faults.
pub fn krum_applicable(n: usize, f: usize) -> bool {
    2 * f < n && n >= f + 3
}

/// Index of the contribution Krum selects (score ties → smaller index).
pub fn krum_select(contribs: &[&[f64]], f: usize) -> usize {
    argmin(&krum_scores(contribs, f))
}

/// Indices chosen by repeatedly applying Krum to the remaining contributions
/// until `n − 2f` have been picked, in selection order.
pub fn multi_krum_select(contribs: &[&[f64]], f: usize) -> Vec<usize> {
    let keep = contribs.len() - 2 * f;
    let mut remaining: Vec<usize> = (0..contribs.len()).collect();
    let mut chosen = Vec::with_capacity(keep);
    while chosen.len() < keep {
        let subset: Vec<&[f64]> = remaining.iter().map(|&i| contribs[i]).collect();
        let pick = if subset.len() == 1 {
            0
        } else {
            krum_select(&subset, f)
        };
        chosen.push(remaining.remove(pick));
    }
    chosen
}

pub fn multi_krum(contribs: &[&[f64]], f: usize) -> Vec<f64> {
    let chosen: Vec<&[f64]> = multi_krum_select(contribs, f)
        .into_iter()
        .map(|i| contribs[i])
        .collect();
    mean(&chosen)
}

/// Multi-Krum selection followed by a coordinate-wise trimmed mean.
pub fn bulyan(contribs: &[&[f64]], f: usize) -> Vec<f64> {
    let chosen: Vec<&[f64]> = multi_krum_select(contribs, f)
        .into_iter()
        .map(|i| contribs[i])
        .collect();
    let trim = f.min((chosen.len() - 1) / 2);
    trimmed_mean(&chosen, trim)
}

pub fn clip_to_norm(v: &[f64], bound: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= bound || norm == 0.0 {
        v.to_vec()
    } else {
        let s = bound / norm;
        v.iter().map(|x| x * s).collect()
    }
}

impl AggregatorSpec {
    fn faults(&self, n: usize) -> usize {
        (self.byzantine_fraction * n as f64).ceil() as usize
    }

    /// Aggregates one parameter's contribution list. Returns the combined
    /// gradient and whether a Krum-family rule fell back to summation.
    pub fn combine(&self, contribs: &[&[f64]]) -> (Vec<f64>, bool) {
        assert!(!contribs.is_empty(), "no contributions to aggregate");
        let n = contribs.len();
        let scaled = |v: Vec<f64>| v.into_iter().map(|x| x * n as f64).collect::<Vec<f64>>();
        match self.kind {
            AggregatorKind::Sum => (sum(contribs), false),
            AggregatorKind::NormBound => {
                let clipped: Vec<Vec<f64>> = contribs
                    .iter()
                    .map(|c| clip_to_norm(c, self.norm_bound))
                    .collect();
                let refs: Vec<&[f64]> = clipped.iter().map(Vec::as_slice).collect();
                (sum(&refs), false)
            }
            AggregatorKind::Median => (scaled(median(contribs)), false),
            AggregatorKind::TrimmedMean => {
                let f = self.faults(n).min((n - 1) / 2);
                (scaled(trimmed_mean(contribs, f)), false)
            }
            AggregatorKind::Krum | AggregatorKind::MultiKrum | AggregatorKind::Bulyan => {
                let f = self.faults(n);
                if !krum_applicable(n, f) {
                    debug!("{} undefined for n={n}, f={f}; summing", self.kind.name());
                    return (sum(contribs), true);
                }
                let rep = match self.kind {
                    AggregatorKind::Krum => contribs[krum_select(contribs, f)].to_vec(),
                    AggregatorKind::MultiKrum => multi_krum(contribs, f),
                    _ => bulyan(contribs, f),
                };
                (scaled(rep), false)
            }
        }
    }

    /// Aggregates canonically ordered client uploads into one update.
    pub fn aggregate(&self, uploads: &[&GradientUpdate]) -> (GradientUpdate, AggregationStats) {
        let mut stats = AggregationStats::default();
        let mut per_item: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for up in uploads {
            for (&j, g) in &up.items {
                per_item.entry(j).or_default().push(g);
            }
        }
        let mut items = BTreeMap::new();
        for (j, contribs) in per_item {
            let (g, fell_back) = self.combine(&contribs);
            stats.parameters += 1;
            stats.fallbacks += usize::from(fell_back);
            items.insert(j, g);
        }

        let towers: Vec<&Mlp> = uploads.iter().filter_map(|u| u.mlp.as_ref()).collect();
        let mlp = towers.first().map(|first| {
            let mut out = first.zeros_like();
            let per_client: Vec<Vec<(String, &[f64])>> =
                towers.iter().map(|t| t.tensors()).collect();
            for (t, dst) in out.tensors_mut().into_iter().enumerate() {
                let contribs: Vec<&[f64]> = per_client.iter().map(|c| c[t].1).collect();
                let (g, fell_back) = self.combine(&contribs);
                stats.parameters += 1;
                stats.fallbacks += usize::from(fell_back);
                *dst = g;
            }
            out
        });
        (GradientUpdate { items, mlp }, stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&refs(&rows(&[1.0, 2.0, 100.0]))), vec![2.0]);
        assert_eq!(median(&refs(&rows(&[4.0, 1.0, 2.0, 100.0]))), vec![3.0]);
    }

    #[test]
    fn trimmed_mean_example() {
        assert_eq!(
            trimmed_mean(&refs(&rows(&[1.0, 2.0, 3.0, 100.0])), 1),
            vec![2.5]
        );
    }

    #[test]
    fn krum_picks_the_cluster() {
        let data = rows(&[0.0, 0.0, 0.0, 10.0]);
        assert_eq!(krum_scores(&refs(&data), 1), vec![0.0, 0.0, 0.0, 100.0]);
        assert_eq!(krum_select(&refs(&data), 1), 0);
    }

    #[test]
    fn unanimous_contributions_match_sum() {
        let g = vec![0.5, -1.5, 2.0];
        let data = vec![g.clone(); 9];
        let r = refs(&data);
        let expected = sum(&r);
        for kind in [
            AggregatorKind::Sum,
            AggregatorKind::Median,
            AggregatorKind::TrimmedMean,
            AggregatorKind::Krum,
            AggregatorKind::MultiKrum,
            AggregatorKind::Bulyan,
        ] {
            let spec = AggregatorSpec {
                kind,
                byzantine_fraction: 0.2,
                ..AggregatorSpec::default()
            };
            let (out, fell_back) = spec.combine(&r);
            assert!(!fell_back, "{kind:?}");
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn singleton_is_identity_for_every_kind() {
        let g = vec![0.3, -0.4];
        for kind in [
            AggregatorKind::Sum,
            AggregatorKind::NormBound,
            AggregatorKind::Median,
            AggregatorKind::TrimmedMean,
            AggregatorKind::Krum,
            AggregatorKind::MultiKrum,
            AggregatorKind::Bulyan,
        ] {
            let spec = AggregatorSpec {
                kind,
                ..AggregatorSpec::default()
            };
            let (out, fell_back) = spec.combine(&[&g]);
            assert_eq!(out, g, "{kind:?}");
            assert_eq!(
                fell_back,
                matches!(
                    kind,
                    AggregatorKind::Krum | AggregatorKind::MultiKrum | AggregatorKind::Bulyan
                )
            );
        }
    }

    #[test]
    fn norm_bound_clips_each_contribution() {
        let a = vec![3.0, 4.0];
        let b = vec![0.3, 0.4];
        let spec = AggregatorSpec {
            kind: AggregatorKind::NormBound,
            norm_bound: 1.0,
            ..AggregatorSpec::default()
        };
        let (out, _) = spec.combine(&[&a, &b]);
        assert!((out[0] - 0.9).abs() < 1e-12 && (out[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn aggregate_groups_by_item() {
        let mut a = GradientUpdate::default();
        a.items.insert(1, vec![1.0]);
        a.items.insert(2, vec![5.0]);
        let mut b = GradientUpdate::default();
        b.items.insert(1, vec![3.0]);
        let spec = AggregatorSpec::default();
        let (out, stats) = spec.aggregate(&[&a, &b]);
        assert_eq!(out.items[&1], vec![4.0]);
        assert_eq!(out.items[&2], vec![5.0]);
        assert_eq!(stats.parameters, 2);
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            AggregatorKind::parse("trimmed_mean"),
            Some(AggregatorKind::TrimmedMean)
        );
        assert_eq!(
            AggregatorKind::parse("multikrum"),
            Some(AggregatorKind::MultiKrum)
        );
        assert_eq!(
            AggregatorKind::parse("multi-krum"),
            Some(AggregatorKind::MultiKrum)
        );
        assert_eq!(AggregatorKind::parse("avg"), None);
    }
}
