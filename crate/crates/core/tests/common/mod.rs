//! Independent oracles shared by the integration and acceptance tests.
//!
//! Everything here works from the definitions rather than from the
//! library's algorithms: matching is exhaustive search, clustering is
//! recomputed from scratch each round with exact integer IoU, and the
//! loss is evaluated in log-sum-exp form straight from its formula.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use annoconsensus::model::{AnnotationRecord, BoundingBox, ModeKind, Provenance, TaskKind};
use rand::Rng;

/// Integer box `[x0, y0, x1, y1)`.
pub type IBox = [i64; 4];

pub fn to_box(b: IBox) -> BoundingBox {
    BoundingBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).unwrap()
}

/// Exact IoU as `(intersection, union)`.
pub fn iou_exact(a: IBox, b: IBox) -> (i64, i64) {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = w * h;
    let area = |x: IBox| (x[2] - x[0]) * (x[3] - x[1]);
    (inter, area(a) + area(b) - inter)
}

/// Compares two exact ratios.
pub fn cmp_ratio(a: (i64, i64), b: (i64, i64)) -> Ordering {
    (a.0 as i128 * b.1 as i128).cmp(&(b.0 as i128 * a.1 as i128))
}

/// `IoU >= num/den` in exact arithmetic.
pub fn at_least(r: (i64, i64), num: i64, den: i64) -> bool {
    r.0 > 0 && (r.0 as i128) * (den as i128) >= (num as i128) * (r.1 as i128)
}

pub fn random_box(rng: &mut impl Rng, extent: i64, max_side: i64) -> IBox {
    let x0 = rng.random_range(0..extent);
    let y0 = rng.random_range(0..extent);
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    [x0, y0, x0 + w, y0 + h]
}

/// A box near one of a few shared objects, so overlaps and exact IoU
/// ties are common.
pub fn jittered_box(rng: &mut impl Rng, bases: &[IBox], jitter: i64) -> IBox {
    let b = bases[rng.random_range(0..bases.len())];
    let mut d = || rng.random_range(-jitter..=jitter);
    let x0 = b[0] + d();
    let y0 = b[1] + d();
    let x1 = (b[2] + d()).max(x0 + 1);
    let y1 = (b[3] + d()).max(y0 + 1);
    [x0, y0, x1, y1]
}

pub fn random_bases(rng: &mut impl Rng, count: usize) -> Vec<IBox> {
    (0..count)
        .map(|_| {
            let x = rng.random_range(5..30);
            let y = rng.random_range(5..30);
            let side = rng.random_range(4..9);
            [x, y, x + side, y + side]
        })
        .collect()
}

pub fn record(id: &str, annotator: &str, b: IBox, label: &str) -> AnnotationRecord {
    AnnotationRecord {
        id: id.to_string(),
        image_id: "img".to_string(),
        annotator_id: annotator.to_string(),
        mode: ModeKind::Unaided,
        bbox: to_box(b),
        label: label.to_string(),
        provenance: Provenance::Human,
    }
}

/// Exhaustive matching oracle. Among all one-to-one matchings using pairs
/// with IoU at or above `num/den`, returns the one whose edges, each
/// sorted best-first by (IoU desc, candidate id asc, reference id asc),
/// form the lexicographically greatest sequence; a longer sequence beats
/// its own prefix.
pub fn brute_force_match(
    cands: &[(String, IBox)],
    refs: &[(String, IBox)],
    num: i64,
    den: i64,
) -> BTreeSet<(String, String)> {
    let edge_better = |a: &(usize, usize), b: &(usize, usize)| -> Ordering {
        let ia = iou_exact(cands[a.0].1, refs[a.1].1);
        let ib = iou_exact(cands[b.0].1, refs[b.1].1);
        cmp_ratio(ia, ib)
            .then_with(|| cands[b.0].0.cmp(&cands[a.0].0))
            .then_with(|| refs[b.1].0.cmp(&refs[a.1].0))
    };
    let seq_cmp = |a: &[(usize, usize)], b: &[(usize, usize)]| -> Ordering {
        for (x, y) in a.iter().zip(b) {
            match edge_better(x, y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        a.len().cmp(&b.len())
    };

    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut current: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; refs.len()];
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn walk(
        i: usize,
        cands: &[(String, IBox)],
        refs: &[(String, IBox)],
        num: i64,
        den: i64,
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        visit: &mut dyn FnMut(&[(usize, usize)]),
    ) {
        if i == cands.len() {
            visit(current);
            return;
        }
        walk(i + 1, cands, refs, num, den, used, current, visit);
        for r in 0..refs.len() {
            if !used[r] && at_least(iou_exact(cands[i].1, refs[r].1), num, den) {
                used[r] = true;
                current.push((i, r));
                walk(i + 1, cands, refs, num, den, used, current, visit);
                current.pop();
                used[r] = false;
            }
        }
    }
    let mut visit = |m: &[(usize, usize)]| {
        let mut sorted = m.to_vec();
        sorted.sort_by(|a, b| edge_better(b, a));
        if seq_cmp(&sorted, &best) == Ordering::Greater {
            best = sorted;
        }
    };
    walk(0, cands, refs, num, den, &mut used, &mut current, &mut visit);
    best.into_iter()
        .map(|(c, r)| (cands[c].0.clone(), refs[r].0.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCluster {
    pub members: Vec<String>,
    pub votes: usize,
    pub histogram: BTreeMap<String, usize>,
    pub label: String,
    /// Twice the coordinate-wise median, exact.
    pub twice_median: [i64; 4],
}

pub struct OracleAnnotation {
    pub id: String,
    pub annotator: String,
    pub bbox: IBox,
    pub label: String,
}

/// Set-based NMS recomputed from scratch every round.
pub fn oracle_clusters(anns: &[OracleAnnotation], num: i64, den: i64, task: TaskKind) -> Vec<OracleCluster> {
    let mut pool: BTreeSet<usize> = (0..anns.len()).collect();
    let peers = |i: usize, pool: &BTreeSet<usize>| -> Vec<usize> {
        pool.iter()
            .copied()
            .filter(|&j| j != i && at_least(iou_exact(anns[i].bbox, anns[j].bbox), num, den))
            .collect()
    };
    let mut out = Vec::new();
    while !pool.is_empty() {
        let seed = *pool
            .iter()
            .max_by(|&&a, &&b| {
                peers(a, &pool)
                    .len()
                    .cmp(&peers(b, &pool).len())
                    .then_with(|| anns[b].id.cmp(&anns[a].id))
            })
            .unwrap();
        let mut members = peers(seed, &pool);
        members.push(seed);
        for m in &members {
            pool.remove(m);
        }

        // per annotator: the seed itself, else the member with the highest
        // exact IoU to the seed, ties to the smaller id
        let mut chosen: BTreeMap<&str, usize> = BTreeMap::new();
        for &m in &members {
            let a = anns[m].annotator.as_str();
            let better = match chosen.get(a) {
                None => true,
                Some(&c) if c == seed => false,
                Some(_) if m == seed => true,
                Some(&c) => match cmp_ratio(
                    iou_exact(anns[m].bbox, anns[seed].bbox),
                    iou_exact(anns[c].bbox, anns[seed].bbox),
                ) {
                    Ordering::Greater => true,
                    Ordering::Equal => anns[m].id < anns[c].id,
                    Ordering::Less => false,
                },
            };
            if better {
                chosen.insert(a, m);
            }
        }
        let mut histogram = BTreeMap::new();
        for m in chosen.values() {
            *histogram.entry(anns[*m].label.clone()).or_insert(0) += 1;
        }
        let top = *histogram.values().max().unwrap();
        let label = task
            .label_space()
            .iter()
            .find(|l| histogram.get(**l) == Some(&top))
            .map(|l| l.to_string())
            .unwrap();

        let mut twice_median = [0; 4];
        for (k, t) in twice_median.iter_mut().enumerate() {
            let mut v: Vec<i64> = members.iter().map(|&m| anns[m].bbox[k]).collect();
            v.sort();
            let n = v.len();
            *t = if n % 2 == 1 { 2 * v[n / 2] } else { v[n / 2 - 1] + v[n / 2] };
        }
        let mut ids: Vec<String> = members.iter().map(|&m| anns[m].id.clone()).collect();
        ids.sort();
        out.push(OracleCluster {
            members: ids,
            votes: chosen.len(),
            histogram,
            label,
            twice_median,
        });
    }
    out
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Vote-weighted cross entropy from logits, straight from the definition:
/// `-(alpha / n) * sum_i w_i * [y log p + (1 - y) log(1 - p)]` with
/// `w_i = (v_i - v_min) / (v_max - v_min)`, or 1 when all votes agree.
pub fn reference_votes_loss(logits: &[f64], labels: &[u8], votes: &[u32], alpha: f64) -> f64 {
    let lo = *votes.iter().min().unwrap() as f64;
    let hi = *votes.iter().max().unwrap() as f64;
    let n = logits.len() as f64;
    let mut sum = 0.0;
    for ((z, y), v) in logits.iter().zip(labels).zip(votes) {
        let w = if hi == lo { 1.0 } else { (*v as f64 - lo) / (hi - lo) };
        // -log p = softplus(-z), -log(1 - p) = softplus(z)
        let ce = if *y == 1 { softplus(-z) } else { softplus(*z) };
        sum += w * ce;
    }
    alpha * sum / n
}

/// Central finite difference of `f` at `theta`.
pub fn finite_difference(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = t[i];
            t[i] = orig + h;
            let up = f(&t);
            t[i] = orig - h;
            let down = f(&t);
            t[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A random batch; with `uniform_votes` every sample gets the same vote
/// count.
pub fn random_batch(
    rng: &mut impl Rng,
    n: usize,
    dim: usize,
    uniform_votes: bool,
    alpha: f64,
) -> annoconsensus::loss::VoteWeightedBatch {
    let features = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let v0 = rng.random_range(1..=10);
    let votes = (0..n)
        .map(|_| if uniform_votes { v0 } else { rng.random_range(1..=10) })
        .collect();
    annoconsensus::loss::VoteWeightedBatch::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        features,
        labels,
        votes,
    )
    .unwrap()
    .with_alpha(alpha)
    .unwrap()
}

/// Mean binary cross entropy of probabilities, from the definition.
pub fn reference_mean_bce(labels: &[u8], p: &[f64]) -> f64 {
    let sum: f64 = labels
        .iter()
        .zip(p)
        .map(|(y, p)| if *y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    sum / labels.len() as f64
}

/// Worst elementwise relative error, with differences below `floor`
/// in magnitude measured absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
