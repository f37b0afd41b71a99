//! Constrained patch selection for building a study set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub patch_id: String,
    pub slide_id: String,
    pub stain: String,
    /// Object count per grade.
    pub grade_counts: Vec<usize>,
}

impl PatchCandidate {
    pub fn total(&self) -> usize {
        self.grade_counts.iter().sum()
    }

    pub fn grades_covered(&self) -> usize {
        self.grade_counts.iter().filter(|c| **c > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSelectionConfig {
    pub target_patch_count: usize,
    /// Objects wanted per grade. `None` spreads `target_total_objects`
    /// evenly over the grades.
    pub grade_goal: Option<Vec<usize>>,
    pub min_patches_per_slide: usize,
    pub target_total_objects: usize,
}

impl Default for PatchSelectionConfig {
    fn default() -> Self {
        Self {
            target_patch_count: 20,
            grade_goal: None,
            min_patches_per_slide: 1,
            target_total_objects: 300,
        }
    }
}

/// Greedy selection maximizing marginal grade coverage.
///
/// Every step picks the feasible candidate with the largest gain toward
/// the per-grade goals, then the most grades covered, then the projected
/// total closest to `target_total_objects`, then the smallest patch id.
/// A candidate is feasible when the selection can still be completed with
/// every slide covered and stain counts differing by at most one.
pub fn select_patches(candidates: &[PatchCandidate], config: &PatchSelectionConfig) -> Result<Vec<PatchCandidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no patch candidates".into()));
    }
    let grades = candidates[0].grade_counts.len();
    if candidates.iter().any(|c| c.grade_counts.len() != grades) {
        return Err(Error::InvalidInput("candidates disagree on the number of grades".into()));
    }
    let ids: BTreeSet<&str> = candidates.iter().map(|c| c.patch_id.as_str()).collect();
    if ids.len() != candidates.len() {
        return Err(Error::InvalidInput("duplicate patch ids".into()));
    }
    let goal = match &config.grade_goal {
        Some(g) if g.len() == grades => g.clone(),
        Some(g) => {
            return Err(Error::InvalidInput(format!(
                "grade_goal has {} entries, candidates have {grades} grades",
                g.len()
            )))
        }
        None => vec![config.target_total_objects.div_ceil(grades.max(1)); grades],
    };
    let target = config.target_patch_count;
    if target > candidates.len() {
        return Err(Error::Infeasible(format!(
            "target_patch_count: {target} patches requested, {} candidates",
            candidates.len()
        )));
    }

    let problem = Problem::new(candidates, config);
    let mut chosen = vec![false; candidates.len()];
    if let Err(why) = problem.feasible(&chosen) {
        return Err(Error::Infeasible(why));
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|a, b| candidates[*a].patch_id.cmp(&candidates[*b].patch_id));
    let mut covered = vec![0usize; grades];
    let mut total = 0usize;
    for step in 0..target {
        let mut best: Option<(usize, (usize, usize, f64))> = None;
        let mut last_reason = String::new();
        for &i in &order {
            if chosen[i] {
                continue;
            }
            chosen[i] = true;
            let ok = problem.feasible(&chosen);
            chosen[i] = false;
            if let Err(why) = ok {
                last_reason = why;
                continue;
            }
            let c = &candidates[i];
            let gain: usize = (0..grades)
                .map(|g| (covered[g] + c.grade_counts[g]).min(goal[g]) - covered[g].min(goal[g]))
                .sum();
            let projected = (total + c.total()) as f64 * target as f64 / (step + 1) as f64;
            let distance = (projected - config.target_total_objects as f64).abs();
            let key = (gain, c.grades_covered(), distance);
            let better = match &best {
                None => true,
                Some((_, k)) => {
                    key.0 > k.0 || (key.0 == k.0 && (key.1 > k.1 || (key.1 == k.1 && key.2 < k.2)))
                }
            };
            if better {
                best = Some((i, key));
            }
        }
        let Some((i, _)) = best else {
            return Err(Error::Infeasible(last_reason));
        };
        chosen[i] = true;
        for (g, n) in candidates[i].grade_counts.iter().enumerate() {
            covered[g] += n;
        }
        total += candidates[i].total();
    }
    let mut out: Vec<PatchCandidate> = order
        .into_iter()
        .filter(|i| chosen[*i])
        .map(|i| candidates[i].clone())
        .collect();
    out.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
    Ok(out)
}

struct Problem<'a> {
    target: usize,
    min_per_slide: usize,
    slides: Vec<&'a str>,
    stains: Vec<&'a str>,
    slide_of: Vec<usize>,
    stain_of: Vec<usize>,
}

impl<'a> Problem<'a> {
    fn new(candidates: &'a [PatchCandidate], config: &PatchSelectionConfig) -> Self {
        let slides: Vec<&str> = candidates
            .iter()
            .map(|c| c.slide_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let stains: Vec<&str> = candidates
            .iter()
            .map(|c| c.stain.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let slide_of = candidates
            .iter()
            .map(|c| slides.binary_search(&c.slide_id.as_str()).unwrap())
            .collect();
        let stain_of = candidates
            .iter()
            .map(|c| stains.binary_search(&c.stain.as_str()).unwrap())
            .collect();
        Self {
            target: config.target_patch_count,
            min_per_slide: config.min_patches_per_slide,
            slides,
            stains,
            slide_of,
            stain_of,
        }
    }

    /// Whether `chosen` extends to a full selection meeting every hard
    /// constraint. The error names the first constraint that cannot hold.
    fn feasible(&self, chosen: &[bool]) -> std::result::Result<(), String> {
        let picked = chosen.iter().filter(|c| **c).count();
        if picked > self.target {
            return Err(format!("target_patch_count: more than {} patches", self.target));
        }
        let remaining = self.target - picked;
        let s = self.stains.len();

        let mut slide_count = vec![0usize; self.slides.len()];
        let mut stain_count = vec![0usize; s];
        // free[slide][stain]
        let mut free = vec![vec![0usize; s]; self.slides.len()];
        for (i, c) in chosen.iter().enumerate() {
            if *c {
                slide_count[self.slide_of[i]] += 1;
                stain_count[self.stain_of[i]] += 1;
            } else {
                free[self.slide_of[i]][self.stain_of[i]] += 1;
            }
        }
        let deficits: Vec<usize> = slide_count
            .iter()
            .map(|n| self.min_per_slide.saturating_sub(*n))
            .collect();
        let need: usize = deficits.iter().sum();
        if need > remaining {
            return Err(format!(
                "min_patches_per_slide: {need} slides still need a patch, {remaining} slots left"
            ));
        }
        for (slide, d) in deficits.iter().enumerate() {
            let avail: usize = free[slide].iter().sum();
            if *d > avail {
                return Err(format!(
                    "min_patches_per_slide: slide {} has only {} candidates left",
                    self.slides[slide], avail
                ));
            }
        }

        let low = self.target / s;
        let extra = self.target % s;
        let free_per_stain: Vec<usize> = (0..s).map(|k| free.iter().map(|r| r[k]).sum()).collect();
        let mut reason = String::from("stain balance: no stain split is reachable");
        // try each way of giving the `extra` slots to stains
        for mask in subsets(s, extra) {
            let quota: Vec<usize> = (0..s).map(|k| low + usize::from(mask[k])).collect();
            let mut ok = true;
            for k in 0..s {
                if stain_count[k] > quota[k] || quota[k] - stain_count[k] > free_per_stain[k] {
                    reason = format!(
                        "stain balance: stain {} cannot reach {} patches",
                        self.stains[k], quota[k]
                    );
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            let room: Vec<usize> = (0..s).map(|k| quota[k] - stain_count[k]).collect();
            if max_flow(&deficits, &free, &room) == need {
                return Ok(());
            }
            reason = "min_patches_per_slide: slide coverage conflicts with stain balance".into();
        }
        Err(reason)
    }
}

/// All boolean masks of length `n` with exactly `k` bits set.
fn subsets(n: usize, k: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    let mut cur = vec![false; n];
    fn rec(i: usize, k: usize, cur: &mut Vec<bool>, out: &mut Vec<Vec<bool>>) {
        if k == 0 {
            out.push(cur.clone());
            return;
        }
        if i == cur.len() || cur.len() - i < k {
            return;
        }
        cur[i] = true;
        rec(i + 1, k - 1, cur, out);
        cur[i] = false;
        rec(i + 1, k, cur, out);
    }
    rec(0, k, &mut cur, &mut out);
    out
}

/// Max flow source -> slide (deficit) -> stain (free candidates) -> sink
/// (room), by augmenting paths.
fn max_flow(deficits: &[usize], free: &[Vec<usize>], room: &[usize]) -> usize {
    let n_slides = deficits.len();
    let n_stains = room.len();
    let n = n_slides + n_stains + 2;
    let (src, sink) = (n - 2, n - 1);
    let mut cap = vec![vec![0usize; n]; n];
    for (i, d) in deficits.iter().enumerate() {
        cap[src][i] = *d;
        for k in 0..n_stains {
            cap[i][n_slides + k] = free[i][k];
        }
    }
    for (k, r) in room.iter().enumerate() {
        cap[n_slides + k][sink] = *r;
    }
    let mut flow = 0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[src] = src;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && cap[u][v] > 0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[sink] == usize::MAX {
            return flow;
        }
        let mut push = usize::MAX;
        let mut v = sink;
        while v != src {
            push = push.min(cap[prev[v]][v]);
            v = prev[v];
        }
        let mut v = sink;
        while v != src {
            cap[prev[v]][v] -= push;
            cap[v][prev[v]] += push;
            v = prev[v];
        }
        flow += push;
    }
}

/// Checks a selection against the hard constraints.
pub fn check_selection(selected: &[PatchCandidate], all: &[PatchCandidate], config: &PatchSelectionConfig) -> Result<()> {
    if selected.len() != config.target_patch_count {
        return Err(Error::Infeasible(format!(
            "target_patch_count: {} selected, {} requested",
            selected.len(),
            config.target_patch_count
        )));
    }
    let mut per_slide: BTreeMap<&str, usize> = all.iter().map(|c| (c.slide_id.as_str(), 0)).collect();
    let mut per_stain: BTreeMap<&str, usize> = all.iter().map(|c| (c.stain.as_str(), 0)).collect();
    for c in selected {
        *per_slide.entry(&c.slide_id).or_default() += 1;
        *per_stain.entry(&c.stain).or_default() += 1;
    }
    if let Some((slide, _)) = per_slide.iter().find(|(_, n)| **n < config.min_patches_per_slide) {
        return Err(Error::Infeasible(format!("min_patches_per_slide: slide {slide} not covered")));
    }
    let lo = per_stain.values().min().copied().unwrap_or(0);
    let hi = per_stain.values().max().copied().unwrap_or(0);
    if hi - lo > 1 {
        return Err(Error::Infeasible(format!("stain balance: counts range {lo}..{hi}")));
    }
    Ok(())
}

/// Reads `patch_id,slide_id,stain,g0..gk` rows.
pub fn read_candidates_csv(path: impl AsRef<Path>) -> Result<Vec<PatchCandidate>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.len() < 4 || headers.iter().take(3).ne(["patch_id", "slide_id", "stain"]) {
        return Err(Error::Schema {
            pointer: "line 1".into(),
            message: "header must be patch_id,slide_id,stain,g0..gk".into(),
        });
    }
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let grade_counts = (3..record.len())
            .map(|i| {
                record[i].trim().parse::<usize>().map_err(|_| Error::Schema {
                    pointer: format!("line {}", row + 2),
                    message: format!("column {:?} is not a count", &headers[i]),
                })
            })
            .collect::<Result<_>>()?;
        out.push(PatchCandidate {
            patch_id: record[0].to_string(),
            slide_id: record[1].to_string(),
            stain: record[2].to_string(),
            grade_counts,
        });
    }
    Ok(out)
}

pub fn write_candidates_csv(path: impl AsRef<Path>, patches: &[PatchCandidate]) -> Result<()> {
    let path = path.as_ref();
    let grades = patches.iter().map(|p| p.grade_counts.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patch_id".to_string(), "slide_id".into(), "stain".into()];
    header.extend((0..grades).map(|g| format!("g{g}")));
    w.write_record(&header)?;
    for p in patches {
        let mut row = vec![p.patch_id.clone(), p.slide_id.clone(), p.stain.clone()];
        row.extend((0..grades).map(|g| p.grade_counts.get(g).copied().unwrap_or(0).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, slide: &str, stain: &str, counts: &[usize]) -> PatchCandidate {
        PatchCandidate {
            patch_id: id.into(),
            slide_id: slide.into(),
            stain: stain.into(),
            grade_counts: counts.to_vec(),
        }
    }

    fn grid(slides: usize, per_slide: usize) -> Vec<PatchCandidate> {
        let mut out = Vec::new();
        for s in 0..slides {
            let stain = if s % 2 == 0 { "prussian" } else { "turnbull" };
            for p in 0..per_slide {
                let mut counts = vec![0; 5];
                counts[(s + p) % 5] = 3 + p;
                counts[(s + 2 * p) % 5] += 2;
                out.push(cand(&format!("s{s}p{p:02}"), &format!("slide{s}"), stain, &counts));
            }
        }
        out
    }

    #[test]
    fn every_slide_and_balanced_stains() {
        let all = grid(6, 8);
        let config = PatchSelectionConfig::default();
        let picked = select_patches(&all, &config).unwrap();
        assert_eq!(picked.len(), 20);
        check_selection(&picked, &all, &config).unwrap();
        let prussian = picked.iter().filter(|c| c.stain == "prussian").count();
        assert_eq!(prussian, 10);
    }

    #[test]
    fn full_coverage_candidate_goes_first() {
        let all = vec![
            cand("a", "s1", "x", &[5, 0, 0]),
            cand("b", "s1", "x", &[0, 5, 0]),
            cand("c", "s1", "x", &[2, 2, 2]),
        ];
        let config = PatchSelectionConfig {
            target_patch_count: 1,
            grade_goal: Some(vec![2, 2, 2]),
            min_patches_per_slide: 1,
            target_total_objects: 6,
        };
        assert_eq!(select_patches(&all, &config).unwrap()[0].patch_id, "c");
    }

    #[test]
    fn infeasible_stain_is_named() {
        let mut all = grid(2, 10);
        for c in all.iter_mut().filter(|c| c.stain == "turnbull").skip(3) {
            c.stain = "prussian".into();
        }
        let err = select_patches(&all, &PatchSelectionConfig::default()).unwrap_err();
        assert!(err.to_string().contains("stain balance"), "{err}");
    }

    #[test]
    fn too_few_slots_for_slides() {
        let all = grid(6, 3);
        let config = PatchSelectionConfig {
            target_patch_count: 5,
            ..Default::default()
        };
        let err = select_patches(&all, &config).unwrap_err();
        assert!(err.to_string().contains("min_patches_per_slide"), "{err}");
    }

    #[test]
    fn flow_counts_deficits() {
        assert_eq!(max_flow(&[1, 1], &[vec![1, 0], vec![1, 0]], &[1, 5]), 1);
        assert_eq!(max_flow(&[1, 1], &[vec![1, 0], vec![1, 1]], &[1, 5]), 2);
    }
}
