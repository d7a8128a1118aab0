//! Clustering evaluation: Hungarian-matched class-averaged accuracy, NMI,
//! macro-F1, ARI and the head/medium/tail breakdown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};

/// Minimum-cost assignment on a square integer matrix. Returns the row to
/// column assignment together with dual potentials `u, v` satisfying
/// `u_i + v_j <= cost_ij`, with equality on the assignment.
fn hungarian_min(cost: &[Vec<i64>]) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual start column
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Re-routes `row` to `col` inside the tight-edge graph if the remaining
/// unfixed rows can still be perfectly matched, updating the matching.
fn reroute(
    tight: &[Vec<bool>],
    row_of: &mut [usize],
    col_of: &mut [usize],
    fixed: &[bool],
    row: usize,
    col: usize,
) -> bool {
    let n = tight.len();
    let target = col_of[row];
    let start = row_of[col];
    // DFS for an alternating path from `start` to the column `row` gives up
    let mut seen = vec![false; n];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n]; // col -> (prev col, row)
    let mut stack = vec![(start, col)];
    seen[col] = true;
    let mut found = false;
    while let Some((r, via)) = stack.pop() {
        for c in 0..n {
            if !tight[r][c] || seen[c] {
                continue;
            }
            let owner = row_of[c];
            if c != target && (fixed[owner] || owner == row) {
                continue;
            }
            seen[c] = true;
            parent[c] = Some((via, r));
            if c == target {
                found = true;
                break;
            }
            stack.push((owner, c));
        }
        if found {
            break;
        }
    }
    if !found {
        return false;
    }
    let mut c = target;
    while let Some((prev, r)) = parent[c] {
        row_of[c] = r;
        col_of[r] = c;
        c = prev;
        if c == col {
            break;
        }
    }
    row_of[col] = row;
    col_of[row] = col;
    true
}

/// Optimal cluster-to-class mapping maximizing matched counts.
///
/// `confusion[c][t]` counts samples in predicted cluster `c` with true class
/// `t`. Non-square input is zero-padded. Among all optimal mappings the
/// lexicographically smallest (as a vector indexed by cluster) is returned.
pub fn hungarian_match(confusion: &[Vec<u64>]) -> Vec<usize> {
    let rows = confusion.len();
    let cols = confusion.iter().map(Vec::len).max().unwrap_or(0);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| confusion.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
    let max = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| at(i, j))
        .max()
        .unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| (0..n).map(|j| max - at(i, j) as i64).collect())
        .collect();
    let (assign, u, v) = hungarian_min(&cost);
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| u[i] + v[j] == cost[i][j]).collect())
        .collect();
    let mut col_of = assign;
    let mut row_of = vec![0; n];
    for (i, &j) in col_of.iter().enumerate() {
        row_of[j] = i;
    }
    let mut fixed = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if !tight[i][j] || fixed[row_of[j]] {
                continue;
            }
            if col_of[i] == j || reroute(&tight, &mut row_of, &mut col_of, &fixed, i, j) {
                break;
            }
        }
        fixed[i] = true;
    }
    col_of
}

fn check_labels(predicted: &[usize], truth: &[usize]) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(dim_err(format!(
            "{} predictions for {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(arg_err("labels must be non-empty"));
    }
    Ok(())
}

/// Predicted clusters, true classes, and the optimal mapping between them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    /// `mapping[cluster] = class`, padded to a bijection.
    pub mapping: Vec<usize>,
}

impl LabelAssignment {
    pub fn new(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        check_labels(predicted, truth)?;
        let n = predicted.iter().chain(truth).max().map_or(0, |m| m + 1);
        let mut confusion = vec![vec![0u64; n]; n];
        for (&p, &t) in predicted.iter().zip(truth) {
            confusion[p][t] += 1;
        }
        Ok(Self {
            predicted: predicted.to_vec(),
            truth: truth.to_vec(),
            mapping: hungarian_match(&confusion),
        })
    }

    /// Predictions translated to class ids.
    pub fn mapped(&self) -> Vec<usize> {
        self.predicted.iter().map(|&p| self.mapping[p]).collect()
    }

    fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &t in &self.truth {
            *m.entry(t).or_insert(0) += 1;
        }
        m
    }

    /// Within-class accuracy for every class present in the truth.
    pub fn per_class_accuracy(&self) -> BTreeMap<usize, f64> {
        let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
        for (m, &t) in self.mapped().into_iter().zip(&self.truth) {
            if m == t {
                *hits.entry(t).or_insert(0) += 1;
            }
        }
        self.class_counts()
            .into_iter()
            .map(|(c, n)| (c, hits.get(&c).copied().unwrap_or(0) as f64 / n as f64))
            .collect()
    }
}

/// Mean over true classes of within-class accuracy.
pub fn class_averaged_acc(a: &LabelAssignment) -> f64 {
    let per = a.per_class_accuracy();
    per.values().sum::<f64>() / per.len() as f64
}

/// Per-class F1 under the optimal mapping, averaged over true classes.
pub fn macro_f1(a: &LabelAssignment) -> f64 {
    let mapped = a.mapped();
    let counts = a.class_counts();
    let mut predicted: BTreeMap<usize, usize> = BTreeMap::new();
    let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
    for (&m, &t) in mapped.iter().zip(&a.truth) {
        *predicted.entry(m).or_insert(0) += 1;
        if m == t {
            *tp.entry(t).or_insert(0) += 1;
        }
    }
    let f1: f64 = counts
        .iter()
        .map(|(c, &n)| {
            let hit = tp.get(c).copied().unwrap_or(0) as f64;
            let pc = predicted.get(c).copied().unwrap_or(0) as f64;
            if hit == 0.0 {
                return 0.0;
            }
            let (p, r) = (hit / pc, hit / n as f64);
            2.0 * p * r / (p + r)
        })
        .sum();
    f1 / counts.len() as f64
}

fn contingency(predicted: &[usize], truth: &[usize]) -> BTreeMap<(usize, usize), usize> {
    let mut m = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *m.entry((p, t)).or_insert(0) += 1;
    }
    m
}

fn marginal(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

fn label_entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    -counts
        .values()
        .map(|&c| c as f64 / n)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `2 I(Y; C) / (H(Y) + H(C))`; two constant labelings score 1.
pub fn nmi(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_labels(predicted, truth)?;
    let n = truth.len() as f64;
    let (pm, tm) = (marginal(predicted), marginal(truth));
    let mi: f64 = contingency(predicted, truth)
        .iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            c / n * (n * c / (pm[&p] as f64 * tm[&t] as f64)).ln()
        })
        .sum();
    let h = label_entropy(&pm, n) + label_entropy(&tm, n);
    Ok(if h == 0.0 { 1.0 } else { (2.0 * mi / h).clamp(0.0, 1.0) })
}

fn pairs(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index; identical trivial labelings score 1.
pub fn ari(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_labels(predicted, truth)?;
    let index: f64 = contingency(predicted, truth).values().map(|&c| pairs(c)).sum();
    let a: f64 = marginal(predicted).values().map(|&c| pairs(c)).sum();
    let b: f64 = marginal(truth).values().map(|&c| pairs(c)).sum();
    let expected = a * b / pairs(truth.len()).max(f64::MIN_POSITIVE);
    let max = 0.5 * (a + b);
    Ok(if max == expected { 1.0 } else { (index - expected) / (max - expected) })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HmtSplit {
    pub head: Vec<usize>,
    pub medium: Vec<usize>,
    pub tail: Vec<usize>,
}

/// Classes by size, largest first (ties by index): the first and last
/// `floor(0.3 K)` are head and tail, the rest medium.
pub fn hmt_split(class_counts: &[usize]) -> HmtSplit {
    let k = class_counts.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
    let h = 3 * k / 10;
    HmtSplit {
        head: order[..h].to_vec(),
        medium: order[h..k - h].to_vec(),
        tail: order[k - h..].to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScores {
    pub acc: f64,
    pub nmi: f64,
    pub f1: f64,
    pub ari: f64,
    /// Mean class accuracy per group; `None` for an empty group.
    pub head_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub tail_acc: Option<f64>,
}

/// All metrics at once. Classes are `0..n_classes`; the head/medium/tail
/// split is taken from the class sizes in `truth`.
pub fn evaluate(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<ClusteringScores> {
    let a = LabelAssignment::new(predicted, truth)?;
    if let Some(&t) = truth.iter().find(|&&t| t >= n_classes) {
        return Err(arg_err(format!("class {t} outside 0..{n_classes}")));
    }
    let mut counts = vec![0; n_classes];
    for &t in truth {
        counts[t] += 1;
    }
    let split = hmt_split(&counts);
    let per = a.per_class_accuracy();
    let group = |g: &[usize]| {
        let v: Vec<f64> = g.iter().filter_map(|c| per.get(c)).copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(ClusteringScores {
        acc: class_averaged_acc(&a),
        nmi: nmi(predicted, truth)?,
        f1: macro_f1(&a),
        ari: ari(predicted, truth)?,
        head_acc: group(&split.head),
        medium_acc: group(&split.medium),
        tail_acc: group(&split.tail),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(c: &[Vec<u64>]) -> (u64, Vec<usize>) {
        fn rec(c: &[Vec<u64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (u64, Vec<usize>)) {
            let n = c.len();
            if row == n {
                let s: u64 = cur.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
                if s > best.0 || (s == best.0 && *cur < best.1) {
                    *best = (s, cur.clone());
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(c, row + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (0, vec![usize::MAX]);
        rec(c, 0, &mut vec![false; c.len()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn identity_and_reversal() {
        let d = vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]];
        assert_eq!(hungarian_match(&d), vec![0, 1, 2]);
        let a = vec![vec![0, 0, 4], vec![0, 2, 0], vec![9, 0, 0]];
        assert_eq!(hungarian_match(&a), vec![2, 1, 0]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        assert_eq!(hungarian_match(&[vec![1, 1], vec![1, 1]]), vec![0, 1]);
        let c = vec![vec![0, 2, 2], vec![2, 0, 2], vec![2, 2, 0]];
        // optimal mappings: (1,2,0) and (2,0,1)
        assert_eq!(hungarian_match(&c), vec![1, 2, 0]);
        assert_eq!(hungarian_match(&vec![vec![0; 4]; 4]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..=6);
            let c: Vec<Vec<u64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0..5)).collect()).collect();
            let got = hungarian_match(&c);
            let (best, lex) = brute_force(&c);
            let s: u64 = got.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
            assert_eq!(s, best, "{c:?}");
            assert_eq!(got, lex, "{c:?}");
        }
    }

    #[test]
    fn padding_for_rectangular_confusion() {
        let m = hungarian_match(&[vec![0, 3, 1], vec![4, 0, 0]]);
        assert_eq!(m, vec![1, 0, 2]);
    }

    #[test]
    fn accuracy_is_class_averaged() {
        let truth: Vec<usize> = [vec![0; 90], vec![1; 10]].concat();
        let pred = vec![0; 100];
        let a = LabelAssignment::new(&pred, &truth).unwrap();
        assert_eq!(class_averaged_acc(&a), 0.5);
        let permuted = [2, 2, 0, 0, 1, 1];
        let a = LabelAssignment::new(&permuted, &[0, 0, 1, 1, 2, 2]).unwrap();
        assert_eq!(class_averaged_acc(&a), 1.0);
        assert_eq!(macro_f1(&a), 1.0);
        let a = LabelAssignment::new(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(class_averaged_acc(&a), 0.5);
    }

    #[test]
    fn nmi_and_ari_edge_cases() {
        let t = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&[1, 1, 2, 2, 0, 0], &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0; 6], &t).unwrap(), 0.0);
        assert!((ari(&[5, 5, 3, 3, 4, 4], &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ari(&[0; 4], &[0; 4]).unwrap(), 1.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn crafted_counts() {
        let pred = [0, 0, 1, 1, 1, 2, 2, 0];
        let truth = [0, 0, 0, 1, 1, 1, 2, 2];
        // contingency: (0,0)=2 (0,2)=1 (1,0)=1 (1,1)=2 (2,1)=1 (2,2)=1
        // pairs: index 1+1=2, a = 3+3+1 = 7, b = 3+3+1 = 7, C(8,2) = 28
        let want = (2.0 - 49.0 / 28.0) / (7.0 - 49.0 / 28.0);
        assert!((ari(&pred, &truth).unwrap() - want).abs() < 1e-12);
        let a = LabelAssignment::new(&pred, &truth).unwrap();
        assert_eq!(a.mapping, vec![0, 1, 2]);
        // per class: tp 2, 2, 1; predicted 3, 3, 2; true 3, 3, 2
        let f = |tp: f64, p: f64, t: f64| 2.0 * (tp / p) * (tp / t) / (tp / p + tp / t);
        let want = (f(2.0, 3.0, 3.0) + f(2.0, 3.0, 3.0) + f(1.0, 2.0, 2.0)) / 3.0;
        assert!((macro_f1(&a) - want).abs() < 1e-12);
    }

    #[test]
    fn hmt() {
        let s = hmt_split(&[5, 50, 10, 40, 20, 30, 1, 2, 3, 4]);
        assert_eq!(s.head, vec![1, 3, 5]);
        assert_eq!(s.medium, vec![4, 2, 0, 9]);
        assert_eq!(s.tail, vec![8, 7, 6]);
        let one = hmt_split(&[7]);
        assert!(one.head.is_empty() && one.tail.is_empty());
        assert_eq!(one.medium, vec![0]);
        let eq = hmt_split(&[4; 4]);
        assert_eq!((eq.head, eq.medium, eq.tail), (vec![0], vec![1, 2], vec![3]));
    }

    #[test]
    fn scores_bundle() {
        let truth = [0, 0, 0, 1, 1, 2];
        let s = evaluate(&[2, 2, 2, 0, 0, 1], &truth, 3).unwrap();
        assert_eq!((s.acc, s.f1), (1.0, 1.0));
        assert_eq!(s.head_acc, None);
        assert_eq!(s.medium_acc, Some(1.0));
        assert!(evaluate(&[0], &[3], 3).is_err());
    }
}
