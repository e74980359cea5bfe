//! Bipartite matching: the Hungarian solver, its brute-force oracle, and the
//! cost matrices for detection, link-triplet, and paired-query assignment.

use serde::{Deserialize, Serialize};

use crate::boxes::{generalized_iou, BBox};
use crate::config::{CostForm, DetectionWeights};
use crate::error::{Error, Result};
use crate::linker::{cosine_sim, LinkPredictions};
use crate::tensor::Tensor;
use crate::vild::DetectionSet;

/// Square cost matrix; rows are (padded) ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::contract(format!(
                "cost matrix must be square: {} entries for n = {n}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("cost matrix has non-finite entries"));
        }
        Ok(CostMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("cost matrix must be square"));
        }
        Self::new(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum of selected entries, accumulated in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().fold(0.0, |acc, (i, &j)| acc + self.get(i, j))
    }

    fn tolerance(&self) -> f64 {
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        1e-9 * (1.0 + scale) * self.n.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `perm[i]` is the prediction matched to ground-truth row `i`.
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

/// Optimal assignment (shortest augmenting paths with potentials), then
/// the lexicographically smallest optimal permutation among ties.
pub fn hungarian(cost: &CostMatrix) -> Result<AssignmentResult> {
    let n = cost.n;
    if n == 0 {
        return Ok(AssignmentResult {
            perm: vec![],
            total_cost: 0.0,
        });
    }
    // 1-indexed potentials; p[j] = row matched to column j.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }

    // Every optimal assignment uses only zero-reduced-cost edges.
    let tol = cost.tolerance();
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (cost.get(i, j) - u[i + 1] - v[j + 1]).abs() <= tol)
                .collect()
        })
        .collect();
    let perm = lexicographic_smallest(&tight, row_to_col);
    Ok(AssignmentResult {
        total_cost: cost.total(&perm),
        perm,
    })
}

/// Greedily lowers each row's column, keeping earlier rows fixed, as long as
/// the remaining rows can still be perfectly matched over `tight` edges.
fn lexicographic_smallest(tight: &[Vec<usize>], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = row_to_col.len();
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        for &j in &tight[i] {
            if j >= row_to_col[i] {
                break;
            }
            // Give column j to row i; its owner r (> i) must reach the
            // column row i frees up through an alternating path.
            let freed = row_to_col[i];
            let r = col_to_row[j];
            if r < i {
                continue;
            }
            let mut visited = vec![false; n];
            let mut path = Vec::new();
            if augment(tight, &row_to_col, &col_to_row, r, freed, i, j, &mut visited, &mut path) {
                // path holds (row, new column) moves.
                for &(row, col) in &path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
    row_to_col
}

#[allow(clippy::too_many_arguments)]
fn augment(
    tight: &[Vec<usize>],
    row_to_col: &[usize],
    col_to_row: &[usize],
    row: usize,
    target: usize,
    fixed_upto: usize,
    taken: usize,
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for &c in &tight[row] {
        if c == taken || visited[c] {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let owner = col_to_row[c];
        if owner <= fixed_upto || owner == row {
            continue;
        }
        if augment(tight, row_to_col, col_to_row, owner, target, fixed_upto, taken, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}

/// Exhaustive minimum over all `n!` permutations, visited in lexicographic
/// order (the first of several tied optima wins). Limited to `n <= 9`.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<AssignmentResult> {
    let n = cost.n;
    if n > 9 {
        return Err(Error::contract(format!("brute force limited to n <= 9, got {n}")));
    }
    let tol = cost.tolerance();
    let mut best = AssignmentResult {
        perm: (0..n).collect(),
        total_cost: f64::INFINITY,
    };
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(
        cost: &CostMatrix,
        row: usize,
        acc: f64,
        perm: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut AssignmentResult,
        tol: f64,
    ) {
        let n = cost.n;
        if row == n {
            if acc < best.total_cost - tol || best.total_cost == f64::INFINITY {
                best.total_cost = acc;
                best.perm = perm.clone();
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                rec(cost, row + 1, acc + cost.get(row, j), perm, used, best, tol);
                perm.pop();
                used[j] = false;
            }
        }
    }
    if n == 0 {
        best.total_cost = 0.0;
        return Ok(best);
    }
    rec(cost, 0, 0.0, &mut perm, &mut used, &mut best, tol);
    Ok(best)
}

/// Detection cost per (ground truth, prediction):
/// `-w_cls * score + w_l1 * L1 + w_giou * (1 - GIoU)`. Ground-truth rows past
/// `gts.len()` are zero padding.
pub fn detection_match_cost(preds: &DetectionSet, gts: &[BBox], w: DetectionWeights) -> Result<CostMatrix> {
    let n = preds.boxes.len();
    if gts.len() > n {
        return Err(Error::contract(format!(
            "{} ground-truth boxes exceed {n} detection slots",
            gts.len()
        )));
    }
    let mut data = vec![0.0; n * n];
    for (i, gt) in gts.iter().enumerate() {
        for j in 0..n {
            data[i * n + j] = detection_pair_cost(*gt, preds.boxes[j], preds.scores[j], w);
        }
    }
    CostMatrix::new(n, data)
}

pub fn detection_pair_cost(gt: BBox, pred: BBox, score: f64, w: DetectionWeights) -> f64 {
    -w.cls * score + w.l1 * gt.l1(pred) + w.giou * (1.0 - generalized_iou(gt, pred))
}

/// Ground-truth link target: slots into the dustbin-extended embeddings
/// (slot `N` is the dustbin), and whether the row is a real lesion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthTriplet {
    pub e_c: usize,
    pub e_m: usize,
    pub a: bool,
}

/// A labelled lesion: its box index in each view, `None` where it is not
/// visible.
pub type PairLabel = (Option<usize>, Option<usize>);

/// Converts cross-view box pairs into slot triplets through the per-view
/// detection assignments, padded with `a = 0` rows up to `m`.
pub fn gt_to_triplets(
    assign_c: &AssignmentResult,
    assign_m: &AssignmentResult,
    pairs: &[PairLabel],
    num_slots: usize,
    m: usize,
) -> Result<Vec<GroundTruthTriplet>> {
    if pairs.len() > m {
        return Err(Error::contract(format!(
            "{} ground-truth pairs exceed {m} link queries",
            pairs.len()
        )));
    }
    let slot = |assign: &AssignmentResult, g: Option<usize>| -> Result<usize> {
        match g {
            None => Ok(num_slots),
            Some(g) => assign
                .perm
                .get(g)
                .copied()
                .ok_or_else(|| Error::contract(format!("lesion {g} has no detection assignment"))),
        }
    };
    let mut out = Vec::with_capacity(m);
    for &(gc, gm) in pairs {
        if gc.is_none() && gm.is_none() {
            return Err(Error::contract("pair references no box"));
        }
        out.push(GroundTruthTriplet {
            e_c: slot(assign_c, gc)?,
            e_m: slot(assign_m, gm)?,
            a: true,
        });
    }
    out.resize(
        m,
        GroundTruthTriplet {
            e_c: num_slots,
            e_m: num_slots,
            a: false,
        },
    );
    Ok(out)
}

/// Embedding-similarity term, shifted by one to stay non-negative.
pub fn embedding_cost(e_c: &[f64], e_m: &[f64], v_c: &[f64], v_m: &[f64], beta: f64) -> f64 {
    beta * cosine_sim(e_c, v_c) + (1.0 - beta) * cosine_sim(e_m, v_m) + 1.0
}

/// Link matching cost between ground-truth triplets and predicted link
/// triplets.
pub fn link_match_cost(
    gts: &[GroundTruthTriplet],
    preds: &LinkPredictions,
    ext_c: &Tensor,
    ext_m: &Tensor,
    alpha: f64,
    beta: f64,
    form: CostForm,
) -> Result<CostMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config("beta", "must lie in [0, 1]"));
    }
    let m = preds.scores.len();
    if gts.len() != m {
        return Err(Error::contract(format!(
            "{} ground-truth triplets for {m} link queries",
            gts.len()
        )));
    }
    let mut data = vec![0.0; m * m];
    for (i, y) in gts.iter().enumerate() {
        if !y.a {
            continue;
        }
        for j in 0..m {
            let emd = embedding_cost(
                ext_c.row(y.e_c),
                ext_m.row(y.e_m),
                preds.v_c.row(j),
                preds.v_m.row(j),
                beta,
            );
            let s = preds.scores[j];
            data[i * m + j] = match form {
                CostForm::Mul => -emd.max(1e-9).powf(alpha) * s.powf(1.0 - alpha),
                CostForm::Add => -(alpha * emd + (1.0 - alpha) * s),
            };
        }
    }
    CostMatrix::new(m, data)
}

/// One paired query's prediction: a box and a lesion probability per view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedPrediction {
    pub box_c: BBox,
    pub box_m: BBox,
    pub score_c: f64,
    pub score_m: f64,
}

/// A ground-truth lesion for the paired-query variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTarget {
    pub box_c: Option<BBox>,
    pub box_m: Option<BBox>,
}

/// Paired-query cost: the larger of the two per-view detection costs. A
/// view where the lesion is absent costs `-w_cls * (1 - score)` there.
pub fn plq_match_cost(preds: &[PairedPrediction], gts: &[PairedTarget], w: DetectionWeights) -> Result<CostMatrix> {
    let n = preds.len();
    if gts.len() > n {
        return Err(Error::contract(format!("{} lesions exceed {n} paired queries", gts.len())));
    }
    let view_cost = |gt: Option<BBox>, pred: BBox, score: f64| match gt {
        Some(b) => detection_pair_cost(b, pred, score, w),
        None => -w.cls * (1.0 - score),
    };
    let mut data = vec![0.0; n * n];
    for (i, gt) in gts.iter().enumerate() {
        if gt.box_c.is_none() && gt.box_m.is_none() {
            return Err(Error::contract("paired target with no box"));
        }
        for (j, p) in preds.iter().enumerate() {
            let cc = view_cost(gt.box_c, p.box_c, p.score_c);
            let mlo = view_cost(gt.box_m, p.box_m, p.score_m);
            data[i * n + j] = cc.max(mlo);
        }
    }
    CostMatrix::new(n, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::View;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cost(n: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
        CostMatrix::new(n, (0..n * n).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn hungarian_small_cases() {
        let one = CostMatrix::new(1, vec![3.5]).unwrap();
        assert_eq!(hungarian(&one).unwrap().perm, vec![0]);
        assert_eq!(brute_force_assign(&one).unwrap().perm, vec![0]);

        let c = CostMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let r = hungarian(&c).unwrap();
        assert_eq!(r.perm, vec![0, 1, 2]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn all_equal_costs_give_identity() {
        let c = CostMatrix::new(4, vec![2.5; 16]).unwrap();
        for r in [hungarian(&c).unwrap(), brute_force_assign(&c).unwrap()] {
            assert_eq!(r.perm, vec![0, 1, 2, 3]);
            assert_eq!(r.total_cost, 10.0);
        }
    }

    #[test]
    fn ties_resolve_to_lexicographically_smallest() {
        // Two zero-cost optima, [1,2,0] and [2,0,1].
        let c = CostMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let h = hungarian(&c).unwrap();
        assert_eq!(h, brute_force_assign(&c).unwrap());
        assert_eq!(h.perm, vec![1, 2, 0]);

        let c = CostMatrix::new(2, vec![0.0; 4]).unwrap();
        assert_eq!(hungarian(&c).unwrap().perm, vec![0, 1]);
    }

    #[test]
    fn hungarian_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let n = rng.gen_range(1..=7);
            let c = random_cost(n, &mut rng);
            let h = hungarian(&c).unwrap();
            let b = brute_force_assign(&c).unwrap();
            assert_eq!(h.total_cost, b.total_cost);
            assert_eq!(h.perm, b.perm);
        }
    }

    #[test]
    fn hungarian_with_integer_ties_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.gen_range(2..=6);
            let c = CostMatrix::new(n, (0..n * n).map(|_| rng.gen_range(0..3) as f64).collect()).unwrap();
            assert_eq!(hungarian(&c).unwrap(), brute_force_assign(&c).unwrap());
        }
    }

    #[test]
    fn contract_errors() {
        assert!(CostMatrix::new(2, vec![0.0; 3]).is_err());
        assert!(CostMatrix::new(1, vec![f64::NAN]).is_err());
        assert!(brute_force_assign(&CostMatrix::new(10, vec![0.0; 100]).unwrap()).is_err());
    }

    #[test]
    fn padding_rows_do_not_change_real_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.gen_range(2..=7);
            let k = rng.gen_range(1..=n);
            let mut c = random_cost(n, &mut rng);
            for v in c.data.iter_mut().skip(k * n) {
                *v = 0.0;
            }
            let full = hungarian(&c).unwrap();
            // Real rows alone against all columns: enumerate injective maps.
            let mut best = (f64::INFINITY, vec![]);
            let mut cur = vec![];
            fn rec(c: &CostMatrix, k: usize, cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
                if cur.len() == k {
                    if acc < best.0 - 1e-12 {
                        *best = (acc, cur.clone());
                    }
                    return;
                }
                for j in 0..c.n() {
                    if !cur.contains(&j) {
                        let i = cur.len();
                        cur.push(j);
                        rec(c, k, cur, acc + c.get(i, j), best);
                        cur.pop();
                    }
                }
            }
            rec(&c, k, &mut cur, 0.0, &mut best);
            assert_eq!(&full.perm[..k], &best.1[..]);
        }
    }

    fn det_set(boxes: Vec<BBox>, scores: Vec<f64>) -> DetectionSet {
        let n = boxes.len();
        DetectionSet {
            boxes,
            scores,
            embeddings: Tensor::zeros(&[n, 2]),
            view: View::Cc,
        }
    }

    #[test]
    fn detection_cost_examples() {
        let w = DetectionWeights::default();
        let b = BBox::new(0.3, 0.4, 0.1, 0.2);
        let preds = det_set(vec![b, BBox::new(0.6, 0.5, 0.2, 0.2)], vec![1.0, 0.25]);
        let c = detection_match_cost(&preds, &[b], w).unwrap();
        assert!((c.get(0, 0) + w.cls).abs() < 1e-12);
        assert_eq!(c.get(1, 0), 0.0);
        assert_eq!(c.get(1, 1), 0.0);

        // Hand-computed: L1 = 0.3 + 0.1 + 0.1 + 0 = 0.5; boxes disjoint horizontally
        // ([0.25,0.35] vs [0.5,0.7]); enclosing 0.45 × 0.3 = 0.135, union 0.02 + 0.04.
        let giou = 0.0 - (0.135 - 0.06) / 0.135;
        let want = -2.0 * 0.25 + 5.0 * 0.5 + 2.0 * (1.0 - giou);
        assert!((c.get(0, 1) - want).abs() < 1e-12);
        assert!(detection_match_cost(&det_set(vec![b], vec![0.5]), &[b, b], w).is_err());
    }

    #[test]
    fn triplet_conversion() {
        let ident = AssignmentResult {
            perm: vec![0, 1, 2, 3],
            total_cost: 0.0,
        };
        let t = gt_to_triplets(&ident, &ident, &[(Some(0), Some(0))], 4, 3).unwrap();
        assert_eq!(t[0], GroundTruthTriplet { e_c: 0, e_m: 0, a: true });
        assert!(t[1..].iter().all(|y| !y.a));

        let shuffled = AssignmentResult {
            perm: vec![2, 0, 3, 1],
            total_cost: 0.0,
        };
        let t = gt_to_triplets(&shuffled, &ident, &[(Some(1), None), (None, Some(2))], 4, 3).unwrap();
        assert_eq!(t[0], GroundTruthTriplet { e_c: 0, e_m: 4, a: true });
        assert_eq!(t[1], GroundTruthTriplet { e_c: 4, e_m: 2, a: true });

        let empty = gt_to_triplets(&ident, &ident, &[], 4, 3).unwrap();
        assert_eq!(empty.len(), 3);
        assert!(empty.iter().all(|y| !y.a));

        assert!(gt_to_triplets(&ident, &ident, &[(Some(9), None)], 4, 3).is_err());
        assert!(gt_to_triplets(&ident, &ident, &[(Some(0), None); 4], 4, 3).is_err());
    }

    fn link_fixture() -> (Tensor, Tensor, LinkPredictions) {
        let ext = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let preds = LinkPredictions {
            v_c: Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, -1.0]]).unwrap(),
            v_m: Tensor::from_rows(&[vec![3.0, 0.0], vec![1.0, 1.0]]).unwrap(),
            scores: vec![1.0, 0.5],
        };
        (ext.clone(), ext, preds)
    }

    #[test]
    fn link_cost_examples() {
        let (ec, em, preds) = link_fixture();
        let gts = [
            GroundTruthTriplet { e_c: 0, e_m: 0, a: true },
            GroundTruthTriplet { e_c: 2, e_m: 2, a: false },
        ];
        let c = link_match_cost(&gts, &preds, &ec, &em, 0.5, 0.5, CostForm::Mul).unwrap();
        assert!((c.get(0, 0) + 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(c.get(1, 0), 0.0);
        assert_eq!(c.get(1, 1), 0.0);

        let c1 = link_match_cost(&gts, &preds, &ec, &em, 1.0, 0.5, CostForm::Mul).unwrap();
        let emd = embedding_cost(ec.row(0), em.row(0), preds.v_c.row(1), preds.v_m.row(1), 0.5);
        assert_eq!(c1.get(0, 1), -emd);

        let ca = link_match_cost(&gts, &preds, &ec, &em, 0.25, 0.5, CostForm::Add).unwrap();
        assert!((ca.get(0, 1) + (0.25 * emd + 0.75 * 0.5)).abs() < 1e-12);

        assert!(link_match_cost(&gts, &preds, &ec, &em, 1.5, 0.5, CostForm::Mul).is_err());
        assert!(link_match_cost(&gts, &preds, &ec, &em, 0.5, -0.1, CostForm::Mul).is_err());
    }

    #[test]
    fn plq_cost_takes_the_worse_view() {
        let w = DetectionWeights::default();
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let poor = BBox::new(0.1, 0.9, 0.05, 0.05);
        let pred = PairedPrediction {
            box_c: b,
            box_m: b,
            score_c: 0.8,
            score_m: 0.8,
        };
        let gt = PairedTarget {
            box_c: Some(b),
            box_m: Some(b),
        };
        let c = plq_match_cost(&[pred], &[gt], w).unwrap();
        assert!((c.get(0, 0) - detection_pair_cost(b, b, 0.8, w)).abs() < 1e-15);

        let skewed = PairedPrediction { box_m: poor, ..pred };
        let c = plq_match_cost(&[skewed], &[gt], w).unwrap();
        assert_eq!(c.get(0, 0), detection_pair_cost(b, poor, 0.8, w));

        let cc_only = PairedTarget { box_c: Some(b), box_m: None };
        let c = plq_match_cost(&[pred, skewed], &[cc_only], w).unwrap();
        let want = detection_pair_cost(b, b, 0.8, w).max(-w.cls * 0.2);
        assert!((c.get(0, 0) - want).abs() < 1e-12);
        assert!((want + 0.4).abs() < 1e-12);
        assert_eq!(c.get(1, 1), 0.0);
    }
}
