//! Hard dynamic-time-warping loss over a precomputed cost matrix, with exact
//! path recovery, a subgradient backward pass, and an exhaustive brute-force
//! oracle.
//!
//! The dynamic program minimizes the path SUM over monotonic warping paths
//! with the step set {(+1,0), (0,+1), (+1,+1)} and both endpoints anchored;
//! the reported loss divides that sum by the length of the minimizing path.
//! Ties on accumulated cost are broken deterministically: diagonal, then
//! vertical (i+1), then horizontal (j+1).

use crate::error::{Error, Result};
use crate::numerics::{cosine_distance_grad, Matrix};

/// Upper bound on enumerated paths in [`dtw_bruteforce`].
const BRUTEFORCE_PATH_LIMIT: u128 = 1_000_000;

/// Monotonic warping path as 1-based `(i, j)` pairs from `(1,1)` to `(I,J)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarpingPath {
    steps: Vec<(usize, usize)>,
}

impl WarpingPath {
    /// Validates the path invariants against the given endpoint.
    pub fn new(steps: Vec<(usize, usize)>, i_max: usize, j_max: usize) -> Result<WarpingPath> {
        if steps.is_empty() {
            return Err(Error::EmptyInput("WarpingPath"));
        }
        if steps[0] != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "warping path must start at (1,1), got {:?}",
                steps[0]
            )));
        }
        let last = *steps.last().unwrap();
        if last != (i_max, j_max) {
            return Err(Error::InvalidArgument(format!(
                "warping path must end at ({i_max},{j_max}), got {last:?}"
            )));
        }
        for w in steps.windows(2) {
            let di = w[1].0 as i64 - w[0].0 as i64;
            let dj = w[1].1 as i64 - w[0].1 as i64;
            if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
                return Err(Error::InvalidArgument(format!(
                    "illegal warping step {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(WarpingPath { steps })
    }

    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.steps.len()
    }
}

/// Outcome of a DTW solve. `loss = path_sum / path.len()`; `cost_grad` is the
/// gradient of the loss with respect to each cost entry: zero off the path
/// and `1/|path|` on it.
#[derive(Clone, Debug)]
pub struct DtwResult {
    pub loss: f64,
    pub path: WarpingPath,
    pub path_sum: f64,
    pub cost_grad: Matrix,
}

fn result_from_path(c: &Matrix, steps: Vec<(usize, usize)>, path_sum: f64) -> DtwResult {
    let len = steps.len();
    let mut cost_grad = Matrix::zeros(c.rows(), c.cols());
    let w = 1.0 / len as f64;
    for &(i, j) in &steps {
        cost_grad.set(i - 1, j - 1, w);
    }
    DtwResult {
        loss: path_sum / len as f64,
        path: WarpingPath { steps },
        path_sum,
        cost_grad,
    }
}

/// Minimum-sum monotonic warping path by dynamic programming with backtrace.
pub fn dtw_forward(c: &Matrix) -> Result<DtwResult> {
    let (rows, cols) = (c.rows(), c.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("dtw_forward"));
    }
    let mut acc = Matrix::zeros(rows, cols);
    acc.set(0, 0, c.get(0, 0));
    for i in 1..rows {
        let v = acc.get(i - 1, 0) + c.get(i, 0);
        acc.set(i, 0, v);
    }
    for j in 1..cols {
        let v = acc.get(0, j - 1) + c.get(0, j);
        acc.set(0, j, v);
    }
    for i in 1..rows {
        for j in 1..cols {
            // Strict < keeps the diagonal > vertical > horizontal preference.
            let mut best = acc.get(i - 1, j - 1);
            let vert = acc.get(i - 1, j);
            if vert < best {
                best = vert;
            }
            let horiz = acc.get(i, j - 1);
            if horiz < best {
                best = horiz;
            }
            acc.set(i, j, best + c.get(i, j));
        }
    }

    // Backtrace with the same preference order among minimal predecessors.
    let mut steps_rev = vec![(rows, cols)];
    let (mut i, mut j) = (rows - 1, cols - 1);
    while i > 0 || j > 0 {
        let mut cand: Vec<(usize, usize)> = Vec::with_capacity(3);
        if i > 0 && j > 0 {
            cand.push((i - 1, j - 1));
        }
        if i > 0 {
            cand.push((i - 1, j));
        }
        if j > 0 {
            cand.push((i, j - 1));
        }
        let best = cand
            .iter()
            .map(|&(a, b)| acc.get(a, b))
            .fold(f64::INFINITY, f64::min);
        let &(pi, pj) = cand.iter().find(|&&(a, b)| acc.get(a, b) == best).unwrap();
        steps_rev.push((pi + 1, pj + 1));
        i = pi;
        j = pj;
    }
    steps_rev.reverse();
    Ok(result_from_path(c, steps_rev, acc.get(rows - 1, cols - 1)))
}

/// Number of monotonic paths from corner to corner (Delannoy number).
fn path_count(rows: usize, cols: usize) -> u128 {
    let mut prev = vec![1u128; cols];
    for _ in 1..rows {
        let mut cur = vec![0u128; cols];
        cur[0] = 1;
        for j in 1..cols {
            cur[j] = cur[j - 1]
                .saturating_add(prev[j])
                .saturating_add(prev[j - 1]);
        }
        prev = cur;
    }
    prev[cols - 1]
}

/// Rank of the backward move into a cell: diagonal 0, vertical 1,
/// horizontal 2 — the same preference order the DP backtrace uses.
fn backward_move_rank(from: (usize, usize), to: (usize, usize)) -> u8 {
    match (to.0 - from.0, to.1 - from.1) {
        (1, 1) => 0,
        (1, 0) => 1,
        (0, 1) => 2,
        _ => unreachable!("illegal step"),
    }
}

/// True when `a` precedes `b` under the tie-break order: compare moves from
/// the endpoint backwards, preferring diagonal, then vertical, then
/// horizontal. This ordering selects exactly the path the DP backtrace
/// recovers among equal-sum paths.
fn tie_break_before(a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
    let mut ia = a.len() - 1;
    let mut ib = b.len() - 1;
    while ia > 0 && ib > 0 {
        let ra = backward_move_rank(a[ia - 1], a[ia]);
        let rb = backward_move_rank(b[ib - 1], b[ib]);
        if ra != rb {
            return ra < rb;
        }
        ia -= 1;
        ib -= 1;
    }
    false
}

/// Exhaustive enumeration of all monotonic warping paths. Returns the same
/// loss and, under the shared tie-break order, the same path as
/// [`dtw_forward`]. Guarded to at most 10^6 paths.
pub fn dtw_bruteforce(c: &Matrix) -> Result<DtwResult> {
    let (rows, cols) = (c.rows(), c.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("dtw_bruteforce"));
    }
    let count = path_count(rows, cols);
    if count > BRUTEFORCE_PATH_LIMIT {
        return Err(Error::GuardExceeded {
            what: "dtw_bruteforce path count",
            count,
            limit: BRUTEFORCE_PATH_LIMIT,
        });
    }

    struct Search<'a> {
        c: &'a Matrix,
        best_sum: f64,
        best_path: Vec<(usize, usize)>,
        stack: Vec<(usize, usize)>,
    }

    impl Search<'_> {
        fn visit(&mut self, i: usize, j: usize, sum: f64) {
            self.stack.push((i + 1, j + 1));
            let sum = sum + self.c.get(i, j);
            if i + 1 == self.c.rows() && j + 1 == self.c.cols() {
                let better = sum < self.best_sum
                    || (sum == self.best_sum
                        && (self.best_path.is_empty()
                            || tie_break_before(&self.stack, &self.best_path)));
                if better {
                    self.best_sum = sum;
                    self.best_path = self.stack.clone();
                }
            } else {
                if i + 1 < self.c.rows() && j + 1 < self.c.cols() {
                    self.visit(i + 1, j + 1, sum);
                }
                if i + 1 < self.c.rows() {
                    self.visit(i + 1, j, sum);
                }
                if j + 1 < self.c.cols() {
                    self.visit(i, j + 1, sum);
                }
            }
            self.stack.pop();
        }
    }

    let mut search = Search {
        c,
        best_sum: f64::INFINITY,
        best_path: Vec::new(),
        stack: Vec::new(),
    };
    search.visit(0, 0, 0.0);
    Ok(result_from_path(c, search.best_path, search.best_sum))
}

/// Backward pass of the DTW loss to the speech-side embeddings, treating the
/// optimal path and its length as locally constant:
/// `grad_H[i] = sum_{j : (i,j) in path} (1/|path|) * dC(h_i, e_j)/dh_i`.
pub fn dtw_backward(result: &DtwResult, h: &Matrix, e: &Matrix, epsilon: f64) -> Result<Matrix> {
    if result.cost_grad.rows() != h.rows()
        || result.cost_grad.cols() != e.rows()
        || h.cols() != e.cols()
    {
        return Err(Error::ShapeMismatch {
            context: "dtw_backward".into(),
            expected: format!(
                "cost_grad {}x{} with matching embedding dim",
                h.rows(),
                e.rows()
            ),
            found: format!(
                "cost_grad {}x{}, H {}x{}, E {}x{}",
                result.cost_grad.rows(),
                result.cost_grad.cols(),
                h.rows(),
                h.cols(),
                e.rows(),
                e.cols()
            ),
        });
    }
    let mut grad = Matrix::zeros(h.rows(), h.cols());
    let w = 1.0 / result.path.len() as f64;
    for &(i, j) in result.path.steps() {
        let g = cosine_distance_grad(h.row(i - 1), e.row(j - 1), epsilon);
        let row = grad.row_mut(i - 1);
        for (acc, gv) in row.iter_mut().zip(&g) {
            *acc += w * gv;
        }
    }
    Ok(grad)
}
