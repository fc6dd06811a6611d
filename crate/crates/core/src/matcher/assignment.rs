//! Rectangular min-cost assignment (rows <= cols) by shortest augmenting
//! paths with dual potentials, O(rows^2 * cols).
//!
//! After the optimum is found, a refinement pass walks the rows in order and
//! moves each one to the smallest column that still admits an optimal
//! completion. The result is the lexicographically smallest optimal
//! assignment, so ties among equal-cost optima are resolved by row index and
//! then column index.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::abs;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[r]` is the column assigned to row `r`.
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

/// Solve the assignment problem for a dense row-major `rows x cols` matrix.
///
/// Panics if `rows > cols` or the matrix length is inconsistent; callers
/// validate sizes first.
pub fn solve(costs: &[f64], rows: usize, cols: usize) -> Assignment {
    assert!(rows <= cols, "assignment needs rows <= cols");
    assert_eq!(costs.len(), rows * cols);
    if rows == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            cost: 0.0,
        };
    }
    let at = |r: usize, c: usize| costs[r * cols + c];

    // 1-based potentials; index 0 is the virtual root column.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut minv = vec![inf; cols + 1];
    let mut used = vec![false; cols + 1];

    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    let scale = costs.iter().fold(1.0f64, |m, c| m.max(abs(*c)));
    let duals = Duals {
        row: u[1..].to_vec(),
        col: v[1..].to_vec(),
        tol: 1e-9 * scale,
    };
    let row_to_col = lexicographic_refine(&at, rows, cols, row_to_col, &duals);
    let cost = row_to_col.iter().enumerate().map(|(r, &c)| at(r, c)).sum();
    Assignment { row_to_col, cost }
}

struct Duals {
    row: Vec<f64>,
    col: Vec<f64>,
    tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Row(usize),
    /// Zero-cost padding row that absorbs an unused column. All padding rows
    /// share the same tight columns (those with zero potential).
    Pad(usize),
}

/// Move every row, in order, to the smallest column consistent with some
/// optimal assignment of the remaining rows.
///
/// Padding the problem to square with zero-cost rows turns the optimal set
/// into the perfect matchings of the tight-edge graph. Fixing row `t` to
/// column `c` is feasible iff the unit currently holding `c` can reach the
/// column `t` gives up through an alternating path among unfixed nodes.
fn lexicographic_refine(
    at: &impl Fn(usize, usize) -> f64,
    rows: usize,
    cols: usize,
    mut row_to_col: Vec<usize>,
    duals: &Duals,
) -> Vec<usize> {
    let tight_row = |r: usize, c: usize| at(r, c) - duals.row[r] - duals.col[c] <= duals.tol;
    let tight_pad = |c: usize| -duals.col[c] <= duals.tol;

    let mut owner: Vec<Option<Node>> = vec![None; cols];
    for (r, &c) in row_to_col.iter().enumerate() {
        owner[c] = Some(Node::Row(r));
    }
    let mut pad_col = Vec::with_capacity(cols - rows);
    for c in 0..cols {
        if owner[c].is_none() {
            owner[c] = Some(Node::Pad(pad_col.len()));
            pad_col.push(c);
        }
    }
    let owner_of =
        |owner: &[Option<Node>], c: usize| owner[c].expect("square matching covers all columns");

    for t in 0..rows {
        let current = row_to_col[t];
        for c in 0..current {
            if !tight_row(t, c) {
                continue;
            }
            let start = owner_of(&owner, c);
            if matches!(start, Node::Row(r) if r < t) {
                continue;
            }
            let path = alternating_path(
                start,
                current,
                c,
                t,
                cols,
                &owner,
                &row_to_col,
                &pad_col,
                &tight_row,
                &tight_pad,
            );
            if let Some(steps) = path {
                for (node, col) in steps {
                    owner[col] = Some(node);
                    match node {
                        Node::Row(r) => row_to_col[r] = col,
                        Node::Pad(p) => pad_col[p] = col,
                    }
                }
                owner[c] = Some(Node::Row(t));
                row_to_col[t] = c;
                break;
            }
        }
    }
    row_to_col
}

/// Breadth-first search for an alternating path from `start` ending at
/// `target`, avoiding column `banned` and every row `<= fixed_upto`.
/// Returns the (node, new column) reassignments along the path.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    start: Node,
    target: usize,
    banned: usize,
    fixed_upto: usize,
    cols: usize,
    owner: &[Option<Node>],
    row_to_col: &[usize],
    pad_col: &[usize],
    tight_row: &impl Fn(usize, usize) -> bool,
    tight_pad: &impl Fn(usize) -> bool,
) -> Option<Vec<(Node, usize)>> {
    let mut parent: Vec<Option<Node>> = vec![None; cols];
    let mut seen_col = vec![false; cols];
    let mut seen_row = vec![false; row_to_col.len()];
    let mut pads_expanded = false;
    seen_col[banned] = true;

    let mut queue = VecDeque::new();
    queue.push_back(start);
    while let Some(node) = queue.pop_front() {
        match node {
            Node::Row(r) => {
                if seen_row[r] {
                    continue;
                }
                seen_row[r] = true;
            }
            Node::Pad(_) => {
                if pads_expanded {
                    continue;
                }
                pads_expanded = true;
            }
        }
        for j in 0..cols {
            if seen_col[j] {
                continue;
            }
            let ok = match node {
                Node::Row(r) => tight_row(r, j),
                Node::Pad(_) => tight_pad(j),
            };
            if !ok {
                continue;
            }
            if j == target {
                parent[j] = Some(node);
                return Some(trace(start, target, banned, &parent, row_to_col, pad_col));
            }
            let next = owner[j].expect("square matching covers all columns");
            if matches!(next, Node::Row(r) if r <= fixed_upto) {
                continue;
            }
            seen_col[j] = true;
            parent[j] = Some(node);
            queue.push_back(next);
        }
    }
    None
}

fn trace(
    start: Node,
    target: usize,
    banned: usize,
    parent: &[Option<Node>],
    row_to_col: &[usize],
    pad_col: &[usize],
) -> Vec<(Node, usize)> {
    let col_of = |n: Node| match n {
        Node::Row(r) => row_to_col[r],
        Node::Pad(p) => pad_col[p],
    };
    let mut steps = Vec::new();
    let mut col = target;
    loop {
        let node = parent[col].expect("path is connected");
        steps.push((node, col));
        if node == start {
            break;
        }
        col = col_of(node);
        debug_assert_ne!(col, banned);
    }
    steps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_three_by_three() {
        let c = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = solve(&c, 3, 3);
        assert_eq!(a.cost, 5.0);
        assert_eq!(a.row_to_col, vec![1, 0, 2]);
    }

    #[test]
    fn all_ties_resolve_to_identity() {
        let c = [1.0; 12];
        let a = solve(&c, 3, 4);
        assert_eq!(a.row_to_col, vec![0, 1, 2]);
    }

    #[test]
    fn tie_prefers_smaller_column_for_earlier_row() {
        // rows 0 and 1 both cost 0 on columns 0 and 1: identity is lex-smallest
        let c = [0.0, 0.0, 9.0, 0.0, 0.0, 9.0];
        let a = solve(&c, 2, 3);
        assert_eq!(a.row_to_col, vec![0, 1]);
        // column 2 free-vs-used tie
        let c = [5.0, 1.0, 1.0];
        assert_eq!(solve(&c, 1, 3).row_to_col, vec![1]);
    }

    #[test]
    fn empty_problem() {
        assert_eq!(solve(&[], 0, 3).row_to_col, Vec::<usize>::new());
    }
}
