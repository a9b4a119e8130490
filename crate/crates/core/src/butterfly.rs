//! Topology of the d-dimensional k-ary butterfly `BF(k, d)`.
//!
//! Columns are the integers `0..k^d`, read as d base-k digits with digit
//! position 1 the most significant. Edges between level `l` and `l + 1`
//! vary digit position `d - l`, i.e. the digit with place value `k^l`. A
//! level-`l` sub-butterfly therefore fixes the `d - l` most significant
//! digits of its columns.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("invalid butterfly shape k = {k}, d = {d}")]
    InvalidShape { k: usize, d: usize },
    #[error("level {level} out of range for direction {direction:?} (d = {d})")]
    LevelOutOfRange {
        level: usize,
        direction: Direction,
        d: usize,
    },
    #[error("n = {n} is not a power k^d for any k >= 2, d >= 1")]
    NotAPower { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Towards level d.
    Down,
    /// Towards level 0.
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub level: usize,
    pub column: usize,
}

impl NodeId {
    pub fn new(level: usize, column: usize) -> Self {
        Self { level, column }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    k: usize,
    d: usize,
    n: usize,
}

impl Topology {
    pub fn new(k: usize, d: usize) -> Result<Self, TopologyError> {
        if k < 2 || d < 1 {
            return Err(TopologyError::InvalidShape { k, d });
        }
        let n = k
            .checked_pow(d as u32)
            .filter(|&n| n <= 1 << 24)
            .ok_or(TopologyError::InvalidShape { k, d })?;
        Ok(Self { k, d, n })
    }

    /// Picks `k` closest to `log2 n` among the exact factorizations `n = k^d`.
    pub fn for_servers(n: usize) -> Result<Self, TopologyError> {
        let target = (n as f64).log2().ceil().max(2.0);
        (1..=usize::BITS as usize)
            .filter_map(|d| {
                let k = (n as f64).powf(1.0 / d as f64).round() as usize;
                (k >= 2 && k.checked_pow(d as u32) == Some(n)).then_some((k, d))
            })
            .min_by(|a, b| {
                let da = (a.0 as f64 - target).abs();
                let db = (b.0 as f64 - target).abs();
                da.total_cmp(&db).then(a.1.cmp(&b.1))
            })
            .map(|(k, d)| Self { k, d, n })
            .ok_or(TopologyError::NotAPower { n })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Place value of the digit varied by edges between `level` and `level + 1`.
    pub fn place(&self, level: usize) -> usize {
        self.k.pow(level as u32)
    }

    pub fn digit_at(&self, column: usize, level: usize) -> usize {
        column / self.place(level) % self.k
    }

    pub fn with_digit(&self, column: usize, level: usize, digit: usize) -> usize {
        let p = self.place(level);
        column - self.digit_at(column, level) * p + digit * p
    }

    /// Column as a d-digit base-k string, most significant digit first.
    pub fn column_label(&self, column: usize) -> String {
        (0..self.d)
            .rev()
            .map(|l| char::from_digit(self.digit_at(column, l) as u32, 36).unwrap_or('?'))
            .collect()
    }

    pub fn parse_column(&self, label: &str) -> Option<usize> {
        if label.len() != self.d {
            return None;
        }
        label.chars().try_fold(0usize, |acc, ch| {
            let digit = ch.to_digit(36)? as usize;
            (digit < self.k).then_some(acc * self.k + digit)
        })
    }

    pub fn neighbors(&self, node: NodeId, direction: Direction) -> Result<Vec<NodeId>, TopologyError> {
        let (edge_level, next_level) = match direction {
            Direction::Down if node.level < self.d => (node.level, node.level + 1),
            Direction::Up if node.level > 0 && node.level <= self.d => (node.level - 1, node.level - 1),
            _ => {
                return Err(TopologyError::LevelOutOfRange {
                    level: node.level,
                    direction,
                    d: self.d,
                })
            }
        };
        Ok((0..self.k)
            .map(|b| NodeId::new(next_level, self.with_digit(node.column, edge_level, b)))
            .collect())
    }

    /// Columns sharing a group at the edge layer between `level` and
    /// `level + 1`, ordered by the varied digit (the group index).
    pub fn group_columns(&self, column: usize, level: usize) -> Vec<usize> {
        (0..self.k).map(|b| self.with_digit(column, level, b)).collect()
    }

    /// The `k^l` columns of the sub-butterfly `BF(node)`.
    pub fn sub_butterfly_columns(&self, node: NodeId) -> std::ops::Range<usize> {
        let width = self.place(node.level.min(self.d));
        let base = node.column / width * width;
        base..base + width
    }

    /// Path from `(d, start)` down to `(0, target)`, fixing one digit per hop.
    pub fn probe_path(&self, start_column: usize, target_column: usize) -> Vec<NodeId> {
        let mut column = start_column;
        let mut path = vec![NodeId::new(self.d, column)];
        for level in (0..self.d).rev() {
            column = self.with_digit(column, level, self.digit_at(target_column, level));
            path.push(NodeId::new(level, column));
        }
        path
    }

    /// Node at `level` on the probe path from `start` to `target`.
    pub fn path_node(&self, start_column: usize, target_column: usize, level: usize) -> NodeId {
        let width = self.place(level);
        // digits below `level` come from start, the rest from target
        let column = target_column / width * width + start_column % width;
        NodeId::new(level, column)
    }

    /// `UT(node)`: nodes reached by going up towards level 0.
    pub fn upward_tree(&self, node: NodeId) -> BTreeSet<NodeId> {
        self.tree(node, Direction::Up)
    }

    /// `LT(node)`: nodes reached by going down towards level d.
    pub fn lower_tree(&self, node: NodeId) -> BTreeSet<NodeId> {
        self.tree(node, Direction::Down)
    }

    fn tree(&self, root: NodeId, direction: Direction) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([root]);
        let mut frontier = vec![root];
        while let Some(node) = frontier.pop() {
            if let Ok(next) = self.neighbors(node, direction) {
                for v in next {
                    if seen.insert(v) {
                        frontier.push(v);
                    }
                }
            }
        }
        seen
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BF(k={}, d={}) over n={}", self.k, self.d, self.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bf33() -> Topology {
        Topology::new(3, 3).unwrap()
    }

    fn labels(t: &Topology, nodes: &[NodeId]) -> Vec<(usize, String)> {
        nodes.iter().map(|v| (v.level, t.column_label(v.column))).collect()
    }

    #[test]
    fn down_neighbors_match_figure() {
        let t = bf33();
        let c = t.parse_column("100").unwrap();
        let out = t.neighbors(NodeId::new(0, c), Direction::Down).unwrap();
        assert_eq!(
            labels(&t, &out),
            vec![(1, "100".into()), (1, "101".into()), (1, "102".into())]
        );

        let c = t.parse_column("111").unwrap();
        let out = t.neighbors(NodeId::new(1, c), Direction::Down).unwrap();
        assert_eq!(
            labels(&t, &out),
            vec![(2, "101".into()), (2, "111".into()), (2, "121".into())]
        );
    }

    #[test]
    fn single_digit_butterfly() {
        let t = Topology::new(2, 1).unwrap();
        let out = t.neighbors(NodeId::new(0, 0), Direction::Down).unwrap();
        assert_eq!(out, vec![NodeId::new(1, 0), NodeId::new(1, 1)]);
    }

    #[test]
    fn out_of_range_levels() {
        let t = bf33();
        assert!(t.neighbors(NodeId::new(3, 0), Direction::Down).is_err());
        assert!(t.neighbors(NodeId::new(0, 0), Direction::Up).is_err());
        assert!(Topology::new(1, 3).is_err());
        assert!(Topology::new(3, 0).is_err());
    }

    #[test]
    fn sub_butterfly_of_level_two_node() {
        let t = bf33();
        let c = t.parse_column("111").unwrap();
        let cols: Vec<String> = t
            .sub_butterfly_columns(NodeId::new(2, c))
            .map(|x| t.column_label(x))
            .collect();
        let expected: Vec<String> = ["100", "101", "102", "110", "111", "112", "120", "121", "122"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(cols, expected);
        assert_eq!(t.sub_butterfly_columns(NodeId::new(0, c)), c..c + 1);
        assert_eq!(t.sub_butterfly_columns(NodeId::new(3, c)), 0..27);
    }

    #[test]
    fn probe_path_fixes_digits_from_the_top() {
        let t = Topology::new(2, 2).unwrap();
        let path = t.probe_path(0, 3);
        assert_eq!(
            labels(&t, &path),
            vec![(2, "00".into()), (1, "10".into()), (0, "11".into())]
        );
        // consecutive path nodes are butterfly edges
        for w in path.windows(2) {
            assert!(t.neighbors(w[0], Direction::Up).unwrap().contains(&w[1]));
        }
        let fixed = t.probe_path(2, 2);
        assert!(fixed.iter().all(|v| v.column == 2));
        assert_eq!(fixed.len(), 3);
    }

    #[test]
    fn path_node_agrees_with_probe_path() {
        let t = Topology::new(3, 4).unwrap();
        for (s, d) in [(0, 80), (17, 42), (55, 55), (80, 0)] {
            let path = t.probe_path(s, d);
            for node in &path {
                assert_eq!(t.path_node(s, d, node.level), *node);
            }
        }
    }

    #[test]
    fn upward_tree_of_level_two_node() {
        let t = bf33();
        let c = t.parse_column("111").unwrap();
        let ut = t.upward_tree(NodeId::new(2, c));
        assert_eq!(ut.len(), 13);
        let level1: Vec<String> = ut
            .iter()
            .filter(|v| v.level == 1)
            .map(|v| t.column_label(v.column))
            .collect();
        assert_eq!(level1, vec!["101", "111", "121"]);
        assert!(ut
            .iter()
            .filter(|v| v.level == 0)
            .all(|v| t.sub_butterfly_columns(NodeId::new(2, c)).contains(&v.column)));
        assert_eq!(t.upward_tree(NodeId::new(0, 5)).len(), 1);
    }

    #[test]
    fn upward_tree_sizes_by_enumeration() {
        for k in 2..=4usize {
            for d in 1..=4usize {
                let t = Topology::new(k, d).unwrap();
                for level in 0..=d {
                    let ut = t.upward_tree(NodeId::new(level, t.n() - 1));
                    assert_eq!(ut.len(), (k.pow(level as u32 + 1) - 1) / (k - 1));
                }
            }
        }
    }

    #[test]
    fn default_arity_is_exact() {
        assert_eq!(Topology::for_servers(81).unwrap().k(), 9);
        assert_eq!(Topology::for_servers(4096).unwrap().k(), 16);
        let t = Topology::for_servers(16).unwrap();
        assert_eq!((t.k(), t.d()), (4, 2));
        let t = Topology::for_servers(12).unwrap();
        assert_eq!((t.k(), t.d()), (12, 1));
        assert!(Topology::for_servers(1).is_err());
    }
}
