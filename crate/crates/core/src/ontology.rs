//! Code hierarchy: parent links, major codes, and hop distances that type the
//! edges of the relation graph.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ICD-style code such as `250.03`, `E850` or `V10`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CodeId(String);

impl CodeId {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(Error::InvalidCode(text));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Category prefix: everything before the first `.`, or the whole code.
    pub fn major(&self) -> CodeId {
        match self.0.split_once('.') {
            Some((head, _)) if !head.is_empty() => CodeId(head.to_string()),
            _ => self.clone(),
        }
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for CodeId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

impl TryFrom<String> for CodeId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<CodeId> for String {
    fn from(c: CodeId) -> String {
        c.0
    }
}

/// Major code of `c` under the prefix rule.
pub fn major_code_of(c: &CodeId) -> CodeId {
    c.major()
}

/// Path length between two nodes, or no path when they sit in different trees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distance {
    Hops(usize),
    Unrelated,
}

/// A forest of codes with parent links.
#[derive(Clone, Debug)]
pub struct Ontology {
    codes: Vec<CodeId>,
    index: HashMap<CodeId, usize>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    root: Vec<usize>,
    /// `ancestors[k][v]` is the `2^k`-th ancestor of `v` (or its root).
    ancestors: Vec<Vec<usize>>,
}

impl Ontology {
    /// Parses `child<TAB>parent` lines. Blank lines and lines starting with
    /// `#` are skipped. Target codes absent from the text become singleton
    /// roots.
    pub fn parse(hierarchy_text: &str, targets: &[CodeId]) -> Result<Self> {
        let mut codes: Vec<CodeId> = Vec::new();
        let mut index: HashMap<CodeId, usize> = HashMap::new();
        let mut parent: Vec<Option<usize>> = Vec::new();

        let mut intern = |c: CodeId, codes: &mut Vec<CodeId>, parent: &mut Vec<Option<usize>>| {
            *index.entry(c.clone()).or_insert_with(|| {
                codes.push(c);
                parent.push(None);
                codes.len() - 1
            })
        };

        for (lineno, line) in hierarchy_text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (child, par) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: "expected child<TAB>parent".into(),
            })?;
            let child = CodeId::new(child.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            let par = CodeId::new(par.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if child == par {
                return Err(Error::Cycle(child.to_string()));
            }
            let c = intern(child, &mut codes, &mut parent);
            let p = intern(par, &mut codes, &mut parent);
            match parent[c] {
                Some(existing) if existing != p => {
                    return Err(Error::ConflictingParent {
                        child: codes[c].to_string(),
                        first: codes[existing].to_string(),
                        second: codes[p].to_string(),
                    })
                }
                _ => parent[c] = Some(p),
            }
        }
        for t in targets {
            intern(t.clone(), &mut codes, &mut parent);
        }
        Self::from_parents(codes, parent)
    }

    /// Builds from explicit parent links; fails on cycles.
    pub fn from_parents(codes: Vec<CodeId>, parent: Vec<Option<usize>>) -> Result<Self> {
        let n = codes.len();
        let index: HashMap<CodeId, usize> = codes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let mut depth = vec![0usize; n];
        let mut root = vec![usize::MAX; n];
        // 0 = unvisited, 1 = on the current walk, 2 = resolved
        let mut state = vec![0u8; n];
        for start in 0..n {
            if state[start] == 2 {
                continue;
            }
            let mut path = Vec::new();
            let mut cur = start;
            loop {
                match state[cur] {
                    2 => break,
                    1 => return Err(Error::Cycle(codes[cur].to_string())),
                    _ => {}
                }
                state[cur] = 1;
                path.push(cur);
                match parent[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            if state[cur] != 2 {
                // cur is a root and the last element of the walk
                path.pop();
                depth[cur] = 0;
                root[cur] = cur;
                state[cur] = 2;
            }
            let (mut d, r) = (depth[cur], root[cur]);
            for &v in path.iter().rev() {
                d += 1;
                depth[v] = d;
                root[v] = r;
                state[v] = 2;
            }
        }

        let levels = (usize::BITS - n.max(1).leading_zeros()) as usize + 1;
        let mut ancestors = Vec::with_capacity(levels);
        ancestors.push((0..n).map(|v| parent[v].unwrap_or(v)).collect::<Vec<_>>());
        for k in 1..levels {
            let prev: &Vec<usize> = &ancestors[k - 1];
            let next = (0..n).map(|v| prev[prev[v]]).collect();
            ancestors.push(next);
        }
        Ok(Self {
            codes,
            index,
            parent,
            depth,
            root,
            ancestors,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[CodeId] {
        &self.codes
    }

    pub fn contains(&self, c: &CodeId) -> bool {
        self.index.contains_key(c)
    }

    pub fn index_of(&self, c: &CodeId) -> Result<usize> {
        self.index
            .get(c)
            .copied()
            .ok_or_else(|| Error::UnknownCode(c.to_string()))
    }

    pub fn parent(&self, c: &CodeId) -> Result<Option<&CodeId>> {
        Ok(self.parent[self.index_of(c)?].map(|p| &self.codes[p]))
    }

    pub fn depth(&self, c: &CodeId) -> Result<usize> {
        Ok(self.depth[self.index_of(c)?])
    }

    pub fn root_of(&self, c: &CodeId) -> Result<&CodeId> {
        Ok(&self.codes[self.root[self.index_of(c)?]])
    }

    pub fn roots(&self) -> impl Iterator<Item = &CodeId> {
        (0..self.codes.len())
            .filter(|&i| self.parent[i].is_none())
            .map(|i| &self.codes[i])
    }

    fn lift(&self, mut v: usize, mut steps: usize) -> usize {
        let mut k = 0;
        while steps > 0 {
            if steps & 1 == 1 {
                v = self.ancestors[k][v];
            }
            steps >>= 1;
            k += 1;
        }
        v
    }

    fn lca(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = if self.depth[a] >= self.depth[b] { (a, b) } else { (b, a) };
        a = self.lift(a, self.depth[a] - self.depth[b]);
        if a == b {
            return a;
        }
        for k in (0..self.ancestors.len()).rev() {
            if self.ancestors[k][a] != self.ancestors[k][b] {
                a = self.ancestors[k][a];
                b = self.ancestors[k][b];
            }
        }
        self.ancestors[0][a]
    }

    pub(crate) fn distance_by_index(&self, a: usize, b: usize) -> Distance {
        if self.root[a] != self.root[b] {
            return Distance::Unrelated;
        }
        let l = self.lca(a, b);
        Distance::Hops(self.depth[a] + self.depth[b] - 2 * self.depth[l])
    }

    /// Undirected path length in the forest, `depth(a) + depth(b) - 2 depth(lca)`.
    pub fn hop_distance(&self, a: &CodeId, b: &CodeId) -> Result<Distance> {
        Ok(self.distance_by_index(self.index_of(a)?, self.index_of(b)?))
    }
}

/// Ordered set of major codes and the major of every target code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MajorCodeIndex {
    majors: Vec<CodeId>,
    major_of: Vec<usize>,
}

impl MajorCodeIndex {
    /// Majors are numbered in order of first appearance among `targets`.
    pub fn build(targets: &[CodeId]) -> Self {
        let mut majors = Vec::new();
        let mut seen: HashMap<CodeId, usize> = HashMap::new();
        let major_of = targets
            .iter()
            .map(|t| {
                let m = t.major();
                *seen.entry(m.clone()).or_insert_with(|| {
                    majors.push(m);
                    majors.len() - 1
                })
            })
            .collect();
        Self { majors, major_of }
    }

    pub fn majors(&self) -> &[CodeId] {
        &self.majors
    }

    /// `A`, the number of major codes.
    pub fn len(&self) -> usize {
        self.majors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.majors.is_empty()
    }

    /// Index of the major of target code `i`.
    pub fn major_of(&self, target: usize) -> usize {
        self.major_of[target]
    }

    /// Target indices grouped under major `a`, in target order.
    pub fn members(&self, a: usize) -> Vec<usize> {
        (0..self.major_of.len())
            .filter(|&i| self.major_of[i] == a)
            .collect()
    }
}

/// Maps hop distances to edge-type ids: `min(d, cap)` for connected pairs
/// and `cap + 1` for pairs in different trees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTypeTable {
    pub cap: usize,
}

impl Default for EdgeTypeTable {
    fn default() -> Self {
        Self { cap: 6 }
    }
}

impl EdgeTypeTable {
    pub fn new(cap: usize) -> Self {
        Self { cap }
    }

    pub fn sentinel_unrelated(&self) -> usize {
        self.cap + 1
    }

    /// Total number of edge types.
    pub fn bucket_count(&self) -> usize {
        self.cap + 2
    }

    pub fn bucket(&self, d: Distance) -> usize {
        match d {
            Distance::Hops(h) => h.min(self.cap),
            Distance::Unrelated => self.sentinel_unrelated(),
        }
    }

    pub fn edge_type(&self, major: &CodeId, code: &CodeId, ont: &Ontology) -> Result<usize> {
        Ok(self.bucket(ont.hop_distance(major, code)?))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn id(s: &str) -> CodeId {
        CodeId::new(s).unwrap()
    }

    /// Random forest as parent links; node i's parent is a lower index.
    pub(crate) fn random_forest(n: usize, roots: usize, seed: u64) -> Ontology {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<CodeId> = (0..n).map(|i| id(&format!("N{i}"))).collect();
        let parent = (0..n)
            .map(|i| if i < roots { None } else { Some(rng.gen_range(0..i)) })
            .collect();
        Ontology::from_parents(codes, parent).unwrap()
    }

    fn bfs(ont: &Ontology, a: usize, b: usize) -> Option<usize> {
        let n = ont.len();
        let mut adj = vec![Vec::new(); n];
        for v in 0..n {
            if let Some(p) = ont.parent[v] {
                adj[v].push(p);
                adj[p].push(v);
            }
        }
        let mut dist = vec![usize::MAX; n];
        dist[a] = 0;
        let mut q = VecDeque::from([a]);
        while let Some(v) = q.pop_front() {
            for &w in &adj[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    q.push_back(w);
                }
            }
        }
        (dist[b] != usize::MAX).then_some(dist[b])
    }

    #[test]
    fn single_edge_readback() {
        let ont = Ontology::parse("250.03\t250\n", &[id("250.03")]).unwrap();
        assert_eq!(ont.len(), 2);
        assert_eq!(ont.parent(&id("250.03")).unwrap(), Some(&id("250")));
        assert_eq!(ont.depth(&id("250.03")).unwrap(), 1);
        assert_eq!(ont.depth(&id("250")).unwrap(), 0);
    }

    #[test]
    fn missing_target_becomes_root() {
        let ont = Ontology::parse("", &[id("A")]).unwrap();
        assert_eq!(ont.depth(&id("A")).unwrap(), 0);
        assert_eq!(ont.roots().collect::<Vec<_>>(), vec![&id("A")]);
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let text = "# header\n\n401.9\t401\n401\t390-459\n";
        let ont = Ontology::parse(text, &[]).unwrap();
        assert_eq!(ont.depth(&id("401.9")).unwrap(), 2);
    }

    #[test]
    fn cycle_rejected_with_code() {
        let err = Ontology::parse("a\tb\nb\tc\nc\ta\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Cycle(_)), "{err}");
        let err = Ontology::parse("a\ta\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Cycle(ref c) if c == "a"));
    }

    #[test]
    fn conflicting_parent_rejected() {
        let err = Ontology::parse("x\tp\nx\tq\n", &[]).unwrap_err();
        assert!(matches!(err, Error::ConflictingParent { .. }));
        // a repeated identical edge is fine
        Ontology::parse("x\tp\nx\tp\n", &[]).unwrap();
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = Ontology::parse("a\tb\nnot-a-pair\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn major_prefix_rule() {
        assert_eq!(id("250.03").major(), id("250"));
        assert_eq!(id("586").major(), id("586"));
        assert_eq!(id("E850.0").major(), id("E850"));
        assert_eq!(id("V10").major(), id("V10"));
    }

    #[test]
    fn code_id_validation() {
        assert!(CodeId::new("").is_err());
        assert!(CodeId::new("25 0").is_err());
    }

    #[test]
    fn distances_small_cases() {
        let ont = Ontology::parse("250.03\t250\n250.01\t250\n401.9\t401\n", &[]).unwrap();
        let d = |a: &str, b: &str| ont.hop_distance(&id(a), &id(b)).unwrap();
        assert_eq!(d("250.03", "250.03"), Distance::Hops(0));
        assert_eq!(d("250.03", "250"), Distance::Hops(1));
        assert_eq!(d("250.03", "250.01"), Distance::Hops(2));
        assert_eq!(d("250.03", "401.9"), Distance::Unrelated);
        assert!(matches!(ont.hop_distance(&id("999"), &id("250")), Err(Error::UnknownCode(c)) if c == "999"));
    }

    #[test]
    fn depth_matches_bfs_from_root() {
        let ont = random_forest(50, 1, 11);
        for v in 0..50 {
            assert_eq!(Some(ont.depth[v]), bfs(&ont, 0, v));
        }
    }

    #[test]
    fn hop_distance_matches_bfs() {
        let ont = random_forest(200, 4, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (a, b) = (rng.gen_range(0..200), rng.gen_range(0..200));
            let want = match bfs(&ont, a, b) {
                Some(h) => Distance::Hops(h),
                None => Distance::Unrelated,
            };
            assert_eq!(ont.distance_by_index(a, b), want);
        }
    }

    #[test]
    fn edge_type_buckets() {
        let table = EdgeTypeTable::new(6);
        assert_eq!(table.bucket_count(), 8);
        assert_eq!(table.bucket(Distance::Hops(1)), 1);
        assert_eq!(table.bucket(Distance::Hops(9)), 6);
        assert_eq!(table.bucket(Distance::Unrelated), 7);
        let ont = Ontology::parse("250.03\t250\n401.9\t401\n", &[]).unwrap();
        assert_eq!(table.edge_type(&id("250"), &id("250.03"), &ont).unwrap(), 1);
        assert_eq!(table.edge_type(&id("401"), &id("250.03"), &ont).unwrap(), 7);
    }

    #[test]
    fn major_index_orders_by_first_appearance() {
        let targets: Vec<CodeId> = ["401.9", "250.03", "401.1", "586"].iter().map(|s| id(s)).collect();
        let idx = MajorCodeIndex::build(&targets);
        assert_eq!(idx.majors(), &[id("401"), id("250"), id("586")]);
        assert_eq!(idx.major_of(2), 0);
        assert_eq!(idx.members(0), vec![0, 2]);
    }

    proptest! {
        #[test]
        fn major_is_idempotent(s in "[A-Z]?[0-9]{1,3}(\\.[0-9]{1,2})?") {
            let c = id(&s);
            prop_assert_eq!(c.major().major(), c.major());
        }

        #[test]
        fn forest_metric_properties(seed in any::<u64>(), n in 2usize..60) {
            let ont = random_forest(n, 1 + (seed as usize % 3), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            for v in 0..n {
                // following parents terminates within n steps
                let mut cur = v;
                let mut steps = 0;
                while let Some(p) = ont.parent[cur] { cur = p; steps += 1; prop_assert!(steps <= n); }
                prop_assert_eq!(cur, ont.root[v]);
            }
            for _ in 0..20 {
                let (a, b, c) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n));
                let dab = ont.distance_by_index(a, b);
                prop_assert_eq!(dab, ont.distance_by_index(b, a));
                prop_assert_eq!(dab == Distance::Hops(0), a == b);
                if let (Distance::Hops(x), Distance::Hops(y), Distance::Hops(z)) =
                    (dab, ont.distance_by_index(b, c), ont.distance_by_index(a, c)) {
                    prop_assert!(z <= x + y);
                }
            }
        }
    }
}
