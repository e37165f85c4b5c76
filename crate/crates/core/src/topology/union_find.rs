//! Disjoint-set forest with the elder rule.
//!
//! Each component remembers its creator: the (birth index, node index) pair
//! that is lexicographically smallest among its members' entries. When two
//! components merge, the younger creator dies; ties on birth index kill the
//! higher node index so results never depend on traversal order.

pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
    /// (birth_idx, node) of the component's oldest member, tracked at roots.
    creator: Vec<(usize, usize)>,
}

impl UnionFind {
    pub fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
            creator: (0..n).map(|v| (usize::MAX, v)).collect(),
        }
    }

    /// Marks `v` as entered at threshold index `birth_idx`, creating its
    /// singleton component.
    pub fn activate(&mut self, v: usize, birth_idx: usize) {
        self.creator[v] = (birth_idx, v);
    }

    pub fn find(&mut self, v: usize) -> usize {
        let mut root = v;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = v;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merges the components of `u` and `v`. Returns the dying component's
    /// (birth_idx, creator node) when a real merge happens, or None when the
    /// endpoints were already connected (a cycle-closing edge).
    pub fn union(&mut self, u: usize, v: usize) -> Option<(usize, usize)> {
        let ru = self.find(u);
        let rv = self.find(v);
        if ru == rv {
            return None;
        }
        let (elder, young) = if self.creator[ru] <= self.creator[rv] { (ru, rv) } else { (rv, ru) };
        let dying = self.creator[young];
        let surviving = self.creator[elder];
        // Union by rank; the surviving creator moves to whichever root wins.
        let (hi, lo) = if self.rank[elder] >= self.rank[young] { (elder, young) } else { (young, elder) };
        self.parent[lo] = hi;
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        self.creator[hi] = surviving;
        Some(dying)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_kills_the_younger_creator() {
        let mut uf = UnionFind::new(3);
        uf.activate(0, 0);
        uf.activate(1, 1);
        assert_eq!(uf.union(0, 1), Some((1, 1)));
        uf.activate(2, 2);
        assert_eq!(uf.union(1, 2), Some((2, 2)));
        assert_eq!(uf.union(0, 2), None);
    }

    #[test]
    fn equal_births_kill_the_higher_index() {
        let mut uf = UnionFind::new(4);
        for v in 0..4 {
            uf.activate(v, 0);
        }
        assert_eq!(uf.union(2, 1), Some((0, 2)));
        assert_eq!(uf.union(3, 0), Some((0, 3)));
        assert_eq!(uf.union(1, 3), Some((0, 1)));
    }

    #[test]
    fn find_compresses_paths_without_changing_roots() {
        let mut uf = UnionFind::new(5);
        for v in 0..5 {
            uf.activate(v, v);
        }
        uf.union(0, 1);
        uf.union(1, 2);
        uf.union(2, 3);
        let root = uf.find(3);
        assert_eq!(uf.find(0), root);
        assert_eq!(uf.find(4), 4);
    }
}
