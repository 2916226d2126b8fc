//! A small finite-domain constraint solver with generalized arc consistency.
//!
//! Every constraint reads its variables through value maps: the constraint
//! `(x_1, m_1), …, (x_k, m_k) ∈ R` holds when `(m_1(x_1), …, m_k(x_k)) ∈ R`.

use std::collections::HashMap;

use crate::error::{Error, Result};

struct Con {
    vars: Vec<usize>,
    slot: Vec<usize>,
    maps: Vec<usize>,
    rel: usize,
}

pub(crate) struct Csp {
    n: usize,
    doms: Vec<u64>,
    maps: Vec<Vec<usize>>,
    map_ids: HashMap<Vec<usize>, usize>,
    pre: Vec<Vec<u64>>,
    rels: Vec<Vec<Vec<usize>>>,
    cons: Vec<Con>,
    watch: Vec<Vec<usize>>,
    trail: Vec<(usize, u64)>,
    pub nodes: u64,
    budget: u64,
}

impl Csp {
    pub fn new(n: usize, vars: usize, budget: u64) -> Result<Self> {
        if n == 0 || n > 64 {
            return Err(Error::pre(format!("solver domain size {n} is outside 1..=64")));
        }
        let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        let mut csp = Csp {
            n,
            doms: vec![full; vars],
            maps: Vec::new(),
            map_ids: HashMap::new(),
            pre: Vec::new(),
            rels: Vec::new(),
            cons: Vec::new(),
            watch: vec![Vec::new(); vars],
            trail: Vec::new(),
            nodes: 0,
            budget,
        };
        csp.map_id(&(0..n).collect::<Vec<_>>());
        Ok(csp)
    }

    pub fn map_id(&mut self, m: &[usize]) -> usize {
        if let Some(&id) = self.map_ids.get(m) {
            return id;
        }
        let id = self.maps.len();
        let mut pre = vec![0u64; self.n];
        for (x, &y) in m.iter().enumerate() {
            pre[y] |= 1 << x;
        }
        self.maps.push(m.to_vec());
        self.pre.push(pre);
        self.map_ids.insert(m.to_vec(), id);
        id
    }

    pub fn add_relation(&mut self, tuples: Vec<Vec<usize>>) -> usize {
        self.rels.push(tuples);
        self.rels.len() - 1
    }

    pub fn restrict(&mut self, var: usize, mask: u64) {
        self.doms[var] &= mask;
    }

    pub fn add(&mut self, scope: &[(usize, usize)], rel: usize) {
        let mut vars: Vec<usize> = Vec::new();
        let mut slot = Vec::with_capacity(scope.len());
        for &(v, _) in scope {
            match vars.iter().position(|&w| w == v) {
                Some(i) => slot.push(i),
                None => {
                    slot.push(vars.len());
                    vars.push(v);
                }
            }
        }
        let ci = self.cons.len();
        for &v in &vars {
            self.watch[v].push(ci);
        }
        self.cons.push(Con { vars, slot, maps: scope.iter().map(|s| s.1).collect(), rel });
    }

    fn set(&mut self, v: usize, mask: u64) {
        self.trail.push((v, self.doms[v]));
        self.doms[v] = mask;
    }

    fn undo(&mut self, len: usize) {
        while self.trail.len() > len {
            let (v, m) = self.trail.pop().expect("trail entry");
            self.doms[v] = m;
        }
    }

    /// Returns false on a wipe-out.
    fn revise(&mut self, ci: usize, changed: &mut Vec<usize>) -> bool {
        let con = &self.cons[ci];
        let k = con.vars.len();
        let mut supp = vec![0u64; k];
        let mut mask = vec![0u64; k];
        'tuples: for t in &self.rels[con.rel] {
            for (i, &v) in con.vars.iter().enumerate() {
                mask[i] = self.doms[v];
            }
            for (p, &val) in t.iter().enumerate() {
                let s = con.slot[p];
                mask[s] &= self.pre[con.maps[p]][val];
                if mask[s] == 0 {
                    continue 'tuples;
                }
            }
            for i in 0..k {
                supp[i] |= mask[i];
            }
        }
        let updates: Vec<(usize, u64)> = con
            .vars
            .iter()
            .enumerate()
            .filter(|&(i, &v)| self.doms[v] & supp[i] != self.doms[v])
            .map(|(i, &v)| (v, self.doms[v] & supp[i]))
            .collect();
        for (v, m) in updates {
            self.set(v, m);
            if m == 0 {
                return false;
            }
            changed.push(v);
        }
        true
    }

    fn propagate(&mut self, mut queue: Vec<usize>, queued: &mut [bool]) -> bool {
        for &c in &queue {
            queued[c] = true;
        }
        let mut changed = Vec::new();
        while let Some(ci) = queue.pop() {
            queued[ci] = false;
            if !self.revise(ci, &mut changed) {
                for c in queue.drain(..) {
                    queued[c] = false;
                }
                return false;
            }
            for v in changed.drain(..) {
                for &c in &self.watch[v] {
                    if c != ci && !queued[c] {
                        queued[c] = true;
                        queue.push(c);
                    }
                }
            }
        }
        true
    }

    fn tick(&mut self) -> Result<()> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(Error::budget(format!("polymorphism search exceeded {} nodes", self.budget)));
        }
        Ok(())
    }

    fn assign(&mut self, v: usize, value: usize, queued: &mut [bool]) -> bool {
        if self.doms[v] & (1 << value) == 0 {
            return false;
        }
        self.set(v, 1 << value);
        let q = self.watch[v].clone();
        self.propagate(q, queued)
    }

    /// Search from the current state; the state is restored before returning.
    fn search(&mut self, queued: &mut [bool]) -> Result<Option<Vec<usize>>> {
        struct Frame {
            var: usize,
            left: u64,
            mark: usize,
        }
        let base = self.trail.len();
        let mut stack: Vec<Frame> = Vec::new();
        let mut descend = true;
        loop {
            if descend {
                let pick = (0..self.doms.len())
                    .filter(|&v| self.doms[v].count_ones() > 1)
                    .min_by_key(|&v| self.doms[v].count_ones());
                match pick {
                    None => {
                        let sol = self.doms.iter().map(|m| m.trailing_zeros() as usize).collect();
                        self.undo(base);
                        return Ok(Some(sol));
                    }
                    Some(v) => stack.push(Frame { var: v, left: self.doms[v], mark: self.trail.len() }),
                }
            }
            let Some(top) = stack.last_mut() else {
                self.undo(base);
                return Ok(None);
            };
            if top.left == 0 {
                let mark = top.mark;
                stack.pop();
                self.undo(mark);
                descend = false;
                continue;
            }
            let value = top.left.trailing_zeros() as usize;
            top.left &= top.left - 1;
            let (var, mark) = (top.var, top.mark);
            self.undo(mark);
            if let Err(e) = self.tick() {
                self.undo(base);
                return Err(e);
            }
            descend = self.assign(var, value, queued);
        }
    }

    fn initial(&mut self, queued: &mut [bool]) -> bool {
        if self.doms.contains(&0) {
            return false;
        }
        let all: Vec<usize> = (0..self.cons.len()).collect();
        self.propagate(all, queued)
    }

    pub fn solve(&mut self) -> Result<Option<Vec<usize>>> {
        let mut queued = vec![false; self.cons.len()];
        let mark = self.trail.len();
        if !self.initial(&mut queued) {
            self.undo(mark);
            return Ok(None);
        }
        let out = self.search(&mut queued);
        self.undo(mark);
        out
    }

    /// All distinct restrictions of solutions to `vars`, in lexicographic order.
    pub fn project_all(&mut self, vars: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut queued = vec![false; self.cons.len()];
        let mut out = Vec::new();
        let mark = self.trail.len();
        if self.initial(&mut queued) {
            let mut cur = Vec::with_capacity(vars.len());
            let r = self.project_rec(vars, &mut cur, &mut queued, &mut out);
            self.undo(mark);
            r?;
        }
        self.undo(mark);
        Ok(out)
    }

    fn project_rec(
        &mut self,
        vars: &[usize],
        cur: &mut Vec<usize>,
        queued: &mut [bool],
        out: &mut Vec<Vec<usize>>,
    ) -> Result<()> {
        if cur.len() == vars.len() {
            if self.search(queued)?.is_some() {
                out.push(cur.clone());
            }
            return Ok(());
        }
        let v = vars[cur.len()];
        let mut left = self.doms[v];
        while left != 0 {
            let value = left.trailing_zeros() as usize;
            left &= left - 1;
            self.tick()?;
            let mark = self.trail.len();
            if self.assign(v, value, queued) {
                cur.push(value);
                self.project_rec(vars, cur, queued, out)?;
                cur.pop();
            }
            self.undo(mark);
        }
        Ok(())
    }
}
