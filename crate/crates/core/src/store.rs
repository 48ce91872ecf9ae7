//! Timestamp-indexed fact storage and window functions over it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Bound;

use crate::model::{Fact, GroundAtom, Relation, Snapshot, Tuple, Value, WindowSpec};

/// Facts indexed by `(predicate, timestamp)`.
///
/// The store is a plain value: one writer mutates it, readers take immutable
/// range snapshots (`range`, `window_snapshot`) and can share the store
/// behind an `Arc<RwLock<_>>` when they live on other threads.
#[derive(Debug, Clone, Default)]
pub struct FactStore {
    by_predicate: HashMap<Value, BTreeMap<u64, Vec<Tuple>>>,
    watermark: Option<u64>,
    len: usize,
}

impl FactStore {
    pub fn new() -> Self {
        FactStore::default()
    }

    pub fn insert(&mut self, fact: Fact) {
        let Fact { atom, timestamp_ms } = fact;
        self.by_predicate
            .entry(atom.predicate)
            .or_default()
            .entry(timestamp_ms)
            .or_default()
            .push(atom.args);
        self.watermark = Some(self.watermark.map_or(timestamp_ms, |w| w.max(timestamp_ms)));
        self.len += 1;
    }

    /// Largest timestamp ever inserted.
    pub fn watermark(&self) -> Option<u64> {
        self.watermark
    }

    /// Number of stored facts, duplicates included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn predicates(&self) -> impl Iterator<Item = &Value> {
        self.by_predicate.keys()
    }

    /// All facts with `t_lo < timestamp <= t_hi`, ordered by predicate then time.
    pub fn range(&self, t_lo: u64, t_hi: u64) -> Vec<Fact> {
        let mut preds: Vec<&Value> = self.by_predicate.keys().collect();
        preds.sort();
        let mut out = Vec::new();
        for p in preds {
            for (ts, tuple) in self.range_of(p, t_lo, t_hi) {
                out.push(Fact::new(
                    GroundAtom {
                        predicate: p.clone(),
                        args: tuple.clone(),
                    },
                    ts,
                ));
            }
        }
        out
    }

    /// `(timestamp, tuple)` pairs of one predicate in `(t_lo, t_hi]`.
    pub fn range_of<'a>(
        &'a self,
        predicate: &str,
        t_lo: u64,
        t_hi: u64,
    ) -> impl Iterator<Item = (u64, &'a Tuple)> + 'a {
        let index = if t_lo < t_hi {
            self.by_predicate.get(predicate)
        } else {
            None
        };
        index.into_iter().flat_map(move |idx| {
            idx.range((Bound::Excluded(t_lo), Bound::Included(t_hi)))
                .flat_map(|(ts, tuples)| tuples.iter().map(move |t| (*ts, t)))
        })
    }

    /// Deduplicated tuples of `predicate` in the window evaluated at `t_eval`.
    pub fn window_relation(&self, predicate: &str, spec: WindowSpec, t_eval: u64) -> Relation {
        let lo = t_eval.saturating_sub(spec.length_ms);
        let mut rel = Relation::new();
        if spec.length_ms == 0 {
            return rel;
        }
        if spec.length_ms > t_eval {
            // The window reaches back past time zero: include timestamp 0.
            if let Some(idx) = self.by_predicate.get(predicate) {
                for tuples in idx.range(..=t_eval).map(|(_, v)| v) {
                    rel.extend(tuples.iter().cloned());
                }
            }
            return rel;
        }
        rel.extend(self.range_of(predicate, lo, t_eval).map(|(_, t)| t.clone()));
        rel
    }

    /// Per-predicate window contents for the given predicates.
    pub fn window_snapshot<'a>(
        &self,
        predicates: impl IntoIterator<Item = &'a Value>,
        spec: WindowSpec,
        t_eval: u64,
    ) -> Snapshot {
        predicates
            .into_iter()
            .map(|p| (p.clone(), self.window_relation(p, spec, t_eval)))
            .collect()
    }

    /// Set-semantics view: every stored atom once, timestamps ignored.
    pub fn set_view(&self) -> BTreeSet<GroundAtom> {
        let mut out = BTreeSet::new();
        for (p, idx) in &self.by_predicate {
            for tuples in idx.values() {
                for t in tuples {
                    out.insert(GroundAtom {
                        predicate: p.clone(),
                        args: t.clone(),
                    });
                }
            }
        }
        out
    }

    /// Drops every fact with `timestamp <= t`.
    pub fn evict_through(&mut self, t: u64) {
        let mut removed = 0;
        for idx in self.by_predicate.values_mut() {
            let keep = match t.checked_add(1) {
                Some(next) => idx.split_off(&next),
                None => BTreeMap::new(),
            };
            removed += idx.values().map(Vec::len).sum::<usize>();
            *idx = keep;
        }
        self.by_predicate.retain(|_, idx| !idx.is_empty());
        self.len -= removed;
    }
}

impl Extend<Fact> for FactStore {
    fn extend<I: IntoIterator<Item = Fact>>(&mut self, iter: I) {
        for f in iter {
            self.insert(f);
        }
    }
}

impl FromIterator<Fact> for FactStore {
    fn from_iter<I: IntoIterator<Item = Fact>>(iter: I) -> Self {
        let mut s = FactStore::new();
        s.extend(iter);
        s
    }
}

/// `{ a | (a, t) ∈ store, t_eval − ℓ < t ≤ t_eval }`, deduplicated.
pub fn window_contents(store: &FactStore, spec: WindowSpec, t_eval: u64) -> BTreeSet<GroundAtom> {
    let mut out = BTreeSet::new();
    for p in store.predicates() {
        for t in store.window_relation(p, spec, t_eval) {
            out.insert(GroundAtom {
                predicate: p.clone(),
                args: t,
            });
        }
    }
    out
}
