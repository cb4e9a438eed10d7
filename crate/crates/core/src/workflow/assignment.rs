//! Division of a batch into N parts, each annotated by two annotators.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub part_index: usize,
    pub doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Duty {
    pub annotator: String,
    pub part_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    pub parts: Vec<Part>,
    pub duties: Vec<Duty>,
}

impl AssignmentPlan {
    /// Contiguous parts whose sizes differ by at most one; part `i` goes to
    /// annotators `i` and `i + 1 (mod N)` of the sorted annotator list rotated
    /// left by `rotation`.
    pub fn cyclic(doc_ids: &[String], annotators: &[String], rotation: usize) -> Self {
        let n = annotators.len();
        assert!(n >= 2, "cross-checking needs at least two annotators");
        let mut order = annotators.to_vec();
        order.sort();
        order.rotate_left(rotation % n);

        let (base, extra) = (doc_ids.len() / n, doc_ids.len() % n);
        let mut parts = Vec::with_capacity(n);
        let mut offset = 0;
        for i in 0..n {
            let size = base + usize::from(i < extra);
            parts.push(Part {
                part_index: i,
                doc_ids: doc_ids[offset..offset + size].to_vec(),
            });
            offset += size;
        }
        let duties = (0..n)
            .flat_map(|i| {
                [order[i].clone(), order[(i + 1) % n].clone()]
                    .into_iter()
                    .map(move |annotator| Duty { annotator, part_index: i })
            })
            .collect();
        Self { parts, duties }
    }

    pub fn part_of(&self, doc_id: &str) -> Option<usize> {
        self.parts
            .iter()
            .find(|p| p.doc_ids.iter().any(|d| d == doc_id))
            .map(|p| p.part_index)
    }

    /// The two annotators of a part, in duty order.
    pub fn annotators_of(&self, part_index: usize) -> Vec<&str> {
        self.duties
            .iter()
            .filter(|d| d.part_index == part_index)
            .map(|d| d.annotator.as_str())
            .collect()
    }

    pub fn annotators_for_doc(&self, doc_id: &str) -> Vec<&str> {
        self.part_of(doc_id).map(|p| self.annotators_of(p)).unwrap_or_default()
    }

    pub fn parts_of(&self, annotator: &str) -> Vec<usize> {
        self.duties
            .iter()
            .filter(|d| d.annotator == annotator)
            .map(|d| d.part_index)
            .collect()
    }

    /// Every doc this annotator must annotate, in part order.
    pub fn docs_of(&self, annotator: &str) -> Vec<&str> {
        self.parts_of(annotator)
            .into_iter()
            .flat_map(|p| self.parts[p].doc_ids.iter().map(String::as_str))
            .collect()
    }

    /// Describe the first broken topology invariant, if any.
    pub fn check(&self, doc_ids: &[String], annotators: &[String]) -> Result<(), String> {
        let mut all: Vec<&String> = self.parts.iter().flat_map(|p| &p.doc_ids).collect();
        all.sort();
        let mut expected: Vec<&String> = doc_ids.iter().collect();
        expected.sort();
        if all != expected {
            return Err("parts do not partition the batch".into());
        }
        let sizes: Vec<usize> = self.parts.iter().map(|p| p.doc_ids.len()).collect();
        if sizes.iter().max().unwrap_or(&0) - sizes.iter().min().unwrap_or(&0) > 1 {
            return Err(format!("part sizes {sizes:?} differ by more than one"));
        }
        if self.parts.len() != annotators.len() {
            return Err(format!("{} parts for {} annotators", self.parts.len(), annotators.len()));
        }
        for p in &self.parts {
            let who = self.annotators_of(p.part_index);
            if who.len() != 2 || who[0] == who[1] {
                return Err(format!("part {} assigned to {who:?}", p.part_index));
            }
        }
        let mut load: BTreeMap<&str, usize> = annotators.iter().map(|a| (a.as_str(), 0)).collect();
        for d in &self.duties {
            *load
                .get_mut(d.annotator.as_str())
                .ok_or_else(|| format!("unknown annotator {}", d.annotator))? += 1;
        }
        if let Some((a, n)) = load.iter().find(|(_, &n)| n != 2) {
            return Err(format!("annotator {a} has {n} parts"));
        }
        Ok(())
    }
}
