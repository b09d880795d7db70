//! Auxiliary-class hierarchies and the per-sample binary masks they induce.
//!
//! Auxiliary classes are indexed globally: primary class `i` owns the block
//! `offsets[i] .. offsets[i] + counts[i]` of a single `K`-wide output.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Number of auxiliary classes attached to each primary class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hierarchy {
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl Hierarchy {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument(
                "hierarchy needs at least one primary class".into(),
            ));
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "primary class {i} has no auxiliary classes"
            )));
        }
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for &c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        Ok(Self { counts, offsets })
    }

    /// `counts = [per_class; num_primary]`.
    pub fn balanced(num_primary: usize, per_class: usize) -> Result<Self> {
        Self::new(vec![per_class; num_primary])
    }

    /// Splits `total_aux` as evenly as possible; which primary classes receive the
    /// larger share is a seeded random choice.
    pub fn near_balanced(num_primary: usize, total_aux: usize, seed: u64) -> Result<Self> {
        if num_primary == 0 {
            return Err(Error::InvalidArgument(
                "hierarchy needs at least one primary class".into(),
            ));
        }
        if total_aux < num_primary {
            return Err(Error::TooFewAux {
                needed: num_primary,
                got: total_aux,
            });
        }
        let base = total_aux / num_primary;
        let extra = total_aux % num_primary;
        let mut order: Vec<usize> = (0..num_primary).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut counts = vec![base; num_primary];
        for &i in &order[..extra] {
            counts[i] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_primary(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Global index range of the auxiliary block owned by `primary`.
    pub fn block(&self, primary: usize) -> Result<std::ops::Range<usize>> {
        if primary >= self.counts.len() {
            return Err(Error::PrimaryClassOutOfRange {
                class: primary,
                num_primary: self.counts.len(),
            });
        }
        Ok(self.offsets[primary]..self.offsets[primary + 1])
    }

    /// Primary class owning global auxiliary index `aux`.
    pub fn primary_of(&self, aux: usize) -> Option<usize> {
        if aux >= self.total() {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= aux) - 1)
    }

    /// Binary mask with ones exactly on the block of `primary`.
    pub fn mask(&self, primary: usize) -> Result<Vec<f64>> {
        let block = self.block(primary)?;
        let mut m = vec![0.0; self.total()];
        m[block].iter_mut().for_each(|v| *v = 1.0);
        Ok(m)
    }

    /// Stacked masks `[labels.len(), K]`.
    pub fn mask_batch(&self, labels: &[usize]) -> Result<Tensor> {
        let k = self.total();
        let mut data = vec![0.0; labels.len() * k];
        for (r, &y) in labels.iter().enumerate() {
            let block = self.block(y)?;
            data[r * k + block.start..r * k + block.end]
                .iter_mut()
                .for_each(|v| *v = 1.0);
        }
        Tensor::matrix(labels.len(), k, data)
    }
}

/// Mask `B(y, ψ)` for one primary label.
pub fn build_mask(y: usize, psi: &Hierarchy) -> Result<Vec<f64>> {
    psi.mask(y)
}

/// Levels of the four-level CIFAR-100 hierarchy, coarse to fine.
pub const HUMAN_LEVELS: [usize; 4] = [3, 10, 20, 100];

const CIFAR100_HIERARCHY: &str = include_str!("../data/cifar100_hierarchy.txt");

/// The 3/10/20/100-class CIFAR-100 hierarchy keyed by fine class.
///
/// Within each coarse level, class indices follow the alphabetical order of the
/// level's class names, which for the 20-class level coincides with the
/// dataset's coarse labels.
#[derive(Clone, Debug)]
pub struct HumanHierarchyMap {
    fine_names: Vec<String>,
    /// `level_names[l]` lists the names of level `HUMAN_LEVELS[l]`.
    level_names: [Vec<String>; 4],
    /// `assign[l][fine]` is the class at level `HUMAN_LEVELS[l]` of fine class `fine`.
    assign: [Vec<usize>; 4],
}

impl HumanHierarchyMap {
    /// The map shipped with the crate.
    pub fn cifar100() -> Self {
        Self::parse(CIFAR100_HIERARCHY).expect("bundled hierarchy file is valid")
    }

    /// Parses lines `fine-name,fine-index,20-level,10-level,3-level`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "hierarchy map",
            detail,
        };
        let mut rows: Vec<Option<[String; 4]>> = vec![None; 100];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 || fields.iter().any(|f| f.is_empty()) {
                return Err(bad(format!("line {}: expected 5 non-empty fields", lineno + 1)));
            }
            let idx: usize = fields[1]
                .parse()
                .map_err(|_| bad(format!("line {}: bad fine index `{}`", lineno + 1, fields[1])))?;
            if idx >= 100 {
                return Err(bad(format!("line {}: fine index {idx} out of range", lineno + 1)));
            }
            if rows[idx].is_some() {
                return Err(bad(format!("line {}: duplicate fine index {idx}", lineno + 1)));
            }
            rows[idx] = Some([
                fields[4].to_string(),
                fields[3].to_string(),
                fields[2].to_string(),
                fields[0].to_string(),
            ]);
        }
        let rows: Vec<[String; 4]> = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| bad(format!("fine index {i} missing"))))
            .collect::<Result<_>>()?;

        let mut level_names: [Vec<String>; 4] = Default::default();
        let mut assign: [Vec<usize>; 4] = Default::default();
        for l in 0..4 {
            let names: BTreeMap<&str, usize> = rows.iter().map(|r| (r[l].as_str(), 0)).collect();
            let names: Vec<String> = names.keys().map(|s| s.to_string()).collect();
            if names.len() != HUMAN_LEVELS[l] {
                return Err(bad(format!("level {} has {} classes", HUMAN_LEVELS[l], names.len())));
            }
            assign[l] = rows.iter().map(|r| names.binary_search(&r[l]).unwrap()).collect();
            level_names[l] = names;
        }
        let mut per_super = [0usize; 20];
        for &c in &assign[2] {
            per_super[c] += 1;
        }
        if let Some(c) = per_super.iter().position(|&n| n != 5) {
            return Err(bad(format!(
                "superclass `{}` has {} fine classes, expected 5",
                level_names[2][c], per_super[c]
            )));
        }
        // Fine classes are indexed by the file, not alphabetically.
        assign[3] = (0..100).collect();
        level_names[3] = rows.iter().map(|r| r[3].clone()).collect();

        // Each class must sit inside exactly one class of every coarser level.
        for fine_l in 1..4 {
            for coarse_l in 0..fine_l {
                let mut parent = vec![None; HUMAN_LEVELS[fine_l]];
                for f in 0..100 {
                    let (c, p) = (assign[fine_l][f], assign[coarse_l][f]);
                    match parent[c] {
                        None => parent[c] = Some(p),
                        Some(q) if q != p => {
                            return Err(bad(format!(
                                "class `{}` spans several classes at level {}",
                                level_names[fine_l][c], HUMAN_LEVELS[coarse_l]
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(Self {
            fine_names: level_names[3].clone(),
            level_names,
            assign,
        })
    }

    fn level_slot(level: usize) -> Option<usize> {
        HUMAN_LEVELS.iter().position(|&l| l == level)
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_names.iter().position(|n| n == name)
    }

    /// Class index at `level` of fine class `fine`.
    pub fn class_at(&self, level: usize, fine: usize) -> Option<usize> {
        Some(*self.assign[Self::level_slot(level)?].get(fine)?)
    }

    pub fn class_name(&self, level: usize, class: usize) -> Option<&str> {
        Some(self.level_names[Self::level_slot(level)?].get(class)?.as_str())
    }
}

/// Primary labels, global auxiliary labels and the induced hierarchy for a
/// human-defined (primary level, finer auxiliary level) pair.
#[derive(Clone, Debug)]
pub struct HumanLabels {
    pub primary: Vec<usize>,
    pub aux: Vec<usize>,
    pub hierarchy: Hierarchy,
}

impl HumanLabels {
    pub fn aux_one_hot(&self) -> Tensor {
        Tensor::one_hot(&self.aux, self.hierarchy.total())
    }
}

pub fn human_aux_labels(
    map: &HumanHierarchyMap,
    primary_level: usize,
    aux_level: usize,
    fine_labels: &[usize],
) -> Result<HumanLabels> {
    let invalid = || Error::InvalidLevelPair {
        primary: primary_level,
        aux: aux_level,
    };
    let p_slot = HumanHierarchyMap::level_slot(primary_level).ok_or_else(invalid)?;
    let a_slot = HumanHierarchyMap::level_slot(aux_level).ok_or_else(invalid)?;
    if a_slot <= p_slot {
        return Err(invalid());
    }
    // Auxiliary classes of each primary class, in increasing index order.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); primary_level];
    for f in 0..100 {
        let (p, a) = (map.assign[p_slot][f], map.assign[a_slot][f]);
        if !children[p].contains(&a) {
            children[p].push(a);
        }
    }
    children.iter_mut().for_each(|c| c.sort_unstable());
    let hierarchy = Hierarchy::new(children.iter().map(Vec::len).collect())?;

    let mut primary = Vec::with_capacity(fine_labels.len());
    let mut aux = Vec::with_capacity(fine_labels.len());
    for &f in fine_labels {
        if f >= 100 {
            return Err(Error::InvalidArgument(format!("fine label {f} outside [0, 100)")));
        }
        let (p, a) = (map.assign[p_slot][f], map.assign[a_slot][f]);
        let pos = children[p].iter().position(|&c| c == a).unwrap();
        primary.push(p);
        aux.push(hierarchy.offsets()[p] + pos);
    }
    Ok(HumanLabels {
        primary,
        aux,
        hierarchy,
    })
}
