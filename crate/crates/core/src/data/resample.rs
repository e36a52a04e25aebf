use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{DataError, DomainDataset};
use crate::rng::Rng;

/// Position of a cloud inside the list of source datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub source: usize,
    pub index: usize,
}

/// One same-class training unit: a cloud from every source domain that has
/// the class. Members pair with each other for cross-domain aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub class_id: usize,
    pub members: Vec<SampleRef>,
    /// Extra same-domain cloud used only as an aggregation partner when the
    /// class exists in a single source domain. Not trained on.
    pub fallback_partner: Option<SampleRef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexPlan {
    pub slots: Vec<Slot>,
    /// M_c: the largest per-domain count of each class.
    pub per_class_target: Vec<usize>,
    /// Source indices that hold each class.
    pub participating: Vec<Vec<usize>>,
}

impl IndexPlan {
    /// Number of times each (class, source) pair appears among slot members.
    pub fn cardinality(&self, class_id: usize, source: usize) -> usize {
        self.slots
            .iter()
            .filter(|s| s.class_id == class_id)
            .flat_map(|s| &s.members)
            .filter(|m| m.source == source)
            .count()
    }
}

/// Upsamples every class in every participating source to the class maximum
/// `M_c` and groups the pools position-wise into slots.
pub fn balanced_resample(
    sources: &[&DomainDataset],
    num_classes: usize,
    rng: &mut Rng,
) -> Result<IndexPlan, DataError> {
    if sources.len() < 2 {
        return Err(DataError::Protocol(format!(
            "balanced resampling needs at least 2 source domains, got {}",
            sources.len()
        )));
    }
    let mut slots = Vec::new();
    let mut per_class_target = Vec::with_capacity(num_classes);
    let mut participating = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let pools: Vec<(usize, Vec<usize>)> = sources
            .iter()
            .enumerate()
            .map(|(s, d)| {
                let idx: Vec<usize> = d
                    .clouds
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.class_id == class_id)
                    .map(|(i, _)| i)
                    .collect();
                (s, idx)
            })
            .filter(|(_, idx)| !idx.is_empty())
            .collect();
        if pools.is_empty() {
            return Err(DataError::Protocol(format!("class {class_id} is absent from every source domain")));
        }
        if pools.len() < sources.len() {
            let present: Vec<usize> = pools.iter().map(|p| p.0).collect();
            warn!("class {class_id} missing from some source domains; pairing only among sources {present:?}");
        }
        let target = pools.iter().map(|p| p.1.len()).max().unwrap();
        let mut columns = Vec::with_capacity(pools.len());
        for (_, idx) in &pools {
            let mut col = idx.clone();
            while col.len() < target {
                col.push(idx[rng.random_range(0..idx.len())]);
            }
            col.shuffle(rng);
            columns.push(col);
        }
        for j in 0..target {
            let members: Vec<SampleRef> = pools
                .iter()
                .zip(&columns)
                .map(|((s, _), col)| SampleRef { source: *s, index: col[j] })
                .collect();
            let fallback_partner = (pools.len() == 1).then(|| {
                let (s, idx) = &pools[0];
                warn!("class {class_id} exists in one source domain only; using same-domain partners");
                SampleRef { source: *s, index: idx[rng.random_range(0..idx.len())] }
            });
            slots.push(Slot { class_id, members, fallback_partner });
        }
        per_class_target.push(target);
        participating.push(pools.iter().map(|p| p.0).collect());
    }
    Ok(IndexPlan { slots, per_class_target, participating })
}
