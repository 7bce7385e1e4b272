//! Balanced random sampling.
//!
//! Slides sit in per-group shuffled lists. Picks cycle through the groups in
//! a fixed order; a group whose list runs out is reshuffled and restarted,
//! which over-samples the smaller groups. An epoch is one pass of the
//! longest list, and every list is reshuffled from the start at each epoch
//! boundary so every slide is emitted at least once per epoch.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::slide_store::ClassLabel;
use crate::tiling::TileRef;

/// Binary classification problems the pipeline trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Diffuse-type vs everything else.
    OneStage,
    /// Any ADC vs non-neoplastic (first stage of the two-stage method).
    AdcDetection,
    /// Diffuse-type vs other ADC; non-neoplastic slides are not used.
    DiffuseGivenAdc,
}

impl Task {
    pub fn positive_labels(&self) -> &'static [ClassLabel] {
        match self {
            Task::OneStage | Task::DiffuseGivenAdc => &[ClassLabel::DiffuseAdc],
            Task::AdcDetection => &[ClassLabel::DiffuseAdc, ClassLabel::OtherAdc],
        }
    }

    pub fn negative_labels(&self) -> &'static [ClassLabel] {
        match self {
            Task::OneStage => &[ClassLabel::OtherAdc, ClassLabel::NonNeoplastic],
            Task::AdcDetection => &[ClassLabel::NonNeoplastic],
            Task::DiffuseGivenAdc => &[ClassLabel::OtherAdc],
        }
    }

    /// Binary target (1 = positive), or `None` when the label is not part of
    /// this task.
    pub fn target(&self, label: ClassLabel) -> Option<usize> {
        if self.positive_labels().contains(&label) {
            Some(1)
        } else if self.negative_labels().contains(&label) {
            Some(0)
        } else {
            None
        }
    }

    /// Groups slides are balanced over, positives first.
    pub fn groups(&self, balance: Balance) -> Vec<Vec<ClassLabel>> {
        match balance {
            Balance::Merged => vec![
                self.positive_labels().to_vec(),
                self.negative_labels().to_vec(),
            ],
            Balance::PerLabel => self
                .positive_labels()
                .iter()
                .chain(self.negative_labels())
                .map(|&l| vec![l])
                .collect(),
        }
    }
}

/// How labels are grouped for batch balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    /// Two groups: positive labels and negative labels.
    #[default]
    Merged,
    /// One group per class label.
    PerLabel,
}

/// One slide pick from the queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pick {
    pub slide_id: String,
    pub label: ClassLabel,
    pub group: usize,
    pub epoch: usize,
    /// Set on the final pick of an epoch.
    pub epoch_end: bool,
}

#[derive(Debug, Clone)]
pub struct BalancedQueue {
    groups: Vec<Vec<(String, ClassLabel)>>,
    order: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    next_group: usize,
    epoch: usize,
    picks_in_epoch: usize,
    rng: ChaCha8Rng,
}

impl BalancedQueue {
    /// Builds the queue from `(slide_id, label)` pairs. Slides whose label
    /// falls in no group are ignored; each group must hold at least one.
    pub fn new(
        slides: &[(String, ClassLabel)],
        groups: &[Vec<ClassLabel>],
        seed: u64,
    ) -> Result<Self> {
        let mut members: Vec<Vec<(String, ClassLabel)>> = vec![Vec::new(); groups.len()];
        for (id, label) in slides {
            if let Some(g) = groups.iter().position(|labels| labels.contains(label)) {
                members[g].push((id.clone(), *label));
            }
        }
        if groups.is_empty() {
            return Err(Error::Configuration("no label groups given".into()));
        }
        for (g, m) in members.iter_mut().enumerate() {
            if m.is_empty() {
                return Err(Error::Configuration(format!(
                    "label group {:?} has no slides",
                    groups[g]
                )));
            }
            m.sort();
        }
        let mut q = BalancedQueue {
            order: members.iter().map(|m| (0..m.len()).collect()).collect(),
            cursors: vec![0; members.len()],
            groups: members,
            next_group: 0,
            epoch: 0,
            picks_in_epoch: 0,
            rng: rng::stream(seed, "balanced_queue"),
        };
        q.start_epoch();
        Ok(q)
    }

    fn start_epoch(&mut self) {
        for (order, cursor) in self.order.iter_mut().zip(self.cursors.iter_mut()) {
            order.shuffle(&mut self.rng);
            *cursor = 0;
        }
        self.next_group = 0;
        self.picks_in_epoch = 0;
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Picks per epoch: the longest list's length times the group count.
    pub fn epoch_len(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0) * self.groups.len()
    }

    pub fn next_wsi(&mut self) -> Pick {
        let g = self.next_group;
        if self.cursors[g] == self.order[g].len() {
            self.order[g].shuffle(&mut self.rng);
            self.cursors[g] = 0;
        }
        let (slide_id, label) = self.groups[g][self.order[g][self.cursors[g]]].clone();
        self.cursors[g] += 1;
        self.next_group = (g + 1) % self.groups.len();
        self.picks_in_epoch += 1;
        let epoch = self.epoch;
        let epoch_end = self.picks_in_epoch == self.epoch_len();
        if epoch_end {
            self.epoch += 1;
            self.start_epoch();
        }
        Pick {
            slide_id,
            label,
            group: g,
            epoch,
            epoch_end,
        }
    }
}

/// Candidate tiles of one slide.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TilePools {
    pub tissue: Vec<TileRef>,
    pub annotation: Vec<TileRef>,
    pub annotated: bool,
}

impl TilePools {
    /// Tiles training draws from: annotated regions when the slide carries
    /// annotations, the whole tissue otherwise.
    pub fn training_pool(&self) -> &[TileRef] {
        if self.annotated {
            &self.annotation
        } else {
            &self.tissue
        }
    }
}

/// Draws `n` tiles uniformly from `pool`: without replacement when the pool
/// is large enough, with replacement otherwise.
pub fn sample_tiles_from_wsi(
    slide_id: &str,
    pool: &[TileRef],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TileRef>> {
    if n == 0 {
        return Err(Error::Argument("tile count must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::NoTissue(format!("slide {slide_id} has no candidate tiles")));
    }
    if pool.len() >= n {
        Ok(rand::seq::index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect())
    } else {
        Ok((0..n)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileBatch {
    pub tiles: Vec<TileRef>,
    /// Slide-level label of each tile's source slide.
    pub labels: Vec<ClassLabel>,
    /// Balancing group of each tile.
    pub groups: Vec<usize>,
    pub epoch: usize,
    pub epoch_end: bool,
}

impl TileBatch {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Infinite stream of balanced batches: each batch takes
/// `batch_size / groups` tiles from one slide of every group.
pub struct BalancedBatches<'a> {
    queue: BalancedQueue,
    pools: &'a HashMap<String, TilePools>,
    per_group: usize,
    rng: ChaCha8Rng,
}

impl<'a> BalancedBatches<'a> {
    pub fn new(
        queue: BalancedQueue,
        pools: &'a HashMap<String, TilePools>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let g = queue.num_groups();
        if batch_size == 0 || batch_size % g != 0 {
            return Err(Error::Configuration(format!(
                "batch size {batch_size} is not divisible by the {g} label groups"
            )));
        }
        Ok(BalancedBatches {
            queue,
            pools,
            per_group: batch_size / g,
            rng: rng::stream(seed, "balanced_tiles"),
        })
    }

    pub fn queue(&self) -> &BalancedQueue {
        &self.queue
    }

    /// Batches per epoch.
    pub fn epoch_batches(&self) -> usize {
        self.queue.epoch_len() / self.queue.num_groups()
    }

    pub fn next_batch(&mut self) -> Result<TileBatch> {
        let mut batch = TileBatch {
            tiles: Vec::new(),
            labels: Vec::new(),
            groups: Vec::new(),
            epoch: self.queue.epoch(),
            epoch_end: false,
        };
        for _ in 0..self.queue.num_groups() {
            let pick = self.queue.next_wsi();
            let pools = self.pools.get(&pick.slide_id).ok_or_else(|| {
                Error::Configuration(format!("no tile pools for slide {}", pick.slide_id))
            })?;
            let tiles =
                sample_tiles_from_wsi(&pick.slide_id, pools.training_pool(), self.per_group, &mut self.rng)?;
            batch.labels.extend(std::iter::repeat_n(pick.label, tiles.len()));
            batch.groups.extend(std::iter::repeat_n(pick.group, tiles.len()));
            batch.tiles.extend(tiles);
            batch.epoch_end |= pick.epoch_end;
        }
        Ok(batch)
    }
}

impl Iterator for BalancedBatches<'_> {
    type Item = Result<TileBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_store::Magnification;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    const P: ClassLabel = ClassLabel::DiffuseAdc;
    const N: ClassLabel = ClassLabel::NonNeoplastic;

    fn slides(np: usize, nn: usize) -> Vec<(String, ClassLabel)> {
        (0..np)
            .map(|i| (format!("p{i}"), P))
            .chain((0..nn).map(|i| (format!("n{i}"), N)))
            .collect()
    }

    fn tile(slide: &str, x: u32) -> TileRef {
        TileRef {
            slide_id: slide.into(),
            magnification: Magnification::X20,
            origin: [x, 0],
            tile_px: 224,
            label: None,
        }
    }

    #[test]
    fn alternation_and_oversampling() {
        let groups = Task::OneStage.groups(Balance::Merged);
        let mut q = BalancedQueue::new(&slides(1, 3), &groups, 5).unwrap();
        let picks: Vec<Pick> = (0..6).map(|_| q.next_wsi()).collect();
        let labels: Vec<ClassLabel> = picks.iter().map(|p| p.label).collect();
        assert_eq!(labels, vec![P, N, P, N, P, N]);
        assert_eq!(picks.iter().filter(|p| p.slide_id == "p0").count(), 3);
        assert!(picks[5].epoch_end);
        assert!(picks[..5].iter().all(|p| !p.epoch_end));
        let negs: HashSet<_> = picks.iter().filter(|p| p.label == N).map(|p| &p.slide_id).collect();
        assert_eq!(negs.len(), 3);
    }

    #[test]
    fn fixed_seed_repeats() {
        let groups = Task::OneStage.groups(Balance::Merged);
        let run = |seed| {
            let mut q = BalancedQueue::new(&slides(4, 9), &groups, seed).unwrap();
            (0..40).map(|_| q.next_wsi().slide_id).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn empty_group_is_configuration_error() {
        let groups = Task::OneStage.groups(Balance::Merged);
        assert!(matches!(
            BalancedQueue::new(&slides(0, 3), &groups, 1),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn replacement_when_pool_small() {
        let pool = vec![tile("p0", 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let got = sample_tiles_from_wsi("p0", &pool, 4, &mut rng).unwrap();
        assert_eq!(got, vec![pool[0].clone(); 4]);
        assert!(matches!(
            sample_tiles_from_wsi("p0", &[], 4, &mut rng),
            Err(Error::NoTissue(_))
        ));
    }

    #[test]
    fn draws_come_from_pool_and_repeat_under_seed() {
        let pool: Vec<TileRef> = (0..20).map(|i| tile("n0", i * 224)).collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_tiles_from_wsi("n0", &pool, 8, &mut rng).unwrap()
        };
        let a = draw(9);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|t| pool.contains(t)));
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 8, "no repeats when pool is large");
        assert_eq!(a, draw(9));
    }

    fn pools_for(s: &[(String, ClassLabel)]) -> HashMap<String, TilePools> {
        s.iter()
            .map(|(id, _)| {
                (
                    id.clone(),
                    TilePools {
                        tissue: (0..5).map(|i| tile(id, i * 224)).collect(),
                        annotation: vec![],
                        annotated: false,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn batches_are_balanced_and_cover_epoch() {
        let s = slides(3, 7);
        let pools = pools_for(&s);
        let groups = Task::OneStage.groups(Balance::Merged);
        let q = BalancedQueue::new(&s, &groups, 2).unwrap();
        let mut b = BalancedBatches::new(q, &pools, 32, 2).unwrap();
        assert_eq!(b.epoch_batches(), 7);
        let mut seen = HashSet::new();
        for i in 0..7 {
            let batch = b.next_batch().unwrap();
            assert_eq!(batch.len(), 32);
            assert_eq!(batch.labels.iter().filter(|&&l| l == P).count(), 16);
            assert_eq!(batch.labels.iter().filter(|&&l| l == N).count(), 16);
            assert_eq!(batch.epoch_end, i == 6);
            seen.extend(batch.tiles.iter().map(|t| t.slide_id.clone()));
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn indivisible_batch_rejected() {
        let s = vec![
            ("p".to_string(), P),
            ("o".to_string(), ClassLabel::OtherAdc),
            ("n".to_string(), N),
        ];
        let pools = pools_for(&s);
        let groups = Task::OneStage.groups(Balance::PerLabel);
        assert_eq!(groups.len(), 3);
        let q = BalancedQueue::new(&s, &groups, 2).unwrap();
        assert!(matches!(
            BalancedBatches::new(q.clone(), &pools, 32, 2),
            Err(Error::Configuration(_))
        ));
        let mut b = BalancedBatches::new(q, &pools, 33, 2).unwrap();
        let batch = b.next_batch().unwrap();
        for l in ClassLabel::ALL {
            assert_eq!(batch.labels.iter().filter(|&&x| x == l).count(), 11);
        }
    }

    #[test]
    fn distinct_seeds_diverge_quickly() {
        let s = slides(6, 12);
        let pools = pools_for(&s);
        let groups = Task::OneStage.groups(Balance::Merged);
        let stream = |seed| {
            let q = BalancedQueue::new(&s, &groups, seed).unwrap();
            let mut b = BalancedBatches::new(q, &pools, 32, seed).unwrap();
            (0..3).map(|_| b.next_batch().unwrap().tiles).collect::<Vec<_>>()
        };
        assert_eq!(stream(10), stream(10));
        assert_ne!(stream(10), stream(11));
    }

    proptest! {
        #[test]
        fn every_epoch_covers_every_slide(np in 1usize..8, nn in 1usize..15, seed in 0u64..1000, epochs in 1usize..4) {
            let s = slides(np, nn);
            let groups = Task::OneStage.groups(Balance::Merged);
            let mut q = BalancedQueue::new(&s, &groups, seed).unwrap();
            for _ in 0..epochs {
                let mut seen = HashSet::new();
                loop {
                    let p = q.next_wsi();
                    seen.insert(p.slide_id);
                    if p.epoch_end { break; }
                }
                prop_assert_eq!(seen.len(), np + nn);
            }
        }
    }
}
