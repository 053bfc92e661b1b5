use crate::error::{Error, Result};
use crate::numkernel::Sample;
use crate::rng::{tags, StreamRng};

use super::FederatedDataset;

/// Delivers each client's training set as a stream: `v_c` samples per round,
/// drawn from a fresh uniform permutation every `shuffle_period` rounds.
///
/// The permutation for client `c` in period `p` (0-based) comes from the
/// substream `STREAM/c/p`, so any round can be reproduced without replaying
/// earlier ones.
#[derive(Debug, Clone)]
pub struct StreamSchedule {
    rng: StreamRng,
    shuffle_period: usize,
    train_counts: Vec<usize>,
    velocities: Vec<usize>,
    cached: Vec<Option<(usize, Vec<usize>)>>,
}

impl StreamSchedule {
    pub fn new(dataset: &FederatedDataset, shuffle_period: usize, seed: u64) -> Result<Self> {
        if shuffle_period == 0 {
            return Err(Error::config("shuffle period must be positive"));
        }
        let train_counts = dataset.train_counts();
        let velocities = train_counts
            .iter()
            .map(|&n| n.div_ceil(shuffle_period).max(1))
            .collect();
        Ok(Self {
            rng: StreamRng::new(seed).substream(tags::STREAM),
            shuffle_period,
            cached: vec![None; train_counts.len()],
            train_counts,
            velocities,
        })
    }

    pub fn velocity(&self, client: usize) -> usize {
        self.velocities[client]
    }

    pub fn velocities(&self) -> &[usize] {
        &self.velocities
    }

    pub fn shuffle_period(&self) -> usize {
        self.shuffle_period
    }

    fn permutation(&mut self, client: usize, period: usize) -> &[usize] {
        let stale = !matches!(&self.cached[client], Some((p, _)) if *p == period);
        if stale {
            let mut perm: Vec<usize> = (0..self.train_counts[client]).collect();
            self.rng
                .substream2(client as u64, period as u64)
                .shuffle(&mut perm);
            self.cached[client] = Some((period, perm));
        }
        &self.cached[client].as_ref().expect("just filled").1
    }

    /// Training-set indices delivered to `client` in 1-based `round`, in arrival order.
    pub fn round_indices(&mut self, client: usize, round: usize) -> Result<Vec<usize>> {
        if client >= self.train_counts.len() {
            return Err(Error::UnknownClient(client));
        }
        if round == 0 {
            return Err(Error::config("rounds are numbered from 1"));
        }
        let (period, within) = (
            (round - 1) / self.shuffle_period,
            (round - 1) % self.shuffle_period,
        );
        let v = self.velocities[client];
        let n = self.train_counts[client];
        let start = (within * v).min(n);
        let end = (start + v).min(n);
        Ok(self.permutation(client, period)[start..end].to_vec())
    }

    /// The samples `client` receives in `round`, tagged with their arrival index.
    pub fn next_round_samples(
        &mut self,
        dataset: &FederatedDataset,
        client: usize,
        round: usize,
    ) -> Result<Vec<Sample>> {
        let idx = self.round_indices(client, round)?;
        let n = self.train_counts[client];
        let v = self.velocities[client];
        let (period, within) = (
            (round - 1) / self.shuffle_period,
            (round - 1) % self.shuffle_period,
        );
        let base = (period * n + (within * v).min(n)) as u64;
        Ok(idx
            .into_iter()
            .enumerate()
            .map(|(i, j)| {
                let mut s = dataset.clients[client].train[j].clone();
                s.source_client = client;
                s.arrival_index = base + i as u64;
                s
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, SyntheticConfig};

    fn dataset(sizes: Vec<usize>) -> FederatedDataset {
        generate_synthetic(&SyntheticConfig {
            client_count: sizes.len(),
            input_dim: 3,
            samples_per_client: sizes,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn velocity_is_ceil_of_train_over_period() {
        // 625 total -> 500 train.
        let ds = dataset(vec![625, 1000, 60]);
        let s = StreamSchedule::new(&ds, 500, 1).unwrap();
        assert_eq!(s.velocities(), &[1, 2, 1]);
    }

    #[test]
    fn one_period_delivers_each_sample_once() {
        let ds = dataset(vec![625, 1000, 60]);
        let mut s = StreamSchedule::new(&ds, 500, 1).unwrap();
        for c in 0..3 {
            let mut all: Vec<usize> = (1..=500)
                .flat_map(|r| s.round_indices(c, r).unwrap())
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..ds.clients[c].train.len()).collect::<Vec<_>>());
        }
        assert_eq!(s.round_indices(0, 1).unwrap().len(), 1);
    }

    #[test]
    fn reshuffle_starts_a_new_permutation() {
        let ds = dataset(vec![625]);
        let mut s = StreamSchedule::new(&ds, 500, 1).unwrap();
        let first: Vec<usize> = (1..=500)
            .flat_map(|r| s.round_indices(0, r).unwrap())
            .collect();
        let second: Vec<usize> = (501..=1000)
            .flat_map(|r| s.round_indices(0, r).unwrap())
            .collect();
        assert_ne!(first, second);
        let (mut a, mut b) = (first.clone(), second.clone());
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn arrival_index_increases() {
        let ds = dataset(vec![100]);
        let mut s = StreamSchedule::new(&ds, 20, 2).unwrap();
        let mut last = None;
        for r in 1..=60 {
            for smp in s.next_round_samples(&ds, 0, r).unwrap() {
                if let Some(prev) = last {
                    assert!(smp.arrival_index > prev);
                }
                last = Some(smp.arrival_index);
            }
        }
    }

    #[test]
    fn unknown_client_is_an_error() {
        let ds = dataset(vec![100]);
        let mut s = StreamSchedule::new(&ds, 20, 2).unwrap();
        assert!(matches!(
            s.round_indices(3, 1),
            Err(Error::UnknownClient(3))
        ));
    }

    #[test]
    fn deterministic_across_instances() {
        let ds = dataset(vec![300, 80]);
        let mut a = StreamSchedule::new(&ds, 50, 9).unwrap();
        let mut b = StreamSchedule::new(&ds, 50, 9).unwrap();
        for r in [1, 2, 51, 120] {
            assert_eq!(
                a.round_indices(1, r).unwrap(),
                b.round_indices(1, r).unwrap()
            );
        }
    }
}
