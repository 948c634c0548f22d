use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Index batches for one epoch with exactly half of each batch drawn from
/// each class, benign first.
///
/// The epoch has `max(1, floor(2 * majority / batch_size))` batches. A
/// class with enough samples to fill its halves is shuffled and consumed
/// without replacement; a smaller class is drawn with replacement.
pub fn balanced_batches<R: Rng + ?Sized>(labels: &[u8], batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "balanced batches need a positive even batch size, got {batch_size}"
        )));
    }
    let benign: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let malicious: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    if benign.is_empty() || malicious.is_empty() {
        return Err(Error::Dataset(format!(
            "balanced batches need both classes, got {} benign and {} malicious",
            benign.len(),
            malicious.len()
        )));
    }
    let half = batch_size / 2;
    let majority = benign.len().max(malicious.len());
    let batches = (2 * majority / batch_size).max(1);
    let needed = batches * half;
    let mut draw = |mut pool: Vec<usize>| -> Vec<usize> {
        if pool.len() >= needed {
            pool.shuffle(rng);
            pool.truncate(needed);
            pool
        } else {
            (0..needed).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    };
    let benign = draw(benign);
    let malicious = draw(malicious);
    Ok((0..batches)
        .map(|b| {
            let mut batch = benign[b * half..(b + 1) * half].to_vec();
            batch.extend_from_slice(&malicious[b * half..(b + 1) * half]);
            batch
        })
        .collect())
}

/// Shuffled consecutive batches covering every index once.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn imbalanced_pool_resamples_minority() {
        let mut labels = vec![0u8; 1000];
        labels.extend([1u8; 10]);
        let batches = balanced_batches(&labels, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batches.len(), 250);
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| labels[i] == 1).count(), 4);
            assert!(b[..4].iter().all(|&i| labels[i] == 0));
        }
        let malicious: Vec<usize> = batches.iter().flat_map(|b| b[4..].to_vec()).collect();
        assert!(malicious.len() > malicious.iter().collect::<HashSet<_>>().len());
    }

    #[test]
    fn equal_classes_fill_one_batch() {
        let labels: Vec<u8> = (0..128).map(|i| (i % 2) as u8).collect();
        let batches = balanced_batches(&labels, 128, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(batches.len(), 1);
        let mut all = batches[0].clone();
        all.sort();
        assert_eq!(all, (0..128).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let labels: Vec<u8> = (0..300).map(|i| u8::from(i % 7 == 0)).collect();
        let a = balanced_batches(&labels, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = balanced_batches(&labels, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(balanced_batches(&[0, 0, 0], 2, &mut rng).is_err());
        assert!(balanced_batches(&[0, 1], 3, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn exact_halves_and_majority_used_once(
            neg in 1usize..200, pos in 1usize..200, half in 1usize..20, seed in 0u64..1000
        ) {
            let mut labels = vec![0u8; neg];
            labels.extend(vec![1u8; pos]);
            let batches = balanced_batches(&labels, 2 * half, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(batches.len(), (neg.max(pos) / half).max(1));
            for b in &batches {
                prop_assert_eq!(b.len(), 2 * half);
                prop_assert_eq!(b.iter().filter(|&&i| labels[i] == 1).count(), half);
            }
            prop_assume!(neg.max(pos) >= half);
            let majority = if neg >= pos { 0 } else { 1 };
            let used: Vec<usize> = batches.iter().flatten().copied().filter(|&i| labels[i] == majority).collect();
            prop_assert_eq!(used.len(), used.iter().collect::<HashSet<_>>().len());
        }
    }
}
