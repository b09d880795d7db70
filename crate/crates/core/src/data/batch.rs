use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent stream seed from `(seed, a, b)`.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over each word
    let mut h = seed;
    for w in [a, b] {
        h ^= w
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Splits a seeded permutation of `0..n` into batches of `batch_size`; the
/// last batch may be short. The order depends only on `(seed, epoch, pass)`.
pub fn batches(n: usize, batch_size: usize, epoch: usize, seed: u64, pass: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, pass as u64));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// A class-stratified sample of `size` indices, sorted ascending. Per-class
/// quotas follow the class proportions with largest-remainder rounding.
pub fn stratified_subset(labels: &[usize], size: usize, seed: u64) -> Vec<usize> {
    if size >= labels.len() {
        return (0..labels.len()).collect();
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let n = labels.len() as f64;
    let exact: Vec<f64> = members.iter().map(|m| m.len() as f64 * size as f64 / n).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut by_rem: Vec<usize> = (0..classes).collect();
    by_rem.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = size - quota.iter().sum::<usize>();
    for &c in by_rem.iter().take(short) {
        quota[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(size);
    for (m, q) in members.iter_mut().zip(quota) {
        m.shuffle(&mut rng);
        picked.extend_from_slice(&m[..q]);
    }
    picked.sort_unstable();
    picked
}
