//! Desk-scale synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ExperimentError;
use crate::arch::{Inputs, TokenBatch};
use crate::data::{DataError, Dataset};
use crate::numerics::Matrix;
use crate::synthesis::distance;

/// `K` Gaussian clusters of `n` points in `R^{d₀}`: means `N(0, 2/d₀·I)`,
/// within-class noise `N(0, 1/d₀·I)`, so both have unit-order norms.
/// Columns are ordered by class. A draw with duplicate columns is redrawn.
pub fn make_synthetic_classification(
    classes: usize,
    per_class: usize,
    input_dim: usize,
    seed: u64,
) -> Result<Dataset, ExperimentError> {
    if classes < 2 || per_class == 0 || input_dim == 0 {
        return Err(ExperimentError::Invalid("need K ≥ 2, n ≥ 1 and d₀ ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (input_dim as f64).sqrt();
    let labels: Vec<usize> = (0..classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
    for _ in 0..16 {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..input_dim).map(|_| 2f64.sqrt() * scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut x = Matrix::zeros(input_dim, classes * per_class);
        for (j, &k) in labels.iter().enumerate() {
            let col: Vec<f64> =
                means[k].iter().map(|m| m + scale * rng.sample::<f64, _>(StandardNormal)).collect();
            x.set_column(j, &col);
        }
        match Dataset::dense(x, labels.clone(), classes) {
            Ok(ds) => return Ok(ds),
            Err(DataError::DuplicateSample(..)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(ExperimentError::Invalid("could not draw distinct samples".into()))
}

/// Smallest distance between empirical class means of a dense dataset.
pub fn class_mean_separation(dataset: &Dataset) -> Result<f64, ExperimentError> {
    let Inputs::Dense(x) = &dataset.inputs else {
        return Err(ExperimentError::Invalid("class means need dense inputs".into()));
    };
    let k = dataset.num_classes;
    let mut means = vec![vec![0.0; x.rows()]; k];
    let mut counts = vec![0usize; k];
    for (j, &l) in dataset.labels.iter().enumerate() {
        counts[l] += 1;
        means[l].iter_mut().zip(x.column(j)).for_each(|(m, v)| *m += v);
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let mut best = f64::INFINITY;
    for a in 0..k {
        for b in 0..a {
            best = best.min(distance(&means[a], &means[b]));
        }
    }
    Ok(best)
}

/// SplitMix64 finalizer: a fixed, platform-independent hash.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn context_label(context: &[usize], seed: u64, classes: usize) -> usize {
    let h = context.iter().fold(mix(seed), |h, &t| mix(h ^ (t as u64 + 1)));
    (h % classes as u64) as usize
}

/// `S` distinct length-`C` sequences over `V` tokens, each position
/// labelled by a hash of its context. Sequences are drawn at random and
/// rejected when they would push some class past its share `S·C/K`, so the
/// labels come out exactly balanced.
pub fn make_synthetic_language(
    vocab: usize,
    context: usize,
    classes: usize,
    sequences: usize,
    rule_seed: u64,
) -> Result<Dataset, ExperimentError> {
    if vocab < 2 || context == 0 || classes < 2 || sequences == 0 {
        return Err(ExperimentError::Invalid("need V ≥ 2, C ≥ 1, K ≥ 2 and S ≥ 1".into()));
    }
    if (sequences * context) % classes != 0 {
        return Err(ExperimentError::Invalid("S·C must be divisible by K".into()));
    }
    let available = (vocab as u64).checked_pow(context as u32).unwrap_or(u64::MAX);
    if (sequences as u64) > available {
        return Err(ExperimentError::Invalid("more sequences requested than exist".into()));
    }
    let share = sequences * context / classes;
    let label_seed = mix(rule_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(rule_seed);
    for _ in 0..1000 {
        let mut counts = vec![0usize; classes];
        let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(sequences);
        for _ in 0..200 * sequences {
            if chosen.len() == sequences {
                break;
            }
            let s: Vec<usize> = (0..context).map(|_| rng.random_range(0..vocab)).collect();
            if chosen.contains(&s) {
                continue;
            }
            let mut next = counts.clone();
            (1..=context).for_each(|p| next[context_label(&s[..p], label_seed, classes)] += 1);
            if next.iter().all(|&c| c <= share) {
                counts = next;
                chosen.push(s);
            }
        }
        if chosen.len() < sequences {
            continue;
        }
        let labels =
            chosen.iter().flat_map(|s| (1..=s.len()).map(|p| context_label(&s[..p], label_seed, classes))).collect();
        let batch = TokenBatch { vocab, context, sequences: chosen };
        return Ok(Dataset::tokens(batch, labels, classes)?);
    }
    Err(ExperimentError::Invalid("no balanced draw found".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_classes_one_point_each() {
        let ds = make_synthetic_classification(2, 1, 3, 0).unwrap();
        assert_eq!(ds.num_samples(), 2);
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn desk_scale_separation_is_unit_order() {
        let ds = make_synthetic_classification(4, 16, 16, 0).unwrap();
        let s = class_mean_separation(&ds).unwrap();
        assert!((1.0..=4.0).contains(&s), "separation {s}");
    }

    #[test]
    fn labels_are_a_function_of_the_context() {
        let ds = make_synthetic_language(3, 3, 2, 12, 5).unwrap();
        let Inputs::Tokens(b) = &ds.inputs else { panic!("token dataset expected") };
        let ctx = b.contexts();
        for i in 0..ctx.len() {
            for j in 0..i {
                if ctx[i] == ctx[j] {
                    assert_eq!(ds.labels[i], ds.labels[j]);
                }
            }
        }
        assert_eq!(ds.num_samples(), 36);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 18);
        assert_eq!(ds, make_synthetic_language(3, 3, 2, 12, 5).unwrap());
    }
}
