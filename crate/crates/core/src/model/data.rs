use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[patch_grid², d_in]` patch features.
    pub tokens: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Unit direction planted in class-1 samples.
    pub signal: Vec<f64>,
    pub signal_strength: f64,
    pub patch_grid: usize,
    pub d_in: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Two-class patch sets. Every patch is standard normal noise; class-1
/// samples additionally carry `signal_strength · u` on a random half of their
/// patches, with `u` a unit vector fixed per dataset. Labels alternate, so the
/// classes are balanced. Sample `i` draws from `rng.fork(i)`.
pub fn make_synthetic_dataset(
    rng: &mut Rng,
    count: usize,
    patch_grid: usize,
    d_in: usize,
    signal_strength: f64,
) -> Result<Dataset> {
    if patch_grid == 0 || d_in == 0 {
        return Err(Error::Config("patch_grid and d_in must be positive".into()));
    }
    if !(signal_strength >= 0.0 && signal_strength.is_finite()) {
        return Err(Error::Config(format!(
            "signal_strength must be finite and non-negative, got {signal_strength}"
        )));
    }
    let signal = loop {
        let u: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            break u.into_iter().map(|v| v / norm).collect::<Vec<_>>();
        }
    };
    let n = patch_grid * patch_grid;
    let planted = n.div_ceil(2);
    let samples = (0..count)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let label = i % 2;
            let mut data: Vec<f64> = (0..n * d_in).map(|_| r.normal()).collect();
            if label == 1 {
                for &p in &r.permutation(n)[..planted] {
                    for (x, u) in data[p * d_in..(p + 1) * d_in].iter_mut().zip(&signal) {
                        *x += signal_strength * u;
                    }
                }
            }
            Sample {
                tokens: Tensor::from_vec(&[n, d_in], data).expect("sizes agree"),
                label,
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        signal,
        signal_strength,
        patch_grid,
        d_in,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detector_score(s: &Sample, u: &[f64]) -> f64 {
        let (n, d) = s.tokens.dims2().unwrap();
        (0..n)
            .map(|i| (0..d).map(|j| s.tokens.at(i, j) * u[j]).sum::<f64>())
            .sum()
    }

    fn accuracy(samples: &[Sample], u: &[f64], threshold: f64) -> f64 {
        let hits = samples
            .iter()
            .filter(|s| usize::from(detector_score(s, u) > threshold) == s.label)
            .count();
        hits as f64 / samples.len() as f64
    }

    fn tuned_threshold(samples: &[Sample], u: &[f64]) -> f64 {
        let mut scores: Vec<f64> = samples.iter().map(|s| detector_score(s, u)).collect();
        scores.sort_by(f64::total_cmp);
        scores
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .max_by(|a, b| accuracy(samples, u, *a).total_cmp(&accuracy(samples, u, *b)))
            .unwrap()
    }

    #[test]
    fn dot_product_detector_separates_classes() {
        let tune = make_synthetic_dataset(&mut Rng::new(7), 256, 4, 16, 3.0).unwrap();
        let mut eval_rng = Rng::new(7);
        let eval = make_synthetic_dataset(&mut eval_rng, 1024 + 256, 4, 16, 3.0).unwrap();
        assert_eq!(tune.signal, eval.signal);
        // Disjoint held-out split: the first 256 samples coincide with `tune`.
        let threshold = tuned_threshold(&tune.samples, &tune.signal);
        let acc = accuracy(&eval.samples[256..], &eval.signal, threshold);
        assert!(acc > 0.9, "detector accuracy {acc}");
    }

    #[test]
    fn zero_strength_is_uninformative() {
        let d = make_synthetic_dataset(&mut Rng::new(3), 2048, 4, 16, 0.0).unwrap();
        let threshold = tuned_threshold(&d.samples[..512], &d.signal);
        let acc = accuracy(&d.samples[512..], &d.signal, threshold);
        assert!((acc - 0.5).abs() < 0.06, "accuracy {acc}");
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = make_synthetic_dataset(&mut Rng::new(11), 64, 3, 5, 2.0).unwrap();
        let b = make_synthetic_dataset(&mut Rng::new(11), 64, 3, 5, 2.0).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(&mut Rng::new(12), 64, 3, 5, 2.0).unwrap();
        assert_ne!(a.samples[0], c.samples[0]);
        assert_eq!(a.samples.iter().filter(|s| s.label == 1).count(), 32);
        assert_eq!(a.samples[0].tokens.shape(), &[9, 5]);
        let norm: f64 = a.signal.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_strength() {
        assert!(make_synthetic_dataset(&mut Rng::new(0), 4, 2, 2, -1.0).is_err());
        assert!(make_synthetic_dataset(&mut Rng::new(0), 4, 2, 2, f64::NAN).is_err());
    }
}
