//! Diagonal-covariance Gaussian mixtures fitted by EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GrabCutError;

/// Lower bound applied to every variance entry.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: Gmm,
    /// Total log-likelihood of the samples after initialization and after
    /// every EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let w = self.weights[k];
            if w <= 0.0 {
                *o = f64::NEG_INFINITY;
                continue;
            }
            let mut acc = w.ln();
            for ((&xi, &m), &v) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                acc -= 0.5 * (LN_2PI + v.ln() + (xi - m) * (xi - m) / v);
            }
            *o = acc;
        }
    }

    /// Log of the mixture density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components()];
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    pub fn total_log_likelihood(&self, samples: &[Vec<f64>]) -> f64 {
        samples.iter().map(|x| self.log_density(x)).sum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-means++: each new center is the best of a few d²-weighted draws.
fn kmeans_pp(samples: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut chosen = samples.len() - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if r < d {
                        chosen = i;
                        break;
                    }
                    r -= d;
                }
                chosen
            } else {
                rng.random_range(0..samples.len())
            };
            let next: Vec<f64> = d2
                .iter()
                .zip(samples)
                .map(|(&d, x)| d.min(sq_dist(x, &samples[pick])))
                .collect();
            let potential = next.iter().sum::<f64>();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, pick, next));
            }
        }
        let (_, pick, next) = best.expect("at least one trial");
        centers.push(samples[pick].clone());
        d2 = next;
    }
    centers
}

/// M-step from responsibilities `resp` (row-major, n × k). Components that
/// receive no mass keep weight zero and their previous parameters.
fn m_step(samples: &[Vec<f64>], resp: &[f64], k: usize, prev: Option<&Gmm>) -> Gmm {
    let n = samples.len();
    let d = samples[0].len();
    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    let mut variances = vec![vec![0.0; d]; k];
    for (i, x) in samples.iter().enumerate() {
        for c in 0..k {
            let r = resp[i * k + c];
            weights[c] += r;
            for j in 0..d {
                means[c][j] += r * x[j];
            }
        }
    }
    for c in 0..k {
        if weights[c] > 0.0 {
            means[c].iter_mut().for_each(|m| *m /= weights[c]);
        } else if let Some(p) = prev {
            means[c] = p.means[c].clone();
        }
    }
    for (i, x) in samples.iter().enumerate() {
        for c in 0..k {
            let r = resp[i * k + c];
            for j in 0..d {
                variances[c][j] += r * (x[j] - means[c][j]).powi(2);
            }
        }
    }
    for c in 0..k {
        if weights[c] > 0.0 {
            variances[c].iter_mut().for_each(|v| *v = (*v / weights[c]).max(VARIANCE_FLOOR));
        } else {
            variances[c] = prev.map_or_else(|| vec![1.0; d], |p| p.variances[c].clone());
        }
    }
    weights.iter_mut().for_each(|w| *w /= n as f64);
    Gmm {
        weights,
        means,
        variances,
    }
}

/// Fits a `k`-component diagonal GMM with k-means++ initialization followed by
/// EM. The recorded log-likelihood never decreases (up to rounding).
pub fn fit_gmm(samples: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<GmmFit, GrabCutError> {
    if k == 0 || samples.len() < k {
        return Err(GrabCutError::TooFewSamples {
            samples: samples.len(),
            components: k,
        });
    }
    let d = samples[0].len();
    if samples.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
        return Err(GrabCutError::InvalidSamples);
    }
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(samples, k, &mut rng);

    // hard assignment to the seeds gives the starting parameters
    let mut resp = vec![0.0; n * k];
    for (i, x) in samples.iter().enumerate() {
        let best = (0..k)
            .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])).then(a.cmp(&b)))
            .unwrap();
        resp[i * k + best] = 1.0;
    }
    let mut model = m_step(samples, &resp, k, None);
    for c in 0..k {
        if model.weights[c] == 0.0 {
            model.means[c] = centers[c].clone();
        }
    }

    let mut history = Vec::with_capacity(max_iters + 1);
    let mut logp = vec![0.0; k];
    let mut converged = false;
    for _ in 0..max_iters {
        let mut ll = 0.0;
        for (i, x) in samples.iter().enumerate() {
            model.component_log_densities(x, &mut logp);
            let lse = log_sum_exp(&logp);
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (logp[c] - lse).exp();
            }
        }
        converged = history.last().is_some_and(|&prev: &f64| (ll - prev).abs() <= 1e-10 * ll.abs().max(1.0));
        history.push(ll);
        if converged {
            break;
        }
        model = m_step(samples, &resp, k, Some(&model));
    }
    if !converged {
        history.push(model.total_log_likelihood(samples));
    }
    Ok(GmmFit {
        model,
        log_likelihood: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_is_closed_form() {
        let xs: Vec<Vec<f64>> = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![4.0, 5.0]];
        let fit = fit_gmm(&xs, 1, 20, 0).unwrap();
        let m = &fit.model;
        assert!((m.means[0][0] - 7.0 / 3.0).abs() < 1e-12);
        let var = ((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2)) / 3.0;
        assert!((m.variances[0][0] - var).abs() < 1e-12);
        // constant dimension is floored
        assert_eq!(m.variances[0][1], VARIANCE_FLOOR);
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            fit_gmm(&[vec![0.0]], 2, 10, 0),
            Err(GrabCutError::TooFewSamples { samples: 1, components: 2 })
        ));
    }

    #[test]
    fn identical_samples_do_not_blow_up() {
        let xs = vec![vec![1.0, 1.0]; 10];
        let fit = fit_gmm(&xs, 3, 10, 4).unwrap();
        assert!(fit.log_likelihood.iter().all(|l| l.is_finite()));
        assert!((fit.model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
