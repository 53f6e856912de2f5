//! Kernel SHAP and brute-force Shapley values for a black-box regressor.
//!
//! The game is `v(S) = mean_b f(x_S, b_notS)`: features outside the
//! coalition take their values from each background row in turn and the
//! predictions are averaged.

use std::collections::HashMap;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest feature count accepted by [`exact_shapley`].
pub const EXACT_SHAPLEY_MAX_FEATURES: usize = 12;

/// Scalar prediction from one feature row.
pub trait Regressor: Sync {
    fn input_width(&self) -> usize;
    fn predict(&self, x: &[f64]) -> f64;
}

/// Wraps a closure as a [`Regressor`].
pub struct FnRegressor<F> {
    width: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnRegressor<F> {
    pub fn new(width: usize, f: F) -> Self {
        Self { width, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Regressor for FnRegressor<F> {
    fn input_width(&self) -> usize {
        self.width
    }

    fn predict(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Attribution of one instance: `base_value + sum(phi) == prediction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub prediction: f64,
}

struct Game<'a, R: ?Sized> {
    model: &'a R,
    instance: &'a [f64],
    background: &'a [f64],
    width: usize,
    scratch: Vec<f64>,
}

impl<'a, R: Regressor + ?Sized> Game<'a, R> {
    fn new(model: &'a R, instance: &'a [f64], background: &'a [f64]) -> Result<Self> {
        let width = model.input_width();
        if instance.len() != width {
            return Err(Error::Arity {
                expected: width,
                actual: instance.len(),
            });
        }
        if background.is_empty() || background.len() % width != 0 {
            return Err(Error::invalid(format!(
                "background of {} values is not a non-empty set of {width}-wide rows",
                background.len()
            )));
        }
        Ok(Self {
            model,
            instance,
            background,
            width,
            scratch: vec![0.0; width],
        })
    }

    fn value(&mut self, mask: &[bool]) -> f64 {
        let rows = self.background.len() / self.width;
        let mut sum = 0.0;
        for b in self.background.chunks_exact(self.width) {
            for j in 0..self.width {
                self.scratch[j] = if mask[j] { self.instance[j] } else { b[j] };
            }
            sum += self.model.predict(&self.scratch);
        }
        sum / rows as f64
    }
}

/// Exact Shapley values by enumerating all `2^d` coalitions.
pub fn exact_shapley<R: Regressor + ?Sized>(
    model: &R,
    instance: &[f64],
    background: &[f64],
) -> Result<Attribution> {
    let d = model.input_width();
    if d > EXACT_SHAPLEY_MAX_FEATURES {
        return Err(Error::invalid(format!(
            "exact Shapley enumeration limited to {EXACT_SHAPLEY_MAX_FEATURES} features, got {d}"
        )));
    }
    let mut game = Game::new(model, instance, background)?;
    let n = 1usize << d;
    let mut values = vec![0.0; n];
    let mut mask = vec![false; d];
    for (s, v) in values.iter_mut().enumerate() {
        for (j, m) in mask.iter_mut().enumerate() {
            *m = s >> j & 1 == 1;
        }
        *v = game.value(&mask);
    }
    // weight(|S|) = |S|! (d - |S| - 1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for k in 1..=d {
        fact[k] = fact[k - 1] * k as f64;
    }
    let mut phi = vec![0.0; d];
    for (j, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for s in (0..n).filter(|s| s & bit == 0) {
            let size = s.count_ones() as usize;
            *p += fact[size] * fact[d - size - 1] / fact[d] * (values[s | bit] - values[s]);
        }
    }
    Ok(Attribution {
        phi,
        base_value: values[0],
        prediction: values[n - 1],
    })
}

/// Kernel SHAP with the additivity constraint enforced exactly.
///
/// Coalition sizes are enumerated completely (smallest and largest first)
/// while the budget allows; the rest of the budget is spent on sampled
/// coalitions paired with their complements. With `sample_count >= 2^d - 2`
/// every coalition is enumerated and the result is exact.
pub fn kernel_shap<R: Regressor + ?Sized>(
    model: &R,
    instance: &[f64],
    background: &[f64],
    sample_count: usize,
    seed: u64,
) -> Result<Attribution> {
    let d = model.input_width();
    let mut game = Game::new(model, instance, background)?;
    if sample_count < 2 * d + 2 {
        return Err(Error::invalid(format!(
            "sample count {sample_count} below the minimum {} for {d} features",
            2 * d + 2
        )));
    }
    let base_value = game.value(&vec![false; d]);
    let prediction = game.value(&vec![true; d]);
    if d == 1 {
        return Ok(Attribution {
            phi: vec![prediction - base_value],
            base_value,
            prediction,
        });
    }
    let coalitions = sample_coalitions(d, sample_count, seed);
    let values: Vec<f64> = coalitions.iter().map(|(m, _)| game.value(m)).collect();
    let phi = solve_constrained(&coalitions, &values, base_value, prediction, d)?;
    Ok(Attribution {
        phi,
        base_value,
        prediction,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Coalition masks with their kernel weights.
fn sample_coalitions(d: usize, budget: usize, seed: u64) -> Vec<(Vec<bool>, f64)> {
    let sizes = (d - 1).div_ceil(2);
    let paired = (d - 1) / 2;
    let mut weights: Vec<f64> = (1..=sizes)
        .map(|s| (d - 1) as f64 / (s * (d - s)) as f64)
        .collect();
    for s in 1..=paired {
        weights[s - 1] *= 2.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let mut out: Vec<(Vec<bool>, f64)> = Vec::new();
    let mut left = budget as f64;
    let mut remaining = weights.clone();
    let mut full = 0;
    for s in 1..=sizes {
        let is_paired = s <= paired;
        let n_sub = binomial(d, s) * if is_paired { 2.0 } else { 1.0 };
        if left * remaining[s - 1] / n_sub < 1.0 - 1e-8 {
            break;
        }
        full += 1;
        left -= n_sub;
        if remaining[s - 1] < 1.0 {
            let r = remaining[s - 1];
            remaining.iter_mut().for_each(|w| *w /= 1.0 - r);
        }
        let mut w = weights[s - 1] / binomial(d, s);
        if is_paired {
            w /= 2.0;
        }
        for_each_subset(d, s, |mask| {
            out.push((mask.to_vec(), w));
            if is_paired {
                out.push((mask.iter().map(|b| !b).collect(), w));
            }
        });
    }

    let fixed = out.len();
    let mut samples_left = budget.saturating_sub(fixed);
    if full < sizes && samples_left > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw: Vec<f64> = weights.clone();
        for w in draw.iter_mut().take(paired) {
            *w /= 2.0;
        }
        let draw = &draw[full..];
        let chooser = WeightedIndex::new(draw).expect("kernel weights are positive");
        let mut seen: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut attempts = 4 * samples_left;
        while samples_left > 0 && attempts > 0 {
            attempts -= 1;
            let s = chooser.sample(&mut rng) + full + 1;
            let mut mask = vec![false; d];
            for j in rand::seq::index::sample(&mut rng, d, s) {
                mask[j] = true;
            }
            let is_paired = s <= paired;
            match seen.get(&mask) {
                Some(&at) => {
                    out[at].1 += 1.0;
                    if samples_left > 0 && is_paired {
                        out[at + 1].1 += 1.0;
                    }
                }
                None => {
                    seen.insert(mask.clone(), out.len());
                    samples_left -= 1;
                    let complement: Vec<bool> = mask.iter().map(|b| !b).collect();
                    out.push((mask, 1.0));
                    if samples_left > 0 && is_paired {
                        samples_left -= 1;
                        out.push((complement, 1.0));
                    }
                }
            }
        }
        let weight_left: f64 = weights[full..].iter().sum();
        let sampled: f64 = out[fixed..].iter().map(|(_, w)| w).sum();
        if sampled > 0.0 {
            for (_, w) in &mut out[fixed..] {
                *w *= weight_left / sampled;
            }
        }
    }
    out
}

fn for_each_subset(d: usize, k: usize, mut f: impl FnMut(&[bool])) {
    let mut idx: Vec<usize> = (0..k).collect();
    let mut mask = vec![false; d];
    loop {
        mask.fill(false);
        for &i in &idx {
            mask[i] = true;
        }
        f(&mask);
        // advance to the next combination in lexicographic order
        let mut i = k;
        while i > 0 && idx[i - 1] == d - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Weighted least squares for phi with `sum(phi) = prediction - base`,
/// eliminating the last feature.
fn solve_constrained(
    coalitions: &[(Vec<bool>, f64)],
    values: &[f64],
    base: f64,
    prediction: f64,
    d: usize,
) -> Result<Vec<f64>> {
    let gap = prediction - base;
    let k = d - 1;
    let mut a = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    let mut row = vec![0.0; k];
    for ((mask, w), v) in coalitions.iter().zip(values) {
        let last = f64::from(u8::from(mask[k]));
        for j in 0..k {
            row[j] = f64::from(u8::from(mask[j])) - last;
        }
        let y = v - base - last * gap;
        for i in 0..k {
            if row[i] == 0.0 {
                continue;
            }
            rhs[i] += w * row[i] * y;
            for j in 0..k {
                a[i * k + j] += w * row[i] * row[j];
            }
        }
    }
    let mut phi = solve_linear(a, rhs, k).ok_or_else(|| {
        Error::Singular(format!(
            "kernel SHAP system with {} coalitions for {d} features; increase the sample count",
            coalitions.len()
        ))
    })?;
    let rest: f64 = phi.iter().sum();
    phi.push(gap - rest);
    Ok(phi)
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() <= 1e-12 * scale {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        for i in col + 1..n {
            let f = a[i * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[i * n + j] -= f * a[col * n + j];
            }
            b[i] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i * n + j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i * n + i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid_background(d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..20 * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_model_with_zero_mean_background() {
        let f = FnRegressor::new(2, |x: &[f64]| 3.0 * x[0] + 0.0 * x[1]);
        let bg = [-1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0];
        let a = kernel_shap(&f, &[1.0, 1.0], &bg, 64, 0).unwrap();
        assert_abs_diff_eq!(a.phi[0], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(a.phi[1], 0.0, epsilon = 1e-6);
        let e = exact_shapley(&f, &[1.0, 1.0], &bg).unwrap();
        assert_abs_diff_eq!(e.phi[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_model_has_zero_attribution() {
        let f = FnRegressor::new(5, |_: &[f64]| 4.2);
        let bg = grid_background(5);
        let a = kernel_shap(&f, &[0.1, 0.2, 0.3, 0.4, 0.5], &bg, 128, 3).unwrap();
        assert!(a.phi.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn single_feature_game() {
        let f = FnRegressor::new(1, |x: &[f64]| x[0] * x[0]);
        let bg = [1.0, 2.0, 3.0];
        let e = exact_shapley(&f, &[4.0], &bg).unwrap();
        // f(x) minus the background expectation of f
        assert_abs_diff_eq!(e.phi[0], 16.0 - 14.0 / 3.0, epsilon = 1e-12);
        let k = kernel_shap(&f, &[4.0], &bg, 4, 0).unwrap();
        assert_abs_diff_eq!(k.phi[0], e.phi[0], epsilon = 1e-12);
    }

    #[test]
    fn symmetric_features_share_credit() {
        let f = FnRegressor::new(2, |x: &[f64]| x[0] + x[1]);
        let bg = [0.0, 0.0, 2.0, 2.0];
        let e = exact_shapley(&f, &[3.0, 3.0], &bg).unwrap();
        assert_abs_diff_eq!(e.phi[0], e.phi[1], epsilon = 1e-12);
    }

    #[test]
    fn additive_model_hand_value() {
        let g = |v: f64| v.sin();
        let h = |v: f64| v * v;
        let f = FnRegressor::new(2, move |x: &[f64]| g(x[0]) + h(x[1]));
        let bg = [0.5, 1.0, -0.3, 2.0, 1.2, -1.0];
        let e = exact_shapley(&f, &[0.9, 0.4], &bg).unwrap();
        let mean_g = (g(0.5) + g(-0.3) + g(1.2)) / 3.0;
        let mean_h = (h(1.0) + h(2.0) + h(-1.0)) / 3.0;
        assert_abs_diff_eq!(e.phi[0], g(0.9) - mean_g, epsilon = 1e-12);
        assert_abs_diff_eq!(e.phi[1], h(0.4) - mean_h, epsilon = 1e-12);
    }

    #[test]
    fn full_enumeration_is_exact() {
        let f = FnRegressor::new(6, |x: &[f64]| {
            x[0] * x[1] + (x[2] - x[3]).tanh() + x[4].max(x[5]) * x[0]
        });
        let bg = grid_background(6);
        let x = [0.3, -0.7, 0.9, 0.1, -0.2, 0.6];
        let e = exact_shapley(&f, &x, &bg).unwrap();
        let k = kernel_shap(&f, &x, &bg, 2048, 5).unwrap();
        for (a, b) in e.phi.iter().zip(&k.phi) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn sampled_regime_keeps_local_accuracy() {
        let f = FnRegressor::new(10, |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 * v).sin()).sum::<f64>() + x[0] * x[9]);
        let bg = grid_background(10);
        let x: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let k = kernel_shap(&f, &x, &bg, 300, 9).unwrap();
        let sum: f64 = k.phi.iter().sum();
        assert_abs_diff_eq!(sum + k.base_value, k.prediction, epsilon = 1e-9);
        let e = exact_shapley(&f, &x, &bg).unwrap();
        let err = e.phi.iter().zip(&k.phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "max error {err}");
    }

    #[test]
    fn deterministic_per_seed() {
        let f = FnRegressor::new(10, |x: &[f64]| x.iter().map(|v| v * v).sum());
        let bg = grid_background(10);
        let x = vec![0.5; 10];
        assert_eq!(kernel_shap(&f, &x, &bg, 100, 1).unwrap(), kernel_shap(&f, &x, &bg, 100, 1).unwrap());
    }

    #[test]
    fn preconditions() {
        let f = FnRegressor::new(13, |_: &[f64]| 0.0);
        assert!(exact_shapley(&f, &[0.0; 13], &[0.0; 13]).is_err());
        assert!(kernel_shap(&f, &[0.0; 13], &[0.0; 13], 27, 0).is_err());
        assert!(kernel_shap(&f, &[0.0; 12], &[0.0; 13], 100, 0).is_err());
    }

    #[test]
    fn singular_system_reported() {
        assert!(solve_linear(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 1.0], 2).is_none());
        assert_eq!(solve_linear(vec![2.0, 0.0, 0.0, 4.0], vec![2.0, 2.0], 2), Some(vec![1.0, 0.5]));
    }

    #[test]
    fn subset_enumeration_counts() {
        let mut n = 0;
        for_each_subset(6, 3, |m| {
            assert_eq!(m.iter().filter(|b| **b).count(), 3);
            n += 1;
        });
        assert_eq!(n, 20);
    }
}
