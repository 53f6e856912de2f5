//! A single two-headed regressor: input -> hidden (ReLU, dropout) -> (mean,
//! log-variance).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub inputs: usize,
    pub hidden: usize,
}

impl Layout {
    pub fn param_count(&self) -> usize {
        self.w1_len() + self.hidden + 2 * self.hidden + 2
    }

    fn w1_len(&self) -> usize {
        self.inputs * self.hidden
    }

    // Offsets into the flat parameter vector: [w1 | b1 | w2 | b2].
    fn b1(&self) -> usize {
        self.w1_len()
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + 2 * self.hidden
    }
}

/// Heteroscedastic negative log-likelihood of `y` under `N(mu, exp(log_var))`,
/// without the constant term.
pub fn nll_loss(mu: f64, log_var: f64, y: f64) -> f64 {
    let r = y - mu;
    0.5 * log_var + 0.5 * r * r * (-log_var).exp()
}

/// Evaluation forwards are deterministic; training forwards draw a dropout
/// mask from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    layout: Layout,
    seed: u64,
    dropout_rate: f64,
    log_variance_clamp: (f64, f64),
    params: Vec<f64>,
}

/// Per-sample intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Cache {
    pub(crate) pre: Vec<f64>,
    pub(crate) act: Vec<f64>,
    pub(crate) scale: Vec<f64>,
    pub(crate) raw_log_var: f64,
}

impl Cache {
    pub(crate) fn new(layout: Layout) -> Self {
        Self {
            pre: vec![0.0; layout.hidden],
            act: vec![0.0; layout.hidden],
            scale: vec![1.0; layout.hidden],
            raw_log_var: 0.0,
        }
    }
}

impl Member {
    /// He-uniform hidden weights, Glorot-uniform output weights, zero biases,
    /// all drawn from `seed`.
    pub fn init(
        layout: Layout,
        seed: u64,
        dropout_rate: f64,
        log_variance_clamp: (f64, f64),
    ) -> Result<Self> {
        if layout.inputs == 0 || layout.hidden == 0 {
            return Err(Error::invalid("layout sizes must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        if !(log_variance_clamp.0 < log_variance_clamp.1) {
            return Err(Error::invalid("log-variance clamp requires lo < hi"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.param_count()];
        let a1 = (6.0 / layout.inputs as f64).sqrt();
        for w in &mut params[..layout.w1_len()] {
            *w = rng.gen_range(-a1..a1);
        }
        // Small output layer so every member starts near the mean prediction.
        let a2 = OUTPUT_INIT_SCALE * (6.0 / (layout.hidden + 2) as f64).sqrt();
        for w in &mut params[layout.w2()..layout.b2()] {
            *w = rng.gen_range(-a2..a2);
        }
        Ok(Self {
            layout,
            seed,
            dropout_rate,
            log_variance_clamp,
            params,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn log_variance_clamp(&self) -> (f64, f64) {
        self.log_variance_clamp
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn first_layer_weights(&self) -> &[f64] {
        &self.params[..self.layout.w1_len()]
    }

    pub fn first_layer_biases(&self) -> &[f64] {
        &self.params[self.layout.b1()..self.layout.w2()]
    }

    /// Returns `(mu, log_var)` with `log_var` clamped.
    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<(f64, f64)> {
        self.check_arity(x)?;
        let mut cache = Cache::new(self.layout);
        match mode {
            Mode::Eval => {}
            Mode::Train(rng) => self.draw_mask(rng, &mut cache.scale),
        }
        Ok(self.forward_cached(x, &mut cache))
    }

    pub(crate) fn check_arity(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.inputs {
            return Err(Error::Arity {
                expected: self.layout.inputs,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    pub(crate) fn draw_mask(&self, rng: &mut ChaCha8Rng, scale: &mut [f64]) {
        let p = self.dropout_rate;
        if p == 0.0 {
            scale.fill(1.0);
            return;
        }
        let keep = 1.0 / (1.0 - p);
        // Compare 32-bit draws against p * 2^32.
        let threshold = (p * 4_294_967_296.0) as u64;
        let mut chunks = scale.chunks_mut(2);
        for pair in &mut chunks {
            let bits = rng.next_u64();
            pair[0] = if (bits & 0xffff_ffff) < threshold { 0.0 } else { keep };
            if let Some(s) = pair.get_mut(1) {
                *s = if (bits >> 32) < threshold { 0.0 } else { keep };
            }
        }
    }

    /// Forward pass using the dropout scales already in `cache.scale`.
    pub(crate) fn forward_cached(&self, x: &[f64], cache: &mut Cache) -> (f64, f64) {
        let Layout { inputs, hidden } = self.layout;
        let p = &self.params;
        let (w1, rest) = p.split_at(inputs * hidden);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(2 * hidden);
        let mut mu = b2[0];
        let mut raw = b2[1];
        for i in 0..hidden {
            let s = cache.scale[i];
            if s == 0.0 {
                cache.pre[i] = 0.0;
                cache.act[i] = 0.0;
                continue;
            }
            let row = &w1[i * inputs..(i + 1) * inputs];
            let z = b1[i] + row.iter().zip(x).map(|(w, xv)| w * xv).sum::<f64>();
            cache.pre[i] = z;
            if z > 0.0 {
                let a = z * s;
                cache.act[i] = a;
                mu += w2[i] * a;
                raw += w2[hidden + i] * a;
            } else {
                cache.act[i] = 0.0;
            }
        }
        cache.raw_log_var = raw;
        let (lo, hi) = self.log_variance_clamp;
        (mu, raw.clamp(lo, hi))
    }

    /// Adds `d loss / d params` for one sample into `grad` given the upstream
    /// derivatives with respect to `mu` and the clamped `log_var`.
    pub(crate) fn backward_accumulate(
        &self,
        x: &[f64],
        cache: &Cache,
        d_mu: f64,
        d_log_var: f64,
        grad: &mut [f64],
    ) {
        let Layout { inputs, hidden } = self.layout;
        let (lo, hi) = self.log_variance_clamp;
        let d_raw = if cache.raw_log_var > lo && cache.raw_log_var < hi {
            d_log_var
        } else {
            0.0
        };
        let (w2_off, b2_off) = (self.layout.w2(), self.layout.b2());
        let b1_off = self.layout.b1();
        let w2 = &self.params[w2_off..b2_off];
        let (g_w1, rest) = grad.split_at_mut(inputs * hidden);
        let (g_b1, rest) = rest.split_at_mut(hidden);
        let (g_w2, g_b2) = rest.split_at_mut(2 * hidden);
        debug_assert_eq!(b1_off, inputs * hidden);
        g_b2[0] += d_mu;
        g_b2[1] += d_raw;
        for i in 0..hidden {
            let a = cache.act[i];
            if a == 0.0 {
                // Dropped or inactive unit: no gradient flows through it.
                continue;
            }
            g_w2[i] += d_mu * a;
            g_w2[hidden + i] += d_raw * a;
            let d_pre = (w2[i] * d_mu + w2[hidden + i] * d_raw) * cache.scale[i];
            g_b1[i] += d_pre;
            for (gj, xj) in g_w1[i * inputs..(i + 1) * inputs].iter_mut().zip(x) {
                *gj += d_pre * xj;
            }
        }
    }

    /// Mean NLL over a batch and its gradient. `masks`, when given, holds
    /// `rows * hidden` dropout scales (0 or `1 / (1 - p)`) to use instead of
    /// evaluation mode.
    pub fn loss_and_gradient(
        &self,
        xs: &[f64],
        ys: &[f64],
        masks: Option<&[f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        let Layout { inputs, hidden } = self.layout;
        if xs.len() != ys.len() * inputs {
            return Err(Error::Arity {
                expected: ys.len() * inputs,
                actual: xs.len(),
            });
        }
        if let Some(m) = masks {
            if m.len() != ys.len() * hidden {
                return Err(Error::Arity {
                    expected: ys.len() * hidden,
                    actual: m.len(),
                });
            }
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut cache = Cache::new(self.layout);
        let mut loss = 0.0;
        let n = ys.len() as f64;
        for (r, &y) in ys.iter().enumerate() {
            if let Some(m) = masks {
                cache.scale.copy_from_slice(&m[r * hidden..(r + 1) * hidden]);
            }
            let x = &xs[r * inputs..(r + 1) * inputs];
            let (mu, lv) = self.forward_cached(x, &mut cache);
            loss += nll_loss(mu, lv, y);
            let (d_mu, d_lv) = nll_gradient(mu, lv, y);
            self.backward_accumulate(x, &cache, d_mu / n, d_lv / n, &mut grad);
        }
        Ok((loss / n, grad))
    }
}

/// `(d/d mu, d/d log_var)` of [`nll_loss`].
pub fn nll_gradient(mu: f64, log_var: f64, y: f64) -> (f64, f64) {
    let r = y - mu;
    let inv = (-log_var).exp();
    (-r * inv, 0.5 - 0.5 * r * r * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const CLAMP: (f64, f64) = (-10.0, 10.0);

    #[test]
    fn nll_desk_values() {
        assert_eq!(nll_loss(1.0, 0.0, 1.0), 0.0);
        assert_relative_eq!(nll_loss(0.0, 0.0, 1.0), 0.5);
        assert_relative_eq!(nll_loss(2.5, 2.0, 2.5), 1.0);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let l = Layout { inputs: 8, hidden: 50 };
        let a = Member::init(l, 1, 0.5, CLAMP).unwrap();
        assert_eq!(a, Member::init(l, 1, 0.5, CLAMP).unwrap());
        let b = Member::init(l, 2, 0.5, CLAMP).unwrap();
        assert_ne!(a.params(), b.params());
        assert_eq!(a.first_layer_weights().len(), 8 * 50);
        assert_eq!(a.first_layer_biases().len(), 50);
    }

    #[test]
    fn init_rejects_bad_config() {
        let l = Layout { inputs: 0, hidden: 3 };
        assert!(Member::init(l, 1, 0.5, CLAMP).is_err());
        let l = Layout { inputs: 2, hidden: 3 };
        assert!(Member::init(l, 1, 1.0, CLAMP).is_err());
        assert!(Member::init(l, 1, 0.5, (1.0, 1.0)).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = Member::init(Layout { inputs: 3, hidden: 4 }, 9, 0.5, CLAMP).unwrap();
        m.params_mut().fill(0.0);
        assert_eq!(m.forward(&[1.0, -2.0, 3.0], Mode::Eval).unwrap(), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.forward(&[5.0, 0.0, 1.0], Mode::Train(&mut rng)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = Member::init(Layout { inputs: 3, hidden: 16 }, 4, 0.5, CLAMP).unwrap();
        let x = [0.3, -1.2, 0.8];
        assert_eq!(m.forward(&x, Mode::Eval).unwrap(), m.forward(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn log_variance_is_clamped() {
        let l = Layout { inputs: 2, hidden: 3 };
        let mut m = Member::init(l, 4, 0.5, CLAMP).unwrap();
        m.params_mut().fill(0.0);
        let n = m.params().len();
        m.params_mut()[n - 1] = -50.0;
        assert_eq!(m.forward(&[1.0, 1.0], Mode::Eval).unwrap().1, -10.0);
        m.params_mut()[n - 1] = 50.0;
        assert_eq!(m.forward(&[1.0, 1.0], Mode::Eval).unwrap().1, 10.0);
    }

    #[test]
    fn arity_mismatch_is_error() {
        let m = Member::init(Layout { inputs: 3, hidden: 4 }, 4, 0.5, CLAMP).unwrap();
        assert!(matches!(
            m.forward(&[1.0], Mode::Eval),
            Err(Error::Arity { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn training_mode_drops_units() {
        let m = Member::init(Layout { inputs: 3, hidden: 64 }, 4, 0.5, CLAMP).unwrap();
        let x = [0.3, -1.2, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = m.forward(&x, Mode::Train(&mut rng)).unwrap();
        let b = m.forward(&x, Mode::Train(&mut rng)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Member::init(Layout { inputs: 3, hidden: 4 }, 17, 0.0, CLAMP).unwrap();
        let xs = [0.5, -1.0, 2.0, -0.3, 0.7, 0.1];
        let ys = [1.0, -0.5];
        let (_, grad) = m.loss_and_gradient(&xs, &ys, None).unwrap();
        let h = 1e-5;
        for k in 0..m.params().len() {
            let mut plus = m.clone();
            plus.params_mut()[k] += h;
            let mut minus = m.clone();
            minus.params_mut()[k] -= h;
            let fd = (plus.loss_and_gradient(&xs, &ys, None).unwrap().0
                - minus.loss_and_gradient(&xs, &ys, None).unwrap().0)
                / (2.0 * h);
            let err = (fd - grad[k]).abs();
            assert!(err <= 1e-4 * fd.abs().max(grad[k].abs()) || err < 1e-8, "{k}: {fd} vs {}", grad[k]);
        }
    }
}
