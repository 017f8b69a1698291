//! Normalized activation functions.
//!
//! Wraps any base activation as `(lambda + f(alpha)) * (base(x) - mu)`,
//! where `lambda = sqrt((rho + rho') / (2 rho rho'))` is the reciprocal
//! square root of the harmonic mean of the running variance ratios,
//! `mu` is the running output mean, and `f(alpha) = beta_bound * tanh(alpha)`
//! is a bounded learnable adjustment. The running statistics are updated
//! from per-batch measurements with momentum and multiplicative bound
//! filtering, and are constants as far as backward propagation is concerned.

use crate::activations::{act_derivative, act_eval, ActivationKind};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::{BoolMask, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Hyperparameters of the running statistics and the bounded adjustment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormActConfig {
    /// Momentum `m` weighting the current measurement, in (0, 1].
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Lower bound ratio `L`, in (0, 1).
    #[serde(default = "default_lower")]
    pub lower: f64,
    /// Upper bound ratio `U`, above 1.
    #[serde(default = "default_upper")]
    pub upper: f64,
    /// Variance stabilizer.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Bound on the learnable adjustment `f(alpha) = beta_bound * tanh(alpha)`.
    #[serde(default = "default_beta_bound")]
    pub beta_bound: f64,
}

fn default_momentum() -> f64 {
    0.1
}
fn default_lower() -> f64 {
    0.5
}
fn default_upper() -> f64 {
    2.0
}
fn default_eps() -> f64 {
    1e-8
}
fn default_beta_bound() -> f64 {
    0.3
}

impl Default for NormActConfig {
    fn default() -> Self {
        NormActConfig {
            momentum: default_momentum(),
            lower: default_lower(),
            upper: default_upper(),
            eps: default_eps(),
            beta_bound: default_beta_bound(),
        }
    }
}

impl NormActConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Contract(format!(
                "momentum must be in (0, 1], got {}",
                self.momentum
            )));
        }
        if !(self.lower > 0.0 && self.lower < 1.0 && self.upper > 1.0) {
            return Err(Error::Contract(format!(
                "bounds must satisfy 0 < L < 1 < U, got L={} U={}",
                self.lower, self.upper
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Contract(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.beta_bound >= 0.0) {
            return Err(Error::Contract(format!(
                "beta_bound must be non-negative, got {}",
                self.beta_bound
            )));
        }
        Ok(())
    }
}

/// Running `(rho, rho', mu)` with momentum updates and bound filtering.
#[derive(Debug, Clone)]
pub struct RunningStats {
    rho: f64,
    rho_prime: f64,
    mu: f64,
    t: u64,
    momentum: f64,
    lower: f64,
    upper: f64,
    eps: f64,
}

impl RunningStats {
    pub fn new(cfg: &NormActConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RunningStats {
            rho: 1.0,
            rho_prime: 1.0,
            mu: 0.0,
            t: 0,
            momentum: cfg.momentum,
            lower: cfg.lower,
            upper: cfg.upper,
            eps: cfg.eps,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rho_prime(&self) -> f64 {
        self.rho_prime
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Overrides the running values; test and checkpoint-restore hook.
    pub fn restore(&mut self, rho: f64, rho_prime: f64, mu: f64, t: u64) {
        self.rho = rho;
        self.rho_prime = rho_prime;
        self.mu = mu;
        self.t = t;
    }

    /// Current normalization factor.
    pub fn lambda(&self) -> Result<f64> {
        lambda_factor(self.rho, self.rho_prime)
    }

    /// One momentum step from a batch measurement.
    ///
    /// At `t = 0` valid measurements are copied through. Afterwards `mu`
    /// blends unconditionally while `rho` and `rho'` blend only when the
    /// measurement lies strictly inside `(L * running, U * running)`.
    /// Non-finite (or non-positive ratio) measurements are rejected as if
    /// out of bounds; the counter advances regardless.
    pub fn update(&mut self, rho_m: f64, rho_prime_m: f64, mu_m: f64) {
        let m = self.momentum;
        let ratio_ok = |v: f64| v.is_finite() && v > 0.0;
        if self.t == 0 {
            if ratio_ok(rho_m) {
                self.rho = rho_m;
            }
            if ratio_ok(rho_prime_m) {
                self.rho_prime = rho_prime_m;
            }
            if mu_m.is_finite() {
                self.mu = mu_m;
            }
        } else {
            if mu_m.is_finite() {
                self.mu = m * mu_m + (1.0 - m) * self.mu;
            }
            if ratio_ok(rho_m) && self.lower * self.rho < rho_m && rho_m < self.upper * self.rho {
                self.rho = m * rho_m + (1.0 - m) * self.rho;
            }
            if ratio_ok(rho_prime_m)
                && self.lower * self.rho_prime < rho_prime_m
                && rho_prime_m < self.upper * self.rho_prime
            {
                self.rho_prime = m * rho_prime_m + (1.0 - m) * self.rho_prime;
            }
        }
        self.t += 1;
    }
}

/// `lambda = sqrt((rho + rho') / (2 rho rho'))`.
pub fn lambda_factor(rho: f64, rho_prime: f64) -> Result<f64> {
    if !(rho > 0.0 && rho_prime > 0.0 && rho.is_finite() && rho_prime.is_finite()) {
        return Err(Error::Domain(format!(
            "lambda needs positive finite ratios, got rho={rho}, rho'={rho_prime}"
        )));
    }
    Ok(((rho + rho_prime) / (2.0 * rho * rho_prime)).sqrt())
}

/// Per-batch measurements of the variance ratio, the expected squared
/// derivative, and the output mean of `base` over the unmasked elements.
pub fn batch_statistics(
    x: &Tensor,
    mask: Option<&BoolMask>,
    base: ActivationKind,
    eps: f64,
) -> Result<(f64, f64, f64)> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "batch_statistics",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    let keep = |e: usize| mask.map_or(true, |m| m.data()[e]);
    let mut count = 0usize;
    let mut sum_x = 0.0;
    let mut sum_x2 = 0.0;
    let mut sum_y = 0.0;
    let mut sum_y2 = 0.0;
    let mut sum_d2 = 0.0;
    for (e, &v) in x.data().iter().enumerate() {
        if !keep(e) {
            continue;
        }
        count += 1;
        let y = act_eval(base, v);
        let d = act_derivative(base, v);
        sum_x += v;
        sum_x2 += v * v;
        sum_y += y;
        sum_y2 += y * y;
        sum_d2 += d * d;
    }
    if count == 0 {
        return Err(Error::EmptyReduction);
    }
    if count < 2 {
        return Err(Error::DegenerateInput(
            "batch statistics need at least 2 unmasked elements".into(),
        ));
    }
    let n = count as f64;
    let mean_x = sum_x / n;
    let var_x = (sum_x2 / n - mean_x * mean_x).max(0.0);
    if var_x < eps {
        return Err(Error::DegenerateInput(format!(
            "input variance {var_x:e} below eps {eps:e}"
        )));
    }
    let mean_y = sum_y / n;
    let var_y = (sum_y2 / n - mean_y * mean_y).max(0.0);
    let rho_m = var_y / (var_x + eps);
    let rho_prime_m = sum_d2 / n;
    Ok((rho_m, rho_prime_m, mean_y))
}

/// Realized per-batch ratios of an activation layer, for instrumentation.
/// For a normalized layer these are the ratios of the wrapped function,
/// `scale^2 * rho_M` and `scale^2 * rho'_M`.
#[derive(Debug, Clone, Copy)]
pub struct ActivationStats {
    pub rho: f64,
    pub rho_prime: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// A base activation wrapped with running statistics and a learnable
/// bounded adjustment.
#[derive(Debug, Clone)]
pub struct NormActLayer {
    pub base: ActivationKind,
    pub stats: RunningStats,
    pub beta_bound: f64,
    alpha: Tensor,
    alpha_var: Option<VarId>,
    last_stats: Option<ActivationStats>,
}

impl NormActLayer {
    pub fn new(base: ActivationKind, cfg: &NormActConfig) -> Result<Self> {
        Ok(NormActLayer {
            base,
            stats: RunningStats::new(cfg)?,
            beta_bound: cfg.beta_bound,
            alpha: Tensor::scalar(0.0).with_requires_grad(),
            alpha_var: None,
            last_stats: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.data()[0]
    }

    pub fn set_alpha(&mut self, v: f64) {
        self.alpha.data_mut()[0] = v;
    }

    pub fn alpha_param(&mut self) -> &mut Tensor {
        &mut self.alpha
    }

    pub fn alpha_var(&self) -> Option<VarId> {
        self.alpha_var
    }

    pub fn last_stats(&self) -> Option<ActivationStats> {
        self.last_stats
    }

    /// `lambda + f(alpha)` under the current statistics.
    pub fn output_scale(&self) -> Result<f64> {
        Ok(self.stats.lambda()? + self.beta_bound * self.alpha().tanh())
    }

    /// Training-mode forward: measure the batch, fold the measurement into
    /// the running statistics, then apply the normalized activation with the
    /// updated values.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: VarId,
        mask: Option<&BoolMask>,
    ) -> Result<VarId> {
        let (rho_m, rho_prime_m, mu_m) =
            batch_statistics(tape.value(x), mask, self.base, self.stats.eps())?;
        self.stats.update(rho_m, rho_prime_m, mu_m);
        let out = self.forward_with_current_stats(tape, x)?;
        let scale = self.output_scale()?;
        self.last_stats = Some(ActivationStats {
            rho: scale * scale * rho_m,
            rho_prime: scale * scale * rho_prime_m,
            lambda: self.stats.lambda()?,
            alpha: self.alpha(),
        });
        Ok(out)
    }

    /// Taped forward with the statistics left untouched; used by the
    /// gradient checker. Gradients still flow into `x` and `alpha`.
    pub fn forward_frozen(&mut self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        self.forward_with_current_stats(tape, x)
    }

    fn forward_with_current_stats(&mut self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let scale = self.output_scale()?;
        let a = self.alpha();
        let dalpha_coef = self.beta_bound * (1.0 - a.tanh() * a.tanh());
        let alpha_var = tape.leaf(self.alpha.clone());
        self.alpha_var = Some(alpha_var);
        tape.normact(x, alpha_var, self.base, scale, self.stats.mu(), dalpha_coef)
    }

    /// Pure eval-mode forward from the frozen statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let scale = self.output_scale()?;
        let mu = self.stats.mu();
        let data = x
            .data()
            .iter()
            .map(|&v| scale * (act_eval(self.base, v) - mu))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            rho: self.stats.rho(),
            rho_prime: self.stats.rho_prime(),
            mu: self.stats.mu(),
            t: self.stats.t(),
            alpha: self.alpha(),
        }
    }

    pub fn restore(&mut self, snap: &StatsSnapshot) {
        self.stats.restore(snap.rho, snap.rho_prime, snap.mu, snap.t);
        self.set_alpha(snap.alpha);
    }
}

/// Plain key-value text snapshot of a layer's statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsSnapshot {
    pub rho: f64,
    pub rho_prime: f64,
    pub mu: f64,
    pub t: u64,
    pub alpha: f64,
}

impl fmt::Display for StatsSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rho {:.16e}", self.rho)?;
        writeln!(f, "rho_prime {:.16e}", self.rho_prime)?;
        writeln!(f, "mu {:.16e}", self.mu)?;
        writeln!(f, "t {}", self.t)?;
        write!(f, "alpha {:.16e}", self.alpha)
    }
}

impl FromStr for StatsSnapshot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut snap = StatsSnapshot {
            rho: f64::NAN,
            rho_prime: f64::NAN,
            mu: f64::NAN,
            t: 0,
            alpha: f64::NAN,
        };
        let mut seen = 0;
        for line in s.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Data(format!("malformed snapshot line '{line}'")))?;
            let parse = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad number '{v}' in snapshot")))
            };
            match key {
                "rho" => snap.rho = parse(value)?,
                "rho_prime" => snap.rho_prime = parse(value)?,
                "mu" => snap.mu = parse(value)?,
                "alpha" => snap.alpha = parse(value)?,
                "t" => {
                    snap.t = value
                        .parse()
                        .map_err(|_| Error::Data(format!("bad counter '{value}' in snapshot")))?
                }
                other => return Err(Error::Data(format!("unknown snapshot key '{other}'"))),
            }
            seen += 1;
        }
        if seen != 5 {
            return Err(Error::Data(format!("snapshot has {seen} fields, expected 5")));
        }
        Ok(snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn stats_with(rho: f64, rho_prime: f64, mu: f64, t: u64) -> RunningStats {
        let mut s = RunningStats::new(&NormActConfig::default()).unwrap();
        s.restore(rho, rho_prime, mu, t);
        s
    }

    #[test]
    fn batch_statistics_identity() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let (rho, rho_p, mu) =
            batch_statistics(&x, None, ActivationKind::Identity, 1e-8).unwrap();
        assert!((rho - 1.0).abs() < 1e-6);
        assert!((rho_p - 1.0).abs() < 1e-12);
        let mean = (0.5 - 1.0 + 2.0) / 4.0;
        assert!((mu - mean).abs() < 1e-12);
    }

    #[test]
    fn batch_statistics_relu_hand_case() {
        let x = Tensor::new(vec![4], vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        let (rho, rho_p, mu) = batch_statistics(&x, None, ActivationKind::Relu, 1e-8).unwrap();
        assert!((rho - 0.275).abs() < 1e-8, "rho {rho}");
        assert!((rho_p - 0.5).abs() < 1e-12);
        assert!((mu - 0.75).abs() < 1e-12);
    }

    #[test]
    fn batch_statistics_rejects_constant_input() {
        let x = Tensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap();
        assert!(matches!(
            batch_statistics(&x, None, ActivationKind::Relu, 1e-8),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn batch_statistics_all_masked() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let m = BoolMask::new(vec![2], vec![false, false]).unwrap();
        assert!(matches!(
            batch_statistics(&x, Some(&m), ActivationKind::Relu, 1e-8),
            Err(Error::EmptyReduction)
        ));
    }

    #[test]
    fn batch_statistics_mask_ignores_padding() {
        let x = Tensor::new(vec![6], vec![1.0, -1.0, 2.0, -2.0, 99.0, -99.0]).unwrap();
        let m = BoolMask::new(vec![6], vec![true, true, true, true, false, false]).unwrap();
        let (rho, rho_p, mu) =
            batch_statistics(&x, Some(&m), ActivationKind::Relu, 1e-8).unwrap();
        assert!((rho - 0.275).abs() < 1e-8);
        assert!((rho_p - 0.5).abs() < 1e-12);
        assert!((mu - 0.75).abs() < 1e-12);
    }

    #[test]
    fn update_copies_through_at_t_zero() {
        let mut s = RunningStats::new(&NormActConfig::default()).unwrap();
        s.update(0.7, 0.4, 0.2);
        assert_eq!(s.rho(), 0.7);
        assert_eq!(s.rho_prime(), 0.4);
        assert_eq!(s.mu(), 0.2);
        assert_eq!(s.t(), 1);
    }

    #[test]
    fn update_blends_in_bounds() {
        let mut s = stats_with(1.0, 1.0, 0.0, 1);
        s.update(1.5, 1.0, 0.0);
        assert!((s.rho() - 1.05).abs() < 1e-15);
    }

    #[test]
    fn update_rejects_out_of_bounds() {
        let mut s = stats_with(1.0, 1.0, 0.0, 1);
        s.update(3.0, 1.0, 0.0);
        assert_eq!(s.rho(), 1.0);
        assert_eq!(s.t(), 2);
    }

    #[test]
    fn mu_updates_even_when_rho_rejected() {
        let mut s = stats_with(1.0, 1.0, 0.0, 1);
        s.update(3.0, 3.0, 1.0);
        assert!((s.mu() - 0.1).abs() < 1e-15);
        assert_eq!(s.rho(), 1.0);
        assert_eq!(s.rho_prime(), 1.0);
    }

    #[test]
    fn non_finite_measurement_rejected_counter_advances() {
        let mut s = stats_with(0.8, 0.6, 0.1, 3);
        s.update(f64::NAN, f64::INFINITY, f64::NAN);
        assert_eq!(s.rho(), 0.8);
        assert_eq!(s.rho_prime(), 0.6);
        assert_eq!(s.mu(), 0.1);
        assert_eq!(s.t(), 4);
    }

    #[test]
    fn lambda_examples() {
        assert!((lambda_factor(1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((lambda_factor(0.5, 0.5).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-12);
        let rho = (std::f64::consts::PI - 1.0) / (2.0 * std::f64::consts::PI);
        let lam = lambda_factor(rho, 0.5).unwrap();
        assert!((lam - 1.5706).abs() < 1e-4, "lambda {lam}");
        assert!(lambda_factor(0.0, 1.0).is_err());
        assert!(lambda_factor(1.0, -0.5).is_err());
    }

    #[test]
    fn frozen_forward_hand_case() {
        let mut layer = NormActLayer::new(ActivationKind::Relu, &NormActConfig::default()).unwrap();
        // rho = rho' = 1/2.25 gives lambda = 1.5 exactly.
        layer.stats.restore(1.0 / 2.25, 1.0 / 2.25, 0.2, 5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let out = layer.forward_frozen(&mut tape, x).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 1.2).abs() < 1e-12, "got {got:?}");
        assert!((got[1] + 0.3).abs() < 1e-12, "got {got:?}");
    }

    #[test]
    fn frozen_backward_hand_case() {
        let mut layer = NormActLayer::new(ActivationKind::Relu, &NormActConfig::default()).unwrap();
        layer.stats.restore(1.0 / 2.25, 1.0 / 2.25, 0.2, 5);
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2], vec![1.0, -1.0])
                .unwrap()
                .with_requires_grad(),
        );
        let out = layer.forward_frozen(&mut tape, x).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        let dx = tape.grad(x).unwrap();
        assert!((dx[0] - 1.5).abs() < 1e-12);
        assert!(dx[1].abs() < 1e-12);
        let dalpha = tape.grad(layer.alpha_var().unwrap()).unwrap()[0];
        assert!((dalpha - 0.18).abs() < 1e-12, "dalpha {dalpha}");
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut layer =
            NormActLayer::new(ActivationKind::Swish, &NormActConfig::default()).unwrap();
        layer.stats.restore(0.9, 0.7, 0.05, 2);
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![3], vec![0.3, -0.7, 1.1])
                .unwrap()
                .with_requires_grad(),
        );
        let out = layer.forward_frozen(&mut tape, x).unwrap();
        let zero = tape.scale(out, 0.0).unwrap();
        let loss = tape.sum(zero).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(tape.grad(layer.alpha_var().unwrap()).unwrap(), &[0.0]);
    }

    #[test]
    fn train_forward_identity_centers_the_batch() {
        let mut layer =
            NormActLayer::new(ActivationKind::Identity, &NormActConfig::default()).unwrap();
        let mut tape = Tape::new();
        let data = vec![1.0, 2.0, 3.0, 4.0];
        let mean = 2.5;
        let x = tape.leaf(Tensor::new(vec![4], data.clone()).unwrap());
        let out = layer.forward_train(&mut tape, x, None).unwrap();
        // t = 0 copies the measurement, so lambda is 1 up to eps and the
        // output is the centered batch.
        for (o, v) in tape.value(out).data().iter().zip(&data) {
            assert!((o - (v - mean)).abs() < 1e-6, "got {o} for {v}");
        }
        assert_eq!(layer.stats.t(), 1);
    }

    #[test]
    fn eval_forward_is_pure_and_repeatable() {
        let mut layer =
            NormActLayer::new(ActivationKind::Relu, &NormActConfig::default()).unwrap();
        layer.stats.restore(0.34, 0.5, 0.4, 10);
        let x = Tensor::new(vec![4], vec![0.5, -0.2, 1.5, -1.0]).unwrap();
        let a = layer.infer(&x).unwrap();
        let b = layer.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(layer.stats.t(), 10);
    }

    #[test]
    fn snapshot_round_trips() {
        let snap = StatsSnapshot {
            rho: 0.340_859_12,
            rho_prime: 0.5,
            mu: -0.123_456_789_012_345_6,
            t: 42,
            alpha: 0.017,
        };
        let text = snap.to_string();
        let back: StatsSnapshot = text.parse().unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn config_bounds_checked_at_construction() {
        let bad = NormActConfig {
            lower: 1.5,
            ..NormActConfig::default()
        };
        assert!(RunningStats::new(&bad).is_err());
    }
}
