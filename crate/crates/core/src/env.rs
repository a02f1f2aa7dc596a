//! Multi-channel power allocation environment.
//!
//! Channel gains are linear, SNR-normalised values; the objective of a power
//! allocation `p` under gains `g` is `Σ log2(1 + g·p/n0)`.

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One target scenario: the range its channel gains are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub intent_id: u8,
    pub gain_low: f64,
    pub gain_high: f64,
    pub label: String,
}

impl IntentSpec {
    pub fn new(intent_id: u8, gain_low: f64, gain_high: f64, label: &str) -> Result<Self> {
        let spec = Self {
            intent_id,
            gain_low,
            gain_high,
            label: label.to_owned(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain_low >= 0.0 && self.gain_low < self.gain_high && self.gain_high.is_finite()) {
            return Err(Error::Config(format!(
                "intent {} needs 0 <= gain_low < gain_high, got [{}, {})",
                self.intent_id, self.gain_low, self.gain_high
            )));
        }
        Ok(())
    }

    pub fn contains(&self, gain: f64) -> bool {
        gain > self.gain_low && gain < self.gain_high
    }

    /// The five scenarios of increasing channel quality over (0, 50).
    pub fn experiment_set() -> Vec<IntentSpec> {
        const LABELS: [&str; 5] = [
            "low channel gain scenario",
            "lower channel gain scenario",
            "medium channel gain scenario",
            "high channel gain scenario",
            "very high channel gain scenario",
        ];
        LABELS
            .iter()
            .enumerate()
            .map(|(i, label)| IntentSpec {
                intent_id: i as u8 + 1,
                gain_low: 10.0 * i as f64,
                gain_high: 10.0 * (i + 1) as f64,
                label: (*label).to_owned(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_channels: usize,
    pub noise_power: f64,
    pub total_power_options: Vec<f64>,
    pub episode_length: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_channels: 16,
            noise_power: 1.0,
            total_power_options: vec![6.0, 12.0, 18.0, 24.0, 30.0],
            episode_length: 200,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_channels == 0 {
            return Err(Error::Config("num_channels must be at least 1".into()));
        }
        if !(self.noise_power > 0.0) {
            return Err(Error::Config("noise_power must be positive".into()));
        }
        if self.total_power_options.is_empty() || self.total_power_options.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("every total power option must be positive".into()));
        }
        Ok(())
    }
}

/// Log-distance link budget, all quantities in dB except distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossParams {
    pub loss_ref_db: f64,
    pub ref_distance: f64,
    pub exponent: f64,
    pub distance: f64,
    pub tx_gain_db: f64,
    pub rx_gain_db: f64,
}

/// Path loss `L(d) = C0·(d/D0)^(−γ)` in dB.
pub fn path_loss_db(params: &PathLossParams) -> Result<f64> {
    if !(params.distance > 0.0) {
        return Err(Error::Domain(format!(
            "link distance must be positive, got {}",
            params.distance
        )));
    }
    if !(params.ref_distance > 0.0) || !(params.exponent > 0.0) {
        return Err(Error::Domain("reference distance and exponent must be positive".into()));
    }
    Ok(params.loss_ref_db * (params.distance / params.ref_distance).powf(-params.exponent))
}

/// Linear channel gain `10^((G_t + G_r − L(d))/10)`.
pub fn path_loss_gain(params: &PathLossParams) -> Result<f64> {
    let loss = path_loss_db(params)?;
    Ok(10f64.powf((params.tx_gain_db + params.rx_gain_db - loss) / 10.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gains: Vec<f64>,
    pub intent_id: u8,
}

/// Draws `M` i.i.d. gains uniformly from the open interval of the intent.
pub fn sample_gains<R: Rng + ?Sized>(spec: &IntentSpec, config: &EnvConfig, rng: &mut R) -> EnvState {
    let width = spec.gain_high - spec.gain_low;
    let gains = (0..config.num_channels)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            // rounding can land on the upper edge for tiny u complements
            (spec.gain_low + width * u).min(spec.gain_high.next_down())
        })
        .collect();
    EnvState {
        gains,
        intent_id: spec.intent_id,
    }
}

/// Per-channel rates `log2(1 + g·p/n0)`.
pub fn channel_rates(gains: &[f64], powers: &[f64], noise_power: f64) -> Result<Vec<f64>> {
    if gains.len() != powers.len() {
        return Err(Error::Domain(format!(
            "{} gains but {} powers",
            gains.len(),
            powers.len()
        )));
    }
    if let Some(p) = powers.iter().find(|&&p| !(p >= 0.0)) {
        return Err(Error::Domain(format!("negative or undefined power {p}")));
    }
    Ok(gains
        .iter()
        .zip(powers)
        .map(|(g, p)| (1.0 + g * p / noise_power).log2())
        .collect())
}

/// Total spectral efficiency in bits/s/Hz.
pub fn spectral_efficiency(gains: &[f64], powers: &[f64], noise_power: f64) -> Result<f64> {
    Ok(channel_rates(gains, powers, noise_power)?.iter().sum())
}

/// Checks `p ≥ 0` per channel and `Σp ≤ P`.
pub fn check_feasible(action: &[f64], total_power: f64) -> Result<()> {
    if let Some((m, p)) = action.iter().enumerate().find(|(_, &p)| !(p >= 0.0)) {
        return Err(Error::Feasibility(format!(
            "non-negativity violated on channel {m}: {p}"
        )));
    }
    let sum: f64 = action.iter().sum();
    if sum > total_power {
        return Err(Error::Feasibility(format!(
            "total power budget violated: {sum} > {total_power}"
        )));
    }
    Ok(())
}

/// Applies `action` in `state`: per-channel rewards, then gains redrawn from
/// the same intent independently of the action.
pub fn env_step<R: Rng + ?Sized>(
    state: &EnvState,
    action: &[f64],
    spec: &IntentSpec,
    config: &EnvConfig,
    total_power: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, EnvState)> {
    if spec.intent_id != state.intent_id {
        return Err(Error::Config(format!(
            "state belongs to intent {}, spec is intent {}",
            state.intent_id, spec.intent_id
        )));
    }
    if action.len() != state.gains.len() {
        return Err(Error::Feasibility(format!(
            "action has {} channels, state has {}",
            action.len(),
            state.gains.len()
        )));
    }
    check_feasible(action, total_power)?;
    let rewards = channel_rates(&state.gains, action, config.noise_power)?;
    Ok((rewards, sample_gains(spec, config, rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;
    use proptest::prelude::*;

    fn budget(loss_ref_db: f64, distance: f64, gt: f64, gr: f64) -> PathLossParams {
        PathLossParams {
            loss_ref_db,
            ref_distance: 1.0,
            exponent: 2.0,
            distance,
            tx_gain_db: gt,
            rx_gain_db: gr,
        }
    }

    #[test]
    fn path_loss_examples() {
        assert_eq!(path_loss_gain(&budget(0.0, 3.0, 0.0, 0.0)).unwrap(), 1.0);
        assert!((path_loss_gain(&budget(0.0, 3.0, 4.0, 6.0)).unwrap() - 10.0).abs() < 1e-12);
        assert!((path_loss_gain(&budget(30.0, 1.0, 20.0, 20.0)).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(
            path_loss_gain(&budget(30.0, 0.0, 0.0, 0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn intent_one_sampling_statistics() {
        let spec = &IntentSpec::experiment_set()[0];
        let config = EnvConfig {
            num_channels: 1000,
            ..EnvConfig::default()
        };
        let mut rng = stream_rng(0, 0);
        let (mut lo, mut hi, mut sum, mut n) = (f64::MAX, f64::MIN, 0.0, 0usize);
        for _ in 0..1000 {
            for g in sample_gains(spec, &config, &mut rng).gains {
                lo = lo.min(g);
                hi = hi.max(g);
                sum += g;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(lo >= 0.0 && hi < 10.0, "range [{lo}, {hi}]");
        assert!((4.9..=5.1).contains(&mean), "mean {mean}");
    }

    #[test]
    fn intent_five_in_range_and_seeded() {
        let spec = &IntentSpec::experiment_set()[4];
        let config = EnvConfig::default();
        let a = sample_gains(spec, &config, &mut stream_rng(9, 0));
        let b = sample_gains(spec, &config, &mut stream_rng(9, 0));
        assert_eq!(a, b);
        assert!(a.gains.iter().all(|&g| (40.0..50.0).contains(&g)));
    }

    #[test]
    fn spectral_efficiency_examples() {
        assert_eq!(spectral_efficiency(&[3.0, 5.0], &[0.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(spectral_efficiency(&[3.0], &[1.0], 1.0).unwrap(), 2.0);
        let se = spectral_efficiency(&[4.0, 1.0], &[0.875, 0.125], 1.0).unwrap();
        assert!((se - 2.3399).abs() < 1e-4);
        assert!(matches!(
            spectral_efficiency(&[1.0], &[-0.1], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn env_step_semantics() {
        let specs = IntentSpec::experiment_set();
        let spec = &specs[2];
        let config = EnvConfig::default();
        let mut rng = stream_rng(4, 0);
        let state = sample_gains(spec, &config, &mut rng);
        let zeros = vec![0.0; 16];
        let (r, next) = env_step(&state, &zeros, spec, &config, 6.0, &mut rng).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        assert!(next.gains.iter().all(|&g| spec.contains(g)));

        let action = vec![6.0 / 16.0; 16];
        let (r, _) = env_step(&state, &action, spec, &config, 6.0, &mut rng).unwrap();
        let se = spectral_efficiency(&state.gains, &action, 1.0).unwrap();
        assert_eq!(r.iter().sum::<f64>(), se);

        let mut bad = action.clone();
        bad[3] = -0.01;
        let err = env_step(&state, &bad, spec, &config, 6.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Feasibility(ref m) if m.contains("non-negativity")));
        let over = vec![1.0; 16];
        let err = env_step(&state, &over, spec, &config, 6.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Feasibility(ref m) if m.contains("budget")));
    }

    proptest! {
        #[test]
        fn se_monotone_in_power_and_gain(
            g in prop::collection::vec(0.01f64..50.0, 4),
            p in prop::collection::vec(0.0f64..5.0, 4),
            idx in 0usize..4,
            bump in 0.0f64..3.0,
        ) {
            let base = spectral_efficiency(&g, &p, 1.0).unwrap();
            let mut p2 = p.clone();
            p2[idx] += bump;
            let mut g2 = g.clone();
            g2[idx] += bump;
            prop_assert!(spectral_efficiency(&g, &p2, 1.0).unwrap() >= base);
            prop_assert!(spectral_efficiency(&g2, &p, 1.0).unwrap() >= base);
        }

        #[test]
        fn next_state_stays_in_intent(seed in 0u64..1000, k in 0usize..5) {
            let specs = IntentSpec::experiment_set();
            let config = EnvConfig::default();
            let mut rng = stream_rng(seed, 0);
            let s = sample_gains(&specs[k], &config, &mut rng);
            let (_, next) = env_step(&s, &[0.1; 16], &specs[k], &config, 6.0, &mut rng).unwrap();
            prop_assert!(next.gains.iter().all(|&g| specs[k].contains(g)));
        }
    }
}
