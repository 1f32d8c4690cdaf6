//! Oscillator models, skew estimation from SYNC pairs, and the two-state
//! clock Kalman filter used to interpolate anchor clocks between SYNCs.

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{DeviceTime, TrueTime, DEFAULT_TICK_PERIOD};

/// Grid on which a random-walk skew is held piecewise constant.
pub const RANDOM_WALK_STEP_S: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClockError {
    #[error("SYNC transmit interval is not positive ({0} s)")]
    DegenerateInterval(f64),
    #[error("innovation covariance is not positive definite; check the filter parameters")]
    NonPositiveInnovationCovariance,
    #[error("invalid clock model: {0}")]
    InvalidModel(String),
}

/// A free-running oscillator: `reading(t) = start_offset + skew * t`, plus an
/// optional Brownian wander of the skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    #[serde(rename = "start_offset_s", default)]
    pub start_offset: f64,
    #[serde(default = "unit_skew")]
    pub skew: f64,
    /// Skew diffusion, in 1/sqrt(s).
    #[serde(rename = "random_walk_sigma_per_sqrt_s", default)]
    pub random_walk_sigma: f64,
}

fn unit_skew() -> f64 {
    1.0
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel::ideal()
    }
}

impl ClockModel {
    pub const fn ideal() -> Self {
        ClockModel {
            start_offset: 0.0,
            skew: 1.0,
            random_walk_sigma: 0.0,
        }
    }

    pub fn with_skew(skew: f64) -> Self {
        ClockModel {
            skew,
            ..ClockModel::ideal()
        }
    }

    /// Skew expressed as parts per million away from nominal.
    pub fn from_ppm(start_offset: f64, ppm: f64) -> Self {
        ClockModel {
            start_offset,
            skew: 1.0 + ppm * 1e-6,
            random_walk_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ClockError> {
        if !(self.skew.is_finite() && self.skew > 0.0) {
            return Err(ClockError::InvalidModel(format!(
                "skew must be positive, got {}",
                self.skew
            )));
        }
        if (self.skew - 1.0).abs() > 100e-6 {
            return Err(ClockError::InvalidModel(format!(
                "skew {} is more than 100 ppm from nominal",
                self.skew
            )));
        }
        if !(self.start_offset.is_finite() && self.start_offset >= 0.0) {
            return Err(ClockError::InvalidModel(
                "start offset must be finite and non-negative".into(),
            ));
        }
        if !(self.random_walk_sigma.is_finite() && self.random_walk_sigma >= 0.0) {
            return Err(ClockError::InvalidModel(
                "random walk sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One sample path of a [`ClockModel`]. The random walk is generated lazily
/// from `seed`, so every read of the same realization is consistent.
#[derive(Debug, Clone)]
pub struct ClockRealization {
    model: ClockModel,
    rng: ChaCha8Rng,
    // Per grid step k: skew deviation from nominal on [k, k+1) and the
    // accumulated reading deviation at the start of step k.
    skew_dev: Vec<f64>,
    phase_dev: Vec<f64>,
}

impl ClockRealization {
    pub fn new(model: ClockModel, seed: u64) -> Self {
        ClockRealization {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            skew_dev: vec![0.0],
            phase_dev: vec![0.0],
        }
    }

    pub fn model(&self) -> &ClockModel {
        &self.model
    }

    fn extend_to(&mut self, step: usize) {
        let sd = self.model.random_walk_sigma * RANDOM_WALK_STEP_S.sqrt();
        while self.skew_dev.len() <= step {
            let k = self.skew_dev.len() - 1;
            let next_phase = self.phase_dev[k] + self.skew_dev[k] * RANDOM_WALK_STEP_S;
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let mut next_skew = self.skew_dev[k] + sd * z;
            // keep the oscillator running forward
            if self.model.skew + next_skew <= 0.0 {
                next_skew = self.skew_dev[k];
            }
            self.skew_dev.push(next_skew);
            self.phase_dev.push(next_phase);
        }
    }

    /// Instantaneous skew at true time `t` seconds.
    pub fn skew_at(&mut self, t: f64) -> f64 {
        if self.model.random_walk_sigma == 0.0 {
            return self.model.skew;
        }
        let k = (t.max(0.0) / RANDOM_WALK_STEP_S).floor() as usize;
        self.extend_to(k);
        self.model.skew + self.skew_dev[k]
    }

    /// Unquantized clock reading in seconds at true time `t` seconds.
    pub fn reading(&mut self, t: f64) -> f64 {
        let affine = self.model.start_offset + self.model.skew * t;
        if self.model.random_walk_sigma == 0.0 {
            return affine;
        }
        let t = t.max(0.0);
        let k = (t / RANDOM_WALK_STEP_S).floor() as usize;
        self.extend_to(k);
        let into = t - k as f64 * RANDOM_WALK_STEP_S;
        affine + self.phase_dev[k] + self.skew_dev[k] * into
    }

    pub fn read(&mut self, now: TrueTime, tick_period: f64) -> DeviceTime {
        DeviceTime::from_seconds(self.reading(now.as_seconds()), tick_period)
    }
}

/// Reads a clock at `now` with the default tick period.
pub fn read_clock(model: &ClockModel, now: TrueTime, rng_seed: u64) -> DeviceTime {
    ClockRealization::new(*model, rng_seed).read(now, DEFAULT_TICK_PERIOD)
}

/// Ratio of the interval an anchor measured between two SYNC receptions to
/// the interval the sync node reports between the two transmissions. The
/// fixed sync-to-anchor flight time drops out of the difference.
pub fn estimate_skew(
    t_sync_rx_prev: f64,
    t_sync_rx_cur: f64,
    t_sync_tx_prev: f64,
    t_sync_tx_cur: f64,
) -> Result<f64, ClockError> {
    let tx_interval = t_sync_tx_cur - t_sync_tx_prev;
    if !(tx_interval > 0.0) {
        return Err(ClockError::DegenerateInterval(tx_interval));
    }
    Ok((t_sync_rx_cur - t_sync_rx_prev) / tx_interval)
}

/// Filter state `[anchor clock reading at last SYNC, skew]` with covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockKfState {
    pub t_hat: f64,
    pub m_hat: f64,
    pub p: Matrix2<f64>,
}

impl ClockKfState {
    /// Starts a filter from the first received SYNC stamp.
    pub fn initial(first_rx: f64, params: &ClockKfParams) -> Self {
        ClockKfState {
            t_hat: first_rx,
            m_hat: 1.0,
            p: params.initial_covariance(),
        }
    }

    /// Clock reading predicted `elapsed` sync-clock seconds after the last update.
    pub fn interpolate(&self, elapsed: f64) -> f64 {
        self.t_hat + self.m_hat * elapsed
    }
}

/// Noise settings for the clock filter.
///
/// Measurement noise is `diag(sigma2_t, sigma2_m)`. Process noise follows the
/// usual two-state oscillator model: white phase noise of density
/// `process_t` plus a random-walk skew of density `process_m`, so that over
/// an interval `dt`
///
/// ```text
/// Q = [[q_t dt + q_m dt^3/3, q_m dt^2/2],
///      [q_m dt^2/2,          q_m dt    ]]
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockKfParams {
    /// Timestamp measurement variance, ns^2.
    pub sigma2_t_ns2: f64,
    /// Skew measurement variance.
    pub sigma2_m: f64,
    /// Initial covariance; the `[0][0]` entry is in ns^2.
    pub p0: [[f64; 2]; 2],
    /// Phase noise density, s^2 per second.
    pub process_t_s2_per_s: f64,
    /// Skew random-walk density, 1/s.
    pub process_m_per_s: f64,
}

impl Default for ClockKfParams {
    fn default() -> Self {
        ClockKfParams {
            sigma2_t_ns2: 0.4,
            sigma2_m: 0.01,
            p0: [[1.0, 0.0], [0.0, 0.001]],
            process_t_s2_per_s: 1e-16,
            process_m_per_s: 2.5e-19,
        }
    }
}

impl ClockKfParams {
    pub fn validate(&self) -> Result<(), ClockError> {
        let vals = [
            self.sigma2_t_ns2,
            self.sigma2_m,
            self.p0[0][0],
            self.p0[1][1],
            self.process_t_s2_per_s,
            self.process_m_per_s,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ClockError::InvalidModel(
                "filter variances must be finite and non-negative".into(),
            ));
        }
        if (self.p0[0][1] - self.p0[1][0]).abs() > 0.0 {
            return Err(ClockError::InvalidModel(
                "initial covariance must be symmetric".into(),
            ));
        }
        Ok(())
    }

    pub fn measurement_covariance(&self) -> Matrix2<f64> {
        Matrix2::new(self.sigma2_t_ns2 * 1e-18, 0.0, 0.0, self.sigma2_m)
    }

    pub fn initial_covariance(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.p0[0][0] * 1e-18,
            self.p0[0][1] * 1e-9,
            self.p0[1][0] * 1e-9,
            self.p0[1][1],
        )
    }

    pub fn process_noise(&self, dt: f64) -> Matrix2<f64> {
        let qt = self.process_t_s2_per_s;
        let qm = self.process_m_per_s;
        Matrix2::new(
            qt * dt + qm * dt.powi(3) / 3.0,
            qm * dt * dt / 2.0,
            qm * dt * dt / 2.0,
            qm * dt,
        )
    }
}

fn symmetrize(p: Matrix2<f64>) -> Matrix2<f64> {
    (p + p.transpose()) * 0.5
}

/// Propagates the clock state across `dt_sync` seconds of sync-node time.
pub fn kf_predict(state: &ClockKfState, dt_sync: f64, params: &ClockKfParams) -> ClockKfState {
    debug_assert!(dt_sync >= 0.0);
    let f = Matrix2::new(1.0, dt_sync, 0.0, 1.0);
    ClockKfState {
        t_hat: state.t_hat + state.m_hat * dt_sync,
        m_hat: state.m_hat,
        p: symmetrize(f * state.p * f.transpose() + params.process_noise(dt_sync)),
    }
}

/// Measurement update with the observed SYNC stamp and the ratio-derived skew.
pub fn kf_update(
    state: &ClockKfState,
    measured_t: f64,
    measured_m: f64,
    params: &ClockKfParams,
) -> Result<ClockKfState, ClockError> {
    let r = params.measurement_covariance();
    let s = state.p + r;
    let s_inv = s
        .cholesky()
        .ok_or(ClockError::NonPositiveInnovationCovariance)?
        .inverse();
    let k = state.p * s_inv;
    let innovation = Vector2::new(measured_t - state.t_hat, measured_m - state.m_hat);
    let dx = k * innovation;
    let i_k = Matrix2::identity() - k;
    // Joseph form keeps P symmetric positive semidefinite.
    let p = i_k * state.p * i_k.transpose() + k * r * k.transpose();
    Ok(ClockKfState {
        t_hat: state.t_hat + dx[0],
        m_hat: state.m_hat + dx[1],
        p: symmetrize(p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn secs(t: &DeviceTime) -> f64 {
        t.as_seconds()
    }

    #[test]
    fn ideal_clock_reads_true_time() {
        let t = read_clock(&ClockModel::ideal(), TrueTime::from_seconds(1.0), 0);
        assert_eq!(t.ticks, 63_897_600_000);
    }

    #[test]
    fn skewed_clocks_gain_their_drift_per_second() {
        let one = TrueTime::from_seconds(1.0);
        let a = read_clock(&ClockModel::with_skew(1.000000026), one, 0);
        assert!((secs(&a) - (1.0 + 26e-9)).abs() <= DEFAULT_TICK_PERIOD);
        let b = read_clock(&ClockModel::with_skew(1.0000000136), one, 0);
        assert!((secs(&b) - (1.0 + 13.6e-9)).abs() <= DEFAULT_TICK_PERIOD);
    }

    #[test]
    fn skew_estimate_examples() {
        assert_eq!(estimate_skew(0.0, 1.0, 0.0, 1.0).unwrap(), 1.0);
        let m = estimate_skew(5.0, 6.000000026, 2.0, 3.0).unwrap();
        assert!((m - 1.000000026).abs() < 1e-15);
        assert!(matches!(
            estimate_skew(0.0, 1.0, 2.0, 2.0),
            Err(ClockError::DegenerateInterval(_))
        ));
    }

    #[test]
    fn skew_estimate_from_quantized_sync_stamps() {
        // Oracle: read the simulated clock at two SYNC instants 100 ms apart.
        let model = ClockModel {
            start_offset: 0.25,
            skew: 1.000000014,
            random_walk_sigma: 0.0,
        };
        let mut clock = ClockRealization::new(model, 7);
        let t0 = TrueTime::from_seconds(3.0);
        let t1 = TrueTime::from_seconds(3.1);
        let rx0 = clock.read(t0, DEFAULT_TICK_PERIOD);
        let rx1 = clock.read(t1, DEFAULT_TICK_PERIOD);
        let m = estimate_skew(secs(&rx0), secs(&rx1), 3.0, 3.1).unwrap();
        assert!((m - 1.000000014).abs() <= 2.0 * DEFAULT_TICK_PERIOD / 0.1);
    }

    #[test]
    fn random_walk_path_is_consistent_and_monotone() {
        let model = ClockModel {
            start_offset: 0.1,
            skew: 1.00001,
            random_walk_sigma: 1e-6,
        };
        let mut a = ClockRealization::new(model, 3);
        let late = a.reading(2.5);
        let mut b = ClockRealization::new(model, 3);
        let mut prev = f64::MIN;
        for i in 0..3000 {
            let r = b.reading(i as f64 * 1e-3);
            assert!(r > prev);
            prev = r;
        }
        assert_eq!(b.reading(2.5), late);
        let other = ClockRealization::new(model, 4).reading(2.5);
        assert_ne!(other, late);
    }

    #[test]
    fn predict_examples() {
        let params = ClockKfParams::default();
        let s = ClockKfState {
            t_hat: 0.0,
            m_hat: 1.0,
            p: params.initial_covariance(),
        };
        let p = kf_predict(&s, 1.0, &params);
        assert_eq!(p.t_hat, 1.0);
        assert_eq!(p.m_hat, 1.0);
        assert!(p.p.trace() >= s.p.trace());

        let s2 = ClockKfState { m_hat: 1.000000026, ..s };
        let p2 = kf_predict(&s2, 1.0, &params);
        assert!((p2.t_hat - 1.000000026).abs() < 1e-15);
    }

    #[test]
    fn update_with_zero_residual_only_shrinks_covariance() {
        let params = ClockKfParams::default();
        let s = kf_predict(
            &ClockKfState {
                t_hat: 10.0,
                m_hat: 1.00002,
                p: params.initial_covariance(),
            },
            0.1,
            &params,
        );
        let u = kf_update(&s, s.t_hat, s.m_hat, &params).unwrap();
        assert_eq!(u.t_hat, s.t_hat);
        assert_eq!(u.m_hat, s.m_hat);
        assert!(u.p[(0, 0)] <= s.p[(0, 0)]);
        assert!(u.p[(1, 1)] <= s.p[(1, 1)]);
        // prior minus posterior is PSD
        let diff = s.p - u.p;
        assert!(diff.symmetric_eigenvalues().iter().all(|&e| e >= -1e-30));
    }

    #[test]
    fn singular_innovation_covariance_is_reported() {
        let params = ClockKfParams {
            sigma2_t_ns2: 0.0,
            sigma2_m: 0.0,
            ..ClockKfParams::default()
        };
        let s = ClockKfState {
            t_hat: 0.0,
            m_hat: 1.0,
            p: Matrix2::zeros(),
        };
        assert_eq!(
            kf_update(&s, 0.0, 1.0, &params),
            Err(ClockError::NonPositiveInnovationCovariance)
        );
    }

    /// Runs the filter over noiseless SYNC stamps of an affine clock.
    fn track(skew: f64, epochs: usize, dt: f64, params: &ClockKfParams) -> (ClockKfState, f64) {
        let reading = |t: f64| 0.37 + skew * t;
        let mut state = ClockKfState::initial(reading(0.0), params);
        let mut prev = (0.0, reading(0.0));
        for i in 1..=epochs {
            let tx = i as f64 * dt;
            let rx = reading(tx);
            let m = estimate_skew(prev.1, rx, prev.0, tx).unwrap();
            state = kf_update(&kf_predict(&state, dt, params), rx, m, params).unwrap();
            prev = (tx, rx);
        }
        (state, reading(epochs as f64 * dt))
    }

    #[test]
    fn filter_converges_to_planted_skew() {
        let params = ClockKfParams::default();
        let (state, truth) = track(1.00000002, 50, 0.1, &params);
        assert!((state.m_hat - 1.00000002).abs() < 5e-9);
        assert!((state.t_hat - truth).abs() < 1e-12);
    }

    #[test]
    fn filter_stays_bounded_with_reference_noise_settings() {
        let params = ClockKfParams::default();
        let mut state = ClockKfState::initial(0.0, &params);
        let mut peak = 0.0f64;
        for i in 1..=10_000 {
            let tx = i as f64 * 0.1;
            state = kf_predict(&state, 0.1, &params);
            state = kf_update(&state, tx * 1.00001, 1.00001, &params).unwrap();
            let ev = state.p.symmetric_eigenvalues();
            assert!(ev.iter().all(|&e| e >= -1e-15));
            peak = peak.max(state.p.trace());
        }
        assert!(peak < 1.0);
        assert!((state.m_hat - 1.00001).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn affine_clock_differences_match_skew(
            offset in 0.0..2.0f64,
            ppm in -100.0..100.0f64,
            t1 in 0.0..500.0f64,
            span in 0.001..10.0f64,
        ) {
            let model = ClockModel::from_ppm(offset, ppm);
            let mut c = ClockRealization::new(model, 1);
            let a = c.read(TrueTime::from_seconds(t1), DEFAULT_TICK_PERIOD);
            let b = c.read(TrueTime::from_seconds(t1 + span), DEFAULT_TICK_PERIOD);
            let t1q = TrueTime::from_seconds(t1).as_seconds();
            let t2q = TrueTime::from_seconds(t1 + span).as_seconds();
            let measured = b.seconds_since(&a);
            prop_assert!((measured - model.skew * (t2q - t1q)).abs() <= DEFAULT_TICK_PERIOD * 1.01);
            let m = estimate_skew(a.as_seconds(), b.as_seconds(), t1q, t2q).unwrap();
            prop_assert!((m - model.skew).abs() <= 2.0 * DEFAULT_TICK_PERIOD / (t2q - t1q) + 1e-12);
        }

        #[test]
        fn covariance_stays_psd(seed in 0u64..1000, dt in 0.01..1.0f64) {
            let params = ClockKfParams::default();
            let mut c = ClockRealization::new(ClockModel { start_offset: 0.5, skew: 1.00003, random_walk_sigma: 1e-9 }, seed);
            let mut state = ClockKfState::initial(c.reading(0.0), &params);
            let mut prev = (0.0, c.reading(0.0));
            for i in 1..200 {
                let tx = i as f64 * dt;
                let rx = c.reading(tx);
                let m = estimate_skew(prev.1, rx, prev.0, tx).unwrap();
                state = kf_update(&kf_predict(&state, dt, &params), rx, m, &params).unwrap();
                prev = (tx, rx);
                let p = state.p;
                prop_assert!((p[(0, 1)] - p[(1, 0)]).abs() == 0.0);
                prop_assert!(p.symmetric_eigenvalues().iter().all(|&e| e >= -1e-15));
            }
        }
    }
}
