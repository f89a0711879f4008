//! Effective channels, SINR, rates, power, energy efficiency and the
//! constraint audit. Every optimizer validates its steps against these.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{assemble_channels, ArrayKind, ChannelError, ChannelSet, PositionSet, TrialGeometry};
use crate::config::SystemConfig;

/// Rate slack (bps/Hz) when optimizers check the minimum-rate constraint,
/// absorbing rounding at an active threshold.
pub const QOS_SLACK: f64 = 1e-10;

/// Optimization variables of one trial together with the channels they
/// induce. Channels and effective channels are cached and refreshed by the
/// setters for phases and positions.
#[derive(Debug, Clone)]
pub struct SolutionState {
    geometry: Arc<TrialGeometry>,
    /// Receive postcoders v_k (length M).
    pub postcoders: Vec<DVector<Complex64>>,
    /// Transmit powers p_k (W).
    pub powers: DVector<f64>,
    phases: DVector<f64>,
    bs: PositionSet,
    ris: PositionSet,
    channels: ChannelSet,
    effective: Vec<DVector<Complex64>>,
}

impl SolutionState {
    pub fn new(
        geometry: Arc<TrialGeometry>,
        bs: PositionSet,
        ris: PositionSet,
        phases: DVector<f64>,
        powers: DVector<f64>,
        postcoders: Vec<DVector<Complex64>>,
    ) -> Result<Self, ChannelError> {
        let k = geometry.num_users();
        if phases.len() != ris.len() || powers.len() != k || postcoders.len() != k {
            return Err(ChannelError::Dimension(format!(
                "{} phases for {} elements, {} powers and {} postcoders for {} users",
                phases.len(),
                ris.len(),
                powers.len(),
                postcoders.len(),
                k
            )));
        }
        if postcoders.iter().any(|v| v.len() != bs.len()) {
            return Err(ChannelError::Dimension("postcoder length differs from antenna count".into()));
        }
        let channels = assemble_channels(&geometry, &bs, &ris)?;
        let effective = effective_channels(&channels, &phases);
        Ok(Self {
            geometry,
            postcoders,
            powers,
            phases,
            bs,
            ris,
            channels,
            effective,
        })
    }

    pub fn geometry(&self) -> &Arc<TrialGeometry> {
        &self.geometry
    }

    pub fn num_users(&self) -> usize {
        self.powers.len()
    }

    pub fn phases(&self) -> &DVector<f64> {
        &self.phases
    }

    pub fn bs_positions(&self) -> &PositionSet {
        &self.bs
    }

    pub fn ris_positions(&self) -> &PositionSet {
        &self.ris
    }

    pub fn positions(&self, which: ArrayKind) -> &PositionSet {
        match which {
            ArrayKind::Bs => &self.bs,
            ArrayKind::Ris => &self.ris,
        }
    }

    pub fn channels(&self) -> &ChannelSet {
        &self.channels
    }

    /// Cached a_k for every user.
    pub fn effective_channels(&self) -> &[DVector<Complex64>] {
        &self.effective
    }

    pub fn set_phases(&mut self, phases: DVector<f64>) {
        assert_eq!(phases.len(), self.phases.len());
        self.phases = phases;
        self.effective = effective_channels(&self.channels, &self.phases);
    }

    pub fn set_positions(&mut self, which: ArrayKind, positions: PositionSet) -> Result<(), ChannelError> {
        let target = match which {
            ArrayKind::Bs => &self.bs,
            ArrayKind::Ris => &self.ris,
        };
        if positions.len() != target.len() {
            return Err(ChannelError::Dimension(format!(
                "{} positions, expected {}",
                positions.len(),
                target.len()
            )));
        }
        let channels = match which {
            ArrayKind::Bs => assemble_channels(&self.geometry, &positions, &self.ris)?,
            ArrayKind::Ris => assemble_channels(&self.geometry, &self.bs, &positions)?,
        };
        match which {
            ArrayKind::Bs => self.bs = positions,
            ArrayKind::Ris => self.ris = positions,
        }
        self.channels = channels;
        self.effective = effective_channels(&self.channels, &self.phases);
        Ok(())
    }
}

/// `a_k = h_k + H diag(e^{jϑ}) g_k`.
pub fn effective_channel(channels: &ChannelSet, phases: &DVector<f64>, k: usize) -> DVector<Complex64> {
    let g = &channels.reflect[k];
    let reflected = DVector::from_fn(g.len(), |n, _| Complex64::from_polar(1.0, phases[n]) * g[n]);
    &channels.direct[k] + &channels.ris_bs * reflected
}

pub fn effective_channels(channels: &ChannelSet, phases: &DVector<f64>) -> Vec<DVector<Complex64>> {
    (0..channels.num_users()).map(|k| effective_channel(channels, phases, k)).collect()
}

/// Inner products `s[(k, j)] = v_k^H a_j`.
pub fn postcoder_products(postcoders: &[DVector<Complex64>], effective: &[DVector<Complex64>]) -> DMatrix<Complex64> {
    DMatrix::from_fn(postcoders.len(), effective.len(), |k, j| postcoders[k].dotc(&effective[j]))
}

/// SINR of user `k` for arbitrary postcoder `v` (not necessarily unit norm).
pub fn sinr_with(
    effective: &[DVector<Complex64>],
    powers: &DVector<f64>,
    v: &DVector<Complex64>,
    k: usize,
    noise: f64,
) -> f64 {
    let mut interference = noise * v.norm_squared();
    for (j, a) in effective.iter().enumerate() {
        if j != k {
            interference += powers[j] * v.dotc(a).norm_sqr();
        }
    }
    powers[k] * v.dotc(&effective[k]).norm_sqr() / interference
}

pub fn sinr(state: &SolutionState, config: &SystemConfig, k: usize) -> f64 {
    sinr_with(&state.effective, &state.powers, &state.postcoders[k], k, config.noise_watt)
}

pub fn sinrs(state: &SolutionState, config: &SystemConfig) -> DVector<f64> {
    DVector::from_fn(state.num_users(), |k, _| sinr(state, config, k))
}

pub fn rates(state: &SolutionState, config: &SystemConfig) -> DVector<f64> {
    sinrs(state, config).map(|g| (1.0 + g).log2())
}

pub fn sum_rate(state: &SolutionState, config: &SystemConfig) -> f64 {
    rates(state, config).sum()
}

/// `(1/η) Σ p_k + P_c`.
pub fn total_power(powers: &DVector<f64>, config: &SystemConfig) -> f64 {
    powers.sum() / config.amp_efficiency + config.circuit_power_watt
}

/// Sum rate over total power, in bits/J/Hz.
pub fn energy_efficiency(state: &SolutionState, config: &SystemConfig) -> f64 {
    sum_rate(state, config) / total_power(&state.powers, config)
}

/// SINRs and their gradients with respect to a real parameter vector.
///
/// `s[(k, j)] = v_k^H a_j`; row `k·K + j` of `ds` holds `∂s_kj/∂x`.
/// `noise[k] = σ²‖v_k‖²`. Returns `(γ, ∂γ)` with `∂γ` of shape K × dim.
pub fn sinr_and_gradients(
    s: &DMatrix<Complex64>,
    ds: &DMatrix<Complex64>,
    powers: &DVector<f64>,
    noise: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let k_users = s.nrows();
    let dim = ds.ncols();
    let mut gamma = DVector::zeros(k_users);
    let mut grad = DMatrix::zeros(k_users, dim);
    for k in 0..k_users {
        let mut interference = noise[k];
        let mut d_interference = DVector::<f64>::zeros(dim);
        let mut d_signal = DVector::<f64>::zeros(dim);
        for j in 0..k_users {
            let sc = s[(k, j)].conj();
            let row = ds.row(k * k_users + j);
            let d_abs: DVector<f64> = DVector::from_iterator(dim, row.iter().map(|d| 2.0 * (sc * d).re));
            if j == k {
                d_signal = powers[k] * d_abs;
            } else {
                interference += powers[j] * s[(k, j)].norm_sqr();
                d_interference += powers[j] * d_abs;
            }
        }
        let g = powers[k] * s[(k, k)].norm_sqr() / interference;
        gamma[k] = g;
        grad.row_mut(k).copy_from(&((d_signal - g * d_interference) / interference).transpose());
    }
    (gamma, grad)
}

/// `∂R_k/∂x` from SINRs and their gradients.
pub fn rate_gradients(gamma: &DVector<f64>, d_gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = d_gamma.clone();
    for (k, mut row) in out.row_iter_mut().enumerate() {
        row /= (1.0 + gamma[k]) * LN_2;
    }
    out
}

/// Worst residual per constraint of the EE problem; `required − achieved`,
/// so values ≤ 0 mean satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    /// Minimum rate: `max_k (R_th − R_k)`.
    pub qos: f64,
    /// Power box: `max_k max(p_k − P_max,k, −p_k)`.
    pub power: f64,
    /// Unit-norm postcoders: `max_k |‖v_k‖ − 1|`.
    pub unit_norm: f64,
    /// Unit-modulus reflection coefficients: `max_n ||e^{jϑ_n}| − 1|`.
    pub unit_modulus: f64,
    /// Antennas outside the region (m).
    pub bs_region: f64,
    /// Elements outside the region (m).
    pub ris_region: f64,
    /// `d0 − min antenna spacing` (m); `−d0` for a single antenna.
    pub bs_spacing: f64,
    /// `d0 − min element spacing` (m); `−d0` for a single element.
    pub ris_spacing: f64,
}

impl ConstraintAudit {
    pub const LABELS: [&'static str; 8] = ["C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8"];

    pub fn residuals(&self) -> [f64; 8] {
        [
            self.qos,
            self.power,
            self.unit_norm,
            self.unit_modulus,
            self.bs_region,
            self.ris_region,
            self.bs_spacing,
            self.ris_spacing,
        ]
    }

    pub fn worst(&self) -> f64 {
        self.residuals().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.residuals().iter().all(|r| *r <= tol)
    }
}

impl fmt::Display for ConstraintAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (label, r)) in Self::LABELS.iter().zip(self.residuals()).enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{label}={r:.3e}")?;
        }
        Ok(())
    }
}

fn spacing_residual(set: &PositionSet) -> f64 {
    if set.len() < 2 {
        -set.min_spacing
    } else {
        set.spacing_residual()
    }
}

pub fn audit(state: &SolutionState, config: &SystemConfig) -> ConstraintAudit {
    let rates = rates(state, config);
    let qos = rates
        .iter()
        .map(|r| config.rate_threshold_bpshz - r)
        .fold(f64::NEG_INFINITY, f64::max);
    let power = state
        .powers
        .iter()
        .enumerate()
        .map(|(k, &p)| (p - config.pmax(k)).max(-p))
        .fold(f64::NEG_INFINITY, f64::max);
    let unit_norm = state
        .postcoders
        .iter()
        .map(|v| (v.norm() - 1.0).abs())
        .fold(0.0, f64::max);
    let unit_modulus = state
        .phases
        .iter()
        .map(|&t| (Complex64::from_polar(1.0, t).norm() - 1.0).abs())
        .fold(0.0, f64::max);
    ConstraintAudit {
        qos,
        power,
        unit_norm,
        unit_modulus,
        bs_region: state.bs.region_residual(),
        ris_region: state.ris.region_residual(),
        bs_spacing: spacing_residual(&state.bs),
        ris_spacing: spacing_residual(&state.ris),
    }
}

/// Wraps phases into `[0, 2π]`.
pub fn wrap_phase(t: f64) -> f64 {
    let w = t.rem_euclid(2.0 * PI);
    if w == 0.0 && t > 0.0 {
        2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::channel::{sample_trial_geometry, Position};
    use crate::config::load_config;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit(m: usize, rng: &mut impl Rng) -> DVector<Complex64> {
        let v = DVector::from_fn(m, |_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let n = v.norm();
        v / Complex64::new(n, 0.0)
    }

    pub(crate) fn random_state(config: &SystemConfig, seed: u64) -> SolutionState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Arc::new(sample_trial_geometry(config, &mut rng));
        let bs = PositionSet::sample(config.num_bs_antennas, config.region_side_m, config.min_spacing_m, &mut rng).unwrap();
        let ris = PositionSet::sample(config.num_ris_elements, config.region_side_m, config.min_spacing_m, &mut rng).unwrap();
        let phases = DVector::from_fn(config.num_ris_elements, |_, _| rng.gen_range(0.0..2.0 * PI));
        let powers = DVector::from_fn(config.num_users, |_, _| rng.gen_range(0.01..config.pmax_watt));
        let v = (0..config.num_users).map(|_| random_unit(config.num_bs_antennas, &mut rng)).collect();
        SolutionState::new(g, bs, ris, phases, powers, v).unwrap()
    }

    pub(crate) fn small_config() -> SystemConfig {
        load_config("[system]\nbs_antennas = 4\nris_elements = 8\nusers = 3\npaths = 2\n").unwrap()
    }

    #[test]
    fn zero_reflection_gives_direct_channel() {
        let c = small_config();
        let s = random_state(&c, 1);
        let mut ch = s.channels().clone();
        for g in ch.reflect.iter_mut() {
            g.fill(Complex64::new(0.0, 0.0));
        }
        assert_eq!(effective_channel(&ch, s.phases(), 0), ch.direct[0]);
    }

    #[test]
    fn single_element_phase_flip() {
        let col = DVector::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.3)]);
        let gamma = Complex64::new(0.7, -0.2);
        let ch = ChannelSet {
            ris_bs: DMatrix::from_column_slice(2, 1, col.as_slice()),
            direct: vec![DVector::zeros(2)],
            reflect: vec![DVector::from_element(1, gamma)],
        };
        let a = effective_channel(&ch, &DVector::from_element(1, PI), 0);
        let want = -(&col * gamma);
        assert!((a - want).norm() < 1e-12);
    }

    #[test]
    fn effective_channel_matches_raw_reassembly() {
        // a_k[m] = Σ_l conj(e^{jκ·u_m}) σ_l + Σ_n H[m,n] e^{jϑ_n} g_k[n] with
        // every term rebuilt from the path parameters.
        let c = small_config();
        let s = random_state(&c, 2);
        let g = s.geometry();
        let u = &s.bs_positions().coords;
        let t = &s.ris_positions().coords;
        let fr = |kappa: &Position, x: &Position| Complex64::from_polar(1.0, kappa.dot(x));
        for k in 0..c.num_users {
            for m in 0..u.len() {
                let mut want = Complex64::new(0.0, 0.0);
                let bu = &g.user_bs[k];
                for l in 0..bu.rx.len() {
                    want += fr(&bu.rx.wave_vectors[l], &u[m]).conj() * bu.path_response[l];
                }
                for n in 0..t.len() {
                    let rb = &g.ris_bs;
                    let mut h = Complex64::new(0.0, 0.0);
                    for l in 0..rb.rx.len() {
                        h += fr(&rb.rx.wave_vectors[l], &u[m]).conj()
                            * rb.path_response[l]
                            * fr(&rb.tx.wave_vectors[l], &t[n]);
                    }
                    let ru = &g.user_ris[k];
                    let mut gk = Complex64::new(0.0, 0.0);
                    for l in 0..ru.rx.len() {
                        gk += fr(&ru.rx.wave_vectors[l], &t[n]).conj() * ru.path_response[l];
                    }
                    want += h * Complex64::from_polar(1.0, s.phases()[n]) * gk;
                }
                let got = s.effective_channels()[k][m];
                assert!((got - want).norm() <= 1e-12 * want.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn matched_filter_single_user() {
        let c = load_config("[system]\nbs_antennas = 4\nris_elements = 4\nusers = 1\n").unwrap();
        let mut s = random_state(&c, 3);
        let a = s.effective_channels()[0].clone();
        s.postcoders[0] = &a / Complex64::new(a.norm(), 0.0);
        let want = s.powers[0] * a.norm_squared() / c.noise_watt;
        assert!((sinr(&s, &c, 0) - want).abs() <= 1e-12 * want);
        s.powers[0] = 0.0;
        assert_eq!(sinr(&s, &c, 0), 0.0);
    }

    #[test]
    fn sinr_power_scaling() {
        let c = small_config();
        let mut s = random_state(&c, 4);
        let before = sinr(&s, &c, 0);
        s.powers *= 2.0;
        let after = sinr(&s, &c, 0);
        assert!(after > before);

        let mut quiet = c.clone();
        quiet.noise_watt = 0.0;
        let before = sinr(&s, &quiet, 0);
        s.powers *= 3.0;
        assert!((sinr(&s, &quiet, 0) - before).abs() <= 1e-12 * before);
    }

    #[test]
    fn power_and_ee_arithmetic() {
        let mut c = small_config();
        c.amp_efficiency = 0.3;
        c.circuit_power_watt = 0.1;
        let p = DVector::from_vec(vec![0.05, 0.03, 0.02]);
        let total = total_power(&p, &c);
        assert!((total - 0.433_333_333_333).abs() < 1e-9);
        assert!((10.0 / total - 23.076_923_076_9).abs() < 1e-8);

        let mut s = random_state(&c, 5);
        s.powers.fill(0.0);
        assert_eq!(sum_rate(&s, &c), 0.0);
        assert_eq!(total_power(&s.powers, &c), c.circuit_power_watt);
        assert_eq!(energy_efficiency(&s, &c), 0.0);
    }

    #[test]
    fn ee_matches_independent_recomputation() {
        let c = small_config();
        let s = random_state(&c, 6);
        let a = s.effective_channels();
        let mut r = 0.0;
        for k in 0..c.num_users {
            let v = &s.postcoders[k];
            let sig = s.powers[k] * v.dotc(&a[k]).norm_sqr();
            let mut den = c.noise_watt * v.norm_squared();
            for j in 0..c.num_users {
                if j != k {
                    den += s.powers[j] * v.dotc(&a[j]).norm_sqr();
                }
            }
            r += (1.0 + sig / den).ln() / LN_2;
        }
        let ee = r / (s.powers.sum() / c.amp_efficiency + c.circuit_power_watt);
        assert!((energy_efficiency(&s, &c) - ee).abs() <= 1e-12 * ee);
    }

    #[test]
    fn audit_reports_residuals() {
        let mut c = small_config();
        c.rate_threshold_bpshz = 0.0;
        let mut s = random_state(&c, 7);
        for v in s.postcoders.iter_mut() {
            let n = v.norm();
            *v /= Complex64::new(n, 0.0);
        }
        let a = audit(&s, &c);
        assert!(a.passes(1e-12), "{a}");

        s.powers[0] = 1.1 * c.pmax_watt;
        assert!((audit(&s, &c).power - 0.1 * c.pmax_watt).abs() < 1e-15);

        let mut bs = s.bs_positions().clone();
        bs.coords[1] = bs.coords[0] + Position::new(c.min_spacing_m / 2.0, 0.0);
        if bs.coords[1].x > c.region_side_m {
            bs.coords[1].x -= c.min_spacing_m;
        }
        s.set_positions(ArrayKind::Bs, bs).unwrap();
        assert!((audit(&s, &c).bs_spacing - c.min_spacing_m / 2.0).abs() < 1e-12);
    }

    #[test]
    fn setters_refresh_cached_channels() {
        let c = small_config();
        let mut s = random_state(&c, 8);
        let mut ris = s.ris_positions().clone();
        ris.coords[0].x += 0.01;
        s.set_positions(ArrayKind::Ris, ris.clone()).unwrap();
        let fresh = assemble_channels(s.geometry(), s.bs_positions(), &ris).unwrap();
        assert_eq!(s.channels(), &fresh);
        let phases = s.phases().map(|t| t + 0.3);
        s.set_phases(phases.clone());
        assert_eq!(s.effective_channels(), effective_channels(&fresh, &phases).as_slice());
    }

    #[test]
    fn wrap_phase_range() {
        assert_eq!(wrap_phase(2.0 * PI), 2.0 * PI);
        assert!((wrap_phase(-0.5) - (2.0 * PI - 0.5)).abs() < 1e-15);
        assert_eq!(wrap_phase(0.0), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sinr_monotone_in_powers(seed in 0u64..10_000, k in 0usize..3, scale in 1.01f64..10.0) {
            let c = small_config();
            let mut s = random_state(&c, seed);
            let base = sinr(&s, &c, k);
            s.powers[k] *= scale;
            prop_assert!(sinr(&s, &c, k) >= base);
            let raised = sinr(&s, &c, k);
            let j = (k + 1) % 3;
            s.powers[j] *= scale;
            prop_assert!(sinr(&s, &c, k) <= raised);
        }

        #[test]
        fn more_noise_never_raises_ee(seed in 0u64..10_000) {
            let c = small_config();
            let s = random_state(&c, seed);
            let mut noisy = c.clone();
            noisy.noise_watt *= 2.0;
            prop_assert!(energy_efficiency(&s, &noisy) <= energy_efficiency(&s, &c));
        }
    }
}
