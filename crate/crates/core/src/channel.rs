//! Field-response multipath channels as functions of antenna and element
//! positions.
//!
//! Each link carries `L` far-field paths. Path angles and complex path
//! responses are fixed per trial; only the phase `κ_l · x` of each path
//! depends on the 2-D position `x` inside the movable region:
//!
//! ```text
//! H   = F_RB(U)^H · diag(Σ_RB) · E_RB(T)      (M × N)
//! h_k = F_Bu,k(U)^H · σ_Bu,k                   (M)
//! g_k = E_Ru,k(T)^H · σ_Ru,k                   (N)
//! ```
//!
//! with `[F]_{l,i} = exp(j κ_l · x_i)` and
//! `κ_l = (2π/λ) [sinθ_l cosφ_l, sinθ_l sinφ_l]`.

use std::f64::consts::PI;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Vector2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::SystemConfig;

pub type Position = Vector2<f64>;

const J: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index {index} out of range for {len} positions")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("cannot place {count} points with spacing {min_spacing} in a square of side {side}")]
    Placement { count: usize, side: f64, min_spacing: f64 },
}

/// Angles of departure/arrival of the paths at one end of a link.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGeometry {
    pub elevation: Vec<f64>,
    pub azimuth: Vec<f64>,
    /// Projected wave-vectors (rad/m), one per path.
    pub wave_vectors: Vec<Vector2<f64>>,
}

impl PathGeometry {
    pub fn from_angles(elevation: Vec<f64>, azimuth: Vec<f64>, wavelength: f64) -> Self {
        assert_eq!(elevation.len(), azimuth.len());
        let k0 = 2.0 * PI / wavelength;
        let wave_vectors = elevation
            .iter()
            .zip(&azimuth)
            .map(|(&th, &ph)| Vector2::new(k0 * th.sin() * ph.cos(), k0 * th.sin() * ph.sin()))
            .collect();
        Self {
            elevation,
            azimuth,
            wave_vectors,
        }
    }

    /// Draws `paths` directions with `sin θ ~ U[0, 1]` and `φ ~ U[0, 2π)`.
    pub fn sample<R: Rng + ?Sized>(paths: usize, wavelength: f64, rng: &mut R) -> Self {
        let mut elevation = Vec::with_capacity(paths);
        let mut azimuth = Vec::with_capacity(paths);
        for _ in 0..paths {
            elevation.push(rng.gen::<f64>().asin());
            azimuth.push(rng.gen_range(0.0..2.0 * PI));
        }
        Self::from_angles(elevation, azimuth, wavelength)
    }

    pub fn len(&self) -> usize {
        self.wave_vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wave_vectors.is_empty()
    }
}

/// Multipath description of one link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPaths {
    pub tx: PathGeometry,
    pub rx: PathGeometry,
    /// Complex path responses, each CN(0, β0 d^(−α) / L).
    pub path_response: DVector<Complex64>,
    pub distance_m: f64,
    pub path_loss_exponent: f64,
}

impl LinkPaths {
    /// Per-path response variance `β0 d^(−α) / L`.
    pub fn path_variance(beta0: f64, distance_m: f64, exponent: f64, paths: usize) -> f64 {
        beta0 * distance_m.powf(-exponent) / paths as f64
    }

    pub fn sample<R: Rng + ?Sized>(
        paths: usize,
        distance_m: f64,
        exponent: f64,
        beta0: f64,
        wavelength: f64,
        rng: &mut R,
    ) -> Self {
        let tx = PathGeometry::sample(paths, wavelength, rng);
        let rx = PathGeometry::sample(paths, wavelength, rng);
        let path_response = sample_cn(paths, Self::path_variance(beta0, distance_m, exponent, paths), rng);
        Self {
            tx,
            rx,
            path_response,
            distance_m,
            path_loss_exponent: exponent,
        }
    }
}

/// `len` i.i.d. CN(0, variance) samples.
pub fn sample_cn<R: Rng + ?Sized>(len: usize, variance: f64, rng: &mut R) -> DVector<Complex64> {
    let s = (variance / 2.0).sqrt();
    DVector::from_fn(len, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(s * re, s * im)
    })
}

/// All random link parameters of one Monte Carlo trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialGeometry {
    /// RIS → BS link; `tx` is the RIS side, `rx` the BS side.
    pub ris_bs: LinkPaths,
    /// User → BS links; `rx` is the BS side.
    pub user_bs: Vec<LinkPaths>,
    /// User → RIS links; `rx` is the RIS side.
    pub user_ris: Vec<LinkPaths>,
    pub user_positions: Vec<[f64; 3]>,
}

impl TrialGeometry {
    pub fn num_users(&self) -> usize {
        self.user_bs.len()
    }
}

fn distance3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws link geometry and user drops for one trial.
///
/// Users are dropped uniformly (by area) in the annulus around the RIS, at
/// the configured height. Draw order is RIS–BS link first, then per user:
/// position, user–BS link, user–RIS link, so adding users leaves the earlier
/// draws untouched.
pub fn sample_trial_geometry<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> TrialGeometry {
    let lambda = config.wavelength_m;
    let beta0 = config.ref_gain_beta0;
    let ris_bs = LinkPaths::sample(
        config.paths.ris_bs,
        distance3(&config.bs_pos, &config.ris_pos),
        config.path_loss.ris_bs,
        beta0,
        lambda,
        rng,
    );
    let (r2_min, r2_max) = (config.user_ring_min_m.powi(2), config.user_ring_max_m.powi(2));
    let mut user_bs = Vec::with_capacity(config.num_users);
    let mut user_ris = Vec::with_capacity(config.num_users);
    let mut user_positions = Vec::with_capacity(config.num_users);
    for _ in 0..config.num_users {
        let r = rng.gen_range(r2_min..r2_max).sqrt();
        let angle = rng.gen_range(0.0..2.0 * PI);
        let pos = [
            config.ris_pos[0] + r * angle.cos(),
            config.ris_pos[1] + r * angle.sin(),
            config.user_height_m,
        ];
        user_bs.push(LinkPaths::sample(
            config.paths.user_bs,
            distance3(&pos, &config.bs_pos),
            config.path_loss.user_bs,
            beta0,
            lambda,
            rng,
        ));
        user_ris.push(LinkPaths::sample(
            config.paths.user_ris,
            distance3(&pos, &config.ris_pos),
            config.path_loss.user_ris,
            beta0,
            lambda,
            rng,
        ));
        user_positions.push(pos);
    }
    TrialGeometry {
        ris_bs,
        user_bs,
        user_ris,
        user_positions,
    }
}

/// Positions of the BS antennas or of the RIS elements inside `[0, side]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSet {
    pub coords: Vec<Position>,
    pub side: f64,
    pub min_spacing: f64,
}

impl PositionSet {
    pub fn new(coords: Vec<Position>, side: f64, min_spacing: f64) -> Self {
        Self {
            coords,
            side,
            min_spacing,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Largest distance by which any coordinate leaves the region (≤ 0 inside).
    pub fn region_residual(&self) -> f64 {
        self.coords
            .iter()
            .flat_map(|p| [-p.x, -p.y, p.x - self.side, p.y - self.side])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.coords.len() {
            for j in i + 1..self.coords.len() {
                best = best.min((self.coords[i] - self.coords[j]).norm());
            }
        }
        best
    }

    /// `d0 − min pairwise distance` (≤ 0 when the spacing holds).
    pub fn spacing_residual(&self) -> f64 {
        if self.coords.len() < 2 {
            return f64::NEG_INFINITY;
        }
        self.min_spacing - self.min_pairwise_distance()
    }

    /// Interleaved `[x_1, y_1, x_2, y_2, …]`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.len(), self.coords.iter().flat_map(|p| [p.x, p.y]))
    }

    pub fn with_vector(&self, v: &DVector<f64>) -> Self {
        assert_eq!(v.len(), 2 * self.len());
        let coords = (0..self.len()).map(|i| Position::new(v[2 * i], v[2 * i + 1])).collect();
        Self::new(coords, self.side, self.min_spacing)
    }

    /// Regular grid spanning the region, filled row by row.
    pub fn grid(count: usize, side: f64, min_spacing: f64) -> Result<Self, ChannelError> {
        let per_side = (count as f64).sqrt().ceil() as usize;
        let pitch = if per_side > 1 { side / (per_side - 1) as f64 } else { 0.0 };
        if per_side > 1 && pitch < min_spacing {
            return Err(ChannelError::Placement {
                count,
                side,
                min_spacing,
            });
        }
        let coords = (0..count)
            .map(|i| {
                if per_side == 1 {
                    Position::new(side / 2.0, side / 2.0)
                } else {
                    Position::new((i % per_side) as f64 * pitch, (i / per_side) as f64 * pitch)
                }
            })
            .collect();
        Ok(Self::new(coords, side, min_spacing))
    }

    /// Sequential rejection sampling, uniform in the region; falls back to
    /// [`PositionSet::grid`] after 10⁴ rejections.
    pub fn sample<R: Rng + ?Sized>(
        count: usize,
        side: f64,
        min_spacing: f64,
        rng: &mut R,
    ) -> Result<Self, ChannelError> {
        const MAX_REJECTIONS: usize = 10_000;
        let mut coords: Vec<Position> = Vec::with_capacity(count);
        let mut rejections = 0;
        while coords.len() < count {
            let p = Position::new(rng.gen_range(0.0..=side), rng.gen_range(0.0..=side));
            if coords.iter().all(|q| (p - q).norm() >= min_spacing) {
                coords.push(p);
            } else {
                rejections += 1;
                if rejections >= MAX_REJECTIONS {
                    return Self::grid(count, side, min_spacing);
                }
            }
        }
        Ok(Self::new(coords, side, min_spacing))
    }
}

/// Which movable array a position variable belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArrayKind {
    /// BS receive antennas (U).
    Bs,
    /// RIS elements (T).
    Ris,
}

/// `L × count` matrix with entries `exp(j κ_l · x_i)`.
pub fn field_response_matrix(positions: &[Position], geometry: &PathGeometry) -> DMatrix<Complex64> {
    DMatrix::from_fn(geometry.len(), positions.len(), |l, i| {
        Complex64::from_polar(1.0, geometry.wave_vectors[l].dot(&positions[i]))
    })
}

/// Channels of one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// RIS → BS channel H (M × N).
    pub ris_bs: DMatrix<Complex64>,
    /// Direct channels h_k (length M each).
    pub direct: Vec<DVector<Complex64>>,
    /// User → RIS channels g_k (length N each).
    pub reflect: Vec<DVector<Complex64>>,
}

impl ChannelSet {
    pub fn num_users(&self) -> usize {
        self.direct.len()
    }

    pub fn is_finite(&self) -> bool {
        let finite = |c: &Complex64| c.re.is_finite() && c.im.is_finite();
        self.ris_bs.iter().all(finite)
            && self.direct.iter().flat_map(|v| v.iter()).all(finite)
            && self.reflect.iter().flat_map(|v| v.iter()).all(finite)
    }

    /// Dumps every entry as CSV rows `matrix,user,row,col,re,im`, with full
    /// round-trip precision.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "matrix,user,row,col,re,im")?;
        for ((r, c), v) in self.ris_bs.iter().enumerate().map(|(i, v)| {
            let rows = self.ris_bs.nrows();
            ((i % rows, i / rows), v)
        }) {
            writeln!(out, "H,,{r},{c},{:e},{:e}", v.re, v.im)?;
        }
        for (k, h) in self.direct.iter().enumerate() {
            for (m, v) in h.iter().enumerate() {
                writeln!(out, "h,{k},{m},0,{:e},{:e}", v.re, v.im)?;
            }
        }
        for (k, g) in self.reflect.iter().enumerate() {
            for (n, v) in g.iter().enumerate() {
                writeln!(out, "g,{k},{n},0,{:e},{:e}", v.re, v.im)?;
            }
        }
        Ok(())
    }
}

/// `F^H σ` for a receive-side field response `F`.
fn receive_response(fr: &DMatrix<Complex64>, sigma: &DVector<Complex64>) -> DVector<Complex64> {
    fr.adjoint() * sigma
}

/// Builds H, h_k and g_k for the given antenna (`bs`) and element (`ris`)
/// positions.
pub fn assemble_channels(
    geometry: &TrialGeometry,
    bs: &PositionSet,
    ris: &PositionSet,
) -> Result<ChannelSet, ChannelError> {
    let users = geometry.user_bs.len();
    if geometry.user_ris.len() != users {
        return Err(ChannelError::Dimension(format!(
            "{} user–BS links but {} user–RIS links",
            users,
            geometry.user_ris.len()
        )));
    }
    let rb = &geometry.ris_bs;
    if rb.rx.len() != rb.path_response.len() || rb.tx.len() != rb.path_response.len() {
        return Err(ChannelError::Dimension("RIS–BS path counts disagree".into()));
    }
    let f_rb = field_response_matrix(&bs.coords, &rb.rx);
    let e_rb = field_response_matrix(&ris.coords, &rb.tx);
    let mut weighted = e_rb;
    for (l, mut row) in weighted.row_iter_mut().enumerate() {
        row *= rb.path_response[l];
    }
    let ris_bs = f_rb.adjoint() * weighted;

    let mut direct = Vec::with_capacity(users);
    let mut reflect = Vec::with_capacity(users);
    for (bu, ru) in geometry.user_bs.iter().zip(&geometry.user_ris) {
        if bu.rx.len() != bu.path_response.len() || ru.rx.len() != ru.path_response.len() {
            return Err(ChannelError::Dimension("user link path counts disagree".into()));
        }
        direct.push(receive_response(&field_response_matrix(&bs.coords, &bu.rx), &bu.path_response));
        reflect.push(receive_response(&field_response_matrix(&ris.coords, &ru.rx), &ru.path_response));
    }
    Ok(ChannelSet {
        ris_bs,
        direct,
        reflect,
    })
}

/// Partial derivatives of the channel entries that depend on one antenna or
/// element position, w.r.t. its x and y coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelJacobian {
    pub which: ArrayKind,
    pub index: usize,
    /// `∂H[m, :]` for an antenna (length N) or `∂H[:, n]` for an element
    /// (length M), for x and y.
    pub ris_bs: [DVector<Complex64>; 2],
    /// `∂h_k[m]` per user; zero for an element.
    pub direct: Vec<[Complex64; 2]>,
    /// `∂g_k[n]` per user; zero for an antenna.
    pub reflect: Vec<[Complex64; 2]>,
}

/// `Σ_l (±j κ_l) w_l exp(±j κ_l · x)` split into x and y parts. `conj`
/// selects the conjugated field response.
fn weighted_phase_derivative<'a>(
    x: &Position,
    geometry: &PathGeometry,
    weights: impl Iterator<Item = Complex64> + 'a,
    conj: bool,
) -> [Complex64; 2] {
    let mut out = [Complex64::new(0.0, 0.0); 2];
    for (kappa, w) in geometry.wave_vectors.iter().zip(weights) {
        let phase = kappa.dot(x);
        let (e, dj) = if conj {
            (Complex64::from_polar(1.0, -phase), -J)
        } else {
            (Complex64::from_polar(1.0, phase), J)
        };
        let base = dj * e * w;
        out[0] += base * kappa.x;
        out[1] += base * kappa.y;
    }
    out
}

/// Derivatives of H, h_k and g_k w.r.t. the position of antenna/element
/// `index` of array `which`.
pub fn channel_position_jacobian(
    geometry: &TrialGeometry,
    bs: &PositionSet,
    ris: &PositionSet,
    which: ArrayKind,
    index: usize,
) -> Result<ChannelJacobian, ChannelError> {
    let users = geometry.num_users();
    let zero = Complex64::new(0.0, 0.0);
    let rb = &geometry.ris_bs;
    match which {
        ArrayKind::Bs => {
            let u = *bs.coords.get(index).ok_or(ChannelError::IndexOutOfRange {
                index,
                len: bs.len(),
            })?;
            // H[m, n] = Σ_l conj(F[l, m]) ζ_l E[l, n]
            let e_rb = field_response_matrix(&ris.coords, &rb.tx);
            let n_el = ris.len();
            let mut d = [DVector::zeros(n_el), DVector::zeros(n_el)];
            for n in 0..n_el {
                let w = (0..rb.len_paths()).map(|l| rb.path_response[l] * e_rb[(l, n)]);
                let [dx, dy] = weighted_phase_derivative(&u, &rb.rx, w, true);
                d[0][n] = dx;
                d[1][n] = dy;
            }
            let direct = geometry
                .user_bs
                .iter()
                .map(|bu| weighted_phase_derivative(&u, &bu.rx, bu.path_response.iter().copied(), true))
                .collect();
            Ok(ChannelJacobian {
                which,
                index,
                ris_bs: d,
                direct,
                reflect: vec![[zero; 2]; users],
            })
        }
        ArrayKind::Ris => {
            let t = *ris.coords.get(index).ok_or(ChannelError::IndexOutOfRange {
                index,
                len: ris.len(),
            })?;
            let f_rb = field_response_matrix(&bs.coords, &rb.rx);
            let m_ant = bs.len();
            let mut d = [DVector::zeros(m_ant), DVector::zeros(m_ant)];
            for m in 0..m_ant {
                let w = (0..rb.len_paths()).map(|l| f_rb[(l, m)].conj() * rb.path_response[l]);
                let [dx, dy] = weighted_phase_derivative(&t, &rb.tx, w, false);
                d[0][m] = dx;
                d[1][m] = dy;
            }
            let reflect = geometry
                .user_ris
                .iter()
                .map(|ru| weighted_phase_derivative(&t, &ru.rx, ru.path_response.iter().copied(), true))
                .collect();
            Ok(ChannelJacobian {
                which,
                index,
                ris_bs: d,
                direct: vec![[zero; 2]; users],
                reflect,
            })
        }
    }
}

impl LinkPaths {
    fn len_paths(&self) -> usize {
        self.path_response.len()
    }
}
