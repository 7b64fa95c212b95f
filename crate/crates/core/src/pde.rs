//! Allen-Cahn ground truth: Gaussian random field initial conditions, an
//! explicit finite-difference solver with homogeneous Neumann boundaries, and
//! the MNDR dataset format.

use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::par::parallel_map;
use crate::rng::{derive_seed, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct GrfSpec {
    /// Decay exponent of the per-mode variance `(1 + |k|^2)^(-alpha/2)`.
    pub alpha: f64,
    pub clip: [f64; 2],
    pub seed: u64,
}

impl GrfSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            alpha: 4.0,
            clip: [-0.5, 0.5],
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 2.0) {
            return Err(Error::Invalid(format!("GRF decay exponent {} must exceed 2", self.alpha)));
        }
        if !(self.clip[0] < self.clip[1]) {
            return Err(Error::Invalid(format!("clip range {:?} is not ordered", self.clip)));
        }
        Ok(())
    }
}

/// Unit-variance field on cell centers of the unit square, before clipping.
///
/// Each wavenumber draws its coefficients from its own stream, so a given
/// seed yields the same low modes at every resolution.
pub fn grf_unclipped(spec: &GrfSpec, resolution: [usize; 2]) -> Result<Vec<f64>> {
    spec.validate()?;
    let [n1, n2] = resolution;
    if n1 < 4 || n2 < 4 {
        return Err(Error::Invalid(format!("GRF resolution {resolution:?} must be at least 4")));
    }
    let mut c = vec![Complex64::new(0.0, 0.0); n1 * n2];
    // Strictly below Nyquist on both axes.
    let (k1, k2) = (((n1 - 1) / 2) as i64, ((n2 - 1) / 2) as i64);
    let wrap = |k: i64, n: usize| k.rem_euclid(n as i64) as usize;
    for a in 0..=k1 {
        for b in -k2..=k2 {
            if a == 0 && b < 0 {
                continue;
            }
            let key = ((a as u32 as u64) << 32) | (b as i32 as u32 as u64);
            let mut rng = stream(spec.seed, key);
            let sigma = (1.0 + (a * a + b * b) as f64).powf(-spec.alpha / 4.0);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            if a == 0 && b == 0 {
                c[0] = Complex64::new(sigma * re, 0.0);
                continue;
            }
            // Half-cell phase places samples at cell centers.
            let phase = std::f64::consts::PI * (a as f64 / n1 as f64 + b as f64 / n2 as f64);
            let v = Complex64::new(sigma * re / 2.0, -sigma * im / 2.0) * Complex64::from_polar(1.0, phase);
            c[wrap(a, n1) * n2 + wrap(b, n2)] = v;
            c[wrap(-a, n1) * n2 + wrap(-b, n2)] = v.conj();
        }
    }
    fft2(&mut c, resolution, true);
    let u: Vec<f64> = c.iter().map(|z| z.re).collect();
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    let std = (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::NonFinite { op: "grf_sample" });
    }
    Ok(u.into_iter().map(|v| v / std).collect())
}

/// Clipped Gaussian random field, row-major `(N1, N2)`.
pub fn grf_sample(spec: &GrfSpec, resolution: [usize; 2]) -> Result<Vec<f64>> {
    let [lo, hi] = spec.clip;
    Ok(grf_unclipped(spec, resolution)?.into_iter().map(|v| v.clamp(lo, hi)).collect())
}

/// In-place 2D transform, rows then columns. `inverse` uses `exp(+i...)`
/// without normalization.
pub fn fft2(data: &mut [Complex64], resolution: [usize; 2], inverse: bool) {
    let [n1, n2] = resolution;
    let mut planner = FftPlanner::new();
    let (rows, cols) = if inverse {
        (planner.plan_fft_inverse(n2), planner.plan_fft_inverse(n1))
    } else {
        (planner.plan_fft_forward(n2), planner.plan_fft_forward(n1))
    };
    rows.process(data);
    let mut col = vec![Complex64::new(0.0, 0.0); n1];
    for j in 0..n2 {
        for i in 0..n1 {
            col[i] = data[i * n2 + j];
        }
        cols.process(&mut col);
        for i in 0..n1 {
            data[i * n2 + j] = col[i];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllenCahnSpec {
    pub gamma: f64,
    pub t_end: f64,
    pub resolution: [usize; 2],
    /// Upper bound on the time step.
    pub max_dt: f64,
}

impl AllenCahnSpec {
    pub const DEFAULT_MAX_DT: f64 = 5e-4;

    pub fn new(gamma: f64, resolution: [usize; 2]) -> Self {
        Self {
            gamma,
            t_end: 6.0,
            resolution,
            max_dt: Self::DEFAULT_MAX_DT,
        }
    }

    /// Grid spacing per axis on the unit square.
    pub fn h(&self) -> [f64; 2] {
        [1.0 / self.resolution[0] as f64, 1.0 / self.resolution[1] as f64]
    }

    /// `(dt, steps)`: `min(0.2 h^2 / gamma, max_dt)` shrunk to land on `t_end`.
    pub fn time_step(&self) -> Result<(f64, usize)> {
        if !(self.gamma > 0.0 && self.t_end > 0.0 && self.max_dt > 0.0) {
            return Err(Error::Invalid(format!(
                "gamma {}, end time {} and max_dt {} must be positive",
                self.gamma, self.t_end, self.max_dt
            )));
        }
        let h = self.h()[0].min(self.h()[1]);
        let dt = (0.2 * h * h / self.gamma).min(self.max_dt);
        let steps = (self.t_end / dt - 1e-9).ceil().max(1.0) as usize;
        Ok((self.t_end / steps as f64, steps))
    }
}

/// One explicit Euler step `u + dt (gamma lap u - (u^3 - u))`; the Laplacian
/// reflects ghost cells, which makes boundary fluxes vanish.
pub fn allen_cahn_step(u: &[f64], resolution: [usize; 2], gamma: f64, h: [f64; 2], dt: f64) -> Result<Vec<f64>> {
    let [n1, n2] = resolution;
    if u.len() != n1 * n2 {
        return Err(Error::Invalid(format!("state has {} values, grid {resolution:?}", u.len())));
    }
    let hm = h[0].min(h[1]);
    let bound = (hm * hm / (4.0 * gamma)).min(0.1);
    if !(dt > 0.0 && dt <= bound) {
        return Err(Error::Unstable { dt, bound });
    }
    let (c1, c2) = (gamma / (h[0] * h[0]), gamma / (h[1] * h[1]));
    let mut out = vec![0.0; u.len()];
    for i in 0..n1 {
        let (up, dn) = (i.saturating_sub(1), (i + 1).min(n1 - 1));
        for j in 0..n2 {
            let (lf, rt) = (j.saturating_sub(1), (j + 1).min(n2 - 1));
            let c = u[i * n2 + j];
            let lap = c1 * (u[up * n2 + j] + u[dn * n2 + j] - 2.0 * c) + c2 * (u[i * n2 + lf] + u[i * n2 + rt] - 2.0 * c);
            let v = c + dt * (lap - (c * c * c - c));
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "allen_cahn_step" });
            }
            out[i * n2 + j] = v;
        }
    }
    Ok(out)
}

/// Discrete Ginzburg-Landau energy `sum [gamma/2 |grad u|^2 + (u^2-1)^2/4] h1 h2`
/// with one-sided differences across interior faces.
pub fn energy(u: &[f64], resolution: [usize; 2], gamma: f64, h: [f64; 2]) -> f64 {
    let [n1, n2] = resolution;
    let mut e = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            let c = u[i * n2 + j];
            let mut grad = 0.0;
            if i + 1 < n1 {
                grad += ((u[(i + 1) * n2 + j] - c) / h[0]).powi(2);
            }
            if j + 1 < n2 {
                grad += ((u[i * n2 + j + 1] - c) / h[1]).powi(2);
            }
            e += 0.5 * gamma * grad + 0.25 * (c * c - 1.0).powi(2);
        }
    }
    e * h[0] * h[1]
}

pub const BLOWUP: f64 = 2.0;
pub const MAX_PRINCIPLE_SLACK: f64 = 0.05;

/// Integrate to `t_end`, calling `observe(step, state)` on the initial state
/// and after every step.
pub fn allen_cahn_trajectory(spec: &AllenCahnSpec, u0: &[f64], mut observe: impl FnMut(usize, &[f64])) -> Result<Vec<f64>> {
    let [n1, n2] = spec.resolution;
    if u0.len() != n1 * n2 {
        return Err(Error::Invalid(format!("initial state has {} values, grid {:?}", u0.len(), spec.resolution)));
    }
    if let Some(v) = u0.iter().find(|v| !(v.abs() <= 1.2)) {
        return Err(Error::Invalid(format!("initial value {v} outside [-1.2, 1.2]")));
    }
    let (dt, steps) = spec.time_step()?;
    let h = spec.h();
    let mut u = u0.to_vec();
    observe(0, &u);
    for step in 1..=steps {
        u = allen_cahn_step(&u, spec.resolution, spec.gamma, h, dt)?;
        let max_abs = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > BLOWUP {
            return Err(Error::BlowUp { step, max_abs });
        }
        observe(step, &u);
    }
    if let Some(v) = u.iter().find(|v| v.abs() > 1.0 + MAX_PRINCIPLE_SLACK) {
        return Err(Error::Invalid(format!("final value {v} outside [-1.05, 1.05]")));
    }
    Ok(u)
}

pub fn allen_cahn_solve(spec: &AllenCahnSpec, u0: &[f64]) -> Result<Vec<f64>> {
    allen_cahn_trajectory(spec, u0, |_, _| {})
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub gamma: f64,
    pub u0: Vec<f32>,
    pub ut: Vec<f32>,
}

/// In-memory MNDR file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: [usize; 2],
    pub channels: usize,
    pub alpha: f64,
    pub samples: Vec<Sample>,
}

const MNDR_MAGIC: &[u8; 4] = b"MNDR";
const MNDR_VERSION: u32 = 1;

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut b = vec![0; 4 * n];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

impl Dataset {
    pub fn points(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    /// Exact encoded size in bytes.
    pub fn byte_len(&self) -> usize {
        4 + 5 * 4 + 8 + self.samples.len() * (8 + 2 * self.points() * self.channels * 4)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let n = self.points() * self.channels;
        let mut buf = Vec::with_capacity(self.byte_len());
        buf.extend_from_slice(MNDR_MAGIC);
        for v in [
            MNDR_VERSION,
            to_u32(self.samples.len(), "sample count")?,
            to_u32(self.resolution[0], "resolution")?,
            to_u32(self.resolution[1], "resolution")?,
            to_u32(self.channels, "channels")?,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.alpha.to_le_bytes());
        for s in &self.samples {
            if s.u0.len() != n || s.ut.len() != n {
                return Err(Error::Format(format!("sample holds {} / {} values, expected {n}", s.u0.len(), s.ut.len())));
            }
            buf.extend_from_slice(&s.gamma.to_le_bytes());
            for v in s.u0.iter().chain(&s.ut) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated dataset header".into()))?;
        if &magic != MNDR_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != MNDR_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let count = read_u32(r)? as usize;
        let resolution = [read_u32(r)? as usize, read_u32(r)? as usize];
        let channels = read_u32(r)? as usize;
        let alpha = read_f64(r)?;
        let n = resolution[0] * resolution[1] * channels;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for k in 0..count {
            let truncated = |_| Error::Format(format!("dataset truncated in sample {k}"));
            let gamma = read_f64(r).map_err(truncated)?;
            let u0 = read_f32s(r, n).map_err(truncated)?;
            let ut = read_f32s(r, n).map_err(truncated)?;
            samples.push(Sample { gamma, u0, ut });
        }
        let mut rest = [0; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Ok(Self {
            resolution,
            channels,
            alpha,
            samples,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub resolution: [usize; 2],
    pub gamma_range: [f64; 2],
    pub alpha: f64,
    pub t_end: f64,
    pub max_dt: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(count: usize, resolution: [usize; 2], seed: u64) -> Self {
        Self {
            count,
            resolution,
            gamma_range: [1e-4, 5e-3],
            alpha: 4.0,
            t_end: 6.0,
            max_dt: AllenCahnSpec::DEFAULT_MAX_DT,
            seed,
        }
    }

    /// `(gamma, GRF seed)` of sample `index`; independent of resolution.
    pub fn draw(&self, index: usize) -> (f64, u64) {
        let mut rng = stream(self.seed, index as u64);
        let u: f64 = rng.gen();
        let [a, b] = self.gamma_range;
        let gamma = (a.ln() + u * (b.ln() - a.ln())).exp();
        (gamma, derive_seed(self.seed, index as u64))
    }

    pub fn sample(&self, index: usize) -> Result<Sample> {
        let (gamma, grf_seed) = self.draw(index);
        let grf = GrfSpec {
            alpha: self.alpha,
            ..GrfSpec::new(grf_seed)
        };
        let u0 = grf_sample(&grf, self.resolution)?;
        let ac = AllenCahnSpec {
            gamma,
            t_end: self.t_end,
            resolution: self.resolution,
            max_dt: self.max_dt,
        };
        let ut = allen_cahn_solve(&ac, &u0)?;
        Ok(Sample {
            gamma,
            u0: u0.iter().map(|&v| v as f32).collect(),
            ut: ut.iter().map(|&v| v as f32).collect(),
        })
    }
}

/// Generate every sample of `spec` using up to `threads` workers. The result
/// does not depend on the worker count.
pub fn dataset_generate(spec: &DatasetSpec, threads: usize) -> Result<Dataset> {
    if spec.count == 0 {
        return Err(Error::Invalid("dataset count must be at least 1".into()));
    }
    let [a, b] = spec.gamma_range;
    if !(a > 0.0 && b >= a) {
        return Err(Error::Invalid(format!("gamma range {:?} must be positive and ordered", spec.gamma_range)));
    }
    let samples = parallel_map(spec.count, threads, |i| spec.sample(i)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        resolution: spec.resolution,
        channels: 1,
        alpha: spec.alpha,
        samples,
    })
}
