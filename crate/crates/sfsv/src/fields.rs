//! Scalar fields on periodic uniform grids, the central-difference stencils
//! used by the Sobolev losses and physics metrics, and seeded synthetic data
//! generation.
//!
//! Everything here is periodic with second-order central differences. That
//! makes the discrete derivative operators commute exactly, which in turn
//! makes the stream-function construction exactly divergence-free and the
//! adjoint of each first derivative its own negative.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Grid geometry: channel count, extents and uniform spacing (both axes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub spacing: f64,
}

impl GridDims {
    pub fn new(channels: usize, height: usize, width: usize, spacing: f64) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Contract(format!(
                "grid dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::Contract(format!("grid spacing {spacing} must be > 0")));
        }
        Ok(Self {
            channels,
            height,
            width,
            spacing,
        })
    }

    /// Grid points per channel.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Flattened length `C * H * W`.
    pub fn len(&self) -> usize {
        self.channels * self.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// C x H x W field of 64-bit reals, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    dims: GridDims,
    data: Vec<f64>,
}

impl GridField {
    pub fn new(dims: GridDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Contract(format!(
                "field data length {} does not match {}x{}x{}",
                data.len(),
                dims.channels,
                dims.height,
                dims.width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field entry {v}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: GridDims) -> Self {
        Self {
            data: vec![0.0; dims.len()],
            dims,
        }
    }

    pub fn from_fn(dims: GridDims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..dims.channels {
            for i in 0..dims.height {
                for j in 0..dims.width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims.channels
    }

    pub fn spacing(&self) -> f64 {
        self.dims.spacing
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.dims.height + i) * self.dims.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.dims.height + i) * self.dims.width + j] = v;
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Single channel view as a new 1-channel field.
    pub fn channel(&self, c: usize) -> GridField {
        let cells = self.dims.cells();
        GridField {
            dims: GridDims {
                channels: 1,
                ..self.dims
            },
            data: self.data[c * cells..(c + 1) * cells].to_vec(),
        }
    }

    /// Stack 1-channel fields into a multi-channel field.
    pub fn stack(parts: &[GridField]) -> Result<GridField> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero fields".into()))?;
        let mut data = Vec::with_capacity(parts.len() * first.dims.cells());
        for p in parts {
            if p.dims.channels != 1 || p.dims.height != first.dims.height
                || p.dims.width != first.dims.width
            {
                return Err(Error::Contract("stack of mismatched fields".into()));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(GridField {
            dims: GridDims {
                channels: parts.len(),
                ..first.dims
            },
            data,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Derivative axis. `X` runs along grid columns, `Y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Finite-difference scheme family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    CentralPeriodic,
}

/// Stencil configuration shared by the derivative operators.
#[derive(Debug, Clone, Copy)]
pub struct StencilSet {
    pub scheme: Scheme,
    pub spacing: f64,
}

impl StencilSet {
    pub fn central_periodic(spacing: f64) -> Self {
        Self {
            scheme: Scheme::CentralPeriodic,
            spacing,
        }
    }

    pub fn for_field(field: &GridField) -> Self {
        Self::central_periodic(field.spacing())
    }

    /// Central first derivative with periodic wraparound:
    /// `D_x f(i,j) = (f(i,j+1) - f(i,j-1)) / (2h)`.
    pub fn derivative(&self, field: &GridField, axis: Axis) -> GridField {
        let d = field.dims;
        let inv = 1.0 / (2.0 * self.spacing);
        GridField::from_fn(d, |c, i, j| match axis {
            Axis::X => {
                let e = field.get(c, i, (j + 1) % d.width);
                let w = field.get(c, i, (j + d.width - 1) % d.width);
                (e - w) * inv
            }
            Axis::Y => {
                let s = field.get(c, (i + 1) % d.height, j);
                let n = field.get(c, (i + d.height - 1) % d.height, j);
                (s - n) * inv
            }
        })
    }

    /// Standard 5-point periodic Laplacian (tight second difference).
    pub fn laplacian(&self, field: &GridField) -> GridField {
        let d = field.dims;
        let inv = 1.0 / (self.spacing * self.spacing);
        GridField::from_fn(d, |c, i, j| {
            let center = field.get(c, i, j);
            let e = field.get(c, i, (j + 1) % d.width);
            let w = field.get(c, i, (j + d.width - 1) % d.width);
            let s = field.get(c, (i + 1) % d.height, j);
            let n = field.get(c, (i + d.height - 1) % d.height, j);
            (e + w + s + n - 4.0 * center) * inv
        })
    }
}

/// Central periodic first derivative along `axis`, spacing from the field.
pub fn fd_derivative(field: &GridField, axis: Axis) -> GridField {
    StencilSet::for_field(field).derivative(field, axis)
}

/// Discrete divergence `D_x u + D_y v` of a 2-channel velocity field.
pub fn fd_divergence(vel: &GridField) -> Result<GridField> {
    if vel.channels() != 2 {
        return Err(Error::Contract(format!(
            "divergence needs exactly 2 channels, got {}",
            vel.channels()
        )));
    }
    let u = vel.channel(0);
    let v = vel.channel(1);
    let dx_u = fd_derivative(&u, Axis::X);
    let dy_v = fd_derivative(&v, Axis::Y);
    Ok(GridField::from_fn(dx_u.dims(), |c, i, j| {
        dx_u.get(c, i, j) + dy_v.get(c, i, j)
    }))
}

/// Discrete vorticity `D_x v - D_y u` of a 2-channel velocity field.
pub fn fd_vorticity(vel: &GridField) -> Result<GridField> {
    if vel.channels() != 2 {
        return Err(Error::Contract(format!(
            "vorticity needs exactly 2 channels, got {}",
            vel.channels()
        )));
    }
    let u = vel.channel(0);
    let v = vel.channel(1);
    let dx_v = fd_derivative(&v, Axis::X);
    let dy_u = fd_derivative(&u, Axis::Y);
    Ok(GridField::from_fn(dx_v.dims(), |c, i, j| {
        dx_v.get(c, i, j) - dy_u.get(c, i, j)
    }))
}

/// One sinusoidal mode `amplitude * sin(2*pi*(kx*j/W + ky*i/H) + phase)` as a
/// 1-channel field. The building block of [`gen_grf`].
pub fn sine_mode(dims: GridDims, kx: i64, ky: i64, amplitude: f64, phase: f64) -> GridField {
    let dims = GridDims {
        channels: 1,
        ..dims
    };
    let (h, w) = (dims.height as f64, dims.width as f64);
    GridField::from_fn(dims, |_, i, j| {
        let arg = 2.0 * std::f64::consts::PI * (kx as f64 * j as f64 / w + ky as f64 * i as f64 / h)
            + phase;
        amplitude * arg.sin()
    })
}

/// Seeded random field: a sum of `num_modes` sinusoidal modes per channel
/// with amplitudes decaying as `(1 + |k|)^(-decay)`. Deterministic in the
/// seed.
pub fn gen_grf(seed: u64, dims: GridDims, num_modes: usize, decay: f64) -> Result<GridField> {
    if num_modes == 0 {
        return Err(Error::Contract("gen_grf needs num_modes >= 1".into()));
    }
    if !(decay > 0.0) {
        return Err(Error::Contract(format!("gen_grf decay {decay} must be > 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_kx = ((dims.width - 1) / 2).max(1) as i64;
    let max_ky = ((dims.height - 1) / 2).max(1) as i64;
    let kx_dist = Uniform::new_inclusive(-max_kx, max_kx).expect("wavenumber range");
    let ky_dist = Uniform::new_inclusive(-max_ky, max_ky).expect("wavenumber range");
    let phase_dist = Uniform::new(0.0, 2.0 * std::f64::consts::PI).expect("phase range");

    let mut channels = Vec::with_capacity(dims.channels);
    for _ in 0..dims.channels {
        let mut acc = GridField::zeros(GridDims {
            channels: 1,
            ..dims
        });
        for _ in 0..num_modes {
            let mut kx = kx_dist.sample(&mut rng);
            let mut ky = ky_dist.sample(&mut rng);
            if kx == 0 && ky == 0 {
                kx = 1;
                ky = 0;
            }
            let base: f64 = 0.5 + rng.random::<f64>();
            let phase = phase_dist.sample(&mut rng);
            let knorm = ((kx * kx + ky * ky) as f64).sqrt();
            let amp = base * (1.0 + knorm).powf(-decay);
            let mode = sine_mode(dims, kx, ky, amp, phase);
            for (a, m) in acc.data.iter_mut().zip(mode.data.iter()) {
                *a += m;
            }
        }
        channels.push(acc);
    }
    GridField::stack(&channels)
}

/// Seeded 2-channel divergence-free velocity field via a stream function:
/// `u = D_y psi`, `v = -D_x psi`. The discrete divergence vanishes to
/// roundoff because `D_x` and `D_y` commute.
pub fn gen_divfree(seed: u64, dims: GridDims) -> Result<GridField> {
    if dims.height < 4 || dims.width < 4 {
        return Err(Error::Contract(format!(
            "gen_divfree needs at least a 4x4 grid, got {}x{}",
            dims.height, dims.width
        )));
    }
    let psi = gen_grf(
        seed,
        GridDims {
            channels: 1,
            ..dims
        },
        8,
        1.0,
    )?;
    let u = fd_derivative(&psi, Axis::Y);
    let mut v = fd_derivative(&psi, Axis::X);
    for x in v.data.iter_mut() {
        *x = -*x;
    }
    GridField::stack(&[u, v])
}

/// Teacher operators producing targets from inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldOperator {
    /// `f + nu*dt*Laplacian(f)`; stable for `nu*dt/h^2 <= 0.25`.
    HeatStep { nu: f64, dt: f64 },
    /// `f - dt*(cx*D_x f + cy*D_y f)`.
    AdvectStep { cx: f64, cy: f64, dt: f64 },
}

/// Apply a teacher operator channel-wise.
pub fn apply_operator(field: &GridField, op: FieldOperator) -> Result<GridField> {
    let stencils = StencilSet::for_field(field);
    match op {
        FieldOperator::HeatStep { nu, dt } => {
            let h = field.spacing();
            let cfl = nu * dt / (h * h);
            if !(cfl <= 0.25) {
                return Err(Error::Config(format!(
                    "heat step unstable: nu*dt/h^2 = {cfl} > 0.25"
                )));
            }
            let lap = stencils.laplacian(field);
            Ok(GridField::from_fn(field.dims(), |c, i, j| {
                field.get(c, i, j) + nu * dt * lap.get(c, i, j)
            }))
        }
        FieldOperator::AdvectStep { cx, cy, dt } => {
            let dx = stencils.derivative(field, Axis::X);
            let dy = stencils.derivative(field, Axis::Y);
            Ok(GridField::from_fn(field.dims(), |c, i, j| {
                field.get(c, i, j) - dt * (cx * dx.get(c, i, j) + cy * dy.get(c, i, j))
            }))
        }
    }
}

/// One calibration or test pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: GridField,
    pub target: GridField,
    pub tag: String,
}

/// Dataset of input/target field pairs sharing one grid.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub dims: GridDims,
    pub tag_set: Vec<String>,
    pub samples: Vec<Sample>,
}

impl DatasetFile {
    pub fn new(dims: GridDims, tag_set: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        for (idx, s) in samples.iter().enumerate() {
            if s.input.dims() != dims || s.target.dims() != dims {
                return Err(Error::Contract(format!(
                    "sample {idx} grid does not match dataset grid"
                )));
            }
            if !tag_set.contains(&s.tag) {
                return Err(Error::Contract(format!(
                    "sample {idx} tag '{}' not in the declared tag set",
                    s.tag
                )));
            }
        }
        Ok(Self {
            dims,
            tag_set,
            samples,
        })
    }
}
