//! Deterministic synthetic radar sequences: Gaussian storm cells advected by
//! a prescribed velocity field, growing or decaying each step, with optional
//! clamped noise. Stands in for a real radar archive and doubles as a
//! ground-truth oracle for the baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{GeoRef, RadarFrame};

/// One synthetic storm: an isotropic Gaussian bump in rate space.
#[derive(Debug, Clone)]
pub struct StormCell {
    /// (row, col) in pixels.
    pub center: (f64, f64),
    /// Peak rate, mm/h.
    pub amplitude: f64,
    /// Gaussian radius, pixels.
    pub sigma: f64,
    /// Multiplicative amplitude factor applied each step.
    pub growth_rate: f64,
}

/// Per-pixel velocities in pixels per frame step. `u` moves columns (east
/// positive), `v` moves rows (south positive).
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl VelocityField {
    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        VelocityField {
            height,
            width,
            u: vec![u as f32; height * width],
            v: vec![v as f32; height * width],
        }
    }

    /// Solid-body rotation of `omega` radians per step about `pivot`
    /// (row, col). The pivot itself has zero velocity.
    pub fn rotational(height: usize, width: usize, pivot: (f64, f64), omega: f64) -> Self {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                u.push((-omega * (row as f64 - pivot.0)) as f32);
                v.push((omega * (col as f64 - pivot.1)) as f32);
            }
        }
        VelocityField { height, width, u, v }
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.len() != self.height * self.width || self.v.len() != self.height * self.width {
            return Err(Error::ShapeMismatch(format!(
                "velocity field {}x{} has {}/{} components",
                self.height,
                self.width,
                self.u.len(),
                self.v.len()
            )));
        }
        if !self.u.iter().chain(&self.v).all(|c| c.is_finite()) {
            return Err(Error::InvalidFrame("non-finite velocity".into()));
        }
        Ok(())
    }
}

/// How cells move across the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityModel {
    Uniform { u: f64, v: f64 },
    /// Rotation about the grid center, radians per step.
    Rotational { omega: f64 },
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Square grid edge, pixels.
    pub size: usize,
    pub frame_interval_minutes: u32,
    pub frame_count: usize,
    pub cell_count: usize,
    pub velocity: VelocityModel,
    /// Std-dev of the additive Gaussian noise; the noisy rate is clamped at 0.
    pub noise_amplitude: f64,
    pub seed: u64,
    /// Timestamp of frame 0, seconds since epoch UTC.
    pub start_timestamp: i64,
    pub amplitude_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub growth_range: (f64, f64),
    pub georef: GeoRef,
}

pub const DEFAULT_GEOREF: GeoRef = GeoRef {
    lat0: 45.0,
    lon0: -100.0,
    dlat: -0.009,
    dlon: 0.009,
};

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            frame_interval_minutes: 10,
            frame_count: 16,
            cell_count: 3,
            velocity: VelocityModel::Uniform { u: 1.0, v: 0.5 },
            noise_amplitude: 0.0,
            seed: 0,
            // 2018-06-01 00:00:00 UTC
            start_timestamp: 1_527_811_200,
            amplitude_range: (1.5, 8.0),
            sigma_range: (4.0, 9.0),
            growth_range: (1.0, 1.0),
            georef: DEFAULT_GEOREF,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("grid size must be positive".into()));
        }
        if self.frame_interval_minutes == 0 || 60 % self.frame_interval_minutes != 0 {
            return Err(Error::Config(format!(
                "frame interval {} min must divide 60",
                self.frame_interval_minutes
            )));
        }
        let ranges = [
            ("amplitude", self.amplitude_range, 0.0),
            ("sigma", self.sigma_range, f64::MIN_POSITIVE),
            ("growth", self.growth_range, f64::MIN_POSITIVE),
        ];
        for (name, (lo, hi), min) in ranges {
            if !(lo <= hi) || lo < min {
                return Err(Error::Config(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::Config("noise amplitude must be >= 0".into()));
        }
        Ok(())
    }

    pub fn interval_seconds(&self) -> i64 {
        self.frame_interval_minutes as i64 * 60
    }
}

fn bilinear(rates: &[f32], height: usize, width: usize, row: f64, col: f64) -> f64 {
    // Out-of-domain neighbours contribute zero: rain advects out of the tile.
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let mut acc = 0.0f64;
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        let rr = r0 as i64 + dr;
        if rr < 0 || rr >= height as i64 {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            let cc = c0 as i64 + dc;
            if cc < 0 || cc >= width as i64 {
                continue;
            }
            acc += wr * wc * rates[rr as usize * width + cc as usize] as f64;
        }
    }
    acc
}

/// Backward semi-Lagrangian transport: each output pixel samples the input at
/// its own position minus `velocity * steps`, with bilinear interpolation and
/// zero outside the domain.
pub fn advect(frame: &RadarFrame, field: &VelocityField, steps: usize) -> Result<RadarFrame> {
    field.validate()?;
    if field.height != frame.height || field.width != frame.width {
        return Err(Error::ShapeMismatch(format!(
            "velocity field {}x{} vs frame {}x{}",
            field.height, field.width, frame.height, frame.width
        )));
    }
    let mut rates = Vec::with_capacity(frame.rates.len());
    let n = steps as f64;
    for row in 0..frame.height {
        for col in 0..frame.width {
            let i = row * frame.width + col;
            let src_col = col as f64 - field.u[i] as f64 * n;
            let src_row = row as f64 - field.v[i] as f64 * n;
            rates.push(bilinear(&frame.rates, frame.height, frame.width, src_row, src_col) as f32);
        }
    }
    Ok(RadarFrame {
        height: frame.height,
        width: frame.width,
        timestamp: frame.timestamp,
        georef: frame.georef,
        rates,
    })
}

/// The velocity field implied by a config's model, sized for its grid.
pub fn velocity_field(config: &SynthConfig) -> VelocityField {
    match config.velocity {
        VelocityModel::Uniform { u, v } => VelocityField::uniform(config.size, config.size, u, v),
        VelocityModel::Rotational { omega } => {
            let c = (config.size as f64 - 1.0) / 2.0;
            VelocityField::rotational(config.size, config.size, (c, c), omega)
        }
    }
}

/// Analytic position of a cell after `t` steps under the model.
pub fn cell_position(model: VelocityModel, grid_size: usize, start: (f64, f64), t: usize) -> (f64, f64) {
    match model {
        VelocityModel::Uniform { u, v } => (start.0 + v * t as f64, start.1 + u * t as f64),
        VelocityModel::Rotational { omega } => {
            let c = (grid_size as f64 - 1.0) / 2.0;
            let (dr, dc) = (start.0 - c, start.1 - c);
            let theta = omega * t as f64;
            let (sin, cos) = theta.sin_cos();
            (c + dc * sin + dr * cos, c + dc * cos - dr * sin)
        }
    }
}

pub fn sample_cells(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<StormCell> {
    let margin = 0.15 * config.size as f64;
    let span = config.size as f64 - 2.0 * margin;
    (0..config.cell_count)
        .map(|_| StormCell {
            center: (
                margin + rng.gen::<f64>() * span,
                margin + rng.gen::<f64>() * span,
            ),
            amplitude: sample_range(rng, config.amplitude_range),
            sigma: sample_range(rng, config.sigma_range),
            growth_rate: sample_range(rng, config.growth_range),
        })
        .collect()
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + rng.gen::<f64>() * (hi - lo)
    }
}

fn render_cells(cells: &[StormCell], model: VelocityModel, size: usize, t: usize, out: &mut [f32]) {
    for cell in cells {
        let (cr, cc) = cell_position(model, size, cell.center, t);
        let amp = cell.amplitude * cell.growth_rate.powi(t as i32);
        if amp <= 0.0 {
            continue;
        }
        let reach = 6.0 * cell.sigma;
        let r_lo = ((cr - reach).floor().max(0.0)) as usize;
        let r_hi = ((cr + reach).ceil().min(size as f64 - 1.0)) as usize;
        let c_lo = ((cc - reach).floor().max(0.0)) as usize;
        let c_hi = ((cc + reach).ceil().min(size as f64 - 1.0)) as usize;
        if r_lo > r_hi || c_lo > c_hi {
            continue;
        }
        let inv = 1.0 / (2.0 * cell.sigma * cell.sigma);
        for row in r_lo..=r_hi {
            let dr = row as f64 - cr;
            for col in c_lo..=c_hi {
                let dc = col as f64 - cc;
                out[row * size + col] += (amp * (-(dr * dr + dc * dc) * inv).exp()) as f32;
            }
        }
    }
}

/// Generate a full sequence. Deterministic in the seed: identical configs
/// produce bit-identical frames.
pub fn generate_sequence(config: &SynthConfig) -> Result<Vec<RadarFrame>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cells = sample_cells(config, &mut rng);
    let noise = if config.noise_amplitude > 0.0 {
        Some(Normal::new(0.0, config.noise_amplitude).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(config.frame_count);
    for t in 0..config.frame_count {
        let mut rates = vec![0.0f32; config.size * config.size];
        render_cells(&cells, config.velocity, config.size, t, &mut rates);
        if let Some(dist) = &noise {
            for r in rates.iter_mut() {
                *r = (*r + dist.sample(&mut rng) as f32).max(0.0);
            }
        }
        frames.push(RadarFrame::new(
            config.size,
            config.size,
            config.start_timestamp + t as i64 * config.interval_seconds(),
            config.georef,
            rates,
        )?);
    }
    Ok(frames)
}
