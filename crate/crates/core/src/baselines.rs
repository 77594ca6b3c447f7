//! The two reproducible comparison models: persistence (future rain equals
//! current rain) and optical-flow extrapolation (estimate motion from the
//! last two frames, transport the last frame along it, intensity unchanged).

use crate::error::{Error, Result};
use crate::pipeline::FRAME_SPACING_SECONDS;
use crate::raster::{exceedance_mask, quantize, QuantizationScheme, RadarFrame};
use crate::synthgen::{advect, VelocityField};

/// Per-pixel displacement estimate in pixels per frame interval, plus a
/// normalized structure-tensor confidence in [0, 1].
#[derive(Debug, Clone)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub confidence: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Persistence,
    OpticalFlow,
}

impl BaselineKind {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineKind::Persistence => "persistence",
            BaselineKind::OpticalFlow => "optical_flow",
        }
    }
}

/// Hard {0,1} exceedance maps, one per rain threshold.
#[derive(Debug, Clone)]
pub struct BaselinePrediction {
    pub maps: Vec<Vec<f32>>,
    pub height: usize,
    pub width: usize,
    pub source: BaselineKind,
}

/// The identity model: exceedance masks of the quantized last frame as
/// degenerate probabilities.
pub fn persistence_predict(
    last_frame: &RadarFrame,
    scheme: &QuantizationScheme,
) -> Result<BaselinePrediction> {
    let grid = quantize(last_frame, scheme)?;
    let maps = (0..scheme.thresholds().len())
        .map(|i| {
            exceedance_mask(&grid, i, scheme)
                .map(|m| m.bits.iter().map(|&b| b as f32).collect::<Vec<f32>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselinePrediction {
        maps,
        height: last_frame.height,
        width: last_frame.width,
        source: BaselineKind::Persistence,
    })
}

#[derive(Debug, Clone)]
pub struct FlowParams {
    /// Odd window edge for the local least squares.
    pub window: usize,
    /// Gauss-Newton refinement iterations (warp, re-solve).
    pub iterations: usize,
    /// Pyramid levels; 1 = single scale.
    pub pyramid_levels: usize,
    /// Pixels whose smallest structure-tensor eigenvalue falls below this
    /// fraction of the scene maximum fall back to the confidence-weighted
    /// global mean displacement.
    pub min_eig_frac: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            window: 17,
            iterations: 8,
            pyramid_levels: 1,
            min_eig_frac: 0.02,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!("flow window must be odd and >= 3, got {}", self.window)));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if !(0.0..1.0).contains(&self.min_eig_frac) {
            return Err(Error::Config(format!("bad min_eig_frac {}", self.min_eig_frac)));
        }
        Ok(())
    }
}

/// Summed-area table with O(1) clamped box sums.
struct Sat {
    height: usize,
    width: usize,
    table: Vec<f64>,
}

impl Sat {
    fn build(plane: &[f64], height: usize, width: usize) -> Self {
        let mut table = vec![0.0f64; (height + 1) * (width + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += plane[y * width + x];
                table[(y + 1) * (width + 1) + (x + 1)] = table[y * (width + 1) + (x + 1)] + row;
            }
        }
        Sat { height, width, table }
    }

    /// Sum over the window of radius `r` around (y, x), clamped to the plane.
    fn window_sum(&self, y: usize, x: usize, r: usize) -> f64 {
        let y0 = y.saturating_sub(r);
        let x0 = x.saturating_sub(r);
        let y1 = (y + r + 1).min(self.height);
        let x1 = (x + r + 1).min(self.width);
        let w = self.width + 1;
        self.table[y1 * w + x1] + self.table[y0 * w + x0]
            - self.table[y0 * w + x1]
            - self.table[y1 * w + x0]
    }
}

fn central_gradients(plane: &[f32], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: usize, x: usize| plane[y * width + x] as f64;
    let mut gx = vec![0.0f64; height * width];
    let mut gy = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(width - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(height - 1);
            gx[y * width + x] = (at(y, xp) - at(y, xm)) / 2.0;
            gy[y * width + x] = (at(yp, x) - at(ym, x)) / 2.0;
        }
    }
    (gx, gy)
}

fn bilinear_zero(plane: &[f32], height: usize, width: usize, row: f64, col: f64) -> f64 {
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
            acc += wr * wc * plane[rr as usize * width + cc as usize] as f64;
        }
    }
    acc
}

fn downsample_half(plane: &[f32], height: usize, width: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = (2 * y) * width + 2 * x;
            out[y * ow + x] = (plane[i] + plane[i + 1] + plane[i + width] + plane[i + width + 1]) / 4.0;
        }
    }
    (out, oh, ow)
}

struct LevelFlow {
    u: Vec<f64>,
    v: Vec<f64>,
    lambda_min: Vec<f64>,
}

/// Single-scale iterative Lucas-Kanade between two planes, starting from an
/// initial displacement estimate.
fn lk_level(
    prev: &[f32],
    last: &[f32],
    height: usize,
    width: usize,
    params: &FlowParams,
    init_u: &[f64],
    init_v: &[f64],
) -> LevelFlow {
    let r = params.window / 2;
    let clamp = (params.window as f64) / 2.0 + 1.0;
    let (gx, gy) = central_gradients(prev, height, width);

    let gxx: Vec<f64> = gx.iter().map(|g| g * g).collect();
    let gyy: Vec<f64> = gy.iter().map(|g| g * g).collect();
    let gxy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let sat_xx = Sat::build(&gxx, height, width);
    let sat_yy = Sat::build(&gyy, height, width);
    let sat_xy = Sat::build(&gxy, height, width);

    let n = height * width;
    let mut u = init_u.to_vec();
    let mut v = init_v.to_vec();
    let mut lambda_min = vec![0.0f64; n];
    let mut sxx = vec![0.0f64; n];
    let mut syy = vec![0.0f64; n];
    let mut sxy = vec![0.0f64; n];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            sxx[i] = sat_xx.window_sum(y, x, r);
            syy[i] = sat_yy.window_sum(y, x, r);
            sxy[i] = sat_xy.window_sum(y, x, r);
            let half_trace = (sxx[i] + syy[i]) / 2.0;
            let disc = ((sxx[i] - syy[i]) / 2.0).powi(2) + sxy[i] * sxy[i];
            lambda_min[i] = half_trace - disc.sqrt();
        }
    }
    let lambda_max = lambda_min.iter().cloned().fold(0.0f64, f64::max);
    if lambda_max <= 0.0 {
        return LevelFlow {
            u: vec![0.0; n],
            v: vec![0.0; n],
            lambda_min,
        };
    }
    let eig_floor = params.min_eig_frac * lambda_max;

    let mut residual = vec![0.0f64; n];
    let mut gxt = vec![0.0f64; n];
    let mut gyt = vec![0.0f64; n];
    for _ in 0..params.iterations {
        // Warp the newer frame backward through the current estimate.
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let warped = bilinear_zero(last, height, width, y as f64 + v[i], x as f64 + u[i]);
                residual[i] = warped - prev[i] as f64;
            }
        }
        for i in 0..n {
            gxt[i] = gx[i] * residual[i];
            gyt[i] = gy[i] * residual[i];
        }
        let sat_xt = Sat::build(&gxt, height, width);
        let sat_yt = Sat::build(&gyt, height, width);

        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if lambda_min[i] < eig_floor {
                    continue;
                }
                let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
                if det.abs() < 1e-12 {
                    continue;
                }
                let bx = sat_xt.window_sum(y, x, r);
                let by = sat_yt.window_sum(y, x, r);
                let du = -(syy[i] * bx - sxy[i] * by) / det;
                let dv = -(sxx[i] * by - sxy[i] * bx) / det;
                u[i] = (u[i] + du).clamp(-clamp, clamp);
                v[i] = (v[i] + dv).clamp(-clamp, clamp);
            }
        }
    }

    // Low-texture pixels fall back to the confidence-weighted global mean.
    let mut weight_sum = 0.0f64;
    let mut mean_u = 0.0f64;
    let mut mean_v = 0.0f64;
    for i in 0..n {
        if lambda_min[i] >= eig_floor {
            weight_sum += lambda_min[i];
            mean_u += lambda_min[i] * u[i];
            mean_v += lambda_min[i] * v[i];
        }
    }
    if weight_sum > 0.0 {
        mean_u /= weight_sum;
        mean_v /= weight_sum;
    }
    for i in 0..n {
        if lambda_min[i] < eig_floor {
            u[i] = mean_u;
            v[i] = mean_v;
        }
    }

    LevelFlow { u, v, lambda_min }
}

/// Dense displacement from the last two frames: local least squares over a
/// window, iterated with backward warping, with an optional coarse-to-fine
/// pyramid for larger displacements.
pub fn estimate_flow(frames: &[RadarFrame], params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if frames.len() < 2 {
        return Err(Error::Dataset(format!(
            "flow estimation needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let last = &frames[frames.len() - 1];
    let prev = &frames[frames.len() - 2];
    if prev.height != last.height || prev.width != last.width {
        return Err(Error::ShapeMismatch("flow input frames differ in size".into()));
    }
    let spacing = last.timestamp - prev.timestamp;
    for pair in frames.windows(2) {
        if pair[1].timestamp - pair[0].timestamp != spacing {
            return Err(Error::Dataset("flow input frames are not equally spaced".into()));
        }
    }

    // Build pyramids, coarsest last.
    let mut levels = vec![(prev.rates.clone(), last.rates.clone(), prev.height, prev.width)];
    for _ in 1..params.pyramid_levels {
        let (p, h, w) = {
            let top = levels.last().unwrap();
            (downsample_half(&top.0, top.2, top.3), top.2, top.3)
        };
        if h / 2 < params.window || w / 2 < params.window {
            break;
        }
        let (l, _, _) = {
            let top = levels.last().unwrap();
            downsample_half(&top.1, top.2, top.3)
        };
        levels.push((p.0, l, h / 2, w / 2));
    }

    let mut flow: Option<LevelFlow> = None;
    for (p, l, h, w) in levels.iter().rev() {
        let (init_u, init_v) = match &flow {
            None => (vec![0.0; h * w], vec![0.0; h * w]),
            Some(coarse) => {
                // Upscale the coarser estimate: nearest neighbour, doubled.
                let (ch, cw) = (h / 2, w / 2);
                let mut iu = vec![0.0; h * w];
                let mut iv = vec![0.0; h * w];
                for y in 0..*h {
                    for x in 0..*w {
                        let cy = (y / 2).min(ch.saturating_sub(1));
                        let cx = (x / 2).min(cw.saturating_sub(1));
                        iu[y * w + x] = 2.0 * coarse.u[cy * cw + cx];
                        iv[y * w + x] = 2.0 * coarse.v[cy * cw + cx];
                    }
                }
                (iu, iv)
            }
        };
        flow = Some(lk_level(p, l, *h, *w, params, &init_u, &init_v));
    }

    let level = flow.expect("at least one pyramid level");
    let lambda_max = level.lambda_min.iter().cloned().fold(0.0f64, f64::max);
    let confidence = level
        .lambda_min
        .iter()
        .map(|&l| if lambda_max > 0.0 { (l / lambda_max).clamp(0.0, 1.0) as f32 } else { 0.0 })
        .collect();
    Ok(FlowField {
        height: prev.height,
        width: prev.width,
        u: level.u.iter().map(|&x| x as f32).collect(),
        v: level.v.iter().map(|&x| x as f32).collect(),
        confidence,
    })
}

/// Backward semi-Lagrangian transport of the last frame along the flow,
/// `horizon_steps` frame intervals ahead. Intensity is unchanged by
/// construction: optical flow assumes the amount of rain stays constant.
pub fn flow_extrapolate(
    last_frame: &RadarFrame,
    flow: &FlowField,
    horizon_steps: usize,
) -> Result<RadarFrame> {
    if flow.height != last_frame.height || flow.width != last_frame.width {
        return Err(Error::ShapeMismatch(format!(
            "flow {}x{} vs frame {}x{}",
            flow.height, flow.width, last_frame.height, last_frame.width
        )));
    }
    let field = VelocityField {
        height: flow.height,
        width: flow.width,
        u: flow.u.clone(),
        v: flow.v.clone(),
    };
    let mut out = advect(last_frame, &field, horizon_steps)?;
    out.timestamp = last_frame.timestamp + horizon_steps as i64 * FRAME_SPACING_SECONDS;
    Ok(out)
}

/// Full optical-flow baseline: estimate, extrapolate, quantize.
pub fn optical_flow_predict(
    frames: &[RadarFrame],
    scheme: &QuantizationScheme,
    params: &FlowParams,
    horizon_steps: usize,
) -> Result<BaselinePrediction> {
    let flow = estimate_flow(frames, params)?;
    let last = &frames[frames.len() - 1];
    let future = flow_extrapolate(last, &flow, horizon_steps)?;
    let mut prediction = persistence_predict(&future, scheme)?;
    prediction.source = BaselineKind::OpticalFlow;
    Ok(prediction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sequence, SynthConfig, VelocityModel, DEFAULT_GEOREF};

    fn textured_scene(seed: u64, u: f64, v: f64) -> Vec<RadarFrame> {
        let cfg = SynthConfig {
            size: 64,
            frame_count: 4,
            cell_count: 6,
            velocity: VelocityModel::Uniform { u, v },
            sigma_range: (3.0, 6.0),
            noise_amplitude: 0.0,
            seed,
            ..SynthConfig::default()
        };
        generate_sequence(&cfg).unwrap()
    }

    #[test]
    fn persistence_maps_match_thresholds() {
        let scheme = QuantizationScheme::default();
        let mut rates = vec![0.0f32; 16];
        rates[5] = 1.0;
        let frame = RadarFrame::new(4, 4, 0, DEFAULT_GEOREF, rates).unwrap();
        let pred = persistence_predict(&frame, &scheme).unwrap();
        assert_eq!(pred.maps.len(), 3);
        assert_eq!((pred.maps[0][5], pred.maps[1][5], pred.maps[2][5]), (1.0, 1.0, 0.0));
        assert!(pred.maps.iter().all(|m| m.iter().filter(|&&v| v != 0.0).count() == if m[5] == 1.0 { 1 } else { 0 }));

        let zeros = RadarFrame::new(4, 4, 0, DEFAULT_GEOREF, vec![0.0; 16]).unwrap();
        let pred = persistence_predict(&zeros, &scheme).unwrap();
        assert!(pred.maps.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn prediction_maps_are_nested() {
        let scheme = QuantizationScheme::default();
        let frames = textured_scene(3, 1.0, -0.5);
        let pred = persistence_predict(&frames[3], &scheme).unwrap();
        for pix in 0..pred.maps[0].len() {
            assert!(pred.maps[0][pix] >= pred.maps[1][pix]);
            assert!(pred.maps[1][pix] >= pred.maps[2][pix]);
        }
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let frames = textured_scene(1, 0.0, 0.0);
        let flow = estimate_flow(&frames[..2], &FlowParams::default()).unwrap();
        let max_mag = flow
            .u
            .iter()
            .zip(&flow.v)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0f32, f32::max);
        assert!(max_mag < 1e-6, "max displacement {max_mag}");
    }

    #[test]
    fn all_zero_frames_give_zero_flow_and_confidence() {
        let zeros = RadarFrame::new(32, 32, 0, DEFAULT_GEOREF, vec![0.0; 1024]).unwrap();
        let mut later = zeros.clone();
        later.timestamp = 600;
        let flow = estimate_flow(&[zeros, later], &FlowParams::default()).unwrap();
        assert!(flow.u.iter().all(|&v| v == 0.0));
        assert!(flow.v.iter().all(|&v| v == 0.0));
        assert!(flow.confidence.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn estimate_flow_needs_two_frames() {
        let frames = textured_scene(1, 0.0, 0.0);
        assert!(estimate_flow(&frames[..1], &FlowParams::default()).is_err());
        assert!(estimate_flow(&frames[..2], &FlowParams::default()).is_ok());
    }

    fn median(values: &mut [f32]) -> f32 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values[values.len() / 2]
    }

    #[test]
    fn integer_shift_recovered() {
        let frames = textured_scene(7, 3.0, 0.0);
        let flow = estimate_flow(&frames[..2], &FlowParams::default()).unwrap();
        let mut u = flow.u.clone();
        let mut v = flow.v.clone();
        let med_u = median(&mut u);
        let med_v = median(&mut v);
        assert!((med_u - 3.0).abs() <= 0.5, "median u = {med_u}");
        assert!(med_v.abs() <= 0.5, "median v = {med_v}");
    }

    #[test]
    fn zero_flow_extrapolation_is_persistence_bit_exact() {
        let scheme = QuantizationScheme::default();
        let frames = textured_scene(5, 2.0, 1.0);
        let last = &frames[3];
        let flow = FlowField {
            height: last.height,
            width: last.width,
            u: vec![0.0; last.rates.len()],
            v: vec![0.0; last.rates.len()],
            confidence: vec![1.0; last.rates.len()],
        };
        let future = flow_extrapolate(last, &flow, 6).unwrap();
        for (a, b) in future.rates.iter().zip(&last.rates) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let of = persistence_predict(&future, &scheme).unwrap();
        let ps = persistence_predict(last, &scheme).unwrap();
        assert_eq!(of.maps, ps.maps);
    }

    #[test]
    fn extrapolation_mass_bounded_by_outflow() {
        let frames = textured_scene(9, 1.5, 0.5);
        let flow = estimate_flow(&frames[..2], &FlowParams::default()).unwrap();
        let last = &frames[1];
        let before: f64 = last.rates.iter().map(|&r| r as f64).sum();
        let future = flow_extrapolate(last, &flow, 6).unwrap();
        let after: f64 = future.rates.iter().map(|&r| r as f64).sum();
        assert!(after <= before * 1.001, "mass grew: {before} -> {after}");
    }
}
