//! Georeferenced precipitation grids, rate quantization, exceedance masks,
//! and the NWC1 on-disk frame format.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Grid georeference. `lat0`/`lon0` locate the northwest corner; rows run
/// south (`dlat < 0`), columns run east (`dlon > 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoRef {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
}

impl GeoRef {
    pub fn validate(&self) -> Result<()> {
        if !(self.dlon > 0.0) || !(self.dlat < 0.0) {
            return Err(Error::InvalidFrame(format!(
                "georef steps must satisfy dlon > 0 and dlat < 0, got dlon={} dlat={}",
                self.dlon, self.dlat
            )));
        }
        if self.lat0.abs() > 90.0 || self.lon0.abs() > 180.0 {
            return Err(Error::InvalidFrame(format!(
                "georef origin out of range: lat0={} lon0={}",
                self.lat0, self.lon0
            )));
        }
        if !(self.lat0.is_finite() && self.lon0.is_finite() && self.dlat.is_finite() && self.dlon.is_finite()) {
            return Err(Error::InvalidFrame("non-finite georef".into()));
        }
        Ok(())
    }

    /// Latitude of pixel row `row` (degrees).
    pub fn lat_at(&self, row: usize) -> f64 {
        self.lat0 + self.dlat * row as f64
    }

    /// Longitude of pixel column `col` (degrees).
    pub fn lon_at(&self, col: usize) -> f64 {
        self.lon0 + self.dlon * col as f64
    }
}

/// A single instantaneous precipitation-rate image (mm/h), row-major,
/// north-to-south rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrame {
    pub height: usize,
    pub width: usize,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub georef: GeoRef,
    pub rates: Vec<f32>,
}

impl RadarFrame {
    pub fn new(
        height: usize,
        width: usize,
        timestamp: i64,
        georef: GeoRef,
        rates: Vec<f32>,
    ) -> Result<Self> {
        let frame = RadarFrame {
            height,
            width,
            timestamp,
            georef,
            rates,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        self.georef.validate()?;
        if self.rates.len() != self.height * self.width {
            return Err(Error::InvalidFrame(format!(
                "rate buffer has {} values for a {}x{} grid",
                self.rates.len(),
                self.height,
                self.width
            )));
        }
        for (i, &r) in self.rates.iter().enumerate() {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::InvalidFrame(format!(
                    "rate at pixel {} is {} (must be finite and >= 0)",
                    i, r
                )));
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, row: usize, col: usize) -> f32 {
        self.rates[row * self.width + col]
    }
}

/// Ascending rain-rate cut points (mm/h) splitting rates into
/// `thresholds.len() + 1` half-open classes `[0, t0), [t0, t1), ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationScheme {
    thresholds: Vec<f32>,
}

impl Default for QuantizationScheme {
    fn default() -> Self {
        QuantizationScheme {
            thresholds: vec![0.1, 1.0, 2.5],
        }
    }
}

impl QuantizationScheme {
    pub fn new(thresholds: Vec<f32>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Config("quantization needs at least one threshold".into()));
        }
        for w in thresholds.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Config(format!(
                    "thresholds must be strictly ascending, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if thresholds[0] <= 0.0 || !thresholds.iter().all(|t| t.is_finite()) {
            return Err(Error::Config("thresholds must be finite and > 0".into()));
        }
        Ok(QuantizationScheme { thresholds })
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn class_count(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Class of a single rate: the number of thresholds `<=` the rate.
    /// Intervals are half-open, so a rate exactly at a threshold belongs to
    /// the upper class.
    pub fn class_of(&self, rate: f32) -> u8 {
        self.thresholds.iter().filter(|&&t| rate >= t).count() as u8
    }
}

/// Per-pixel class indices produced by quantizing a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl ClassGrid {
    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    /// True iff any pixel reached the first threshold (class >= 1).
    pub fn has_rain(&self) -> bool {
        self.classes.iter().any(|&c| c >= 1)
    }
}

/// Per-pixel 0/1 exceedance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

/// Quantize every pixel of `frame` under `scheme`.
pub fn quantize(frame: &RadarFrame, scheme: &QuantizationScheme) -> Result<ClassGrid> {
    frame.validate()?;
    Ok(ClassGrid {
        height: frame.height,
        width: frame.width,
        classes: frame.rates.iter().map(|&r| scheme.class_of(r)).collect(),
    })
}

/// Mask of pixels whose class exceeds `threshold_index`, i.e. whose rate is
/// at least the threshold with that index.
pub fn exceedance_mask(grid: &ClassGrid, threshold_index: usize, scheme: &QuantizationScheme) -> Result<BitMask> {
    if threshold_index >= scheme.thresholds.len() {
        return Err(Error::Config(format!(
            "threshold index {} out of range for {} thresholds",
            threshold_index,
            scheme.thresholds.len()
        )));
    }
    Ok(BitMask {
        height: grid.height,
        width: grid.width,
        bits: grid
            .classes
            .iter()
            .map(|&c| u8::from(c as usize > threshold_index))
            .collect(),
    })
}

// ── NWC1 frame format ────────────────────────────────────────────────────
//
// Little-endian, no padding:
//   magic "NWC1" | u32 height | u32 width | i64 timestamp |
//   f64 lat0 | f64 lon0 | f64 dlat | f64 dlon |
//   height*width f32 rates, row-major, north-to-south rows.

pub const FRAME_MAGIC: [u8; 4] = *b"NWC1";
const HEADER_LEN: u64 = 4 + 4 + 4 + 8 + 8 * 4;

pub fn write_frame<W: Write>(frame: &RadarFrame, sink: &mut W) -> Result<()> {
    frame.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + frame.rates.len() * 4);
    buf.extend_from_slice(&FRAME_MAGIC);
    buf.extend_from_slice(&(frame.height as u32).to_le_bytes());
    buf.extend_from_slice(&(frame.width as u32).to_le_bytes());
    buf.extend_from_slice(&frame.timestamp.to_le_bytes());
    buf.extend_from_slice(&frame.georef.lat0.to_le_bytes());
    buf.extend_from_slice(&frame.georef.lon0.to_le_bytes());
    buf.extend_from_slice(&frame.georef.dlat.to_le_bytes());
    buf.extend_from_slice(&frame.georef.dlon.to_le_bytes());
    for r in &frame.rates {
        buf.extend_from_slice(&r.to_le_bytes());
    }
    sink.write_all(&buf)
        .map_err(|e| Error::Format {
            offset: 0,
            reason: format!("write failed: {e}"),
        })
}

struct Cursor<'a, R: Read> {
    source: &'a mut R,
    offset: u64,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            let n = self.source.read(&mut buf[filled..]).map_err(|e| Error::Format {
                offset: self.offset + filled as u64,
                reason: format!("read failed while decoding {what}: {e}"),
            })?;
            if n == 0 {
                return Err(Error::Format {
                    offset: self.offset + filled as u64,
                    reason: format!("truncated while decoding {what}"),
                });
            }
            filled += n;
        }
        self.offset += N as u64;
        Ok(buf)
    }
}

pub fn read_frame<R: Read>(source: &mut R) -> Result<RadarFrame> {
    let mut cur = Cursor { source, offset: 0 };
    let magic: [u8; 4] = cur.take("magic")?;
    if magic != FRAME_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {:02X?}, expected {:02X?}", magic, FRAME_MAGIC),
        });
    }
    let height = u32::from_le_bytes(cur.take("height")?) as usize;
    let width = u32::from_le_bytes(cur.take("width")?) as usize;
    let timestamp = i64::from_le_bytes(cur.take("timestamp")?);
    let lat0 = f64::from_le_bytes(cur.take("lat0")?);
    let lon0 = f64::from_le_bytes(cur.take("lon0")?);
    let dlat = f64::from_le_bytes(cur.take("dlat")?);
    let dlon = f64::from_le_bytes(cur.take("dlon")?);

    let pixels = height
        .checked_mul(width)
        .ok_or_else(|| Error::Format {
            offset: 4,
            reason: format!("grid {height}x{width} overflows"),
        })?;
    let mut rates = Vec::with_capacity(pixels);
    for _ in 0..pixels {
        let at = cur.offset;
        let v = f32::from_le_bytes(cur.take("rate")?);
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Format {
                offset: at,
                reason: format!("rate {v} is not a finite non-negative value"),
            });
        }
        rates.push(v);
    }

    RadarFrame::new(height, width, timestamp, GeoRef { lat0, lon0, dlat, dlon }, rates)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_georef() -> GeoRef {
        GeoRef {
            lat0: 45.0,
            lon0: -100.0,
            dlat: -0.01,
            dlon: 0.01,
        }
    }

    fn frame_of(rates: Vec<f32>, h: usize, w: usize) -> RadarFrame {
        RadarFrame::new(h, w, 1_600_000_000, test_georef(), rates).unwrap()
    }

    /// Independent interval lookup over the default scheme: an explicit
    /// branch chain on the four published ranges.
    fn default_class_oracle(rate: f32) -> u8 {
        if rate < 0.1 {
            0
        } else if rate < 1.0 {
            1
        } else if rate < 2.5 {
            2
        } else {
            3
        }
    }

    #[test]
    fn quantize_interval_boundaries() {
        let scheme = QuantizationScheme::default();
        assert_eq!(scheme.class_of(0.05), 0);
        assert_eq!(scheme.class_of(0.1), 1);
        assert_eq!(scheme.class_of(2.5), 3);
        assert_eq!(scheme.class_of(0.0), 0);
    }

    #[test]
    fn quantize_uniform_field() {
        let scheme = QuantizationScheme::default();
        let frame = frame_of(vec![1.7; 12], 3, 4);
        let grid = quantize(&frame, &scheme).unwrap();
        assert!(grid.classes.iter().all(|&c| c == 2));
    }

    #[test]
    fn quantize_rejects_bad_rates() {
        let georef = test_georef();
        let frame = RadarFrame {
            height: 1,
            width: 2,
            timestamp: 0,
            georef,
            rates: vec![0.0, f32::NAN],
        };
        assert!(matches!(
            quantize(&frame, &QuantizationScheme::default()),
            Err(Error::InvalidFrame(_))
        ));
        let frame = RadarFrame {
            rates: vec![0.0, -0.5],
            ..frame
        };
        assert!(quantize(&frame, &QuantizationScheme::default()).is_err());
    }

    #[test]
    fn quantize_boundary_ownership() {
        let scheme = QuantizationScheme::default();
        for (i, &t) in scheme.thresholds().iter().enumerate() {
            assert_eq!(scheme.class_of(t) as usize, i + 1, "threshold {t} owns the upper class");
            let below = f32::from_bits(t.to_bits() - 1);
            assert_eq!(scheme.class_of(below) as usize, i, "value just below {t}");
        }
    }

    #[test]
    fn quantize_matches_branch_oracle() {
        let scheme = QuantizationScheme::default();
        let mut rate = 0.0f32;
        // Sweep a dense ladder across all four ranges.
        while rate < 5.0 {
            assert_eq!(scheme.class_of(rate), default_class_oracle(rate), "rate {rate}");
            rate += 0.013;
        }
    }

    #[test]
    fn exceedance_masks_per_index() {
        let scheme = QuantizationScheme::default();
        let grid = ClassGrid {
            height: 1,
            width: 4,
            classes: vec![0, 1, 2, 3],
        };
        let m0 = exceedance_mask(&grid, 0, &scheme).unwrap();
        assert_eq!(m0.bits, vec![0, 1, 1, 1]);
        let m2 = exceedance_mask(&grid, 2, &scheme).unwrap();
        assert_eq!(m2.bits, vec![0, 0, 0, 1]);
        assert!(exceedance_mask(&grid, 3, &scheme).is_err());
    }

    #[test]
    fn exceedance_matches_per_pixel_comparison() {
        use rand::{Rng, SeedableRng};
        let scheme = QuantizationScheme::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rates: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..4.0)).collect();
        let frame = frame_of(rates.clone(), 8, 8);
        let grid = quantize(&frame, &scheme).unwrap();
        for idx in 0..3 {
            let mask = exceedance_mask(&grid, idx, &scheme).unwrap();
            for (p, (&rate, &bit)) in rates.iter().zip(&mask.bits).enumerate() {
                let expect = u8::from(rate >= scheme.thresholds()[idx]);
                assert_eq!(bit, expect, "pixel {p} rate {rate} index {idx}");
            }
        }
    }

    #[test]
    fn masks_are_nested() {
        let scheme = QuantizationScheme::default();
        let grid = ClassGrid {
            height: 2,
            width: 4,
            classes: vec![0, 1, 2, 3, 3, 2, 1, 0],
        };
        let m: Vec<BitMask> = (0..3)
            .map(|i| exceedance_mask(&grid, i, &scheme).unwrap())
            .collect();
        for j in 1..3 {
            for p in 0..8 {
                assert!(m[j].bits[p] <= m[j - 1].bits[p]);
            }
        }
    }

    #[test]
    fn frame_roundtrip_bit_exact() {
        let frame = frame_of(vec![0.0, 0.1, 1.0, 2.5], 2, 2);
        let mut buf = Vec::new();
        write_frame(&frame, &mut buf).unwrap();
        let back = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(frame, back);
        for (a, b) in frame.rates.iter().zip(&back.rates) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_stream_is_truncation() {
        let err = read_frame(&mut [].as_slice()).unwrap_err();
        match err {
            Error::Format { offset, reason } => {
                assert_eq!(offset, 0);
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let frame = frame_of(vec![0.5, 0.5, 0.5, 0.5], 2, 2);
        let mut buf = Vec::new();
        write_frame(&frame, &mut buf).unwrap();
        // Keep the header and only 3 of the 4 rate values.
        let cut = (HEADER_LEN + 3 * 4) as usize;
        buf.truncate(cut);
        let err = read_frame(&mut buf.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, reason } => {
                assert_eq!(offset, HEADER_LEN + 3 * 4);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let frame = frame_of(vec![0.0], 1, 1);
        let mut buf = Vec::new();
        write_frame(&frame, &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_frame(&mut buf.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantize_is_monotone(a in 0f32..50.0, b in 0f32..50.0) {
                let scheme = QuantizationScheme::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(scheme.class_of(lo) <= scheme.class_of(hi));
            }

            #[test]
            fn roundtrip_any_finite_rates(rates in proptest::collection::vec(0f32..1e6, 1..64)) {
                let w = rates.len();
                let frame = RadarFrame::new(1, w, 42, test_georef(), rates).unwrap();
                let mut buf = Vec::new();
                write_frame(&frame, &mut buf).unwrap();
                let back = read_frame(&mut buf.as_slice()).unwrap();
                prop_assert_eq!(frame, back);
            }
        }
    }
}
