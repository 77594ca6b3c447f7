//! On-disk prediction file: an NWC1-style little-endian header (plus
//! embedded provenance and the quantization thresholds) followed by one f32
//! probability plane per rain threshold.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::GeoRef;

pub const PREDICTION_MAGIC: [u8; 4] = *b"NWP1";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct PredictionFile {
    pub provenance_text: String,
    pub thresholds: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Time the prediction is valid for (seconds since epoch, UTC).
    pub valid_timestamp: i64,
    pub georef: GeoRef,
    pub planes: Vec<Vec<f32>>,
}

pub fn write_prediction<W: Write>(pred: &PredictionFile, sink: &mut W) -> Result<()> {
    if pred.planes.len() != pred.thresholds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} planes for {} thresholds",
            pred.planes.len(),
            pred.thresholds.len()
        )));
    }
    for plane in &pred.planes {
        if plane.len() != pred.height * pred.width {
            return Err(Error::ShapeMismatch("plane does not match grid".into()));
        }
        if let Some(bad) = plane.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("probability {bad} outside [0, 1]")));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&PREDICTION_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let prov = pred.provenance_text.as_bytes();
    buf.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    buf.extend_from_slice(prov);
    buf.push(pred.thresholds.len() as u8);
    for t in &pred.thresholds {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf.extend_from_slice(&(pred.height as u32).to_le_bytes());
    buf.extend_from_slice(&(pred.width as u32).to_le_bytes());
    buf.extend_from_slice(&pred.valid_timestamp.to_le_bytes());
    for v in [pred.georef.lat0, pred.georef.lon0, pred.georef.dlat, pred.georef.dlon] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for plane in &pred.planes {
        for p in plane {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    sink.write_all(&buf).map_err(|e| Error::Format {
        offset: 0,
        reason: format!("write failed: {e}"),
    })
}

pub fn read_prediction<R: Read>(source: &mut R) -> Result<PredictionFile> {
    let mut data = Vec::new();
    source.read_to_end(&mut data).map_err(|e| Error::Format {
        offset: 0,
        reason: format!("read failed: {e}"),
    })?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::Format {
                offset: *pos as u64,
                reason: format!("truncated while decoding {what}"),
            });
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4, "magic")? != PREDICTION_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad prediction magic".into(),
        });
    }
    let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported prediction version {version}"),
        });
    }
    let prov_len = u32::from_le_bytes(take(&mut pos, 4, "provenance length")?.try_into().unwrap()) as usize;
    let provenance_text = String::from_utf8(take(&mut pos, prov_len, "provenance")?.to_vec())
        .map_err(|_| Error::Format {
            offset: pos as u64,
            reason: "provenance is not utf-8".into(),
        })?;
    let n_thresholds = take(&mut pos, 1, "threshold count")?[0] as usize;
    let mut thresholds = Vec::with_capacity(n_thresholds);
    for _ in 0..n_thresholds {
        thresholds.push(f32::from_le_bytes(take(&mut pos, 4, "threshold")?.try_into().unwrap()));
    }
    let height = u32::from_le_bytes(take(&mut pos, 4, "height")?.try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(take(&mut pos, 4, "width")?.try_into().unwrap()) as usize;
    let valid_timestamp = i64::from_le_bytes(take(&mut pos, 8, "timestamp")?.try_into().unwrap());
    let mut geo = [0.0f64; 4];
    for g in geo.iter_mut() {
        *g = f64::from_le_bytes(take(&mut pos, 8, "georef")?.try_into().unwrap());
    }
    let mut planes = Vec::with_capacity(n_thresholds);
    for _ in 0..n_thresholds {
        let mut plane = Vec::with_capacity(height * width);
        for _ in 0..height * width {
            let at = pos;
            let v = f32::from_le_bytes(take(&mut pos, 4, "probability")?.try_into().unwrap());
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format {
                    offset: at as u64,
                    reason: format!("probability {v} outside [0, 1]"),
                });
            }
            plane.push(v);
        }
        planes.push(plane);
    }
    if pos != data.len() {
        return Err(Error::Format {
            offset: pos as u64,
            reason: format!("{} trailing bytes", data.len() - pos),
        });
    }
    Ok(PredictionFile {
        provenance_text,
        thresholds,
        height,
        width,
        valid_timestamp,
        georef: GeoRef {
            lat0: geo[0],
            lon0: geo[1],
            dlat: geo[2],
            dlon: geo[3],
        },
        planes,
    })
}

pub fn save_prediction(path: &Path, pred: &PredictionFile) -> Result<()> {
    let mut buf = Vec::new();
    write_prediction(pred, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_prediction(path: &Path) -> Result<PredictionFile> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_prediction(&mut data.as_slice())
}
