//! Binary checkpoint container: the embedded model config (hash-guarded),
//! provenance text, named parameter/buffer records, and optionally the
//! optimizer state needed for bit-exact resume.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Provenance;
use crate::error::{Error, Result};
use crate::optim::{Adadelta, AdadeltaState};
use crate::tensor::{decode_records, encode_record, Dtype, RecordOwned, Scalar};
use crate::unet::{hex_string, UNetConfig, UNetModel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NWCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub dtype: Dtype,
    pub config: UNetConfig,
    pub config_hash: String,
    pub has_train_state: bool,
    pub provenance_text: String,
}

fn push_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn encode<T: Scalar>(
    model: &UNetModel<T>,
    optimizer: Option<&Adadelta<T>>,
    provenance: &Provenance,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.push(u8::from(optimizer.is_some()));

    let config_text = model.config().canonical_text();
    push_block(&mut out, config_text.as_bytes());
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    out.extend_from_slice(&hasher.finalize());

    push_block(&mut out, provenance.header_lines("").as_bytes());

    let mut records = Vec::new();
    let mut count: u32 = 0;
    model.visit_params(&mut |p| {
        encode_record(&mut records, &p.name, p.shape(), p.values());
        count += 1;
    });
    model.visit_buffers(&mut |name, values| {
        encode_record(&mut records, name, &[values.len()], values);
        count += 1;
    });
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&records);

    if let Some(opt) = optimizer {
        out.extend_from_slice(&opt.step_count().to_le_bytes());
        out.extend_from_slice(&opt.rho().to_le_bytes());
        out.extend_from_slice(&opt.epsilon().to_le_bytes());
        let mut acc = Vec::new();
        let mut acc_count: u32 = 0;
        for (name, state) in opt.sorted_state() {
            encode_record(&mut acc, &format!("{name}.grad_sq"), &[state.grad_sq.len()], &state.grad_sq);
            encode_record(
                &mut acc,
                &format!("{name}.update_sq"),
                &[state.update_sq.len()],
                &state.update_sq,
            );
            acc_count += 2;
        }
        out.extend_from_slice(&acc_count.to_le_bytes());
        out.extend_from_slice(&acc);
    }
    out
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &UNetModel<T>,
    optimizer: Option<&Adadelta<T>>,
    provenance: &Provenance,
) -> Result<()> {
    std::fs::write(path, encode(model, optimizer, provenance)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while decoding {what}"),
            });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn block(&mut self, what: &str) -> Result<&'a [u8]> {
        let len = self.u32(what)? as usize;
        self.take(len, what)
    }
}

struct Decoded {
    meta: CheckpointMeta,
    records: Vec<RecordOwned>,
    train: Option<(u64, f64, f64, Vec<RecordOwned>)>,
}

fn decode(data: &[u8]) -> Result<Decoded> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad checkpoint magic {magic:02X?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let dtype = Dtype::from_tag(r.take(1, "dtype")?[0], r.pos as u64 - 1)?;
    let has_train_state = r.take(1, "flags")?[0] != 0;

    let config_bytes = r.block("model config")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::Format {
            offset: r.pos as u64,
            reason: "model config is not utf-8".into(),
        })?
        .to_string();
    let stored_hash = r.take(32, "config hash")?;
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    let actual = hasher.finalize();
    if stored_hash != actual.as_slice() {
        return Err(Error::Format {
            offset: r.pos as u64 - 32,
            reason: "checkpoint config hash does not match its config text".into(),
        });
    }
    let config = UNetConfig::parse_text(&config_text)?;

    let provenance_text = std::str::from_utf8(r.block("provenance")?)
        .map_err(|_| Error::Format {
            offset: r.pos as u64,
            reason: "provenance is not utf-8".into(),
        })?
        .to_string();

    let record_count = r.u32("record count")? as usize;
    let (records, used) = decode_records(&r.data[r.pos..], r.pos as u64, record_count)?;
    r.pos += used;

    let train = if has_train_state {
        let step = r.u64("train step")?;
        let rho = r.f64("rho")?;
        let eps = r.f64("epsilon")?;
        let acc_count = r.u32("accumulator count")? as usize;
        let (acc, used) = decode_records(&r.data[r.pos..], r.pos as u64, acc_count)?;
        r.pos += used;
        Some((step, rho, eps, acc))
    } else {
        None
    };

    if r.pos != data.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            reason: format!("{} trailing bytes", data.len() - r.pos),
        });
    }

    Ok(Decoded {
        meta: CheckpointMeta {
            dtype,
            config_hash: hex_string(&actual),
            config,
            has_train_state,
            provenance_text,
        },
        records,
        train,
    })
}

/// Header only: enough to pick the right precision and verify config hashes
/// before committing to a full load.
pub fn peek(path: &Path) -> Result<CheckpointMeta> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&data)?.meta)
}

/// Load a full model (and optimizer state when present). The stored dtype
/// must match `T`; a checkpoint written at one precision cannot silently
/// resume at another.
pub fn load<T: Scalar>(path: &Path) -> Result<(UNetModel<T>, Option<Adadelta<T>>, CheckpointMeta)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = decode(&data)?;
    if decoded.meta.dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint stores {:?} values but {:?} was requested",
            decoded.meta.dtype,
            T::DTYPE
        )));
    }

    let mut model = UNetModel::<T>::init(decoded.meta.config.clone(), 0)?;
    let mut by_name: HashMap<String, RecordOwned> = decoded
        .records
        .into_iter()
        .map(|rec| (rec.name.clone(), rec))
        .collect();

    let mut missing = None;
    let mut mismatch = None;
    model.visit_params_mut(&mut |p| {
        match by_name.remove(&p.name) {
            Some(rec) => {
                if rec.shape != p.shape() {
                    mismatch = Some(format!(
                        "parameter '{}': checkpoint shape {:?} vs model {:?}",
                        p.name,
                        rec.shape,
                        p.shape()
                    ));
                } else if let Err(e) = p.load_values(rec.values_as::<T>()) {
                    mismatch = Some(e.to_string());
                }
            }
            None => missing = Some(p.name.clone()),
        }
    });
    if let Some(m) = mismatch {
        return Err(Error::Format { offset: 0, reason: m });
    }
    if let Some(name) = missing {
        return Err(Error::Format {
            offset: 0,
            reason: format!("checkpoint lacks parameter '{name}'"),
        });
    }
    let buffer_names: Vec<String> = by_name.keys().cloned().collect();
    for name in buffer_names {
        let rec = by_name.remove(&name).expect("key just listed");
        model.load_buffer(&name, rec.values_as::<T>())?;
    }

    let optimizer = match decoded.train {
        None => None,
        Some((step, rho, eps, acc_records)) => {
            let mut halves: HashMap<String, (Option<Vec<T>>, Option<Vec<T>>)> = HashMap::new();
            for rec in acc_records {
                if let Some(param) = rec.name.strip_suffix(".grad_sq") {
                    halves.entry(param.to_string()).or_default().0 = Some(rec.values_as::<T>());
                } else if let Some(param) = rec.name.strip_suffix(".update_sq") {
                    halves.entry(param.to_string()).or_default().1 = Some(rec.values_as::<T>());
                } else {
                    return Err(Error::Format {
                        offset: 0,
                        reason: format!("unrecognized accumulator record '{}'", rec.name),
                    });
                }
            }
            let mut state = HashMap::new();
            for (name, (g, u)) in halves {
                match (g, u) {
                    (Some(grad_sq), Some(update_sq)) => {
                        state.insert(name, AdadeltaState { grad_sq, update_sq });
                    }
                    _ => {
                        return Err(Error::Format {
                            offset: 0,
                            reason: format!("incomplete accumulator pair for '{name}'"),
                        })
                    }
                }
            }
            Some(Adadelta::restore(rho, eps, step, state)?)
        }
    };

    Ok((model, optimizer, decoded.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;
    use tempfile::tempdir;

    fn provenance() -> Provenance {
        Provenance::new(3, "cafebabe")
    }

    fn tiny_model(seed: u64) -> UNetModel<f32> {
        UNetModel::init(UNetConfig::new(2, 4, 3, 4), seed).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.nwck");
        let model = tiny_model(11);
        save(&path, &model, None, &provenance()).unwrap();
        let (loaded, opt, meta) = load::<f32>(&path).unwrap();
        assert!(opt.is_none());
        assert!(!meta.has_train_state);
        assert_eq!(meta.config, *model.config());

        // Bit-exact values and byte-identical re-encode.
        let mut original = Vec::new();
        model.visit_params(&mut |p| original.extend(p.values().iter().map(|v| v.to_bits())));
        let mut reloaded = Vec::new();
        loaded.visit_params(&mut |p| reloaded.extend(p.values().iter().map(|v| v.to_bits())));
        assert_eq!(original, reloaded);
        assert_eq!(
            encode(&model, None, &provenance()),
            encode(&loaded, None, &provenance())
        );
    }

    #[test]
    fn train_state_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.nwck");
        let mut model = tiny_model(4);
        let mut opt = Adadelta::<f32>::with_defaults();
        // Take a couple of real steps so accumulators are non-trivial.
        let mut tape = crate::tensor::Tape::new();
        let input = crate::tensor::Tensor::new(vec![1, 3, 8, 8], vec![0.4; 192]).unwrap();
        let logits = model
            .forward(&mut tape, &input, crate::tensor::BnMode::Train, 0.9)
            .unwrap();
        let labels = vec![1u8; 64];
        let loss = crate::tensor::softmax_cross_entropy_per_pixel(&mut tape, &logits, &labels).unwrap();
        let grads = tape.backward(&loss).unwrap();
        model.accumulate_grads(&grads);
        drop(tape);
        opt.step_model(&mut model).unwrap();

        save(&path, &model, Some(&opt), &provenance()).unwrap();
        let (loaded_model, loaded_opt, meta) = load::<f32>(&path).unwrap();
        let loaded_opt = loaded_opt.expect("train state present");
        assert!(meta.has_train_state);
        assert_eq!(loaded_opt.step_count(), 1);
        assert_eq!(loaded_opt.rho(), opt.rho());
        assert_eq!(
            encode(&model, Some(&opt), &provenance()),
            encode(&loaded_model, Some(&loaded_opt), &provenance())
        );
    }

    #[test]
    fn dtype_mismatch_refused() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.nwck");
        save(&path, &tiny_model(1), None, &provenance()).unwrap();
        assert!(load::<f64>(&path).is_err());
        assert!(load::<f32>(&path).is_ok());
    }

    #[test]
    fn tampered_config_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.nwck");
        let model = tiny_model(1);
        let mut bytes = encode(&model, None, &provenance());
        // Flip a byte inside the config text block.
        let flip_at = 4 + 2 + 1 + 1 + 4 + 3;
        bytes[flip_at] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = peek(&path).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn peek_reports_meta_without_model_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.nwck");
        let model = tiny_model(1);
        save(&path, &model, None, &provenance()).unwrap();
        let meta = peek(&path).unwrap();
        assert_eq!(meta.dtype, Dtype::F32);
        assert_eq!(meta.config_hash, model.config().config_hash());
        assert!(meta.provenance_text.contains("seed = 3"));
    }
}
