//! Stage implementations behind the subcommands. Every stage is a pure
//! function of the effective configuration plus its declared inputs, so
//! rerunning with unchanged inputs rewrites byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nowcast_core::baselines::{
    estimate_flow, flow_extrapolate, persistence_predict, FlowParams,
};
use nowcast_core::checkpoint;
use nowcast_core::config::{KvConfig, Provenance};
use nowcast_core::eval::{
    auc_pr, pr_curve, pr_point, render_csv, render_svg, Evaluation, ModelReport, PRCurve,
    PredictionItem, PredictionSet, PrPoint,
};
use nowcast_core::optim::{loss_log_csv, train, Adadelta, TrainConfig};
use nowcast_core::pipeline::{
    crop_frame, enumerate_entries, example_for_entry, oversample, split, DatasetManifest,
    ManifestEntry, SplitRule, TileSpec, CHANNEL_COUNT, CHANNEL_LAYOUT, FRAME_SPACING_SECONDS,
    LABEL_OFFSET_SECONDS,
};
use nowcast_core::predfile::{load_prediction, save_prediction, PredictionFile};
use nowcast_core::raster::{quantize, read_frame, write_frame, QuantizationScheme, RadarFrame};
use nowcast_core::synthgen::{generate_sequence, SynthConfig, VelocityModel, DEFAULT_GEOREF};
use nowcast_core::tensor::{BnMode, Dtype, Scalar, Tape, Tensor};
use nowcast_core::unet::{exceedance_probs, UNetConfig, UNetModel};

pub struct Env {
    pub kv: KvConfig,
    pub provenance: Provenance,
}

impl Env {
    pub fn new(kv: KvConfig) -> Result<Self> {
        let seed = kv.get_u64("seed", 42)?;
        let hash = kv.hash_hex();
        Ok(Env {
            kv,
            provenance: Provenance::new(seed, hash),
        })
    }

    pub fn seed(&self) -> u64 {
        self.provenance.seed
    }

    fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.kv.get_str("out_dir", "runs/demo"))
    }

    fn dir(&self, key: &str, default_leaf: &str) -> PathBuf {
        match self.kv.get(key) {
            Some(path) => PathBuf::from(path),
            None => self.out_dir().join(default_leaf),
        }
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.dir("frames_dir", "frames")
    }

    pub fn manifests_dir(&self) -> PathBuf {
        self.dir("manifests_dir", "manifests")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.dir("checkpoints_dir", "checkpoints")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.dir("predictions_dir", "predictions")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir("reports_dir", "reports")
    }

    pub fn thresholds(&self) -> Result<Vec<f32>> {
        let raw = self.kv.get_str("thresholds", "0.1,1,2.5");
        raw.split(',')
            .map(|s| s.trim().parse::<f32>().map_err(|e| anyhow!("bad threshold '{s}': {e}")))
            .collect()
    }

    pub fn scheme(&self) -> Result<QuantizationScheme> {
        Ok(QuantizationScheme::new(self.thresholds()?)?)
    }

    pub fn tile_size(&self) -> Result<usize> {
        Ok(self.kv.get_usize("tile_size", 64)?)
    }

    pub fn unet_config(&self) -> Result<UNetConfig> {
        let depth = self.kv.get_usize("unet.depth", 4)?;
        let base = self.kv.get_usize("unet.base_filters", 16)?;
        let cap = self.kv.get_usize("unet.filter_cap", 512)?;
        let classes = self.thresholds()?.len() + 1;
        let mut cfg = UNetConfig::new(depth, base, CHANNEL_COUNT, classes);
        cfg.filter_schedule = UNetConfig::doubling_schedule(depth, base, cap);
        cfg.leaky_slope = self.kv.get_f64("unet.leaky_slope", 0.2)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn flow_params(&self) -> Result<FlowParams> {
        let params = FlowParams {
            window: self.kv.get_usize("oflow.window", 17)?,
            iterations: self.kv.get_usize("oflow.iterations", 8)?,
            pyramid_levels: self.kv.get_usize("oflow.pyramid_levels", 1)?,
            min_eig_frac: self.kv.get_f64("oflow.min_eig_frac", 0.02)?,
        };
        params.validate()?;
        Ok(params)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

// ── synth ────────────────────────────────────────────────────────────────

fn sequence_id(index: usize) -> String {
    format!("seq{index:03}")
}

fn sequence_velocity(env: &Env, index: usize) -> Result<VelocityModel> {
    let model = env.kv.get_str("synth.velocity_model", "uniform");
    match model.as_str() {
        "uniform" => {
            let lo = env.kv.get_f64("synth.speed_min", 0.5)?;
            let hi = env.kv.get_f64("synth.speed_max", 2.5)?;
            if !(0.0..=64.0).contains(&lo) || hi < lo {
                bail!("bad speed range [{lo}, {hi}]");
            }
            // Separate stream from the cell sampler so the two stay
            // independent draws of the master seed.
            let mut rng =
                ChaCha8Rng::seed_from_u64(env.seed().wrapping_add(1_000_003).wrapping_add(index as u64));
            let speed = lo + rng.gen::<f64>() * (hi - lo);
            let angle = rng.gen::<f64>() * std::f64::consts::TAU;
            Ok(VelocityModel::Uniform {
                u: speed * angle.cos(),
                v: speed * angle.sin(),
            })
        }
        "rotational" => Ok(VelocityModel::Rotational {
            omega: env.kv.get_f64("synth.omega", 0.05)?,
        }),
        other => bail!("unknown velocity model '{other}' (uniform | rotational)"),
    }
}

pub fn synth_config_for_sequence(env: &Env, index: usize) -> Result<SynthConfig> {
    Ok(SynthConfig {
        size: env.kv.get_usize("synth.grid", 64)?,
        frame_interval_minutes: env.kv.get_u64("synth.interval_min", 10)? as u32,
        frame_count: env.kv.get_usize("synth.frames", 16)?,
        cell_count: env.kv.get_usize("synth.cells", 3)?,
        velocity: sequence_velocity(env, index)?,
        noise_amplitude: env.kv.get_f64("synth.noise", 0.02)?,
        seed: env.seed().wrapping_add(index as u64),
        start_timestamp: env.kv.get_u64("synth.start_timestamp", 1_527_811_200)? as i64,
        amplitude_range: (
            env.kv.get_f64("synth.amp_min", 1.5)?,
            env.kv.get_f64("synth.amp_max", 8.0)?,
        ),
        sigma_range: (
            env.kv.get_f64("synth.sigma_min", 4.0)?,
            env.kv.get_f64("synth.sigma_max", 9.0)?,
        ),
        growth_range: (
            env.kv.get_f64("synth.growth_min", 1.0)?,
            env.kv.get_f64("synth.growth_max", 1.0)?,
        ),
        georef: DEFAULT_GEOREF,
    })
}

pub fn run_synth(env: &Env) -> Result<()> {
    let frames_dir = env.frames_dir();
    ensure_dir(&frames_dir)?;
    let sequences = env.kv.get_usize("synth.sequences", 12)?;
    let mut ids = Vec::with_capacity(sequences);
    for index in 0..sequences {
        let cfg = synth_config_for_sequence(env, index)?;
        let frames = generate_sequence(&cfg)?;
        let id = sequence_id(index);
        let seq_dir = frames_dir.join(&id);
        ensure_dir(&seq_dir)?;
        for (k, frame) in frames.iter().enumerate() {
            let mut buf = Vec::new();
            write_frame(frame, &mut buf)?;
            let path = seq_dir.join(format!("f{k:04}.nwc1"));
            fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        }
        ids.push(id);
    }

    let mut manifest = String::from("# nowcast synth manifest v1\n");
    manifest.push_str(&env.provenance.header_lines(""));
    manifest.push_str(&format!("sequences = {}\n", ids.join(",")));
    fs::write(frames_dir.join("synth_manifest.txt"), manifest)?;
    eprintln!("synth: wrote {sequences} sequences under {}", frames_dir.display());
    Ok(())
}

// ── frame loading ────────────────────────────────────────────────────────

pub fn load_sequences(frames_dir: &Path) -> Result<BTreeMap<String, Vec<RadarFrame>>> {
    let mut sequences = BTreeMap::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(frames_dir)
        .with_context(|| format!("reading {}", frames_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| anyhow!("bad sequence directory name"))?
            .to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "nwc1"))
            .collect();
        files.sort();
        let mut frames = Vec::with_capacity(files.len());
        for file in files {
            let data = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let frame = read_frame(&mut data.as_slice())
                .with_context(|| format!("decoding {}", file.display()))?;
            frames.push(frame);
        }
        frames.sort_by_key(|f| f.timestamp);
        sequences.insert(id, frames);
    }
    if sequences.is_empty() {
        bail!("no sequences found under {}", frames_dir.display());
    }
    Ok(sequences)
}

// ── prepare ──────────────────────────────────────────────────────────────

pub fn run_prepare(env: &Env) -> Result<()> {
    let scheme = env.scheme()?;
    let tile_size = env.tile_size()?;
    let sequences = load_sequences(&env.frames_dir())?;

    let mut entries = Vec::new();
    for (id, frames) in &sequences {
        entries.extend(enumerate_entries(id, frames, tile_size, &scheme)?);
    }
    if entries.is_empty() {
        bail!("no (input window, label) pairs available; need at least 13 frames per sequence");
    }

    let all = DatasetManifest {
        split: "all".into(),
        tile_size,
        thresholds: env.thresholds()?,
        channel_layout: CHANNEL_LAYOUT.into(),
        provenance: env.provenance.clone(),
        entries,
    };

    let test_count = env.kv.get_usize("split.test_count", 3)?;
    let ids: Vec<&String> = sequences.keys().collect();
    if test_count >= ids.len() {
        bail!("split.test_count = {test_count} but only {} sequences exist", ids.len());
    }
    let train_ids: BTreeSet<String> = ids[..ids.len() - test_count]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (train_manifest, test_manifest) = split(&all, &SplitRule::TrainSequences(train_ids))?;

    let dir = env.manifests_dir();
    ensure_dir(&dir)?;
    fs::write(dir.join("train.manifest"), train_manifest.to_text())?;
    fs::write(dir.join("test.manifest"), test_manifest.to_text())?;
    eprintln!(
        "prepare: {} train entries ({} rainy), {} test entries",
        train_manifest.entries.len(),
        train_manifest.entries.iter().filter(|e| e.rainy).count(),
        test_manifest.entries.len()
    );
    Ok(())
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(DatasetManifest::parse(&text)?)
}

// ── train ────────────────────────────────────────────────────────────────

pub fn run_train(env: &Env) -> Result<()> {
    match env.kv.get_str("precision", "f32").as_str() {
        "f32" => run_train_typed::<f32>(env),
        "f64" => run_train_typed::<f64>(env),
        other => bail!("unknown precision '{other}' (f32 | f64)"),
    }
}

fn run_train_typed<T: Scalar>(env: &Env) -> Result<()> {
    let manifest = read_manifest(&env.manifests_dir().join("train.manifest"))?;
    let scheme = manifest.scheme()?;
    if manifest.channel_layout != CHANNEL_LAYOUT {
        bail!(
            "manifest channel layout '{}' does not match this build's '{}'",
            manifest.channel_layout,
            CHANNEL_LAYOUT
        );
    }
    let sequences = load_sequences(&env.frames_dir())?;

    let model_config = env.unet_config()?;
    let steps = env.kv.get_u64("train.steps", 300)?;
    let train_config = TrainConfig {
        batch_size: env.kv.get_usize("train.batch", 2)?,
        step_count: steps,
        seed: env.seed(),
        checkpoint_every: env.kv.get_u64("train.checkpoint_every", 0)?,
        bn_momentum: env.kv.get_f64("train.bn_momentum", 0.9)?,
    };

    let resume = env.kv.get_str("train.resume", "");
    let (mut model, mut optimizer) = if resume.is_empty() {
        let model = UNetModel::<T>::init(model_config.clone(), env.seed())?;
        let optimizer = Adadelta::<T>::new(
            env.kv.get_f64("optim.rho", 0.95)?,
            env.kv.get_f64("optim.eps", 1e-6)?,
        )?;
        (model, optimizer)
    } else {
        let (model, optimizer, meta) = checkpoint::load::<T>(Path::new(&resume))?;
        let optimizer = optimizer
            .ok_or_else(|| anyhow!("checkpoint {resume} carries no optimizer state to resume from"))?;
        if meta.config_hash != model_config.config_hash() {
            bail!(
                "config hash mismatch: checkpoint {} vs configured {}",
                meta.config_hash,
                model_config.config_hash()
            );
        }
        eprintln!("train: resuming from {resume} at step {}", optimizer.step_count());
        (model, optimizer)
    };

    if train_config.step_count < optimizer.step_count() && !resume.is_empty() {
        bail!(
            "train.steps = {} is below the checkpoint's completed {} steps",
            train_config.step_count,
            optimizer.step_count()
        );
    }
    let remaining = TrainConfig {
        step_count: train_config.step_count - optimizer.step_count(),
        ..train_config.clone()
    };

    let mut sampler = oversample(
        &manifest,
        env.kv.get_f64("oversample.target", 0.8)?,
        env.seed(),
    )?;
    // Deterministic resume: the stream is a pure function of the seed, so
    // skipping the consumed draws replays the uninterrupted order.
    for _ in 0..optimizer.step_count() * train_config.batch_size as u64 {
        sampler.next();
    }

    let tile_size = manifest.tile_size;
    let mut stream = sampler.map(|entry| {
        let frames = sequences
            .get(&entry.sequence_id)
            .ok_or_else(|| nowcast_core::Error::Dataset(format!("unknown sequence '{}'", entry.sequence_id)))?;
        example_for_entry(frames, entry, tile_size, &scheme)
    });

    let ckpt_dir = env.checkpoints_dir();
    ensure_dir(&ckpt_dir)?;
    let provenance = env.provenance.clone();
    let log = train(
        &mut model,
        &mut optimizer,
        &mut stream,
        &remaining,
        |step, model, opt| {
            let path = ckpt_dir.join(format!("step_{step:06}.nwck"));
            checkpoint::save(&path, model, Some(opt), &provenance)
        },
    )?;

    checkpoint::save(&ckpt_dir.join("final.nwck"), &model, Some(&optimizer), &env.provenance)?;
    let mut csv = env.provenance.header_lines("# ");
    csv.push_str(&loss_log_csv(&log));
    let resume_suffix = if optimizer.step_count() > log.len() as u64 {
        format!(".from_{:06}", optimizer.step_count() - log.len() as u64)
    } else {
        String::new()
    };
    fs::write(ckpt_dir.join(format!("train_loss{resume_suffix}.csv")), csv)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        eprintln!(
            "train: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
            log.len(),
            first.loss,
            last.loss,
            ckpt_dir.join("final.nwck").display()
        );
    }
    Ok(())
}

// ── predict ──────────────────────────────────────────────────────────────

fn entry_file_name(entry: &ManifestEntry) -> String {
    format!(
        "{}_r{}_c{}_t{}.nwp1",
        entry.sequence_id, entry.tile_row, entry.tile_col, entry.t_last_input
    )
}

fn entry_tile(entry: &ManifestEntry, size: usize) -> TileSpec {
    TileSpec {
        row: entry.tile_row,
        col: entry.tile_col,
        size,
    }
}

fn input_frames<'s>(
    sequences: &'s BTreeMap<String, Vec<RadarFrame>>,
    entry: &ManifestEntry,
) -> Result<Vec<&'s RadarFrame>> {
    let frames = sequences
        .get(&entry.sequence_id)
        .ok_or_else(|| anyhow!("unknown sequence '{}'", entry.sequence_id))?;
    let by_time: HashMap<i64, &RadarFrame> = frames.iter().map(|f| (f.timestamp, f)).collect();
    (0..7i64)
        .rev()
        .map(|k| {
            let t = entry.t_last_input - k * FRAME_SPACING_SECONDS;
            by_time
                .get(&t)
                .copied()
                .ok_or_else(|| anyhow!("sequence '{}' lacks frame at {t}", entry.sequence_id))
        })
        .collect()
}

pub fn run_predict(env: &Env) -> Result<()> {
    let model = env.kv.get_str("predict.model", "unet");
    let manifest = read_manifest(&env.manifests_dir().join("test.manifest"))?;
    let sequences = load_sequences(&env.frames_dir())?;
    let scheme = manifest.scheme()?;
    let out_dir = env.predictions_dir().join(&model);
    ensure_dir(&out_dir)?;
    let horizon = (LABEL_OFFSET_SECONDS / FRAME_SPACING_SECONDS) as usize;

    match model.as_str() {
        "persistence" | "oflow" => {
            let params = env.flow_params()?;
            for entry in &manifest.entries {
                let inputs = input_frames(&sequences, entry)?;
                let last = inputs[inputs.len() - 1];
                let future = if model == "persistence" {
                    let mut f = last.clone();
                    f.timestamp += LABEL_OFFSET_SECONDS;
                    f
                } else {
                    // Flow from the full frames, then crop: borders see the
                    // same context the label sees.
                    let pair = [inputs[inputs.len() - 2].clone(), last.clone()];
                    let flow = estimate_flow(&pair, &params)?;
                    flow_extrapolate(last, &flow, horizon)?
                };
                let tile = entry_tile(entry, manifest.tile_size);
                let cropped = crop_frame(&future, &tile);
                let prediction = persistence_predict(&cropped, &scheme)?;
                save_prediction(
                    &out_dir.join(entry_file_name(entry)),
                    &PredictionFile {
                        provenance_text: env.provenance.header_lines(""),
                        thresholds: manifest.thresholds.clone(),
                        height: tile.size,
                        width: tile.size,
                        valid_timestamp: entry.t_last_input + LABEL_OFFSET_SECONDS,
                        georef: cropped.georef,
                        planes: prediction.maps,
                    },
                )?;
            }
        }
        "unet" => {
            let ckpt_path = match env.kv.get("predict.checkpoint") {
                Some(p) => PathBuf::from(p),
                None => env.checkpoints_dir().join("final.nwck"),
            };
            let meta = checkpoint::peek(&ckpt_path)?;
            let expected = env.unet_config()?;
            if meta.config_hash != expected.config_hash() {
                bail!(
                    "config hash mismatch: checkpoint {} carries {} but the configured model hashes to {}",
                    ckpt_path.display(),
                    meta.config_hash,
                    expected.config_hash()
                );
            }
            match meta.dtype {
                Dtype::F32 => predict_unet::<f32>(env, &ckpt_path, &manifest, &sequences, &scheme, &out_dir)?,
                Dtype::F64 => predict_unet::<f64>(env, &ckpt_path, &manifest, &sequences, &scheme, &out_dir)?,
            }
        }
        other => bail!("unknown model '{other}' (unet | persistence | oflow)"),
    }
    eprintln!(
        "predict: {} files for model '{model}' under {}",
        manifest.entries.len(),
        out_dir.display()
    );
    Ok(())
}

fn predict_unet<T: Scalar>(
    env: &Env,
    ckpt_path: &Path,
    manifest: &DatasetManifest,
    sequences: &BTreeMap<String, Vec<RadarFrame>>,
    scheme: &QuantizationScheme,
    out_dir: &Path,
) -> Result<()> {
    let (mut model, _, _) = checkpoint::load::<T>(ckpt_path)?;
    for entry in &manifest.entries {
        let frames = sequences
            .get(&entry.sequence_id)
            .ok_or_else(|| anyhow!("unknown sequence '{}'", entry.sequence_id))?;
        let example = example_for_entry(frames, entry, manifest.tile_size, scheme)?;
        let size = example.size;
        let values: Vec<T> = example.channels.iter().map(|&v| T::from_f64(v as f64)).collect();
        let input = Tensor::new(vec![1, CHANNEL_COUNT, size, size], values)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &input, BnMode::Infer, 0.9)?;
        let maps = exceedance_probs(&logits)?;
        let planes: Vec<Vec<f32>> = maps
            .into_iter()
            .map(|m| m.into_iter().map(|p| (p.to_f64() as f32).clamp(0.0, 1.0)).collect())
            .collect();

        let tile = entry_tile(entry, manifest.tile_size);
        let last = input_frames(sequences, entry)?[6];
        let cropped = crop_frame(last, &tile);
        save_prediction(
            &out_dir.join(entry_file_name(entry)),
            &PredictionFile {
                provenance_text: env.provenance.header_lines(""),
                thresholds: manifest.thresholds.clone(),
                height: size,
                width: size,
                valid_timestamp: entry.t_last_input + LABEL_OFFSET_SECONDS,
                georef: cropped.georef,
                planes,
            },
        )?;
    }
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────────

fn truth_for_entry(
    sequences: &BTreeMap<String, Vec<RadarFrame>>,
    entry: &ManifestEntry,
    tile_size: usize,
    scheme: &QuantizationScheme,
) -> Result<nowcast_core::raster::ClassGrid> {
    let frames = sequences
        .get(&entry.sequence_id)
        .ok_or_else(|| anyhow!("unknown sequence '{}'", entry.sequence_id))?;
    let label_t = entry.t_last_input + LABEL_OFFSET_SECONDS;
    let frame = frames
        .iter()
        .find(|f| f.timestamp == label_t)
        .ok_or_else(|| anyhow!("sequence '{}' lacks label frame at {label_t}", entry.sequence_id))?;
    let tile = entry_tile(entry, tile_size);
    Ok(quantize(&crop_frame(frame, &tile), scheme)?)
}

pub fn build_prediction_set(env: &Env, model: &str) -> Result<(PredictionSet, DatasetManifest)> {
    let manifest = read_manifest(&env.manifests_dir().join("test.manifest"))?;
    let sequences = load_sequences(&env.frames_dir())?;
    let scheme = manifest.scheme()?;
    let dir = env.predictions_dir().join(model);
    let mut set = PredictionSet::default();
    for entry in &manifest.entries {
        let path = dir.join(entry_file_name(entry));
        let pred = load_prediction(&path)
            .with_context(|| format!("prediction {} (run `predict` first?)", path.display()))?;
        if pred.thresholds != manifest.thresholds {
            bail!(
                "prediction {} was made under different thresholds {:?}",
                path.display(),
                pred.thresholds
            );
        }
        let truth = truth_for_entry(&sequences, entry, manifest.tile_size, &scheme)?;
        set.items.push(PredictionItem {
            probs: pred.planes,
            truth,
        });
    }
    set.validate(manifest.thresholds.len())?;
    Ok((set, manifest))
}

pub fn run_evaluate(env: &Env) -> Result<()> {
    let model = env.kv.get_str("predict.model", "unet");
    let (set, manifest) = build_prediction_set(env, &model)?;

    let mut evals = Vec::new();
    for idx in 0..manifest.thresholds.len() {
        if model == "unet" {
            let curve = pr_curve(&set, idx)?;
            let auc = auc_pr(&curve)?;
            eprintln!(
                "evaluate[{model}]: threshold {} AUC-PR {auc:.4} over {} pixels",
                manifest.thresholds[idx], curve.total
            );
            evals.push(Evaluation::Curve(curve));
        } else {
            let point = pr_point(&set, idx)?;
            eprintln!(
                "evaluate[{model}]: threshold {} precision {:.4} recall {:.4}",
                manifest.thresholds[idx], point.precision, point.recall
            );
            evals.push(Evaluation::Point {
                rain_threshold_index: idx,
                point,
            });
        }
    }

    let report = ModelReport {
        model: model.clone(),
        evals,
    };
    let csv = render_csv(&[report], &manifest.thresholds, &env.provenance);
    let dir = env.reports_dir();
    ensure_dir(&dir)?;
    fs::write(dir.join(format!("eval_{model}.csv")), csv)?;
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────────

struct ParsedEval {
    thresholds: Vec<f32>,
    reports: Vec<ModelReport>,
}

fn parse_eval_csv(text: &str) -> Result<ParsedEval> {
    let mut thresholds: Option<Vec<f32>> = None;
    let mut rows: Vec<(String, f32, PrPoint)> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# thresholds = ") {
            thresholds = Some(
                rest.split(',')
                    .map(|s| s.trim().parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| anyhow!("bad thresholds header: {e}"))?,
            );
            continue;
        }
        if line.starts_with('#') || line.starts_with("model,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            bail!("bad eval row '{line}'");
        }
        let tp: u64 = f[3].parse()?;
        let fp: u64 = f[4].parse()?;
        let fn_count: u64 = f[5].parse()?;
        let tn: u64 = f[6].parse()?;
        let degenerate = tp + fp == 0;
        rows.push((
            f[0].to_string(),
            f[1].parse()?,
            PrPoint {
                decision_threshold: f[2].parse()?,
                tp,
                fp,
                fn_count,
                tn,
                precision: if degenerate { 1.0 } else { tp as f64 / (tp + fp) as f64 },
                recall: tp as f64 / (tp + fn_count) as f64,
                degenerate,
            },
        ));
    }
    let thresholds = thresholds.ok_or_else(|| anyhow!("eval csv lacks a thresholds header"))?;

    let mut grouped: BTreeMap<(String, usize), Vec<PrPoint>> = BTreeMap::new();
    for (model, rain_t, point) in rows {
        let idx = thresholds
            .iter()
            .position(|t| *t == rain_t)
            .ok_or_else(|| anyhow!("row threshold {rain_t} missing from header"))?;
        grouped.entry((model, idx)).or_default().push(point);
    }

    let mut by_model: BTreeMap<String, Vec<Evaluation>> = BTreeMap::new();
    for ((model, idx), mut points) in grouped {
        let eval = if points.len() == 1 {
            Evaluation::Point {
                rain_threshold_index: idx,
                point: points.pop().expect("one point"),
            }
        } else {
            points.sort_by(|a, b| a.decision_threshold.partial_cmp(&b.decision_threshold).unwrap());
            let positives = points[0].tp + points[0].fn_count;
            let total = positives + points[0].fp + points[0].tn;
            Evaluation::Curve(PRCurve {
                rain_threshold_index: idx,
                points,
                positives,
                total,
            })
        };
        by_model.entry(model).or_default().push(eval);
    }

    Ok(ParsedEval {
        thresholds,
        reports: by_model
            .into_iter()
            .map(|(model, evals)| ModelReport { model, evals })
            .collect(),
    })
}

pub fn run_report(env: &Env) -> Result<()> {
    let dir = env.reports_dir();
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {} (run `evaluate` first?)", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no eval_*.csv files in {}", dir.display());
    }

    let mut thresholds: Option<Vec<f32>> = None;
    let mut reports = Vec::new();
    for file in &files {
        let parsed = parse_eval_csv(&fs::read_to_string(file)?)
            .with_context(|| format!("parsing {}", file.display()))?;
        match &thresholds {
            None => thresholds = Some(parsed.thresholds.clone()),
            Some(t) if *t != parsed.thresholds => bail!(
                "refusing to mix evaluations: {} uses thresholds {:?}, earlier files use {:?}",
                file.display(),
                parsed.thresholds,
                t
            ),
            Some(_) => {}
        }
        reports.extend(parsed.reports);
    }
    let thresholds = thresholds.expect("at least one file");
    reports.sort_by(|a, b| a.model.cmp(&b.model));

    let csv = render_csv(&reports, &thresholds, &env.provenance);
    let svg = render_svg(&reports, &thresholds, &env.provenance);
    fs::write(dir.join("report.csv"), csv)?;
    fs::write(dir.join("report.svg"), svg)?;
    eprintln!(
        "report: {} models, files {} and {}",
        reports.len(),
        dir.join("report.csv").display(),
        dir.join("report.svg").display()
    );
    Ok(())
}

// ── run-all ──────────────────────────────────────────────────────────────

pub fn run_all(env: &Env) -> Result<()> {
    run_synth(env)?;
    run_prepare(env)?;
    run_train(env)?;
    for model in ["persistence", "oflow", "unet"] {
        let mut kv = env.kv.clone();
        kv.set("predict.model", model);
        let staged = Env {
            kv,
            provenance: env.provenance.clone(),
        };
        run_predict(&staged)?;
        run_evaluate(&staged)?;
    }
    run_report(env)
}
