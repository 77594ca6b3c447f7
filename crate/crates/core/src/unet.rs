//! The encoder-decoder network: a stem block, `depth` downsample blocks, a
//! bottleneck block, `depth` upsample blocks consuming the mirrored encoder
//! outputs through channel concatenation, and a 1x1 projection to per-pixel
//! class logits. Every block carries an additive short skip, projected by a
//! 1x1 convolution where channel or spatial dims differ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{
    add, avg_pool_2x2, batch_norm, concat_channels, conv2d, leaky_relu, max_pool_2x2,
    softmax_per_pixel, upsample_nearest_2x, BnMode, Gradients, Parameter, Scalar, Tape, Tensor,
};

pub const DEFAULT_FILTER_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Number of downsample blocks (equals the number of upsample blocks).
    pub depth: usize,
    /// Channels out of the stem block.
    pub base_filters: usize,
    /// Channels out of each downsample block, length `depth`.
    pub filter_schedule: Vec<usize>,
    pub input_channels: usize,
    pub class_count: usize,
    pub leaky_slope: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig::new(7, 32, 28, 4)
    }
}

impl UNetConfig {
    pub fn new(depth: usize, base_filters: usize, input_channels: usize, class_count: usize) -> Self {
        UNetConfig {
            depth,
            base_filters,
            filter_schedule: Self::doubling_schedule(depth, base_filters, DEFAULT_FILTER_CAP),
            input_channels,
            class_count,
            leaky_slope: 0.2,
        }
    }

    /// Default schedule: double each level, capped.
    pub fn doubling_schedule(depth: usize, base: usize, cap: usize) -> Vec<usize> {
        (0..depth).map(|i| (base << (i + 1)).min(cap)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.filter_schedule.len() != self.depth {
            return Err(Error::Config(format!(
                "filter schedule length {} != depth {}",
                self.filter_schedule.len(),
                self.depth
            )));
        }
        if self.base_filters == 0
            || self.input_channels == 0
            || self.class_count < 2
            || self.filter_schedule.iter().any(|&f| f == 0)
        {
            return Err(Error::Config("channel counts must be positive (>= 2 classes)".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("bad leaky slope {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Canonical text form; the hash of these bytes identifies the
    /// architecture in checkpoints.
    pub fn canonical_text(&self) -> String {
        let schedule = self
            .filter_schedule
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "base_filters = {}\nclass_count = {}\ndepth = {}\nfilter_schedule = {}\ninput_channels = {}\nleaky_slope = {}\n",
            self.base_filters, self.class_count, self.depth, schedule, self.input_channels, self.leaky_slope
        )
    }

    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn parse_text(text: &str) -> Result<UNetConfig> {
        let mut cfg = UNetConfig::default();
        let mut schedule = None;
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("bad {key}: {e}"));
            match key {
                "base_filters" => cfg.base_filters = value.parse().map_err(|e| bad(&e))?,
                "class_count" => cfg.class_count = value.parse().map_err(|e| bad(&e))?,
                "depth" => cfg.depth = value.parse().map_err(|e| bad(&e))?,
                "input_channels" => cfg.input_channels = value.parse().map_err(|e| bad(&e))?,
                "leaky_slope" => cfg.leaky_slope = value.parse().map_err(|e| bad(&e))?,
                "filter_schedule" => {
                    schedule = Some(
                        value
                            .split(',')
                            .map(|s| s.trim().parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| bad(&e))?,
                    )
                }
                other => return Err(Error::Config(format!("unknown model config key '{other}'"))),
            }
        }
        cfg.filter_schedule =
            schedule.ok_or_else(|| Error::Config("model config lacks filter_schedule".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── layers ───────────────────────────────────────────────────────────────

struct ConvLayer<T: Scalar> {
    kernel: Parameter<T>,
    bias: Parameter<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn init(name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        // Fan-in scaled uniform init, zero bias.
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let kernel: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        ConvLayer {
            kernel: Parameter::new(format!("{name}.kernel"), vec![cout, cin, k, k], kernel)
                .expect("kernel shape"),
            bias: Parameter::new(format!("{name}.bias"), vec![cout], vec![T::zero(); cout])
                .expect("bias shape"),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.kernel.leaf(tape);
        let b = self.bias.leaf(tape);
        conv2d(tape, x, &k, &b)
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.kernel);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

struct BnLayer<T: Scalar> {
    gamma: Parameter<T>,
    beta: Parameter<T>,
    name: String,
    running_mean: Vec<T>,
    running_var: Vec<T>,
}

impl<T: Scalar> BnLayer<T> {
    fn init(name: &str, channels: usize) -> Self {
        BnLayer {
            gamma: Parameter::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels])
                .expect("gamma shape"),
            beta: Parameter::new(format!("{name}.beta"), vec![channels], vec![T::zero(); channels])
                .expect("beta shape"),
            name: name.to_string(),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        momentum: T,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let gamma = self.gamma.leaf(tape);
        let beta = self.beta.leaf(tape);
        batch_norm(
            tape,
            x,
            &gamma,
            &beta,
            &mut self.running_mean,
            &mut self.running_var,
            momentum,
            mode,
        )
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[T])) {
        f(&format!("{}.running_mean", self.name), &self.running_mean);
        f(&format!("{}.running_var", self.name), &self.running_var);
    }

    fn load_buffer(&mut self, suffix: &str, values: Vec<T>) -> Result<()> {
        let slot = match suffix {
            "running_mean" => &mut self.running_mean,
            "running_var" => &mut self.running_var,
            other => return Err(Error::Config(format!("unknown buffer '{other}'"))),
        };
        if values.len() != slot.len() {
            return Err(Error::ShapeMismatch(format!(
                "buffer {}.{suffix} has {} channels, checkpoint has {}",
                self.name,
                slot.len(),
                values.len()
            )));
        }
        *slot = values;
        Ok(())
    }
}

/// Conv2D -> BN -> LeakyReLU -> Conv2D, plus an additive short skip
/// (identity when channels match, 1x1 projection otherwise).
struct BasicBlock<T: Scalar> {
    conv1: ConvLayer<T>,
    bn: BnLayer<T>,
    conv2: ConvLayer<T>,
    proj: Option<ConvLayer<T>>,
    slope: T,
}

impl<T: Scalar> BasicBlock<T> {
    fn init(name: &str, cin: usize, cout: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        BasicBlock {
            conv1: ConvLayer::init(&format!("{name}.conv1"), cin, cout, 3, rng),
            bn: BnLayer::init(&format!("{name}.bn"), cout),
            conv2: ConvLayer::init(&format!("{name}.conv2"), cout, cout, 3, rng),
            proj: (cin != cout).then(|| ConvLayer::init(&format!("{name}.proj"), cin, cout, 1, rng)),
            slope: T::from_f64(slope),
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        momentum: T,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn.forward(tape, &h, momentum, mode)?;
        let h = leaky_relu(tape, &h, self.slope)?;
        let h = self.conv2.forward(tape, &h)?;
        let skip = match &mut self.proj {
            Some(proj) => proj.forward(tape, x)?,
            None => x.clone(),
        };
        add(tape, &h, &skip)
    }
}

/// BN -> LeakyReLU -> MaxPool -> BN -> LeakyReLU -> Conv2D; the short skip
/// is a strided-average 1x1 projection of the block input.
struct DownsampleBlock<T: Scalar> {
    bn1: BnLayer<T>,
    bn2: BnLayer<T>,
    conv: ConvLayer<T>,
    proj: ConvLayer<T>,
    slope: T,
}

impl<T: Scalar> DownsampleBlock<T> {
    fn init(name: &str, cin: usize, cout: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        DownsampleBlock {
            bn1: BnLayer::init(&format!("{name}.bn1"), cin),
            bn2: BnLayer::init(&format!("{name}.bn2"), cin),
            conv: ConvLayer::init(&format!("{name}.conv"), cin, cout, 3, rng),
            proj: ConvLayer::init(&format!("{name}.proj"), cin, cout, 1, rng),
            slope: T::from_f64(slope),
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        momentum: T,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let h = self.bn1.forward(tape, x, momentum, mode)?;
        let h = leaky_relu(tape, &h, self.slope)?;
        let h = max_pool_2x2(tape, &h)?;
        let h = self.bn2.forward(tape, &h, momentum, mode)?;
        let h = leaky_relu(tape, &h, self.slope)?;
        let h = self.conv.forward(tape, &h)?;
        let pooled = avg_pool_2x2(tape, x)?;
        let skip = self.proj.forward(tape, &pooled)?;
        add(tape, &h, &skip)
    }
}

/// Upsample -> concat skip -> BN -> LeakyReLU -> Conv2D -> BN -> LeakyReLU ->
/// Conv2D; the short skip is a 1x1 projection of the upsampled block input.
struct UpsampleBlock<T: Scalar> {
    bn1: BnLayer<T>,
    conv1: ConvLayer<T>,
    bn2: BnLayer<T>,
    conv2: ConvLayer<T>,
    proj: ConvLayer<T>,
    slope: T,
}

impl<T: Scalar> UpsampleBlock<T> {
    fn init(name: &str, cx: usize, cskip: usize, cout: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        UpsampleBlock {
            bn1: BnLayer::init(&format!("{name}.bn1"), cx + cskip),
            conv1: ConvLayer::init(&format!("{name}.conv1"), cx + cskip, cout, 3, rng),
            bn2: BnLayer::init(&format!("{name}.bn2"), cout),
            conv2: ConvLayer::init(&format!("{name}.conv2"), cout, cout, 3, rng),
            proj: ConvLayer::init(&format!("{name}.proj"), cx, cout, 1, rng),
            slope: T::from_f64(slope),
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        skip: &Tensor<T>,
        momentum: T,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let (_, _, xh, xw) = x.dims4()?;
        let (_, _, sh, sw) = skip.dims4()?;
        if sh != 2 * xh || sw != 2 * xw {
            return Err(Error::ShapeMismatch(format!(
                "skip {sh}x{sw} is not twice the block input {xh}x{xw}"
            )));
        }
        let up = upsample_nearest_2x(tape, x)?;
        let cat = concat_channels(tape, &up, skip)?;
        let h = self.bn1.forward(tape, &cat, momentum, mode)?;
        let h = leaky_relu(tape, &h, self.slope)?;
        let h = self.conv1.forward(tape, &h)?;
        let h = self.bn2.forward(tape, &h, momentum, mode)?;
        let h = leaky_relu(tape, &h, self.slope)?;
        let h = self.conv2.forward(tape, &h)?;
        let res = self.proj.forward(tape, &up)?;
        add(tape, &h, &res)
    }
}

// ── the model ────────────────────────────────────────────────────────────

pub struct UNetModel<T: Scalar> {
    config: UNetConfig,
    stem: BasicBlock<T>,
    encoders: Vec<DownsampleBlock<T>>,
    bottleneck: BasicBlock<T>,
    decoders: Vec<UpsampleBlock<T>>,
    head: ConvLayer<T>,
}

impl<T: Scalar> UNetModel<T> {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = config.leaky_slope;

        let stem = BasicBlock::init("stem", config.input_channels, config.base_filters, slope, &mut rng);

        let mut encoders = Vec::with_capacity(config.depth);
        let mut prev = config.base_filters;
        for (i, &filters) in config.filter_schedule.iter().enumerate() {
            encoders.push(DownsampleBlock::init(&format!("enc{i}"), prev, filters, slope, &mut rng));
            prev = filters;
        }

        let bottleneck = BasicBlock::init("bottleneck", prev, prev, slope, &mut rng);

        let mut decoders = Vec::with_capacity(config.depth);
        let mut cx = prev;
        for j in 0..config.depth {
            let cskip = if j == config.depth - 1 {
                config.base_filters
            } else {
                config.filter_schedule[config.depth - 2 - j]
            };
            decoders.push(UpsampleBlock::init(&format!("dec{j}"), cx, cskip, cskip, slope, &mut rng));
            cx = cskip;
        }

        let head = ConvLayer::init("head", config.base_filters, config.class_count, 1, &mut rng);

        Ok(UNetModel {
            config,
            stem,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Stem -> encoders -> bottleneck -> decoders (consuming encoder outputs
    /// in reverse) -> 1x1 head. Returns `[B, classes, H, W]` logits.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        mode: BnMode,
        bn_momentum: f64,
    ) -> Result<Tensor<T>> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::Config(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        let momentum = T::from_f64(bn_momentum);

        let x = if input.node().is_some() {
            input.clone()
        } else {
            tape.leaf(input)
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = self.stem.forward(tape, &x, momentum, mode)?;
        for enc in &mut self.encoders {
            skips.push(h.clone());
            h = enc.forward(tape, &h, momentum, mode)?;
        }
        h = self.bottleneck.forward(tape, &h, momentum, mode)?;
        for dec in &mut self.decoders {
            let skip = skips.pop().expect("one skip per decoder");
            h = dec.forward(tape, &h, &skip, momentum, mode)?;
        }
        self.head.forward(tape, &h)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        let visit_basic = |b: &BasicBlock<T>, f: &mut dyn FnMut(&Parameter<T>)| {
            b.conv1.visit(f);
            b.bn.visit(f);
            b.conv2.visit(f);
            if let Some(p) = &b.proj {
                p.visit(f);
            }
        };
        visit_basic(&self.stem, f);
        for e in &self.encoders {
            e.bn1.visit(f);
            e.bn2.visit(f);
            e.conv.visit(f);
            e.proj.visit(f);
        }
        visit_basic(&self.bottleneck, f);
        for d in &self.decoders {
            d.bn1.visit(f);
            d.conv1.visit(f);
            d.bn2.visit(f);
            d.conv2.visit(f);
            d.proj.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        let visit_basic = |b: &mut BasicBlock<T>, f: &mut dyn FnMut(&mut Parameter<T>)| {
            b.conv1.visit_mut(f);
            b.bn.visit_mut(f);
            b.conv2.visit_mut(f);
            if let Some(p) = &mut b.proj {
                p.visit_mut(f);
            }
        };
        visit_basic(&mut self.stem, f);
        for e in &mut self.encoders {
            e.bn1.visit_mut(f);
            e.bn2.visit_mut(f);
            e.conv.visit_mut(f);
            e.proj.visit_mut(f);
        }
        visit_basic(&mut self.bottleneck, f);
        for d in &mut self.decoders {
            d.bn1.visit_mut(f);
            d.conv1.visit_mut(f);
            d.bn2.visit_mut(f);
            d.conv2.visit_mut(f);
            d.proj.visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[T])) {
        self.stem.bn.visit_buffers(f);
        for e in &self.encoders {
            e.bn1.visit_buffers(f);
            e.bn2.visit_buffers(f);
        }
        self.bottleneck.bn.visit_buffers(f);
        for d in &self.decoders {
            d.bn1.visit_buffers(f);
            d.bn2.visit_buffers(f);
        }
    }

    pub(crate) fn load_buffer(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let (owner, suffix) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Config(format!("bad buffer name '{name}'")))?;
        let bn: &mut BnLayer<T> = if owner == "stem.bn" {
            &mut self.stem.bn
        } else if owner == "bottleneck.bn" {
            &mut self.bottleneck.bn
        } else if let Some(rest) = owner.strip_prefix("enc") {
            let (idx, which) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("bad buffer name '{name}'")))?;
            let i: usize = idx.parse().map_err(|_| Error::Config(format!("bad buffer name '{name}'")))?;
            let e = self
                .encoders
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("no encoder {i}")))?;
            match which {
                "bn1" => &mut e.bn1,
                "bn2" => &mut e.bn2,
                _ => return Err(Error::Config(format!("bad buffer name '{name}'"))),
            }
        } else if let Some(rest) = owner.strip_prefix("dec") {
            let (idx, which) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("bad buffer name '{name}'")))?;
            let j: usize = idx.parse().map_err(|_| Error::Config(format!("bad buffer name '{name}'")))?;
            let d = self
                .decoders
                .get_mut(j)
                .ok_or_else(|| Error::Config(format!("no decoder {j}")))?;
            match which {
                "bn1" => &mut d.bn1,
                "bn2" => &mut d.bn2,
                _ => return Err(Error::Config(format!("bad buffer name '{name}'"))),
            }
        } else {
            return Err(Error::Config(format!("unknown buffer owner '{owner}'")));
        };
        bn.load_buffer(suffix, values)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        self.visit_params_mut(&mut |p| p.accumulate_grad(grads));
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn all_params_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.values().iter().all(|v| v.is_finite()));
        ok
    }
}

/// Tail-sum the per-pixel softmax into threshold-exceedance maps:
/// `P(class > i)` for `i = 0 .. classes-2`. Input must be a single example's
/// logits, `[classes, H, W]` or `[1, classes, H, W]`.
pub fn exceedance_probs<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let (k, h, w) = match logits.shape() {
        &[k, h, w] => (k, h, w),
        &[1, k, h, w] => (k, h, w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "exceedance maps need single-example logits, got {other:?}"
            )))
        }
    };
    if k < 2 {
        return Err(Error::ShapeMismatch(format!("{k} classes cannot define thresholds")));
    }
    let softmax = softmax_per_pixel(logits.values(), 1, k, h, w);
    let hw = h * w;
    let mut maps = vec![vec![T::zero(); hw]; k - 1];
    for pix in 0..hw {
        // Tail sums from the top class down keep the maps nested by
        // construction.
        let mut tail = T::zero();
        for c in (1..k).rev() {
            tail = tail + softmax[c * hw + pix];
            maps[c - 1][pix] = tail;
        }
    }
    Ok(maps)
}
