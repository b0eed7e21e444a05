//! Parallel single-modality network: per-modality channel encoders, one
//! shared residual backbone, masked-mean fusion of the available modalities
//! and a skip-connected decoder. Parameters live in a flat, named, ordered
//! list so checkpoints and optimizers can treat them uniformly.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::HeadVars;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MODALITIES: usize = 4;
pub const GN_EPS: f64 = 1e-5;
const KERNEL: usize = 3;

/// Network shape: feature width per resolution level, class count and
/// group-norm group count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: Vec<usize>,
    pub classes: usize,
    pub groups: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: vec![8, 16, 32],
            classes: 4,
            groups: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("architecture needs at least one level"));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.groups == 0 {
            return Err(Error::config("group count must be positive"));
        }
        for &c in &self.channels {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::config(format!(
                    "{c} channels not divisible into {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }
}

/// One of the four input acquisitions, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Flair,
    T2,
    T1c,
    T1,
}

impl Modality {
    pub const ALL: [Modality; MODALITIES] = [Modality::Flair, Modality::T2, Modality::T1c, Modality::T1];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Modality::Flair => "Fl",
            Modality::T2 => "T2",
            Modality::T1c => "T1c",
            Modality::T1 => "T1",
        }
    }
}

/// Availability of the four modalities; never empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalityMask([bool; MODALITIES]);

impl ModalityMask {
    pub fn new(available: [bool; MODALITIES]) -> Result<Self> {
        if !available.iter().any(|&a| a) {
            return Err(Error::Contract("modality mask selects nothing".into()));
        }
        Ok(ModalityMask(available))
    }

    pub fn full() -> Self {
        ModalityMask([true; MODALITIES])
    }

    /// Bit `i` set means modality `i` (canonical order) is available.
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits >= 1 << MODALITIES {
            return Err(Error::Contract(format!("modality bits {bits:#06b} out of range")));
        }
        Ok(ModalityMask(std::array::from_fn(|i| bits & (1 << i) != 0)))
    }

    pub fn bits(self) -> u8 {
        self.0.iter().enumerate().fold(0, |acc, (i, &a)| acc | ((a as u8) << i))
    }

    pub fn is_available(self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn available(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.0[m.index()])
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn missing(self) -> usize {
        MODALITIES - self.count()
    }

    /// The 15 non-empty subsets in reporting order: singles, pairs, triples
    /// (named by the one left out), then all four.
    pub fn table_order() -> [ModalityMask; 15] {
        use Modality::*;
        let m = |ms: &[Modality]| {
            let mut a = [false; MODALITIES];
            for x in ms {
                a[x.index()] = true;
            }
            ModalityMask(a)
        };
        [
            m(&[Flair]),
            m(&[T2]),
            m(&[T1c]),
            m(&[T1]),
            m(&[T2, Flair]),
            m(&[T1c, Flair]),
            m(&[T1c, T2]),
            m(&[T1, Flair]),
            m(&[T1, T2]),
            m(&[T1, T1c]),
            m(&[Flair, T2, T1c]),
            m(&[Flair, T2, T1]),
            m(&[Flair, T1c, T1]),
            m(&[T2, T1c, T1]),
            ModalityMask::full(),
        ]
    }

    /// Row label used in reports: `Fl`, `T2,Fl`, `~T1`, `Full`.
    pub fn label(self) -> String {
        match self.count() {
            MODALITIES => "Full".into(),
            3 => {
                let absent = Modality::ALL
                    .into_iter()
                    .find(|m| !self.is_available(*m))
                    .expect("one absent");
                format!("~{}", absent.short_name())
            }
            _ => {
                let names: Vec<&str> = Modality::ALL
                    .iter()
                    .rev()
                    .filter(|m| self.is_available(**m))
                    .map(|m| m.short_name())
                    .collect();
                names.join(",")
            }
        }
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct NormSlot {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResidualSlot {
    conv1: ConvSlot,
    norm1: NormSlot,
    conv2: ConvSlot,
    norm2: NormSlot,
}

#[derive(Clone, Copy, Debug)]
struct LevelSlot {
    transition: Option<ConvSlot>,
    residual: ResidualSlot,
}

#[derive(Clone, Copy, Debug)]
struct DecoderSlot {
    conv: ConvSlot,
    norm: NormSlot,
}

#[derive(Clone, Copy, Debug)]
struct HeadSlot {
    mu: ConvSlot,
    log_sigma: usize,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Parameter positions within the flat list, derived from the architecture.
#[derive(Clone, Debug)]
struct Layout {
    encoders: Vec<ConvSlot>,
    levels: Vec<LevelSlot>,
    decoder: Vec<DecoderSlot>,
    output: ConvSlot,
    heads: Vec<HeadSlot>,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvSlot {
        let fan_in = cin * k * k * k;
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![cout, cin, k, k, k],
            Init::Uniform { fan_in },
        );
        let bias = bias.then(|| self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros));
        ConvSlot { weight, bias }
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormSlot {
        NormSlot {
            gain: self.push(format!("{prefix}.gain"), vec![c], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![c], Init::Zeros),
        }
    }
}

fn build_layout(arch: &ArchConfig) -> (Layout, LayoutBuilder) {
    let ch = &arch.channels;
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let encoders = Modality::ALL
        .iter()
        .map(|m| b.conv(&format!("encoder.{}", m.short_name()), 1, ch[0], KERNEL, true))
        .collect();
    let mut levels = Vec::with_capacity(ch.len());
    for (l, &c) in ch.iter().enumerate() {
        let p = format!("backbone.level{}", l + 1);
        let transition = (l > 0).then(|| b.conv(&format!("{p}.transition"), ch[l - 1], c, KERNEL, true));
        let residual = ResidualSlot {
            conv1: b.conv(&format!("{p}.conv1"), c, c, KERNEL, false),
            norm1: b.norm(&format!("{p}.norm1"), c),
            conv2: b.conv(&format!("{p}.conv2"), c, c, KERNEL, false),
            norm2: b.norm(&format!("{p}.norm2"), c),
        };
        levels.push(LevelSlot { transition, residual });
    }
    let mut decoder = Vec::with_capacity(ch.len().saturating_sub(1));
    for l in 0..ch.len().saturating_sub(1) {
        let p = format!("decoder.level{}", l + 1);
        decoder.push(DecoderSlot {
            conv: b.conv(&format!("{p}.conv"), ch[l + 1] + ch[l], ch[l], KERNEL, false),
            norm: b.norm(&format!("{p}.norm"), ch[l]),
        });
    }
    let output = b.conv("output", ch[0], arch.classes, 1, true);
    let heads = ch
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            let p = format!("vhead.level{}", l + 1);
            let mu = b.conv(&format!("{p}.mu"), c, c, 1, true);
            let log_sigma = b.push(format!("{p}.log_sigma"), vec![c], Init::Zeros);
            HeadSlot { mu, log_sigma }
        })
        .collect();
    (
        Layout {
            encoders,
            levels,
            decoder,
            output,
            heads,
        },
        b,
    )
}

/// All trainable tensors of the network and its variational heads, in a
/// fixed order determined by the architecture.
#[derive(Clone, Debug)]
pub struct ModelParams {
    arch: ArchConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.names == other.names && self.tensors == other.tensors
    }
}

/// Deterministic initialization: convolution weights uniform in
/// `±1/√fan_in`, norm gains 1, every bias and `log_sigma` 0.
pub fn init_params(seed: u64, arch: &ArchConfig) -> Result<ModelParams> {
    arch.validate()?;
    let (layout, b) = build_layout(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = b
        .shapes
        .iter()
        .zip(&b.inits)
        .map(|(shape, init)| match *init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape.clone(), data).expect("shape matches count")
            }
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        layout,
        names: b.names,
        tensors,
    })
}

impl ModelParams {
    /// Rebuilds parameters from named tensors, which must match `arch`
    /// exactly in names, order and shapes.
    pub fn from_named(arch: &ArchConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let (layout, b) = build_layout(arch);
        if named.len() != b.names.len() {
            return Err(Error::config(format!(
                "architecture has {} parameters, got {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(ModelParams {
            arch: arch.clone(),
            layout,
            names: b.names,
            tensors,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> BoundModel<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel { params: self, vars }
    }

    /// Logits `[J, D, H, W]` for one sample, off any caller tape.
    pub fn predict(&self, volumes: &[Tensor], mask: ModalityMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let model = self.bind(&mut tape, false);
        let inputs = bind_volumes(&mut tape, volumes, mask)?;
        let out = model.forward(&mut tape, &inputs, mask)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Puts the available modality volumes on `tape` as constants; masked-off
/// entries are never read.
pub fn bind_volumes(tape: &mut Tape, volumes: &[Tensor], mask: ModalityMask) -> Result<[Option<Var>; MODALITIES]> {
    if volumes.len() != MODALITIES {
        return Err(Error::shape(format!(
            "need {MODALITIES} modality volumes, got {}",
            volumes.len()
        )));
    }
    Ok(std::array::from_fn(|i| {
        mask.is_available(Modality::ALL[i])
            .then(|| tape.constant(volumes[i].clone()))
    }))
}

/// Logits and per-level fused features of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub taps: Vec<Var>,
}

/// Model parameters bound to a particular tape.
pub struct BoundModel<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> BoundModel<'a> {
    /// Uses existing tape variables as the parameters; they must match
    /// `params` in count and shape.
    pub fn from_vars(tape: &Tape, params: &'a ModelParams, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::shape(format!(
                "{} variables for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        for ((v, t), name) in vars.iter().zip(&params.tensors).zip(&params.names) {
            if tape.shape(*v) != t.shape() {
                return Err(Error::shape(format!(
                    "{name}: variable {:?} vs parameter {:?}",
                    tape.shape(*v),
                    t.shape()
                )));
            }
        }
        Ok(BoundModel { params, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    fn conv(&self, tape: &mut Tape, x: Var, slot: ConvSlot, padding: usize) -> Result<Var> {
        tape.conv3d(x, self.vars[slot.weight], slot.bias.map(|b| self.vars[b]), 1, padding)
    }

    fn norm(&self, tape: &mut Tape, x: Var, slot: NormSlot) -> Result<Var> {
        tape.group_norm(
            x,
            self.vars[slot.gain],
            self.vars[slot.bias],
            self.params.arch.groups,
            GN_EPS,
        )
    }

    fn residual(&self, tape: &mut Tape, x: Var, slot: ResidualSlot) -> Result<Var> {
        let pad = KERNEL / 2;
        let y = self.conv(tape, x, slot.conv1, pad)?;
        let y = self.norm(tape, y, slot.norm1)?;
        let y = tape.relu(y)?;
        let y = self.conv(tape, y, slot.conv2, pad)?;
        let y = self.norm(tape, y, slot.norm2)?;
        let y = tape.add(y, x)?;
        tape.relu(y)
    }

    /// Per-level features `T(f_i(x_i))` of a single `[1, D, H, W]` volume.
    pub fn encode_modality(&self, tape: &mut Tape, modality: Modality, x: Var) -> Result<Vec<Var>> {
        let (c, d, h, w) = tape.value(x).volume_dims()?;
        if c != 1 {
            return Err(Error::shape(format!("modality volume must have 1 channel, got {c}")));
        }
        let scale = 1usize << (self.params.arch.levels() - 1);
        if d % scale != 0 || h % scale != 0 || w % scale != 0 {
            return Err(Error::shape(format!(
                "extents {d}x{h}x{w} must be divisible by {scale} for {} levels",
                self.params.arch.levels()
            )));
        }
        let pad = KERNEL / 2;
        let mut y = self.conv(tape, x, self.params.layout.encoders[modality.index()], pad)?;
        let mut out = Vec::with_capacity(self.params.layout.levels.len());
        for level in &self.params.layout.levels {
            if let Some(t) = level.transition {
                y = tape.downsample2(y)?;
                y = self.conv(tape, y, t, pad)?;
            }
            y = self.residual(tape, y, level.residual)?;
            out.push(y);
        }
        Ok(out)
    }

    /// Encodes and fuses the available modalities; `volumes[i]` is read only
    /// when modality `i` is in `mask`.
    pub fn encode(&self, tape: &mut Tape, volumes: &[Option<Var>; MODALITIES], mask: ModalityMask) -> Result<Vec<Var>> {
        let mut features = Vec::with_capacity(mask.count());
        for m in mask.available() {
            let x = volumes[m.index()].ok_or_else(|| {
                Error::Contract(format!("modality {} is available but has no volume", m.short_name()))
            })?;
            features.push(self.encode_modality(tape, m, x)?);
        }
        fuse(tape, &features)
    }

    /// Decoder from fused per-level features to `[J, D, H, W]` logits.
    pub fn decode(&self, tape: &mut Tape, fused: &[Var]) -> Result<Var> {
        let layout = &self.params.layout;
        if fused.len() != layout.levels.len() {
            return Err(Error::shape(format!(
                "decoder needs {} levels, got {}",
                layout.levels.len(),
                fused.len()
            )));
        }
        let pad = KERNEL / 2;
        let mut y = *fused.last().expect("at least one level");
        for l in (0..layout.decoder.len()).rev() {
            let up = tape.upsample2(y)?;
            let cat = tape.concat(&[up, fused[l]], 0)?;
            let slot = layout.decoder[l];
            y = self.conv(tape, cat, slot.conv, pad)?;
            y = self.norm(tape, y, slot.norm)?;
            y = tape.relu(y)?;
        }
        self.conv(tape, y, layout.output, 0)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        volumes: &[Option<Var>; MODALITIES],
        mask: ModalityMask,
    ) -> Result<ForwardOutput> {
        let taps = self.encode(tape, volumes, mask)?;
        let logits = self.decode(tape, &taps)?;
        Ok(ForwardOutput { logits, taps })
    }

    /// Variational head variables, one per level.
    pub fn heads(&self) -> Vec<HeadVars> {
        self.params
            .layout
            .heads
            .iter()
            .map(|h| HeadVars {
                mu_weight: self.vars[h.mu.weight],
                mu_bias: self.vars[h.mu.bias.expect("heads have a bias")],
                log_sigma: self.vars[h.log_sigma],
            })
            .collect()
    }
}

/// Per-level arithmetic mean over modalities, summed in the given order.
pub fn fuse(tape: &mut Tape, features: &[Vec<Var>]) -> Result<Vec<Var>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Contract("fusion over an empty modality set".into()))?;
    if features.iter().any(|f| f.len() != first.len()) {
        return Err(Error::shape("modalities disagree on level count"));
    }
    let scale = 1.0 / features.len() as f64;
    (0..first.len())
        .map(|l| {
            let mut acc = features[0][l];
            for f in &features[1..] {
                acc = tape.add(acc, f[l])?;
            }
            if features.len() == 1 {
                Ok(acc)
            } else {
                tape.mul_scalar(acc, scale)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            channels: vec![4, 4, 8],
            classes: 4,
            groups: 2,
        }
    }

    fn volumes(seed: u64, dim: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..MODALITIES)
            .map(|_| {
                let n = dim * dim * dim;
                Tensor::new(
                    vec![1, dim, dim, dim],
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn parameter_counts_match_counting_script() {
        assert_eq!(init_params(0, &ArchConfig::default()).unwrap().count(), 118_484);
        assert_eq!(init_params(0, &tiny()).unwrap().count(), 9_328);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(7, &tiny()).unwrap();
        assert_eq!(a, init_params(7, &tiny()).unwrap());
        assert_ne!(a, init_params(8, &tiny()).unwrap());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = init_params(1, &ArchConfig::default()).unwrap();
        let w = p.get("backbone.level2.conv1.weight").unwrap();
        let bound = 1.0 / ((16 * 27) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert!(p
            .get("backbone.level1.norm1.gain")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(p
            .get("vhead.level3.log_sigma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_channels_rejected() {
        let arch = ArchConfig {
            channels: vec![6, 16],
            classes: 4,
            groups: 4,
        };
        assert!(matches!(init_params(0, &arch), Err(Error::Config(_))));
    }

    #[test]
    fn level_shapes_and_logit_shape() {
        let p = init_params(0, &ArchConfig::default()).unwrap();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape, false);
        let vols = volumes(1, 16);
        let x = tape.constant(vols[0].clone());
        let feats = m.encode_modality(&mut tape, Modality::Flair, x).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|v| tape.shape(*v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 16, 16, 16], vec![16, 8, 8, 8], vec![32, 4, 4, 4]]);
        let inputs = bind_volumes(&mut tape, &vols, ModalityMask::full()).unwrap();
        let out = m.forward(&mut tape, &inputs, ModalityMask::full()).unwrap();
        assert_eq!(tape.shape(out.logits), &[4, 16, 16, 16]);
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let p = init_params(0, &tiny()).unwrap();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 4, 4, 4]));
        assert!(matches!(
            m.encode_modality(&mut tape, Modality::T1, x),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn masks_enumerate_fifteen_distinct_subsets() {
        let order = ModalityMask::table_order();
        let mut bits: Vec<u8> = order.iter().map(|m| m.bits()).collect();
        bits.sort();
        bits.dedup();
        assert_eq!(bits, (1..16).collect::<Vec<u8>>());
        let labels: Vec<String> = order.iter().map(|m| m.label()).collect();
        assert_eq!(
            labels,
            [
                "Fl", "T2", "T1c", "T1", "T2,Fl", "T1c,Fl", "T1c,T2", "T1,Fl", "T1,T2", "T1,T1c", "~T1", "~T1c", "~T2",
                "~Fl", "Full"
            ]
        );
        assert!(ModalityMask::new([false; 4]).is_err());
        assert!(ModalityMask::from_bits(0).is_err());
        assert!(ModalityMask::from_bits(16).is_err());
        for m in order {
            assert_eq!(ModalityMask::from_bits(m.bits()).unwrap(), m);
        }
    }

    #[test]
    fn forward_is_pure() {
        let p = init_params(2, &tiny()).unwrap();
        let vols = volumes(3, 8);
        assert_eq!(
            p.predict(&vols, ModalityMask::full()).unwrap(),
            p.predict(&vols, ModalityMask::full()).unwrap()
        );
    }

    #[test]
    fn masked_inputs_are_never_read() {
        let p = init_params(2, &tiny()).unwrap();
        let vols = volumes(3, 8);
        let mut garbage = volumes(99, 8);
        garbage[0] = vols[0].clone();
        garbage[2] = vols[2].clone();
        let mask = ModalityMask::new([true, false, true, false]).unwrap();
        assert_eq!(p.predict(&vols, mask).unwrap(), p.predict(&garbage, mask).unwrap());
    }

    #[test]
    fn fusion_of_one_is_identity_and_empty_is_contract_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, -2.5, 3.25]));
        let fused = fuse(&mut tape, &[vec![a]]).unwrap();
        assert_eq!(tape.value(fused[0]), tape.value(a));
        assert!(matches!(fuse(&mut tape, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn sharing_encoders_makes_modalities_interchangeable() {
        let mut p = init_params(4, &tiny()).unwrap();
        let w = p.get("encoder.Fl.weight").unwrap().clone();
        *p.get_mut("encoder.T1.weight").unwrap() = w;
        let vols = volumes(5, 8);
        let mut tape = Tape::new();
        let m = p.bind(&mut tape, false);
        let x = tape.constant(vols[0].clone());
        let a = m.encode_modality(&mut tape, Modality::Flair, x).unwrap();
        let b = m.encode_modality(&mut tape, Modality::T1, x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(tape.value(*u), tape.value(*v));
        }
    }

    #[test]
    fn backbone_perturbation_reaches_every_modality() {
        let p = init_params(4, &tiny()).unwrap();
        let mut q = p.clone();
        q.get_mut("backbone.level2.conv1.weight").unwrap().data_mut()[0] += 0.1;
        let vols = volumes(6, 8);
        for m in Modality::ALL {
            let mut bits = [false; 4];
            bits[m.index()] = true;
            let mask = ModalityMask::new(bits).unwrap();
            assert_ne!(p.predict(&vols, mask).unwrap(), q.predict(&vols, mask).unwrap());
        }
    }

    #[test]
    fn zero_input_with_zero_bias_is_zero_before_norm() {
        let p = init_params(4, &tiny()).unwrap();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 8, 8, 8]));
        let feats = m.encode_modality(&mut tape, Modality::T2, x).unwrap();
        for f in feats {
            assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn excluded_encoders_get_no_gradient() {
        let p = init_params(4, &tiny()).unwrap();
        let vols = volumes(7, 8);
        let mut tape = Tape::new();
        let m = p.bind(&mut tape, true);
        let mask = ModalityMask::new([false, true, false, true]).unwrap();
        let inputs = bind_volumes(&mut tape, &vols, mask).unwrap();
        let out = m.forward(&mut tape, &inputs, mask).unwrap();
        let loss = tape.mean_all(out.logits).unwrap();
        let vars = m.vars().to_vec();
        let grads = tape.backward(loss).unwrap();
        for (name, v) in p.names().iter().zip(vars) {
            let nonzero = grads.get(v).is_some_and(|g| g.data().iter().any(|&x| x != 0.0));
            if name.starts_with("encoder.Fl") || name.starts_with("encoder.T1c") {
                assert!(!nonzero, "{name}");
            }
            if name.starts_with("encoder.T2.weight") || name.starts_with("encoder.T1.weight") {
                assert!(nonzero, "{name}");
            }
        }
    }

    #[test]
    fn from_named_round_trips_and_rejects_mismatch() {
        let p = init_params(9, &tiny()).unwrap();
        let named: Vec<(String, Tensor)> = p.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(ModelParams::from_named(&tiny(), named.clone()).unwrap(), p);
        assert!(ModelParams::from_named(&ArchConfig::default(), named).is_err());
    }
}
