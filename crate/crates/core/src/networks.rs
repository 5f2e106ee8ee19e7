//! Miniature encoder-decoder segmentation networks with a configurable gate
//! on every skip connection.
//!
//! * `unet`: two conv-BN-ReLU units per level, max-pool down, nearest
//!   upsampling up, the gated encoder map concatenated before the decoder
//!   units.
//! * `vnet`: the same topology with each level's second unit added back
//!   onto the first (`relu(h + bn(conv(h)))`).
//! * `tiramisu`: dense blocks. Down-path blocks carry their input to their
//!   output through a gate; the bottleneck and up-path blocks emit only
//!   their new feature maps. Encoder-decoder skips are gated as well.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gate::{attend_kernel_shape, gate_forward, GateOutput, GateParams, GateVariant};
use crate::init::{glorot_uniform, named_stream};
use crate::nn::{BatchNormConfig, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Unet,
    Vnet,
    Tiramisu,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Unet, Family::Vnet, Family::Tiramisu];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Unet => "unet",
            Family::Vnet => "vnet",
            Family::Tiramisu => "tiramisu",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Family::Unet),
            "vnet" => Ok(Family::Vnet),
            "tiramisu" => Ok(Family::Tiramisu),
            other => Err(Error::invalid("arch_spec", format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub family: Family,
    pub spatial_rank: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub dense_block_layers: usize,
    pub gate_variant: GateVariant,
    pub in_channels: usize,
    pub out_classes: usize,
}

/// Keys of the flat `key=value` serialization, in write order.
pub const ARCH_KEYS: [&str; 9] = [
    "family",
    "spatial_rank",
    "depth",
    "base_channels",
    "channel_growth",
    "dense_block_layers",
    "gate_variant",
    "in_channels",
    "out_classes",
];

impl ArchSpec {
    /// Reference spec for a family: 2-D, three levels, channels doubling
    /// per level. U-Net and V-Net start at 8 channels; the Tiramisu uses a
    /// growth rate of 4 at the top level and two layers per dense block.
    pub fn reference(family: Family) -> Self {
        ArchSpec {
            family,
            spatial_rank: 2,
            depth: 3,
            base_channels: if family == Family::Tiramisu { 4 } else { 8 },
            channel_growth: 2,
            dense_block_layers: 2,
            gate_variant: GateVariant::Org,
            in_channels: 1,
            out_classes: 1,
        }
    }

    pub fn with_variant(mut self, variant: GateVariant) -> Self {
        self.gate_variant = variant;
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.spatial_rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("arch_spec", msg));
        if !(2..=3).contains(&self.spatial_rank) {
            return bad(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.base_channels == 0 || self.channel_growth == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive".to_string());
        }
        if self.family == Family::Tiramisu && self.dense_block_layers == 0 {
            return bad("dense_block_layers must be positive".to_string());
        }
        if self.out_classes != 1 {
            return bad(format!("only binary segmentation is supported, got {} classes", self.out_classes));
        }
        Ok(())
    }

    /// Channels at resolution level `level` (the growth rate per dense layer
    /// for the Tiramisu).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_growth.pow(level as u32)
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.spatial_rank;
        if shape.len() != r + 2 || shape[r] != self.in_channels {
            return Err(Error::invalid(
                "forward",
                format!("expected {r} spatial axes and {} channels, got {shape:?}", self.in_channels),
            ));
        }
        if let Some(a) = (0..r).find(|&a| shape[a] % self.divisor() != 0) {
            return Err(Error::invalid(
                "forward",
                format!("extent {} on axis {a} not divisible by {}", shape[a], self.divisor()),
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let vals = [
            self.family.to_string(),
            self.spatial_rank.to_string(),
            self.depth.to_string(),
            self.base_channels.to_string(),
            self.channel_growth.to_string(),
            self.dense_block_layers.to_string(),
            self.gate_variant.to_string(),
            self.in_channels.to_string(),
            self.out_classes.to_string(),
        ];
        ARCH_KEYS.iter().copied().zip(vals).collect()
    }

    /// Parses the pairs written by [`ArchSpec::to_pairs`]; unknown keys are
    /// ignored so the same header can carry other sections.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut vals: [Option<&str>; 9] = [None; 9];
        for (k, v) in pairs {
            if let Some(i) = ARCH_KEYS.iter().position(|&a| a == k) {
                vals[i] = Some(v);
            }
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::invalid("arch_spec", format!("missing key {}", ARCH_KEYS[i])));
        let num = |i: usize| -> Result<usize> {
            get(i)?
                .parse()
                .map_err(|_| Error::invalid("arch_spec", format!("bad value for {}", ARCH_KEYS[i])))
        };
        let spec = ArchSpec {
            family: get(0)?.parse()?,
            spatial_rank: num(1)?,
            depth: num(2)?,
            base_channels: num(3)?,
            channel_growth: num(4)?,
            dense_block_layers: num(5)?,
            gate_variant: get(6)?.parse()?,
            in_channels: num(7)?,
            out_classes: num(8)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// First key whose value differs from `other`'s.
    pub fn first_mismatch(&self, other: &ArchSpec) -> Option<&'static str> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .find(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
    }
}

/// Decoder-side concatenation width after a skip carrying `c_skip`
/// channels meets `c_decoder` upsampled channels.
pub fn concat_input_width(variant: GateVariant, c_skip: usize, c_decoder: usize) -> usize {
    variant.transferred_channels(c_skip) + c_decoder
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateRole {
    /// Encoder-to-decoder skip at a resolution level.
    Skip(usize),
    /// Block-input carry inside the down-path dense block at a level.
    DenseBlock(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateInfo {
    pub name: String,
    pub variant: GateVariant,
    pub channels: usize,
    pub role: GateRole,
    select: Option<ParamId>,
    attend: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    kernel: ParamId,
    bias: Option<ParamId>,
    spec: ConvSpec,
}

/// conv -> batch norm -> (optional) ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Unit {
    conv: Conv,
    bn: Bn,
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Plain(Vec<Unit>),
    Residual(Unit, Unit),
    Dense { units: Vec<Unit>, carry_gate: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchSpec,
    params: ParamStore,
    gates: Vec<GateInfo>,
    stem: Option<Unit>,
    encoder: Vec<Stage>,
    transitions: Vec<Unit>,
    bottom: Stage,
    decoder: Vec<Stage>,
    skip_gates: Vec<usize>,
    head: Conv,
    bn: BatchNormConfig,
}

struct Builder {
    store: ParamStore,
    gates: Vec<GateInfo>,
    seed: u64,
    rank: usize,
    variant: GateVariant,
}

impl Builder {
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<Conv> {
        let spec = ConvSpec::same(self.rank, k, cin, cout);
        let taps = k.pow(self.rank as u32);
        let kname = format!("{name}.kernel");
        let kernel = glorot_uniform(taps * cin, taps * cout, &spec.kernel_shape(), &mut named_stream(self.seed, &kname));
        let kernel = self.store.add(kname, kernel, true)?;
        let bias = Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?);
        Ok(Conv { kernel, bias, spec })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        Ok(Bn {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[c]), true)?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true)?,
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?,
            var: self.store.add(format!("{name}.running_var"), Tensor::ones(&[c]), false)?,
        })
    }

    fn unit(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<Unit> {
        Ok(Unit {
            conv: self.conv(&format!("{name}.conv"), k, cin, cout)?,
            bn: self.bn(&format!("{name}.bn"), cout)?,
        })
    }

    fn gate(&mut self, name: String, channels: usize, role: GateRole) -> Result<usize> {
        let v = self.variant;
        let select = if v.has_selection() {
            Some(self.store.add(format!("{name}.select"), Tensor::ones(&[channels]), true)?)
        } else {
            None
        };
        let attend = if v.has_attention() {
            let kname = format!("{name}.attend");
            let k = glorot_uniform(
                channels,
                1,
                &attend_kernel_shape(self.rank, channels),
                &mut named_stream(self.seed, &kname),
            );
            Some(self.store.add(kname, k, true)?)
        } else {
            None
        };
        self.gates.push(GateInfo {
            name,
            variant: v,
            channels,
            role,
            select,
            attend,
        });
        Ok(self.gates.len() - 1)
    }

    /// Dense block of `layers` units with growth `k`; returns the stage
    /// and its output width.
    fn dense(&mut self, name: &str, cin: usize, k: usize, layers: usize, carry: Option<usize>) -> Result<(Stage, usize)> {
        let mut units = Vec::with_capacity(layers);
        for j in 0..layers {
            units.push(self.unit(&format!("{name}.layer{j}"), 3, cin + j * k, k)?);
        }
        let carry_gate = match carry {
            Some(level) => Some(self.gate(format!("{name}.gate"), cin, GateRole::DenseBlock(level))?),
            None => None,
        };
        let width = layers * k + carry_gate.map_or(0, |_| self.variant.transferred_channels(cin));
        Ok((Stage::Dense { units, carry_gate }, width))
    }
}

/// Builds a model with deterministic initialization from `seed`. Every
/// parameter draws from its own named stream, so layers shared by two
/// variants start out identical.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let fam = spec.family.as_str();
    let mut b = Builder {
        store: ParamStore::new(),
        gates: Vec::new(),
        seed,
        rank: spec.spatial_rank,
        variant: spec.gate_variant,
    };
    let levels = spec.depth - 1;
    let mut encoder = Vec::with_capacity(levels);
    let mut transitions = Vec::new();
    let mut decoder_rev = Vec::with_capacity(levels);
    let mut skip_widths = Vec::with_capacity(levels);
    let mut stem = None;
    let bottom;
    let head;
    match spec.family {
        Family::Unet | Family::Vnet => {
            let mut cin = spec.in_channels;
            for l in 0..levels {
                let c = spec.level_channels(l);
                let u0 = b.unit(&format!("{fam}.enc{l}.0"), 3, cin, c)?;
                let u1 = b.unit(&format!("{fam}.enc{l}.1"), 3, c, c)?;
                encoder.push(two_unit_stage(spec.family, u0, u1));
                skip_widths.push(c);
                cin = c;
            }
            let c = spec.level_channels(levels);
            let u0 = b.unit(&format!("{fam}.bottom.0"), 3, cin, c)?;
            let u1 = b.unit(&format!("{fam}.bottom.1"), 3, c, c)?;
            bottom = two_unit_stage(spec.family, u0, u1);
            let mut below = c;
            for l in (0..levels).rev() {
                let c = spec.level_channels(l);
                let width = concat_input_width(spec.gate_variant, skip_widths[l], below);
                let u0 = b.unit(&format!("{fam}.dec{l}.0"), 3, width, c)?;
                let u1 = b.unit(&format!("{fam}.dec{l}.1"), 3, c, c)?;
                decoder_rev.push(two_unit_stage(spec.family, u0, u1));
                below = c;
            }
            head = b.conv(&format!("{fam}.head"), 1, below, spec.out_classes)?;
        }
        Family::Tiramisu => {
            let layers = spec.dense_block_layers;
            stem = Some(b.unit(&format!("{fam}.stem"), 3, spec.in_channels, spec.base_channels)?);
            let mut w = spec.base_channels;
            for l in 0..levels {
                let (stage, out) = b.dense(&format!("{fam}.enc{l}"), w, spec.level_channels(l), layers, Some(l))?;
                encoder.push(stage);
                transitions.push(b.unit(&format!("{fam}.down{l}"), 1, out, out)?);
                skip_widths.push(out);
                w = out;
            }
            let (stage, out) = b.dense(&format!("{fam}.bottom"), w, spec.level_channels(levels), layers, None)?;
            bottom = stage;
            w = out;
            for l in (0..levels).rev() {
                let width = concat_input_width(spec.gate_variant, skip_widths[l], w);
                let (stage, out) = b.dense(&format!("{fam}.dec{l}"), width, spec.level_channels(l), layers, None)?;
                decoder_rev.push(stage);
                w = out;
            }
            head = b.conv(&format!("{fam}.head"), 1, w, spec.out_classes)?;
        }
    }
    // encoder-decoder gates are registered after all layers
    let mut skip_gates = Vec::with_capacity(levels);
    for (l, &c) in skip_widths.iter().enumerate() {
        skip_gates.push(b.gate(format!("{fam}.skip{l}"), c, GateRole::Skip(l))?);
    }
    decoder_rev.reverse();
    Ok(Model {
        spec: *spec,
        params: b.store,
        gates: b.gates,
        stem,
        encoder,
        transitions,
        bottom,
        decoder: decoder_rev,
        skip_gates,
        head,
        bn: BatchNormConfig::default(),
    })
}

fn two_unit_stage(family: Family, u0: Unit, u1: Unit) -> Stage {
    match family {
        Family::Vnet => Stage::Residual(u0, u1),
        _ => Stage::Plain(vec![u0, u1]),
    }
}

/// Nodes recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Pre-sigmoid logits, `[spatial.., 1, B]`.
    pub logits: Var,
    /// One entry per gate, in [`Model::gates`] order.
    pub gates: Vec<GateTrace>,
    /// Encoder output at each level before any gate touches it.
    pub encoder: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateTrace {
    pub input: Var,
    pub output: GateOutput,
}

/// Running-statistics refresh produced by a training-mode pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    mean: (ParamId, Vec<f64>),
    var: (ParamId, Vec<f64>),
}

struct Run<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    training: bool,
    updates: Vec<StatUpdate>,
    traces: Vec<Option<GateTrace>>,
}

impl Run<'_> {
    fn param(&mut self, id: ParamId) -> Var {
        let p = self.model.params.get(id);
        self.tape.param(&p.name, &p.value, p.trainable)
    }

    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let k = self.param(c.kernel);
        let b = c.bias.map(|b| self.param(b));
        self.tape.conv(x, k, b, &c.spec)
    }

    fn bn(&mut self, bn: &Bn, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let mut mean = self.model.params.get(bn.mean).value.data().to_vec();
        let mut var = self.model.params.get(bn.var).value.data().to_vec();
        let y = self
            .tape
            .batchnorm(x, gamma, beta, &mut mean, &mut var, self.model.bn, self.training)?;
        if self.training {
            self.updates.push(StatUpdate {
                mean: (bn.mean, mean),
                var: (bn.var, var),
            });
        }
        Ok(y)
    }

    fn unit(&mut self, u: &Unit, x: Var, relu: bool) -> Result<Var> {
        let h = self.conv(&u.conv, x)?;
        let h = self.bn(&u.bn, h)?;
        if relu {
            self.tape.relu(h)
        } else {
            Ok(h)
        }
    }

    fn gate(&mut self, index: usize, x: Var) -> Result<Var> {
        let g = &self.model.gates[index];
        let (sel, att, variant) = (g.select, g.attend, g.variant);
        let w = sel.map(|id| self.param(id));
        let k = att.map(|id| self.param(id));
        let output = gate_forward(self.tape, x, variant, w, k)?;
        self.traces[index] = Some(GateTrace { input: x, output });
        Ok(output.transferred)
    }

    fn stage(&mut self, s: &Stage, x: Var) -> Result<Var> {
        match s {
            Stage::Plain(units) => units.iter().try_fold(x, |h, u| self.unit(u, h, true)),
            Stage::Residual(u0, u1) => {
                let h = self.unit(u0, x, true)?;
                let r = self.unit(u1, h, false)?;
                let sum = self.tape.add(h, r)?;
                self.tape.relu(sum)
            }
            Stage::Dense { units, carry_gate } => {
                let mut features = x;
                let mut fresh: Option<Var> = None;
                for u in units {
                    let y = self.unit(u, features, true)?;
                    features = self.tape.concat_channels(features, y)?;
                    fresh = Some(match fresh {
                        Some(f) => self.tape.concat_channels(f, y)?,
                        None => y,
                    });
                }
                let fresh = fresh.expect("dense block has at least one layer");
                match carry_gate {
                    Some(g) => {
                        let carried = self.gate(*g, x)?;
                        self.tape.concat_channels(carried, fresh)
                    }
                    None => Ok(fresh),
                }
            }
        }
    }

    fn forward(mut self, input: Var) -> Result<(Forward, Vec<StatUpdate>)> {
        let m = self.model;
        let down = [2usize; 3];
        let factor = &down[..m.spec.spatial_rank];
        let mut x = match &m.stem {
            Some(u) => self.unit(u, input, true)?,
            None => input,
        };
        let mut skips = Vec::with_capacity(m.encoder.len());
        for (l, stage) in m.encoder.iter().enumerate() {
            let e = self.stage(stage, x)?;
            skips.push(e);
            let t = match m.transitions.get(l) {
                Some(u) => self.unit(u, e, true)?,
                None => e,
            };
            x = self.tape.maxpool(t, factor)?;
        }
        x = self.stage(&m.bottom, x)?;
        for l in (0..m.decoder.len()).rev() {
            let up = self.tape.upsample_nearest(x, factor)?;
            let carried = self.gate(m.skip_gates[l], skips[l])?;
            let cat = self.tape.concat_channels(carried, up)?;
            x = self.stage(&m.decoder[l], cat)?;
        }
        let logits = self.conv(&m.head, x)?;
        let gates = self
            .traces
            .into_iter()
            .map(|t| t.expect("every gate runs once per pass"))
            .collect();
        Ok((
            Forward {
                logits,
                gates,
                encoder: skips,
            },
            self.updates,
        ))
    }
}

impl Model {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn gates(&self) -> &[GateInfo] {
        &self.gates
    }

    /// Raw (unclipped) selection weights of gate `index`, if it selects.
    pub fn gate_weights(&self, index: usize) -> Option<&Tensor> {
        self.gates[index].select.map(|id| &self.params.get(id).value)
    }

    pub fn set_gate_weights(&mut self, index: usize, weights: Tensor) -> Result<()> {
        let id = self.gates[index]
            .select
            .ok_or_else(|| Error::invalid("set_gate_weights", "gate has no selection weights"))?;
        let name = self.params.get(id).name.clone();
        self.params.set(&name, weights)
    }

    pub fn gate_params(&self, index: usize) -> GateParams {
        let g = &self.gates[index];
        GateParams {
            variant: g.variant,
            spatial_rank: self.spec.spatial_rank,
            channels: g.channels,
            select_weights: g.select.map(|id| self.params.get(id).value.clone()),
            attend_kernel: g.attend.map(|id| self.params.get(id).value.clone()),
        }
    }

    /// Records a forward pass without touching the model. In training mode
    /// the refreshed batch-norm statistics are returned for
    /// [`Model::apply_updates`].
    pub fn run(&self, tape: &mut Tape, input: &Tensor, training: bool) -> Result<(Forward, Vec<StatUpdate>)> {
        self.spec.check_input(input.shape())?;
        let x = tape.leaf(input.clone());
        Run {
            model: self,
            tape,
            training,
            updates: Vec::new(),
            traces: vec![None; self.gates.len()],
        }
        .forward(x)
    }

    pub fn apply_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            for (id, vals) in [u.mean, u.var] {
                self.params.get_mut(id).value.data_mut().copy_from_slice(&vals);
            }
        }
    }

    /// Forward pass; training mode also refreshes running statistics.
    pub fn forward(&mut self, tape: &mut Tape, input: &Tensor, training: bool) -> Result<Forward> {
        let (fwd, updates) = self.run(tape, input, training)?;
        self.apply_updates(updates);
        Ok(fwd)
    }

    /// Inference-mode logits.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (fwd, _) = self.run(&mut tape, input, false)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(layer, count)` in registration order; a layer is a parameter name
    /// without its last component.
    pub per_layer: Vec<(String, usize)>,
}

/// Trainable parameter count. Batch-norm running statistics are state, not
/// parameters, and are excluded.
pub fn count_params(model: &Model) -> ParamCount {
    let mut per_layer: Vec<(String, usize)> = Vec::new();
    for p in model.params.trainable() {
        let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
        match per_layer.last_mut() {
            Some((name, n)) if name == layer => *n += p.value.len(),
            _ => per_layer.push((layer.to_string(), p.value.len())),
        }
    }
    ParamCount {
        total: per_layer.iter().map(|(_, n)| n).sum(),
        per_layer,
    }
}
