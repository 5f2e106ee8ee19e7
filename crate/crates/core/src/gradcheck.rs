//! Finite-difference gradient checks for every differentiable op and for
//! whole networks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{compensated_sum, finite_diff_vjp, GradError, Tape, Var};
use crate::error::{Error, Result};
use crate::gate::{attend, gate_forward, select, GateVariant};
use crate::init::stream;
use crate::networks::{build_model, ArchSpec, Family, Model};
use crate::nn::{BatchNormConfig, ConvSpec};
use crate::tensor::Tensor;
use crate::train::dice_loss_var;

/// Central-difference step.
pub const EPS: f64 = 1e-6;
/// Minimum distance from any kink at the evaluation point.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: u64 = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: GradError,
    /// Gradient entries compared.
    pub checked: usize,
    pub kink_margin: f64,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.error.passes() && self.kink_margin >= KINK_MARGIN
    }
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
type Sample = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

struct OpCase {
    name: &'static str,
    sample: Sample,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn bits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect())
}

fn u(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Tensor {
    move |rng| uniform(rng, shape, -1.0, 1.0)
}

const MAP2: &[usize] = &[4, 4, 3, 2];
const MAP3: &[usize] = &[4, 2, 4, 2, 2];
const CH3: &[usize] = &[3];

fn bn_build(tape: &mut Tape, v: &[Var], training: bool) -> Result<Var> {
    let c = tape.shape(v[1])[0];
    let mut mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
    let mut var: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
    tape.batchnorm(v[0], v[1], v[2], &mut mean, &mut var, BatchNormConfig::default(), training)
}

fn gate_case(tape: &mut Tape, v: &[Var], variant: GateVariant) -> Result<Var> {
    let w = variant.has_selection().then_some(v[1]);
    let k = variant.has_attention().then_some(v[2]);
    Ok(gate_forward(tape, v[0], variant, w, k)?.transferred)
}

fn gate_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    // selection weights straddle both clamp points
    vec![u(MAP2)(rng), uniform(rng, CH3, -0.5, 1.5), uniform(rng, &[1, 1, 3, 1], -1.0, 1.0)]
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", sample: |r| vec![u(MAP2)(r), u(MAP2)(r)], build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", sample: |r| vec![u(MAP2)(r), u(MAP2)(r)], build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", sample: |r| vec![u(MAP2)(r), u(MAP2)(r)], build: |t, v| t.mul(v[0], v[1]) },
        OpCase {
            name: "div",
            sample: |r| vec![u(MAP2)(r), uniform(r, MAP2, 0.5, 2.0)],
            build: |t, v| t.div(v[0], v[1]),
        },
        OpCase { name: "add_channel", sample: |r| vec![u(MAP2)(r), u(CH3)(r)], build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub_channel", sample: |r| vec![u(MAP2)(r), u(CH3)(r)], build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul_channel", sample: |r| vec![u(MAP2)(r), u(CH3)(r)], build: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "scale", sample: |r| vec![u(MAP2)(r)], build: |t, v| t.scale(v[0], -1.75) },
        OpCase { name: "add_scalar", sample: |r| vec![u(MAP2)(r)], build: |t, v| t.add_scalar(v[0], 0.3) },
        OpCase { name: "sum", sample: |r| vec![u(MAP2)(r)], build: |t, v| t.sum(v[0]) },
        OpCase { name: "mean", sample: |r| vec![u(MAP2)(r)], build: |t, v| t.mean(v[0]) },
        OpCase { name: "relu", sample: |r| vec![u(MAP2)(r)], build: |t, v| t.relu(v[0]) },
        OpCase {
            name: "trelu",
            sample: |r| vec![uniform(r, MAP2, -0.5, 1.5)],
            build: |t, v| t.trelu(v[0]),
        },
        OpCase {
            name: "sigmoid",
            sample: |r| vec![uniform(r, MAP2, -4.0, 4.0)],
            build: |t, v| t.sigmoid(v[0]),
        },
        OpCase {
            name: "conv2d",
            sample: |r| vec![u(&[5, 4, 2, 2])(r), u(&[3, 3, 2, 3])(r), u(CH3)(r)],
            build: |t, v| t.conv(v[0], v[1], Some(v[2]), &ConvSpec::same(2, 3, 2, 3)),
        },
        OpCase {
            name: "conv2d_strided",
            sample: |r| vec![u(&[5, 6, 2, 2])(r), u(&[3, 3, 2, 3])(r)],
            build: |t, v| {
                let spec = ConvSpec::same(2, 3, 2, 3).with_bias(false).with_stride([2, 2, 1]);
                t.conv(v[0], v[1], None, &spec)
            },
        },
        OpCase {
            name: "conv3d",
            sample: |r| vec![u(&[3, 4, 3, 2, 2])(r), u(&[3, 3, 3, 2, 2])(r), u(&[2])(r)],
            build: |t, v| t.conv(v[0], v[1], Some(v[2]), &ConvSpec::same(3, 3, 2, 2)),
        },
        OpCase {
            name: "batchnorm_train",
            sample: |r| vec![uniform(r, MAP2, -2.0, 2.0), uniform(r, CH3, 0.5, 1.5), u(CH3)(r)],
            build: |t, v| bn_build(t, v, true),
        },
        OpCase {
            name: "batchnorm_infer",
            sample: |r| vec![uniform(r, MAP2, -2.0, 2.0), uniform(r, CH3, 0.5, 1.5), u(CH3)(r)],
            build: |t, v| bn_build(t, v, false),
        },
        OpCase { name: "maxpool2d", sample: |r| vec![u(MAP2)(r)], build: |t, v| t.maxpool(v[0], &[2, 2]) },
        OpCase { name: "maxpool3d", sample: |r| vec![u(MAP3)(r)], build: |t, v| t.maxpool(v[0], &[2, 2, 2]) },
        OpCase {
            name: "upsample2d",
            sample: |r| vec![u(&[2, 3, 2, 2])(r)],
            build: |t, v| t.upsample_nearest(v[0], &[2, 2]),
        },
        OpCase {
            name: "upsample3d",
            sample: |r| vec![u(&[2, 1, 2, 2, 1])(r)],
            build: |t, v| t.upsample_nearest(v[0], &[2, 2, 2]),
        },
        OpCase {
            name: "concat_channels",
            sample: |r| vec![u(MAP2)(r), u(&[4, 4, 2, 2])(r)],
            build: |t, v| t.concat_channels(v[0], v[1]),
        },
        OpCase { name: "slice_channels", sample: |r| vec![u(MAP2)(r)], build: |t, v| t.slice_channels(v[0], 1, 2) },
        OpCase {
            name: "bce_loss",
            sample: |r| vec![uniform(r, MAP2, -3.0, 3.0), bits(r, MAP2)],
            build: |t, v| {
                let target = t.value(v[1]).clone();
                t.bce_with_logits(v[0], &target)
            },
        },
        OpCase {
            name: "dice_loss",
            sample: |r| vec![uniform(r, MAP2, -3.0, 3.0), bits(r, MAP2)],
            build: |t, v| {
                let target = t.value(v[1]).clone();
                dice_loss_var(t, v[0], &target)
            },
        },
        OpCase {
            name: "select",
            sample: gate_inputs,
            build: |t, v| select(t, v[0], v[1]),
        },
        OpCase {
            name: "attend",
            sample: gate_inputs,
            build: |t, v| attend(t, v[0], v[2]),
        },
        OpCase { name: "gate_org", sample: gate_inputs, build: |t, v| gate_case(t, v, GateVariant::Org) },
        OpCase { name: "gate_st", sample: gate_inputs, build: |t, v| gate_case(t, v, GateVariant::St) },
        OpCase { name: "gate_at", sample: gate_inputs, build: |t, v| gate_case(t, v, GateVariant::At) },
        OpCase { name: "gate_sat", sample: gate_inputs, build: |t, v| gate_case(t, v, GateVariant::Sat) },
    ]
}

/// Names accepted by [`check_op`].
pub fn op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Inputs that only steer the op (loss targets) are held fixed.
fn is_constant(case: &str, index: usize) -> bool {
    matches!(case, "bce_loss" | "dice_loss") && index == 1
}

/// `sum(y * r)`: a fixed random projection turns any output into a scalar
/// whose gradient exercises every output element.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.leaf(r.clone());
    let yr = tape.mul(y, rv)?;
    tape.sum(yr)
}

fn eval_case(case: &OpCase, inputs: &[Tensor], r: Option<&Tensor>, precise: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = if precise { Tape::precise() } else { Tape::new() };
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = (case.build)(&mut tape, &vars)?;
    let loss = match r {
        Some(r) => project(&mut tape, y, r)?,
        None => y,
    };
    Ok((tape, vars, loss))
}

/// Independent samples drawn for every op check.
pub const OP_TRIALS: u64 = 20;

fn kink_free_sample(case: &OpCase, seed: u64, trial: u64) -> Result<(Vec<Tensor>, Tensor, f64)> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream(seed, 0x6c0c_0000 + (trial << 32) + attempt);
        let inputs = (case.sample)(&mut rng);
        let (tape, _, y) = eval_case(case, &inputs, None, false)?;
        let margin = tape.kink_margin();
        if margin >= KINK_MARGIN {
            let shape = tape.shape(y).to_vec();
            let r = uniform(&mut rng, &shape, -1.0, 1.0);
            return Ok((inputs, r, margin));
        }
    }
    Err(Error::invalid("gradcheck", format!("{}: no kink-free sample", case.name)))
}

fn check_case(case: &OpCase, seed: u64) -> Result<CheckResult> {
    let mut error = GradError::default();
    let mut checked = 0;
    let mut min_margin = f64::INFINITY;
    for trial in 0..OP_TRIALS {
        let (inputs, r, margin) = kink_free_sample(case, seed, trial)?;
        min_margin = min_margin.min(margin);
        let (tape, vars, loss) = eval_case(case, &inputs, Some(&r), false)?;
        let grads = tape.backward(loss)?;
        for (i, x) in inputs.iter().enumerate() {
            if is_constant(case.name, i) {
                continue;
            }
            let analytic = grads.wrt_or_zeros(&tape, vars[i]);
            let numeric = finite_diff_vjp(
                |probe| {
                    let mut xs = inputs.clone();
                    xs[i] = probe.clone();
                    let (t, _, y) = eval_case(case, &xs, None, true)?;
                    Ok(t.value(y).clone())
                },
                x,
                &r,
                EPS,
            )?;
            error = error.merge(GradError::measure(&analytic, &numeric));
            checked += x.len();
        }
    }
    Ok(CheckResult {
        name: case.name.to_string(),
        error,
        checked,
        kink_margin: min_margin,
    })
}

pub fn check_op(name: &str, seed: u64) -> Result<CheckResult> {
    let case = op_cases()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::invalid("gradcheck", format!("unknown op {name:?}")))?;
    check_case(&case, seed)
}

/// Which gradient entries of each parameter to compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// Up to this many entries per parameter tensor, spread evenly.
    PerTensor(usize),
}

/// How a whole network is exercised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkCheck {
    pub coverage: Coverage,
    /// Batch statistics (`true`) or randomized running statistics.
    pub training: bool,
    /// Spatial extent per axis; the batch is always 2.
    pub extent: usize,
}

impl NetworkCheck {
    /// Every entry on an 8x8 input, batch norm from running statistics.
    pub const EXHAUSTIVE: NetworkCheck = NetworkCheck {
        coverage: Coverage::All,
        training: false,
        extent: 8,
    };
    /// Two entries per tensor on an 8x8 input in training mode.
    pub const SAMPLED: NetworkCheck = NetworkCheck {
        coverage: Coverage::PerTensor(2),
        training: true,
        extent: 8,
    };
}

/// `mean(logits * r)` for a fixed random `r`.
fn network_loss(model: &Model, input: &Tensor, r: Option<&Tensor>, training: bool, precise: bool) -> Result<(Tape, Var)> {
    let mut tape = if precise { Tape::precise() } else { Tape::new() };
    let (fwd, _) = model.run(&mut tape, input, training)?;
    let loss = match r {
        Some(r) => {
            let rv = tape.leaf(r.clone());
            let yr = tape.mul(fwd.logits, rv)?;
            tape.mean(yr)?
        }
        None => fwd.logits,
    };
    Ok((tape, loss))
}

/// Spreads selection weights across both clamp points and sets running
/// statistics near the batch statistics of `input`, so inference-mode
/// activations are normalized as in a trained model.
fn randomize_state(model: &mut Model, input: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
    for g in 0..model.gates().len() {
        if let Some(w) = model.gate_weights(g) {
            let w = uniform(rng, w.shape(), -0.5, 1.5);
            model.set_gate_weights(g, w)?;
        }
    }
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in &names {
        let zero = model.params().by_name(name).expect("listed").value.zeros_like();
        model.params_mut().set(name, zero)?;
    }
    // from zero, one momentum-0.9 refresh leaves a tenth of the batch statistics
    let (_, updates) = model.run(&mut Tape::new(), input, true)?;
    model.apply_updates(updates);
    for mean_name in names.iter().filter(|n| n.ends_with("running_mean")) {
        let var_name = mean_name.replace("running_mean", "running_var");
        let var = model.params().by_name(&var_name).expect("paired").value.clone();
        let mean = model.params().by_name(mean_name).expect("paired").value.clone();
        let var: Vec<f64> = var.data().iter().map(|v| 10.0 * v).collect();
        let mean: Vec<f64> = mean
            .data()
            .iter()
            .zip(&var)
            .map(|(m, v)| 10.0 * m + rng.random_range(-0.2..0.2) * libm::sqrt(*v))
            .collect();
        let var: Vec<f64> = var.iter().map(|v| v * rng.random_range(0.7..1.4)).collect();
        let c = var.len();
        model.params_mut().set(mean_name, Tensor::from_parts(vec![c], mean))?;
        model.params_mut().set(&var_name, Tensor::from_parts(vec![c], var))?;
    }
    Ok(())
}

/// Builds a model from `seed`, spreads the selection weights across both
/// clamp points, and compares analytic parameter gradients of
/// `mean(logits * r)` with central differences. Batch norm never updates
/// its running statistics here.
pub fn check_network(spec: &ArchSpec, seed: u64, how: NetworkCheck) -> Result<CheckResult> {
    let extent = how.extent.max(spec.divisor());
    let mut shape = vec![extent; spec.spatial_rank];
    shape.extend([spec.in_channels, 2]);
    let mut chosen = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream(seed, 0x6e37_0000 + attempt);
        let mut model = build_model(spec, rng.random())?;
        let input = uniform(&mut rng, &shape, -1.0, 1.0);
        randomize_state(&mut model, &input, &mut rng)?;
        let (tape, y) = network_loss(&model, &input, None, how.training, false)?;
        let margin = tape.kink_margin();
        if margin >= KINK_MARGIN {
            let r = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
            chosen = Some((model, input, r, margin));
            break;
        }
    }
    let mode = if how.training { "train" } else { "infer" };
    let name = format!("network.{}.{}", spec.family, spec.gate_variant);
    let (mut model, input, r, margin) =
        chosen.ok_or_else(|| Error::invalid("gradcheck", format!("{name} ({mode}): no kink-free sample")))?;
    let (tape, loss) = network_loss(&model, &input, Some(&r), how.training, false)?;
    let grads = tape.backward(loss)?.params(&tape);
    let mut error = GradError::default();
    let mut checked = 0;
    for (pname, analytic) in &grads {
        let n = analytic.len();
        let entries: Vec<usize> = match how.coverage {
            Coverage::All => (0..n).collect(),
            Coverage::PerTensor(k) if k >= n => (0..n).collect(),
            Coverage::PerTensor(k) => (0..k).map(|j| j * n / k + (n / k) / 2).collect(),
        };
        let mut a = Vec::with_capacity(entries.len());
        let mut num = Vec::with_capacity(entries.len());
        for &i in &entries {
            let orig = model.params().by_name(pname).expect("bound parameter").value.data()[i];
            let at = |v: f64, model: &mut Model| -> Result<Tensor> {
                model.params_mut().value_mut(pname).expect("bound parameter").data_mut()[i] = v;
                let (t, y) = network_loss(model, &input, None, how.training, true)?;
                Ok(t.value(y).clone())
            };
            let hi = at(orig + EPS, &mut model)?;
            let lo = at(orig - EPS, &mut model)?;
            model.params_mut().value_mut(pname).expect("bound parameter").data_mut()[i] = orig;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(Error::NonFinite("check_network"));
            }
            // same projection as the loss, applied to the output difference
            let d = compensated_sum(hi.data().iter().zip(lo.data()).zip(r.data()).map(|((h, l), w)| (h - l) * w));
            a.push(analytic.data()[i]);
            num.push(d / r.len() as f64 / (2.0 * EPS));
        }
        let k = a.len();
        error = error.merge(GradError::measure(
            &Tensor::from_parts(vec![k], a),
            &Tensor::from_parts(vec![k], num),
        ));
        checked += k;
    }
    Ok(CheckResult {
        name,
        error,
        checked,
        kink_margin: margin,
    })
}

/// Name of the exhaustive network check in [`run_suite`].
pub const FULL_NETWORK: &str = "network.unet.sat";

/// Every op, the exhaustive mini-unet-SAT check, and sampled
/// training-mode checks for every family and variant. `filter` keeps
/// checks whose name equals it or starts with it followed by a dot.
pub fn run_suite(seed: u64, filter: Option<&str>) -> Result<Vec<CheckResult>> {
    let keep = |name: &str| match filter {
        None => true,
        Some(f) => name == f || name.strip_prefix(f).is_some_and(|rest| rest.starts_with('.')),
    };
    let mut out = Vec::new();
    for case in op_cases() {
        if keep(case.name) {
            out.push(check_case(&case, seed)?);
        }
    }
    let unet_sat = ArchSpec::reference(Family::Unet).with_variant(GateVariant::Sat);
    if keep(FULL_NETWORK) {
        out.push(check_network(&unet_sat, seed, NetworkCheck::EXHAUSTIVE)?);
    }
    for family in Family::ALL {
        for variant in GateVariant::ALL {
            let name = format!("network.{family}.{variant}.sampled");
            if keep(&name) {
                let spec = ArchSpec::reference(family).with_variant(variant);
                let r = check_network(&spec, seed, NetworkCheck::SAMPLED)?;
                out.push(CheckResult { name, ..r });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("gradcheck", format!("no check matches {:?}", filter.unwrap_or(""))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for name in op_names() {
            let r = check_op(name, 7).unwrap();
            assert!(r.passes(), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn filter_matching() {
        assert!(run_suite(0, Some("nonexistent")).is_err());
        let r = run_suite(0, Some("mul")).unwrap();
        assert_eq!(r.len(), 1);
    }
}
