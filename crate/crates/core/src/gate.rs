//! Select-attend-transfer skip-connection gates.
//!
//! A gate re-weights the channels of an encoder feature map with clipped
//! learnable weights (select), folds the result into a single map with a
//! `1x..x1` convolution followed by a sigmoid (attend), and hands that map
//! to the decoder (transfer). `St` and `At` drop the attend and select
//! halves respectively; `Org` is the plain skip connection.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::glorot_uniform;
use crate::nn::{trelu_scalar, ConvSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateVariant {
    Org,
    St,
    At,
    Sat,
}

impl GateVariant {
    pub const ALL: [GateVariant; 4] = [GateVariant::Org, GateVariant::St, GateVariant::At, GateVariant::Sat];

    pub fn has_selection(self) -> bool {
        matches!(self, GateVariant::St | GateVariant::Sat)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, GateVariant::At | GateVariant::Sat)
    }

    /// Channels the gate hands to the decoder for a `channels`-wide input.
    pub fn transferred_channels(self, channels: usize) -> usize {
        if self.has_attention() {
            1
        } else {
            channels
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GateVariant::Org => "org",
            GateVariant::St => "st",
            GateVariant::At => "at",
            GateVariant::Sat => "sat",
        }
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "org" => Ok(GateVariant::Org),
            "st" => Ok(GateVariant::St),
            "at" => Ok(GateVariant::At),
            "sat" => Ok(GateVariant::Sat),
            other => Err(Error::invalid("gate_variant", format!("unknown variant {other:?}"))),
        }
    }
}

/// Shape of an attend kernel for `channels` inputs: `[1, 1, (1,) C, 1]`.
pub fn attend_kernel_shape(spatial_rank: usize, channels: usize) -> Vec<usize> {
    let mut s = alloc::vec![1; spatial_rank];
    s.push(channels);
    s.push(1);
    s
}

fn attend_spec(spatial_rank: usize, channels: usize) -> ConvSpec {
    ConvSpec::same(spatial_rank, 1, channels, 1).with_bias(false)
}

/// Learnable state of one gate. Which halves are present depends on the
/// variant.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub variant: GateVariant,
    pub spatial_rank: usize,
    pub channels: usize,
    pub select_weights: Option<Tensor>,
    pub attend_kernel: Option<Tensor>,
}

impl GateParams {
    /// Selection weights start at one, the attend kernel is Glorot uniform
    /// with `fan_in = C` and `fan_out = 1`.
    pub fn init<R: Rng + ?Sized>(variant: GateVariant, spatial_rank: usize, channels: usize, rng: &mut R) -> Self {
        GateParams {
            variant,
            spatial_rank,
            channels,
            select_weights: variant.has_selection().then(|| Tensor::ones(&[channels])),
            attend_kernel: variant
                .has_attention()
                .then(|| glorot_uniform(channels, 1, &attend_kernel_shape(spatial_rank, channels), rng)),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.select_weights.as_ref().map_or(0, Tensor::len) + self.attend_kernel.as_ref().map_or(0, Tensor::len)
    }

    /// Binds the parameters under `prefix` and runs the gate on `f`.
    pub fn apply(&self, tape: &mut Tape, prefix: &str, f: Var) -> Result<GateOutput> {
        let w = self
            .select_weights
            .as_ref()
            .map(|t| tape.param(&format!("{prefix}.select"), t, true));
        let k = self
            .attend_kernel
            .as_ref()
            .map(|t| tape.param(&format!("{prefix}.attend"), t, true));
        gate_forward(tape, f, self.variant, w, k)
    }
}

/// Nodes produced by one gate application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateOutput {
    pub transferred: Var,
    pub selected: Var,
    pub attention: Option<Var>,
}

/// `f_s[.., t, ..] = f[.., t, ..] * trelu(W_t)`.
pub fn select(tape: &mut Tape, f: Var, weights: Var) -> Result<Var> {
    let c = tape.value(f).channels();
    if tape.shape(weights).len() != 1 || c != Some(tape.shape(weights)[0]) {
        return Err(Error::shapes("select", tape.shape(f), tape.shape(weights)));
    }
    let clipped = tape.trelu(weights)?;
    tape.mul(f, clipped)
}

/// `sigmoid(K * f_s)` with a bias-free `1x..x1` convolution down to one
/// channel.
pub fn attend(tape: &mut Tape, selected: Var, kernel: Var) -> Result<Var> {
    let layout = tape.value(selected).layout("attend")?;
    let expect = attend_kernel_shape(layout.rank, layout.channels);
    if tape.shape(kernel) != expect.as_slice() {
        return Err(Error::shapes("attend", tape.shape(selected), tape.shape(kernel)));
    }
    let u = tape.conv(selected, kernel, None, &attend_spec(layout.rank, layout.channels))?;
    tape.sigmoid(u)
}

pub fn gate_forward(
    tape: &mut Tape,
    f: Var,
    variant: GateVariant,
    weights: Option<Var>,
    kernel: Option<Var>,
) -> Result<GateOutput> {
    let missing = |what: &str| Error::invalid("gate_forward", format!("{variant} gate needs {what}"));
    let selected = if variant.has_selection() {
        select(tape, f, weights.ok_or_else(|| missing("selection weights"))?)?
    } else {
        f
    };
    let attention = if variant.has_attention() {
        Some(attend(tape, selected, kernel.ok_or_else(|| missing("an attend kernel"))?)?)
    } else {
        None
    };
    Ok(GateOutput {
        transferred: attention.unwrap_or(selected),
        selected,
        attention,
    })
}

/// Fraction of channels whose clipped weight is at most `tol`.
pub fn channels_off(weights: &[f64], tol: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("channels_off", "empty weight vector"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("channels_off", "tolerance must be nonnegative"));
    }
    let off = weights.iter().filter(|&&w| trelu_scalar(w) <= tol).count();
    Ok(off as f64 / weights.len() as f64)
}
