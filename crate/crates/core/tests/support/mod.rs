//! Closed-form parameter counts, derived from the layer recipe of each
//! family without going through the model builder.

use satskip_core::{ArchSpec, Family, GateVariant};

/// conv (kernel + bias) followed by batch norm (gamma + beta).
fn unit(taps: usize, cin: usize, cout: usize) -> usize {
    taps * cin * cout + cout + 2 * cout
}

fn transferred(v: GateVariant, c: usize) -> usize {
    if matches!(v, GateVariant::At | GateVariant::Sat) {
        1
    } else {
        c
    }
}

fn gate(v: GateVariant, c: usize) -> usize {
    let sel = if matches!(v, GateVariant::St | GateVariant::Sat) { c } else { 0 };
    let att = if matches!(v, GateVariant::At | GateVariant::Sat) { c } else { 0 };
    sel + att
}

/// Closed-form trainable parameter count, plus the summed channel width
/// of all gates.
pub fn closed_form(s: &ArchSpec) -> (usize, usize) {
    let t = 3usize.pow(s.spatial_rank as u32);
    let v = s.gate_variant;
    let levels = s.depth - 1;
    let ch = |l: usize| s.base_channels * s.channel_growth.pow(l as u32);
    let mut total = 0;
    let mut gated = 0;
    match s.family {
        Family::Unet | Family::Vnet => {
            let mut cin = s.in_channels;
            for l in 0..levels {
                total += unit(t, cin, ch(l)) + unit(t, ch(l), ch(l));
                total += gate(v, ch(l));
                gated += ch(l);
                cin = ch(l);
            }
            total += unit(t, cin, ch(levels)) + unit(t, ch(levels), ch(levels));
            for l in 0..levels {
                total += unit(t, transferred(v, ch(l)) + ch(l + 1), ch(l)) + unit(t, ch(l), ch(l));
            }
            total += ch(0) * s.out_classes + s.out_classes;
        }
        Family::Tiramisu => {
            let n = s.dense_block_layers;
            let dense = |cin: usize, k: usize| (0..n).map(|j| unit(t, cin + j * k, k)).sum::<usize>();
            total += unit(t, s.in_channels, s.base_channels);
            let mut w = s.base_channels;
            let mut skips = Vec::new();
            for l in 0..levels {
                total += dense(w, ch(l)) + gate(v, w);
                gated += w;
                let out = n * ch(l) + transferred(v, w);
                total += unit(1, out, out);
                skips.push(out);
                w = out;
            }
            total += dense(w, ch(levels));
            w = n * ch(levels);
            for l in (0..levels).rev() {
                total += dense(transferred(v, skips[l]) + w, ch(l));
                w = n * ch(l);
            }
            for &c in &skips {
                total += gate(v, c);
                gated += c;
            }
            total += w * s.out_classes + s.out_classes;
        }
    }
    (total, gated)
}

