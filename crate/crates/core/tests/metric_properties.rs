use proptest::prelude::*;

use satskip_core::metrics::{dice_fpr_fnr, sparsity_report, weight_histogram};
use satskip_core::nn::{concat_channels, trelu_scalar};
use satskip_core::train::{dice_loss, loss_var, LossKind};
use satskip_core::{build_model, channels_off, tensor_from, ArchSpec, Family, GateVariant, Tape, Tensor};

fn mask(bits: &[bool]) -> Tensor {
    let v: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    tensor_from(&[v.len()], &v).unwrap()
}

fn flip(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 - v)
}

proptest! {
    #[test]
    fn metric_ranges_and_symmetry(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..64)) {
        let p = mask(&pairs.iter().map(|x| x.0).collect::<Vec<_>>());
        let g = mask(&pairs.iter().map(|x| x.1).collect::<Vec<_>>());
        let m = dice_fpr_fnr(&p, &g).unwrap();
        for v in [m.dice, m.fpr, m.fnr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.dice, dice_fpr_fnr(&g, &p).unwrap().dice);
        let c = dice_fpr_fnr(&flip(&p), &flip(&g)).unwrap();
        prop_assert_eq!(m.fpr, c.fnr);
        prop_assert_eq!(m.fnr, c.fpr);
    }

    #[test]
    fn dice_loss_is_bounded(logits in prop::collection::vec(-30.0f64..30.0, 16), t in prop::collection::vec(any::<bool>(), 16)) {
        let x = tensor_from(&[2, 2, 1, 4], &logits).unwrap();
        let y = tensor_from(&[2, 2, 1, 4], &t.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>()).unwrap();
        let l = dice_loss(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn concat_then_slice_is_lossless(a in prop::collection::vec(-2.0f64..2.0, 12), b in prop::collection::vec(-2.0f64..2.0, 18)) {
        let a = tensor_from(&[3, 2, 2, 1], &a).unwrap();
        let b = tensor_from(&[3, 2, 3, 1], &b).unwrap();
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let cat = tape.concat_channels(av, bv).unwrap();
        prop_assert_eq!(tape.value(cat), &concat_channels(&a, &b).unwrap());
        let ra = tape.slice_channels(cat, 0, 2).unwrap();
        let rb = tape.slice_channels(cat, 2, 3).unwrap();
        prop_assert_eq!(tape.value(ra), &a);
        prop_assert_eq!(tape.value(rb), &b);
    }

    #[test]
    fn histogram_counts_every_weight(w in prop::collection::vec(-2.0f64..3.0, 1..40)) {
        let h = weight_histogram(&w);
        prop_assert_eq!(h.iter().sum::<usize>(), w.len());
        let zeros = w.iter().filter(|&&x| trelu_scalar(x) == 0.0).count();
        prop_assert!(h[0] >= zeros);
        prop_assert_eq!(channels_off(&w, 0.0).unwrap(), zeros as f64 / w.len() as f64);
    }
}

#[test]
fn confident_match_drives_dice_loss_to_zero() {
    let y = tensor_from(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut last = f64::INFINITY;
    for scale in [1.0, 5.0, 20.0, 40.0] {
        let l = dice_loss(&y.map(|t| scale * (2.0 * t - 1.0)), &y).unwrap();
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-12);
}

#[test]
fn shapes_are_never_coerced() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 2, 1, 1]));
    let b = tape.leaf(Tensor::zeros(&[4, 1, 1, 1]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.concat_channels(a, b).is_err());
    assert!(tape.slice_channels(a, 0, 2).is_err());
    assert!(loss_var(LossKind::Dice, &mut tape, a, &Tensor::zeros(&[4])).is_err());
    assert!(loss_var(LossKind::Bce, &mut tape, a, &Tensor::zeros(&[2, 2, 1, 2])).is_err());
}

#[test]
fn sparsity_matches_brute_force() {
    let spec = ArchSpec::reference(Family::Unet).with_variant(GateVariant::Sat);
    let mut model = build_model(&spec, 0).unwrap();
    for g in sparsity_report(&model).unwrap() {
        assert_eq!(g.off_fraction, 0.0);
        assert_eq!(g.histogram[9], g.channels);
    }
    let c = model.gates()[0].channels;
    let half: Vec<f64> = (0..c).map(|i| if i % 2 == 0 { 0.0 } else { 0.8 }).collect();
    model.set_gate_weights(0, tensor_from(&[c], &half).unwrap()).unwrap();
    let c1 = model.gates()[1].channels;
    let mixed: Vec<f64> = (0..c1).map(|i| [-1.0, 0.0, 0.5, 1e-12, 2.0][i % 5]).collect();
    model.set_gate_weights(1, tensor_from(&[c1], &mixed).unwrap()).unwrap();
    let report = sparsity_report(&model).unwrap();
    assert_eq!(report[0].off_fraction, 0.5);
    let brute = mixed.iter().filter(|&&w| w <= 0.0).count() as f64 / c1 as f64;
    assert_eq!(report[1].off_fraction, brute);
    for r in &report {
        assert_eq!(r.histogram.iter().sum::<usize>(), r.channels);
    }
    let org = build_model(&spec.with_variant(GateVariant::Org), 0).unwrap();
    assert!(sparsity_report(&org).is_err());
    let at = build_model(&spec.with_variant(GateVariant::At), 0).unwrap();
    assert!(sparsity_report(&at).is_err());
}
