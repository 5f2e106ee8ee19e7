use satskip_core::data::{generate_synthetic, stack_samples, SegSample, SyntheticSpec};
use satskip_core::train::{epoch_order, train, LossKind, OptimizerKind, TrainConfig, Trainer};
use satskip_core::{build_model, ArchSpec, Family, GateVariant, Model, Tape};

fn data(n: usize, extent: usize, seed: u64) -> Vec<SegSample> {
    generate_synthetic(&SyntheticSpec {
        n_samples: n,
        extent,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn model(variant: GateVariant, seed: u64) -> Model {
    build_model(&ArchSpec::reference(Family::Unet).with_variant(variant), seed).unwrap()
}

fn param_bits(m: &Model) -> Vec<(String, Vec<u64>)> {
    m.params()
        .iter()
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn adadelta_reduces_dice_loss() {
    let samples = data(64, 16, 9);
    let mut gains = Vec::new();
    for seed in 0..5 {
        let mut m = model(GateVariant::Sat, seed);
        let mut t = Trainer::new(TrainConfig { seed, ..Default::default() }).unwrap();
        let mut losses = Vec::new();
        for step in 0..50 {
            let order = epoch_order(seed, 1 + step / 8, samples.len());
            let idx = &order[(step % 8) * 8..(step % 8) * 8 + 8];
            let refs: Vec<&SegSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (x, y) = stack_samples(&refs).unwrap();
            losses.push(t.step(&mut m, &x, &y).unwrap());
        }
        let head = losses[..5].iter().sum::<f64>() / 5.0;
        let tail = losses[45..].iter().sum::<f64>() / 5.0;
        gains.push(head - tail);
    }
    gains.sort_by(f64::total_cmp);
    assert!(gains[2] > 0.0, "median loss change {gains:?}");
}

#[test]
fn training_is_deterministic_and_leaves_data_alone() {
    let samples = data(12, 16, 2);
    let snapshot = samples.clone();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut m = model(GateVariant::Sat, 1);
        let h = train(&mut m, &samples[..8], &samples[8..], &cfg).unwrap();
        (param_bits(&m), h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ha.records.len(), 2);
    assert_eq!(samples, snapshot);
}

#[test]
fn one_epoch_on_four_samples() {
    for family in Family::ALL {
        for variant in GateVariant::ALL {
            let spec = ArchSpec::reference(family).with_variant(variant);
            let mut m = build_model(&spec, 0).unwrap();
            let samples = data(4, 8, 3);
            for (loss, optimizer) in [(LossKind::Dice, OptimizerKind::Adadelta), (LossKind::Bce, OptimizerKind::SgdMomentum)] {
                let cfg = TrainConfig {
                    epochs: 1,
                    batch_size: 2,
                    loss,
                    optimizer,
                    ..Default::default()
                };
                let h = train(&mut m, &samples, &samples[..2], &cfg).unwrap();
                let r = &h.records[0];
                assert!(r.train_loss.is_finite());
                assert!(r.val_dice.is_some_and(|d| (0.0..=1.0).contains(&d)));
                assert_eq!(r.channels_off.len(), m.gates().len());
                assert_eq!(r.channels_off.iter().all(Option::is_some), variant.has_selection());
            }
        }
    }
}

#[test]
fn split_training_matches_uninterrupted() {
    let samples = data(10, 16, 4);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 8,
        ..Default::default()
    };
    let mut full = model(GateVariant::Sat, 0);
    let mut t = Trainer::new(cfg).unwrap();
    t.fit(&mut full, &samples, &[], 3).unwrap();

    let mut part = model(GateVariant::Sat, 0);
    let mut t1 = Trainer::new(cfg).unwrap();
    t1.fit(&mut part, &samples, &[], 1).unwrap();
    let mut t2 = Trainer::resume(cfg, t1.state().clone(), t1.epochs_done()).unwrap();
    t2.fit(&mut part, &samples, &[], 2).unwrap();
    assert_eq!(param_bits(&full), param_bits(&part));
    assert_eq!(t.state(), t2.state());
}

#[test]
fn gradients_are_bit_reproducible() {
    let samples = data(2, 8, 6);
    let refs: Vec<&SegSample> = samples.iter().collect();
    let (x, y) = stack_samples(&refs).unwrap();
    let m = model(GateVariant::Sat, 2);
    let grads = || {
        let mut tape = Tape::new();
        let (fwd, _) = m.run(&mut tape, &x, true).unwrap();
        let l = satskip_core::train::dice_loss_var(&mut tape, fwd.logits, &y).unwrap();
        tape.backward(l)
            .unwrap()
            .params(&tape)
            .into_iter()
            .map(|(k, v)| (k, v.data().iter().map(|g| g.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}

#[test]
fn divergence_is_reported() {
    let samples = data(4, 8, 1);
    let mut m = model(GateVariant::Org, 0);
    let mut cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        loss: LossKind::Bce,
        optimizer: OptimizerKind::SgdMomentum,
        ..Default::default()
    };
    cfg.sgd.lr = 1e150;
    let err = train(&mut m, &samples, &[], &cfg).unwrap_err();
    assert!(matches!(err, satskip_core::Error::Diverged { .. }), "{err}");
}
