//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use satskip::{checkpoint, tensorfile};
use satskip_core::data::{generate_synthetic, SyntheticSpec};
use satskip_core::gradcheck::run_suite;
use satskip_core::init::{glorot_limit, glorot_uniform, stream};
use satskip_core::metrics::{dice_fpr_fnr, evaluate, mean_std, sparsity_report};
use satskip_core::nn::trelu;
use satskip_core::train::{adadelta_step, train, AdadeltaConfig, AdadeltaSlot, TrainConfig, Trainer};
use satskip_core::{
    build_model, channels_off, concat_input_width, count_params, gate_forward, tensor_from, ArchSpec, Family,
    GateVariant, Model, Tape, Tensor,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Uniform draws on `[-sqrt(3), sqrt(3)]`.
fn random(shape: &[usize], seed: u64, label: u64) -> Tensor {
    glorot_uniform(1, 1, shape, &mut stream(seed, label))
}

fn gate_out(variant: GateVariant, f: &Tensor, w: Option<&Tensor>, k: &Tensor) -> Result<Tensor, String> {
    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let wv = w.map(|t| tape.leaf(t.clone()));
    let kv = tape.leaf(k.clone());
    let out = gate_forward(&mut tape, fv, variant, wv, Some(kv)).map_err(|e| e.to_string())?;
    Ok(tape.value(out.transferred).clone())
}

fn gate_math() -> Outcome {
    let start = Instant::now();
    let z = [-2.0, -0.5, 0.0, 0.3, 0.5, 1.0, 1.7, 100.0];
    let want = [0.0, 0.0, 0.0, 0.3, 0.5, 1.0, 1.0, 1.0];
    let got = trelu(&tensor_from(&[8], &z).unwrap());
    ensure!(got.data() == want, "trelu grid gave {:?}", got.data());
    let (c, shape) = (6, [6, 5, 6, 2]);
    for i in 0..20 {
        let f = random(&shape, 1, i);
        let k = random(&[1, 1, c, 1], 2, i);
        let sat = gate_out(GateVariant::Sat, &f, Some(&Tensor::ones(&[c])), &k)?;
        let at = gate_out(GateVariant::At, &f, None, &k)?;
        ensure!(bits(&sat) == bits(&at), "SAT with W=1 differs from AT on input {i}");

        let t = (i as usize) % c;
        let mut w = random(&[c], 3, i);
        w.data_mut()[t] = -0.25 * (i as f64);
        let mut g = f.clone();
        let noise = random(&shape, 4, i);
        for (j, v) in g.data_mut().iter_mut().enumerate() {
            if (j / 2) % c == t {
                *v = 50.0 * noise.data()[j];
            }
        }
        let a = gate_out(GateVariant::Sat, &f, Some(&w), &k)?;
        let b = gate_out(GateVariant::Sat, &g, Some(&w), &k)?;
        ensure!(bits(&a) == bits(&b), "masked channel {t} leaked into the output on input {i}");
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:.1?}");
    Ok(format!("trelu grid exact, 20/20 SAT==AT, 20/20 masking invariant, {took:.2?}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite(0, None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passes())
        .map(|r| format!("{} (rel {:.2e}, abs {:.2e}, margin {:.1e})", r.name, r.error.max_rel, r.error.max_abs_tiny, r.kink_margin))
        .collect();
    ensure!(failed.is_empty(), "failing checks: {}", failed.join(", "));
    let full = results
        .iter()
        .find(|r| r.name == "network.unet.sat")
        .ok_or("full network check missing")?;
    ensure!(took < Duration::from_secs(120), "took {took:.1?}");
    let worst = results.iter().map(|r| r.error.max_rel).fold(0.0, f64::max);
    Ok(format!(
        "{} checks, worst rel {worst:.2e} (< 1e-5); unet-sat 8x8 {} entries rel {:.2e}; {took:.1?}",
        results.len(),
        full.checked,
        full.error.max_rel
    ))
}

fn count(s: &ArchSpec) -> usize {
    count_params(&build_model(s, 0).unwrap()).total
}

fn parameter_accounting() -> Outcome {
    ensure!(concat_input_width(GateVariant::Org, 256, 256) == 512, "ORG concat width");
    ensure!(concat_input_width(GateVariant::Sat, 256, 256) == 257, "SAT concat width");
    let mut rows = Vec::new();
    for family in Family::ALL {
        let base = ArchSpec::reference(family);
        for v in GateVariant::ALL {
            let s = base.with_variant(v);
            let (got, want) = (count(&s), support::closed_form(&s).0);
            ensure!(got == want, "{family} {v}: counted {got}, closed form {want}");
        }
        let (org, sat) = (count(&base), count(&base.with_variant(GateVariant::Sat)));
        ensure!(sat < org, "{family}: SAT {sat} not below ORG {org}");
        rows.push(format!("{family} {org}->{sat}"));
    }
    Ok(format!("512/257 widths exact; closed form matches 12 specs; ORG->SAT {}", rows.join(", ")))
}

fn optimizer_and_init() -> Outcome {
    let cfg = AdadeltaConfig {
        lr: 1.0,
        rho: 0.95,
        eps: 1e-8,
        decay: 0.0,
    };
    let want = -(1e-8f64).sqrt() / (0.05f64 + 1e-8).sqrt();
    let mut p = Tensor::zeros(&[1]);
    let mut slot = AdadeltaSlot::zeros_like(&p);
    let dx = adadelta_step(&mut p, &Tensor::ones(&[1]), &mut slot, &cfg, 0).map_err(|e| e.to_string())?.data()[0];
    ensure!((dx - want).abs() < 1e-12, "dx {dx:e}, hand value {want:e}");
    ensure!((dx + 4.4721e-4).abs() < 1e-7, "dx {dx:e} far from -4.4721e-4");
    let (fi, fo) = (72, 144);
    let w = glorot_uniform(fi, fo, &[100_000], &mut stream(9, 9));
    let limit = glorot_limit(fi, fo);
    let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure!(max <= limit, "draw {max} exceeds {limit}");
    Ok(format!("dx = {dx:.6e} (|err| < 1e-12); 1e5 Glorot draws within ±{limit:.5}, max |w| {max:.5}"))
}

struct DeskRun {
    variant: GateVariant,
    seed: u64,
    dice: f64,
    params: usize,
    took: Duration,
    model: Model,
}

fn desk_scale(runs: &mut Vec<DeskRun>) -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        spatial_rank: 2,
        extent: 32,
        n_samples: 200,
        noise_sigma: 0.3,
        contrast: 1.0,
        seed: 0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (train_set, test_set) = data.split_at(160);
    let plan = [
        (GateVariant::Org, 0),
        (GateVariant::St, 0),
        (GateVariant::At, 0),
        (GateVariant::Sat, 0),
        (GateVariant::Org, 1),
        (GateVariant::Sat, 1),
        (GateVariant::Org, 2),
        (GateVariant::Sat, 2),
    ];
    for (variant, seed) in plan {
        let start = Instant::now();
        let spec = ArchSpec::reference(Family::Unet).with_variant(variant);
        let mut model = build_model(&spec, seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            ..Default::default()
        };
        train(&mut model, train_set, &[], &cfg).map_err(|e| format!("{variant} seed {seed}: {e}"))?;
        let scores = evaluate(&model, test_set, 8).map_err(|e| e.to_string())?;
        let dice = mean_std(&scores.iter().map(|m| m.dice).collect::<Vec<_>>()).0;
        runs.push(DeskRun {
            variant,
            seed,
            dice,
            params: count_params(&model).total,
            took: start.elapsed(),
            model,
        });
        println!("    {variant} seed {seed}: test dice {dice:.4} in {:.1?}", start.elapsed());
    }
    for r in runs.iter() {
        ensure!(r.dice >= 0.85, "{} seed {} reached dice {:.4}", r.variant, r.seed, r.dice);
        ensure!(r.took < Duration::from_secs(15 * 60), "{} seed {} took {:.1?}", r.variant, r.seed, r.took);
    }
    let mean_of = |v: GateVariant| {
        let d: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.dice).collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    let (org, sat) = (mean_of(GateVariant::Org), mean_of(GateVariant::Sat));
    ensure!((sat - org).abs() <= 0.05, "SAT mean {sat:.4} vs ORG mean {org:.4}");
    let params = |v: GateVariant| runs.iter().find(|r| r.variant == v).map(|r| r.params).unwrap_or(0);
    ensure!(params(GateVariant::Sat) < params(GateVariant::Org), "SAT does not use fewer parameters");
    let single: Vec<String> = runs.iter().filter(|r| r.seed == 0).map(|r| format!("{} {:.3}", r.variant, r.dice)).collect();
    Ok(format!(
        "{}; 3-seed mean ORG {org:.4} SAT {sat:.4}; params ORG {} SAT {}",
        single.join(", "),
        params(GateVariant::Org),
        params(GateVariant::Sat)
    ))
}

fn sparsity(runs: &[DeskRun]) -> Outcome {
    let spec = ArchSpec::reference(Family::Unet).with_variant(GateVariant::Sat);
    let mut model = build_model(&spec, 0).map_err(|e| e.to_string())?;
    for i in 0..model.gates().len() {
        let c = model.gates()[i].channels;
        let w = random(&[c], 5, i as u64);
        model.set_gate_weights(i, w.clone()).map_err(|e| e.to_string())?;
        let brute = w.data().iter().filter(|&&x| x.clamp(0.0, 1.0) == 0.0).count() as f64 / c as f64;
        let got = sparsity_report(&model).map_err(|e| e.to_string())?[i].off_fraction;
        ensure!(got == brute, "gate {i}: {got} vs brute force {brute}");
    }
    let c0 = model.gates()[0].channels;
    let half: Vec<f64> = (0..c0).map(|i| if i < c0 / 2 { 0.0 } else { 1.0 }).collect();
    model.set_gate_weights(0, tensor_from(&[c0], &half).unwrap()).unwrap();
    ensure!(sparsity_report(&model).unwrap()[0].off_fraction == 0.5, "half-zero gate");
    let trained = runs
        .iter()
        .find(|r| r.variant == GateVariant::Sat && r.seed == 0)
        .ok_or("no desk-scale SAT run")?;
    let report = sparsity_report(&trained.model).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for g in &report {
        ensure!((0.0..=1.0).contains(&g.off_fraction), "{} fraction {}", g.name, g.off_fraction);
        let w = trained.model.gate_weights(g.gate).unwrap();
        ensure!(g.off_fraction == channels_off(w.data(), 0.0).unwrap(), "{} disagrees with channels_off", g.name);
        parts.push(format!("{} {:.1}%", g.name, 100.0 * g.off_fraction));
    }
    Ok(format!("constructed cases exact; trained SAT channels off: {}", parts.join(", ")))
}

fn metric_oracle() -> Outcome {
    let v = |x: &[f64]| tensor_from(&[x.len()], x).unwrap();
    let m = dice_fpr_fnr(&v(&[1.0, 1.0, 0.0, 0.0]), &v(&[1.0, 0.0, 1.0, 0.0])).unwrap();
    ensure!((m.dice, m.fpr, m.fnr) == (0.5, 0.5, 0.5), "hand example gave {m:?}");
    let a = v(&[1.0, 0.0, 1.0, 1.0]);
    let m = dice_fpr_fnr(&a, &a).unwrap();
    ensure!((m.dice, m.fpr, m.fnr) == (1.0, 0.0, 0.0), "identity gave {m:?}");
    let m = dice_fpr_fnr(&a, &a.map(|x| 1.0 - x)).unwrap();
    ensure!(m.dice == 0.0, "disjoint dice {}", m.dice);
    Ok("(0.5, 0.5, 0.5), identity (1, 0, 0), disjoint dice 0".into())
}

fn satskip(args: &[&str], cwd: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_satskip"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() != Some(0) {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn persistence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = tmp.path();
    let t = random(&[3, 4], 6, 0);
    tensorfile::save_tensor(&p.join("t.satt"), &t).map_err(|e| e.to_string())?;
    let back = tensorfile::load_tensor(&p.join("t.satt")).map_err(|e| e.to_string())?;
    ensure!(back.shape() == t.shape() && bits(&back) == bits(&t), "tensor file roundtrip");

    let spec = ArchSpec::reference(Family::Vnet).with_variant(GateVariant::Sat);
    let mut model = build_model(&spec, 4).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(TrainConfig::default()).map_err(|e| e.to_string())?;
    let x = random(&[8, 8, 1, 2], 7, 0);
    let y = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    trainer.step(&mut model, &x, &y).map_err(|e| e.to_string())?;
    checkpoint::save_checkpoint(&p.join("m.ckpt"), &model, &trainer).map_err(|e| e.to_string())?;
    let (m2, t2) = checkpoint::load_checkpoint(&p.join("m.ckpt")).map_err(|e| e.to_string())?;
    for (a, b) in model.params().iter().zip(m2.params().iter()) {
        ensure!(a.name == b.name && bits(&a.value) == bits(&b.value), "parameter {} changed", a.name);
    }
    ensure!(t2 == trainer, "trainer state changed");

    satskip(&["gen-data", "--out", "d", "--samples", "20", "--extent", "16", "--seed", "5"], p)?;
    let base = ["train", "--arch", "unet", "--variant", "sat", "--data", "d", "--batch", "4", "--seed", "1"];
    satskip(&[&base[..], &["--epochs", "3", "--out", "full.ckpt"]].concat(), p)?;
    satskip(&[&base[..], &["--epochs", "1", "--out", "part.ckpt"]].concat(), p)?;
    satskip(&[&base[..], &["--epochs", "3", "--resume", "part.ckpt", "--out", "resumed.ckpt"]].concat(), p)?;
    let read = |f: &str| fs::read(p.join(f)).map_err(|e| e.to_string());
    ensure!(read("full.ckpt")? == read("resumed.ckpt")?, "resumed checkpoint differs from uninterrupted");
    Ok("tensor file and checkpoint bit-exact; 1+2 resumed epochs == 3 uninterrupted (checkpoint bytes equal)".into())
}

fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut names: Vec<_> = fs::read_dir(dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    names.sort();
    for n in names {
        if n.is_dir() {
            for (k, v) in snapshot(&n)? {
                out.push((format!("{}/{k}", n.file_name().unwrap().to_string_lossy()), v));
            }
        } else {
            out.push((n.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&n).map_err(|e| e.to_string())?));
        }
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let commands: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--out", "d", "--samples", "12", "--extent", "16", "--seed", "2", "--shapes", "rings"],
        vec!["train", "--arch", "tiramisu", "--variant", "sat", "--data", "d", "--epochs", "2", "--batch", "4", "--out", "m.ckpt", "--history", "h.csv"],
        vec!["eval", "--ckpt", "m.ckpt", "--data", "d", "--report", "r.csv"],
        vec!["params", "--arch", "vnet", "--variant", "st", "--compare"],
        vec!["sparsity", "--ckpt", "m.ckpt"],
        vec!["attention", "--ckpt", "m.ckpt", "--input", "d/img_0004.satt", "--out", "maps"],
        vec!["gradcheck", "--op", "gate_sat"],
        vec!["gradcheck", "--op", "network.vnet.at.sampled"],
    ];
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for cmd in &commands {
        let out_a = satskip(cmd, a.path())?;
        let out_b = satskip(cmd, b.path())?;
        ensure!(out_a == out_b, "{} stdout differs", cmd[0]);
        let (sa, sb) = (snapshot(a.path())?, snapshot(b.path())?);
        ensure!(sa == sb, "{} output files differ", cmd[0]);
    }
    let files = snapshot(a.path())?.len();
    Ok(format!("{} commands repeated: stdout and all {files} files byte-identical", commands.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name} [{took:.1?}]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL {name} [{took:.1?}]: {why}");
            }
        }
    };
    let mut runs = Vec::new();
    report(1, "gate math truth table", &mut gate_math);
    report(2, "gradient suite", &mut gradient_suite);
    report(3, "parameter accounting", &mut parameter_accounting);
    report(4, "optimizer and init oracles", &mut optimizer_and_init);
    report(5, "desk-scale experiment", &mut || desk_scale(&mut runs));
    report(6, "sparsity reporting", &mut || sparsity(&runs));
    report(7, "metric oracle", &mut metric_oracle);
    report(8, "persistence", &mut persistence);
    report(9, "determinism", &mut determinism);
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
