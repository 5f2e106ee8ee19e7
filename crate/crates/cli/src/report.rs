//! CSV renderings of training histories and evaluation results.

use std::fmt::Write;

use satskip_core::metrics::{mean_std, SegMetrics};
use satskip_core::networks::GateInfo;
use satskip_core::train::TrainHistory;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,train_loss,val_dice,val_fpr,val_fnr` and one
/// `channels_off.<gate>` column per gate, empty where a gate has no
/// selection or there is no validation split.
pub fn history_csv(history: &TrainHistory, gates: &[GateInfo]) -> String {
    let mut out = String::from("epoch,train_loss,val_dice,val_fpr,val_fnr");
    for g in gates {
        write!(out, ",channels_off.{}", g.name).unwrap();
    }
    out.push('\n');
    for r in &history.records {
        write!(out, "{},{},{},{},{}", r.epoch, r.train_loss, opt(r.val_dice), opt(r.val_fpr), opt(r.val_fnr)).unwrap();
        for c in &r.channels_off {
            write!(out, ",{}", opt(*c)).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub dice: (f64, f64),
    pub fpr: (f64, f64),
    pub fnr: (f64, f64),
}

pub fn summarize(metrics: &[SegMetrics]) -> Summary {
    let col = |f: fn(&SegMetrics) -> f64| mean_std(&metrics.iter().map(f).collect::<Vec<_>>());
    Summary {
        dice: col(|m| m.dice),
        fpr: col(|m| m.fpr),
        fnr: col(|m| m.fnr),
    }
}

/// One row per sample, then `mean` and `std` rows.
pub fn eval_csv(metrics: &[SegMetrics]) -> String {
    let mut out = String::from("sample,dice,fpr,fnr\n");
    for (i, m) in metrics.iter().enumerate() {
        writeln!(out, "{i},{},{},{}", m.dice, m.fpr, m.fnr).unwrap();
    }
    let s = summarize(metrics);
    writeln!(out, "mean,{},{},{}", s.dice.0, s.fpr.0, s.fnr.0).unwrap();
    writeln!(out, "std,{},{},{}", s.dice.1, s.fpr.1, s.fnr.1).unwrap();
    out
}

/// `0.87±0.05` style.
pub fn pm((mean, std): (f64, f64), digits: usize) -> String {
    format!("{mean:.digits$}±{std:.digits$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use satskip_core::train::EpochRecord;

    #[test]
    fn eval_rows() {
        let m = [
            SegMetrics { dice: 1.0, fpr: 0.0, fnr: 0.0 },
            SegMetrics { dice: 0.5, fpr: 0.5, fnr: 0.25 },
        ];
        let csv = eval_csv(&m);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample,dice,fpr,fnr");
        assert_eq!(lines[2], "1,0.5,0.5,0.25");
        assert_eq!(lines[3], "mean,0.75,0.25,0.125");
        assert_eq!(pm(summarize(&m).dice, 2), "0.75±0.35");
    }

    #[test]
    fn history_columns() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_dice: None,
                val_fpr: None,
                val_fnr: None,
                channels_off: vec![Some(0.25), None],
            }],
        };
        let csv = history_csv(&h, &[]);
        assert_eq!(csv, "epoch,train_loss,val_dice,val_fpr,val_fnr\n1,0.5,,,,0.25,\n");
    }
}
