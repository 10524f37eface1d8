use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const HEADER: &str =
    "epoch,svae,mi,adv_f,adv_r,adv_v,ctc,cls,total,src_train_acc,tgt_test_acc,pl_coverage,lr_eff";

/// One line of the metrics CSV; loss terms are epoch means over steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub losses: LossReport,
    pub src_train_acc: f64,
    pub tgt_test_acc: f64,
    pub pl_coverage: f64,
    pub lr_eff: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            l.svae,
            l.mi,
            l.adv_f,
            l.adv_r,
            l.adv_v,
            l.ctc,
            l.cls,
            l.total,
            self.src_train_acc,
            self.tgt_test_acc,
            self.pl_coverage,
            self.lr_eff
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::format(
                "metrics",
                format!("expected 13 fields, got {}", fields.len()),
            ));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::format("metrics", format!("bad number `{}`", fields[i])))
        };
        Ok(MetricsRow {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::format("metrics", format!("bad epoch `{}`", fields[0])))?,
            losses: LossReport {
                svae: f(1)?,
                mi: f(2)?,
                adv_f: f(3)?,
                adv_r: f(4)?,
                adv_v: f(5)?,
                ctc: f(6)?,
                cls: f(7)?,
                total: f(8)?,
            },
            src_train_acc: f(9)?,
            tgt_test_acc: f(10)?,
            pl_coverage: f(11)?,
            lr_eff: f(12)?,
        })
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format("metrics", "unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRow::from_csv)
        .collect()
}
