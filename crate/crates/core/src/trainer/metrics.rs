use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "epoch,split,top1,ce,kd_t,kd_p,prompt_top1,kl_s_t,kl_s_p,one_minus_pt_t,one_minus_pt_p,lr";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One `(epoch, split)` row. Columns a method does not produce are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub split: Option<Split>,
    pub top1: f64,
    pub ce: f64,
    /// Student distillation term against the original path.
    pub kd_t: Option<f64>,
    /// Student distillation term against the prompt path.
    pub kd_p: Option<f64>,
    pub prompt_top1: Option<f64>,
    pub kl_s_t: Option<f64>,
    pub kl_s_p: Option<f64>,
    pub one_minus_pt_t: Option<f64>,
    pub one_minus_pt_p: Option<f64>,
    pub lr: f64,
}

impl EpochRecord {
    pub fn split(&self) -> Split {
        self.split.unwrap_or(Split::Train)
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(sig6).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split().label(),
            sig6(self.top1),
            sig6(self.ce),
            opt(self.kd_t),
            opt(self.kd_p),
            opt(self.prompt_top1),
            opt(self.kl_s_t),
            opt(self.kl_s_p),
            opt(self.one_minus_pt_t),
            opt(self.one_minus_pt_p),
            sig6(self.lr)
        )
    }
}

/// Append-only per-epoch log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects a second record for the same `(epoch, split)`.
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if self.records.iter().any(|x| x.epoch == r.epoch && x.split() == r.split()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate metrics record for epoch {} ({})",
                r.epoch,
                r.split().label()
            )));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.split() == split)
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.split(split).last()
    }

    pub fn first(&self, split: Split) -> Option<&EpochRecord> {
        self.split(split).next()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }
}

/// Six significant digits, without trailing zeros.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = libm::floor(libm::log10(libm::fabs(x))) as i32;
    if !(-5..=15).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding may carry into a new leading digit, e.g. 9.999996 → 10.00000
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').into()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}
