//! The seven fusion-module ablation settings and their report format.

use std::fmt::Write as _;

use crate::config::{Branch, Embedding, RunConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// One-hot instance embedding.
    OneHot,
    /// Learnable per-ID embedding table.
    Learnable,
    /// No channel softmax on the extracted prior features.
    NoSoftmax,
    /// No residual fusion.
    NoResidual,
    CnnOnly,
    TransOnly,
    Full,
}

impl Setting {
    /// Report order.
    pub const ALL: [Setting; 7] = [
        Setting::OneHot,
        Setting::Learnable,
        Setting::NoSoftmax,
        Setting::NoResidual,
        Setting::CnnOnly,
        Setting::TransOnly,
        Setting::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Setting::OneHot => "O.H.",
            Setting::Learnable => "L.E.",
            Setting::NoSoftmax => "w/o S.O.",
            Setting::NoResidual => "w/o R.L.",
            Setting::CnnOnly => "CNN-only",
            Setting::TransOnly => "Trans-only",
            Setting::Full => "Full",
        }
    }

    /// Filesystem-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Setting::OneHot => "one_hot",
            Setting::Learnable => "learnable",
            Setting::NoSoftmax => "no_softmax",
            Setting::NoResidual => "no_residual",
            Setting::CnnOnly => "cnn_only",
            Setting::TransOnly => "trans_only",
            Setting::Full => "full",
        }
    }

    /// `base` with the fusion module on and this setting's single change.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.hrffm = true;
        c.rdp.embedding = Embedding::Gaussian;
        c.hrffm.softmax_rdp = true;
        c.hrffm.residual = true;
        c.hrffm.branch = Branch::Both;
        match self {
            Setting::OneHot => c.rdp.embedding = Embedding::OneHot,
            Setting::Learnable => c.rdp.embedding = Embedding::Learnable,
            Setting::NoSoftmax => c.hrffm.softmax_rdp = false,
            Setting::NoResidual => c.hrffm.residual = false,
            Setting::CnnOnly => c.hrffm.branch = Branch::Cnn,
            Setting::TransOnly => c.hrffm.branch = Branch::Trans,
            Setting::Full => {}
        }
        c
    }
}

/// Config keys echoed on every report row.
pub const FLAG_KEYS: [&str; 5] = ["model.hrffm", "rdp.embedding", "hrffm.softmax_rdp", "hrffm.residual", "hrffm.branch"];

pub const REPORT_HEADER: &str =
    "setting,model.hrffm,rdp.embedding,hrffm.softmax_rdp,hrffm.residual,hrffm.branch,train.seed,status,val_psnr,val_ssim,val_epe,error";

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub setting: Setting,
    /// Values of [`FLAG_KEYS`], in order.
    pub flags: Vec<String>,
    pub seed: u64,
    pub outcome: std::result::Result<Scores, String>,
}

impl ReportRow {
    pub fn new(setting: Setting, cfg: &RunConfig, outcome: std::result::Result<Scores, String>) -> Self {
        let entries = cfg.entries();
        let flags = FLAG_KEYS
            .iter()
            .map(|k| {
                entries
                    .iter()
                    .find(|(key, _)| key == k)
                    .map(|(_, v)| v.clone())
                    .expect("flag keys are config keys")
            })
            .collect();
        ReportRow {
            setting,
            flags,
            seed: cfg.train.seed,
            outcome,
        }
    }
}

/// Commas and line breaks in error messages become spaces so every row
/// keeps one line and a fixed field count.
fn sanitize(msg: &str) -> String {
    msg.replace([',', '\n', '\r'], " ")
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let (status, psnr, ssim, epe, err) = match &r.outcome {
            Ok(sc) => (
                "ok",
                sc.psnr.to_string(),
                sc.ssim.to_string(),
                sc.epe.map(|v| v.to_string()).unwrap_or_default(),
                String::new(),
            ),
            Err(e) => ("failed", String::new(), String::new(), String::new(), sanitize(e)),
        };
        let _ = writeln!(
            s,
            "{},{},{},{status},{psnr},{ssim},{epe},{err}",
            r.setting.label(),
            r.flags.join(","),
            r.seed
        );
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |line: usize, what: &str| Error::format("ablation.csv", format!("line {line}: {what}"));
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(REPORT_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(bad(i + 1, "expected 12 fields"));
            }
            let setting = Setting::ALL
                .into_iter()
                .find(|s| s.label() == f[0])
                .ok_or_else(|| bad(i + 1, "unknown setting"))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            let outcome = match f[7] {
                "ok" => Ok(Scores {
                    psnr: num(f[8])?,
                    ssim: num(f[9])?,
                    epe: if f[10].is_empty() { None } else { Some(num(f[10])?) },
                }),
                "failed" => Err(f[11].to_string()),
                _ => return Err(bad(i + 1, "unknown status")),
            };
            Ok(ReportRow {
                setting,
                flags: f[1..6].iter().map(|s| s.to_string()).collect(),
                seed: f[6].parse().map_err(|_| bad(i + 1, "bad seed"))?,
                outcome,
            })
        })
        .collect()
}
