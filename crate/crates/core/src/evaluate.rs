//! Inference over a dataset and per-sample quality metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Graph;
use crate::batch::{eval_prior_seed, Prepared};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{write_rgb_png, Dataset};
use crate::metrics::{endpoint_error, psnr, ssim};
use crate::model::forward;
use crate::par::{map_indices, Execution};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Network outputs for one triplet.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub frame: Tensor<f32>,
    pub flow01: Tensor<f32>,
}

/// Runs the network on `sample` with the evaluation prior seed of `name`.
pub fn predict(cfg: &RunConfig, params: &ParamSet<f32>, name: &str, sample: &Prepared) -> Result<Prediction> {
    let x = sample.input::<f32>(cfg, eval_prior_seed(cfg, name), cfg.train.t)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = forward(&mut g, &b, cfg, &x)?;
    Ok(Prediction {
        frame: g.value(out.synthesis.frame).clone(),
        flow01: g.value(out.flows.forward[0]).clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Forward-flow end-point error over non-occluded pixels, when ground
    /// truth exists.
    pub epe: Option<f64>,
}

/// Means over samples; EPE over the samples that have it.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub epe: Option<f64>,
}

pub fn aggregate(rows: &[SampleMetrics]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::invalid("no samples to aggregate"));
    }
    let n = rows.len() as f64;
    let epes: Vec<f64> = rows.iter().filter_map(|r| r.epe).collect();
    Ok(Aggregate {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        epe: (!epes.is_empty()).then(|| epes.iter().sum::<f64>() / epes.len() as f64),
    })
}

fn score(cfg: &RunConfig, params: &ParamSet<f32>, name: &str, s: &crate::datagen::TripletSample) -> Result<(SampleMetrics, Prediction)> {
    let pred = predict(cfg, params, name, &Prepared::new(s))?;
    if !pred.frame.all_finite() {
        return Err(Error::Numerical(format!("non-finite prediction for sample {name}")));
    }
    let epe = match (&s.flow01, s.forward_valid()) {
        (Some(gt), Some(valid)) if valid.iter().any(|&v| v) => Some(endpoint_error(&pred.flow01, gt, Some(&valid))?),
        (Some(gt), _) => Some(endpoint_error(&pred.flow01, gt, None)?),
        _ => None,
    };
    let m = SampleMetrics {
        name: name.to_string(),
        psnr: psnr(&pred.frame, &s.it)?,
        ssim: ssim(&pred.frame, &s.it)?,
        epe,
    };
    Ok((m, pred))
}

/// Scores every sample of `data`, in dataset order. When `dump` is given,
/// writes `<name>_pred.png` and `<name>_diff.png` (absolute error) there.
pub fn evaluate_with(
    exec: Execution,
    cfg: &RunConfig,
    params: &ParamSet<f32>,
    data: &Dataset,
    dump: Option<&Path>,
) -> Result<Vec<SampleMetrics>> {
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let results = map_indices(exec, data.len(), |i| -> Result<SampleMetrics> {
        let (name, s) = (&data.names[i], &data.samples[i]);
        let (m, pred) = score(cfg, params, name, s)?;
        if let Some(dir) = dump {
            write_rgb_png(&dir.join(format!("{name}_pred.png")), &pred.frame)?;
            let diff = Tensor::from_fn(pred.frame.shape(), |n, y, x, c| (pred.frame.at(n, y, x, c) - s.it.at(n, y, x, c)).abs());
            write_rgb_png(&dir.join(format!("{name}_diff.png")), &diff)?;
        }
        Ok(m)
    });
    results.into_iter().collect()
}

pub fn evaluate(cfg: &RunConfig, params: &ParamSet<f32>, data: &Dataset) -> Result<Vec<SampleMetrics>> {
    evaluate_with(Execution::default(), cfg, params, data, None)
}

pub const METRICS_HEADER: &str = "sample,psnr,ssim,epe";
/// Name of the aggregate row in metrics CSVs.
pub const MEAN_ROW: &str = "mean";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-sample rows followed by the [`MEAN_ROW`]. Floats use shortest
/// round-trip formatting.
pub fn metrics_csv(rows: &[SampleMetrics]) -> Result<String> {
    let agg = aggregate(rows)?;
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.name, r.psnr, r.ssim, opt(r.epe));
    }
    let _ = writeln!(s, "{MEAN_ROW},{},{},{}", agg.psnr, agg.ssim, opt(agg.epe));
    Ok(s)
}

/// Inverse of [`metrics_csv`]; the aggregate row is returned separately.
pub fn parse_metrics_csv(text: &str) -> Result<(Vec<SampleMetrics>, Aggregate)> {
    let bad = |line: usize, what: &str| Error::Format {
        path: "metrics.csv".into(),
        detail: format!("line {line}: {what}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut rows = Vec::new();
    let mut agg = None;
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let epe = if f[3].is_empty() { None } else { Some(num(f[3])?) };
        if f[0] == MEAN_ROW {
            agg = Some(Aggregate {
                psnr: num(f[1])?,
                ssim: num(f[2])?,
                epe,
            });
        } else {
            rows.push(SampleMetrics {
                name: f[0].to_string(),
                psnr: num(f[1])?,
                ssim: num(f[2])?,
                epe,
            });
        }
    }
    Ok((rows, agg.ok_or_else(|| bad(0, "missing aggregate row"))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_triplet, SceneConfig};
    use crate::model::param_specs;

    fn small() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::default();
        cfg.model.channels = vec![4, 8];
        cfg.model.decoder_channels = 4;
        cfg.rdp.channels = 4;
        cfg.hrffm.window = 4;
        let mut sc = SceneConfig::from_data(&cfg.data).with_size(16);
        sc.max_instances = 2;
        sc.max_speed = 2.0;
        let names: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let samples = (0..3).map(|i| generate_triplet(&sc, i).unwrap()).collect();
        (cfg, Dataset { names, samples })
    }

    #[test]
    fn csv_round_trips_and_aggregates() {
        let rows = vec![
            SampleMetrics { name: "a".into(), psnr: 30.125, ssim: 0.9, epe: Some(0.5) },
            SampleMetrics { name: "b".into(), psnr: 20.0 / 3.0, ssim: 0.1, epe: None },
        ];
        let text = metrics_csv(&rows).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 2);
        let (back, agg) = parse_metrics_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert!((agg.psnr - (30.125 + 20.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(agg.epe, Some(0.5));
        assert!(aggregate(&[]).is_err());
        assert!(parse_metrics_csv("x\n").is_err());
    }

    #[test]
    fn evaluation_is_order_and_mode_independent() {
        let (cfg, data) = small();
        let p = ParamSet::<f32>::init(&param_specs(&cfg), 1);
        let seq = evaluate_with(Execution::Sequential, &cfg, &p, &data, None).unwrap();
        let par = evaluate_with(Execution::Parallel, &cfg, &p, &data, None).unwrap();
        assert_eq!(seq, par);
        let rev = Dataset {
            names: data.names.iter().rev().cloned().collect(),
            samples: data.samples.iter().rev().cloned().collect(),
        };
        let mut back = evaluate(&cfg, &p, &rev).unwrap();
        back.reverse();
        assert_eq!(back, seq);
        assert!(seq.iter().all(|m| m.epe.is_some() && m.psnr > 0.0));
    }

    #[test]
    fn dump_writes_prediction_and_error_images() {
        let (cfg, data) = small();
        let p = ParamSet::<f32>::init(&param_specs(&cfg), 1);
        let dir = tempfile::tempdir().unwrap();
        evaluate_with(Execution::Sequential, &cfg, &p, &data, Some(dir.path())).unwrap();
        for n in &data.names {
            let pred = crate::io::read_rgb_png(&dir.path().join(format!("{n}_pred.png"))).unwrap();
            assert_eq!(pred.shape(), data.samples[0].it.shape());
            assert!(dir.path().join(format!("{n}_diff.png")).exists());
        }
    }
}
