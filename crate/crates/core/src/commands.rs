//! The experiment commands behind the command-line interface. Each one is
//! a pure function of its resolved [`RunConfig`] and writes only below the
//! directory it is given.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::{report_csv, ReportRow, Scores, Setting};
use crate::autodiff::GradCheckOptions;
use crate::config::RunConfig;
use crate::datagen::{generate_triplet, SceneConfig};
use crate::error::{Error, Result};
use crate::evaluate::{aggregate, evaluate_with, metrics_csv, Aggregate, SampleMetrics};
use crate::gradsuite::{run_suite, CheckOutcome};
use crate::io::{build_manifest, list_samples, write_atomic, write_sample, Dataset, MANIFEST_FILE};
use crate::model::param_specs;
use crate::par::{map_indices, Execution};
use crate::params::{load_checkpoint, save_checkpoint, ParamSet};
use crate::rdp::hash;
use crate::train::{train_with, LogRow, LOG_HEADER};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const FAILURE_FILE: &str = "failure.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Config text stored in checkpoints and reports. The output directory is
/// left out so reruns into different directories produce identical bytes.
pub fn config_echo(cfg: &RunConfig) -> String {
    cfg.entries()
        .into_iter()
        .filter(|(k, _)| *k != "out.dir")
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(true);
    }
    let mut rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    Ok(rd.next().is_none())
}

/// Name of the `i`-th generated sample directory.
pub fn sample_name(i: usize) -> String {
    format!("s{i:05}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub root: PathBuf,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub instances: usize,
}

impl GenSummary {
    pub fn line(&self) -> String {
        format!(
            "generated {} samples ({} train, {} val, {} instances) in {}",
            self.samples,
            self.train,
            self.val,
            self.instances,
            self.root.display()
        )
    }
}

/// Writes `data.samples` triplets and the split manifest to `data.root`.
/// A non-empty root is refused unless `force`, which first removes earlier
/// sample directories and the manifest and leaves anything else alone.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<GenSummary> {
    cfg.validate()?;
    let d = &cfg.data;
    let root = &d.root;
    if d.samples == 0 {
        return Err(Error::Config("data.samples must be positive".into()));
    }
    if !is_empty_dir(root)? {
        if !force {
            return Err(Error::invalid(format!(
                "{} is not empty; pass --force to regenerate",
                root.display()
            )));
        }
        for name in list_samples(root)? {
            let p = root.join(name);
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let m = root.join(MANIFEST_FILE);
        if m.exists() {
            fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
        }
    }
    create_dir(root)?;
    let scene = SceneConfig::from_data(d);
    let samples = map_indices(Execution::default(), d.samples, |i| generate_triplet(&scene, hash(&[d.seed, i as u64])));
    let mut instances = 0;
    for (i, s) in samples.into_iter().enumerate() {
        let s = s?;
        instances += s.meta.as_ref().map_or(0, |m| m.instances.len());
        write_sample(&root.join(sample_name(i)), &s)?;
    }
    let manifest = build_manifest(root, d.split, d.split_seed)?;
    manifest.save(root)?;
    Ok(GenSummary {
        root: root.clone(),
        samples: d.samples,
        train: manifest.train.len(),
        val: manifest.val.len(),
        instances,
    })
}

/// Appends log rows to a CSV file, flushing each one.
struct LogWriter {
    file: fs::File,
    path: PathBuf,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(LogWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    fn push(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub log: Vec<LogRow>,
    pub params: ParamSet<f32>,
}

/// Trains on the manifest split under `data.root` and writes the config
/// echo, the streamed log and the checkpoint to `out`. A non-finite loss
/// leaves the partial log and a failure note naming the iteration.
/// `progress` sees every log row.
pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool, mut progress: impl FnMut(&LogRow)) -> Result<TrainSummary> {
    cfg.validate()?;
    let existing = [CHECKPOINT_FILE, LOG_FILE].iter().any(|f| out.join(f).exists());
    if existing && !force {
        return Err(Error::invalid(format!(
            "{} already holds a training run; pass --force to overwrite",
            out.display()
        )));
    }
    let (train_set, val_set) = Dataset::load_split(&cfg.data.root)?;
    create_dir(out)?;
    let failure = out.join(FAILURE_FILE);
    if failure.exists() {
        fs::remove_file(&failure).map_err(|e| Error::io(&failure, e))?;
    }
    write_atomic(&out.join(CONFIG_FILE), config_echo(cfg).as_bytes())?;
    let mut writer = LogWriter::create(&out.join(LOG_FILE))?;
    let result = train_with(Execution::default(), cfg, &train_set, &val_set, |row| {
        progress(row);
        writer.push(row)
    });
    let trained = match result {
        Ok(t) => t,
        Err(e) => {
            if e.is_numerical() {
                write_atomic(&failure, format!("{e}\n").as_bytes())?;
            }
            return Err(e);
        }
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trained.params, &config_echo(cfg))?;
    Ok(TrainSummary {
        out: out.to_path_buf(),
        log: trained.log,
        params: trained.params,
    })
}

/// Loads a checkpoint, refusing it when its architecture disagrees with
/// `cfg`.
pub fn load_compatible(cfg: &RunConfig, path: &Path) -> Result<ParamSet<f32>> {
    let (echo, params) = load_checkpoint(path)?;
    let stored = RunConfig::parse(&echo)?;
    let diff = stored.architecture_diff(cfg);
    if !diff.is_empty() {
        let detail = diff
            .iter()
            .map(|(k, ours, theirs)| format!("{k}: checkpoint {ours}, requested {theirs}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Config(format!("architecture mismatch with {}: {detail}", path.display())));
    }
    params.check_specs(&param_specs(cfg))?;
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        }
    }
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let m = crate::io::Manifest::load(root)?;
    let names = match split {
        Split::Train => m.train,
        Split::Val => m.val,
        Split::All => {
            let mut all = m.train;
            all.extend(m.val);
            all.sort();
            all
        }
    };
    Dataset::load(root, &names)
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub csv: PathBuf,
    pub rows: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

/// Scores `checkpoint` on one split and writes `eval_<split>.csv` (and
/// `dump_<split>/` images when `dump`) to `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, out: &Path, dump: bool) -> Result<EvalSummary> {
    cfg.validate()?;
    let params = load_compatible(cfg, checkpoint)?;
    let data = load_dataset(&cfg.data.root, split)?;
    create_dir(out)?;
    let dump_dir = out.join(format!("dump_{}", split.as_str()));
    let rows = evaluate_with(Execution::default(), cfg, &params, &data, dump.then_some(dump_dir.as_path()))?;
    let csv = out.join(format!("eval_{}.csv", split.as_str()));
    write_atomic(&csv, metrics_csv(&rows)?.as_bytes())?;
    Ok(EvalSummary {
        csv,
        aggregate: aggregate(&rows)?,
        rows,
    })
}

/// Trains and scores all seven ablation settings from the shared seed,
/// each in `out/<slug>`, rewriting `out/ablation.csv` after every row. A
/// failed setting is recorded in its row and the sweep continues.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool, mut progress: impl FnMut(&ReportRow)) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    if out.join(ABLATION_FILE).exists() && !force {
        return Err(Error::invalid(format!(
            "{} already holds an ablation report; pass --force to overwrite",
            out.display()
        )));
    }
    create_dir(out)?;
    let val_set = load_dataset(&cfg.data.root, Split::Val)?;
    let mut rows = Vec::new();
    for setting in Setting::ALL {
        let c = setting.apply(cfg);
        let outcome = cmd_train(&c, &out.join(setting.slug()), true, |_| {})
            .and_then(|t| evaluate_with(Execution::default(), &c, &t.params, &val_set, None))
            .and_then(|rows| aggregate(&rows))
            .map(|a| Scores {
                psnr: a.psnr,
                ssim: a.ssim,
                epe: a.epe,
            })
            .map_err(|e| e.to_string());
        let row = ReportRow::new(setting, &c, outcome);
        progress(&row);
        rows.push(row);
        write_atomic(&out.join(ABLATION_FILE), report_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// Runs the gradient suite; `corrupt` scales every analytic adjoint by
/// 1.01 as a negative control.
pub fn cmd_grad_check(corrupt: bool) -> Vec<CheckOutcome> {
    let mut opts = GradCheckOptions::default();
    if corrupt {
        opts.adjoint_scale = 1.01;
    }
    run_suite(opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.channels = vec![4, 8];
        cfg.model.decoder_channels = 4;
        cfg.rdp.channels = 4;
        cfg.hrffm.window = 4;
        cfg.data.root = root.to_path_buf();
        cfg.data.samples = 6;
        cfg.data.size = 16;
        cfg.data.max_instances = 2;
        cfg.data.max_speed = 2.0;
        cfg.train.iterations = 3;
        cfg.train.batch = 2;
        cfg.train.log_every = 2;
        cfg
    }

    fn read(p: &Path) -> Vec<u8> {
        fs::read(p).unwrap()
    }

    #[test]
    fn gen_data_is_reproducible_and_guarded() {
        let tmp = tempfile::tempdir().unwrap();
        let a = small(&tmp.path().join("a"));
        let s = cmd_gen_data(&a, false).unwrap();
        assert_eq!((s.samples, s.train + s.val), (6, 6));
        assert_eq!(list_samples(&a.data.root).unwrap().len(), 6);
        assert!(s.line().starts_with("generated 6 samples"));
        assert!(cmd_gen_data(&a, false).is_err());
        let mut b = a.clone();
        b.data.root = tmp.path().join("b");
        cmd_gen_data(&b, false).unwrap();
        for name in list_samples(&a.data.root).unwrap() {
            for f in ["im0.png", "imt.png", "im1.png", "mask0.png", "flow01.bin", "meta.json"] {
                assert_eq!(read(&a.data.root.join(&name).join(f)), read(&b.data.root.join(&name).join(f)));
            }
        }
        assert_eq!(read(&a.data.root.join(MANIFEST_FILE)), read(&b.data.root.join(MANIFEST_FILE)));
        let mut fewer = a.clone();
        fewer.data.samples = 4;
        fs::write(a.data.root.join("notes.txt"), "keep").unwrap();
        assert_eq!(cmd_gen_data(&fewer, true).unwrap().samples, 4);
        assert_eq!(list_samples(&a.data.root).unwrap().len(), 4);
        assert!(a.data.root.join("notes.txt").exists());
    }

    #[test]
    fn train_then_eval_reproduces_the_logged_train_psnr() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(&tmp.path().join("data"));
        cmd_gen_data(&cfg, false).unwrap();
        let out = tmp.path().join("run");
        let mut seen = 0;
        let t = cmd_train(&cfg, &out, false, |_| seen += 1).unwrap();
        assert_eq!(seen, t.log.len());
        assert_eq!(String::from_utf8(read(&out.join(LOG_FILE))).unwrap(), crate::train::log_csv(&t.log));
        assert!(cmd_train(&cfg, &out, false, |_| {}).is_err());

        let again = tmp.path().join("again");
        cmd_train(&cfg, &again, false, |_| {}).unwrap();
        for f in [CHECKPOINT_FILE, LOG_FILE, CONFIG_FILE] {
            assert_eq!(read(&out.join(f)), read(&again.join(f)), "{f}");
        }

        let e = cmd_eval(&cfg, &out.join(CHECKPOINT_FILE), Split::Train, &out, true).unwrap();
        let logged = t.log.last().unwrap().train_psnr.unwrap();
        assert!((e.aggregate.psnr - logged).abs() < 1e-4);
        let text = String::from_utf8(read(&e.csv)).unwrap();
        assert_eq!(text.lines().count(), e.rows.len() + 2);
        assert!(out.join("dump_train").join(format!("{}_diff.png", e.rows[0].name)).exists());

        let mut other = cfg.clone();
        other.hrffm.window = 2;
        let err = cmd_eval(&other, &out.join(CHECKPOINT_FILE), Split::Val, &out, false).unwrap_err();
        assert!(err.to_string().contains("hrffm.window"), "{err}");
    }

    #[test]
    fn divergence_is_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(&tmp.path().join("data"));
        cmd_gen_data(&cfg, false).unwrap();
        cfg.train.lr = 1e30;
        cfg.train.iterations = 6;
        let out = tmp.path().join("run");
        let err = cmd_train(&cfg, &out, false, |_| {}).unwrap_err();
        assert!(err.is_numerical());
        let note = fs::read_to_string(out.join(FAILURE_FILE)).unwrap();
        assert!(note.contains("iteration"));
        assert!(!out.join(CHECKPOINT_FILE).exists());
    }
}
