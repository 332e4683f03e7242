//! Acceptance criteria. Every test prints one `PASS`/`FAIL` line per
//! criterion to the process stdout (uncaptured) and then fails on `FAIL`.
//! The trained-model criteria share one set of runs kept under the cargo
//! target tmpdir for inspection.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdp_vfi::ablation::{parse_report_csv, Setting};
use rdp_vfi::autodiff::Graph;
use rdp_vfi::batch::Prepared;
use rdp_vfi::commands::{self, CHECKPOINT_FILE};
use rdp_vfi::config::RunConfig;
use rdp_vfi::datagen::{generate_triplet, SceneConfig};
use rdp_vfi::evaluate::predict;
use rdp_vfi::mask::InstanceMask;
use rdp_vfi::metrics::{endpoint_error, psnr, ssim};
use rdp_vfi::model::{forward, param_specs, FrameInput};
use rdp_vfi::params::ParamSet;
use rdp_vfi::rdp::{
    embed_mask, match_instance_ids, nearest_centroid_decode, one_hot_embed, GaussianCodebook, DEFAULT_CODEBOOK_SEED,
};
use rdp_vfi::{Shape, Tensor};

fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} criterion {id} ({title}): {detail}");
    let _ = out.flush();
}

fn finish(results: &[(u32, bool)]) {
    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rdp-vfi"))
}

fn workdir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if d.exists() {
        fs::remove_dir_all(&d).unwrap();
    }
    fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let out = bin().arg("grad-check").output().unwrap();
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().filter(|l| l.ends_with("PASS") || l.contains(" FAIL")).collect();
    let names: BTreeSet<&str> = lines.iter().filter_map(|l| l.split_whitespace().next()).collect();
    let worst = lines
        .iter()
        .filter_map(|l| l.split_whitespace().nth(1)?.parse::<f64>().ok())
        .fold(0.0f64, f64::max);
    let corrupt = bin().args(["grad-check", "--corrupt-adjoint"]).output().unwrap();
    let covers = ["conv3x3", "window_attention", "symmetric_correlation", "bilinear_sample", "rdpfn_block_both", "hrffm_apply"]
        .iter()
        .all(|n| names.contains(n));
    let pass = out.status.success()
        && lines.iter().all(|l| l.ends_with("PASS"))
        && names.len() == lines.len()
        && covers
        && worst < 1e-5
        && corrupt.status.code() == Some(2)
        && elapsed < Duration::from_secs(120);
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} checks, max rel error {worst:.2e}, corrupted adjoint exit {:?}, {:.1}s",
            lines.len(),
            corrupt.status.code(),
            elapsed.as_secs_f64()
        ),
    );
    finish(&[(1, pass)]);
}

fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, size, size, 3), |_, _, _, _| rng.gen_range(0.0..1.0))
}

#[test]
fn criterion_2_identity_at_init() {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut compared = 0;
    // without residual fusion there is no zero-initialized output layer
    for setting in Setting::ALL.into_iter().filter(|&s| s != Setting::NoResidual) {
        let on = setting.apply(&RunConfig::default());
        let mut off = on.clone();
        off.model.hrffm = false;
        let p_on = ParamSet::<f32>::init(&param_specs(&on), 3);
        let p_off = ParamSet::<f32>::init(&param_specs(&off), 3);
        for i in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
            let ids: Vec<u16> = (0..64 * 64).map(|p| ((p / 64 / 16) * 4 + (p % 64) / 16) as u16 % 7).collect();
            let m0 = InstanceMask::new(64, 64, ids).unwrap();
            let m1 = InstanceMask::from_fn(64, 64, |y, x| m0.get(y, (x + 3) % 64));
            let sample = Prepared {
                i0: random_frame(&mut rng, 64),
                it: random_frame(&mut rng, 64),
                i1: random_frame(&mut rng, 64),
                masks: Some((m0, m1)),
                flows: None,
            };
            let run = |cfg: &RunConfig, p: &ParamSet<f32>| {
                let x: FrameInput<f32> = sample.input(cfg, i, 0.5).unwrap();
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                let o = forward(&mut g, &b, cfg, &x).unwrap();
                (
                    g.value(o.synthesis.frame).clone(),
                    g.value(o.flows.forward[0]).clone(),
                    g.value(o.flows.backward[0]).clone(),
                )
            };
            compared += 1;
            if run(&on, &p_on) != run(&off, &p_off) {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(60);
    verdict(
        2,
        "identity at init",
        pass,
        &format!(
            "{compared} inputs over the 6 settings with residual fusion, {mismatches} not bit-identical, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    finish(&[(2, pass)]);
}

fn crowded_scene() -> SceneConfig {
    let mut c = SceneConfig::from_data(&RunConfig::default().data);
    c.min_instances = 10;
    c.max_instances = 16;
    c
}

#[test]
fn criterion_3_embedding_distinguishability() {
    let start = Instant::now();
    let book = GaussianCodebook::new(8, DEFAULT_CODEBOOK_SEED, 0.1).unwrap();
    let (mut correct, mut total, mut max_ids) = (0usize, 0usize, 0usize);
    let mut onehot_exact = true;
    for seed in 0..50u64 {
        let s = generate_triplet(&crowded_scene(), 1000 + seed).unwrap();
        let (m0, _) = s.masks.unwrap();
        let ids: BTreeSet<u16> = m0.distinct_ids().into_iter().collect();
        max_ids = max_ids.max(s.meta.as_ref().unwrap().instances.len());
        let field = embed_mask(&m0, &book, seed);
        let decoded = nearest_centroid_decode(&field, &book, &ids).unwrap();
        correct += decoded.ids().iter().zip(m0.ids()).filter(|(a, b)| a == b).count();
        total += m0.ids().len();
        let top = m0.max_id() as usize;
        for capacity in [top, top + 1, top + 8] {
            let errs = one_hot_embed(&m0, capacity).is_err();
            onehot_exact &= errs == (top >= capacity);
        }
    }
    let acc = correct as f64 / total as f64;
    let elapsed = start.elapsed();
    let pass = acc >= 0.99 && onehot_exact && (10..=16).contains(&max_ids) && elapsed < Duration::from_secs(60);
    verdict(
        3,
        "embedding distinguishability",
        pass,
        &format!(
            "decode accuracy {:.4}% over 50 masks (up to {max_ids} instances), one-hot capacity errors exact: {onehot_exact}, {:.1}s",
            100.0 * acc,
            elapsed.as_secs_f64()
        ),
    );
    finish(&[(3, pass)]);
}

#[test]
fn criterion_4_cross_frame_consistency() {
    let book = GaussianCodebook::new(8, DEFAULT_CODEBOOK_SEED, 0.1).unwrap();
    let mean_only = GaussianCodebook::new(8, DEFAULT_CODEBOOK_SEED, 0.0).unwrap();
    let (mut shared, mut identical) = (0usize, true);
    let (mut agree, mut matched, mut instances) = (true, 0usize, 0usize);
    for seed in 0..50u64 {
        let s = generate_triplet(&crowded_scene(), 2000 + seed).unwrap();
        let (m0, m1) = s.masks.unwrap();
        let ids0: BTreeSet<u16> = m0.distinct_ids().into_iter().collect();
        let ids1: BTreeSet<u16> = m1.distinct_ids().into_iter().collect();
        let frame0 = GaussianCodebook::new(8, DEFAULT_CODEBOOK_SEED, 0.1).unwrap();
        let f0 = embed_mask(&m0, &mean_only, 2 * seed);
        let f1 = embed_mask(&m1, &mean_only, 2 * seed + 1);
        for &id in ids0.intersection(&ids1) {
            shared += 1;
            identical &= frame0.lookup(id) == book.lookup(id);
            let px = |m: &InstanceMask, f: &Tensor<f32>| {
                let p = m.ids().iter().position(|&v| v == id).unwrap();
                f.data()[p * 8..p * 8 + 8].to_vec()
            };
            identical &= px(&m0, &f0.values) == px(&m1, &f1.values);
        }

        // frame 1 as a 2-pixel shift of frame 0 keeping only instances
        // that contain an 8x8 block, with scrambled labels
        let big = large_instances(&m0);
        let kept = InstanceMask::from_fn(64, 64, |y, x| if big.contains(&m0.get(y, x)) { m0.get(y, x) } else { 0 });
        let (dx, dy) = [(2, 0), (0, 2), (2, 2)][seed as usize % 3];
        let shifted = InstanceMask::from_fn(64, 64, |y, x| if y >= dy && x >= dx { kept.get(y - dy, x - dx) } else { 0 });
        let scramble = |id: u16| if id == 0 { 0 } else { 500 - id };
        let relabeled = InstanceMask::from_fn(64, 64, |y, x| scramble(shifted.get(y, x)));
        let back = match_instance_ids(&kept, &relabeled).unwrap();
        agree &= back.agreement(&shifted) == 1.0;
        instances += big.len();
        matched += 1;
    }
    let pass = identical && agree && shared > 0 && instances > 0;
    verdict(
        4,
        "cross-frame consistency",
        pass,
        &format!("{shared} shared IDs bit-identical: {identical}; {matched} copies shifted by 2 px ({instances} instances of at least 8x8) fully re-matched: {agree}"),
    );
    finish(&[(4, pass)]);
}

/// Non-background IDs whose support contains a full 8x8 block.
fn large_instances(m: &InstanceMask) -> BTreeSet<u16> {
    let mut out = BTreeSet::new();
    for y in 0..=m.height() - 8 {
        for x in 0..=m.width() - 8 {
            let id = m.get(y, x);
            if id != 0 && !out.contains(&id) && (0..8).all(|i| (0..8).all(|j| m.get(y + i, x + j) == id)) {
                out.insert(id);
            }
        }
    }
    out
}

#[test]
fn criterion_8_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = random_frame(&mut rng, 24);
        let noise = random_frame(&mut rng, 24);
        let b = Tensor::from_fn(a.shape(), |n, y, x, c| 0.6 * a.at(n, y, x, c) + 0.4 * noise.at(n, y, x, c));
        worst = worst.max((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs());
        worst = worst.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    let base = Tensor::full(Shape::new(1, 16, 16, 3), 0.5f32);
    let shifted = base.map(|v| v + 10.0 / 255.0);
    let closed = psnr(&base, &shifted).unwrap();
    let pass = worst < 1e-6 && (closed - 28.13).abs() < 0.01;
    verdict(
        8,
        "metric oracles",
        pass,
        &format!("max deviation from direct oracles {worst:.2e} over 20 pairs; uniform 10/255 offset gives {closed:.4} dB"),
    );
    finish(&[(8, pass)]);
}

fn psnr_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum();
    20.0 * (1.0 / (se / a.len() as f64).sqrt()).log10()
}

/// Windowed SSIM written out with explicit double loops per window.
fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let s = a.shape();
    let w = |i: usize| (-((i as f64 - 5.0) * (i as f64 - 5.0)) / 4.5).exp();
    let norm: f64 = (0..11).map(w).sum::<f64>().powi(2);
    let (c1, c2) = (0.0001, 0.0009);
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..s.c {
        for y0 in 0..=s.h - 11 {
            for x0 in 0..=s.w - 11 {
                let mut m = [0.0f64; 5];
                for i in 0..11 {
                    for j in 0..11 {
                        let k = w(i) * w(j) / norm;
                        let p = a.at(0, y0 + i, x0 + j, c) as f64;
                        let q = b.at(0, y0 + i, x0 + j, c) as f64;
                        m[0] += k * p;
                        m[1] += k * q;
                        m[2] += k * p * p;
                        m[3] += k * q * q;
                        m[4] += k * p * q;
                    }
                }
                let (va, vb, cov) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                total += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2) / ((m[0] * m[0] + m[1] * m[1] + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Writes `text` as a config file and returns its path.
fn config_file(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_reproducibility() {
    let dir = workdir("reproducibility");
    let cfg = config_file(
        &dir,
        "model.channels = 8,16\nmodel.decoder_channels = 8\nrdp.channels = 4\nhrffm.window = 4\n\
         data.samples = 12\ndata.size = 32\ntrain.iterations = 4\ntrain.batch = 2\ntrain.log_every = 2\n",
    );
    let run = |args: &[&str]| {
        let o = bin().arg(args[0]).arg("--config").arg(&cfg).args(&args[1..]).current_dir(&dir).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let mut same = Vec::new();
    for tag in ["a", "b"] {
        run(&["gen-data", "--out", &format!("data_{tag}")]);
    }
    same.push(("gen-data", tree(&dir.join("data_a")) == tree(&dir.join("data_b"))));
    for tag in ["a", "b"] {
        run(&["train", "--set", "data.root=data_a", "--out", &format!("train_{tag}")]);
    }
    same.push(("train", tree(&dir.join("train_a")) == tree(&dir.join("train_b"))));
    for tag in ["a", "b"] {
        run(&[
            "eval",
            "--set",
            "data.root=data_a",
            "--checkpoint",
            "train_a/checkpoint.bin",
            "--out",
            &format!("eval_{tag}"),
            "--dump",
        ]);
    }
    same.push(("eval", tree(&dir.join("eval_a")) == tree(&dir.join("eval_b"))));
    for tag in ["a", "b"] {
        run(&["ablate", "--set", "data.root=data_a", "--set", "train.iterations=2", "--out", &format!("ablate_{tag}")]);
    }
    same.push(("ablate", tree(&dir.join("ablate_a")) == tree(&dir.join("ablate_b"))));
    same.push(("grad-check", run(&["grad-check"]) == run(&["grad-check"])));
    let pass = same.iter().all(|s| s.1);
    let detail = same.iter().map(|(c, s)| format!("{c} {}", if *s { "identical" } else { "DIFFERS" })).collect::<Vec<_>>();
    verdict(9, "reproducibility", pass, &detail.join(", "));
    finish(&[(9, pass)]);
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Final validation PSNR of a run written by the train command.
fn final_val_psnr(run: &Path) -> f64 {
    let text = fs::read_to_string(run.join(commands::LOG_FILE)).unwrap();
    rdp_vfi::train::parse_log_csv(&text).unwrap().last().unwrap().val_psnr
}

fn train_run(base: &RunConfig, out: &Path) -> f64 {
    let t0 = Instant::now();
    commands::cmd_train(base, out, true, |_| {}).unwrap();
    let v = final_val_psnr(out);
    let mut log = std::io::stdout().lock();
    let _ = writeln!(log, "  trained {} in {:.0}s: val psnr {v:.4} dB", out.display(), t0.elapsed().as_secs_f64());
    v
}

/// Mean non-occluded EPE of a model on pure-translation scenes.
fn translation_epe(cfg: &RunConfig, params: &ParamSet<f32>) -> f64 {
    let scene = SceneConfig::translation(64);
    let mut sum = 0.0;
    for i in 0..20u64 {
        let s = generate_triplet(&scene, 7000 + i).unwrap();
        let v = s.meta.as_ref().unwrap().background_velocity;
        assert!(v[0].abs() <= 6 && v[1].abs() <= 6);
        let pred = predict(cfg, params, &format!("translation{i}"), &Prepared::new(&s)).unwrap();
        let valid = s.forward_valid().unwrap();
        sum += endpoint_error(&pred.flow01, s.flow01.as_ref().unwrap(), Some(&valid)).unwrap();
    }
    sum / 20.0
}

/// Largest flow magnitude of an untrained model on identical frames.
fn untrained_identity_flow() -> f64 {
    let cfg = RunConfig::default();
    let p = ParamSet::<f32>::init(&param_specs(&cfg), 1);
    let mut worst = 0.0f64;
    for i in 0..5u64 {
        let mut s = Prepared::new(&generate_triplet(&SceneConfig::from_data(&cfg.data), 9000 + i).unwrap());
        s.i1 = s.i0.clone();
        s.masks = s.masks.map(|(m0, _)| (m0.clone(), m0));
        let pred = predict(&cfg, &p, "identical", &s).unwrap();
        for v in pred.flow01.data().chunks_exact(2) {
            worst = worst.max((v[0] as f64).hypot(v[1] as f64));
        }
    }
    worst
}

/// Criteria 5, 6 and 7 share their training runs: one ablation sweep for
/// the first seed, and Full, one-hot, learnable and fusion-off runs for the
/// others.
#[test]
fn criteria_5_6_7_trained_models() {
    let dir = workdir("trained");
    let mut base = RunConfig::default();
    base.data.root = dir.join("data");
    let gen = commands::cmd_gen_data(&base, false).unwrap();
    assert_eq!((gen.train, gen.val), (200, 50));

    let mut full = Vec::new();
    let mut one_hot = Vec::new();
    let mut learnable = Vec::new();
    let mut off = Vec::new();
    let mut ablation_ok = false;
    let mut full_params = None;
    for &seed in &SEEDS {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let sd = dir.join(format!("seed{seed}"));
        if seed == SEEDS[0] {
            let rows = commands::cmd_ablate(&cfg, &sd.join("ablation"), true, |r| {
                let mut log = std::io::stdout().lock();
                let _ = writeln!(log, "  ablation {:<11} {:?}", r.setting.label(), r.outcome.as_ref().map(|s| s.psnr));
            })
            .unwrap();
            let text = fs::read_to_string(sd.join("ablation").join(commands::ABLATION_FILE)).unwrap();
            let parsed = parse_report_csv(&text).unwrap();
            ablation_ok = text.lines().count() == 8 && parsed.len() == 7 && parsed.iter().all(|r| r.outcome.is_ok());
            let psnr_of = |s: Setting| rows.iter().find(|r| r.setting == s).unwrap().outcome.as_ref().map_or(f64::NAN, |x| x.psnr);
            full.push(psnr_of(Setting::Full));
            one_hot.push(psnr_of(Setting::OneHot));
            learnable.push(psnr_of(Setting::Learnable));
            let ckpt = sd.join("ablation").join(Setting::Full.slug()).join(CHECKPOINT_FILE);
            full_params = Some(commands::load_compatible(&cfg, &ckpt).unwrap());
        } else {
            full.push(train_run(&Setting::Full.apply(&cfg), &sd.join("full")));
            one_hot.push(train_run(&Setting::OneHot.apply(&cfg), &sd.join("one_hot")));
            learnable.push(train_run(&Setting::Learnable.apply(&cfg), &sd.join("learnable")));
        }
        let mut c_off = cfg.clone();
        c_off.model.hrffm = false;
        off.push(train_run(&c_off, &sd.join("off")));
    }

    let mut summary = String::from("seed,full,off,one_hot,learnable\n");
    for i in 0..SEEDS.len() {
        summary += &format!("{},{},{},{},{}\n", SEEDS[i], full[i], off[i], one_hot[i], learnable[i]);
    }
    fs::write(dir.join("summary.csv"), &summary).unwrap();

    let epe = translation_epe(&base, full_params.as_ref().unwrap());
    let still = untrained_identity_flow();
    let pass5 = epe <= 0.5 && still < 0.1;
    verdict(
        5,
        "flow sanity",
        pass5,
        &format!("trained EPE {epe:.4} px on 20 translation scenes; untrained identical-input flow max {still:.2e} px"),
    );

    let gains: Vec<f64> = full.iter().zip(&off).map(|(a, b)| a - b).collect();
    let wins6 = gains.iter().filter(|&&g| g >= 0.2).count();
    let pass6 = wins6 >= 4;
    verdict(
        6,
        "fusion on vs off",
        pass6,
        &format!(
            "{wins6}/5 seed pairs gain >= 0.2 dB; gains {:?} dB",
            gains.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>()
        ),
    );

    let over_oh = full.iter().zip(&one_hot).filter(|(f, o)| f >= o).count();
    let over_le = full.iter().zip(&learnable).filter(|(f, l)| f >= l).count();
    let pass7 = over_oh >= 3 && over_le >= 3 && ablation_ok;
    verdict(
        7,
        "ablation ordering",
        pass7,
        &format!("Full >= O.H. on {over_oh}/5 seeds, Full >= L.E. on {over_le}/5 seeds; one sweep produced all 7 rows: {ablation_ok}"),
    );
    finish(&[(5, pass5), (6, pass6), (7, pass7)]);
}
