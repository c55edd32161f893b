//! Acceptance checks: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvt_core::data::{parse_idx_images, synth_domain_pair, SynthConfig};
use tvt_core::dcm::{mutual_information, PredictionBatch};
use tvt_core::tam::patch_transferability;
use tvt_core::trainer::{evaluate, TrainConfig};
use tvt_core::vit::{PatchProbe, Transferability};
use tvt_core::{checkpoint, ModelConfig, Tape, Tensor, TvtModel};

const TVT: &str = env!("CARGO_BIN_EXE_tvt");

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_MIN_COORDS: u64 = 200;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const UNIT_T_TOL: f64 = 1e-12;
const MI_EXACT_TOL: f64 = 1e-12;
const MI_BOUND_SLACK: f64 = 1e-9;
const MI_BATCHES: usize = 1000;
const T_EXAMPLE: f64 = 0.881291;
const T_EXAMPLE_TOL: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-9;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
const TAM_GAIN: f64 = 0.02;
const DCM_GAIN: f64 = 0.05;
const CHANCE_MARGIN: f64 = 0.20;
const SHIFT_DROP: f64 = 0.10;

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn tvt(args: &[&str]) -> Output {
    Command::new(TVT).args(args).output().expect("tvt binary runs")
}

fn json_line(o: &Output) -> serde_json::Value {
    let out = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(out.lines().last().unwrap_or("null")).unwrap_or(serde_json::Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gradcheck(r: &mut Report) {
    let start = Instant::now();
    let o = tvt(&["gradcheck"]);
    let elapsed = start.elapsed();
    let v = json_line(&o);
    let coords = v["coordinates"].as_u64().unwrap_or(0);
    let err = v["max_relative_error"].as_f64().unwrap_or(f64::INFINITY);
    let modules: Vec<&str> = v["modules"]
        .as_array()
        .map(|a| a.iter().filter_map(|m| m.as_str()).collect())
        .unwrap_or_default();
    let covered = ["blocks", "tam", "disc_global", "disc_patch", "head"]
        .iter()
        .all(|m| modules.contains(m));
    let pass = o.status.code() == Some(0)
        && err <= GRADCHECK_TOL
        && coords >= GRADCHECK_MIN_COORDS
        && covered
        && elapsed <= GRADCHECK_BUDGET;
    r.record(
        1,
        "gradient check of the full objective",
        pass,
        format!(
            "max rel error {err:.3e} (tol {GRADCHECK_TOL:e}) over {coords} coords in {modules:?}, worst {}, {:.1}s",
            v["worst"]["parameter"],
            elapsed.as_secs_f64()
        ),
    );
}

fn unit_transferability(r: &mut Report) {
    let cfg = ModelConfig::default();
    let (model, store) = TvtModel::new(&cfg, 5).unwrap();
    let n = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images: Vec<f64> = (0..n * cfg.image_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let ones = vec![1.0; n * cfg.num_patches()];
    let logits = |mode: Transferability<'_>| {
        let mut tape = Tape::new();
        let f = model.vit.forward_features(&mut tape, &store, &images, n, None, mode).unwrap();
        let l = model.vit.classify(&mut tape, &store, f.class_state).unwrap();
        let mut out = tape.data(l).to_vec();
        out.extend_from_slice(tape.data(f.class_state));
        out
    };
    let (unit, vanilla) = (logits(Transferability::Fixed(&ones)), logits(Transferability::Vanilla));
    let diff = unit.iter().zip(&vanilla).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.record(
        2,
        "unit transferability reduces to the plain transformer",
        diff <= UNIT_T_TOL,
        format!("max |difference| {diff:.3e} (tol {UNIT_T_TOL:e})"),
    );
}

fn gradient_reversal(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let w: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut pass = true;
    for lambda in [0.0, 0.5, 1.0] {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![4, 6], x.clone()).unwrap());
        let y = tape.grl(xv, lambda);
        pass &= tape.data(y).iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits());
        let wv = tape.constant(Tensor::new(vec![4, 6], w.clone()).unwrap());
        let prod = tape.hadamard(y, wv).unwrap();
        let sq = tape.hadamard(prod, prod).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        let upstream = g.get(y).unwrap();
        pass &= g.get(xv).unwrap().iter().zip(upstream).all(|(gx, u)| *gx == -lambda * u);
    }
    r.record(
        3,
        "gradient reversal",
        pass,
        "forward bit-exact identity, backward exactly -lambda * upstream for lambda in {0, 0.5, 1}".into(),
    );
}

fn mutual_information_checks(r: &mut Report) {
    let same = mutual_information(&PredictionBatch::from_rows(&vec![vec![0.1, 0.6, 0.3]; 7]).unwrap());
    let k = 5;
    let one_hot: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let spread = mutual_information(&PredictionBatch::from_rows(&one_hot).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut bounded, mut invariant) = (true, true);
    for _ in 0..MI_BATCHES {
        let n = rng.gen_range(1..=32);
        let k = rng.gen_range(2..=10);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let sharp = rng.gen_range(1..=12);
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0f64..1.0).powi(sharp)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|v| v / total).collect()
            })
            .collect();
        let mi = mutual_information(&PredictionBatch::from_rows(&rows).unwrap());
        bounded &= mi >= -MI_BOUND_SLACK && mi <= (k as f64).ln() + MI_BOUND_SLACK;
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = rows.iter().map(|row| perm.iter().map(|&c| row[c]).collect()).collect();
        invariant &= mutual_information(&PredictionBatch::from_rows(&permuted).unwrap()) == mi;
    }
    let pass = same.abs() <= MI_EXACT_TOL && (spread - (k as f64).ln()).abs() <= MI_EXACT_TOL && bounded && invariant;
    r.record(
        4,
        "mutual information",
        pass,
        format!(
            "identical rows {same:.1e}, one-hot |I - ln {k}| {:.1e}, {MI_BATCHES} random batches bounded: {bounded}, \
             permutation exact: {invariant}",
            (spread - (k as f64).ln()).abs()
        ),
    );
}

fn transferability_values(r: &mut Report) {
    let t = patch_transferability(&[0.5, 0.0, 1.0, 0.3]).unwrap();
    let t = t.as_slice();
    let pass = t[0] == 1.0 && t[1] == 0.0 && t[2] == 0.0 && (t[3] - T_EXAMPLE).abs() <= T_EXAMPLE_TOL;
    r.record(
        5,
        "transferability values",
        pass,
        format!("t(0.5)={}, t(0)={}, t(1)={}, t(0.3)={:.7}", t[0], t[1], t[2], t[3]),
    );
}

fn schedule(r: &mut Report) {
    let cfg = TrainConfig::default();
    let s = cfg.schedule();
    let total = cfg.total_steps;
    let warmup_up = (1..=s.warmup).all(|i| s.at(i) > s.at(i - 1));
    let decay_down = (s.warmup + 1..=total).all(|i| s.at(i) <= s.at(i - 1));
    let pass = s.at(0) == 0.0 && s.at(500) == 0.03 && warmup_up && decay_down && s.at(total) == 0.0;
    r.record(
        6,
        "learning-rate schedule",
        pass,
        format!(
            "lr(0)={}, lr(500)={}, lr({total})={:e}, warmup increasing: {warmup_up}, decay nonincreasing: {decay_down}",
            s.at(0),
            s.at(500),
            s.at(total)
        ),
    );
}

struct RunResult {
    target: f64,
    source: f64,
    secs: f64,
}

fn train_run(dir: &Path, seed: u64, flag: Option<&str>) -> Option<RunResult> {
    let cfg = dir.join(format!("seed{seed}.cfg"));
    std::fs::write(&cfg, format!("seed = {seed}\n")).unwrap();
    let out = dir.join(format!("{}-{seed}", flag.unwrap_or("full").trim_start_matches('-')));
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend(flag);
    let start = Instant::now();
    let o = tvt(&args);
    let secs = start.elapsed().as_secs_f64();
    if !o.status.success() {
        eprintln!("train {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        return None;
    }
    let target = json_line(&o)["target_accuracy"].as_f64()?;
    let model_cfg = ModelConfig::default();
    let (model, template) = TvtModel::new(&model_cfg, 0).ok()?;
    let store = checkpoint::load(&out.join("final.ckpt"), &template).ok()?;
    let pair = synth_domain_pair(&SynthConfig::default()).ok()?;
    let source = evaluate(&model, &store, &pair.source_test, flag != Some("--source-only")).ok()?;
    Some(RunResult { target, source, secs })
}

fn ablation(r: &mut Report, dir: &Path) {
    let mut means = Vec::new();
    let mut slowest: f64 = 0.0;
    let mut ok = true;
    let mut source_only_source = 0.0;
    for (name, flag) in [("source-only", Some("--source-only")), ("+tam", Some("--no-dcm")), ("+tam+dcm", None)] {
        let mut accs = Vec::new();
        for seed in ABLATION_SEEDS {
            match train_run(dir, seed, flag) {
                Some(res) => {
                    println!(
                        "      {name} seed {seed}: target {:.4}, source {:.4}, {:.0}s",
                        res.target, res.source, res.secs
                    );
                    slowest = slowest.max(res.secs);
                    if name == "source-only" {
                        source_only_source += res.source / ABLATION_SEEDS.len() as f64;
                    }
                    accs.push(res.target);
                }
                None => ok = false,
            }
        }
        means.push(accs.iter().sum::<f64>() / ABLATION_SEEDS.len() as f64);
    }
    let (so, tam, dcm) = (means[0], means[1], means[2]);
    let chance = 1.0 / ModelConfig::default().classes as f64;
    let pass = ok
        && tam >= so + TAM_GAIN
        && dcm >= so + DCM_GAIN
        && so >= chance + CHANCE_MARGIN
        && source_only_source - so >= SHIFT_DROP
        && slowest <= RUN_BUDGET.as_secs_f64();
    r.record(
        7,
        "ablation over seeds 0, 1, 2",
        pass,
        format!(
            "source-only {:.1}%, +tam {:.1}% ({:+.1}), +tam+dcm {:.1}% ({:+.1}), chance {:.0}%, \
             source-only source-test {:.1}% (drop {:.1}), slowest run {slowest:.0}s",
            100.0 * so,
            100.0 * tam,
            100.0 * (tam - so),
            100.0 * dcm,
            100.0 * (dcm - so),
            100.0 * chance,
            100.0 * source_only_source,
            100.0 * (source_only_source - so)
        ),
    );
}

fn attention_dump(r: &mut Report, dir: &Path) {
    let corpus = dir.join("corpus");
    let checkpoint_path = dir.join("no-dcm-0").join("final.ckpt");
    let csv = dir.join("attention.csv");
    let exported = tvt(&["export-synth", "--out", s(&corpus)]);
    let images = corpus.join("target_test-images.idx3-ubyte");
    let dumped = tvt(&["attn-dump", "--checkpoint", s(&checkpoint_path), "--images", s(&images), "--out", s(&csv)]);
    if !exported.status.success() || !dumped.status.success() {
        r.record(8, "attention dump", false, String::from_utf8_lossy(&dumped.stderr).into_owned());
        return;
    }
    let cfg = ModelConfig::default();
    let rr = cfg.num_patches();
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let shape_ok = rows.iter().all(|row| row.len() == 1 + 3 * rr);
    let mut bounded = true;
    let mut t_in_range = true;
    for row in &rows {
        let (raw, t, eff) = (&row[1..=rr], &row[rr + 1..=2 * rr], &row[2 * rr + 1..]);
        bounded &= eff.iter().zip(raw).all(|(e, w)| e <= w);
        t_in_range &= t.iter().all(|v| (0.0..=1.0).contains(v));
    }

    // Full rows, class self-weight included, recomputed for the same images.
    let (model, template) = TvtModel::new(&cfg, 0).unwrap();
    let store = checkpoint::load(&checkpoint_path, &template).unwrap();
    let bytes = std::fs::read(&images).unwrap();
    let (count, _, _, pixels) = parse_idx_images(&bytes, &images).unwrap();
    let mut worst_sum: f64 = 0.0;
    let mut matches_csv = true;
    let per = cfg.image_len();
    for (c, chunk) in pixels.chunks(100 * per).enumerate() {
        let n = chunk.len() / per;
        let mut tape = Tape::new();
        let probe = PatchProbe {
            disc: &model.patch_disc,
            grl_lambda: 0.0,
        };
        let f = model
            .vit
            .forward_features(&mut tape, &store, chunk, n, Some(probe), Transferability::Discriminator)
            .unwrap();
        for i in 0..n {
            let rec = model.vit.attention_record(&tape, &f, i);
            worst_sum = worst_sum.max((rec.raw.iter().sum::<f64>() - 1.0).abs());
            let row = &rows[c * 100 + i];
            matches_csv &= rec.raw[1..].iter().zip(&row[1..=rr]).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-300);
        }
    }
    let pass = rows.len() == count && shape_ok && bounded && t_in_range && worst_sum <= ROW_SUM_TOL && matches_csv;
    r.record(
        8,
        "attention dump",
        pass,
        format!(
            "{} rows of {} columns, effective <= raw: {bounded}, t in [0,1]: {t_in_range}, \
             max |raw row sum - 1| {worst_sum:.1e} (tol {ROW_SUM_TOL:e})",
            rows.len(),
            1 + 3 * rr
        ),
    );
}

fn determinism(r: &mut Report, dir: &Path) {
    let cfg = dir.join("determinism.cfg");
    std::fs::write(&cfg, "total_steps = 60\nwarmup_steps = 20\neval_interval = 30\n").unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("determinism-{run}"));
        let o = tvt(&["train", "--config", s(&cfg), "--out", s(&out)]);
        let read = |name: &str| std::fs::read(out.join(name)).unwrap_or_default();
        outputs.push((o.status.success(), read("metrics.jsonl"), read("final.ckpt")));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let pass = a.0 && b.0 && !a.1.is_empty() && !a.2.is_empty() && a.1 == b.1 && a.2 == b.2;
    r.record(
        9,
        "determinism",
        pass,
        format!(
            "metrics.jsonl identical: {} ({} bytes), final.ckpt identical: {} ({} bytes)",
            a.1 == b.1,
            a.1.len(),
            a.2 == b.2,
            a.2.len()
        ),
    );
}

fn main() {
    // `cargo test -- --list` and similar harness probes expect no work.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut report = Report { failures: 0 };
    gradcheck(&mut report);
    unit_transferability(&mut report);
    gradient_reversal(&mut report);
    mutual_information_checks(&mut report);
    transferability_values(&mut report);
    schedule(&mut report);
    ablation(&mut report, dir.path());
    attention_dump(&mut report, dir.path());
    determinism(&mut report, dir.path());
    if report.failures > 0 {
        println!("{} acceptance criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
