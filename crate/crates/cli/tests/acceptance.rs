//! Acceptance suite. Every criterion prints exactly one `PASS`/`FAIL` line
//! and then asserts, so the outcome is visible in plain `cargo test` output.
//! Tests hold a process-wide lock so runtime bounds are not skewed by sibling
//! tests competing for cores.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use embedmap::data::{
    self, chunk_text, generate_synthetic_pairs, split_ids, DataError, MapKind, PairDataset, SyntheticSpec,
};
use embedmap::format::FormatError;
use embedmap::nn::{self, Activation, LayerSpec, MlpModel, Mode, NnError};
use embedmap::numerics::{cosine_similarity, EmbeddingVector};
use embedmap::objective::{cosine_loss, cosine_loss_grad};
use embedmap::retrieval::{compare_retrieval, VectorStore};
use embedmap::rng::{self, Purpose};
use embedmap::training::{self, RunReport, TrainConfig};
use embedmap::Exec;
use rand::Rng;
use rand_distr::StandardNormal;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, ok: bool, detail: String) {
    // written to the raw handle so the line survives libtest's output capture
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
}

fn gaussian(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn ev(v: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector::new(v).unwrap()
}

#[test]
fn loss_identity() {
    let _g = serial();
    let start = Instant::now();
    let n = 1536;
    let mut r = rng::stream(11, Purpose::Sample, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let t = ev(gaussian(&mut r, n));
        let p = ev(gaussian(&mut r, n));
        let loss = cosine_loss(&t, &p).unwrap().value;
        let cos = cosine_similarity(&t, &p).unwrap();
        worst = worst.max((loss * n as f64 + cos).abs());
    }
    let reported = -0.00060648_f64;
    let implied = -0.932 / 1536.0;
    let rel = ((implied - reported) / reported).abs();
    let elapsed = start.elapsed();
    verdict(
        "loss identity",
        worst < 1e-9 && rel < 5e-4 && elapsed < Duration::from_secs(5),
        format!(
            "max |loss*N + cos| = {worst:.3e} (< 1e-9); -0.932/1536 = {implied:.8} vs {reported} rel diff {rel:.2e} (< 5e-4); {:.2}s (< 5s)",
            elapsed.as_secs_f64()
        ),
    );
}

/// Central difference on an f32 parameter: the step actually taken is
/// whatever survives rounding, so the quotient uses the realized spacing.
fn param_fd(
    model: &mut MlpModel,
    tensor: usize,
    idx: usize,
    h: f64,
    loss: &dyn Fn(&MlpModel) -> (f64, Vec<bool>),
) -> Option<f64> {
    let orig = model.param_tensors()[tensor][idx];
    let up = (orig as f64 + h) as f32;
    let down = (orig as f64 - h) as f32;
    model.param_tensors_mut()[tensor][idx] = up;
    let (lu, pu) = loss(model);
    model.param_tensors_mut()[tensor][idx] = down;
    let (ld, pd) = loss(model);
    model.param_tensors_mut()[tensor][idx] = orig;
    // a ReLU changing state between the two probes makes the quotient meaningless
    (pu == pd).then(|| (lu - ld) / (up as f64 - down as f64))
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs() / 1e-7
    } else {
        (a - n).abs() / scale
    }
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng::stream(12, Purpose::Sample, 0);
    let mut worst_loss: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(2..=64);
        let t = ev(gaussian(&mut r, n));
        let p = gaussian(&mut r, n);
        let g = cosine_loss_grad(&t, &ev(p.clone())).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let mut up = p.clone();
            up[i] += h;
            let mut down = p.clone();
            down[i] -= h;
            let fd = (cosine_loss(&t, &ev(up)).unwrap().value - cosine_loss(&t, &ev(down)).unwrap().value) / (2.0 * h);
            worst_loss = worst_loss.max(rel_err(g.as_slice()[i], fd));
        }
    }

    let mut worst_net: f64 = 0.0;
    let (mut checked, mut skipped) = (0usize, 0usize);
    let mut redrawn = 0;
    for m in 0..20u64 {
        // redraw until no output row vanishes: the loss gradient is undefined there
        let (mut model, batch, x, y, mode) = loop {
            let d_in = r.random_range(2..=8);
            let d_out = r.random_range(2..=8);
            let hidden: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(2..=10)).collect();
            let dropout = if m % 2 == 0 { 0.0 } else { 0.3 };
            let model = MlpModel::init(&nn::architecture(d_in, &hidden, d_out, dropout), r.random()).unwrap();
            let batch = r.random_range(1..=4);
            let x: Vec<f64> = gaussian(&mut r, batch * d_in);
            let y: Vec<Vec<f64>> = (0..batch).map(|_| gaussian(&mut r, d_out)).collect();
            let mode = Mode::Train { seed: r.random(), step: 3 };
            let tr = model.forward_batch(&x, batch, mode, Exec::Sequential).unwrap();
            if (0..batch).all(|b| tr.output_row(b).iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-3) {
                break (model, batch, x, y, mode);
            }
            redrawn += 1;
        };
        let d_out = model.output_dim();

        let loss = |model: &MlpModel| -> (f64, Vec<bool>) {
            let tr = model.forward_batch(&x, batch, mode, Exec::Sequential).unwrap();
            let mut l = 0.0;
            for (b, yb) in y.iter().enumerate() {
                l += cosine_loss(&ev(yb.clone()), &ev(tr.output_row(b).to_vec())).unwrap().value;
            }
            let pattern = tr.layers.iter().flat_map(|lt| lt.pre.iter().map(|z| *z > 0.0)).collect();
            (l / batch as f64, pattern)
        };

        let tr = model.forward_batch(&x, batch, mode, Exec::Sequential).unwrap();
        let mut upstream = Vec::with_capacity(batch * d_out);
        for (b, yb) in y.iter().enumerate() {
            let g = cosine_loss_grad(&ev(yb.clone()), &ev(tr.output_row(b).to_vec())).unwrap();
            upstream.extend(g.as_slice().iter().map(|v| v / batch as f64));
        }
        let mut grads = nn::Gradients::zeros_like(&model);
        model.backward_batch_into(&tr, &upstream, Exec::Sequential, &mut grads).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

        for (ti, tensor) in analytic.iter().enumerate() {
            for (i, &a) in tensor.iter().enumerate() {
                match param_fd(&mut model, ti, i, 1e-4, &loss) {
                    Some(fd) => {
                        worst_net = worst_net.max(rel_err(a, fd));
                        checked += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "gradient correctness",
        worst_loss < 1e-4 && worst_net < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "loss grad max rel err {worst_loss:.2e} over 200 points; network max rel err {worst_net:.2e} over {checked} parameters of 20 models ({skipped} skipped at ReLU kinks, {redrawn} models redrawn for a vanishing output); {:.1}s (< 30s)",
            elapsed.as_secs_f64()
        ),
    );
}

/// One synth -> split -> train -> eval run through the binary.
struct PipelineRun {
    dir: PathBuf,
    elapsed: Duration,
}

fn embedmap(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_embedmap")).current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "embedmap {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
}

fn run_pipeline(dir: PathBuf, noise: &str) -> PipelineRun {
    std::fs::create_dir_all(&dir).unwrap();
    let start = Instant::now();
    embedmap(&dir, &["synth", "--n", "5000", "--d-in", "768", "--d-out", "1536", "--seed", "2024", "--noise", noise]);
    embedmap(&dir, &["split", "--pairs", "pairs.v2vp", "--test-frac", "0.2", "--val-frac", "0.2", "--seed", "7"]);
    embedmap(
        &dir,
        &["train", "--pairs", "pairs.v2vp", "--split", "split.txt", "--epochs", "20", "--batch", "32", "--seed", "1"],
    );
    embedmap(
        &dir,
        &["eval", "--model", "model.v2vm", "--pairs", "pairs.v2vp", "--split", "split.txt", "--report", "eval.json"],
    );
    PipelineRun { dir, elapsed: start.elapsed() }
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

fn clean_run() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| run_pipeline(scratch().join("clean-a"), "0"))
}

fn noisy_run() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| run_pipeline(scratch().join("noisy"), "0.1"))
}

fn report(run: &PipelineRun, name: &str) -> RunReport {
    RunReport::load(&run.dir.join(name)).unwrap()
}

fn test_mean(run: &PipelineRun) -> f64 {
    report(run, "eval.json").stats.unwrap().mean
}

#[test]
fn synthetic_recovery() {
    let _g = serial();
    let run = clean_run();
    let train = report(run, "report.json");
    let first = train.epochs.first().and_then(|m| m.val_loss).unwrap();
    let last = train.epochs.last().and_then(|m| m.val_loss).unwrap();
    let mean = test_mean(run);
    verdict(
        "synthetic recovery (default architecture)",
        mean >= 0.95 && last < first && run.elapsed < Duration::from_secs(600),
        format!(
            "held-out mean cosine {mean:.4} (>= 0.95); val loss {first:.6e} -> {last:.6e}; {:.0}s (< 600s)",
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn synthetic_recovery_narrow() {
    let _g = serial();
    let start = Instant::now();
    let spec =
        SyntheticSpec { n: 5000, d_in: 768, d_out: 1536, seed: 2024, noise_sigma: 0.0, map_kind: MapKind::Linear };
    let (pairs, _) = generate_synthetic_pairs(&spec).unwrap();
    let split = data::split_dataset(&pairs, 0.2, 0.2, 7).unwrap();
    let cfg = TrainConfig { epochs: 20, batch_size: 32, seed: 1, hidden: vec![256; 3], ..TrainConfig::default() };
    let model = MlpModel::init(&cfg.architecture(768, 1536), cfg.seed).unwrap();
    let out = training::train(model, &pairs, &split, &cfg).unwrap();
    let first = out.history.first().and_then(|m| m.val_loss).unwrap();
    let last = out.history.last().and_then(|m| m.val_loss).unwrap();
    let mean = training::evaluate(&out.model, &pairs, &split.test).unwrap().stats.mean;
    let elapsed = start.elapsed();
    verdict(
        "synthetic recovery (hidden widths 256)",
        mean >= 0.95 && last < first && elapsed < Duration::from_secs(60),
        format!(
            "held-out mean cosine {mean:.4} (>= 0.95); val loss {first:.6e} -> {last:.6e}; {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn noise_degradation() {
    let _g = serial();
    let clean = test_mean(clean_run());
    let noisy = test_mean(noisy_run());
    verdict(
        "noise degradation",
        noisy < clean,
        format!("held-out mean cosine sigma=0.1 {noisy:.4} < sigma=0 {clean:.4}"),
    );
}

#[test]
fn retrieval_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng::stream(13, Purpose::Sample, 0);
    let (n, d) = (200, 16);
    let (mut mismatches, mut worst_score, mut overlap_failures) = (0usize, 0.0f64, 0usize);
    for _ in 0..100 {
        let mut vectors: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, d)).collect();
        // exact duplicates force ties so the id tie rule is exercised
        for _ in 0..10 {
            let (a, b) = (r.random_range(0..n), r.random_range(0..n));
            vectors[b] = vectors[a].clone();
        }
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        let entries: Vec<(u64, &[f64])> = ids.iter().zip(&vectors).map(|(&id, v)| (id, v.as_slice())).collect();
        let store = VectorStore::build(&entries).unwrap();
        let q = gaussian(&mut r, d);
        let k = if r.random_bool(0.2) { n + 5 } else { r.random_range(1..=n) };
        let got = store.top_k(&q, k).unwrap();

        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut oracle: Vec<(u64, f64)> = ids
            .iter()
            .zip(&vectors)
            .map(|(&id, v)| {
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dotp: f64 = v.iter().zip(&q).map(|(a, b)| a * b).sum();
                (id, dotp / (vn * qn))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(k.min(n));
        if got.hits.len() != oracle.len() || got.hits.iter().zip(&oracle).any(|(h, o)| h.id != o.0) {
            mismatches += 1;
        }
        for (h, o) in got.hits.iter().zip(&oracle) {
            worst_score = worst_score.max((h.score - o.1).abs());
        }
        let cmp = compare_retrieval(&store, &q, &q, 5).unwrap();
        if cmp.overlap != 1.0 {
            overlap_failures += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "retrieval oracle",
        mismatches == 0 && worst_score < 1e-9 && overlap_failures == 0 && elapsed < Duration::from_secs(5),
        format!(
            "{mismatches} ranking mismatches over 100 stores; max score diff {worst_score:.2e} (< 1e-9); {overlap_failures} overlap@5 != 1 for identical queries; {:.2}s (< 5s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn split_arithmetic() {
    let _g = serial();
    let ids: Vec<u64> = (0..50_000).collect();
    let s = split_ids(&ids, data::DEFAULT_TEST_FRAC, data::DEFAULT_VAL_FRAC, 1).unwrap();
    let sizes = (s.test.len(), s.validation.len(), s.train.len());
    verdict(
        "split arithmetic",
        sizes == (10_000, 8_000, 32_000),
        format!("test/validation/train = {}/{}/{} (expected 10000/8000/32000)", sizes.0, sizes.1, sizes.2),
    );
}

#[test]
fn chunking() {
    let _g = serial();
    let text: String = (0..300).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
    let sizes: Vec<usize> = chunk_text(&text, 128).iter().map(|c| c.split_whitespace().count()).collect();
    let mut r = rng::stream(14, Purpose::Sample, 0);
    let mut failures = 0;
    for _ in 0..1000 {
        let words = r.random_range(0..600);
        let text: String = (0..words)
            .map(|_| {
                let len = r.random_range(1..8);
                let word: String = (0..len).map(|_| r.random_range(b'a'..=b'z') as char).collect();
                let sep = [" ", "  ", "\n", "\t"][r.random_range(0..4)];
                format!("{word}{sep}")
            })
            .collect();
        let size = r.random_range(1..200);
        let joined: Vec<String> = chunk_text(&text, size)
            .iter()
            .flat_map(|c| c.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        let original: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if joined != original {
            failures += 1;
        }
    }
    verdict(
        "chunking",
        sizes == [128, 128, 44] && failures == 0,
        format!("300 words -> {sizes:?} (expected [128, 128, 44]); {failures}/1000 random texts broke word-sequence identity"),
    );
}

#[test]
fn format_round_trips() {
    let _g = serial();
    let start = Instant::now();
    let model = MlpModel::init(&nn::default_architecture(), 5).unwrap();
    let bytes = model.serialize();
    let model_ok = MlpModel::deserialize(&bytes).unwrap().serialize() == bytes;
    let size = bytes.len() as u64;

    let spec = SyntheticSpec { n: 50, d_in: 12, d_out: 20, seed: 3, noise_sigma: 0.1, map_kind: MapKind::LinearTanh };
    let (pairs, _) = generate_synthetic_pairs(&spec).unwrap();
    let pbytes = pairs.to_bytes();
    let pairs_ok = PairDataset::from_bytes(&pbytes).unwrap().to_bytes() == pbytes;

    let small =
        MlpModel::init(&[LayerSpec { in_dim: 3, out_dim: 2, activation: Activation::Linear, dropout_rate: 0.0 }], 1)
            .unwrap()
            .serialize();
    let mut errors = Vec::new();
    for (name, file) in [("model", small.clone()), ("pairs", pbytes.clone())] {
        let load = |b: &[u8]| -> Option<FormatError> {
            if name == "model" {
                match MlpModel::deserialize(b) {
                    Err(NnError::Format(e)) => Some(e),
                    _ => None,
                }
            } else {
                match PairDataset::from_bytes(b) {
                    Err(DataError::Format(e)) => Some(e),
                    _ => None,
                }
            }
        };
        let mut bad_magic = file.clone();
        bad_magic[0] ^= 0xff;
        let truncated = &file[..file.len() - 3];
        let mut flipped = file.clone();
        let mid = file.len() / 2;
        flipped[mid] ^= 0x01;
        let magic_ok = matches!(load(&bad_magic), Some(FormatError::BadMagic { .. }));
        let trunc_ok = matches!(load(truncated), Some(FormatError::TruncatedFile { .. }));
        let crc_ok = matches!(load(&flipped), Some(FormatError::ChecksumMismatch { .. }));
        if !(magic_ok && trunc_ok && crc_ok) {
            errors.push(format!("{name}: magic {magic_ok} truncation {trunc_ok} checksum {crc_ok}"));
        }
    }
    let limit = 80u64 << 20;
    let elapsed = start.elapsed();
    verdict(
        "format round-trips",
        model_ok && pairs_ok && errors.is_empty() && size < limit && elapsed < Duration::from_secs(10),
        format!(
            "model round-trip {model_ok}, pair round-trip {pairs_ok}; corruption errors {}; default model {size} bytes (< {limit}); {:.2}s (< 10s)",
            if errors.is_empty() { "all designated".to_string() } else { errors.join(", ") },
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn cli_determinism() {
    let _g = serial();
    let a = clean_run();
    let b = run_pipeline(scratch().join("clean-b"), "0");
    let mut differing = Vec::new();
    for f in ["pairs.v2vp", "split.txt", "model.v2vm", "report.json", "eval.json"] {
        if std::fs::read(a.dir.join(f)).unwrap() != std::fs::read(b.dir.join(f)).unwrap() {
            differing.push(f);
        }
    }
    verdict(
        "CLI determinism",
        differing.is_empty(),
        format!(
            "two full pipeline runs ({:.0}s, {:.0}s); differing artifacts: {differing:?}",
            a.elapsed.as_secs_f64(),
            b.elapsed.as_secs_f64()
        ),
    );
}
