use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmixseq::checkpoint::Checkpoint;
use gmixseq::metrics::{self, MetricReport};
use gmixseq::synthdata::{sequence_mean, Corpus};
use gmixseq::util::spearman;
use tempfile::TempDir;

// Small model so the CLI tests stay quick in debug builds.
const SMALL: [&str; 10] = [
    "--set",
    "enc_dim=16",
    "--set",
    "dec_dim=16",
    "--set",
    "map_dim=16",
    "--set",
    "enc_ff=32",
    "--set",
    "dec_ff=32",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gmixseq"));
    c.env_remove("GMIXSEQ_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Asserts failure with a single `error: <category>: ...` line and returns the category.
fn fails(args: &[&str]) -> (i32, String) {
    let o = run(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr not one line: {err:?}");
    let rest = lines[0].strip_prefix("error: ").expect("error prefix");
    let cat = rest.split(':').next().unwrap().to_string();
    (o.status.code().unwrap(), cat)
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn emotion_data(dir: &TempDir, name: &str, n: usize, t: usize) -> PathBuf {
    let out = p(dir, name);
    ok(&[
        "gen-data",
        "--kind",
        "emotion",
        "--k",
        "3",
        "--n",
        &n.to_string(),
        "--t",
        &t.to_string(),
        "--seed",
        "7",
        "--out",
        s(&out),
    ]);
    out
}

fn train_gmeg(
    dir: &TempDir,
    data: &Path,
    tag: &str,
    epochs: usize,
    extra: &[&str],
) -> (PathBuf, PathBuf) {
    let ck = p(dir, &format!("{tag}.ck"));
    let log = p(dir, &format!("{tag}.csv"));
    let e = epochs.to_string();
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--model",
        "gmeg",
        "--out",
        s(&ck),
        "--log",
        s(&log),
        "--epochs",
        &e,
        "--seed",
        "1",
    ];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    ok(&args);
    (ck, log)
}

#[test]
fn gen_data_counts_header_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = p(&dir, "a.txt");
    let b = p(&dir, "b.txt");
    for out in [&a, &b] {
        ok(&[
            "gen-data",
            "--kind",
            "emotion",
            "--k",
            "3",
            "--n",
            "20",
            "--t",
            "32",
            "--seed",
            "7",
            "--format",
            "text",
            "--out",
            s(out),
        ]);
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.lines().any(|l| l == "k 3"));
    assert_eq!(Corpus::load(&a).unwrap().len(), 60);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let bin_a = emotion_data(&dir, "a.bin", 20, 32);
    let bin_b = emotion_data(&dir, "b.bin", 20, 32);
    assert_eq!(
        std::fs::read(&bin_a).unwrap(),
        std::fs::read(&bin_b).unwrap()
    );
    let c = Corpus::load(&bin_a).unwrap();
    assert_eq!((c.len(), c.k, c.t), (60, 3, 32));
}

#[test]
fn gen_data_rejects_single_emotion() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "x.bin");
    let (code, cat) = fails(&[
        "gen-data",
        "--kind",
        "emotion",
        "--k",
        "1",
        "--n",
        "20",
        "--t",
        "32",
        "--seed",
        "7",
        "--out",
        s(&out),
    ]);
    assert_eq!((code, cat.as_str()), (2, "usage"));
    assert!(!out.exists());
}

#[test]
fn seed_env_fallback_and_flag_priority() {
    let dir = TempDir::new().unwrap();
    let flag = emotion_data(&dir, "flag.bin", 4, 8);
    let env = p(&dir, "env.bin");
    let o = bin()
        .env("GMIXSEQ_SEED", "7")
        .args([
            "gen-data",
            "--kind",
            "emotion",
            "--k",
            "3",
            "--n",
            "4",
            "--t",
            "8",
            "--out",
            s(&env),
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(&flag).unwrap(), std::fs::read(&env).unwrap());

    let both = p(&dir, "both.bin");
    let o = bin()
        .env("GMIXSEQ_SEED", "99")
        .args([
            "gen-data",
            "--kind",
            "emotion",
            "--k",
            "3",
            "--n",
            "4",
            "--t",
            "8",
            "--seed",
            "7",
            "--out",
            s(&both),
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(&flag).unwrap(), std::fs::read(&both).unwrap());

    let o = bin()
        .env("GMIXSEQ_SEED", "nope")
        .args([
            "gen-data",
            "--kind",
            "emotion",
            "--k",
            "3",
            "--n",
            "4",
            "--t",
            "8",
            "--out",
            s(&p(&dir, "z.bin")),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_log_shape_and_epoch0_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 4, 12);
    let (_, log1) = train_gmeg(&dir, &data, "r1", 3, &[]);
    let (_, log2) = train_gmeg(&dir, &data, "r2", 3, &[]);
    let l1 = std::fs::read_to_string(&log1).unwrap();
    let l2 = std::fs::read_to_string(&log2).unwrap();
    let rows: Vec<&str> = l1.lines().collect();
    assert_eq!(rows[0], "epoch,total,rec,cond,w,emo");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("0,"));
    assert_eq!(rows[1], l2.lines().nth(1).unwrap());
    assert_eq!(l1, l2);
}

#[test]
fn train_fifty_epochs_reduces_reconstruction() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 4, 12);
    let (_, log) = train_gmeg(&dir, &data, "long", 50, &["--lr", "1e-3"]);
    let text = std::fs::read_to_string(&log).unwrap();
    let rec: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rec.len(), 50);
    assert!(rec[49] < rec[0], "rec {} -> {}", rec[0], rec[49]);
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 2, 8);
    let cfg = p(&dir, "run.cfg");
    std::fs::write(&cfg, "epochs=4\nseed=5\n").unwrap();
    let ck = p(&dir, "c.ck");
    let log = p(&dir, "c.csv");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--model",
        "gmeg",
        "--out",
        s(&ck),
        "--log",
        s(&log),
        "--config",
        s(&cfg),
        "--epochs",
        "2",
    ];
    args.extend_from_slice(&SMALL);
    ok(&args);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
    let c = Checkpoint::load(&ck).unwrap();
    assert_eq!((c.epoch, c.seed), (2, 5));
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 2, 8);
    let (code, cat) = fails(&[
        "train",
        "--data",
        s(&data),
        "--model",
        "gmeg",
        "--out",
        s(&p(&dir, "c.ck")),
        "--log",
        s(&p(&dir, "c.csv")),
        "--set",
        "bogus=1",
    ]);
    assert_eq!((code, cat.as_str()), (2, "usage"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 3, 8);
    let (full, full_log) = train_gmeg(&dir, &data, "full", 4, &[]);
    let (part, part_log) = train_gmeg(&dir, &data, "part", 2, &[]);
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--model",
        "gmeg",
        "--out",
        s(&part),
        "--log",
        s(&part_log),
        "--epochs",
        "4",
        "--seed",
        "1",
        "--resume",
        s(&part),
    ];
    args.extend_from_slice(&SMALL);
    ok(&args);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&part).unwrap());
    assert_eq!(
        std::fs::read_to_string(&full_log).unwrap(),
        std::fs::read_to_string(&part_log).unwrap()
    );
}

#[test]
fn divergence_aborts_and_keeps_last_good_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 3, 8);
    let (ck, log) = train_gmeg(&dir, &data, "good", 2, &[]);
    let before = std::fs::read(&ck).unwrap();
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--model",
        "gmeg",
        "--out",
        s(&ck),
        "--log",
        s(&log),
        "--epochs",
        "6",
        "--seed",
        "1",
        "--lr",
        "1e300",
        "--save-every",
        "1",
        "--resume",
        s(&ck),
    ];
    args.extend_from_slice(&SMALL);
    let (code, cat) = fails(&args);
    assert_eq!((code, cat.as_str()), (1, "diverged"));
    assert_eq!(std::fs::read(&ck).unwrap(), before);
    assert_eq!(Checkpoint::load(&ck).unwrap().epoch, 2);
}

#[test]
fn interpolate_endpoints_match_samples_and_table() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 4, 8);
    // Enough training that the decoder actually responds to the emotion.
    let (ck, _) = train_gmeg(&dir, &data, "m", 40, &["--lr", "1e-3"]);
    let path = p(&dir, "i.bin");
    let table = p(&dir, "i.csv");
    ok(&[
        "interpolate",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--e1",
        "0",
        "--e2",
        "2",
        "--seed",
        "11",
        "--out",
        s(&path),
        "--table",
        s(&table),
    ]);
    let s1 = p(&dir, "s1.bin");
    let s2 = p(&dir, "s2.bin");
    ok(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--emotion",
        "0",
        "--count",
        "1",
        "--seed",
        "11",
        "--out",
        s(&s1),
    ]);
    ok(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--emotion",
        "2",
        "--count",
        "1",
        "--seed",
        "11",
        "--out",
        s(&s2),
    ]);

    let sweep = Corpus::load(&path).unwrap();
    assert_eq!(sweep.len(), 11);
    let e1 = &Corpus::load(&s1).unwrap().records[0].coefs;
    let e2 = &Corpus::load(&s2).unwrap().records[0].coefs;
    assert_eq!(sweep.records[0].coefs.data(), e2.data());
    assert_eq!(sweep.records[10].coefs.data(), e1.data());

    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(text.lines().next().unwrap(), "alpha,p_e1,p_e2,e_ppl");
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0][3], 0.0);
    let alpha: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let pe1: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    assert!(spearman(&alpha, &pe1) > 0.9, "p(e1) {pe1:?}");
}

#[test]
fn interpolate_validates_alphas() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 2, 8);
    let (ck, _) = train_gmeg(&dir, &data, "m", 1, &[]);
    let (code, _) = fails(&[
        "interpolate",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--e1",
        "0",
        "--e2",
        "1",
        "--alphas",
        "0,1.5",
        "--out",
        s(&p(&dir, "i.bin")),
        "--table",
        s(&p(&dir, "i.csv")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn eval_reports_match_library() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 3, 8);
    let line = ok(&[
        "eval",
        "--metric",
        "pcm",
        "--input",
        s(&data),
        "--reference",
        s(&data),
    ]);
    let r = MetricReport::parse_line(line.trim()).unwrap();
    assert_eq!((r.name.as_str(), r.value), ("pcm", 1.0));

    let out = p(&dir, "div.txt");
    let line = ok(&[
        "eval",
        "--metric",
        "div",
        "--input",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(std::fs::read_to_string(&out).unwrap().trim(), line.trim());
    let c = Corpus::load(&data).unwrap();
    let emb: Vec<Vec<f64>> = c.records.iter().map(|r| sequence_mean(&r.coefs)).collect();
    let r = MetricReport::parse_line(line.trim()).unwrap();
    assert_eq!(r.value, metrics::div(&emb).unwrap());
    let inputs: Vec<_> = c.records.iter().map(|r| &r.coefs).collect();
    assert_eq!(r.provenance, metrics::provenance_hash(&inputs));
}

#[test]
fn eval_div_of_one_sequence_fails() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 2, 8);
    let (ck, _) = train_gmeg(&dir, &data, "m", 1, &[]);
    let one = p(&dir, "one.bin");
    ok(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--emotion",
        "1",
        "--count",
        "1",
        "--out",
        s(&one),
    ]);
    let (code, cat) = fails(&["eval", "--metric", "div", "--input", s(&one)]);
    assert_eq!((code, cat.as_str()), (2, "usage"));
}

#[test]
fn motion_pipeline_and_cross_kind_rejection() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "m.bin");
    ok(&[
        "gen-data",
        "--kind",
        "motion",
        "--n",
        "3",
        "--t",
        "16",
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    let ck = p(&dir, "n.ck");
    let log = p(&dir, "n.csv");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--model",
        "nfmg",
        "--out",
        s(&ck),
        "--log",
        s(&log),
        "--epochs",
        "2",
        "--set",
        "enc_dim=16",
        "--set",
        "dec_dim=16",
        "--set",
        "latent_dim=4",
    ]);
    assert_eq!(
        std::fs::read_to_string(&log)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
        "epoch,total,rec,kl,vel"
    );
    let out = p(&dir, "gen.bin");
    ok(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--repeat",
        "3",
        "--count",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(Corpus::load(&out).unwrap().len(), 6);
    for metric in ["div", "ba", "e-ppl", "e-pdv"] {
        ok(&["eval", "--metric", metric, "--input", s(&out)]);
    }
    let info = ok(&["inspect-checkpoint", "--checkpoint", s(&ck)]);
    assert!(info.lines().any(|l| l == "kind=nfmg"));

    let (code, cat) = fails(&[
        "interpolate",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--e1",
        "0",
        "--e2",
        "1",
        "--out",
        s(&p(&dir, "i.bin")),
        "--table",
        s(&p(&dir, "i.csv")),
    ]);
    assert_eq!((code, cat.as_str()), (1, "kind"));
    let (_, cat) = fails(&[
        "train",
        "--data",
        s(&data),
        "--model",
        "gmeg",
        "--out",
        s(&p(&dir, "g.ck")),
        "--log",
        s(&p(&dir, "g.csv")),
        "--resume",
        s(&ck),
    ]);
    assert_eq!(cat, "kind");
}

#[test]
fn corrupt_and_future_checkpoints_are_refused() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 2, 8);
    let (ck, _) = train_gmeg(&dir, &data, "m", 1, &[]);
    let bytes = std::fs::read(&ck).unwrap();

    let trunc = p(&dir, "t.ck");
    std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
    let (_, cat) = fails(&["inspect-checkpoint", "--checkpoint", s(&trunc)]);
    assert_eq!(cat, "checksum");

    let mut future = bytes[..bytes.len() - 4].to_vec();
    future[8..12].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast::hash(&future);
    future.extend_from_slice(&crc.to_le_bytes());
    let fut = p(&dir, "f.ck");
    std::fs::write(&fut, &future).unwrap();
    let (_, cat) = fails(&["inspect-checkpoint", "--checkpoint", s(&fut)]);
    assert_eq!(cat, "version");
}

#[test]
fn commands_leave_inputs_untouched() {
    let dir = TempDir::new().unwrap();
    let data = emotion_data(&dir, "d.bin", 2, 8);
    let before = std::fs::read(&data).unwrap();
    let (ck, _) = train_gmeg(&dir, &data, "m", 1, &[]);
    let ck_before = std::fs::read(&ck).unwrap();
    ok(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--emotion",
        "0",
        "--out",
        s(&p(&dir, "s.bin")),
    ]);
    ok(&[
        "interpolate",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--e1",
        "0",
        "--e2",
        "1",
        "--out",
        s(&p(&dir, "i.bin")),
        "--table",
        s(&p(&dir, "i.csv")),
    ]);
    ok(&[
        "eval",
        "--metric",
        "pcm",
        "--input",
        s(&data),
        "--reference",
        s(&data),
    ]);
    ok(&["inspect-checkpoint", "--checkpoint", s(&ck)]);
    assert_eq!(std::fs::read(&data).unwrap(), before);
    assert_eq!(std::fs::read(&ck).unwrap(), ck_before);
}

#[test]
fn help_succeeds_and_bad_verb_is_usage() {
    assert!(run(&["--help"]).status.success());
    let (code, cat) = fails(&["frobnicate"]);
    assert_eq!((code, cat.as_str()), (2, "usage"));
}
