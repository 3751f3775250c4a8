//! End-to-end runs of the command-line tool on tiny phantom corpora.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prior_attunet::runtime::RunConfig;

const BIN: &str = env!("CARGO_BIN_EXE_prior-attunet");

const TINY_CONFIG: &str = r#"
preset = "desk"
base_c = 4
midc = 4
input_size = [32, 32]
epochs = 2
batch_size = 4
vae_epochs = 2
vae_width = 4
vae_latent_dim = 16
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["gen-phantoms", "--out", p(&root.join("labeled")), "--count", "12", "--seed", "5"]);
        ok(&["gen-phantoms", "--out", p(&root.join("free")), "--count", "6", "--seed", "6", "--fluid-free"]);
        std::fs::write(root.join("tiny.toml"), TINY_CONFIG).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn print_config_round_trips() {
    for preset in ["desk", "full"] {
        let text = ok(&["print-config", "--preset", preset]);
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        let want = if preset == "desk" { RunConfig::desk() } else { RunConfig::default() };
        assert_eq!(cfg.model, want.model);
        assert_eq!(cfg.train, want.train);
    }
}

#[test]
fn gen_phantoms_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let msg = ok(&["gen-phantoms", "--out", p(&out), "--count", "3", "--seed", "1"]);
    assert!(msg.contains("wrote 3 phantoms"), "{msg}");
    for sub in ["images", "masks"] {
        assert_eq!(std::fs::read_dir(out.join(sub)).unwrap().count(), 3);
    }
    assert!(out.join("manifest.txt").exists());
    let again = dir.path().join("d");
    ok(&["gen-phantoms", "--out", p(&again), "--count", "3", "--seed", "1"]);
    let a = std::fs::read(out.join("masks/phantom_00002.png")).unwrap();
    let b = std::fs::read(again.join("masks/phantom_00002.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_pipeline_is_deterministic_and_exports_artifacts() {
    let ws = Workspace::new();
    let cfg = ws.path("tiny.toml");
    let prior = ws.path("prior.ckpt");
    let msg = ok(&["pretrain-prior", "--data", p(&ws.path("free")), "--out", p(&prior), "--config", p(&cfg)]);
    assert!(msg.contains("mean-image baseline"), "{msg}");

    let train = |name: &str| {
        let out = ws.path(name);
        let msg = ok(&["train", "--data", p(&ws.path("labeled")), "--prior", p(&prior), "--out", p(&out), "--config", p(&cfg)]);
        assert!(msg.contains("best epoch"), "{msg}");
        (std::fs::read(&out).unwrap(), std::fs::read_to_string(out.with_extension("csv")).unwrap())
    };
    let (ckpt_a, csv_a) = train("a.ckpt");
    let (ckpt_b, csv_b) = train("b.ckpt");
    assert_eq!(csv_a, csv_b);
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(csv_a.lines().count(), 3);
    assert!(csv_a.starts_with("split,epoch,dsc_bg,dsc_irf,dsc_srf,dsc_ped,mdsc\n"));

    let model = ws.path("a.ckpt");
    let eval = ok(&["eval", "--data", p(&ws.path("labeled")), "--model", p(&model), "--split", "test"]);
    assert!(eval.contains("test slice-macro") && eval.contains("test pixel-pooled"), "{eval}");

    let image = ws.path("labeled/images/phantom_00000.png");
    let mask_out = ws.path("pred.png");
    ok(&["infer", "--model", p(&model), "--image", p(&image), "--out", p(&mask_out)]);
    let pred = image::open(&mask_out).unwrap().to_luma8();
    assert_eq!(pred.dimensions(), (64, 64));
    assert!(pred.as_raw().iter().all(|&v| v <= 3));

    let maps = ws.path("maps");
    let listing = ok(&[
        "heatmaps",
        "--model",
        p(&model),
        "--image",
        p(&image),
        "--mask",
        p(&ws.path("labeled/masks/phantom_00000.png")),
        "--out",
        p(&maps),
    ]);
    let sizes: Vec<(String, u32)> = ["gt", "aspp", "up6", "up7", "up8", "up9"]
        .iter()
        .map(|stem| {
            let img = image::open(maps.join(format!("{stem}.pgm"))).unwrap().to_luma8();
            (stem.to_string(), img.width())
        })
        .collect();
    assert_eq!(sizes.iter().map(|(_, w)| *w).collect::<Vec<_>>(), vec![32, 2, 4, 8, 16, 32], "{listing}");
}

#[test]
fn user_errors_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = run(&["train", "--data", p(&missing), "--out", p(&dir.path().join("m.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "preset = \"desk\"\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["pretrain-prior", "--data", p(dir.path()), "--out", p(&dir.path().join("x")), "--config", p(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let corpus = dir.path().join("c");
    ok(&["gen-phantoms", "--out", p(&corpus), "--count", "4", "--seed", "2"]);
    let desk = dir.path().join("desk.toml");
    std::fs::write(&desk, "preset = \"desk\"\n").unwrap();
    let out = run(&["train", "--data", p(&corpus), "--out", p(&dir.path().join("m.ckpt")), "--config", p(&desk)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--prior"));

    let out = run(&["ablate", "--axis", "ppm", "--out", p(&dir.path().join("t.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown ablation axis"));
}
