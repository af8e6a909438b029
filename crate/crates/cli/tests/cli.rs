use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_damage-transfer"));
    c.env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn write_config(dir: &Path) -> PathBuf {
    let out = dir.join("results");
    let text = format!(
        r#"name = "cli-toy"
output_dir = {out:?}
save_checkpoints = true
input_size = [16, 16]

[grid]
datasets = ["toy_a", "toy_b"]
backbones = ["cbr_tiny"]
strategies = ["random_init", "in_domain"]
upstreams = ["toy_a"]

[train]
epochs = 1
batch_size = 16
runs = 1

[[dataset]]
name = "toy_a"
[dataset.toy]
height = 16
width = 16
task_kind = "binary"
items_per_class = 10
seed = 1
domain = 0

[[dataset]]
name = "toy_b"
[dataset.toy]
height = 16
width = 16
task_kind = "binary"
items_per_class = 10
seed = 2
domain = 1

[[reference]]
label = "published"
dataset = "toy_b"
value = "0.90"
"#
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn find_file(root: &Path, name: &str) -> Option<PathBuf> {
    for entry in std::fs::read_dir(root).ok()? {
        let p = entry.ok()?.path();
        if p.is_dir() {
            if let Some(f) = find_file(&p, name) {
                return Some(f);
            }
        } else if p.file_name().is_some_and(|n| n == name) {
            return Some(p);
        }
    }
    None
}

#[test]
fn full_pipeline_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("results");

    let s = ok(bin().arg("register-data").arg("--config").arg(&cfg).output().unwrap());
    assert!(s.contains("toy_a") && s.contains("toy_b"), "{s}");
    assert!(out.join("datasets/toy_a.json").is_file());
    assert!(out.join("datasets/toy_b/manifest.csv").is_file());

    let s = ok(bin().args(["splits", "--config"]).arg(&cfg).output().unwrap());
    assert!(s.contains("train"), "{s}");
    let split_a = std::fs::read_to_string(out.join("splits/toy_a.json")).unwrap();
    // same seed, same split
    ok(bin().args(["splits", "--config"]).arg(&cfg).output().unwrap());
    assert_eq!(split_a, std::fs::read_to_string(out.join("splits/toy_a.json")).unwrap());
    // a different seed conflicts with the saved split
    let clash = bin()
        .args(["splits", "--seed", "99", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!clash.status.success());

    let s = ok(bin().args(["run", "--config"]).arg(&cfg).output().unwrap());
    assert!(s.contains("0 failed"), "{s}");
    let results = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    let n = results.lines().count();
    assert!(n >= 3, "{results}");

    // a second run without --resume refuses to touch the store
    let again = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!again.status.success());
    let s = ok(bin().args(["run", "--resume", "--config"]).arg(&cfg).output().unwrap());
    assert!(s.contains("0 runs executed"), "{s}");
    assert_eq!(
        std::fs::read_to_string(out.join("results.jsonl"))
            .unwrap()
            .lines()
            .count(),
        n
    );

    let s = ok(bin().args(["report", "--config"]).arg(&cfg).output().unwrap());
    assert!(s.contains("published"), "{s}");
    assert!(out.join("report/summary.csv").is_file());
    assert!(out.join("report/report.txt").is_file());

    let ckpt = find_file(&out.join("runs"), "model.json")
        .map(|p| p.parent().unwrap().to_path_buf())
        .expect("a saved checkpoint");
    let image = find_file(&out.join("datasets/toy_b"), "00000.png").unwrap();
    let cam_dir = tmp.path().join("cam");
    let s = ok(bin()
        .arg("gradcam")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--image")
        .arg(&image)
        .arg("--out")
        .arg(&cam_dir)
        .output()
        .unwrap());
    assert_eq!(s.lines().filter(|l| !l.starts_with("warning")).count(), 3, "{s}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cam_dir.join("00000_class0.json")).unwrap()).unwrap();
    assert_eq!(json["class_idx"], 0);
    assert!(cam_dir.join("00000_class0.png").is_file());
    assert!(cam_dir.join("00000_class0.npz").is_file());
}

#[test]
fn cell_filter_and_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("results");
    let key = "toy_b:cbr_tiny:random_init:-:full";
    let s = ok(bin()
        .args(["run", "--seed", "7", "--cells", key, "--config"])
        .arg(&cfg)
        .output()
        .unwrap());
    assert!(s.contains("1 runs executed"), "{s}");
    let line = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["cell_key"], key);
    assert_eq!(rec["seed"], 7);

    let unknown = bin()
        .args(["run", "--resume", "--cells", "nope", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!unknown.status.success());
    let no_config = bin().arg("run").output().unwrap();
    assert!(!no_config.status.success());
    assert!(String::from_utf8_lossy(&no_config.stderr).contains("--config"));
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = bin().args(["report", "--store"]).arg(&empty).output().unwrap();
    assert!(!r.status.success());
}

#[test]
fn shipped_configs_expand() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let expected = [
        ("initializations.toml", 6 * (4 + 3 * 3)),
        ("in_domain.toml", 30),
        ("combination.toml", 30),
        ("comparison.toml", 6 * 3 - 1),
        ("lowdata_sweep.toml", 2 * 4 * 5),
        ("toy.toml", 2 + 2),
    ];
    for (file, cells) in expected {
        let spec = damage_transfer::runner::ExperimentSpec::load(&dir.join(file)).unwrap();
        let grid = damage_transfer::runner::expand_grid(&spec).unwrap();
        assert_eq!(grid.cells.len(), cells, "{file}");
    }
}
