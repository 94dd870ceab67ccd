use std::path::Path;
use std::process::{Command, Output};

const TASK: &str = r#"
vocab_size = 24
ambiguous = 3
train = 40
valid = 6
test = 6
distractor_classes = 4
global_rows = 4
regions = 3
d_c = 8
"#;

fn run_config(data: &Path) -> String {
    format!(
        r#"
seed = 3

[data]
dir = "{}"

[model]
enc_layers = 1
dec_layers = 1
heads = 2
d_model = 8
d_ff = 16
d_c = 8
global_rows = 4
regions = 3
iterations = 2

[train]
epochs = 1
batch_tokens = 100
warmup = 10
dropout = 0.1
"#,
        data.display()
    )
}

fn dccn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dccn")).args(args).env_remove("DCCN_OUT").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn one_error_line(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("{code}: ")), "{err}");
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("task.toml"), TASK).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn gen(&self) -> String {
        let out = self.path("data");
        let o = dccn(&["gen", "--config", &self.path("task.toml"), "--out", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    }

    fn train(&self, variant: &str) -> String {
        let data = self.gen_once();
        std::fs::write(self.path("run.toml"), run_config(Path::new(&data))).unwrap();
        let out = self.path(&format!("run-{variant}"));
        let o = dccn(&["train", "--config", &self.path("run.toml"), "--variant", variant, "--deterministic", "--out", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    }

    fn gen_once(&self) -> String {
        let data = self.path("data");
        if Path::new(&data).exists() {
            data
        } else {
            self.gen()
        }
    }
}

#[test]
fn errors_are_one_coded_line() {
    one_error_line(&dccn(&["frobnicate"]), "E_USAGE");
    one_error_line(&dccn(&["gen"]), "E_USAGE");
    one_error_line(&dccn(&["translate", "--checkpoint", "/nonexistent.ckpt", "--input", "/nonexistent.txt"]), "E_IO");
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.toml"), "vocab_size = \"many\"\n").unwrap();
    one_error_line(&dccn(&["gen", "--config", &ws.path("bad.toml"), "--out", &ws.path("x")]), "E_CONFIG");
    std::fs::write(ws.path("junk.ckpt"), b"not a checkpoint").unwrap();
    one_error_line(
        &dccn(&["evaluate", "--checkpoint", &ws.path("junk.ckpt"), "--data", &ws.path("x")]),
        "E_FORMAT",
    );
    assert!(dccn(&["--help"]).status.success());
}

#[test]
fn gen_is_deterministic_and_refuses_a_full_directory() {
    let ws = Workspace::new();
    let out = ws.gen();
    let manifest = std::fs::read_to_string(Path::new(&out).join("train.manifest")).unwrap();
    assert_eq!(manifest.lines().count(), 40);
    let first = std::fs::read(Path::new(&out).join("train.src")).unwrap();

    let again = dccn(&["gen", "--config", &ws.path("task.toml"), "--out", &out]);
    one_error_line(&again, "E_USAGE");
    assert_eq!(std::fs::read(Path::new(&out).join("train.src")).unwrap(), first);

    let forced = dccn(&["gen", "--config", &ws.path("task.toml"), "--out", &out, "--force"]);
    assert!(forced.status.success());
    assert_eq!(std::fs::read(Path::new(&out).join("train.src")).unwrap(), first);

    let other = ws.path("other");
    assert!(dccn(&["gen", "--config", &ws.path("task.toml"), "--seed", "9", "--out", &other]).status.success());
    assert_ne!(std::fs::read(Path::new(&other).join("train.src")).unwrap(), first);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let ws = Workspace::new();
    let out = ws.path("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_dccn"))
        .args(["gen", "--config", &ws.path("task.toml")])
        .env("DCCN_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(&out).join("test.src").exists());
}

#[test]
fn train_translate_evaluate_inspect() {
    let ws = Workspace::new();
    let run = ws.train("full");
    let ckpt = format!("{run}/last.ckpt");
    for f in ["config.toml", "metrics.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(Path::new(&run).join(f).exists(), "{f}");
    }
    let data = ws.path("data");

    let o = dccn(&["translate", "--checkpoint", &ckpt, "--input", &format!("{data}/test.src"), "--manifest", &format!("{data}/test.manifest")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 6);

    one_error_line(&dccn(&["translate", "--checkpoint", &ckpt, "--input", &format!("{data}/test.src")]), "E_INPUT");
    one_error_line(&dccn(&["translate", "--checkpoint", &ckpt, "--variant", "text-only", "--input", &format!("{data}/test.src")]), "E_CONFIG");

    std::fs::write(ws.path("empty.src"), "").unwrap();
    let o = dccn(&["translate", "--checkpoint", &ckpt, "--input", &ws.path("empty.src")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let eval_out = ws.path("eval");
    let o = dccn(&["evaluate", "--checkpoint", &ckpt, "--data", &data, "--out", &eval_out]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.jsonl", "report.csv", "buckets.svg", "translations.txt"] {
        assert!(Path::new(&eval_out).join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(Path::new(&eval_out).join("report.jsonl")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(summary["sentences"], 6);
    assert!(summary["ambiguous_accuracy"].as_f64().is_some());

    let insp = ws.path("inspect");
    let o = dccn(&["inspect", "--checkpoint", &ckpt, "--data", &data, "--index", "2", "--out", &insp]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(Path::new(&insp).join("routing.csv")).unwrap();
    let sentence = std::fs::read_to_string(Path::new(&insp).join("sentence.txt")).unwrap();
    let translated = sentence.lines().nth(1).unwrap().split_whitespace().count();
    // timesteps x iterations x high-level capsules x (global rows + region slots)
    let rows = csv.lines().count() - 1;
    assert_eq!(rows, (translated + 1) * 2 * (4 + 3));
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (c, rho): (f64, f64) = (f[6].parse().unwrap(), f[7].parse().unwrap());
        assert_eq!(c, 1.0);
        assert!(rho.abs() <= 1f64.tanh());
    }
    for f in ["global_c.svg", "regional_rho.svg", "gate.csv", "gate.svg"] {
        assert!(Path::new(&insp).join(f).exists(), "{f}");
    }
    one_error_line(&dccn(&["inspect", "--checkpoint", &ckpt, "--data", &data, "--index", "99", "--out", &ws.path("i2")]), "E_INPUT");
}

#[test]
fn text_only_checkpoints_translate_without_features() {
    let ws = Workspace::new();
    let run = ws.train("text-only");
    let o = dccn(&["translate", "--checkpoint", &format!("{run}/last.ckpt"), "--input", &format!("{}/test.src", ws.path("data"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 6);
}
