use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ganlab");

const SMALL: &str = r#"
[experiment]
algorithm = "vanilla"
steps = 60
eval_every = 20
eval_samples = 200

[model]
z_dim = 4
hidden = [16]

[data]
kind = "ring"
"#;

fn ganlab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn train_writes_artifacts_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("run");
    let o = ganlab(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,d_loss,g_loss,kl,js,w1,modes_covered,hq_frac,d_acc\n"));
    assert_eq!(metrics.lines().count(), 1 + 4);
    assert_eq!(stdout(&o), metrics);
    for f in ["samples.csv", "config.toml", "runlog.json", "histogram.svg"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let samples = ganlab::cli::read_samples(&out.join("samples.csv")).unwrap();
    assert_eq!((samples.rows, samples.cols), (200, 2));

    let e = ganlab(&["eval", "--runlog", out.to_str().unwrap()]);
    assert!(e.status.success());
    let text = stdout(&e);
    assert!(
        text.contains("algorithm: vanilla")
            && text.contains("final step 60")
            && text.contains("rescored"),
        "{text}"
    );
}

#[test]
fn seed_flag_overrides_config_and_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = ganlab(&[
            "train",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
            "--svg",
            "off",
        ]);
        assert!(o.status.success());
        assert!(!out.join("histogram.svg").exists());
        fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
}

#[test]
fn bad_config_exits_with_named_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        &SMALL.replace("z_dim = 4", "z_dim = 4\nwidth = 3"),
    );
    let o = ganlab(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("width"), "{err}");
}

#[test]
fn sweep_writes_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let body: String = SMALL
        .lines()
        .map(|l| {
            l.strip_prefix('[')
                .map_or_else(|| l.to_string(), |rest| format!("[base.{rest}"))
        })
        .collect::<Vec<_>>()
        .join("\n");
    let sweep =
        format!("seeds = [0, 1]\n\n[[axis]]\nkey = \"model.pack_k\"\nvalues = [1, 2]\n{body}");
    let cfg = write_config(dir.path(), "sweep.toml", &sweep);
    let out = dir.path().join("sweep");
    let o = ganlab(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    let lines: Vec<&str> = index.lines().collect();
    assert!(
        lines[0].starts_with("cell,model.pack_k,seed,status,step,"),
        "{}",
        lines[0]
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("3,2,1,completed,60,"), "{}", lines[4]);
    for i in 0..4 {
        assert!(out
            .join(format!("cell_{i:04}"))
            .join("metrics.csv")
            .is_file());
    }
}

#[test]
fn gradcheck_reports_every_check() {
    let o = ganlab(&["gradcheck", "--cases", "5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let checks = ganlab::gradcheck::check_names();
    for name in &checks {
        assert!(text.contains(name), "{name} not reported");
    }
    assert!(text.contains(&format!("all {} checks passed", checks.len())));
}

#[test]
fn compare_emits_a_table_row_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "small.toml",
        &format!("{SMALL}\n[diffusion]\ntimesteps = 20\n"),
    );
    let out = dir.path().join("cmp");
    let o = ganlab(&[
        "compare",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], ganlab::cli::COMPARE_HEADER);
    assert!(
        lines[1].starts_with("gan,vanilla,2,") && lines[2].starts_with("diffusion,ddpm,2,"),
        "{table}"
    );
    assert_eq!(fs::read_to_string(out.join("compare.csv")).unwrap(), table);
    assert!(out
        .join("diffusion")
        .join("seed_1")
        .join("metrics.csv")
        .is_file());
}
