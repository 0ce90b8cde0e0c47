use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cmalcd"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const TINY: &str = "[experiment]
scheduler = \"cmalcd\"
total_curriculum_steps = 6
eval_interval = 3
n_test_contexts = 2
n_generalization_contexts = 2
finetune_episodes = 1
seeds = [0, 1]
trace = true

[network]
episode_len = 20

[train]
hidden_dim = 8

[mock]
policy = \"constant\"
";

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["run"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--scheduler", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_and_version_exit_0() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mock-demo"));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2_with_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[train]\nhidden_dim = 8\nlr = -1.0\n").unwrap();
    let o = run(&["validate", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
    let o = run(&["validate", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    for name in ["default.toml", "full_scale.toml"] {
        let o = run(&["validate", "--config", repo_config(name).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("[curriculum]"));
    }
}

#[test]
fn default_config_echoes_the_built_in_defaults() {
    let from_file = stdout(&run(&["validate", "--config", repo_config("default.toml").to_str().unwrap()]));
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let built_in = stdout(&run(&["validate", "--config", empty.to_str().unwrap()]));
    assert_eq!(from_file, built_in);
}

#[test]
fn mock_demo_blends_every_third_step() {
    let o = run(&["mock-demo"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("step=0 source=fixed"));
    for (t, line) in lines.iter().enumerate() {
        let blended = line.ends_with("blended=true");
        assert_eq!(blended, t > 0 && t % 3 == 0, "{line}");
    }
}

#[test]
fn run_export_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let o = run(&["run", "--config", cfg_s, "--out", out_s, "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [0, 1] {
        let d = out.join(format!("seed_{seed}"));
        for f in [
            "run.jsonl",
            "evals.csv",
            "generalization.csv",
            "trajectory.csv",
            "correlation.csv",
            "policy.ckpt",
            "trace.csv",
        ] {
            assert!(d.join(f).is_file(), "seed {seed}: {f}");
        }
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("scope,metric,mean,std,n_seeds,single_seed,formatted"));
    assert!(summary.contains("test_final,mean_return"));

    let traj = out.join("seed_0/trajectory.csv");
    let before = std::fs::read(&traj).unwrap();
    std::fs::remove_file(&traj).unwrap();
    let o = run(&["export", "--out", out_s]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 4);
    assert_eq!(std::fs::read(&traj).unwrap(), before);

    let o = run(&["evaluate", "--config", cfg_s, "--out", out_s, "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[0].starts_with("seed,set,context_index,"));
    assert_eq!(rows.len(), 1 + 2 + 2);
    assert!(rows[1].starts_with("1,test,0,"));
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "1",
            "--mock-llm",
            "replay-best-perturbed",
        ]);
        assert_eq!(o.status.code(), Some(0));
        files.push(std::fs::read(out.join("seed_1/run.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn missing_outputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["export", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = tiny_config(dir.path());
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
