use std::path::Path;
use std::process::{Command, Output};

fn barrons(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_barrons")).args(args).output().expect("binary runs")
}

fn run_to(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    barrons(&args)
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let flags = ["--learner", "ada", "--market", "blowup", "--n", "2", "--t-horizon", "64", "--seed", "3"];
    assert!(run_to(&a, &flags).status.success());
    assert!(run_to(&b, &flags).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let v = barrons(&["verify", a.to_str().unwrap()]);
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stdout));
}

#[test]
fn timings_are_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain.json");
    let timed = dir.path().join("timed.json");
    let flags = ["--learner", "eg", "--market", "iid_lognormal", "--n", "3", "--t-horizon", "20"];
    assert!(run_to(&plain, &flags).status.success());
    let mut with = flags.to_vec();
    with.push("--timings");
    assert!(run_to(&timed, &with).status.success());
    assert!(!std::fs::read_to_string(&plain).unwrap().contains("\"metadata\""));
    assert!(std::fs::read_to_string(&timed).unwrap().contains("\"metadata\""));
}

#[test]
fn tampered_trace_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    assert!(run_to(&path, &["--learner", "ada", "--market", "blowup", "--n", "2", "--t-horizon", "64"]).status.success());
    let mut trace: trace_text::Text = trace_text::from_path(&path);
    trace.set_x(4, &[0.7, 0.4]);
    std::fs::write(&path, trace.to_string()).unwrap();
    let v = barrons(&["verify", path.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&v.stdout);
    assert!(stdout.contains("simplex at round 5"), "{stdout}");
}

/// Minimal edits on the trace text without pulling a JSON crate into the CLI's dependencies.
mod trace_text {
    use std::path::Path;

    pub struct Text(String);

    pub fn from_path(p: &Path) -> Text {
        Text(std::fs::read_to_string(p).unwrap())
    }

    impl Text {
        /// Replace the `x` array of the record at zero-based index `k`.
        pub fn set_x(&mut self, k: usize, x: &[f64]) {
            let marker = format!("\"global_round\": {},", k + 1);
            let start = self.0.find(&marker).expect("record present");
            let x_at = start + self.0[start..].find("\"x\": [").unwrap();
            let end = x_at + self.0[x_at..].find(']').unwrap() + 1;
            let replacement = format!("\"x\": [{}]", x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "));
            self.0.replace_range(x_at..end, &replacement);
        }
    }

    impl std::fmt::Display for Text {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str(&self.0)
        }
    }
}

#[test]
fn exit_codes() {
    // validation: unknown learner, bad gamma, missing horizon
    assert_eq!(barrons(&["run", "--learner", "nope", "--market", "constant", "--n", "2", "--t-horizon", "8"]).status.code(), Some(1));
    assert_eq!(
        barrons(&["run", "--market", "constant", "--n", "2", "--t-horizon", "8", "--gamma", "0.05"]).status.code(),
        Some(1)
    );
    assert_eq!(barrons(&["run", "--market", "constant", "--n", "2"]).status.code(), Some(1));
    assert_eq!(barrons(&["run", "--market", "constant", "--n", "4", "--t-horizon", "3"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.json");
    let out = run_to(&path, &["--learner", "ons", "--market", "blowup", "--n", "2", "--t-horizon", "16", "--solver-tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let partial = std::fs::read_to_string(&path).unwrap();
    assert!(partial.contains("\"solver_failure\""));

    let missing = dir.path().join("missing.json");
    assert_eq!(barrons(&["verify", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn gen_then_run_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let out = barrons(&["gen", "--market", "cover_alternating", "--n", "2", "--t-horizon", "10", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().next(), Some("1,0.5"));

    let trace = dir.path().join("t.json");
    let out = run_to(&trace, &["--learner", "softbayes", "--csv", csv.to_str().unwrap(), "--n", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(barrons(&["verify", trace.to_str().unwrap()]).status.success());
}

#[test]
fn sweep_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("sweep");
    let out = barrons(&[
        "sweep", "--learner", "eg", "--market", "iid_lognormal", "--n", "2", "--t-values", "16,32", "--repetitions", "3",
        "--seed", "5", "--out", prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("learner,market,N,T,seed,regret,epochs,G,runtime_ms"));
    assert!(std::fs::read_to_string(prefix.with_extension("json")).unwrap().contains("growth_ratio"));

    let out = barrons(&["sweep", "--market", "blowup", "--n", "2", "--t-values", "32,16", "--out", prefix.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
