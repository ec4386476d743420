use std::path::Path;
use std::process::{Command, Output};

fn vaelab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaelab"))
        .args(args)
        .env("VAELAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--kind", "sphere", "--intrinsic", "2", "--ambient", "6", "--n", "1000", "--seed", "7"];
    let a = vaelab(dir.path(), &args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let path = stdout(&a).trim().to_string();
    let first = std::fs::read(&path).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().count(), 1001);
    assert_eq!(text.lines().next().unwrap(), "x1,x2,x3,x4,x5,x6");
    assert!(Path::new(&path).with_extension("json").exists());
    vaelab(dir.path(), &args);
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = vaelab(dir.path(), &["gen-data", "--kind", "sphere", "--intrinsic", "2", "--ambient", "3", "--n", "10"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "dataset = \"linear\"\nr_star = 5\nd = 3\nr = 2\n").unwrap();
    assert_eq!(vaelab(dir.path(), &["train", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(vaelab(dir.path(), &["reproduce", "cube"]).status.code(), Some(2));
    assert_eq!(vaelab(dir.path(), &["verify", "nothing"]).status.code(), Some(2));
}

#[test]
fn missing_config_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vaelab(dir.path(), &["train", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.toml"));
}

#[test]
fn train_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "dataset = \"linear\"\nr_star = 2\nd = 5\nr = 4\nseeds = [0]\nmode = \"gradient_flow\"\nloss_kind = \"L1\"\nstep_size = 0.001\nn_steps = 500\nsnapshot_every = 50\nn_eval = 500\n",
    )
    .unwrap();
    let o = vaelab(dir.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = stdout(&o).lines().last().unwrap().to_string();
    let run = Path::new(&run);
    for f in ["manifest.json", "report.json", "seed_0/trajectory.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let decay = run.join("seed_0/decay.csv");
    let p = vaelab(dir.path(), &["plot", "sv-decay", decay.to_str().unwrap()]);
    assert_eq!(p.status.code(), Some(0));
    let svg = std::fs::read_to_string(stdout(&p).trim()).unwrap();
    assert!(svg.starts_with("<svg"));
    let traj = run.join("seed_0/trajectory.csv");
    assert_eq!(vaelab(dir.path(), &["plot", "loss-curves", traj.to_str().unwrap()]).status.code(), Some(0));
    // a trajectory has no decay columns
    let bad = vaelab(dir.path(), &["plot", "sv-decay", traj.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("`tail`"));
}

#[test]
fn empty_input_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("empty.csv");
    std::fs::write(&f, "time,loss,loss_avg,eps,recon_mse\n").unwrap();
    let o = vaelab(dir.path(), &["plot", "loss-curves", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
}

#[test]
fn non_finite_run_exits_3_with_partial_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("blowup.toml");
    std::fs::write(&cfg, "dataset = \"linear\"\nr_star = 2\nd = 5\nr = 4\nseeds = [0]\nmode = \"gd\"\nstep_size = 50.0\nn_steps = 500\nsnapshot_every = 10\nn_eval = 500\n").unwrap();
    let o = vaelab(dir.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let run = stdout(&o).lines().last().unwrap().to_string();
    let traj = std::fs::read_to_string(Path::new(&run).join("seed_0/trajectory.csv")).unwrap();
    assert!(traj.lines().count() >= 2);
}

#[test]
fn sigmoid_scatter_uses_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = vaelab(dir.path(), &["gen-data", "--kind", "sigmoid", "--intrinsic", "2", "--ambient", "5", "--n", "300"]);
    let path = stdout(&o).trim().to_string();
    let p = vaelab(dir.path(), &["plot", "sigmoid-scatter", &path]);
    assert_eq!(p.status.code(), Some(0), "{}", String::from_utf8_lossy(&p.stderr));
    let h = vaelab(dir.path(), &["plot", "sphere-hist", &path]);
    assert_eq!(h.status.code(), Some(0));
}

#[test]
fn verify_flow_props_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = vaelab(dir.path(), &["verify", "flow-props"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("[pass] RK4 convergence order"));
}
