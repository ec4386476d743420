use vaelab::dynamics::RunStatus;
use vaelab::experiment::runner::{read_manifest, read_report};
use vaelab::experiment::{run_seed, train, ExperimentConfig};

fn small(dataset: &str, extra: &str) -> ExperimentConfig {
    let dims = match dataset {
        "linear" => "r_star = 2\nd = 5\nr = 4\n",
        _ => "r_star = 1\nd = 4\nr = 3\n",
    };
    let text = format!(
        "dataset = \"{dataset}\"\n{dims}seeds = [0, 1]\nn_steps = 300\nsnapshot_every = 50\nn_eval = 500\nhidden = 8\nbatch = 16\n{extra}"
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn seeds_are_deterministic() {
    for ds in ["linear", "sigmoid", "sphere"] {
        let c = small(ds, "");
        let a = run_seed(&c, 1).unwrap();
        let b = run_seed(&c, 1).unwrap();
        assert_eq!(a.report.metrics, b.report.metrics, "{ds}");
        assert_eq!(a.trajectory.loss, b.trajectory.loss, "{ds}");
        let other = run_seed(&c, 2).unwrap();
        assert_ne!(a.trajectory.loss, other.trajectory.loss, "{ds}");
    }
}

#[test]
fn manifest_config_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let c = small("sigmoid", "");
    let (run, report) = train(&c, dir.path()).unwrap();
    for f in ["manifest.json", "report.json", "seed_0/trajectory.csv", "seed_1/generated.csv", "seed_1/ground_truth.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest = read_manifest(&run.join("manifest.json")).unwrap();
    assert_eq!(manifest.config_hash, c.hash());
    assert_eq!(manifest.seeds, vec![0, 1]);
    let again_dir = tempfile::tempdir().unwrap();
    let (run2, _) = train(&manifest.config, again_dir.path()).unwrap();
    let a = read_report(&run.join("report.json")).unwrap();
    let b = read_report(&run2.join("report.json")).unwrap();
    for (x, y) in a.per_seed.iter().zip(&b.per_seed) {
        assert_eq!(x.metrics, y.metrics);
    }
    assert_eq!(a.means, report.means);
}

#[test]
fn flow_run_writes_decay_report() {
    let dir = tempfile::tempdir().unwrap();
    let c = small("linear", "mode = \"gradient_flow\"\nloss_kind = \"L1\"\nstep_size = 0.001\n");
    let (run, _) = train(&c, dir.path()).unwrap();
    let text = std::fs::read_to_string(run.join("seed_0/decay.csv")).unwrap();
    assert!(text.starts_with("time,tail,lhs,bound,running_K,satisfied"));
}

#[test]
fn divergent_run_keeps_partial_trajectory() {
    let c = small("linear", "mode = \"gd\"\nstep_size = 50.0\n");
    let o = run_seed(&c, 0).unwrap();
    assert!(matches!(o.report.status, RunStatus::NonFinite { .. }), "{:?}", o.report.status);
    assert!(!o.trajectory.is_empty());
    assert!(o.report.steps_completed < c.n_steps);
}

#[test]
fn clipping_holds_the_floor() {
    let c = small("sigmoid", "clip_threshold = 0.5\neps_init = 0.6\nstep_size = 0.01\n");
    let o = run_seed(&c, 0).unwrap();
    assert!(o.trajectory.eps.iter().all(|&e| e >= 0.5 - 1e-15));
}
