use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use conta::pipeline::RunConfig;
use conta::scenegen::SceneConfig;
use conta::scm::DiscreteScm;

fn conta(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conta"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).trim().to_string();
    assert_eq!(s.lines().count(), 1, "{s}");
    s
}

fn write_json(path: &Path, text: String) {
    fs::write(path, text).unwrap();
}

#[test]
fn gen_run_render_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let scene = SceneConfig {
        n_images: 12,
        ..SceneConfig::default()
    };
    write_json(&dir.join("scene.json"), serde_json::to_string(&scene).unwrap());
    let o = conta(&["gen", "--config", "scene.json", "--out", "data"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).trim().ends_with("manifest.jsonl"));

    let mut cfg = RunConfig {
        dataset: dir.join("data"),
        rounds: 1,
        nwgm_probe_images: 1,
        ..RunConfig::default()
    };
    cfg.classifier.epochs = 1;
    cfg.segmenter.epochs = 1;
    cfg.affinity.t_iters = 2;
    write_json(&dir.join("run.json"), cfg.to_json_string());
    let o = conta(&["run", "--config", "run.json", "--out", "run"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("run/report.json").exists());

    // a second fresh run into the same directory is refused
    let o = conta(&["run", "--config", "run.json", "--out", "run"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_CONFIG: "));

    let id = fs::read_to_string(dir.join("data/train.jsonl")).unwrap();
    let id = serde_json::from_str::<serde_json::Value>(id.lines().next().unwrap()).unwrap()["id"]
        .as_str()
        .unwrap()
        .to_string();
    let o = conta(&["render", "run", &id], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let outs: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().map(String::from).collect();
    assert_eq!(outs.len(), 2);
    let first: Vec<Vec<u8>> = outs.iter().map(|p| fs::read(dir.join(p)).unwrap()).collect();
    assert!(first.iter().all(|b| b.starts_with(b"\x89PNG")));
    conta(&["render", "run", &id], dir);
    let second: Vec<Vec<u8>> = outs.iter().map(|p| fs::read(dir.join(p)).unwrap()).collect();
    assert_eq!(first, second);

    let o = conta(&["render", "run", "no_such_image"], dir);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).starts_with("E_NOT_FOUND: "));

    let o = conta(&["eval", "run"], dir);
    assert!(o.status.success());
    let scores: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(scores.as_array().unwrap().len(), 2);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let scene = SceneConfig {
        confound_strength: 1.5,
        ..SceneConfig::default()
    };
    write_json(&dir.join("scene.json"), serde_json::to_string(&scene).unwrap());
    let o = conta(&["gen", "--config", "scene.json", "--out", "data"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_CONFIG: ") || stderr_line(&o).starts_with("E_VALIDATION: "));
    assert!(!dir.join("data").exists());

    let o = conta(&["ablate", "--axis", "sideways"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("sideways"));

    let o = conta(&["run", "--config", "missing.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_CONFIG: "));

    let o = conta(&["frobnicate"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_USAGE: "));
}

#[test]
fn missing_dataset_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = conta(&["run", "--dataset", "nowhere", "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let line = stderr_line(&o);
    assert!(line.starts_with("E_NOT_FOUND: ") && line.contains("nowhere"), "{line}");
}

#[test]
fn verify_passes_and_names_a_broken_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let good = dir.join("good.json");
    fs::write(&good, DiscreteScm::confounded_example().to_json_string()).unwrap();
    let o = conta(&["verify", "--count", "20", "--scm", "good.json"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["scms"].as_array().unwrap().len(), 22);
    assert!(report["max_backdoor_gap"].as_f64().unwrap() <= 1e-10);

    let mut broken = DiscreteScm::confounded_example();
    broken.p_y_given_xm[0][1] = vec![0.5, 0.6];
    fs::write(dir.join("broken.json"), broken.to_json_string()).unwrap();
    let o = conta(&["verify", "--count", "5", "--scm", "broken.json"], dir);
    assert_eq!(o.status.code(), Some(3));
    let line = stderr_line(&o);
    assert!(line.starts_with("E_VERIFY: ") && line.contains("broken.json"), "{line}");
}
