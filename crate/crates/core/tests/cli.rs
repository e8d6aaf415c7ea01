use std::fs;
use std::path::Path;
use std::process::Command;

fn config(dir: &Path, fixture_size: usize, eval: usize) -> std::path::PathBuf {
    let text = format!(
        r#"
name = "cli"
seed = 2
sf = 4

[data]
fixture = "spheres"
fixture_size = {fixture_size}

[train]
iterations = 6
batch_size = 1
hr_cube = 16
critic_slices = 2
monitor_interval = 3
checkpoint_interval = 3
generator_widths = [4, 4, 4]
critic_widths = [4, 4]

[evaluate]
n = 3
size = {eval}
curve_length = 5
"#
    );
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn voxfuse(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_voxfuse")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &std::process::Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn stages_run_in_order_with_tagged_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 64, 16);
    let out = dir.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let early = voxfuse(&["generate", "--config", c, "--out", o]);
    assert_eq!(code(&early), 5, "{}", String::from_utf8_lossy(&early.stderr));
    assert!(String::from_utf8_lossy(&early.stderr).starts_with("[generate]"));

    for stage in ["prepare", "train", "generate", "evaluate", "report"] {
        let r = voxfuse(&[stage, "--config", c, "--out", o, "--seed", "9"]);
        assert_eq!(code(&r), 0, "{stage}: {}", String::from_utf8_lossy(&r.stderr));
    }
    assert!(out.join("generated/sr_seed9.vox").exists());
    assert!(out.join("figures/summary.csv").exists());
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"));
}

#[test]
fn configuration_errors_exit_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 64, 16);
    let text = fs::read_to_string(&cfg).unwrap().replace("fixture = \"spheres\"", "lr_volume = \"absent.vox\"");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    let r = voxfuse(&["prepare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("absent.vox"));
    assert!(!out.exists());
}

#[test]
fn undersized_inputs_fail_in_prepare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 48, 16);
    let out = dir.path().join("run");
    let r = voxfuse(&["prepare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}
