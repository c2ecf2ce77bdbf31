use std::path::Path;
use std::process::{Command, Output};

fn transnerf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transnerf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const CONFIG: &str = r#"
dataset = "data"
rays_per_batch = 8
iterations = 3
learning_rate = 0.05
lr_decay = 0.1
momentum = 0.9
max_grad_norm = 1.0
samples_per_ray = 6
seed = 1
checkpoint_interval = 0

[sources]
views = [8, 12]
pool_factor = [1, 5]
pose_lambda = 1.0

[model]
blocks = 1
heads = 2
d_k = 8
d_ffn = 8
c_f = 4
extractor_hidden = 4
color_levels = 2
window = 1
depth_encoding_scale = 8.0
seed = 0
"#;

#[test]
fn full_command_line_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let gen = transnerf(&["gen-scene", "--spec", "sphere", "--views", "20", "--seed", "2", "--size", "12", "--out", "data"], dir);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(dir.join("data/manifest.toml").exists());

    std::fs::write(dir.join("train.toml"), CONFIG).unwrap();
    let tr = transnerf(&["train", "--config", "train.toml", "--out", "run"], dir);
    assert!(tr.status.success(), "{}", String::from_utf8_lossy(&tr.stderr));
    assert!(dir.join("run/params.tnrf").exists() && dir.join("run/model.toml").exists());

    for sources in ["s1", "s4", "auto"] {
        let out = format!("{sources}.png");
        let r = transnerf(
            &["render", "--checkpoint", "run", "--dataset", "data", "--view", "7", "--sources", sources, "--out", &out],
            dir,
        );
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        assert!(dir.join(&out).exists());
    }

    let ev = transnerf(&["eval", "--checkpoint", "run", "--dataset", "data", "--sets", "3", "--out", "report"], dir);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let table = String::from_utf8_lossy(&ev.stdout);
    assert!(table.contains("S1") && table.contains("S3"));
    assert!(dir.join("report.json").exists() && dir.join("report.txt").exists());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let bad_scene = transnerf(&["gen-scene", "--spec", "teapot", "--out", "x"], dir);
    assert!(!bad_scene.status.success());
    assert!(String::from_utf8_lossy(&bad_scene.stderr).contains("unknown scene"));
    let missing = transnerf(&["eval", "--checkpoint", "nope", "--dataset", "nope", "--out", "r"], dir);
    assert!(!missing.status.success());
    let no_source = transnerf(&["eval", "--dataset", "nope", "--out", "r"], dir);
    assert!(!no_source.status.success());
}
