use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gft_core::data::{self, BoundaryTask};
use gft_core::train::RunLog;
use tempfile::TempDir;

fn gft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn gft")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn train_small(dir: &TempDir, name: &str, extra: &[&str]) -> Output {
    let out = path(dir, name);
    let mut args = vec!["train", "--synth", "n=48,seed=1", "--out", &out, "--epochs", "2"];
    args.extend_from_slice(extra);
    gft(&args)
}

#[test]
fn missing_data_source_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = gft(&["train", "--out", &path(&dir, "m.ckpt")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn unknown_flag_is_rejected_with_usage() {
    let out = gft(&["flops", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn repeated_seeded_training_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    for name in ["a.ckpt", "b.ckpt"] {
        let out = train_small(&dir, name, &["--seed", "7"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.ckpt.runlog.jsonl"), read("b.ckpt.runlog.jsonl"));
    let log = RunLog::from_json_lines(&String::from_utf8(read("a.ckpt.runlog.jsonl")).unwrap()).unwrap();
    assert_eq!(log.records.len(), 2);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nepochs = 5\nbatch_size = 8\n").unwrap();
    let log = path(&dir, "run.jsonl");
    let ckpt = path(&dir, "m.ckpt");
    let args = ["train", "--synth", "n=24", "--out", &ckpt, "--config", cfg.to_str().unwrap(), "--epochs", "1", "--log", &log];
    let out = gft(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = RunLog::from_json_lines(&fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(log.records.len(), 1);

    fs::write(&cfg, "[train]\nepochz = 5\n").unwrap();
    let out = train_small(&dir, "n.ckpt", &["--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_metrics_and_leaves_checkpoint_untouched() {
    let dir = TempDir::new().unwrap();
    assert!(train_small(&dir, "m.ckpt", &[]).status.success());
    let ckpt = path(&dir, "m.ckpt");
    let before = fs::read(&ckpt).unwrap();
    let out = gft(&["eval", "--ckpt", &ckpt, "--synth", "n=16,seed=5"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["accuracy", "precision", "recall", "f1"] {
        assert!(text.contains(key), "{text}");
    }
    assert_eq!(fs::read(&ckpt).unwrap(), before);
}

#[test]
fn checkpoint_failures_exit_with_checkpoint_code() {
    let dir = TempDir::new().unwrap();
    let out = gft(&["eval", "--ckpt", &path(&dir, "absent.ckpt"), "--synth", "n=4"]);
    assert_eq!(out.status.code(), Some(4));

    assert!(train_small(&dir, "m.ckpt", &[]).status.success());
    let mut bytes = fs::read(dir.path().join("m.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(dir.path().join("bad.ckpt"), &bytes).unwrap();
    let out = gft(&["eval", "--ckpt", &path(&dir, "bad.ckpt"), "--synth", "n=4"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let out = train_small(&dir, "m.ckpt", &["--lr", "1e30"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn gradcheck_on_random_desk_model_passes() {
    let out = gft(&["gradcheck", "--random", "--profile", "desk", "--samples", "2"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    for group in ["embedding", "block1", "block4", "gala1", "gala3", "head"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{group} "))).count(), 1, "{text}");
    }
    assert!(text.contains("PASS"));
}

fn flops_line(text: &str, key: &str) -> String {
    text.lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .trim_start_matches(key)
        .trim()
        .to_string()
}

fn percent(s: &str) -> f64 {
    s.trim_end_matches('%').parse().unwrap()
}

#[test]
fn flops_full_profile_saves_at_least_the_attention_bound() {
    let out = gft(&["flops", "--profile", "full"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let saved = percent(&flops_line(&text, "saved (direct)"));
    let bound = percent(&flops_line(&text, "attention-only bound"));
    assert!(saved > 0.0 && saved >= bound, "{text}");
}

#[test]
fn flops_keep_all_saves_nothing_and_counter_agrees() {
    let out = gft(&["flops", "--profile", "desk", "--keep", "1,1,1", "--measure"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(percent(&flops_line(&text, "saved (direct)")), 0.0);
    assert!(percent(&flops_line(&text, "counter deviation")) < 2.0, "{text}");
}

fn write_pngs(dir: &Path, task: &BoundaryTask, n: usize) -> Vec<(std::path::PathBuf, Vec<usize>)> {
    let set = data::generate(task, n).unwrap();
    set.items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let p = dir.join(format!("img{i}.png"));
            data::tensor_to_image(&item.pixels).unwrap().save(&p).unwrap();
            (p, item.boundary.clone())
        })
        .collect()
}

#[test]
fn heatmap_writes_stage_files_matching_the_forward_masks() {
    let dir = TempDir::new().unwrap();
    assert!(train_small(&dir, "m.ckpt", &[]).status.success());
    let images = write_pngs(dir.path(), &BoundaryTask::desk(0.0, 3), 1);
    let out_dir = path(&dir, "maps");
    let out = gft(&["heatmap", "--ckpt", &path(&dir, "m.ckpt"), "--image", images[0].0.to_str().unwrap(), "--out", &out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (model, state) = gft_core::checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    let pixels = data::load_image(&images[0].0, 32, 1).unwrap();
    let batch = pixels.reshape(&[1, 1, 32, 32]).unwrap();
    let mut state = state.clone();
    let mut pass = model.pass(false);
    let fwd = pass.gft_forward(&batch, &mut state, false, &gft_core::pps::Routing::Importance).unwrap();

    for (i, mask) in fwd.masks().iter().enumerate() {
        let stage = i + 1;
        let ids: Vec<usize> = fs::read_to_string(Path::new(&out_dir).join(format!("stage{stage}_mask.txt")))
            .unwrap()
            .lines()
            .map(|l| l.parse().unwrap())
            .collect();
        assert_eq!(ids, mask.kept[0]);
        let pgm = fs::read(Path::new(&out_dir).join(format!("stage{stage}_heatmap.pgm"))).unwrap();
        let header = b"P5\n32 32\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 32 * 32);
        assert_eq!(*pgm[header.len()..].iter().max().unwrap(), 255);
        let ppm = fs::read(Path::new(&out_dir).join(format!("stage{stage}_composite.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n96 32\n255\n"));
    }
}

#[test]
fn heatmap_on_unreadable_image_fails_cleanly() {
    let dir = TempDir::new().unwrap();
    assert!(train_small(&dir, "m.ckpt", &[]).status.success());
    let junk = dir.path().join("junk.png");
    fs::write(&junk, b"not an image").unwrap();
    let out = gft(&["heatmap", "--ckpt", &path(&dir, "m.ckpt"), "--image", junk.to_str().unwrap(), "--out", &path(&dir, "o")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_export_round_trips_through_data_loader() {
    let dir = TempDir::new().unwrap();
    let corpus = path(&dir, "corpus");
    assert!(gft(&["synth", "--synth", "n=12,sigma=0", "--out", &corpus]).status.success());
    let ckpt = path(&dir, "m.ckpt");
    let out = gft(&["train", "--data", &corpus, "--out", &ckpt, "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = gft(&["eval", "--ckpt", &ckpt, "--data", &corpus]);
    assert!(stdout(&out).contains("images     12"), "{}", stdout(&out));
}

#[test]
fn stage3_heatmap_peak_on_noise_free_image_lies_on_the_boundary() {
    let dir = TempDir::new().unwrap();
    let ckpt = path(&dir, "desk.ckpt");
    let out = gft(&["train", "--synth", "n=320,sigma=0.05,seed=0", "--out", &ckpt, "--epochs", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let images = write_pngs(dir.path(), &BoundaryTask::desk(0.0, 0), 4);
    let mut misses = Vec::new();
    for (i, (image, boundary)) in images.iter().enumerate() {
        let maps = path(&dir, &format!("maps{i}"));
        let out = gft(&["heatmap", "--ckpt", &ckpt, "--image", image.to_str().unwrap(), "--out", &maps]);
        assert!(out.status.success());
        let text = stdout(&out);
        let peak: usize = flops_line(&text, "stage 3: kept 4 patches, most important patch").parse().unwrap();
        if !boundary.contains(&peak) {
            misses.push((i, peak, boundary.clone()));
        }
    }
    assert!(misses.is_empty(), "class, stage-3 peak, boundary patches: {misses:?}");
}
