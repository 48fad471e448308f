use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dccl::cli::ExperimentConfig;

/// Desk phantom with a few training steps, so a whole CLI chain runs in seconds.
pub fn write_small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::desk();
    cfg.out_dir = dir.join("out");
    cfg.train.pretrain_epochs = 1;
    cfg.train.finetune_epochs = 1;
    cfg.train.steps_per_epoch = 5;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn dccl(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dccl"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("spawn dccl")
}

pub fn chain() -> Vec<Vec<&'static str>> {
    vec![
        vec!["generate"],
        vec!["pretrain"],
        vec!["finetune", "--checkpoint", "PRETRAIN"],
        vec!["evaluate"],
        vec!["embed"],
        vec!["sweep", "--temps", "0.07,1.0"],
    ]
}

/// Runs every command in order; `PRETRAIN` expands to the pretrained checkpoint.
pub fn run_chain(config: &Path, out: &Path) {
    let ckpt = out.join("pretrain.ckpt").to_string_lossy().into_owned();
    for cmd in chain() {
        let args: Vec<&str> = cmd.iter().map(|a| if *a == "PRETRAIN" { ckpt.as_str() } else { a }).collect();
        let o = dccl(config, &args);
        assert!(
            o.status.success(),
            "{:?} exited {:?}: {}",
            args,
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        );
    }
}
