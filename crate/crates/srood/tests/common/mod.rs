#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srood::synth::{write_pair, PairSizes};

pub fn srood(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srood")).args(args).current_dir(cwd).output().expect("spawn srood")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs a subcommand and panics with its stderr on failure.
pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = srood(args, cwd);
    assert!(out.status.success(), "srood {args:?} failed: {}", stderr(&out));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A small digits/clothing pair and a config that trains in seconds.
pub fn small_setup(dir: &Path, train: usize, n_iter: usize) -> PathBuf {
    let data = dir.join("data");
    write_pair(&data, PairSizes { train, val: 24, test: 32 }, 32, 5).unwrap();
    let cfg = dir.join("small.cfg");
    let text = format!(
        "manifest = data/manifest.csv\n\
         data.id_name = digits\n\
         data.ood_name = clothing\n\
         phi.iterations = 20\n\
         phi.widths = 4,8\n\
         repairer.latent_dim = 8\n\
         repairer.encoder_widths = 4,8\n\
         repairer.decoder_widths = 8,4\n\
         train.n_iter = {n_iter}\n\
         train.batch_size = 8\n\
         train.checkpoint_every = 7\n\
         diagnose.probes = 8\n\
         diagnose.samples = 4\n\
         baseline.iterations = 20\n\
         report.grid_columns = 4\n"
    );
    std::fs::write(&cfg, text).unwrap();
    cfg
}
