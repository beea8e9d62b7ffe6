#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aenet::commands::{synth, SynthOptions};
use aenet::config::RunConfig;
use aenet::synth::SynthConfig;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

/// Small synthetic dataset under `dir/data` and a toy configuration writing
/// to `dir/run`.
pub fn toy_setup(dir: &Path, train: usize, test: usize) -> RunConfig {
    let opts = SynthOptions {
        config: SynthConfig {
            size: 32,
            max_radius: 6.0,
            ..SynthConfig::default()
        },
        train,
        validation: 0,
        test,
    };
    synth(&dir.join("data"), 5, &opts).unwrap();
    toy_config(dir, &[])
}

pub fn toy_config(dir: &Path, extra: &[&str]) -> RunConfig {
    let text = format!(
        r#"
seed = 11
[data]
root = {root:?}
output = {out:?}
augment = false
[model]
preset = "toy"
[train]
batch = 4
crop = 32
epochs = 3
max_steps = 4
validation = "none"
[inference]
patch = 32
multiscale = false
flip = false
"#,
        root = dir.join("data").display().to_string(),
        out = dir.join("run").display().to_string(),
    );
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml(&text, &overrides).unwrap()
}

/// Every file below `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

pub fn assert_same_tree(a: &Path, b: &Path) {
    let (ta, tb) = (tree(a), tree(b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }
}
