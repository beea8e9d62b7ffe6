mod common;

use std::fs;

use aenet::annotations::parse_annotations;
use aenet::checkpoint::{self, Checkpoint};
use aenet::commands::{
    ablate, eval, infer, prep, segment, train, train_dir, train_into, EvalOptions, Grid,
    ImageSource, Prepared, MODULE_ROWS, NORMALIZATION_ROWS,
};
use aenet::io;
use aenet::manifest::{Entry, Split, SplitManifest};
use aenet::training::{NormalizationMode, TrainState};
use aenet_core::imaging::{rasterize, Image, Mask, NormalizationStats, Organ, PixelScale};
use aenet_core::inference::EnsembleConfig;
use aenet_core::metrics::Aggregation;
use aenet_core::model::{Aenet, ModelConfig, TrainConfig};
use common::{assert_same_tree, fixture, toy_config, toy_setup, tree};

#[test]
fn annotation_fixture_rasterizes_to_golden_mask() {
    let parsed =
        parse_annotations(&fs::read_to_string(fixture("annotation.xml")).unwrap()).unwrap();
    assert_eq!(parsed.set.polygons.len(), 3);
    assert_eq!(parsed.warnings.len(), 1);
    let golden = io::read_mask(&fixture("golden_mask.png")).unwrap();
    assert_eq!(rasterize(&parsed.set, 20, 24).unwrap(), golden);
    assert_eq!(golden.cell_count(), 130);
}

fn write_xml_dataset(root: &std::path::Path, manifest: &SplitManifest) {
    let xml = fs::read_to_string(fixture("annotation.xml")).unwrap();
    for (_, e) in manifest.entries() {
        let im = Image::from_fn(20, 24, 3, |y, x, c| (y * 9 + x * 5 + c * 40) as u8).unwrap();
        io::write_rgb(&root.join("images").join(format!("{}.png", e.id)), &im).unwrap();
        fs::create_dir_all(root.join("annotations")).unwrap();
        fs::write(root.join("annotations").join(format!("{}.xml", e.id)), &xml).unwrap();
    }
    fs::write(root.join("manifest.toml"), manifest.to_toml()).unwrap();
}

fn public_manifest() -> SplitManifest {
    let tag = |prefix: &str, organs: &[Organ], per: usize| -> Vec<Entry> {
        organs
            .iter()
            .flat_map(|&o| (0..per).map(move |i| Entry::new(format!("{prefix}-{o}-{i}"), Some(o))))
            .collect()
    };
    let seen = [Organ::Breast, Organ::Liver, Organ::Kidney, Organ::Prostate];
    SplitManifest {
        train: tag("tr", &seen, 4),
        validation: vec![],
        same_organ: tag("st", &seen, 2),
        different_organ: tag("dt", &[Organ::Bladder, Organ::Colon, Organ::Stomach], 2),
    }
}

#[test]
fn prep_of_the_public_split_layout() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = public_manifest();
    write_xml_dataset(&dir.path().join("data"), &manifest);
    let cfg = toy_config(dir.path(), &["data.public_split=true", "data.augment=true"]);
    let s = prep(&cfg).unwrap();
    assert_eq!((s.images, s.train, s.stage1, s.stage2), (30, 16, 96, 576));
    assert_eq!(s.warnings.len(), 30);
    let log = fs::read_to_string(dir.path().join("run/prepared/prep_log.txt")).unwrap();
    assert!(
        log.contains("stage1_augmented 96\n") && log.contains("stage2_augmented 576\n"),
        "{log}"
    );
    let golden = io::read_mask(&fixture("golden_mask.png")).unwrap();
    assert_eq!(
        io::read_mask(&dir.path().join("run/prepared/masks/st-liver-1.png")).unwrap(),
        golden
    );
    let prepared = Prepared::open(&dir.path().join("run/prepared")).unwrap();
    assert_eq!(prepared.pool().unwrap().entries.len(), 576);
    assert_eq!(prepared.stats.scale, PixelScale::Unit);

    let first = tree(&dir.path().join("run/prepared"));
    prep(&cfg).unwrap();
    assert_eq!(first, tree(&dir.path().join("run/prepared")));

    let mut short = manifest.clone();
    short.train.pop();
    fs::write(dir.path().join("data/manifest.toml"), short.to_toml()).unwrap();
    let err = prep(&cfg).unwrap_err();
    assert!(err.to_string().contains("16/8/6"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn prep_lists_missing_and_malformed_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let manifest = SplitManifest {
        train: vec![
            Entry::new("a", None),
            Entry::new("b", None),
            Entry::new("c", None),
        ],
        ..SplitManifest::default()
    };
    write_xml_dataset(&root, &manifest);
    fs::remove_file(root.join("annotations/b.xml")).unwrap();
    fs::remove_file(root.join("annotations/c.xml")).unwrap();
    let cfg = toy_config(dir.path(), &[]);
    let err = prep(&cfg).unwrap_err().to_string();
    assert!(
        err.contains("annotations/b.xml") && err.contains("annotations/c.xml"),
        "{err}"
    );

    fs::write(
        root.join("annotations/b.xml"),
        "<Annotations>\n<Regions>\n<Region>\n</Annotations>\n",
    )
    .unwrap();
    fs::copy(
        root.join("annotations/a.xml"),
        root.join("annotations/c.xml"),
    )
    .unwrap();
    let err = prep(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(
        err.to_string().contains("b.xml") && err.to_string().contains("line 4"),
        "{err}"
    );
}

fn round_trip(ck: &Checkpoint) {
    let bytes = checkpoint::encode(ck);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.state.model.config, ck.state.model.config);
    assert_eq!(back.state.optimizer, ck.state.optimizer);
    assert_eq!(
        (back.state.epoch, back.state.step),
        (ck.state.epoch, ck.state.step)
    );
    assert_eq!(back.settings, ck.settings);
    assert_eq!(back.stats, ck.stats);
    for ((na, a), (nb, b)) in back
        .state
        .model
        .params()
        .iter()
        .zip(ck.state.model.params())
    {
        assert_eq!(na, &nb);
        let bits =
            |t: &aenet_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(checkpoint::encode(&back), bytes);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_setup(dir.path(), 8, 0);
    let model = Aenet::<f32>::init(ModelConfig::toy(), 4).unwrap();
    let fresh = Checkpoint {
        state: TrainState::new(model, &TrainConfig::default()),
        settings: cfg.loop_settings(),
        stats: NormalizationStats {
            mean: [0.1, 1.0 / 3.0, 0.7],
            std: [0.2, 0.3, 1e-7],
            scale: PixelScale::Raw,
        },
        best_val_dice: Some(0.123456789),
    };
    round_trip(&fresh);

    prep(&cfg).unwrap();
    train(&cfg, None).unwrap();
    let trained = checkpoint::load(&train_dir(&cfg).join("last.ckpt")).unwrap();
    assert_eq!(trained.state.step, 4);
    assert!(!trained.state.optimizer.first_moment.is_empty());
    round_trip(&trained);

    let mut bytes = checkpoint::encode(&trained);
    bytes.truncate(bytes.len() - 3);
    assert!(checkpoint::decode(&bytes).is_err());
    assert!(checkpoint::decode(b"not a checkpoint").is_err());
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_setup(dir.path(), 10, 0);
    prep(&cfg).unwrap();
    let prepared = Prepared::open(&dir.path().join("run/prepared")).unwrap();
    let straight = dir.path().join("straight");
    train_into(&cfg, &prepared, &straight, None).unwrap();

    // stop mid-epoch, then continue with the original budget
    let split = dir.path().join("split");
    let mut early = cfg.clone();
    early.train.max_steps = Some(2);
    train_into(&early, &prepared, &split, None).unwrap();
    let resumed = train_into(&cfg, &prepared, &split, Some(&split.join("last.ckpt"))).unwrap();
    assert_eq!(resumed.steps, 2);
    assert_eq!(
        fs::read(straight.join("last.ckpt")).unwrap(),
        fs::read(split.join("last.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(straight.join("steps.csv")).unwrap(),
        fs::read_to_string(split.join("steps.csv")).unwrap()
    );
}

#[test]
fn epoch_log_starts_at_the_initial_rate() {
    let dir = tempfile::tempdir().unwrap();
    toy_setup(dir.path(), 4, 2);
    let cfg = toy_config(
        dir.path(),
        &["train.validation=\"same_organ\"", "train.max_steps=2"],
    );
    prep(&cfg).unwrap();
    let s = train(&cfg, None).unwrap();
    let log = fs::read_to_string(train_dir(&cfg).join("epochs.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,steps,lr,mean_loss,val_dice"));
    assert!(lines.next().unwrap().starts_with("0,1,0.0006,"));
    assert_eq!(s.epochs.len(), 2);
    for name in [
        "epoch_0000.ckpt",
        "epoch_0001.ckpt",
        "best.ckpt",
        "last.ckpt",
    ] {
        assert!(train_dir(&cfg).join(name).is_file(), "{name}");
    }
}

#[test]
fn inference_outputs_and_toggles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_setup(dir.path(), 4, 3);
    prep(&cfg).unwrap();
    train(&cfg, None).unwrap();
    let ck = train_dir(&cfg).join("last.ckpt");
    let source = ImageSource::Split(Split::SameOrgan);

    let with_ws = dir.path().join("ws");
    let records = infer(&cfg, &ck, &source, &with_ws).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records
        .iter()
        .all(|r| r.passes == 1 && r.instances.is_some()));

    let mut off = cfg.clone();
    off.modules.watershed = false;
    let without = dir.path().join("plain");
    infer(&off, &ck, &source, &without).unwrap();
    assert!(!without.join("labels").exists() && !without.join("overlay").exists());
    assert_same_tree(&with_ws.join("prob"), &without.join("prob"));

    let mut parallel = cfg.clone();
    parallel.workers = 3;
    let again = dir.path().join("parallel");
    infer(&parallel, &ck, &source, &again).unwrap();
    assert_same_tree(&with_ws, &again);

    let mut ms = cfg.clone();
    ms.inference.multiscale = true;
    ms.inference.flip = true;
    let records = infer(&ms, &ck, &source, &dir.path().join("ms")).unwrap();
    assert!(records.iter().all(|r| r.passes == 14));
    let side = fs::read_to_string(dir.path().join("ms/prob/test-0000.txt")).unwrap();
    assert!(side.contains("passes = 14"), "{side}");
}

#[test]
fn small_images_are_rejected() {
    let model = Aenet::<f32>::init(ModelConfig::toy(), 1).unwrap();
    let stats = NormalizationStats::identity(PixelScale::Unit);
    let cfg = EnsembleConfig::single_scale();
    for (h, w) in [(15, 40), (40, 15)] {
        let im = Image::filled(h, w, 3, 100u8).unwrap();
        let err = segment(&model, &im, &stats, NormalizationMode::Global, &cfg, None)
            .err()
            .unwrap();
        assert_eq!(err.exit_code(), 2);
    }
    let im = Image::filled(16, 16, 3, 100u8).unwrap();
    assert!(segment(&model, &im, &stats, NormalizationMode::Global, &cfg, None).is_ok());
}

fn write_masks(dir: &std::path::Path, masks: &[(&str, &Mask)]) {
    for (id, m) in masks {
        io::write_mask(&dir.join(format!("{id}.png")), m).unwrap();
    }
}

#[test]
fn eval_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt, out) = (
        dir.path().join("pred"),
        dir.path().join("gt"),
        dir.path().join("out"),
    );
    let g = Mask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let p = Mask::new(2, 2, vec![0, 1, 0, 1]).unwrap();
    write_masks(&gt, &[("four", &g)]);
    write_masks(&pred, &[("four", &p)]);
    let s = eval(&pred, &gt, &out, &EvalOptions::default()).unwrap();
    let r = s.aggregate;
    assert_eq!(
        (
            s.per_image[0].1.tp,
            s.per_image[0].1.tn,
            s.per_image[0].1.fp,
            s.per_image[0].1.fn_
        ),
        (1, 1, 1, 1)
    );
    assert_eq!([r.precision, r.recall, r.f1, r.accuracy, r.dice], [0.5; 5]);
    assert!((r.miou - 1.0 / 3.0).abs() < 1e-12);
    assert!((r.dice_paper - 2.0 / 3.0).abs() < 1e-12);
    let csv = fs::read_to_string(out.join("per_image.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv
        .lines()
        .last()
        .unwrap()
        .starts_with("aggregate_micro,1,1,1,1,0.5,"));

    let perfect = Mask::from_fn(9, 7, |y, x| u8::from((x * y) % 4 == 1)).unwrap();
    write_masks(&gt, &[("four", &perfect), ("two", &perfect.complement())]);
    write_masks(&pred, &[("four", &perfect), ("two", &perfect.complement())]);
    for aggregation in [Aggregation::Micro, Aggregation::Macro] {
        let opts = EvalOptions {
            aggregation,
            min_f1: Some(1.0),
            min_dice: Some(1.0),
            min_miou: Some(1.0),
            ..Default::default()
        };
        let r = eval(&pred, &gt, &out, &opts).unwrap().aggregate;
        assert_eq!(
            [r.accuracy, r.recall, r.precision, r.f1, r.miou, r.dice],
            [1.0; 6]
        );
        assert_eq!(r.dice_paper, 2.0);
    }

    write_masks(&pred, &[("two", &perfect)]);
    let opts = EvalOptions {
        min_dice: Some(0.9),
        ..Default::default()
    };
    let err = eval(&pred, &gt, &out, &opts).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("dice"));

    write_masks(&pred, &[("extra", &perfect)]);
    write_masks(&gt, &[("lonely", &perfect)]);
    let err = eval(&pred, &gt, &out, &EvalOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(
        err.to_string().contains("extra") && err.to_string().contains("lonely"),
        "{err}"
    );
    let err = eval(
        &pred,
        &gt,
        &out,
        &EvalOptions {
            subset: true,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(
        err.to_string().contains("extra") && !err.to_string().contains("lonely"),
        "{err}"
    );

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(
        eval(&empty, &gt, &out, &EvalOptions::default())
            .unwrap_err()
            .exit_code(),
        1
    );
}

#[test]
fn ablation_grids() {
    let dir = tempfile::tempdir().unwrap();
    toy_setup(dir.path(), 4, 2);
    let cfg = toy_config(dir.path(), &["train.max_steps=1"]);
    prep(&cfg).unwrap();
    let tables = ablate(
        &cfg,
        &[Grid::Modules, Grid::Normalization],
        Split::SameOrgan,
    )
    .unwrap();
    assert_eq!(tables[0].rows.len(), 5);
    assert_eq!(tables[1].rows.len(), 4);
    for (row, want) in tables[0].rows.iter().zip(MODULE_ROWS) {
        assert_eq!(row.switches, want);
    }
    for (row, want) in tables[1].rows.iter().zip(NORMALIZATION_ROWS) {
        assert_eq!(row.switches, want);
    }
    let csv = fs::read_to_string(dir.path().join("run/ablate/modules_same_organ.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("cam,sam,ffb,ws,f1,dice,miou"));
    assert_eq!(
        csv.lines()
            .nth(1)
            .unwrap()
            .split(',')
            .take(4)
            .collect::<Vec<_>>(),
        ["0", "0", "0", "0"]
    );

    // the all-off row is the plain baseline run
    let base = toy_config(
        dir.path(),
        &[
            "train.max_steps=1",
            "modules.cam=false",
            "modules.sam=false",
            "modules.ffb=false",
            "modules.watershed=false",
        ],
    );
    train(&base, None).unwrap();
    let baseline_ck = train_dir(&base).join("last.ckpt");
    assert_eq!(
        fs::read(&baseline_ck).unwrap(),
        fs::read(
            dir.path()
                .join("run/ablate/models/cam0_sam0_ffb0/last.ckpt")
        )
        .unwrap()
    );
    let out = dir.path().join("baseline");
    infer(
        &base,
        &baseline_ck,
        &ImageSource::Split(Split::SameOrgan),
        &out,
    )
    .unwrap();
    let opts = EvalOptions {
        subset: true,
        ..Default::default()
    };
    let r = eval(
        &out.join("masks"),
        &dir.path().join("run/prepared/masks"),
        &out.join("eval"),
        &opts,
    )
    .unwrap();
    assert_eq!(r.aggregate, tables[0].rows[0].report);
}

#[test]
fn binary_exit_codes() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_aenet");
    let dir = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .unwrap()
            .status
            .code()
            .unwrap()
    };
    assert_eq!(status(&["--help"]), 0);
    assert_eq!(status(&["frobnicate"]), 1);
    assert_eq!(status(&["--set", "modules.cma=true", "prep"]), 1);
    assert_eq!(status(&["prep"]), 2);
    assert_eq!(
        status(&["synth", "--train", "3", "--test", "1", "--size", "24"]),
        0
    );
    assert_eq!(
        status(&[
            "--set",
            "model.preset=toy",
            "--set",
            "train.crop=24",
            "--set",
            "data.augment=false",
            "-q",
            "prep"
        ]),
        0
    );
    assert_eq!(
        status(&[
            "eval",
            "--pred",
            "data/masks",
            "--gt",
            "data/masks",
            "--min-f1",
            "1.0"
        ]),
        0
    );
    assert_eq!(
        status(&[
            "eval",
            "--pred",
            "data/images",
            "--gt",
            "data/masks",
            "--min-f1",
            "0.99"
        ]),
        3
    );
}

#[test]
fn divergence_names_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    toy_setup(dir.path(), 4, 0);
    let cfg = toy_config(dir.path(), &["train.lr=1e30", "train.max_steps=6"]);
    prep(&cfg).unwrap();
    let err = train(&cfg, None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("batch"), "{err}");
}
