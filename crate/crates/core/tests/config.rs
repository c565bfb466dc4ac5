use mrrn_core::arch::{ArchConfig, ModelKind};
use mrrn_core::config::*;
use mrrn_core::Precision;

#[test]
fn defaults_resolve_to_desk() {
    let r = RunConfig::default().resolve().unwrap();
    assert_eq!(r.arch, ArchConfig::desk(64));
    assert_eq!((r.train.lr, r.train.epochs, r.train.batch_size), (1e-4, 50, 10));
    assert_eq!((r.data.train, r.data.val, r.data.test), (200, 35, 50));
    assert_eq!(r.threads, 1);
}

#[test]
fn sections_and_overrides() {
    let cfg = RunConfig::parse(
        r#"
seed = 11
precision = "f64"

[data]
size = 32
train = 4

[arch]
preset = "tiny"
model = "unet"
input_size = 32
num_classes = 6

[train]
epochs = 3
lr = 0.001
"#,
    )
    .unwrap();
    let r = cfg.resolve().unwrap();
    assert_eq!(r.seed, 11);
    assert_eq!(r.train.seed, 11);
    assert_eq!(r.precision, Precision::F64);
    assert_eq!(r.train.precision, Precision::F64);
    assert_eq!(r.arch.model, ModelKind::Unet);
    assert_eq!((r.arch.input_size, r.arch.num_classes, r.arch.channels.clone()), (32, 6, vec![4, 8]));
    assert_eq!((r.data.size, r.data.train), (32, 4));
}

#[test]
fn reshaping_rederives_channels() {
    let cfg = RunConfig::parse("[arch]\npreset = \"reference\"\nbase_channels = 8\n").unwrap();
    let a = cfg.arch_config();
    assert_eq!(a.channels, vec![8, 16, 32, 64]);
    assert_eq!(a.reference_param_target, None);
    let a = RunConfig::parse("[arch]\npreset = \"reference\"\n").unwrap().arch_config();
    assert_eq!(a.reference_param_target, Some(28_941_717));
}

#[test]
fn every_violation_is_reported() {
    let cfg = RunConfig::parse("threads = 4\n[train]\nepochs = 0\nbatch_size = 0\n[arch]\nnum_classes = 1\n").unwrap();
    let msg = cfg.resolve().unwrap_err().to_string();
    for needle in ["epochs", "batch_size", "num_classes", "threads"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
    assert!(!msg.contains('\n'));
}

#[test]
fn unknown_keys_and_bad_values_rejected() {
    assert!(RunConfig::parse("[train]\nlearning_rate = 1\n").is_err());
    assert!(RunConfig::parse("[arch]\npreset = \"huge\"\n").is_err());
    assert!(RunConfig::parse("precision = \"f16\"\n").is_err());
    assert!(RunConfig::parse("[data\n").is_err());
}

#[test]
fn resolved_file_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let r = RunConfig::parse("seed = 3\n[arch]\npreset = \"tiny\"\n").unwrap().resolve().unwrap();
    let path = r.write_to(dir.path()).unwrap();
    assert_eq!(path.file_name().unwrap(), RESOLVED_CONFIG_FILE);
    let again = RunConfig::load(&path).unwrap().resolve().unwrap();
    assert_eq!(again, r);
    assert_eq!(again.to_toml(), r.to_toml());
}

#[test]
fn presets_parse() {
    assert_eq!("tiny".parse::<Preset>().unwrap().arch(64), ArchConfig::tiny());
    assert_eq!("desk".parse::<Preset>().unwrap().arch(32), ArchConfig::desk(32));
    assert!("nope".parse::<Preset>().is_err());
}
