use std::path::Path;

use gatelab::config::{RunConfig, Sweep};
use gatelab::LabError;

#[test]
fn defaults_validate_and_every_key_is_listed() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let keys = RunConfig::known_keys();
    assert!(keys.contains(&"optimizer.gate_lr_multiplier".to_string()));
    assert!(keys.contains(&"optimizer.temperature.start".to_string()));
    assert!(!keys.contains(&"optimizer.temperature".to_string()));
}

#[test]
fn unknown_key_is_an_error_naming_the_key() {
    let err = RunConfig::from_toml_str("optimizer.gate_lr_multipler = 50.0\n").unwrap_err();
    assert!(matches!(&err, LabError::UnknownKey(k) if k == "optimizer.gate_lr_multipler"));
    assert!(err.to_string().contains("gate_lr_multipler"));
    assert!(err.is_config());
}

#[test]
fn dotted_keys_and_tables_are_equivalent() {
    let dotted = RunConfig::from_toml_str("optimizer.gate_lr_multiplier = 50.0\nvariant.kind = \"bimaple\"\n").unwrap();
    let tables = RunConfig::from_toml_str("[optimizer]\ngate_lr_multiplier = 50.0\n[variant]\nkind = \"bimaple\"\n").unwrap();
    assert_eq!(dotted, tables);
    assert_eq!(dotted.optimizer.gate_lr_multiplier, 50.0);
    assert_eq!(dotted.hash(), tables.hash());
}

#[test]
fn canonical_listing_round_trips() {
    let cfg = RunConfig::from_toml_str("optimizer.gate_lr_multiplier = 50.0\noptimizer.phases = \"default\"\n").unwrap();
    assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
}

#[test]
fn hash_is_stable_and_ignores_seeds_and_output() {
    let a = RunConfig::default();
    assert_eq!(a.hash(), RunConfig::default().hash());
    assert_eq!(a.hash().len(), 64);
    let seeds = RunConfig::from_toml_str("run.seeds = [7]\nrun.output_dir = \"elsewhere\"\n").unwrap();
    assert_eq!(seeds.hash(), a.hash());
    let lr = RunConfig::from_toml_str("optimizer.gate_lr_multiplier = 2.0\n").unwrap();
    assert_ne!(lr.hash(), a.hash());
}

#[test]
fn bad_values_name_their_key() {
    let err = RunConfig::from_toml_str("run.seeds = []\n").unwrap_err();
    assert!(matches!(&err, LabError::BadValue { key, .. } if key == "run.seeds"));
    let err = RunConfig::from_toml_str("optimizer.gate_lr_multiplier = \"fast\"\n").unwrap_err();
    assert!(matches!(&err, LabError::BadValue { key, .. } if key == "optimizer.gate_lr_multiplier"));
}

#[test]
fn sweep_expands_the_grid() {
    let text = r#"
name = "lr"
[set]
"run.seeds" = [1]
[grid]
"optimizer.gate_lr_multiplier" = [1.0, 50.0]
"variant.strategy" = ["fixed-all-on", "per-token"]
"#;
    let sweep = Sweep::from_toml_str(text, Path::new(".")).unwrap();
    assert_eq!(sweep.cells.len(), 4);
    assert!(sweep.cells.iter().all(|(_, c)| c.run.seeds == vec![1]));
    assert_eq!(sweep.cells[3].1.optimizer.gate_lr_multiplier, 50.0);
    let names: std::collections::BTreeSet<_> = sweep.cells.iter().map(|(_, c)| c.run.name.clone()).collect();
    assert_eq!(names.len(), 4);
}

#[test]
fn empty_sweep_lists_are_errors() {
    let err = Sweep::from_toml_str("[grid]\n\"variant.kind\" = []\n", Path::new(".")).unwrap_err();
    assert!(err.is_config());
    assert!(Sweep::from_toml_str("name = \"x\"\n", Path::new(".")).is_err());
    assert!(Sweep::from_toml_str("[grid]\n\"variant.knd\" = [\"maple\"]\n", Path::new(".")).is_err());
}
