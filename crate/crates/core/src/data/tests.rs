use proptest::prelude::*;

use super::*;
use crate::grammar::{parse, Label};

fn small(task: Task, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_molecules: 400,
        task,
        seed,
        ..Default::default()
    }
}

#[test]
fn positives_contain_both_motifs_and_masks_mark_them() {
    let (d, _) = generate(&GeneratorConfig::default()).unwrap();
    assert_eq!(d.records.len(), 2000);
    for r in &d.records {
        let has = |name: &str| r.tokens.iter().any(|t| t == &format!("[{name}]"));
        let both = has("benzene") && has("nitro");
        assert_eq!(r.label, Label::Class(usize::from(both)));
        assert!((6..=20).contains(&r.tokens.len()));
        if let Some(m) = &r.mask {
            assert_eq!(r.label, Label::Class(1));
            for (t, &v) in r.tokens.iter().zip(m) {
                assert_eq!(v == 1, t == "[benzene]" || t == "[nitro]");
            }
        }
        if r.label == Label::Class(1) && r.split != Split::Train {
            assert!(r.mask.is_some());
        }
        if r.label == Label::Class(0) {
            let motifs = r.tokens.iter().filter(|t| *t == "[benzene]" || *t == "[nitro]").count();
            assert!(motifs <= 1);
        }
    }
}

#[test]
fn class_balance_and_split_sizes() {
    let (d, _) = generate(&GeneratorConfig::default()).unwrap();
    let pos = d.records.iter().filter(|r| r.label == Label::Class(1)).count();
    assert!((pos as f64 / 2000.0 - 0.5).abs() <= 0.02);
    let count = |s| d.split(s).count();
    assert_eq!(count(Split::Train), 1400);
    assert_eq!(count(Split::Val), 200);
    assert_eq!(count(Split::Test), 400);
    let train_pos = d.split(Split::Train).filter(|r| r.label == Label::Class(1)).count();
    let annotated = d.split(Split::Train).filter(|r| r.mask.is_some()).count();
    assert_eq!(annotated, (train_pos as f64 * 0.1).round() as usize);
}

#[test]
fn distractor_share_follows_rate() {
    let (d, _) = generate(&GeneratorConfig::default()).unwrap();
    let neg: Vec<_> = d.records.iter().filter(|r| r.label == Label::Class(0)).collect();
    let with = neg.iter().filter(|r| r.tokens.iter().any(|t| t == "[benzene]" || t == "[nitro]")).count();
    let share = with as f64 / neg.len() as f64;
    assert!((share - 0.3).abs() < 0.05, "{share}");
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small(Task::Classification, 5)).unwrap();
    let b = generate(&small(Task::Classification, 5)).unwrap();
    assert_eq!(a, b);
    let mut x = Vec::new();
    let mut y = Vec::new();
    write_records(&mut x, &a.0.records).unwrap();
    write_records(&mut y, &b.0.records).unwrap();
    assert_eq!(x, y);
    assert_ne!(a.0, generate(&small(Task::Classification, 6)).unwrap().0);
}

#[test]
fn regression_labels_follow_oracle() {
    let (d, oracle) = generate(&small(Task::Regression, 2)).unwrap();
    for r in &d.records {
        let m = r.molecule(&d.registry).unwrap();
        let Label::Value(v) = r.label else { panic!("regression label") };
        assert_eq!(v, oracle_score(m.tokens(), &d.registry, &oracle).unwrap());
        if let Some(mask) = &r.mask {
            assert_eq!(mask.iter().filter(|&&b| b == 1).count(), 2);
            assert!(mask.contains(&0));
        }
    }
    assert!(d.split(Split::Test).all(|r| r.mask.is_some()));
}

#[test]
fn masked_molecules_have_both_kinds_of_token() {
    for task in [Task::Classification, Task::Regression] {
        let cfg = GeneratorConfig {
            min_len: 2,
            max_len: 3,
            ..small(task, 1)
        };
        let (d, _) = generate(&cfg).unwrap();
        for m in d.records.iter().filter_map(|r| r.mask.as_ref()) {
            assert!(m.contains(&0) && m.contains(&1));
        }
    }
}

#[test]
fn invalid_configs() {
    let base = GeneratorConfig::default();
    let bad = [
        GeneratorConfig { min_len: 1, ..base.clone() },
        GeneratorConfig { min_len: 8, max_len: 7, ..base.clone() },
        GeneratorConfig { distractor_rate: 1.5, ..base.clone() },
        GeneratorConfig { annotation_rate: -0.1, ..base.clone() },
        GeneratorConfig { splits: [0.5, 0.1, 0.1], ..base.clone() },
        GeneratorConfig { motif: [3, 3], ..base.clone() },
        GeneratorConfig { motif: [0, 30], ..base.clone() },
    ];
    for cfg in bad {
        assert!(matches!(generate(&cfg), Err(DataError::InvalidConfig(_))), "{cfg:?}");
    }
}

#[test]
fn jsonl_roundtrip() {
    for task in [Task::Classification, Task::Regression] {
        let (d, _) = generate(&small(task, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save(&d, &path).unwrap();
        let back = load(&path, &d.registry).unwrap();
        assert_eq!(back, d);
    }
}

#[test]
fn jsonl_schema() {
    let (d, _) = generate(&small(Task::Classification, 3)).unwrap();
    let mut buf = Vec::new();
    write_records(&mut buf, &d.records[..1]).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["id", "label", "mask", "split", "tokens"]);
    assert!(v["label"].is_u64());
}

fn reg() -> crate::grammar::GroupRegistry {
    GeneratorConfig::default().registry()
}

#[test]
fn loader_rejects_bad_records() {
    let good = r#"{"id":0,"tokens":["[benzene]","[C]"],"label":1,"mask":[1,0],"split":"train"}"#;
    let cases: [(&str, fn(&DataError) -> bool); 7] = [
        (r#"{"id":1,"tokens":["[benzene]"],"label":1,"mask":[1,0],"split":"test"}"#, |e| matches!(e, DataError::InvariantViolation(2, _))),
        (r#"{"id":1,"tokens":["[benzene]","[C]"],"label":1,"mask":[0,0],"split":"test"}"#, |e| matches!(e, DataError::InvariantViolation(2, _))),
        (r#"{"id":1,"tokens":["[benzene]","[C]"],"label":1,"mask":[2,0],"split":"test"}"#, |e| matches!(e, DataError::InvariantViolation(2, _))),
        (r#"{"id":0,"tokens":["[C]"],"label":0,"mask":null,"split":"test"}"#, |e| matches!(e, DataError::InvariantViolation(2, _))),
        (r#"{"id":1,"tokens":["[C"],"label":0,"mask":null,"split":"val"}"#, |e| matches!(e, DataError::InvariantViolation(2, _))),
        (r#"{"id":1,"tokens":["[C]"],"label":0,"mask":null,"split":"dev"}"#, |e| matches!(e, DataError::MalformedRecord(2))),
        (r#"{"id":1,"tokens":["[C]"],"label":0,"mask":nu"#, |e| matches!(e, DataError::MalformedRecord(2))),
    ];
    for (second, ok) in cases {
        let text = format!("{good}\n{second}\n");
        let err = read_records(text.as_bytes(), &reg()).unwrap_err();
        assert!(ok(&err), "{second}: {err:?}");
    }
    let extra = r#"{"id":1,"tokens":["[C]"],"label":0,"mask":null,"split":"val","x":1}"#;
    assert!(matches!(read_records(format!("{good}\n{extra}").as_bytes(), &reg()), Err(DataError::MalformedRecord(2))));
    let neg = r#"{"id":1,"tokens":["[C]"],"label":-1,"mask":null,"split":"val"}"#;
    assert!(matches!(read_records(neg.as_bytes(), &reg()), Err(DataError::InvariantViolation(1, _))));
    assert_eq!(read_records(format!("{good}\n").as_bytes(), &reg()).unwrap().len(), 1);
}

#[test]
fn truncated_final_line() {
    let (d, _) = generate(&small(Task::Classification, 4)).unwrap();
    let mut buf = Vec::new();
    write_records(&mut buf, &d.records[..5]).unwrap();
    buf.truncate(buf.len() - 10);
    assert!(matches!(read_records(&buf[..], &d.registry), Err(DataError::MalformedRecord(5))));
}

proptest! {
    #[test]
    fn oracle_is_permutation_invariant(ids in prop::collection::vec(0usize..30, 1..25), seed in 0u64..1000, rot in 0usize..25) {
        let cfg = GeneratorConfig { seed, ..Default::default() };
        let (reg, oracle) = (cfg.registry(), cfg.oracle());
        let tokens: Vec<_> = ids.iter().map(|&g| reg.group_token(g)).collect();
        let mut shuffled = tokens.clone();
        shuffled.rotate_left(rot % tokens.len());
        shuffled.reverse();
        prop_assert_eq!(oracle_score(&tokens, &reg, &oracle).unwrap(), oracle_score(&shuffled, &reg, &oracle).unwrap());
    }

    #[test]
    fn duplicate_doubles_contribution(g in 0usize..30, seed in 0u64..100) {
        let cfg = GeneratorConfig { seed, ..Default::default() };
        let (reg, oracle) = (cfg.registry(), cfg.oracle());
        let one = oracle_score(&[reg.group_token(g)], &reg, &oracle).unwrap();
        let two = oracle_score(&[reg.group_token(g), reg.group_token(g)], &reg, &oracle).unwrap();
        prop_assert_eq!(two, 2.0 * one);
    }
}

#[test]
fn record_to_molecule() {
    let (d, _) = generate(&small(Task::Classification, 7)).unwrap();
    let ms = d.molecules(Split::Test).unwrap();
    assert_eq!(ms.len(), d.split(Split::Test).count());
    let first = d.split(Split::Test).next().unwrap();
    assert_eq!(ms[0].texts(), first.tokens.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(parse(&ms[0].render(), &d.registry).unwrap(), ms[0].tokens());
}
