use proptest::prelude::*;

use super::*;
use crate::data::{generate, GeneratorConfig, PropertyOracle};
use crate::encoder::EncoderConfig;
use crate::grammar::{build_vocabulary, GroupRegistry, MoleculeString};
use crate::rng;

fn registry() -> GroupRegistry {
    GroupRegistry::new(["benzene", "amide", "methyl", "nitro", "hydroxyl"]).unwrap()
}

fn toks(reg: &GroupRegistry, names: &[&str]) -> Vec<Token> {
    names.iter().map(|n| reg.token(&format!("[{n}]")).unwrap()).collect()
}

fn texts(tokens: &[Token]) -> Vec<&str> {
    tokens.iter().map(|t| t.text()).collect()
}

struct Fixture {
    registry: GroupRegistry,
    oracle: PropertyOracle,
    molecules: Vec<MoleculeString>,
    params: EncoderParams<f64>,
    vocab: Vocabulary,
}

fn fixture(seed: u64) -> Fixture {
    let gc = GeneratorConfig {
        n_molecules: 60,
        seed,
        ..Default::default()
    };
    let (d, oracle) = generate(&gc).unwrap();
    let molecules = d.all_molecules().unwrap();
    let vocab = build_vocabulary(&molecules, 1).unwrap();
    let ec = EncoderConfig {
        d_model: 8,
        d_ff: 16,
        vocab_size: vocab.len(),
        max_len: 24,
        seed,
        ..Default::default()
    };
    Fixture {
        registry: d.registry.clone(),
        oracle,
        molecules,
        params: EncoderParams::init(&ec).unwrap(),
        vocab,
    }
}

impl Fixture {
    fn ctx(&self) -> EditContext<'_> {
        EditContext {
            registry: &self.registry,
            oracle: &self.oracle,
            model: Some(KeyModel {
                params: &self.params,
                vocab: &self.vocab,
            }),
        }
    }
}

fn quick(mode: EditMode, seed: u64) -> EAConfig {
    EAConfig {
        population: 8,
        generations: 5,
        mode,
        seed,
        ..Default::default()
    }
}

#[test]
fn crossover_swaps_key_fragments() {
    let reg = registry();
    let m1 = toks(&reg, &["methyl", "methyl", "benzene", "methyl"]);
    let m2 = toks(&reg, &["nitro", "nitro", "nitro", "nitro", "nitro", "amide"]);
    let (c1, c2) = crossover(&m1, &m2, &[2], &[5]);
    assert_eq!(texts(&c1), ["[methyl]", "[methyl]", "[amide]", "[methyl]"]);
    assert_eq!(texts(&c2), ["[nitro]", "[nitro]", "[nitro]", "[nitro]", "[nitro]", "[benzene]"]);
}

#[test]
fn crossover_of_identical_parents_is_a_fixed_point() {
    let reg = registry();
    let m = toks(&reg, &["amide", "benzene", "nitro"]);
    let (c1, c2) = crossover(&m, &m, &[1, 0], &[1, 0]);
    assert_eq!(c1, m);
    assert_eq!(c2, m);
}

#[test]
fn crossover_cycles_shorter_key_list() {
    let reg = registry();
    let m1 = toks(&reg, &["methyl", "methyl", "methyl"]);
    let m2 = toks(&reg, &["nitro", "amide"]);
    // m1 keys in position order get m2's sole key fragment twice
    let (c1, c2) = crossover(&m1, &m2, &[2, 0], &[1]);
    assert_eq!(texts(&c1), ["[amide]", "[methyl]", "[amide]"]);
    assert_eq!(texts(&c2), ["[nitro]", "[methyl]"]);
}

#[test]
fn mutation_of_single_token_replaces_it() {
    let reg = GroupRegistry::new(["a", "b"]).unwrap();
    let mut v = FragmentVocabulary::new();
    v.insert("[b]", 1, 0.0);
    let m = toks(&reg, &["a"]);
    let out = mutate(&m, &v, MutationMode::Vocabulary, &reg, &mut rng::seeded(0)).unwrap();
    assert_eq!(texts(&out), ["[b]"]);
}

#[test]
fn vocabulary_mutation_draws_from_vocabulary() {
    let reg = registry();
    let mut v = FragmentVocabulary::new();
    v.insert("[hydroxyl]", 1, 0.0);
    let m = toks(&reg, &["methyl", "methyl", "methyl", "methyl"]);
    let mut r = rng::seeded(4);
    for _ in 0..50 {
        let out = mutate(&m, &v, MutationMode::Vocabulary, &reg, &mut r).unwrap();
        let changed: Vec<&str> = texts(&out).into_iter().filter(|t| *t != "[methyl]").collect();
        assert_eq!(changed, ["[hydroxyl]"]);
    }
}

#[test]
fn empty_vocabulary_falls_back_to_random() {
    let reg = registry();
    let m = toks(&reg, &["methyl", "amide"]);
    let out = mutate(&m, &FragmentVocabulary::new(), MutationMode::Vocabulary, &reg, &mut rng::seeded(1)).unwrap();
    assert_eq!(out.len(), 2);
}

#[test]
fn mutation_rejects_empty_molecule() {
    let reg = registry();
    let err = mutate(&[], &FragmentVocabulary::new(), MutationMode::Random, &reg, &mut rng::seeded(0));
    assert!(matches!(err, Err(EditorError::EmptyMolecule)));
}

#[test]
fn vocabulary_update_rules() {
    let mut v = FragmentVocabulary::new();
    let keys = vec!["[nitro]".to_string()];
    assert_eq!(update_vocabulary(&mut v, 1.0, &keys, &[0.5, 1.5], Direction::Maximize, 1), 0);
    assert!(v.is_empty());
    assert_eq!(update_vocabulary(&mut v, 1.0, &keys, &[1.0], Direction::Maximize, 1), 0);
    assert_eq!(update_vocabulary(&mut v, 2.0, &keys, &[0.5, 1.5], Direction::Maximize, 3), 1);
    assert_eq!(v.entries()[0], VocabEntry { text: "[nitro]".into(), generation: 3, fitness: 2.0 });
    assert_eq!(update_vocabulary(&mut v, 5.0, &keys, &[0.5], Direction::Maximize, 4), 0);
    assert_eq!(v.len(), 1);
    assert_eq!(update_vocabulary(&mut v, -1.0, &["[amide]".into()], &[0.0, 2.0], Direction::Minimize, 5), 1);
    assert!(v.contains("[amide]"));
}

#[test]
fn uniform_scores_pick_leading_positions() {
    let f = fixture(0);
    let mut params = f.params.clone();
    for t in params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let model = KeyModel { params: &params, vocab: &f.vocab };
    let tokens = f.molecules[0].tokens();
    let keys = key_fragments(model, tokens, 3).unwrap();
    assert_eq!(keys.positions, [0, 1, 2]);
    let all = key_fragments(model, tokens, 100).unwrap();
    assert_eq!(all.positions, (0..tokens.len()).collect::<Vec<_>>());
    assert_eq!(all.texts[0], tokens[0].text());
}

#[test]
fn key_fragments_rank_by_importance() {
    let f = fixture(1);
    let model = KeyModel { params: &f.params, vocab: &f.vocab };
    let m = &f.molecules[3];
    let keys = key_fragments(model, m.tokens(), m.len()).unwrap();
    let mut sorted = keys.positions.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..m.len()).collect::<Vec<_>>());
    let (_, trace) = crate::encoder::predict(&f.params, m, &f.vocab).unwrap();
    let target = crate::encoder::explanation_target(&f.params, &trace, None);
    let grads = crate::encoder::layer_gradients(&f.params, &trace, target).unwrap();
    let s = crate::explain::info_flow(&trace, &grads).unwrap();
    let score = |p: usize| s.scores[s.token_indices.iter().position(|&i| i == p).unwrap()];
    for w in keys.positions.windows(2) {
        assert!(score(w[0]) > score(w[1]) || (score(w[0]) == score(w[1]) && w[0] < w[1]));
    }
}

#[test]
fn init_population_samples_seeds() {
    let f = fixture(2);
    let cfg = EAConfig { population: f.molecules.len(), ..quick(EditMode::Guided, 0) };
    let (pop, sources) = init_population(&f.molecules, &cfg, &f.ctx()).unwrap();
    let mut s = sources.clone();
    s.sort_unstable();
    assert_eq!(s, (0..f.molecules.len()).collect::<Vec<_>>());
    for (c, &src) in pop.iter().zip(&sources) {
        assert_eq!(c.tokens, f.molecules[src].tokens());
        assert_eq!(c.keys.len(), cfg.k.min(c.tokens.len()));
        assert_eq!(c.fitness, crate::data::oracle_score(&c.tokens, &f.registry, &f.oracle).unwrap());
    }
    let cfg = quick(EditMode::Guided, 9);
    let a = init_population(&f.molecules, &cfg, &f.ctx()).unwrap();
    let b = init_population(&f.molecules, &cfg, &f.ctx()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn init_population_needs_enough_seeds() {
    let f = fixture(3);
    let cfg = EAConfig { population: 61, ..quick(EditMode::Guided, 0) };
    let err = init_population(&f.molecules, &cfg, &f.ctx());
    assert!(matches!(err, Err(EditorError::InsufficientSeeds { needed: 61, available: 60 })));
}

#[test]
fn guided_mode_needs_a_model() {
    let f = fixture(3);
    let ctx = EditContext { model: None, ..f.ctx() };
    let err = init_population(&f.molecules, &quick(EditMode::Guided, 0), &ctx);
    assert!(matches!(err, Err(EditorError::MissingModel)));
    assert!(run_campaign(&f.molecules, &quick(EditMode::Unguided, 0), &ctx).is_ok());
}

#[test]
fn zero_rates_keep_population() {
    let f = fixture(4);
    let cfg = EAConfig { crossover_prob: 0.0, mutation_prob: 0.0, ..quick(EditMode::Guided, 1) };
    let (pop, _) = init_population(&f.molecules, &cfg, &f.ctx()).unwrap();
    let mut v = FragmentVocabulary::new();
    let mut id = 100;
    let (next, offspring) = step(&pop, &mut v, &cfg, &f.ctx(), 1, &mut id, &mut rng::seeded(0)).unwrap();
    assert!(offspring.is_empty());
    assert_eq!(next, pop);
}

#[test]
fn step_offspring_preserve_lengths_and_lineage() {
    let f = fixture(5);
    let cfg = EAConfig { crossover_prob: 1.0, mutation_prob: 1.0, ..quick(EditMode::Guided, 2) };
    let (pop, _) = init_population(&f.molecules, &cfg, &f.ctx()).unwrap();
    let mut v = FragmentVocabulary::new();
    let mut id = pop.len() as u64;
    let (next, offspring) = step(&pop, &mut v, &cfg, &f.ctx(), 1, &mut id, &mut rng::seeded(3)).unwrap();
    assert_eq!(next.len(), pop.len());
    assert_eq!(offspring.len(), 2 * pop.len());
    for (i, c) in offspring.iter().enumerate() {
        let first = pop.iter().find(|p| p.id == c.parents[0]).unwrap();
        assert_eq!(c.tokens.len(), first.tokens.len());
        if i < pop.len() {
            assert_eq!(c.parents.len(), 2);
            assert_eq!(c.operator, Operator::Crossover);
        } else {
            assert_eq!(c.parents, [pop[i - pop.len()].id]);
            assert_eq!(c.operator, Operator::Mutation);
            assert!(c.tokens.iter().zip(&first.tokens).filter(|(x, y)| x != y).count() <= 1);
        }
        assert_eq!(c.fitness, crate::data::oracle_score(&c.tokens, &f.registry, &f.oracle).unwrap());
        assert!(first.ancestry.iter().all(|s| c.ancestry.contains(s)));
    }
}

#[test]
fn infinite_threshold_gives_no_hits() {
    let f = fixture(6);
    let cfg = EAConfig { tau: f64::INFINITY, ..quick(EditMode::Guided, 0) };
    let r = run_campaign(&f.molecules, &cfg, &f.ctx()).unwrap();
    assert_eq!(r.hit_ratio, 0.0);
}

#[test]
fn constant_oracle_gives_no_hits() {
    let f = fixture(7);
    let flat = PropertyOracle {
        contributions: vec![0.0; f.registry.len()],
        pairs: Vec::new(),
    };
    let ctx = EditContext { oracle: &flat, ..f.ctx() };
    for mode in [EditMode::Guided, EditMode::Unguided] {
        let r = run_campaign(&f.molecules, &quick(mode, 0), &ctx).unwrap();
        assert_eq!(r.hit_ratio, 0.0);
        assert!(r.per_seed.iter().all(|s| !s.hit));
    }
}

#[test]
fn campaign_is_deterministic_and_writes_outputs() {
    let f = fixture(8);
    let cfg = quick(EditMode::Guided, 4);
    let a = run_campaign(&f.molecules, &cfg, &f.ctx()).unwrap();
    let b = run_campaign(&f.molecules, &cfg, &f.ctx()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.population, b.population);
    assert_eq!(a.history.len(), cfg.generations + 1);

    let mut h = Vec::new();
    write_history(&mut h, &a.history).unwrap();
    let h = String::from_utf8(h).unwrap();
    assert!(h.starts_with("generation,best,mean,vocab_size\n0,"));
    assert_eq!(h.lines().count(), cfg.generations + 2);

    let mut j = Vec::new();
    write_hits(&mut j, &a).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&j).unwrap();
    assert_eq!(v["hit_ratio"].as_f64().unwrap(), a.hit_ratio);
    assert_eq!(v["per_seed"].as_array().unwrap().len(), cfg.population);

    let mut p = Vec::new();
    crate::data::write_records(&mut p, &a.final_records()).unwrap();
    let back = crate::data::read_records(p.as_slice(), &f.registry).unwrap();
    assert_eq!(back.len(), cfg.population);
    assert_eq!(back[0].label, crate::grammar::Label::Value(a.population[0].fitness));
}

#[test]
fn config_validation() {
    assert!(EAConfig::default().validate().is_ok());
    for bad in [
        EAConfig { crossover_prob: 1.5, ..Default::default() },
        EAConfig { population: 1, ..Default::default() },
        EAConfig { k: 0, ..Default::default() },
        EAConfig { tau: f64::NAN, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(EditorError::InvalidConfig(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn elitism_and_vocabulary_invariants(seed in 0u64..1000, minimize in any::<bool>(), guided in any::<bool>()) {
        let f = fixture(seed % 4);
        let cfg = EAConfig {
            direction: if minimize { Direction::Minimize } else { Direction::Maximize },
            mode: if guided { EditMode::Guided } else { EditMode::Unguided },
            ..quick(EditMode::Guided, seed)
        };
        let r = run_campaign(&f.molecules, &cfg, &f.ctx()).unwrap();
        for w in r.history.windows(2) {
            prop_assert!(!cfg.direction.better(w[0].best, w[1].best));
            prop_assert!(w[1].vocab_size >= w[0].vocab_size);
        }
        prop_assert_eq!(r.population.len(), cfg.population);
        for e in r.vocabulary.entries() {
            prop_assert!(f.registry.token(&e.text).is_ok());
        }
        if !guided {
            prop_assert!(r.vocabulary.is_empty());
        }
        for s in &r.per_seed {
            prop_assert_eq!(s.hit, cfg.direction.gain(s.best_fitness, s.seed_fitness) > 0.0);
        }
    }

    #[test]
    fn operators_preserve_length(a in proptest::collection::vec(0usize..5, 1..12),
                                 b in proptest::collection::vec(0usize..5, 1..12),
                                 k in 1usize..4, seed in 0u64..100) {
        let reg = registry();
        let ta: Vec<Token> = a.iter().map(|&i| reg.group_token(i)).collect();
        let tb: Vec<Token> = b.iter().map(|&i| reg.group_token(i)).collect();
        let mut r = rng::seeded(seed);
        let ka = random_positions(ta.len(), k, &mut r);
        let kb = random_positions(tb.len(), k, &mut r);
        let (c1, c2) = crossover(&ta, &tb, &ka, &kb);
        prop_assert_eq!(c1.len(), ta.len());
        prop_assert_eq!(c2.len(), tb.len());
        let m = mutate(&ta, &FragmentVocabulary::new(), MutationMode::Random, &reg, &mut r).unwrap();
        prop_assert_eq!(m.len(), ta.len());
        prop_assert!(m.iter().all(|t| reg.group_index(t.name()).is_some()));
        prop_assert!(m.iter().zip(&ta).filter(|(x, y)| x != y).count() <= 1);
    }
}
