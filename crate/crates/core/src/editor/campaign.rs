use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{oracle_score, DatasetRecord, PropertyOracle, Split};
use crate::grammar::{GroupRegistry, Label, MoleculeString, Token};
use crate::rng::{self, Rng};

use super::ops::{crossover, key_fragments, mutate, random_positions, update_vocabulary};
use super::{Candidate, EAConfig, EditMode, EditorError, FragmentVocabulary, KeyModel, MutationMode, Operator};

/// Everything a campaign evaluates against. `model` is required in guided mode.
#[derive(Clone, Copy, Debug)]
pub struct EditContext<'a> {
    pub registry: &'a GroupRegistry,
    pub oracle: &'a PropertyOracle,
    pub model: Option<KeyModel<'a>>,
}

impl EditContext<'_> {
    fn fitness(&self, tokens: &[Token]) -> Result<f64, EditorError> {
        Ok(oracle_score(tokens, self.registry, self.oracle)?)
    }

    fn keys(&self, tokens: &[Token], cfg: &EAConfig) -> Result<Vec<usize>, EditorError> {
        match (cfg.mode, self.model) {
            (EditMode::Unguided, _) => Ok(Vec::new()),
            (EditMode::Guided, Some(m)) => Ok(key_fragments(m, tokens, cfg.k)?.positions),
            (EditMode::Guided, None) => Err(EditorError::MissingModel),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub slot: usize,
    /// Index of the seed in the input molecules.
    pub source: usize,
    pub seed_fitness: f64,
    /// Best fitness among all evaluated descendants, the seed included.
    pub best_fitness: f64,
    pub hit: bool,
}

#[derive(Clone, Debug)]
pub struct CampaignResult {
    pub history: Vec<GenerationStats>,
    pub hit_ratio: f64,
    pub per_seed: Vec<SeedOutcome>,
    pub population: Vec<Candidate>,
    pub vocabulary: FragmentVocabulary,
}

impl CampaignResult {
    /// Final population in the dataset schema, labelled by fitness.
    pub fn final_records(&self) -> Vec<DatasetRecord> {
        self.population
            .iter()
            .map(|c| DatasetRecord {
                id: c.id,
                tokens: c.tokens.iter().map(|t| t.text().to_string()).collect(),
                label: Label::Value(c.fitness),
                mask: None,
                split: Split::Test,
            })
            .collect()
    }
}

/// Samples `N` seeds without replacement and scores them. Candidate ids are
/// the slot numbers.
pub fn init_population(
    molecules: &[MoleculeString],
    cfg: &EAConfig,
    ctx: &EditContext<'_>,
) -> Result<(Vec<Candidate>, Vec<usize>), EditorError> {
    cfg.validate()?;
    if molecules.len() < cfg.population {
        return Err(EditorError::InsufficientSeeds {
            needed: cfg.population,
            available: molecules.len(),
        });
    }
    let mut rng = rng::stream(cfg.seed, "editor.init");
    let sources = index::sample(&mut rng, molecules.len(), cfg.population).into_vec();
    let mut population = Vec::with_capacity(cfg.population);
    for (slot, &src) in sources.iter().enumerate() {
        let tokens = molecules[src].tokens().to_vec();
        if tokens.is_empty() {
            return Err(EditorError::EmptyMolecule);
        }
        population.push(Candidate {
            id: slot as u64,
            fitness: ctx.fitness(&tokens)?,
            keys: ctx.keys(&tokens, cfg)?,
            tokens,
            parents: Vec::new(),
            operator: Operator::Seed,
            generation: 0,
            ancestry: vec![slot],
        });
    }
    Ok((population, sources))
}

/// Selection weights: fitness shifted so the worst member sits at the floor.
fn selection_weights(population: &[Candidate], cfg: &EAConfig) -> Vec<f64> {
    let fit: Vec<f64> = population.iter().map(|c| cfg.direction.gain(c.fitness, 0.0)).collect();
    let worst = fit.iter().copied().fold(f64::INFINITY, f64::min);
    fit.iter().map(|f| f - worst + 1e-6).collect()
}

fn pick_pair(population: &[Candidate], cfg: &EAConfig, rng: &mut Rng) -> (usize, usize) {
    let n = population.len();
    if cfg.mode == EditMode::Unguided {
        let v = index::sample(rng, n, 2);
        return (v.index(0), v.index(1));
    }
    let mut w = selection_weights(population, cfg);
    let a = WeightedIndex::new(&w).expect("positive weights").sample(rng);
    w[a] = 0.0;
    let b = WeightedIndex::new(&w).expect("positive weights").sample(rng);
    (a, b)
}

fn merged(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// One generation: crossover children from sampled pairs plus mutants of
/// population members, then the top N of parents and offspring (ties to
/// parents, kept in pool order). `vocab` is updated in offspring order.
/// Returns the next population and the evaluated offspring.
pub fn step(
    population: &[Candidate],
    vocab: &mut FragmentVocabulary,
    cfg: &EAConfig,
    ctx: &EditContext<'_>,
    generation: usize,
    next_id: &mut u64,
    rng: &mut Rng,
) -> Result<(Vec<Candidate>, Vec<Candidate>), EditorError> {
    let n = population.len();
    if n < 2 {
        return Err(EditorError::InvalidConfig("population must hold at least 2 candidates".into()));
    }
    let guided = cfg.mode == EditMode::Guided;
    let mut bred: Vec<(Vec<Token>, Vec<&Candidate>, Operator)> = Vec::with_capacity(2 * n);
    for _ in 0..n.div_ceil(2) {
        let (a, b) = pick_pair(population, cfg, rng);
        if rng.random::<f64>() >= cfg.crossover_prob {
            continue;
        }
        let (pa, pb) = (&population[a], &population[b]);
        let (ka, kb) = if guided {
            (pa.keys.clone(), pb.keys.clone())
        } else {
            (random_positions(pa.tokens.len(), cfg.k, rng), random_positions(pb.tokens.len(), cfg.k, rng))
        };
        let (c1, c2) = crossover(&pa.tokens, &pb.tokens, &ka, &kb);
        bred.push((c1, vec![pa, pb], Operator::Crossover));
        bred.push((c2, vec![pb, pa], Operator::Crossover));
    }
    for parent in population {
        if rng.random::<f64>() >= cfg.mutation_prob {
            continue;
        }
        let mode = if guided && rng.random::<f64>() < cfg.vocab_share {
            MutationMode::Vocabulary
        } else {
            MutationMode::Random
        };
        let tokens = mutate(&parent.tokens, vocab, mode, ctx.registry, rng)?;
        bred.push((tokens, vec![parent], Operator::Mutation));
    }

    let mut offspring = Vec::with_capacity(bred.len());
    for (tokens, parents, operator) in bred {
        let fitness = ctx.fitness(&tokens)?;
        let keys = ctx.keys(&tokens, cfg)?;
        if guided {
            let texts: Vec<String> = keys.iter().map(|&p| tokens[p].text().to_string()).collect();
            let pf: Vec<f64> = parents.iter().map(|p| p.fitness).collect();
            update_vocabulary(vocab, fitness, &texts, &pf, cfg.direction, generation);
        }
        let ancestry = parents.iter().fold(Vec::new(), |acc, p| merged(&acc, &p.ancestry));
        offspring.push(Candidate {
            id: *next_id,
            tokens,
            fitness,
            parents: parents.iter().map(|p| p.id).collect(),
            operator,
            generation,
            ancestry,
            keys,
        });
        *next_id += 1;
    }
    let pool: Vec<&Candidate> = population.iter().chain(&offspring).collect();
    let mut rank: Vec<usize> = (0..pool.len()).collect();
    // stable: parents precede offspring of equal fitness
    rank.sort_by(|&x, &y| {
        let (gx, gy) = (cfg.direction.gain(pool[x].fitness, 0.0), cfg.direction.gain(pool[y].fitness, 0.0));
        gy.partial_cmp(&gx).unwrap_or(std::cmp::Ordering::Equal)
    });
    rank.truncate(n);
    rank.sort_unstable();
    let next = rank.iter().map(|&i| pool[i].clone()).collect();
    Ok((next, offspring))
}

fn stats(generation: usize, population: &[Candidate], cfg: &EAConfig, vocab: &FragmentVocabulary) -> GenerationStats {
    let best = population
        .iter()
        .map(|c| c.fitness)
        .reduce(|a, b| if cfg.direction.better(b, a) { b } else { a })
        .unwrap_or(f64::NAN);
    GenerationStats {
        generation,
        best,
        mean: population.iter().map(|c| c.fitness).sum::<f64>() / population.len() as f64,
        vocab_size: vocab.len(),
    }
}

/// Runs `t_max` generations from seeds sampled out of `molecules`.
pub fn run_campaign(
    molecules: &[MoleculeString],
    cfg: &EAConfig,
    ctx: &EditContext<'_>,
) -> Result<CampaignResult, EditorError> {
    let (mut population, sources) = init_population(molecules, cfg, ctx)?;
    let mut vocab = FragmentVocabulary::new();
    let mut rng = rng::stream(cfg.seed, "editor.step");
    let seed_fitness: Vec<f64> = population.iter().map(|c| c.fitness).collect();
    let mut best = seed_fitness.clone();
    let mut history = vec![stats(0, &population, cfg, &vocab)];
    let mut next_id = population.len() as u64;
    for generation in 1..=cfg.generations {
        let (next, offspring) = step(&population, &mut vocab, cfg, ctx, generation, &mut next_id, &mut rng)?;
        for c in &offspring {
            for &slot in &c.ancestry {
                if cfg.direction.better(c.fitness, best[slot]) {
                    best[slot] = c.fitness;
                }
            }
        }
        population = next;
        history.push(stats(generation, &population, cfg, &vocab));
    }
    let per_seed: Vec<SeedOutcome> = (0..seed_fitness.len())
        .map(|slot| SeedOutcome {
            slot,
            source: sources[slot],
            seed_fitness: seed_fitness[slot],
            best_fitness: best[slot],
            hit: cfg.direction.gain(best[slot], seed_fitness[slot]) > cfg.tau,
        })
        .collect();
    let hits = per_seed.iter().filter(|s| s.hit).count();
    Ok(CampaignResult {
        history,
        hit_ratio: hits as f64 / per_seed.len() as f64,
        per_seed,
        population,
        vocabulary: vocab,
    })
}

pub fn write_history<W: Write>(mut w: W, history: &[GenerationStats]) -> std::io::Result<()> {
    writeln!(w, "generation,best,mean,vocab_size")?;
    for h in history {
        writeln!(w, "{},{},{},{}", h.generation, h.best, h.mean, h.vocab_size)?;
    }
    w.flush()
}

pub fn write_hits<W: Write>(mut w: W, result: &CampaignResult) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Hits<'a> {
        hit_ratio: f64,
        per_seed: &'a [SeedOutcome],
    }
    serde_json::to_writer_pretty(
        &mut w,
        &Hits {
            hit_ratio: result.hit_ratio,
            per_seed: &result.per_seed,
        },
    )?;
    w.write_all(b"\n")?;
    w.flush()
}
