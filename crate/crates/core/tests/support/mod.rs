//! Independent oracles and generators shared by the property tests and the
//! acceptance suite. Nothing here calls the enumeration, execution, or
//! structure matching code under test.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sskgqa_core::annotation::LabeledQuestion;
use sskgqa_core::classifier::{ClassifierExample, ClassifierTrainConfig};
use sskgqa_core::embeddings::{EmbedTrainConfig, EmbeddingKind, EmbeddingTable};
use sskgqa_core::encoder::ModelError;
use sskgqa_core::kg::{EntityId, KgBuilder, KnowledgeGraph, RelationId};
use sskgqa_core::query_graph::{Constraint, QgEdge, QgNode, QueryGraph};
use sskgqa_core::ranker::{GraphScorer, RankTrainConfig};
use sskgqa_core::structures::{NodeKind, SemanticStructure, StructureEdge, Taxonomy};
use sskgqa_numerics::{ParamGrads, ParamStore};

const AWKWARD: [&str; 6] = ["Natalie Portman", "Jr.", "a>b", "x:y", " lead", "=eq"];

/// A random KG with up to `max_entities` entities and `max_relations`
/// relations. With `awkward`, some symbols need bracketed IRIs.
pub fn random_kg<R: Rng>(
    rng: &mut R,
    max_entities: usize,
    max_relations: usize,
    awkward: bool,
) -> KnowledgeGraph {
    let n = rng.random_range(2..=max_entities);
    let r = rng.random_range(1..=max_relations);
    let triples = rng.random_range(1..=2 * n);
    let name = |i: usize, prefix: &str| {
        if awkward && i < AWKWARD.len() {
            format!("{}{i}", AWKWARD[i])
        } else {
            format!("{prefix}{i}")
        }
    };
    let mut b = KgBuilder::new();
    for i in 0..n {
        b.add_entity(&name(i, "e"));
    }
    for _ in 0..triples {
        let h = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        let rel = rng.random_range(0..r);
        b.add(&name(h, "e"), &format!("rel.{rel}_x"), &name(t, "e"));
    }
    b.build()
}

/// Steps of a walk and the entities it visits, topic first.
type Walk = (Vec<(RelationId, bool)>, Vec<EntityId>);

/// Label sequences of all actual walks from `topic`, up to `max_hops` steps.
fn walks(kg: &KnowledgeGraph, topic: EntityId, max_hops: usize) -> Vec<Walk> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), vec![topic])];
    while let Some((steps, ents)) = stack.pop() {
        if !steps.is_empty() {
            out.push((steps.clone(), ents.clone()));
        }
        if steps.len() == max_hops {
            continue;
        }
        let here = *ents.last().unwrap();
        for t in kg.triples() {
            for (rev, from, to) in [(false, t.head, t.tail), (true, t.tail, t.head)] {
                if from == here {
                    let mut s = steps.clone();
                    s.push((t.relation, rev));
                    let mut e = ents.clone();
                    e.push(to);
                    stack.push((s, e));
                }
            }
        }
    }
    out
}

/// Canonical strings of every satisfiable chain (and, optionally, every
/// satisfiable single-constraint extension with an outgoing constraint edge
/// on a chain variable), found by brute-force walk enumeration.
pub fn oracle_enumerate(
    kg: &KnowledgeGraph,
    topic: EntityId,
    max_hops: usize,
    constraints: bool,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (steps, ents) in walks(kg, topic, max_hops) {
        let chain = QueryGraph::build_chain(topic, &steps, &[]).unwrap();
        out.insert(chain.canonical());
        if !constraints {
            continue;
        }
        for (at, &x) in ents.iter().enumerate().skip(1) {
            for t in kg.triples() {
                if t.head == x && t.tail != topic {
                    let c = Constraint {
                        at,
                        relation: t.relation,
                        value: t.tail,
                    };
                    out.insert(
                        QueryGraph::build_chain(topic, &steps, &[c])
                            .unwrap()
                            .canonical(),
                    );
                }
            }
        }
    }
    out
}

/// Lambda values over every total assignment of entities to variables that
/// satisfies all edges.
pub fn oracle_execute(g: &QueryGraph, kg: &KnowledgeGraph) -> BTreeSet<EntityId> {
    let triples: HashSet<(u32, u32, u32)> = kg
        .triples()
        .iter()
        .map(|t| (t.head.0, t.relation.0, t.tail.0))
        .collect();
    let vars: Vec<usize> = (0..g.nodes().len())
        .filter(|&i| g.nodes()[i].is_variable())
        .collect();
    let n = kg.num_entities() as u32;
    let mut value: Vec<u32> = g
        .nodes()
        .iter()
        .map(|node| match node {
            QgNode::Grounded(e) => e.0,
            _ => 0,
        })
        .collect();
    let mut out = BTreeSet::new();
    let total = (n as u64).pow(vars.len() as u32);
    for code in 0..total {
        let mut c = code;
        for &v in &vars {
            value[v] = (c % n as u64) as u32;
            c /= n as u64;
        }
        let ok = g.edges().iter().all(|e| {
            let (h, t) = if e.reversed {
                (e.to, e.from)
            } else {
                (e.from, e.to)
            };
            triples.contains(&(value[h], e.relation.0, value[t]))
        });
        if ok {
            out.insert(EntityId(value[g.lambda()]));
        }
    }
    out
}

/// A random chain of 1..=3 hops over `kg`'s ids with at most one constraint.
pub fn random_chain<R: Rng>(rng: &mut R, kg: &KnowledgeGraph) -> QueryGraph {
    let n = kg.num_entities() as u32;
    let topic = EntityId(rng.random_range(0..n));
    let hops = rng.random_range(1..=3);
    let steps: Vec<_> = (0..hops)
        .map(|_| {
            (
                RelationId(rng.random_range(0..kg.num_relations() as u32)),
                rng.random_bool(0.5),
            )
        })
        .collect();
    let mut constraints = Vec::new();
    if n > 1 && rng.random_bool(0.5) {
        let mut value = EntityId(rng.random_range(0..n));
        while value == topic {
            value = EntityId(rng.random_range(0..n));
        }
        constraints.push(Constraint {
            at: rng.random_range(1..=hops),
            relation: RelationId(rng.random_range(0..kg.num_relations() as u32)),
            value,
        });
    }
    QueryGraph::build_chain(topic, &steps, &constraints).unwrap()
}

/// Brute-force isomorphism: some node bijection preserving kinds, the
/// topic, and the multiset of undirected edges with their constraint flags.
pub fn brute_isomorphic(a: &SemanticStructure, b: &SemanticStructure) -> bool {
    let n = a.kinds().len();
    if n != b.kinds().len() || a.edges().len() != b.edges().len() {
        return false;
    }
    let key = |s: &SemanticStructure, map: &[usize]| {
        let mut v: Vec<(usize, usize, bool)> = s
            .edges()
            .iter()
            .map(|e| {
                let (x, y) = (map[e.from], map[e.to]);
                (x.min(y), x.max(y), e.constraint)
            })
            .collect();
        v.sort_unstable();
        v
    };
    let identity: Vec<usize> = (0..n).collect();
    let target = key(b, &identity);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let fits =
            perm[a.topic()] == b.topic() && (0..n).all(|i| a.kinds()[i] == b.kinds()[perm[i]]);
        if fits && key(a, &perm) == target {
            return true;
        }
        if !next_permutation(&mut perm) {
            return false;
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Every connected simple abstract graph with 2..=`max_nodes` nodes: node 0
/// is the topic, exactly one answer node, the rest `E` or `v`.
pub fn all_abstract_graphs(max_nodes: usize) -> Vec<SemanticStructure> {
    let mut out = Vec::new();
    for n in 2..=max_nodes {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        for answer in 1..n {
            let others: Vec<usize> = (1..n).filter(|&i| i != answer).collect();
            for mask in 0u32..(1 << others.len()) {
                let mut kinds = vec![NodeKind::E; n];
                kinds[answer] = NodeKind::A;
                for (bit, &i) in others.iter().enumerate() {
                    if mask & (1 << bit) != 0 {
                        kinds[i] = NodeKind::V;
                    }
                }
                for edge_mask in 1u32..(1 << pairs.len()) {
                    let edges: Vec<StructureEdge> = pairs
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| edge_mask & (1 << k) != 0)
                        .map(|(_, &(from, to))| StructureEdge {
                            from,
                            to,
                            constraint: [from, to]
                                .iter()
                                .any(|&x| x != 0 && kinds[x] == NodeKind::E),
                        })
                        .collect();
                    if let Ok(s) = SemanticStructure::new("g", kinds.clone(), edges, 0) {
                        out.push(s);
                    }
                }
            }
        }
    }
    out
}

/// Relabels nodes by a random permutation, keeping the structure.
pub fn shuffle_structure<R: Rng>(rng: &mut R, s: &SemanticStructure) -> SemanticStructure {
    let n = s.kinds().len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut kinds = vec![NodeKind::E; n];
    for i in 0..n {
        kinds[perm[i]] = s.kinds()[i];
    }
    let edges = s
        .edges()
        .iter()
        .map(|e| StructureEdge {
            from: perm[e.to],
            to: perm[e.from],
            constraint: e.constraint,
        })
        .collect();
    SemanticStructure::new("shuffled", kinds, edges, perm[s.topic()]).unwrap()
}

/// A query graph whose abstraction is `s`: distinct entities for `E` nodes,
/// random relations and directions.
pub fn realize<R: Rng>(rng: &mut R, s: &SemanticStructure) -> QueryGraph {
    let nodes = s
        .kinds()
        .iter()
        .enumerate()
        .map(|(i, k)| match k {
            NodeKind::E => QgNode::Grounded(EntityId(i as u32)),
            NodeKind::V => QgNode::Existential(format!("n{i}")),
            NodeKind::A => QgNode::Lambda,
        })
        .collect();
    let edges = s
        .edges()
        .iter()
        .map(|e| QgEdge {
            from: e.from,
            relation: RelationId(*[0u32, 1, 2].choose(rng).unwrap()),
            to: e.to,
            reversed: rng.random_bool(0.5),
        })
        .collect();
    QueryGraph::new(nodes, edges, s.topic()).unwrap()
}

/// Fusion computed with `num_complex`: the lower half of each vector is the
/// real part, the upper half the imaginary part.
pub fn complex_fuse(head: &[f64], question: &[f64]) -> Vec<f64> {
    let k = head.len() / 2;
    let product: Vec<Complex64> = (0..k)
        .map(|i| {
            Complex64::new(head[i], head[k + i]) * Complex64::new(question[i], question[k + i])
        })
        .collect();
    let tail: Vec<f64> = product
        .iter()
        .map(|c| c.re)
        .chain(product.iter().map(|c| c.im))
        .collect();
    (0..head.len())
        .map(|i| head[i] + question[i] + tail[i])
        .collect()
}

/// Central-difference check of `analytic` against `loss`, perturbing every
/// scalar of the store. Returns `|a - n| / max(|a| + |n|, 1e-6)` over the
/// flattened gradient vectors.
pub fn gradient_error<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    analytic: &ParamGrads,
) -> f64 {
    const H: f64 = 1e-5;
    let ids: Vec<_> = store(model).ids().collect();
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for id in ids {
        for i in 0..store(model).get(id).len() {
            let orig = store(model).get(id).data()[i];
            store(model).get_mut(id).data_mut()[i] = orig + H;
            let plus = loss(model);
            store(model).get_mut(id).data_mut()[i] = orig - H;
            let minus = loss(model);
            store(model).get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    diff.sqrt() / (norm_a.sqrt() + norm_n.sqrt()).max(1e-6)
}

/// Random word sequence of length `1..=max_len` over `words`.
pub fn random_tokens<R: Rng>(rng: &mut R, words: &[&str], max_len: usize) -> Vec<String> {
    let n = rng.random_range(1..=max_len);
    (0..n)
        .map(|_| words.choose(rng).unwrap().to_string())
        .collect()
}

/// Four entities on a directed cycle under one relation.
pub fn cycle_kg() -> KnowledgeGraph {
    [
        ("c0", "next", "c1"),
        ("c1", "next", "c2"),
        ("c2", "next", "c3"),
        ("c3", "next", "c0"),
    ]
    .into_iter()
    .collect()
}

pub fn cycle_config(kind: EmbeddingKind) -> EmbedTrainConfig {
    EmbedTrainConfig {
        kind,
        dim: 16,
        epochs: 200,
        lr: 0.05,
        margin: Some(0.0),
        seed: 7,
        ..EmbedTrainConfig::default()
    }
}

/// Classification data in which each class owns one marker token that no
/// other class uses, so the classes are linearly separable by construction.
pub struct SeparableFixture {
    pub kg: KnowledgeGraph,
    pub entities: Arc<EmbeddingTable>,
    pub taxonomy: Taxonomy,
    pub examples: Vec<ClassifierExample>,
}

const FILLER: [&str; 8] = ["who", "what", "the", "of", "film", "is", "which", "did"];

pub fn separable_fixture(seed: u64) -> SeparableFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kg: KnowledgeGraph = (0..12)
        .map(|i| (format!("ent{i}"), format!("ent{}", (i + 1) % 12)))
        .collect::<Vec<_>>()
        .iter()
        .map(|(h, t)| (h.as_str(), "link", t.as_str()))
        .collect();
    let entities =
        Arc::new(EmbeddingTable::random(EmbeddingKind::ComplEx, 12, 1, 8, &mut rng).unwrap());
    let taxonomy = Taxonomy::builtin();
    let mut examples = Vec::new();
    for label in taxonomy.labels() {
        for _ in 0..8 {
            let mut tokens = random_tokens(&mut rng, &FILLER, 5);
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, format!("marker{}", label.to_lowercase()));
            examples.push(ClassifierExample {
                tokens,
                topic: EntityId(rng.random_range(0..12)),
                label: label.to_owned(),
            });
        }
    }
    SeparableFixture {
        kg,
        entities,
        taxonomy,
        examples,
    }
}

pub fn separable_config() -> ClassifierTrainConfig {
    ClassifierTrainConfig {
        lr: 1e-2,
        d_model: 16,
        heads: 2,
        ff: 32,
        ..ClassifierTrainConfig::default()
    }
}

/// Five one-hop questions over a 20-entity film graph. Each question shares
/// a word with its gold relation and with no other relation of its topic.
pub fn ranker_fixture() -> (KnowledgeGraph, Vec<LabeledQuestion>) {
    let films = [
        "Blue Harbor",
        "Iron Orchard",
        "Quiet Meadow",
        "Red Canyon",
        "Silver Lake",
    ];
    let people = [
        "Ada Stone",
        "Ben Moss",
        "Cleo Park",
        "Dan Reyes",
        "Eva Lund",
        "Finn Gray",
        "Gia Holt",
        "Hal Voss",
    ];
    let mut triples = Vec::new();
    for (i, film) in films.iter().enumerate() {
        let p = |k: usize| people[(i + k) % people.len()].to_owned();
        triples.push((film.to_string(), "film.film.directed_by".to_owned(), p(0)));
        triples.push((film.to_string(), "film.film.written_by".to_owned(), p(3)));
        triples.push((film.to_string(), "film.film.starring".to_owned(), p(5)));
        triples.push((
            film.to_string(),
            "film.film.genre".to_owned(),
            ["Drama", "Comedy"][i % 2].to_owned(),
        ));
        let year = ["1999", "2004", "2011"][i % 3];
        triples.push((
            film.to_string(),
            "film.film.release_year".to_owned(),
            year.to_owned(),
        ));
    }
    for (i, person) in people.iter().enumerate() {
        triples.push((
            person.to_string(),
            "people.person.nationality".to_owned(),
            ["Norway", "Chile"][i % 2].to_owned(),
        ));
    }
    let kg: KnowledgeGraph = triples
        .iter()
        .map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str()))
        .collect();
    assert_eq!(kg.num_entities(), 20);
    let asks = [
        ("who directed {}", "film.film.directed_by"),
        ("who is {} written by", "film.film.written_by"),
        ("what genre is {}", "film.film.genre"),
        ("who is starring in {}", "film.film.starring"),
        ("which release year does {} have", "film.film.release_year"),
    ];
    let questions = films
        .iter()
        .zip(asks)
        .enumerate()
        .map(|(i, (film, (text, rel)))| {
            let topic = kg.entity(film).unwrap();
            let gold =
                QueryGraph::build_chain(topic, &[(kg.relation(rel).unwrap(), false)], &[]).unwrap();
            let mut q = LabeledQuestion::new(format!("fx{i}"), text.replace("{}", film), *film);
            q.answers = gold
                .execute(&kg)
                .unwrap()
                .iter()
                .map(|&e| kg.entity_symbol(e).unwrap().to_owned())
                .collect();
            q.hops = Some(1);
            q.sparql = Some(gold.to_sparql(&kg).unwrap());
            q.structure = Some("SS1".into());
            q
        })
        .collect();
    (kg, questions)
}

pub fn ranker_fixture_config() -> RankTrainConfig {
    RankTrainConfig {
        lr: 1e-2,
        dropout: 0.1,
        d_model: 16,
        d_out: 16,
        heads: 2,
        ff: 32,
        epochs: 30,
        batch_size: 1,
        seed: 3,
        ..RankTrainConfig::default()
    }
}

/// A fixed pseudo-random ranker: each score is a hash of the salt, the
/// question and the candidate's canonical form.
pub struct HashScorer(pub u64);

impl GraphScorer for HashScorer {
    fn score_all(
        &self,
        question: &str,
        cands: &[QueryGraph],
        _kg: &KnowledgeGraph,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(cands
            .iter()
            .map(|g| {
                let mut h = DefaultHasher::new();
                (self.0, question, g.canonical()).hash(&mut h);
                (h.finish() >> 11) as f64
            })
            .collect())
    }
}

/// A random graph with up to `n` questions whose gold graphs are satisfiable
/// chains of a built-in structure.
pub fn random_eval_fixture<R: Rng>(
    rng: &mut R,
    n: usize,
) -> (KnowledgeGraph, Vec<LabeledQuestion>) {
    let taxonomy = Taxonomy::builtin();
    let kg = random_kg(rng, 12, 3, false);
    let mut questions = Vec::new();
    for attempt in 0..20 * n {
        if questions.len() == n {
            break;
        }
        let gold = random_chain(rng, &kg);
        let answers = gold.execute(&kg).unwrap();
        let Some(k) = taxonomy.classify_graph(&gold) else {
            continue;
        };
        if answers.is_empty() {
            continue;
        }
        let topic = kg.entity_symbol(gold.topic_entity()).unwrap();
        let mut q =
            LabeledQuestion::new(format!("r{attempt}"), format!("question {attempt}"), topic);
        q.answers = answers
            .iter()
            .map(|&e| kg.entity_symbol(e).unwrap().to_owned())
            .collect();
        q.sparql = Some(gold.to_sparql(&kg).unwrap());
        q.structure = Some(taxonomy.get(k).unwrap().label().to_owned());
        questions.push(q);
    }
    (kg, questions)
}
