//! Synthetic movie knowledge graphs and template-generated question sets
//! with gold SPARQL, structure labels and answers.
//!
//! Every question is produced by walking a real path from its topic entity,
//! so gold answers are never empty.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::LabeledQuestion;
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::query_graph::{Constraint, QueryGraph};

pub const DIRECTED_BY: &str = "film.film.directed_by";
pub const WRITTEN_BY: &str = "film.film.written_by";
pub const STARRING: &str = "film.film.starring";
pub const GENRE: &str = "film.film.genre";
pub const RELEASE_YEAR: &str = "film.film.release_year";
pub const NATIONALITY: &str = "people.person.nationality";
pub const GENDER: &str = "people.person.gender";
pub const PLACE_OF_BIRTH: &str = "people.person.place_of_birth";
pub const CONTAINED_BY: &str = "location.location.containedby";

const FIRST: [&str; 24] = [
    "Anna", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irina", "Jonas",
    "Katya", "Leon", "Mira", "Nikolai", "Olga", "Pavel", "Rosa", "Stefan", "Tamara", "Viktor",
    "Wanda", "Yannick", "Zora", "Igor",
];
const LAST: [&str; 24] = [
    "Abel", "Brandt", "Costa", "Dorn", "Ekman", "Fischer", "Gorin", "Hale", "Ivanova", "Jansen",
    "Kovac", "Lind", "Moreau", "Novak", "Orlov", "Petrov", "Quinn", "Rossi", "Sokol", "Tamm",
    "Ulrich", "Vance", "Weber", "Zeller",
];
const ADJ: [&str; 16] = [
    "Silent", "Crimson", "Distant", "Frozen", "Golden", "Hidden", "Lonely", "Broken", "Bright",
    "Last", "Quiet", "Wild", "Pale", "Burning", "Endless", "Little",
];
const NOUN: [&str; 16] = [
    "Harbor", "Garden", "River", "Winter", "Mirror", "Lantern", "Bridge", "Forest", "Voyage",
    "Orchard", "Station", "Meadow", "Island", "Tower", "Letter", "Summer",
];
const GENRES: [&str; 6] = [
    "Drama",
    "Comedy",
    "Animation",
    "Thriller",
    "Documentary",
    "Western",
];
const COUNTRIES: [(&str, [&str; 2]); 6] = [
    ("France", ["Paris", "Lyon"]),
    ("Italy", ["Rome", "Milan"]),
    ("Poland", ["Warsaw", "Krakow"]),
    ("Sweden", ["Stockholm", "Malmo"]),
    ("Brazil", ["Recife", "Santos"]),
    ("Japan", ["Osaka", "Kyoto"]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldConfig {
    pub films: usize,
    pub people: usize,
    pub seed: u64,
}

/// Triples of a random film world. Films have one director, one writer
/// (sometimes the director), two or three actors, a genre and a year.
/// People have a gender, a birthplace and usually that place's country as
/// nationality.
pub fn movie_triples(cfg: &WorldConfig) -> Vec<(String, String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names: Vec<String> = FIRST
        .iter()
        .flat_map(|f| LAST.iter().map(move |l| format!("{f} {l}")))
        .collect();
    names.shuffle(&mut rng);
    let mut titles: Vec<String> = ADJ
        .iter()
        .flat_map(|a| NOUN.iter().map(move |n| format!("The {a} {n}")))
        .collect();
    titles.shuffle(&mut rng);
    let people: Vec<String> = names.into_iter().take(cfg.people.max(3)).collect();
    let films: Vec<String> = titles.into_iter().take(cfg.films.max(1)).collect();
    let mut out = Vec::new();
    let mut push = |h: &str, r: &str, t: &str| out.push((h.to_owned(), r.to_owned(), t.to_owned()));
    for (country, cities) in COUNTRIES {
        for city in cities {
            push(city, CONTAINED_BY, country);
        }
    }
    for p in &people {
        let (country, cities) = COUNTRIES.choose(&mut rng).expect("non-empty");
        push(
            p,
            PLACE_OF_BIRTH,
            cities.choose(&mut rng).expect("non-empty"),
        );
        let nationality = if rng.random_bool(0.8) {
            country
        } else {
            &COUNTRIES.choose(&mut rng).expect("non-empty").0
        };
        push(p, NATIONALITY, nationality);
        push(
            p,
            GENDER,
            if rng.random_bool(0.5) {
                "Male"
            } else {
                "Female"
            },
        );
    }
    for f in &films {
        let director = people.choose(&mut rng).expect("non-empty");
        push(f, DIRECTED_BY, director);
        let writer = if rng.random_bool(0.3) {
            director
        } else {
            people.choose(&mut rng).expect("non-empty")
        };
        push(f, WRITTEN_BY, writer);
        let cast = rng.random_range(2..=3);
        for actor in people.choose_multiple(&mut rng, cast) {
            push(f, STARRING, actor);
        }
        push(f, GENRE, GENRES.choose(&mut rng).expect("non-empty"));
        push(f, RELEASE_YEAR, &rng.random_range(1955..1995).to_string());
    }
    out
}

/// The subgraph around Yuriy Norshteyn used to illustrate the method.
pub fn norshteyn_triples() -> Vec<(String, String, String)> {
    [
        ("Hedgehog in the Fog", DIRECTED_BY, "Yuriy Norshteyn"),
        ("Hedgehog in the Fog", WRITTEN_BY, "Sergei Kozlov"),
        ("Hedgehog in the Fog", GENRE, "Animation"),
        ("Hedgehog in the Fog", RELEASE_YEAR, "1975"),
        ("Yuriy Norshteyn", NATIONALITY, "Soviet Union"),
        ("Yuriy Norshteyn", GENDER, "Male"),
        ("Sergei Kozlov", NATIONALITY, "Soviet Union"),
        ("Sergei Kozlov", GENDER, "Male"),
    ]
    .into_iter()
    .map(|(h, r, t)| (h.to_owned(), r.to_owned(), t.to_owned()))
    .collect()
}

pub const NORSHTEYN_QUESTION: &str = "Who is the writer of the films directed by Yuriy Norshteyn?";

/// A question template: a relation path from the topic, an optional
/// constraint relation on one chain node, and text with `{t}` for the topic
/// and `{c}` for the constraint value.
#[derive(Clone, Copy, Debug)]
pub struct Template {
    pub structure: &'static str,
    pub steps: &'static [(&'static str, bool)],
    pub constraint: Option<(usize, &'static str)>,
    pub text: &'static str,
}

const fn t(
    structure: &'static str,
    steps: &'static [(&'static str, bool)],
    constraint: Option<(usize, &'static str)>,
    text: &'static str,
) -> Template {
    Template {
        structure,
        steps,
        constraint,
        text,
    }
}

pub const THREE_HOP_TEMPLATES: [Template; 4] = [
    t(
        "SS3",
        &[(STARRING, true), (DIRECTED_BY, false), (NATIONALITY, false)],
        None,
        "what nationality are the people who directed the films starring {t}",
    ),
    t(
        "SS3",
        &[
            (DIRECTED_BY, true),
            (STARRING, false),
            (PLACE_OF_BIRTH, false),
        ],
        None,
        "what is the place of birth of the actors starring in films directed by {t}",
    ),
    t(
        "SS3",
        &[
            (DIRECTED_BY, false),
            (PLACE_OF_BIRTH, false),
            (CONTAINED_BY, false),
        ],
        None,
        "which location contains the place of birth of the person who directed {t}",
    ),
    t(
        "SS3",
        &[(WRITTEN_BY, true), (STARRING, false), (NATIONALITY, false)],
        None,
        "what nationality are the people starring in the films written by {t}",
    ),
];

pub const TOY_TEMPLATES: [Template; 20] = [
    t("SS1", &[(DIRECTED_BY, false)], None, "who directed {t}"),
    t(
        "SS1",
        &[(WRITTEN_BY, false)],
        None,
        "who wrote the screenplay for {t}",
    ),
    t("SS1", &[(GENRE, false)], None, "what genre is {t}"),
    t(
        "SS1",
        &[(RELEASE_YEAR, false)],
        None,
        "when was {t} released",
    ),
    t(
        "SS1",
        &[(NATIONALITY, false)],
        None,
        "what nationality is {t}",
    ),
    t(
        "SS2",
        &[(DIRECTED_BY, true), (WRITTEN_BY, false)],
        None,
        "who is the writer of the films directed by {t}",
    ),
    t(
        "SS2",
        &[(STARRING, true), (GENRE, false)],
        None,
        "what genres are the movies {t} acted in",
    ),
    t(
        "SS2",
        &[(DIRECTED_BY, false), (NATIONALITY, false)],
        None,
        "what nationality is the director of {t}",
    ),
    t(
        "SS2",
        &[(WRITTEN_BY, true), (RELEASE_YEAR, false)],
        None,
        "when were the films written by {t} released",
    ),
    THREE_HOP_TEMPLATES[0],
    THREE_HOP_TEMPLATES[1],
    THREE_HOP_TEMPLATES[2],
    THREE_HOP_TEMPLATES[3],
    t(
        "SS4",
        &[(DIRECTED_BY, true)],
        Some((1, GENRE)),
        "which {c} films did {t} direct",
    ),
    t(
        "SS4",
        &[(STARRING, false)],
        Some((1, GENDER)),
        "which {c} actors star in {t}",
    ),
    t(
        "SS5",
        &[(STARRING, true), (DIRECTED_BY, false)],
        Some((2, GENDER)),
        "which {c} directors made movies with {t}",
    ),
    t(
        "SS5",
        &[(WRITTEN_BY, true), (STARRING, false)],
        Some((2, NATIONALITY)),
        "which actors from {c} starred in films written by {t}",
    ),
    t(
        "SS6",
        &[(STARRING, true), (DIRECTED_BY, false)],
        Some((1, GENRE)),
        "who directed the {c} movies starring {t}",
    ),
    t(
        "SS6",
        &[(DIRECTED_BY, true), (WRITTEN_BY, false)],
        Some((1, RELEASE_YEAR)),
        "who wrote the films {t} directed in {c}",
    ),
    t(
        "SS1",
        &[(STARRING, true)],
        None,
        "what films has {t} acted in",
    ),
];

fn relation(kg: &KnowledgeGraph, name: &str) -> Option<RelationId> {
    kg.relation_id(name)
}

/// A random path from `topic` following `steps`, as the entity at each chain
/// node. Backtracks until one succeeds or every branch fails.
fn random_walk<R: Rng>(
    kg: &KnowledgeGraph,
    topic: EntityId,
    steps: &[(RelationId, bool)],
    rng: &mut R,
) -> Option<Vec<EntityId>> {
    let Some(&(rel, reversed)) = steps.first() else {
        return Some(vec![topic]);
    };
    let mut next: Vec<EntityId> = kg.neighbors(topic, rel, reversed).ok()?.collect();
    next.shuffle(rng);
    next.into_iter().find_map(|e| {
        let mut rest = random_walk(kg, e, &steps[1..], rng)?;
        rest.insert(0, topic);
        Some(rest)
    })
}

/// Instantiates `template` at `topic`. `None` when the path or the
/// constraint cannot be realized.
pub fn instantiate<R: Rng>(
    kg: &KnowledgeGraph,
    template: &Template,
    topic: EntityId,
    id: String,
    rng: &mut R,
) -> Option<(LabeledQuestion, QueryGraph)> {
    let steps: Vec<(RelationId, bool)> = template
        .steps
        .iter()
        .map(|&(name, rev)| relation(kg, name).map(|r| (r, rev)))
        .collect::<Option<_>>()?;
    let path = random_walk(kg, topic, &steps, rng)?;
    let mut constraints = Vec::new();
    let mut value_text = String::new();
    if let Some((at, name)) = template.constraint {
        let rel = relation(kg, name)?;
        let values: Vec<EntityId> = kg
            .neighbors(path[at], rel, false)
            .ok()?
            .filter(|&v| v != topic)
            .collect();
        let value = *values.choose(rng)?;
        value_text = kg.entity_symbol(value).ok()?.to_owned();
        constraints.push(Constraint {
            at,
            relation: rel,
            value,
        });
    }
    let gold = QueryGraph::build_chain(topic, &steps, &constraints).ok()?;
    let answers = gold.execute(kg).ok()?;
    let topic_text = kg.entity_symbol(topic).ok()?;
    let text = template
        .text
        .replace("{t}", topic_text)
        .replace("{c}", &value_text);
    let mut q = LabeledQuestion::new(id, text, topic_text);
    q.answers = answers
        .iter()
        .map(|&e| kg.entity_symbol(e).map(str::to_owned))
        .collect::<Result<_, _>>()
        .ok()?;
    q.hops = (constraints.is_empty()).then_some(steps.len() as u32);
    q.sparql = Some(gold.to_sparql(kg).ok()?);
    q.structure = Some(template.structure.to_owned());
    Some((q, gold))
}

/// A knowledge graph with a question set over it.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub kg: KnowledgeGraph,
    pub questions: Vec<LabeledQuestion>,
}

/// Up to `per_template` questions for each template, on distinct topics.
fn generate<R: Rng>(
    kg: &KnowledgeGraph,
    templates: &[Template],
    per_template: usize,
    prefix: &str,
    rng: &mut R,
) -> Vec<LabeledQuestion> {
    let mut out = Vec::new();
    let mut seen_text = BTreeSet::new();
    for template in templates {
        let mut topics: Vec<EntityId> = (0..kg.num_entities() as u32).map(EntityId).collect();
        topics.shuffle(rng);
        let mut made = 0;
        for topic in topics {
            if made == per_template {
                break;
            }
            let id = format!("{prefix}-{:04}", out.len() + 1);
            if let Some((q, _)) = instantiate(kg, template, topic, id, rng) {
                if seen_text.insert(q.question.clone()) {
                    out.push(q);
                    made += 1;
                }
            }
        }
    }
    out
}

/// Small benchmark covering every built-in structure, plus the Norshteyn
/// question. Everything is in the `train` split.
pub fn toy_benchmark(seed: u64) -> Benchmark {
    let mut triples = movie_triples(&WorldConfig {
        films: 14,
        people: 20,
        seed,
    });
    triples.extend(norshteyn_triples());
    let kg: KnowledgeGraph = triples
        .iter()
        .map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut questions = generate(&kg, &TOY_TEMPLATES, 2, "toy", &mut rng);
    let topic = kg
        .entity_id("Yuriy Norshteyn")
        .expect("Norshteyn subgraph is present");
    let template = t("SS2", TOY_TEMPLATES[5].steps, None, NORSHTEYN_QUESTION);
    let (q, _) =
        instantiate(&kg, &template, topic, "toy-norshteyn".into(), &mut rng).expect("path exists");
    questions.push(q);
    for q in &mut questions {
        q.split = "train".into();
    }
    Benchmark { kg, questions }
}

/// Three-hop questions over a larger world in which every topic also has
/// one- and two-hop paths that share words with the question.
pub fn three_hop_benchmark(seed: u64, min_questions: usize) -> Benchmark {
    let mut films = 60;
    loop {
        let triples = movie_triples(&WorldConfig {
            films,
            people: films * 4 / 3,
            seed,
        });
        let kg: KnowledgeGraph = triples
            .iter()
            .map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3);
        let per = min_questions.div_ceil(THREE_HOP_TEMPLATES.len());
        let mut questions = generate(&kg, &THREE_HOP_TEMPLATES, per, "hop3", &mut rng);
        if questions.len() >= min_questions || films >= ADJ.len() * NOUN.len() {
            for q in &mut questions {
                q.split = "test".into();
            }
            return Benchmark { kg, questions };
        }
        films = (films * 3 / 2).min(ADJ.len() * NOUN.len());
    }
}
