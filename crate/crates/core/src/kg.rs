//! In-memory triple store with interned symbols and forward/backward
//! adjacency indexes.
//!
//! The text format is one `head<TAB>relation<TAB>tail` record per line;
//! blank lines and lines starting with `#` are skipped. Duplicate records are
//! ingested once. Ids are dense and assigned in order of first appearance, so
//! two loads of the same file agree on every id.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown entity id {0}")]
    UnknownEntity(u32),
    #[error("unknown relation id {0}")]
    UnknownRelation(u32),
    #[error("unknown entity `{0}`")]
    UnknownEntitySymbol(String),
    #[error("unknown relation `{0}`")]
    UnknownRelationSymbol(String),
    #[error("malformed binary graph: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bidirectional string <-> dense id mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
}

impl SymbolTable {
    pub fn intern(&mut self, symbol: &str) -> u32 {
        if let Some(&id) = self.ids.get(symbol) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(symbol.to_owned());
        self.ids.insert(symbol.to_owned(), id);
        id
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// An immutable knowledge graph. Build one with [`KgBuilder`] or
/// [`KnowledgeGraph::load_tsv`].
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: SymbolTable,
    relations: SymbolTable,
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    fwd: Vec<Vec<(RelationId, EntityId)>>,
    bwd: Vec<Vec<(RelationId, EntityId)>>,
}

/// Accumulates triples; duplicates are dropped.
#[derive(Debug, Default)]
pub struct KgBuilder {
    entities: SymbolTable,
    relations: SymbolTable,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> Triple {
        let h = EntityId(self.entities.intern(head));
        let r = RelationId(self.relations.intern(relation));
        let t = EntityId(self.entities.intern(tail));
        let triple = Triple::new(h, r, t);
        if self.seen.insert(triple) {
            self.triples.push(triple);
        }
        triple
    }

    /// Registers an entity that may have no triples.
    pub fn add_entity(&mut self, symbol: &str) -> EntityId {
        EntityId(self.entities.intern(symbol))
    }

    pub fn build(self) -> KnowledgeGraph {
        let n = self.entities.len();
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for t in &self.triples {
            fwd[t.head.index()].push((t.relation, t.tail));
            bwd[t.tail.index()].push((t.relation, t.head));
        }
        for list in fwd.iter_mut().chain(bwd.iter_mut()) {
            list.sort_unstable();
        }
        KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            triple_set: self.seen,
            fwd,
            bwd,
        }
    }
}

impl<'a> FromIterator<(&'a str, &'a str, &'a str)> for KnowledgeGraph {
    fn from_iter<I: IntoIterator<Item = (&'a str, &'a str, &'a str)>>(iter: I) -> Self {
        let mut b = KgBuilder::new();
        for (h, r, t) in iter {
            b.add(h, r, t);
        }
        b.build()
    }
}

const BINARY_MAGIC: &str = "ssk-kg v1";

impl KnowledgeGraph {
    /// Parses the tab-separated triple format.
    pub fn load_tsv<R: Read>(source: R) -> Result<Self, KgError> {
        let mut builder = KgBuilder::new();
        for (i, line) in BufReader::new(source).lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            let record = line.strip_suffix('\r').unwrap_or(&line);
            if record.trim().is_empty() || record.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = record.split('\t').collect();
            if fields.len() != 3 {
                return Err(KgError::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
                return Err(KgError::Parse {
                    line: line_no,
                    message: format!("field {} is empty", pos + 1),
                });
            }
            builder.add(fields[0], fields[1], fields[2]);
        }
        Ok(builder.build())
    }

    /// Loads either the binary format written by [`KnowledgeGraph::write_binary`]
    /// or the TSV format, sniffing the header.
    pub fn load<R: Read>(mut source: R) -> Result<Self, KgError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        if bytes.starts_with(BINARY_MAGIC.as_bytes()) {
            Self::read_binary(&bytes[..])
        } else {
            Self::load_tsv(&bytes[..])
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    /// Triples in ingestion order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities(&self) -> &SymbolTable {
        &self.entities
    }

    pub fn relations(&self) -> &SymbolTable {
        &self.relations
    }

    pub fn entity_id(&self, symbol: &str) -> Option<EntityId> {
        self.entities.id(symbol).map(EntityId)
    }

    pub fn relation_id(&self, symbol: &str) -> Option<RelationId> {
        self.relations.id(symbol).map(RelationId)
    }

    pub fn entity(&self, symbol: &str) -> Result<EntityId, KgError> {
        self.entity_id(symbol)
            .ok_or_else(|| KgError::UnknownEntitySymbol(symbol.to_owned()))
    }

    pub fn relation(&self, symbol: &str) -> Result<RelationId, KgError> {
        self.relation_id(symbol)
            .ok_or_else(|| KgError::UnknownRelationSymbol(symbol.to_owned()))
    }

    pub fn entity_symbol(&self, id: EntityId) -> Result<&str, KgError> {
        self.entities
            .symbol(id.0)
            .ok_or(KgError::UnknownEntity(id.0))
    }

    pub fn relation_symbol(&self, id: RelationId) -> Result<&str, KgError> {
        self.relations
            .symbol(id.0)
            .ok_or(KgError::UnknownRelation(id.0))
    }

    pub fn check_entity(&self, id: EntityId) -> Result<(), KgError> {
        if id.index() < self.num_entities() {
            Ok(())
        } else {
            Err(KgError::UnknownEntity(id.0))
        }
    }

    pub fn check_relation(&self, id: RelationId) -> Result<(), KgError> {
        if id.index() < self.num_relations() {
            Ok(())
        } else {
            Err(KgError::UnknownRelation(id.0))
        }
    }

    /// `(r, t)` for every `(e, r, t)`, sorted by `(r, t)`.
    pub fn out_edges(&self, e: EntityId) -> Result<&[(RelationId, EntityId)], KgError> {
        self.fwd
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or(KgError::UnknownEntity(e.0))
    }

    /// `(r, h)` for every `(h, r, e)`, sorted by `(r, h)`.
    pub fn in_edges(&self, e: EntityId) -> Result<&[(RelationId, EntityId)], KgError> {
        self.bwd
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or(KgError::UnknownEntity(e.0))
    }

    /// Neighbours through relation `r`, following the edge direction when
    /// `reversed` is false and against it otherwise.
    pub fn neighbors(
        &self,
        e: EntityId,
        r: RelationId,
        reversed: bool,
    ) -> Result<impl Iterator<Item = EntityId> + '_, KgError> {
        let list = if reversed {
            self.in_edges(e)?
        } else {
            self.out_edges(e)?
        };
        let start = list.partition_point(|&(rel, _)| rel < r);
        Ok(list[start..]
            .iter()
            .take_while(move |&&(rel, _)| rel == r)
            .map(|&(_, x)| x))
    }

    pub fn has_triple(&self, t: Triple) -> Result<bool, KgError> {
        self.check_entity(t.head)?;
        self.check_entity(t.tail)?;
        self.check_relation(t.relation)?;
        Ok(self.triple_set.contains(&t))
    }

    /// Compact binary form: a text header with counts, the symbol tables one
    /// per line, then little-endian `u32` id triples.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<(), KgError> {
        writeln!(
            out,
            "{BINARY_MAGIC} {} {} {}",
            self.num_entities(),
            self.num_relations(),
            self.num_triples()
        )?;
        for s in self
            .entities
            .symbols()
            .iter()
            .chain(self.relations.symbols())
        {
            writeln!(out, "{s}")?;
        }
        for t in &self.triples {
            out.write_all(&t.head.0.to_le_bytes())?;
            out.write_all(&t.relation.0.to_le_bytes())?;
            out.write_all(&t.tail.0.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(bytes: &[u8]) -> Result<Self, KgError> {
        let bad = |m: &str| KgError::Format(m.to_owned());
        let mut rest = bytes;
        let mut next_line = || -> Result<&str, KgError> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
            rest = &rest[end + 1..];
            Ok(line)
        };
        let header = next_line()?;
        let counts: Vec<usize> = header
            .strip_prefix(BINARY_MAGIC)
            .ok_or_else(|| bad("missing magic"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad count")))
            .collect::<Result<_, _>>()?;
        let [n, r, t] = counts[..] else {
            return Err(bad("expected three counts"));
        };
        let mut entities = SymbolTable::default();
        for _ in 0..n {
            entities.intern(next_line()?);
        }
        let mut relations = SymbolTable::default();
        for _ in 0..r {
            relations.intern(next_line()?);
        }
        if entities.len() != n || relations.len() != r {
            return Err(bad("duplicate symbols"));
        }
        if rest.len() != t * 12 {
            return Err(bad("triple payload has the wrong length"));
        }
        let word = |chunk: &[u8]| u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        let mut builder = KgBuilder {
            entities,
            relations,
            ..KgBuilder::default()
        };
        for chunk in rest.chunks_exact(12) {
            let triple = Triple::new(
                EntityId(word(&chunk[0..4])),
                RelationId(word(&chunk[4..8])),
                EntityId(word(&chunk[8..12])),
            );
            if triple.head.index() >= n || triple.tail.index() >= n || triple.relation.index() >= r
            {
                return Err(bad("id out of range"));
            }
            if builder.seen.insert(triple) {
                builder.triples.push(triple);
            }
        }
        Ok(builder.build())
    }
}
