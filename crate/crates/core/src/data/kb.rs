use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::{numbered_lines, read_text};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRecord {
    pub id: String,
    pub primary: String,
    pub alternatives: Vec<String>,
}

impl EntityRecord {
    pub fn new(id: impl Into<String>, primary: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            primary: primary.into(),
            alternatives: Vec::new(),
        }
    }

    /// Primary name first, then alternatives in file order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.primary.as_str()).chain(self.alternatives.iter().map(String::as_str))
    }
}

/// Entities in first-seen order, looked up by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entities: Vec<EntityRecord>,
    by_id: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(entities: Vec<EntityRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if e.id.is_empty() {
                return Err(Error::Data(format!("entity #{} has an empty id", i + 1)));
            }
            if e.names().any(|n| n.trim().is_empty()) {
                return Err(Error::Data(format!("entity {} has an empty name", e.id)));
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate entity id {}", e.id)));
            }
        }
        Ok(Self { entities, by_id })
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EntityRecord> {
        self.by_id.get(id).map(|&i| &self.entities[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Every `(name, entity id)` pair, entity by entity.
    pub fn names(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entities
            .iter()
            .flat_map(|e| e.names().map(move |n| (n, e.id.as_str())))
    }

    pub fn name_count(&self) -> usize {
        self.entities.iter().map(|e| 1 + e.alternatives.len()).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entities {
            out.push_str(&format!("{}\t{}\tP\n", e.id, e.primary));
            for alt in &e.alternatives {
                out.push_str(&format!("{}\t{alt}\tA\n", e.id));
            }
        }
        out
    }
}

/// Parses `id<TAB>name<TAB>P|A` lines, grouping rows by id.
pub fn parse_kb(text: &str) -> Result<KnowledgeBase> {
    let mut order: Vec<String> = Vec::new();
    let mut primaries: HashMap<String, (usize, String)> = HashMap::new();
    let mut alternatives: HashMap<String, Vec<String>> = HashMap::new();
    for (line_no, line) in numbered_lines(text) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, name, kind] = fields[..] else {
            return Err(Error::Data(format!(
                "line {line_no}: expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let (id, name) = (id.trim(), name.trim());
        if id.is_empty() || name.is_empty() {
            return Err(Error::Data(format!("line {line_no}: empty entity id or name")));
        }
        if !primaries.contains_key(id) && !alternatives.contains_key(id) {
            order.push(id.to_string());
        }
        match kind.trim() {
            "P" => {
                if let Some((first, _)) = primaries.insert(id.to_string(), (line_no, name.to_string())) {
                    return Err(Error::Data(format!(
                        "line {line_no}: entity {id} has a second primary name (first on line {first})"
                    )));
                }
            }
            "A" => alternatives.entry(id.to_string()).or_default().push(name.to_string()),
            other => {
                return Err(Error::Data(format!("line {line_no}: name kind must be P or A, got {other:?}")));
            }
        }
    }
    if order.is_empty() {
        return Err(Error::Data("knowledge base is empty".into()));
    }
    let mut entities = Vec::with_capacity(order.len());
    for id in order {
        let Some((_, primary)) = primaries.remove(&id) else {
            return Err(Error::Data(format!("entity {id} has no primary name")));
        };
        entities.push(EntityRecord {
            alternatives: alternatives.remove(&id).unwrap_or_default(),
            id,
            primary,
        });
    }
    KnowledgeBase::new(entities)
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    parse_kb(&read_text(path)?).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
