use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::RqVaeParams;
use crate::{Error, Result};

/// Item → semantic ID, in catalog order. The position of an item in this
/// order is its item index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    items: Vec<String>,
    codes: Vec<Vec<u32>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IdLine {
    item: String,
    codes: Vec<u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<u32>)>) -> Result<Self> {
        let mut map = Self::new();
        for (item, codes) in pairs {
            map.insert(item, codes)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, item: String, codes: Vec<u32>) -> Result<()> {
        if let Some(first) = self.codes.first() {
            if first.len() != codes.len() {
                return Err(Error::DimMismatch { expected: first.len(), got: codes.len() });
            }
        }
        if self.index.contains_key(&item) {
            return Err(Error::Invalid(format!("item `{item}` assigned twice")));
        }
        self.index.insert(item.clone(), self.items.len());
        self.items.push(item);
        self.codes.push(codes);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }

    pub fn get(&self, item: &str) -> Option<&[u32]> {
        self.index.get(item).map(|&i| self.codes[i].as_slice())
    }

    pub fn item_index(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, index: usize) -> &str {
        &self.items[index]
    }

    pub fn contains(&self, item: &str) -> bool {
        self.index.contains_key(item)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u32])> {
        self.items.iter().map(String::as_str).zip(self.codes.iter().map(Vec::as_slice))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (item, codes) in self.iter() {
            let line = IdLine { item: item.to_string(), codes: codes.to_vec() };
            out.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut map = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: IdLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            map.insert(parsed.item, parsed.codes)?;
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reassignment {
    pub item: String,
    pub raw: Vec<u32>,
    pub assigned: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub n_items: usize,
    pub reassigned: Vec<Reassignment>,
    /// Items whose whole last-level range was taken; they are left out of the catalog.
    pub unassignable: Vec<String>,
    pub collision_rate: f64,
}

/// Quantize every item and make the IDs unique. An item whose full tuple is
/// already taken keeps its first `L−1` codes and receives the nearest unused
/// last-level code (distance order, ties by index).
pub fn assign_ids(items: &[(String, Vec<f64>)], params: &RqVaeParams) -> Result<(IdMap, CollisionReport)> {
    let mut map = IdMap::new();
    let mut report = CollisionReport { n_items: items.len(), ..Default::default() };
    let mut taken: HashSet<Vec<u32>> = HashSet::new();
    let book_size = params.codebooks.codebook_size;
    let last = params.levels() - 1;
    for (item, z) in items {
        let q = params.quantize(&params.encode(z)?)?;
        let mut codes = q.codes.clone();
        if taken.contains(&codes) {
            let v = &q.residuals[last];
            let mut order: Vec<(f64, usize)> = (0..book_size)
                .map(|k| {
                    let e = params.codebooks.entry(last, k);
                    (v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), k)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let free = order.into_iter().map(|(_, k)| k as u32).find(|&k| {
                codes[last] = k;
                !taken.contains(&codes)
            });
            match free {
                Some(k) => {
                    codes[last] = k;
                    report.reassigned.push(Reassignment { item: item.clone(), raw: q.codes, assigned: codes.clone() });
                }
                None => {
                    report.unassignable.push(item.clone());
                    continue;
                }
            }
        }
        taken.insert(codes.clone());
        map.insert(item.clone(), codes)?;
    }
    if !items.is_empty() {
        report.collision_rate = (report.reassigned.len() + report.unassignable.len()) as f64 / items.len() as f64;
    }
    Ok((map, report))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<u32, Node>,
    item: Option<String>,
}

/// Trie over semantic IDs; every root-to-leaf path has length `depth`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixTree {
    root: Node,
    depth: usize,
    len: usize,
}

impl PrefixTree {
    pub fn build(id_map: &IdMap) -> Result<Self> {
        let mut tree = Self { root: Node::default(), depth: id_map.levels(), len: 0 };
        for (item, codes) in id_map.iter() {
            let mut node = &mut tree.root;
            for &c in codes {
                node = node.children.entry(c).or_default();
            }
            if node.item.is_some() {
                return Err(Error::DuplicateId(codes.to_vec()));
            }
            node.item = Some(item.to_string());
            tree.len += 1;
        }
        Ok(tree)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn node(&self, prefix: &[u32]) -> Option<&Node> {
        prefix.iter().try_fold(&self.root, |n, c| n.children.get(c))
    }

    /// Valid next codes after `prefix`, ascending.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        self.node(prefix).map(|n| n.children.keys().copied().collect()).unwrap_or_default()
    }

    pub fn contains(&self, codes: &[u32]) -> bool {
        codes.len() == self.depth && self.lookup(codes).is_some()
    }

    pub fn lookup(&self, codes: &[u32]) -> Option<&str> {
        self.node(codes).and_then(|n| n.item.as_deref())
    }
}

pub fn build_prefix_tree(id_map: &IdMap) -> Result<PrefixTree> {
    PrefixTree::build(id_map)
}
