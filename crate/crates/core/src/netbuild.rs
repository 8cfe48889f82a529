//! Item co-purchase graph and its per-attribute induced subgraphs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{values_intersect, write_atomically, InteractionDataset, ItemAttributes};

pub const NETWORK_SCHEMA_VERSION: u32 = 1;

/// Undirected co-purchase graph. `edges` holds `(i, j, count)` with `i < j`,
/// sorted; the counts are kept for diagnostics only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoPurchaseGraph {
    pub n_items: usize,
    pub edges: Vec<(usize, usize, u32)>,
}

impl CoPurchaseGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edges
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&key))
            .is_ok()
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<u32> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edges
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&key))
            .ok()
            .map(|p| self.edges[p].2)
    }
}

/// Binary symmetric adjacency of one attribute field, stored as sorted
/// neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeNetwork {
    pub attribute_index: usize,
    pub rows: Vec<Vec<usize>>,
}

impl AttributeNetwork {
    pub fn n_items(&self) -> usize {
        self.rows.len()
    }

    pub fn n_edges(&self) -> usize {
        self.rows.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    /// Dense 0/1 adjacency row of node `i`.
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        sparse_to_dense(&self.rows[i], self.n_items())
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }
}

pub fn sparse_to_dense(row: &[usize], n: usize) -> Vec<f64> {
    let mut dense = vec![0.0; n];
    for &j in row {
        dense[j] = 1.0;
    }
    dense
}

/// The co-purchase graph plus one attribute network per field, all over the
/// same item index space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeNetworkSet {
    pub item_ids: Vec<String>,
    pub field_names: Vec<String>,
    pub attributes: Vec<Vec<Vec<String>>>,
    pub co_graph: CoPurchaseGraph,
    pub graphs: Vec<AttributeNetwork>,
}

impl AttributeNetworkSet {
    pub fn n_items(&self) -> usize {
        self.co_graph.n_items
    }

    pub fn n_fields(&self) -> usize {
        self.graphs.len()
    }

    /// Drop one attribute network (and its field) from the set.
    pub fn without_field(&self, k: usize) -> AttributeNetworkSet {
        let mut out = self.clone();
        out.field_names.remove(k);
        out.graphs.remove(k);
        for a in &mut out.attributes {
            a.remove(k);
        }
        for (idx, g) in out.graphs.iter_mut().enumerate() {
            g.attribute_index = idx;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = NetworkFile::from(self);
        write_atomically(path, |w| {
            serde_json::to_writer(w, &file).map_err(|e| Error::Data(e.to_string()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;
        let file: NetworkFile = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        file.into_set()
    }

    /// Human-readable edge list of field `k`: one `item_a<TAB>item_b` line per edge.
    pub fn write_edge_list(&self, k: usize, path: &Path) -> Result<()> {
        write_atomically(path, |w| {
            for (i, j) in self.graphs[k].edges() {
                writeln!(w, "{}\t{}", self.item_ids[i], self.item_ids[j])
                    .map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        })
    }
}

/// On-disk form: coordinate lists per attribute network.
#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    schema_version: u32,
    item_ids: Vec<String>,
    field_names: Vec<String>,
    attributes: Vec<Vec<Vec<String>>>,
    co_edges: Vec<(usize, usize, u32)>,
    networks: Vec<CooAdjacency>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CooAdjacency {
    field: String,
    row_index: Vec<usize>,
    col_index: Vec<usize>,
}

impl From<&AttributeNetworkSet> for NetworkFile {
    fn from(set: &AttributeNetworkSet) -> Self {
        let networks = set
            .graphs
            .iter()
            .map(|g| {
                let (row_index, col_index) = g
                    .rows
                    .iter()
                    .enumerate()
                    .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
                    .unzip();
                CooAdjacency {
                    field: set.field_names[g.attribute_index].clone(),
                    row_index,
                    col_index,
                }
            })
            .collect();
        NetworkFile {
            schema_version: NETWORK_SCHEMA_VERSION,
            item_ids: set.item_ids.clone(),
            field_names: set.field_names.clone(),
            attributes: set.attributes.clone(),
            co_edges: set.co_graph.edges.clone(),
            networks,
        }
    }
}

impl NetworkFile {
    fn into_set(self) -> Result<AttributeNetworkSet> {
        if self.schema_version != NETWORK_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "network file schema version {} unsupported",
                self.schema_version
            )));
        }
        let n = self.item_ids.len();
        let mut graphs = Vec::with_capacity(self.networks.len());
        for (k, coo) in self.networks.into_iter().enumerate() {
            let mut rows = vec![Vec::new(); n];
            for (&i, &j) in coo.row_index.iter().zip(&coo.col_index) {
                if i >= n || j >= n {
                    return Err(Error::Data(format!("edge ({i},{j}) outside {n} items")));
                }
                rows[i].push(j);
            }
            for r in &mut rows {
                r.sort_unstable();
            }
            graphs.push(AttributeNetwork {
                attribute_index: k,
                rows,
            });
        }
        Ok(AttributeNetworkSet {
            item_ids: self.item_ids,
            field_names: self.field_names,
            attributes: self.attributes,
            co_graph: CoPurchaseGraph {
                n_items: n,
                edges: self.co_edges,
            },
            graphs,
        })
    }
}

/// Link every pair of items that at least `co_min` users hold together in
/// their training positives.
pub fn build_copurchase(ds: &InteractionDataset, co_min: u32) -> CoPurchaseGraph {
    let mut counts: HashMap<(usize, usize), u32> = HashMap::new();
    for items in &ds.positives {
        let mut distinct = items.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for (a, &i) in distinct.iter().enumerate() {
            for &j in &distinct[a + 1..] {
                *counts.entry((i, j)).or_insert(0) += 1;
            }
        }
    }
    let mut edges: Vec<(usize, usize, u32)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= co_min.max(1))
        .map(|((i, j), c)| (i, j, c))
        .collect();
    edges.sort_unstable();
    CoPurchaseGraph {
        n_items: ds.n_items(),
        edges,
    }
}

/// Keep the co-purchase edges whose endpoints share a value on field `k`.
pub fn induce_attribute_network(
    g: &CoPurchaseGraph,
    attributes: &[Vec<Vec<String>>],
    k: usize,
) -> AttributeNetwork {
    let mut rows = vec![Vec::new(); g.n_items];
    for &(i, j, _) in &g.edges {
        if values_intersect(&attributes[i][k], &attributes[j][k]) {
            rows[i].push(j);
            rows[j].push(i);
        }
    }
    for r in &mut rows {
        r.sort_unstable();
    }
    AttributeNetwork {
        attribute_index: k,
        rows,
    }
}

pub fn build_networks(ds: &InteractionDataset, co_min: u32) -> AttributeNetworkSet {
    let co_graph = build_copurchase(ds, co_min);
    let graphs = (0..ds.n_fields())
        .map(|k| induce_attribute_network(&co_graph, &ds.attributes, k))
        .collect();
    AttributeNetworkSet {
        item_ids: ds.item_ids.clone(),
        field_names: ds.field_names.clone(),
        attributes: ds.attributes.clone(),
        co_graph,
        graphs,
    }
}

/// Adjacency rows of an item outside the index space, one per field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColdAttachment {
    pub rows: Vec<Vec<usize>>,
}

impl ColdAttachment {
    pub fn is_unattached(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }

    pub fn dense_rows(&self, n_items: usize) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| sparse_to_dense(r, n_items)).collect()
    }
}

/// Link a new item to every existing item that shares a value with it on
/// each field. Purchase history is not required and nothing stored changes.
pub fn attach_cold_item(net_set: &AttributeNetworkSet, item: &ItemAttributes) -> Result<ColdAttachment> {
    if item.values.len() != net_set.n_fields() {
        return Err(Error::Dimension {
            context: "cold item attribute fields",
            expected: net_set.n_fields(),
            got: item.values.len(),
        });
    }
    if net_set.item_ids.iter().any(|id| *id == item.item_id) {
        return Err(Error::Data(format!(
            "cold item {} is already in the index space",
            item.item_id
        )));
    }
    let rows: Vec<Vec<usize>> = (0..net_set.n_fields())
        .map(|k| {
            net_set
                .attributes
                .iter()
                .enumerate()
                .filter(|(_, a)| values_intersect(&a[k], &item.values[k]))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let att = ColdAttachment { rows };
    if att.is_unattached() {
        warn!("unattached cold item {}", item.item_id);
    }
    Ok(att)
}
