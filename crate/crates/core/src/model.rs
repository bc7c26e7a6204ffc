//! A tagged union over every trainable model kind, with a flat named-tensor
//! encoding so any of them fits the checkpoint container.

use crate::data::checkpoint::TensorRecord;
use crate::drmm::{DrfmParams, DrmmParams, LayerParams, LayerSpec};
use crate::edrmm::{EvoNode, EvoTree, Forest};
use crate::error::{DrmmError, Result};
use crate::relax::{DeepDiscriminative, Provenance, ShallowDiscriminative};
use crate::rmm::RmmParams;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub enum Model {
    Rmm(RmmParams),
    Drmm(DrmmParams),
    Drfm(DrfmParams),
    ShallowDiscriminative(ShallowDiscriminative),
    DeepDiscriminative(DeepDiscriminative),
    Tree(EvoTree),
    Forest(Forest),
}

/// Training provenance stored next to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub epoch: usize,
    /// Echo of the experiment configuration (JSON or free text).
    pub config_echo: String,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta { seed: 0, epoch: 0, config_echo: String::new() }
    }
}

fn scalar(name: impl Into<String>, v: f64) -> TensorRecord {
    TensorRecord::new(name, Tensor::from_vec(vec![v]).expect("finite scalar"))
}

fn vector(name: impl Into<String>, v: &[f64]) -> TensorRecord {
    TensorRecord::new(name, Tensor::new(vec![v.len()], v.to_vec()).expect("finite vector"))
}

fn lookup<'a>(map: &'a HashMap<&str, &Tensor>, name: &str) -> Result<&'a Tensor> {
    map.get(name)
        .copied()
        .ok_or_else(|| DrmmError::MissingRecords(format!("checkpoint tensor {}", name)))
}

fn as_index(v: f64, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || !(0.0..=(u32::MAX as f64)).contains(&v) {
        return Err(DrmmError::InvalidParam(format!("{} is not a valid index: {}", what, v)));
    }
    Ok(v as usize)
}

fn get_scalar(map: &HashMap<&str, &Tensor>, name: &str) -> Result<f64> {
    let t = lookup(map, name)?;
    if t.len() != 1 {
        return Err(DrmmError::shape(name, "[1]", format!("{:?}", t.shape())));
    }
    Ok(t.data()[0])
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xFFFF_FFFF) as f64, (v >> 32) as f64]
}

fn join_u64(halves: &[f64], what: &str) -> Result<u64> {
    if halves.len() != 2 {
        return Err(DrmmError::shape(what, "[2]", format!("[{}]", halves.len())));
    }
    let lo = as_index(halves[0], what)? as u64;
    let hi = as_index(halves[1], what)? as u64;
    Ok((hi << 32) | lo)
}

impl TrainMeta {
    pub fn to_records(&self) -> Vec<TensorRecord> {
        let config: Vec<f64> = self.config_echo.bytes().map(|b| b as f64).collect();
        vec![
            vector("meta.seed", &split_u64(self.seed)),
            scalar("meta.epoch", self.epoch as f64),
            TensorRecord::new(
                "meta.config",
                Tensor::new(vec![config.len()], config).expect("byte values"),
            ),
        ]
    }

    pub fn from_records(records: &[TensorRecord]) -> Result<TrainMeta> {
        let map = record_map(records);
        let seed = join_u64(lookup(&map, "meta.seed")?.data(), "meta.seed")?;
        let epoch = as_index(get_scalar(&map, "meta.epoch")?, "meta.epoch")?;
        let bytes: Vec<u8> = lookup(&map, "meta.config")?
            .data()
            .iter()
            .map(|&v| as_index(v, "meta.config").map(|i| i as u8))
            .collect::<Result<_>>()?;
        let config_echo = String::from_utf8(bytes)
            .map_err(|_| DrmmError::InvalidParam("meta.config is not UTF-8".into()))?;
        Ok(TrainMeta { seed, epoch, config_echo })
    }
}

fn record_map(records: &[TensorRecord]) -> HashMap<&str, &Tensor> {
    records.iter().map(|r| (r.name.as_str(), &r.tensor)).collect()
}

const KIND_RMM: f64 = 0.0;
const KIND_DRMM: f64 = 1.0;
const KIND_DRFM: f64 = 2.0;
const KIND_SHALLOW_DISC: f64 = 3.0;
const KIND_DEEP_DISC: f64 = 4.0;
const KIND_TREE: f64 = 5.0;
const KIND_FOREST: f64 = 6.0;

fn provenance_code(p: Provenance) -> f64 {
    match p {
        Provenance::RelaxedFromGenerative => 0.0,
        Provenance::FreeInit => 1.0,
    }
}

fn provenance_from(v: f64) -> Result<Provenance> {
    match v {
        0.0 => Ok(Provenance::RelaxedFromGenerative),
        1.0 => Ok(Provenance::FreeInit),
        other => Err(DrmmError::InvalidParam(format!("unknown provenance code {}", other))),
    }
}

fn layer_records(prefix: &str, layers: &[LayerParams], out: &mut Vec<TensorRecord>) {
    out.push(scalar(format!("{}.n_layers", prefix), layers.len() as f64));
    for (l, layer) in layers.iter().enumerate() {
        let s = &layer.spec;
        let spec = [
            s.in_h as f64,
            s.in_w as f64,
            s.in_c as f64,
            s.filters as f64,
            s.filter_h as f64,
            s.filter_w as f64,
            s.stride as f64,
            s.pool_h as f64,
            s.pool_w as f64,
        ];
        out.push(vector(format!("{}.layer{}.spec", prefix, l), &spec));
        out.push(TensorRecord::new(format!("{}.layer{}.gamma", prefix, l), layer.gamma.clone()));
        if let Some(alpha) = &layer.alpha {
            out.push(TensorRecord::new(format!("{}.layer{}.alpha", prefix, l), alpha.clone()));
        }
        out.push(vector(format!("{}.layer{}.pi_t", prefix, l), &layer.pi_t));
        out.push(scalar(format!("{}.layer{}.pi_on", prefix, l), layer.pi_on));
    }
}

fn layers_from(prefix: &str, map: &HashMap<&str, &Tensor>) -> Result<Vec<LayerParams>> {
    let n = as_index(get_scalar(map, &format!("{}.n_layers", prefix))?, "layer count")?;
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let spec_t = lookup(map, &format!("{}.layer{}.spec", prefix, l))?;
        if spec_t.len() != 9 {
            return Err(DrmmError::shape("layer spec", "[9]", format!("{:?}", spec_t.shape())));
        }
        let v = spec_t.data();
        let spec = LayerSpec {
            in_h: as_index(v[0], "in_h")?,
            in_w: as_index(v[1], "in_w")?,
            in_c: as_index(v[2], "in_c")?,
            filters: as_index(v[3], "filters")?,
            filter_h: as_index(v[4], "filter_h")?,
            filter_w: as_index(v[5], "filter_w")?,
            stride: as_index(v[6], "stride")?,
            pool_h: as_index(v[7], "pool_h")?,
            pool_w: as_index(v[8], "pool_w")?,
        };
        let gamma = lookup(map, &format!("{}.layer{}.gamma", prefix, l))?.clone();
        let alpha = map.get(format!("{}.layer{}.alpha", prefix, l).as_str()).map(|&t| t.clone());
        let pi_t = lookup(map, &format!("{}.layer{}.pi_t", prefix, l))?.data().to_vec();
        let pi_on = get_scalar(map, &format!("{}.layer{}.pi_on", prefix, l))?;
        layers.push(LayerParams { spec, gamma, alpha, pi_t, pi_on });
    }
    Ok(layers)
}

fn drmm_records(prefix: &str, params: &DrmmParams, out: &mut Vec<TensorRecord>) {
    layer_records(prefix, &params.layers, out);
    out.push(TensorRecord::new(format!("{}.mu_c", prefix), params.mu_c.clone()));
    out.push(vector(format!("{}.pi_c", prefix), &params.pi_c));
    out.push(scalar(format!("{}.sigma2", prefix), params.sigma2));
}

fn drmm_from(prefix: &str, map: &HashMap<&str, &Tensor>) -> Result<DrmmParams> {
    let params = DrmmParams {
        layers: layers_from(prefix, map)?,
        mu_c: lookup(map, &format!("{}.mu_c", prefix))?.clone(),
        pi_c: lookup(map, &format!("{}.pi_c", prefix))?.data().to_vec(),
        sigma2: get_scalar(map, &format!("{}.sigma2", prefix))?,
    };
    params.validate()?;
    Ok(params)
}

fn tree_records(prefix: &str, tree: &EvoTree, out: &mut Vec<TensorRecord>) {
    let n = tree.nodes.len();
    out.push(vector(
        format!("{}.meta", prefix),
        &[tree.dim as f64, tree.n_classes as f64, tree.depth as f64, n as f64],
    ));
    let mut parent = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    let mut mutation = Vec::with_capacity(n * tree.dim);
    let mut histogram = vec![0.0; n * tree.n_classes];
    for (i, node) in tree.nodes.iter().enumerate() {
        parent.push(node.parent.map_or(-1.0, |p| p as f64));
        label.push(node.label.map_or(-1.0, |y| y as f64));
        if node.parent.is_none() {
            // root row carries the template so reconstruction can reseed it
            mutation.extend_from_slice(&node.template);
        } else {
            mutation.extend_from_slice(&node.mutation);
        }
        for (k, &h) in node.histogram.iter().enumerate() {
            histogram[i * tree.n_classes + k] = h;
        }
    }
    out.push(vector(format!("{}.parent", prefix), &parent));
    out.push(vector(format!("{}.label", prefix), &label));
    out.push(TensorRecord::new(
        format!("{}.mutation", prefix),
        Tensor::new(vec![n, tree.dim], mutation).expect("finite mutations"),
    ));
    out.push(TensorRecord::new(
        format!("{}.histogram", prefix),
        Tensor::new(vec![n, tree.n_classes], histogram).expect("finite histograms"),
    ));
}

fn tree_from(prefix: &str, map: &HashMap<&str, &Tensor>) -> Result<EvoTree> {
    let meta = lookup(map, &format!("{}.meta", prefix))?;
    if meta.len() != 4 {
        return Err(DrmmError::shape("tree meta", "[4]", format!("{:?}", meta.shape())));
    }
    let dim = as_index(meta.data()[0], "tree dim")?;
    let n_classes = as_index(meta.data()[1], "tree classes")?;
    let depth = as_index(meta.data()[2], "tree depth")?;
    let n = as_index(meta.data()[3], "tree nodes")?;
    let parent = lookup(map, &format!("{}.parent", prefix))?.data();
    let label = lookup(map, &format!("{}.label", prefix))?.data();
    let mutation = lookup(map, &format!("{}.mutation", prefix))?;
    let histogram = lookup(map, &format!("{}.histogram", prefix))?;
    if parent.len() != n
        || label.len() != n
        || mutation.shape() != [n, dim]
        || histogram.shape() != [n, n_classes]
    {
        return Err(DrmmError::MissingRecords(format!("tree {} arrays disagree on node count", prefix)));
    }
    let mut nodes: Vec<EvoNode> = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mutation.data()[i * dim..(i + 1) * dim];
        let (parent_idx, node_depth, template, mut_vec) = if parent[i] < 0.0 {
            if i != 0 {
                return Err(DrmmError::InvalidParam("tree root must be node 0".into()));
            }
            (None, 0, row.to_vec(), vec![0.0; dim])
        } else {
            let p = as_index(parent[i], "tree parent")?;
            if p >= i {
                return Err(DrmmError::InvalidParam("tree parents must precede children".into()));
            }
            let template: Vec<f64> = nodes[p].template.iter().zip(row).map(|(t, m)| t + m).collect();
            (Some(p), nodes[p].depth + 1, template, row.to_vec())
        };
        nodes.push(EvoNode {
            parent: parent_idx,
            depth: node_depth,
            mutation: mut_vec,
            template,
            children: Vec::new(),
            leaf_id: None,
            label: None,
            histogram: Vec::new(),
        });
        if let Some(p) = parent_idx {
            nodes[p].children.push(i);
        }
    }
    let leaves: Vec<usize> = (0..n).filter(|&i| nodes[i].children.is_empty()).collect();
    for (leaf_id, &i) in leaves.iter().enumerate() {
        if nodes[i].depth != depth {
            return Err(DrmmError::InvalidParam("tree leaves disagree with stored depth".into()));
        }
        nodes[i].leaf_id = Some(leaf_id);
        nodes[i].label = if label[i] < 0.0 { None } else { Some(as_index(label[i], "leaf label")?) };
        nodes[i].histogram = histogram.data()[i * n_classes..(i + 1) * n_classes].to_vec();
    }
    Ok(EvoTree { dim, n_classes, depth, nodes, leaves })
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Rmm(_) => "rmm",
            Model::Drmm(_) => "drmm",
            Model::Drfm(_) => "drfm",
            Model::ShallowDiscriminative(_) => "shallow-discriminative",
            Model::DeepDiscriminative(_) => "deep-discriminative",
            Model::Tree(_) => "tree",
            Model::Forest(_) => "forest",
        }
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut out = Vec::new();
        match self {
            Model::Rmm(p) => {
                out.push(scalar("meta.kind", KIND_RMM));
                out.push(vector("rmm.pi_c", &p.pi_c));
                out.push(vector("rmm.pi_g", &p.pi_g));
                out.push(scalar("rmm.pi_a", p.pi_a));
                out.push(TensorRecord::new("rmm.templates", p.templates.clone()));
                out.push(scalar("rmm.sigma2", p.sigma2));
            }
            Model::Drmm(p) => {
                out.push(scalar("meta.kind", KIND_DRMM));
                drmm_records("drmm", p, &mut out);
            }
            Model::Drfm(p) => {
                out.push(scalar("meta.kind", KIND_DRFM));
                layer_records("drfm", &p.layers, &mut out);
                out.push(TensorRecord::new("drfm.top_map", p.top_map.clone()));
                out.push(scalar("drfm.sigma2", p.sigma2));
            }
            Model::ShallowDiscriminative(p) => {
                out.push(scalar("meta.kind", KIND_SHALLOW_DISC));
                out.push(TensorRecord::new("disc.w", p.w.clone()));
                out.push(TensorRecord::new("disc.b_cg", p.b_cg.clone()));
                out.push(vector("disc.scalars", &[p.b_on, p.b_off, provenance_code(p.provenance)]));
            }
            Model::DeepDiscriminative(p) => {
                out.push(scalar("meta.kind", KIND_DEEP_DISC));
                out.push(scalar("disc.provenance", provenance_code(p.provenance)));
                drmm_records("disc.model", &p.model, &mut out);
            }
            Model::Tree(t) => {
                out.push(scalar("meta.kind", KIND_TREE));
                tree_records("tree", t, &mut out);
            }
            Model::Forest(f) => {
                out.push(scalar("meta.kind", KIND_FOREST));
                out.push(scalar("forest.n_trees", f.trees.len() as f64));
                let mut seeds = Vec::with_capacity(f.seeds.len() * 2);
                for &s in &f.seeds {
                    seeds.extend_from_slice(&split_u64(s));
                }
                out.push(TensorRecord::new(
                    "forest.seeds",
                    Tensor::new(vec![f.seeds.len(), 2], seeds).expect("seed halves"),
                ));
                for (t, tree) in f.trees.iter().enumerate() {
                    tree_records(&format!("forest.tree{}", t), tree, &mut out);
                }
            }
        }
        out
    }

    pub fn from_records(records: &[TensorRecord]) -> Result<Model> {
        let map = record_map(records);
        let kind = get_scalar(&map, "meta.kind")?;
        if kind == KIND_RMM {
            let params = RmmParams::new(
                lookup(&map, "rmm.pi_c")?.data().to_vec(),
                lookup(&map, "rmm.pi_g")?.data().to_vec(),
                get_scalar(&map, "rmm.pi_a")?,
                lookup(&map, "rmm.templates")?.clone(),
                get_scalar(&map, "rmm.sigma2")?,
            )?;
            Ok(Model::Rmm(params))
        } else if kind == KIND_DRMM {
            Ok(Model::Drmm(drmm_from("drmm", &map)?))
        } else if kind == KIND_DRFM {
            let params = DrfmParams {
                layers: layers_from("drfm", &map)?,
                top_map: lookup(&map, "drfm.top_map")?.clone(),
                sigma2: get_scalar(&map, "drfm.sigma2")?,
            };
            params.validate()?;
            Ok(Model::Drfm(params))
        } else if kind == KIND_SHALLOW_DISC {
            let scalars = lookup(&map, "disc.scalars")?;
            if scalars.len() != 3 {
                return Err(DrmmError::shape("disc.scalars", "[3]", format!("{:?}", scalars.shape())));
            }
            Ok(Model::ShallowDiscriminative(ShallowDiscriminative {
                w: lookup(&map, "disc.w")?.clone(),
                b_cg: lookup(&map, "disc.b_cg")?.clone(),
                b_on: scalars.data()[0],
                b_off: scalars.data()[1],
                provenance: provenance_from(scalars.data()[2])?,
            }))
        } else if kind == KIND_DEEP_DISC {
            Ok(Model::DeepDiscriminative(DeepDiscriminative {
                model: drmm_from("disc.model", &map)?,
                provenance: provenance_from(get_scalar(&map, "disc.provenance")?)?,
            }))
        } else if kind == KIND_TREE {
            Ok(Model::Tree(tree_from("tree", &map)?))
        } else if kind == KIND_FOREST {
            let n_trees = as_index(get_scalar(&map, "forest.n_trees")?, "forest.n_trees")?;
            let seeds_t = lookup(&map, "forest.seeds")?;
            if seeds_t.shape() != [n_trees, 2] {
                return Err(DrmmError::shape(
                    "forest.seeds",
                    format!("[{}, 2]", n_trees),
                    format!("{:?}", seeds_t.shape()),
                ));
            }
            let mut seeds = Vec::with_capacity(n_trees);
            for t in 0..n_trees {
                seeds.push(join_u64(&seeds_t.data()[t * 2..t * 2 + 2], "forest seed")?);
            }
            let mut trees = Vec::with_capacity(n_trees);
            for t in 0..n_trees {
                trees.push(tree_from(&format!("forest.tree{}", t), &map)?);
            }
            Ok(Model::Forest(Forest { trees, seeds }))
        } else {
            Err(DrmmError::InvalidParam(format!("unknown model kind code {}", kind)))
        }
    }
}
