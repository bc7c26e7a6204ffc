//! Evolutionary variant: templates mutate additively along a taxonomy
//! tree. Greedy root-to-leaf inference is a decision tree; leaf label
//! histograms replace the softmax head; bagging the trees yields a random
//! decision forest.

use crate::error::{DrmmError, Result};
use crate::seed;
use crate::tensor::{dot, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct EvoNode {
    pub parent: Option<usize>,
    pub depth: usize,
    /// Additive mutation relative to the parent (zeros at the root).
    pub mutation: Vec<f64>,
    /// Materialized template: parent template + mutation.
    pub template: Vec<f64>,
    pub children: Vec<usize>,
    /// Dense leaf index, assigned at finalize.
    pub leaf_id: Option<usize>,
    /// Generative class label (leaves).
    pub label: Option<usize>,
    /// Label histogram (leaves): smoothed counts, one value per class.
    pub histogram: Vec<f64>,
}

/// Additive-mutation taxonomy. `nodes[0]` is the root; all leaves sit at
/// the same depth.
#[derive(Debug, Clone)]
pub struct EvoTree {
    pub dim: usize,
    pub n_classes: usize,
    /// Leaf depth; valid after finalize.
    pub depth: usize,
    pub nodes: Vec<EvoNode>,
    /// Node indices of the leaves in leaf-id order.
    pub leaves: Vec<usize>,
}

impl EvoTree {
    pub fn new(dim: usize, n_classes: usize, root_template: Vec<f64>) -> Result<EvoTree> {
        if dim == 0 || n_classes == 0 {
            return Err(DrmmError::InvalidParam("dim and class count must be positive".into()));
        }
        if root_template.len() != dim {
            return Err(DrmmError::shape("EvoTree root", format!("[{}]", dim), format!("[{}]", root_template.len())));
        }
        Ok(EvoTree {
            dim,
            n_classes,
            depth: 0,
            nodes: vec![EvoNode {
                parent: None,
                depth: 0,
                mutation: vec![0.0; dim],
                template: root_template,
                children: Vec::new(),
                leaf_id: None,
                label: None,
                histogram: Vec::new(),
            }],
            leaves: Vec::new(),
        })
    }

    /// Adds a child whose template is the parent template plus `mutation`.
    pub fn add_child(&mut self, parent: usize, mutation: Vec<f64>) -> Result<usize> {
        if parent >= self.nodes.len() {
            return Err(DrmmError::InvalidParam(format!("parent {} out of range", parent)));
        }
        if mutation.len() != self.dim {
            return Err(DrmmError::shape("EvoTree mutation", format!("[{}]", self.dim), format!("[{}]", mutation.len())));
        }
        let template: Vec<f64> = self.nodes[parent]
            .template
            .iter()
            .zip(&mutation)
            .map(|(t, m)| t + m)
            .collect();
        let idx = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(EvoNode {
            parent: Some(parent),
            depth,
            mutation,
            template,
            children: Vec::new(),
            leaf_id: None,
            label: None,
            histogram: Vec::new(),
        });
        self.nodes[parent].children.push(idx);
        Ok(idx)
    }

    /// Collects leaves, checks they share one depth >= 1, assigns dense
    /// leaf ids in creation order, and round-robins class labels with
    /// one-hot initial histograms.
    pub fn finalize(&mut self) -> Result<()> {
        let leaf_idx: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty())
            .collect();
        if leaf_idx.len() == self.nodes.len() {
            return Err(DrmmError::InvalidParam("taxonomy needs at least one mutation level".into()));
        }
        let depth = self.nodes[leaf_idx[0]].depth;
        if depth == 0 || leaf_idx.iter().any(|&i| self.nodes[i].depth != depth) {
            return Err(DrmmError::InvalidParam("all leaves must sit at one depth >= 1".into()));
        }
        self.depth = depth;
        self.leaves = leaf_idx;
        let leaves = self.leaves.clone();
        for (leaf_id, &i) in leaves.iter().enumerate() {
            let node = &mut self.nodes[i];
            node.leaf_id = Some(leaf_id);
            let label = leaf_id % self.n_classes;
            node.label = Some(label);
            let mut hist = vec![0.0; self.n_classes];
            hist[label] = 1.0;
            node.histogram = hist;
        }
        Ok(())
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_template(&self, leaf_id: usize) -> &[f64] {
        &self.nodes[self.leaves[leaf_id]].template
    }
}

/// Gaussian taxonomy: root drawn standard normal, each child's mutation
/// drawn with the given scale. `branching[l]` children per node at level l.
pub fn sample_taxonomy(
    depth: usize,
    branching: &[usize],
    mutation_scale: f64,
    dim: usize,
    n_classes: usize,
    seed_value: u64,
) -> Result<EvoTree> {
    if depth == 0 || branching.len() != depth || branching.iter().any(|&b| b == 0) {
        return Err(DrmmError::InvalidParam(
            "depth >= 1 with one positive branching factor per level".into(),
        ));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "taxonomy", 0));
    let root: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut tree = EvoTree::new(dim, n_classes, root)?;
    let mut frontier = vec![0usize];
    for &b in branching {
        let mut next = Vec::with_capacity(frontier.len() * b);
        for &parent in &frontier {
            for _ in 0..b {
                let mutation: Vec<f64> = (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mutation_scale * z
                    })
                    .collect();
                next.push(tree.add_child(parent, mutation)?);
            }
        }
        frontier = next;
    }
    tree.finalize()?;
    Ok(tree)
}

/// Draws one image: uniform root-to-leaf path, then the leaf template plus
/// isotropic Gaussian noise. Returns the image and the leaf id.
pub fn sample_image(tree: &EvoTree, sigma2: f64, seed_value: u64) -> Result<(Tensor, usize)> {
    if tree.leaves.is_empty() {
        return Err(DrmmError::InvalidParam("taxonomy not finalized".into()));
    }
    let mut rng = seed::rng(seed_value);
    let mut node = 0usize;
    while !tree.nodes[node].children.is_empty() {
        let pick = rng.random_range(0..tree.nodes[node].children.len());
        node = tree.nodes[node].children[pick];
    }
    let sigma = sigma2.sqrt();
    let data: Vec<f64> = tree.nodes[node]
        .template
        .iter()
        .map(|&t| {
            let z: f64 = StandardNormal.sample(&mut rng);
            t + sigma * z
        })
        .collect();
    let leaf_id = tree.nodes[node].leaf_id.expect("finalized leaf");
    Ok((Tensor::from_vec(data)?, leaf_id))
}

/// Greedy decision-tree inference: from the root, step to the child whose
/// template has the highest inner product with the image (lowest child on
/// ties). Returns the reached leaf id and its histogram.
pub fn infer_tree<'a>(tree: &'a EvoTree, image: &Tensor) -> (usize, &'a [f64]) {
    let mut node = 0usize;
    while !tree.nodes[node].children.is_empty() {
        let mut best = f64::NEG_INFINITY;
        let mut arg = tree.nodes[node].children[0];
        for &child in &tree.nodes[node].children {
            let s = dot(&tree.nodes[child].template, image.data());
            if s > best {
                best = s;
                arg = child;
            }
        }
        node = arg;
    }
    (
        tree.nodes[node].leaf_id.expect("finalized leaf"),
        &tree.nodes[node].histogram,
    )
}

/// Class decision: route to a leaf, then argmax of its histogram (lowest
/// class on ties).
pub fn classify_tree(tree: &EvoTree, image: &Tensor) -> usize {
    let (_, hist) = infer_tree(tree, image);
    argmax(hist)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// Replaces every leaf histogram with the Laplace-smoothed label counts of
/// the training samples greedily routed to it: `count + 1` per class, so
/// an unvisited leaf predicts uniformly.
pub fn fit_histograms(tree: &mut EvoTree, images: &[Tensor], labels: &[usize]) -> Result<()> {
    if images.len() != labels.len() {
        return Err(DrmmError::shape(
            "fit_histograms",
            format!("{} labels", images.len()),
            format!("{}", labels.len()),
        ));
    }
    let mut counts = vec![vec![0.0; tree.n_classes]; tree.n_leaves()];
    for (img, &y) in images.iter().zip(labels) {
        if y >= tree.n_classes {
            return Err(DrmmError::InvalidParam(format!("label {} out of range", y)));
        }
        let (leaf, _) = infer_tree(tree, img);
        counts[leaf][y] += 1.0;
    }
    for (leaf_id, &node) in tree.leaves.clone().iter().enumerate() {
        let hist: Vec<f64> = counts[leaf_id].iter().map(|&c| c + 1.0).collect();
        tree.nodes[node].histogram = hist;
    }
    Ok(())
}

/// How forest trees are built on each bootstrap resample.
#[derive(Debug, Clone)]
pub enum TreeBuilder {
    /// Keep this taxonomy's structure and templates; refit histograms.
    FromTaxonomy(EvoTree),
    /// Learn structure by recursive k-means splitting of routed samples.
    Learn { depth: usize, branching: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Forest {
    pub trees: Vec<EvoTree>,
    pub seeds: Vec<u64>,
}

/// Bagging: each tree sees a bootstrap resample (with replacement, same
/// size; or the full sample when `bootstrap` is off) and is built per the
/// builder. Deterministic given the seed.
pub fn bagged_forest(
    images: &[Tensor],
    labels: &[usize],
    n_trees: usize,
    builder: &TreeBuilder,
    bootstrap: bool,
    seed_value: u64,
) -> Result<Forest> {
    if n_trees == 0 {
        return Err(DrmmError::InvalidParam("forest needs at least one tree".into()));
    }
    if images.is_empty() || images.len() != labels.len() {
        return Err(DrmmError::DegenerateInput("forest needs aligned labeled samples".into()));
    }
    let mut trees = Vec::with_capacity(n_trees);
    let mut seeds = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let tree_seed = seed::derive(seed_value, "tree", t as u64);
        seeds.push(tree_seed);
        let (bag_images, bag_labels): (Vec<Tensor>, Vec<usize>) = if bootstrap {
            let mut rng = seed::rng(seed::derive(tree_seed, "bootstrap", 0));
            (0..images.len())
                .map(|_| {
                    let i = rng.random_range(0..images.len());
                    (images[i].clone(), labels[i])
                })
                .unzip()
        } else {
            (images.to_vec(), labels.to_vec())
        };
        let mut tree = match builder {
            TreeBuilder::FromTaxonomy(tax) => tax.clone(),
            TreeBuilder::Learn { depth, branching } => {
                learn_tree(&bag_images, &bag_labels, *depth, branching, tree_seed)?
            }
        };
        fit_histograms(&mut tree, &bag_images, &bag_labels)?;
        trees.push(tree);
    }
    Ok(Forest { trees, seeds })
}

/// Forest decision: mean of the trees' normalized leaf histograms, argmax
/// class (lowest on ties).
pub fn classify_forest(forest: &Forest, image: &Tensor) -> usize {
    let nc = forest.trees[0].n_classes;
    let mut mean = vec![0.0; nc];
    for tree in &forest.trees {
        let (_, hist) = infer_tree(tree, image);
        let total: f64 = hist.iter().sum();
        for (m, &h) in mean.iter_mut().zip(hist) {
            *m += h / total;
        }
    }
    argmax(&mean)
}

/// Recursive k-means template learning: each node splits its routed
/// samples into `branching[level]` clusters (farthest-point seeded,
/// fixed-iteration Lloyd updates) and the children take the cluster means
/// as templates. Classes are inferred later from the histograms.
fn learn_tree(
    images: &[Tensor],
    labels: &[usize],
    depth: usize,
    branching: &[usize],
    seed_value: u64,
) -> Result<EvoTree> {
    if depth == 0 || branching.len() != depth || branching.iter().any(|&b| b == 0) {
        return Err(DrmmError::InvalidParam(
            "depth >= 1 with one positive branching factor per level".into(),
        ));
    }
    let dim = images[0].len();
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let mut mean = vec![0.0; dim];
    for img in images {
        for (m, &x) in mean.iter_mut().zip(img.data()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= images.len() as f64;
    }
    let mut tree = EvoTree::new(dim, n_classes, mean)?;
    let all: Vec<usize> = (0..images.len()).collect();
    split_node(&mut tree, 0, &all, images, branching, 0, seed_value)?;
    tree.finalize()?;
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn split_node(
    tree: &mut EvoTree,
    node: usize,
    routed: &[usize],
    images: &[Tensor],
    branching: &[usize],
    level: usize,
    seed_value: u64,
) -> Result<()> {
    if level == branching.len() {
        return Ok(());
    }
    let k = branching[level];
    let parent_template = tree.nodes[node].template.clone();
    let centers = kmeans_centers(routed, images, k, &parent_template, seed::derive(seed_value, "split", node as u64));

    // route samples to their nearest center for the recursion
    let mut assignment = vec![Vec::new(); k];
    for &i in routed {
        let mut best = f64::INFINITY;
        let mut arg = 0usize;
        for (j, c) in centers.iter().enumerate() {
            let d2 = sq_dist(images[i].data(), c);
            if d2 < best {
                best = d2;
                arg = j;
            }
        }
        assignment[arg].push(i);
    }
    for (j, center) in centers.iter().enumerate() {
        let mutation: Vec<f64> = center.iter().zip(&parent_template).map(|(c, p)| c - p).collect();
        let child = tree.add_child(node, mutation)?;
        split_node(tree, child, &assignment[j], images, branching, level + 1, seed_value)?;
    }
    Ok(())
}

fn kmeans_centers(
    routed: &[usize],
    images: &[Tensor],
    k: usize,
    fallback: &[f64],
    seed_value: u64,
) -> Vec<Vec<f64>> {
    let dim = fallback.len();
    if routed.is_empty() {
        return vec![fallback.to_vec(); k];
    }
    let mut rng = seed::rng(seed_value);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = routed[rng.random_range(0..routed.len())];
    centers.push(images[first].data().to_vec());
    while centers.len() < k {
        let mut best = f64::NEG_INFINITY;
        let mut arg = routed[0];
        for &i in routed {
            let d = centers
                .iter()
                .map(|c| sq_dist(images[i].data(), c))
                .fold(f64::INFINITY, f64::min);
            if d > best {
                best = d;
                arg = i;
            }
        }
        centers.push(images[arg].data().to_vec());
    }
    for _ in 0..25 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for &i in routed {
            let mut best = f64::INFINITY;
            let mut arg = 0usize;
            for (j, c) in centers.iter().enumerate() {
                let d2 = sq_dist(images[i].data(), c);
                if d2 < best {
                    best = d2;
                    arg = j;
                }
            }
            counts[arg] += 1;
            for (s, &x) in sums[arg].iter_mut().zip(images[i].data()) {
                *s += x;
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            for (idx, s) in sums[j].iter().enumerate() {
                let v = s / counts[j] as f64;
                if v != centers[j][idx] {
                    moved = true;
                }
                centers[j][idx] = v;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let r = x - y;
        acc += r * r;
    }
    acc
}
