//! The generalized soft tree: topology, per-node parameters, forward
//! evaluation and soft leaf weights.
//!
//! Inner nodes score a sample with either a hyperplane (a'x + b) or a
//! convolutional pipeline (conv -> relu -> 2x2 max-pool -> linear readout).
//! A leaf holds a linear model over the flattened input. Routing is soft:
//! the left child of node n receives weight 1 - sigmoid(f_n(x)) and the
//! right child sigmoid(f_n(x)); a leaf's weight is the product along its
//! path, and the tree output blends leaf outputs by those weights.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    self, conv2d, conv2d_vjp, dot, maxpool2x2, maxpool2x2_vjp, relu, relu_vjp, sigmoid_scalar,
    Matrix, PoolIndices, Tensor,
};

/// Stable node identifier, assigned at creation and never reused.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Hyperplane,
    Convolutional,
}

/// Convolutional split hyperparameters, shared by all inner nodes of a tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// When false, the readout is the plain sum of the pooled map plus a
    /// bias instead of a learned linear layer.
    pub include_final_linear: bool,
}

impl ConvSpec {
    /// Odd square kernel, stride 1, shape-preserving padding.
    pub fn same(kernel: usize) -> ConvSpec {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            include_final_linear: true,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::same(5)
    }
}

/// What kind of split every inner node computes, plus the input geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub kind: NodeKind,
    /// `[d]` for tabular input, `[depth, height, width]` for images.
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
}

/// Spatial bookkeeping for the convolutional pipeline.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pooled_h: usize,
    pub pooled_w: usize,
}

impl ConvGeometry {
    pub fn pooled_len(&self) -> usize {
        self.pooled_h * self.pooled_w
    }
}

impl NodeSpec {
    pub fn hyperplane(input_shape: Vec<usize>) -> NodeSpec {
        NodeSpec {
            kind: NodeKind::Hyperplane,
            input_shape,
            conv: None,
        }
    }

    pub fn convolutional(input_shape: Vec<usize>, conv: ConvSpec) -> NodeSpec {
        NodeSpec {
            kind: NodeKind::Convolutional,
            input_shape,
            conv: Some(conv),
        }
    }

    /// Flattened input dimension; leaves and hyperplane nodes act on this.
    pub fn flat_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        match self.kind {
            NodeKind::Hyperplane => {
                if self.conv.is_some() {
                    return Err(Error::Config(
                        "hyperplane spec must not carry conv hyperparameters".into(),
                    ));
                }
            }
            NodeKind::Convolutional => {
                self.conv_geometry()?;
            }
        }
        Ok(())
    }

    /// Conv/pool output dims for this spec; errors when the spec is not
    /// convolutional, the kernel does not fit, or pooling would see odd dims.
    pub fn conv_geometry(&self) -> Result<ConvGeometry> {
        let conv = self.conv.as_ref().ok_or_else(|| {
            Error::Config("convolutional spec requires conv hyperparameters".into())
        })?;
        if self.input_shape.len() != 3 {
            return Err(Error::Config(format!(
                "convolutional spec needs a depth x height x width input, got {:?}",
                self.input_shape
            )));
        }
        if conv.kernel_h % 2 == 0 || conv.kernel_w % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel dims must be odd, got {}x{}",
                conv.kernel_h, conv.kernel_w
            )));
        }
        if conv.stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        let (h, w) = (self.input_shape[1], self.input_shape[2]);
        let ph = h + 2 * conv.padding;
        let pw = w + 2 * conv.padding;
        if conv.kernel_h > ph || conv.kernel_w > pw {
            return Err(Error::Config(format!(
                "kernel {}x{} exceeds padded input {}x{}",
                conv.kernel_h, conv.kernel_w, ph, pw
            )));
        }
        let out_h = (ph - conv.kernel_h) / conv.stride + 1;
        let out_w = (pw - conv.kernel_w) / conv.stride + 1;
        if out_h % 2 != 0 || out_w % 2 != 0 {
            return Err(Error::Config(format!(
                "conv output {out_h}x{out_w} has odd dims; 2x2 pooling requires even dims"
            )));
        }
        Ok(ConvGeometry {
            out_h,
            out_w,
            pooled_h: out_h / 2,
            pooled_w: out_w / 2,
        })
    }
}

/// Trainable parameters of one inner node.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeParams {
    Hyperplane {
        weights: Vec<f64>,
        bias: f64,
    },
    Conv {
        /// depth x Kh x Kw
        kernel: Tensor,
        /// Per-depth biases; the forward adds their sum to every cell.
        conv_bias: Vec<f64>,
        /// Linear readout over the flattened pooled map; `None` means the
        /// sum-plus-bias readout.
        linear_weights: Option<Vec<f64>>,
        linear_bias: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerNode {
    pub id: NodeId,
    pub left: NodeId,
    pub right: NodeId,
    pub params: NodeParams,
}

/// A leaf's linear model: `weights` is output_dim x flat_dim, `bias` has
/// one entry per output dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub id: NodeId,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Leaf {
    /// g(x) = A x + b, written into `out` (length = output dim).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = dot(self.weights.row(c), x) + self.bias[c];
        }
    }
}

/// Soft leaf-assignment matrix for a batch: `weights[i][col]` is how much of
/// sample i reaches the leaf at `leaf_ids[col]`; `col_sums` holds the soft
/// per-leaf sample mass.
#[derive(Clone, Debug)]
pub struct LeafWeights {
    pub leaf_ids: Vec<NodeId>,
    pub weights: Matrix,
    pub col_sums: Vec<f64>,
}

impl LeafWeights {
    pub fn num_leaves(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn column_of(&self, id: NodeId) -> Option<usize> {
        self.leaf_ids.iter().position(|&l| l == id)
    }
}

/// Split scores f_n(x_i) for every inner node.
#[derive(Clone, Debug)]
pub struct NodeScores {
    pub node_ids: Vec<NodeId>,
    pub scores: Matrix,
}

#[derive(Clone, Debug)]
pub enum Prediction {
    Labels(Vec<usize>),
    Values(Matrix),
}

/// The generalized soft tree.
#[derive(Clone, Debug)]
pub struct Tree {
    root: NodeId,
    inner: BTreeMap<NodeId, InnerNode>,
    leaves: BTreeMap<NodeId, Leaf>,
    spec: NodeSpec,
    output_dim: usize,
    task: Task,
    next_id: u32,
}

fn init_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn init_leaf(rng: &mut ChaCha8Rng, id: NodeId, output_dim: usize, flat_dim: usize) -> Leaf {
    let weights =
        Matrix::new(output_dim, flat_dim, init_uniform(rng, output_dim * flat_dim, flat_dim))
            .expect("leaf init shape");
    Leaf {
        id,
        weights,
        bias: vec![0.0; output_dim],
    }
}

fn init_node_params(rng: &mut ChaCha8Rng, spec: &NodeSpec) -> NodeParams {
    match spec.kind {
        NodeKind::Hyperplane => NodeParams::Hyperplane {
            weights: init_uniform(rng, spec.flat_dim(), spec.flat_dim()),
            bias: 0.0,
        },
        NodeKind::Convolutional => {
            let conv = spec.conv.as_ref().expect("validated conv spec");
            let geom = spec.conv_geometry().expect("validated conv spec");
            let depth = spec.input_shape[0];
            let fan_in = depth * conv.kernel_h * conv.kernel_w;
            let kernel = Tensor::new(
                vec![depth, conv.kernel_h, conv.kernel_w],
                init_uniform(rng, fan_in, fan_in),
            )
            .expect("kernel init shape");
            let linear_weights = if conv.include_final_linear {
                Some(init_uniform(rng, geom.pooled_len(), geom.pooled_len()))
            } else {
                None
            };
            NodeParams::Conv {
                kernel,
                conv_bias: vec![0.0; depth],
                linear_weights,
                linear_bias: 0.0,
            }
        }
    }
}

impl Tree {
    /// Balanced tree with `2^depth - 1` inner nodes and `2^depth` leaves.
    /// Inner nodes take ids 0.. in preorder, leaves follow left-to-right.
    /// Deterministic for a given seed.
    pub fn build_full(
        depth: usize,
        spec: NodeSpec,
        output_dim: usize,
        task: Task,
        seed: u64,
    ) -> Result<Tree> {
        if depth < 1 {
            return Err(Error::Config("tree depth must be >= 1".into()));
        }
        spec.validate()?;
        if output_dim == 0 {
            return Err(Error::Config("output dimension must be >= 1".into()));
        }
        let n_inner = (1u32 << depth) - 1;
        let mut tree = Tree {
            root: NodeId(0),
            inner: BTreeMap::new(),
            leaves: BTreeMap::new(),
            spec,
            output_dim,
            task,
            next_id: n_inner + (1 << depth),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inner_next = 0u32;
        let mut leaf_next = n_inner;
        tree.root = tree.build_rec(depth, &mut inner_next, &mut leaf_next, &mut rng);
        Ok(tree)
    }

    fn build_rec(
        &mut self,
        depth: usize,
        inner_next: &mut u32,
        leaf_next: &mut u32,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        if depth == 0 {
            let id = NodeId(*leaf_next);
            *leaf_next += 1;
            let leaf = init_leaf(rng, id, self.output_dim, self.spec.flat_dim());
            self.leaves.insert(id, leaf);
            return id;
        }
        let id = NodeId(*inner_next);
        *inner_next += 1;
        let params = init_node_params(rng, &self.spec);
        let left = self.build_rec(depth - 1, inner_next, leaf_next, rng);
        let right = self.build_rec(depth - 1, inner_next, leaf_next, rng);
        self.inner.insert(
            id,
            InnerNode {
                id,
                left,
                right,
                params,
            },
        );
        id
    }

    /// Degenerate single-leaf tree; the output is just the leaf's linear
    /// model.
    pub fn single_leaf(spec: NodeSpec, output_dim: usize, task: Task, seed: u64) -> Result<Tree> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaf = init_leaf(&mut rng, NodeId(0), output_dim, spec.flat_dim());
        let mut leaves = BTreeMap::new();
        leaves.insert(NodeId(0), leaf);
        Ok(Tree {
            root: NodeId(0),
            inner: BTreeMap::new(),
            leaves,
            spec,
            output_dim,
            task,
            next_id: 1,
        })
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn spec(&self) -> &NodeSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn flat_dim(&self) -> usize {
        self.spec.flat_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn num_inner(&self) -> usize {
        self.inner.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn inner(&self, id: NodeId) -> Option<&InnerNode> {
        self.inner.get(&id)
    }

    pub fn inner_mut(&mut self, id: NodeId) -> Option<&mut InnerNode> {
        self.inner.get_mut(&id)
    }

    pub fn leaf(&self, id: NodeId) -> Option<&Leaf> {
        self.leaves.get(&id)
    }

    pub fn leaf_mut(&mut self, id: NodeId) -> Option<&mut Leaf> {
        self.leaves.get_mut(&id)
    }

    pub fn inner_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.inner.keys().copied()
    }

    pub fn leaf_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.leaves.keys().copied()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.leaves.contains_key(&id)
    }

    /// Leaves in left-to-right order; this is the column order used by
    /// [`LeafWeights`].
    pub fn leaf_order(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.leaves.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if let Some(node) = self.inner.get(&id) {
                stack.push(node.right);
                stack.push(node.left);
            } else {
                order.push(id);
            }
        }
        order
    }

    /// Longest root-to-leaf path length in edges.
    pub fn max_depth(&self) -> usize {
        fn rec(tree: &Tree, id: NodeId) -> usize {
            match tree.inner.get(&id) {
                Some(n) => 1 + rec(tree, n.left).max(rec(tree, n.right)),
                None => 0,
            }
        }
        rec(self, self.root)
    }

    /// Constructor for deserialization; validates the full invariant set.
    pub fn from_parts(
        root: NodeId,
        inner: Vec<InnerNode>,
        leaves: Vec<Leaf>,
        spec: NodeSpec,
        output_dim: usize,
        task: Task,
        next_id: u32,
    ) -> Result<Tree> {
        let tree = Tree {
            root,
            inner: inner.into_iter().map(|n| (n.id, n)).collect(),
            leaves: leaves.into_iter().map(|l| (l.id, l)).collect(),
            spec,
            output_dim,
            task,
            next_id,
        };
        tree.validate()?;
        Ok(tree)
    }

    /// Structural and shape invariants: single-parent reachability of every
    /// node, parameter shapes consistent with the spec, finite parameters.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.output_dim == 0 {
            return Err(Error::Config("output dimension must be >= 1".into()));
        }
        let mut seen: HashMap<NodeId, ()> = HashMap::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if seen.insert(id, ()).is_some() {
                return Err(Error::Data(format!(
                    "node {id} reachable by more than one path"
                )));
            }
            if let Some(node) = self.inner.get(&id) {
                if self.leaves.contains_key(&id) {
                    return Err(Error::Data(format!("id {id} is both inner and leaf")));
                }
                stack.push(node.left);
                stack.push(node.right);
            } else if !self.leaves.contains_key(&id) {
                return Err(Error::Data(format!("dangling child id {id}")));
            }
        }
        if seen.len() != self.inner.len() + self.leaves.len() {
            return Err(Error::Data(format!(
                "{} nodes in tables but {} reachable from root",
                self.inner.len() + self.leaves.len(),
                seen.len()
            )));
        }
        if seen.keys().any(|id| id.0 >= self.next_id) {
            return Err(Error::Data("node id >= next_id watermark".into()));
        }
        let d = self.spec.flat_dim();
        for node in self.inner.values() {
            match (&node.params, self.spec.kind) {
                (NodeParams::Hyperplane { weights, bias }, NodeKind::Hyperplane) => {
                    if weights.len() != d {
                        return Err(Error::Data(format!(
                            "node {}: hyperplane weight length {} vs input dim {d}",
                            node.id,
                            weights.len()
                        )));
                    }
                    if !bias.is_finite() || weights.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidValue(format!(
                            "node {}: non-finite parameters",
                            node.id
                        )));
                    }
                }
                (
                    NodeParams::Conv {
                        kernel,
                        conv_bias,
                        linear_weights,
                        linear_bias,
                    },
                    NodeKind::Convolutional,
                ) => {
                    let conv = self.spec.conv.as_ref().expect("validated above");
                    let geom = self.spec.conv_geometry()?;
                    let depth = self.spec.input_shape[0];
                    if kernel.shape() != [depth, conv.kernel_h, conv.kernel_w] {
                        return Err(Error::Data(format!(
                            "node {}: kernel shape {:?} vs spec",
                            node.id,
                            kernel.shape()
                        )));
                    }
                    if conv_bias.len() != depth {
                        return Err(Error::Data(format!(
                            "node {}: conv bias length {} vs depth {depth}",
                            node.id,
                            conv_bias.len()
                        )));
                    }
                    match (linear_weights, conv.include_final_linear) {
                        (Some(w), true) => {
                            if w.len() != geom.pooled_len() {
                                return Err(Error::Data(format!(
                                    "node {}: linear weight length {} vs pooled map {}",
                                    node.id,
                                    w.len(),
                                    geom.pooled_len()
                                )));
                            }
                        }
                        (None, false) => {}
                        _ => {
                            return Err(Error::Data(format!(
                                "node {}: linear weights inconsistent with include_final_linear",
                                node.id
                            )));
                        }
                    }
                    kernel.check_finite("kernel")?;
                    if !linear_bias.is_finite()
                        || conv_bias.iter().any(|v| !v.is_finite())
                        || linear_weights
                            .as_ref()
                            .is_some_and(|w| w.iter().any(|v| !v.is_finite()))
                    {
                        return Err(Error::InvalidValue(format!(
                            "node {}: non-finite parameters",
                            node.id
                        )));
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "node {}: parameter kind does not match spec kind",
                        node.id
                    )));
                }
            }
        }
        for leaf in self.leaves.values() {
            if leaf.weights.rows() != self.output_dim || leaf.weights.cols() != d {
                return Err(Error::Data(format!(
                    "leaf {}: weight shape {}x{} vs expected {}x{d}",
                    leaf.id,
                    leaf.weights.rows(),
                    leaf.weights.cols(),
                    self.output_dim
                )));
            }
            if leaf.bias.len() != self.output_dim {
                return Err(Error::Data(format!(
                    "leaf {}: bias length {} vs output dim {}",
                    leaf.id,
                    leaf.bias.len(),
                    self.output_dim
                )));
            }
            leaf.weights.check_finite("leaf weights")?;
            if leaf.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "leaf {}: non-finite bias",
                    leaf.id
                )));
            }
        }
        Ok(())
    }

    /// Replace `leaf_id` with the (single inner node, two leaves) of a
    /// depth-1 `subtree`. New ids are assigned from this tree's counter; all
    /// other nodes and parameters are untouched. Returns
    /// (inner id, left leaf id, right leaf id).
    pub fn insert_subtree(
        &mut self,
        leaf_id: NodeId,
        subtree: &Tree,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        if !self.leaves.contains_key(&leaf_id) {
            return Err(Error::Config(format!("unknown leaf id {leaf_id}")));
        }
        if subtree.num_inner() != 1 || subtree.num_leaves() != 2 {
            return Err(Error::Config(format!(
                "subtree must be depth 1 (1 inner, 2 leaves), got {} inner / {} leaves",
                subtree.num_inner(),
                subtree.num_leaves()
            )));
        }
        if subtree.spec != self.spec
            || subtree.output_dim != self.output_dim
            || subtree.task != self.task
        {
            return Err(Error::Shape(
                "subtree spec/output/task does not match tree".into(),
            ));
        }
        let sub_root = subtree
            .inner
            .get(&subtree.root)
            .ok_or_else(|| Error::Config("subtree root is not an inner node".into()))?;
        let sub_left = subtree.leaves.get(&sub_root.left).expect("depth-1 shape");
        let sub_right = subtree.leaves.get(&sub_root.right).expect("depth-1 shape");

        let new_inner = NodeId(self.next_id);
        let new_left = NodeId(self.next_id + 1);
        let new_right = NodeId(self.next_id + 2);
        self.next_id += 3;

        if let Some(parent) = self
            .inner
            .values_mut()
            .find(|n| n.left == leaf_id || n.right == leaf_id)
        {
            if parent.left == leaf_id {
                parent.left = new_inner;
            } else {
                parent.right = new_inner;
            }
        } else if self.root == leaf_id {
            self.root = new_inner;
        } else {
            return Err(Error::Data(format!("leaf {leaf_id} has no parent link")));
        }

        self.leaves.remove(&leaf_id);
        self.inner.insert(
            new_inner,
            InnerNode {
                id: new_inner,
                left: new_left,
                right: new_right,
                params: sub_root.params.clone(),
            },
        );
        self.leaves.insert(
            new_left,
            Leaf {
                id: new_left,
                weights: sub_left.weights.clone(),
                bias: sub_left.bias.clone(),
            },
        );
        self.leaves.insert(
            new_right,
            Leaf {
                id: new_right,
                weights: sub_right.weights.clone(),
                bias: sub_right.bias.clone(),
            },
        );
        Ok((new_inner, new_left, new_right))
    }

    pub(crate) fn next_id_watermark(&self) -> u32 {
        self.next_id
    }
}

/// Forward state of one convolutional node on one sample, kept for the
/// backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ConvCache {
    pub z: Tensor,
    pub pooled: Tensor,
    pub indices: PoolIndices,
}

/// Everything one forward pass produces; trainer and analysis consume the
/// caches, public wrappers expose the pieces.
pub(crate) struct ForwardCache {
    pub node_ids: Vec<NodeId>,
    pub node_col: HashMap<NodeId, usize>,
    pub scores: Matrix,
    pub sigmas: Matrix,
    /// conv_caches[col][sample]; empty for hyperplane trees or when caches
    /// were not requested.
    pub conv_caches: Vec<Vec<ConvCache>>,
    pub weights: LeafWeights,
    /// leaf_outputs[col] is N x output_dim for the leaf at column `col`.
    pub leaf_outputs: Vec<Matrix>,
    pub phi: Matrix,
}

pub(crate) fn hyperplane_score(weights: &[f64], bias: f64, x: &[f64]) -> f64 {
    dot(weights, x) + bias
}

/// conv -> add summed bias -> relu -> 2x2 max-pool -> linear (or sum) readout.
pub(crate) fn conv_node_forward(
    params: &NodeParams,
    spec: &NodeSpec,
    image: &Tensor,
) -> Result<(f64, ConvCache)> {
    let NodeParams::Conv {
        kernel,
        conv_bias,
        linear_weights,
        linear_bias,
    } = params
    else {
        return Err(Error::Shape("conv forward on hyperplane params".into()));
    };
    let conv = spec.conv.as_ref().expect("validated spec");
    let z = conv2d(image, kernel, conv_bias, conv.stride, conv.padding)?;
    let o = relu(&z);
    let (pooled, indices) = maxpool2x2(&o)?;
    let score = match linear_weights {
        Some(w) => dot(w, pooled.data()) + linear_bias,
        None => pooled.data().iter().sum::<f64>() + linear_bias,
    };
    Ok((
        score,
        ConvCache {
            z,
            pooled,
            indices,
        },
    ))
}

/// Parameter (and optional input) cotangents of one conv node for one
/// sample, given the score cotangent.
pub(crate) struct ConvNodeGrads {
    pub kernel: Tensor,
    pub conv_bias: Vec<f64>,
    pub linear_weights: Option<Vec<f64>>,
    pub linear_bias: f64,
    pub input: Option<Tensor>,
}

pub(crate) fn conv_node_backward(
    params: &NodeParams,
    spec: &NodeSpec,
    image: &Tensor,
    cache: &ConvCache,
    score_cot: f64,
    want_input_grad: bool,
) -> Result<ConvNodeGrads> {
    let NodeParams::Conv {
        kernel,
        linear_weights,
        ..
    } = params
    else {
        return Err(Error::Shape("conv backward on hyperplane params".into()));
    };
    let conv = spec.conv.as_ref().expect("validated spec");
    let pooled_shape = cache.pooled.shape().to_vec();
    let (grad_linear, cot_pooled) = match linear_weights {
        Some(w) => {
            let gw: Vec<f64> = cache.pooled.data().iter().map(|&p| score_cot * p).collect();
            let cp: Vec<f64> = w.iter().map(|&wi| score_cot * wi).collect();
            (Some(gw), Tensor::new(pooled_shape, cp)?)
        }
        None => (
            None,
            Tensor::new(pooled_shape.clone(), vec![score_cot; cache.pooled.len()])?,
        ),
    };
    let cot_o = maxpool2x2_vjp(&cache.indices, cache.z.shape(), &cot_pooled)?;
    let cot_z = relu_vjp(&cache.z, &cot_o)?;
    let (grad_image, grad_kernel, grad_bias) =
        conv2d_vjp(image, kernel, conv.stride, conv.padding, &cot_z)?;
    Ok(ConvNodeGrads {
        kernel: grad_kernel,
        conv_bias: grad_bias,
        linear_weights: grad_linear,
        linear_bias: score_cot,
        input: want_input_grad.then_some(grad_image),
    })
}

fn check_batch(tree: &Tree, batch: &Matrix) -> Result<()> {
    if batch.cols() != tree.flat_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features but tree expects {}",
            batch.cols(),
            tree.flat_dim()
        )));
    }
    Ok(())
}

/// Full forward pass over a batch. `with_caches` keeps the per-sample conv
/// intermediates the backward pass needs.
pub(crate) fn forward_cache(tree: &Tree, batch: &Matrix, with_caches: bool) -> Result<ForwardCache> {
    check_batch(tree, batch)?;
    let n = batch.rows();
    let node_ids: Vec<NodeId> = tree.inner_ids().collect();
    let node_col: HashMap<NodeId, usize> =
        node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut scores = Matrix::zeros(n, node_ids.len());
    let mut sigmas = Matrix::zeros(n, node_ids.len());
    let mut conv_caches: Vec<Vec<ConvCache>> = Vec::new();
    let is_conv = tree.spec.kind == NodeKind::Convolutional;
    if is_conv && with_caches {
        conv_caches = (0..node_ids.len()).map(|_| Vec::with_capacity(n)).collect();
    }

    for (col, &id) in node_ids.iter().enumerate() {
        let node = tree.inner(id).expect("id from table");
        match &node.params {
            NodeParams::Hyperplane { weights, bias } => {
                for i in 0..n {
                    let s = hyperplane_score(weights, *bias, batch.row(i));
                    scores.row_mut(i)[col] = s;
                    sigmas.row_mut(i)[col] = sigmoid_scalar(s);
                }
            }
            params @ NodeParams::Conv { .. } => {
                for i in 0..n {
                    let image = Tensor::new(tree.spec.input_shape.clone(), batch.row(i).to_vec())?;
                    let (s, cache) = conv_node_forward(params, &tree.spec, &image)?;
                    scores.row_mut(i)[col] = s;
                    sigmas.row_mut(i)[col] = sigmoid_scalar(s);
                    if with_caches {
                        conv_caches[col].push(cache);
                    }
                }
            }
        }
    }
    scores.check_finite("node scores")?;

    let leaf_ids = tree.leaf_order();
    let leaf_col: HashMap<NodeId, usize> =
        leaf_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut weights = Matrix::zeros(n, leaf_ids.len());

    // Route every sample down the tree, multiplying sigmoid terms along the
    // way: left gets 1 - sigma, right gets sigma.
    let mut stack: Vec<(NodeId, f64)> = Vec::new();
    for i in 0..n {
        stack.push((tree.root, 1.0));
        while let Some((id, prefix)) = stack.pop() {
            if let Some(node) = tree.inner(id) {
                let s = sigmas.row(i)[node_col[&id]];
                stack.push((node.left, prefix * (1.0 - s)));
                stack.push((node.right, prefix * s));
            } else {
                weights.row_mut(i)[leaf_col[&id]] = prefix;
            }
        }
    }
    let col_sums: Vec<f64> = (0..leaf_ids.len())
        .map(|c| (0..n).map(|i| weights.row(i)[c]).sum())
        .collect();

    let k = tree.output_dim;
    let mut leaf_outputs: Vec<Matrix> = Vec::with_capacity(leaf_ids.len());
    for &id in &leaf_ids {
        let leaf = tree.leaf(id).expect("id from leaf order");
        let mut out = Matrix::zeros(n, k);
        for i in 0..n {
            leaf.eval_into(batch.row(i), out.row_mut(i));
        }
        leaf_outputs.push(out);
    }

    let mut phi = Matrix::zeros(n, k);
    for (c, outs) in leaf_outputs.iter().enumerate() {
        for i in 0..n {
            let w = weights.row(i)[c];
            numerics::axpy(w, outs.row(i), phi.row_mut(i));
        }
    }

    Ok(ForwardCache {
        node_ids,
        node_col,
        scores,
        sigmas,
        conv_caches,
        weights: LeafWeights {
            leaf_ids,
            weights,
            col_sums,
        },
        leaf_outputs,
        phi,
    })
}

/// Split scores f_n(x_i) for every inner node, ids sorted ascending.
pub fn node_scores(tree: &Tree, batch: &Matrix) -> Result<NodeScores> {
    let cache = forward_cache(tree, batch, false)?;
    Ok(NodeScores {
        node_ids: cache.node_ids,
        scores: cache.scores,
    })
}

/// Soft leaf weights w[i][l]; every row sums to 1 by construction.
pub fn leaf_weights(tree: &Tree, batch: &Matrix) -> Result<LeafWeights> {
    Ok(forward_cache(tree, batch, false)?.weights)
}

/// Batch forward: blended outputs (N x output_dim) plus the leaf weights.
pub fn forward(tree: &Tree, batch: &Matrix) -> Result<(Matrix, LeafWeights)> {
    let cache = forward_cache(tree, batch, false)?;
    Ok((cache.phi, cache.weights))
}

/// Class labels (argmax of the softmax readout) or raw regression values.
pub fn predict(tree: &Tree, batch: &Matrix) -> Result<Prediction> {
    let (phi, _) = forward(tree, batch)?;
    match tree.task {
        Task::Classification => {
            let labels = (0..phi.rows())
                .map(|i| {
                    let row = phi.row(i);
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            Ok(Prediction::Labels(labels))
        }
        Task::Regression => Ok(Prediction::Values(phi)),
    }
}

/// sigma(f_n(x)) for one node on one sample, together with its gradient with
/// respect to the input. Used by feature visualization.
pub fn node_activation_with_input_grad(
    tree: &Tree,
    node_id: NodeId,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if x.len() != tree.flat_dim() {
        return Err(Error::Shape(format!(
            "input length {} vs tree input dim {}",
            x.len(),
            tree.flat_dim()
        )));
    }
    let node = tree
        .inner(node_id)
        .ok_or_else(|| Error::Config(format!("unknown inner node {node_id}")))?;
    match &node.params {
        NodeParams::Hyperplane { weights, bias } => {
            let s = hyperplane_score(weights, *bias, x);
            let sig = sigmoid_scalar(s);
            let scale = sig * (1.0 - sig);
            Ok((sig, weights.iter().map(|&w| scale * w).collect()))
        }
        params @ NodeParams::Conv { .. } => {
            let image = Tensor::new(tree.spec.input_shape.clone(), x.to_vec())?;
            let (s, cache) = conv_node_forward(params, &tree.spec, &image)?;
            let sig = sigmoid_scalar(s);
            let grads = conv_node_backward(params, &tree.spec, &image, &cache, sig * (1.0 - sig), true)?;
            Ok((sig, grads.input.expect("requested input grad").data().to_vec()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    fn rand_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn hyperplane_tree(depth: usize, d: usize, k: usize, seed: u64) -> Tree {
        Tree::build_full(
            depth,
            NodeSpec::hyperplane(vec![d]),
            k,
            Task::Classification,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn full_tree_counts() {
        let t = hyperplane_tree(4, 5, 3, 0);
        assert_eq!(t.num_inner(), 15);
        assert_eq!(t.num_leaves(), 16);
        let t = hyperplane_tree(10, 2, 2, 0);
        assert_eq!(t.num_leaves(), 1024);
        assert_eq!(t.num_inner(), 1023);
    }

    #[test]
    fn build_is_deterministic() {
        let a = hyperplane_tree(3, 7, 4, 42);
        let b = hyperplane_tree(3, 7, 4, 42);
        for id in a.inner_ids().collect::<Vec<_>>() {
            assert_eq!(a.inner(id).unwrap().params, b.inner(id).unwrap().params);
        }
        for id in a.leaf_ids().collect::<Vec<_>>() {
            assert_eq!(a.leaf(id).unwrap().weights, b.leaf(id).unwrap().weights);
        }
    }

    #[test]
    fn conv_spec_needs_spatial_input() {
        let spec = NodeSpec::convolutional(vec![10], ConvSpec::same(3));
        assert!(matches!(
            Tree::build_full(2, spec, 2, Task::Classification, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hyperplane_constant_bias_scores() {
        let mut t = hyperplane_tree(1, 4, 2, 0);
        let root = t.root();
        if let NodeParams::Hyperplane { weights, bias } = &mut t.inner_mut(root).unwrap().params {
            weights.iter_mut().for_each(|w| *w = 0.0);
            *bias = 2.5;
        }
        let batch = Matrix::new(3, 4, vec![0.0; 12]).unwrap();
        let scores = node_scores(&t, &batch).unwrap();
        assert!(scores.scores.data().iter().all(|&s| s == 2.5));
    }

    #[test]
    fn conv_zero_params_zero_score() {
        let spec = NodeSpec::convolutional(vec![1, 8, 8], ConvSpec::same(3));
        let mut t = Tree::build_full(1, spec, 2, Task::Classification, 0).unwrap();
        let root = t.root();
        if let NodeParams::Conv {
            kernel,
            conv_bias,
            linear_weights,
            linear_bias,
        } = &mut t.inner_mut(root).unwrap().params
        {
            kernel.data_mut().iter_mut().for_each(|v| *v = 0.0);
            conv_bias.iter_mut().for_each(|v| *v = 0.0);
            linear_weights
                .as_mut()
                .unwrap()
                .iter_mut()
                .for_each(|v| *v = 0.0);
            *linear_bias = 0.0;
        }
        let mut rng = StdRng::seed_from_u64(1);
        let batch = rand_matrix(&mut rng, 2, 64);
        let scores = node_scores(&t, &batch).unwrap();
        assert!(scores.scores.data().iter().all(|&s| s == 0.0));
    }

    /// Straight-line re-implementation of the conv node pipeline with naive
    /// loops, independent of the numerics module.
    fn conv_score_oracle(params: &NodeParams, spec: &NodeSpec, x: &[f64]) -> f64 {
        let NodeParams::Conv {
            kernel,
            conv_bias,
            linear_weights,
            linear_bias,
        } = params
        else {
            panic!("conv params expected")
        };
        let conv = spec.conv.as_ref().unwrap();
        let (depth, h, w) = (
            spec.input_shape[0],
            spec.input_shape[1],
            spec.input_shape[2],
        );
        let (kh, kw, s, p) = (conv.kernel_h, conv.kernel_w, conv.stride, conv.padding);
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut padded = vec![0.0; depth * ph * pw];
        for d in 0..depth {
            for r in 0..h {
                for c in 0..w {
                    padded[d * ph * pw + (r + p) * pw + (c + p)] = x[d * h * w + r * w + c];
                }
            }
        }
        let out_h = (ph - kh) / s + 1;
        let out_w = (pw - kw) / s + 1;
        let bsum: f64 = conv_bias.iter().sum();
        let mut z = vec![0.0; out_h * out_w];
        for r in 0..out_h {
            for c in 0..out_w {
                let mut acc = bsum;
                for d in 0..depth {
                    for i in 0..kh {
                        for j in 0..kw {
                            acc += kernel.data()[d * kh * kw + i * kw + j]
                                * padded[d * ph * pw + (r * s + kh - 1 - i) * pw + (c * s + kw - 1 - j)];
                        }
                    }
                }
                z[r * out_w + c] = acc;
            }
        }
        let o: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        let (qh, qw) = (out_h / 2, out_w / 2);
        let mut pooled = vec![0.0; qh * qw];
        for r in 0..qh {
            for c in 0..qw {
                let mut best = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        best = best.max(o[(2 * r + di) * out_w + 2 * c + dj]);
                    }
                }
                pooled[r * qw + c] = best;
            }
        }
        match linear_weights {
            Some(lw) => {
                let mut acc = *linear_bias;
                for (a, b) in lw.iter().zip(&pooled) {
                    acc += a * b;
                }
                acc
            }
            None => pooled.iter().sum::<f64>() + linear_bias,
        }
    }

    #[test]
    fn conv_tree_scores_match_straight_line_oracle() {
        let spec = NodeSpec::convolutional(vec![1, 8, 8], ConvSpec::same(3));
        let t = Tree::build_full(2, spec, 2, Task::Classification, 9).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let batch = rand_matrix(&mut rng, 3, 64);
        let scores = node_scores(&t, &batch).unwrap();
        for (col, &id) in scores.node_ids.iter().enumerate() {
            let node = t.inner(id).unwrap();
            for i in 0..batch.rows() {
                let expect = conv_score_oracle(&node.params, t.spec(), batch.row(i));
                assert!((scores.scores.row(i)[col] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth1_zero_score_splits_evenly() {
        let mut t = hyperplane_tree(1, 3, 2, 0);
        let root = t.root();
        if let NodeParams::Hyperplane { weights, bias } = &mut t.inner_mut(root).unwrap().params {
            weights.iter_mut().for_each(|w| *w = 0.0);
            *bias = 0.0;
        }
        let batch = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let lw = leaf_weights(&t, &batch).unwrap();
        assert!(lw.weights.data().iter().all(|&w| w == 0.5));
        assert_eq!(lw.col_sums, vec![1.0, 1.0]);
    }

    #[test]
    fn depth2_zero_scores_quarter_weights() {
        let mut t = hyperplane_tree(2, 3, 2, 0);
        for id in t.inner_ids().collect::<Vec<_>>() {
            if let NodeParams::Hyperplane { weights, bias } = &mut t.inner_mut(id).unwrap().params {
                weights.iter_mut().for_each(|w| *w = 0.0);
                *bias = 0.0;
            }
        }
        let batch = Matrix::new(1, 3, vec![0.5, -0.25, 2.0]).unwrap();
        let lw = leaf_weights(&t, &batch).unwrap();
        assert!(lw.weights.data().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn leaf_weights_match_path_product_oracle() {
        let t = hyperplane_tree(3, 6, 2, 17);
        let mut rng = StdRng::seed_from_u64(4);
        let batch = rand_matrix(&mut rng, 5, 6);
        let scores = node_scores(&t, &batch).unwrap();
        let lw = leaf_weights(&t, &batch).unwrap();

        // Path-product oracle: for every leaf, walk the path from the root
        // and multiply sigma / 1 - sigma terms explicitly.
        fn path_to(tree: &Tree, target: NodeId) -> Vec<(NodeId, bool)> {
            fn rec(
                tree: &Tree,
                id: NodeId,
                target: NodeId,
                path: &mut Vec<(NodeId, bool)>,
            ) -> bool {
                if id == target {
                    return true;
                }
                if let Some(n) = tree.inner(id) {
                    path.push((id, false));
                    if rec(tree, n.left, target, path) {
                        return true;
                    }
                    path.pop();
                    path.push((id, true));
                    if rec(tree, n.right, target, path) {
                        return true;
                    }
                    path.pop();
                }
                false
            }
            let mut path = Vec::new();
            rec(tree, tree.root(), target, &mut path);
            path
        }

        for i in 0..batch.rows() {
            let row_sum: f64 = lw.weights.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for (col, &leaf_id) in lw.leaf_ids.iter().enumerate() {
                let mut expect = 1.0;
                for (nid, went_right) in path_to(&t, leaf_id) {
                    let ncol = scores.node_ids.iter().position(|&x| x == nid).unwrap();
                    let sig = sigmoid_scalar(scores.scores.row(i)[ncol]);
                    expect *= if went_right { sig } else { 1.0 - sig };
                }
                assert!((lw.weights.row(i)[col] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_leaves_collapse_to_linear_model() {
        let mut t = hyperplane_tree(3, 4, 2, 5);
        let proto = t.leaf(t.leaf_order()[0]).unwrap().clone();
        for id in t.leaf_ids().collect::<Vec<_>>() {
            let leaf = t.leaf_mut(id).unwrap();
            leaf.weights = proto.weights.clone();
            leaf.bias = proto.bias.clone();
        }
        let mut rng = StdRng::seed_from_u64(8);
        let batch = rand_matrix(&mut rng, 4, 4);
        let (phi, _) = forward(&t, &batch).unwrap();
        for i in 0..batch.rows() {
            let mut expect = vec![0.0; 2];
            proto.eval_into(batch.row(i), &mut expect);
            for c in 0..2 {
                assert!((phi.row(i)[c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_leaf_tree_is_its_leaf() {
        let t = Tree::single_leaf(NodeSpec::hyperplane(vec![3]), 2, Task::Regression, 1).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let batch = rand_matrix(&mut rng, 3, 3);
        let (phi, lw) = forward(&t, &batch).unwrap();
        assert_eq!(lw.num_leaves(), 1);
        assert!(lw.weights.data().iter().all(|&w| w == 1.0));
        let leaf = t.leaf(t.root()).unwrap();
        for i in 0..3 {
            let mut expect = vec![0.0; 2];
            leaf.eval_into(batch.row(i), &mut expect);
            assert_eq!(phi.row(i), expect.as_slice());
        }
    }

    #[test]
    fn forward_matches_weighted_sum_oracle() {
        let t = hyperplane_tree(3, 5, 3, 23);
        let mut rng = StdRng::seed_from_u64(6);
        let batch = rand_matrix(&mut rng, 5, 5);
        let (phi, lw) = forward(&t, &batch).unwrap();
        for i in 0..batch.rows() {
            let mut expect = vec![0.0; 3];
            for (col, &leaf_id) in lw.leaf_ids.iter().enumerate() {
                let leaf = t.leaf(leaf_id).unwrap();
                let mut g = vec![0.0; 3];
                leaf.eval_into(batch.row(i), &mut g);
                for c in 0..3 {
                    expect[c] += lw.weights.row(i)[col] * g[c];
                }
            }
            for c in 0..3 {
                assert!((phi.row(i)[c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_argmax_and_batch_invariance() {
        let t = hyperplane_tree(2, 4, 3, 31);
        let mut rng = StdRng::seed_from_u64(12);
        let batch = rand_matrix(&mut rng, 6, 4);
        let Prediction::Labels(all) = predict(&t, &batch).unwrap() else {
            panic!("classification tree")
        };
        for i in 0..6 {
            let single = Matrix::new(1, 4, batch.row(i).to_vec()).unwrap();
            let Prediction::Labels(one) = predict(&t, &single).unwrap() else {
                panic!()
            };
            assert_eq!(one[0], all[i]);
        }
    }

    #[test]
    fn insert_subtree_counts_and_identity() {
        let mut t = hyperplane_tree(1, 4, 2, 3);
        let sub = Tree::build_full(1, t.spec().clone(), 2, t.task(), 77).unwrap();
        let target = t.leaf_order()[0];
        t.insert_subtree(target, &sub).unwrap();
        assert_eq!(t.num_leaves(), 3);
        assert_eq!(t.num_inner(), 2);
        t.validate().unwrap();
    }

    #[test]
    fn duplicated_leaf_insert_preserves_forward() {
        let t0 = hyperplane_tree(3, 5, 2, 41);
        let mut rng = StdRng::seed_from_u64(14);
        let batch = rand_matrix(&mut rng, 6, 5);
        let (phi0, _) = forward(&t0, &batch).unwrap();

        let mut t = t0.clone();
        let target = t.leaf_order()[3];
        let replaced = t.leaf(target).unwrap().clone();
        let mut sub = Tree::build_full(1, t.spec().clone(), 2, t.task(), 99).unwrap();
        for id in sub.leaf_ids().collect::<Vec<_>>() {
            let leaf = sub.leaf_mut(id).unwrap();
            leaf.weights = replaced.weights.clone();
            leaf.bias = replaced.bias.clone();
        }
        t.insert_subtree(target, &sub).unwrap();
        assert_eq!(t.num_leaves(), t0.num_leaves() + 1);

        let (phi1, _) = forward(&t, &batch).unwrap();
        for (a, b) in phi0.data().iter().zip(phi1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eight_insertions_reach_24_leaves() {
        let mut t = hyperplane_tree(4, 3, 2, 51);
        for n in 0..8 {
            let sub = Tree::build_full(1, t.spec().clone(), 2, t.task(), n).unwrap();
            let target = t.leaf_order()[n as usize % t.num_leaves()];
            t.insert_subtree(target, &sub).unwrap();
        }
        assert_eq!(t.num_leaves(), 24);
        t.validate().unwrap();
    }

    #[test]
    fn forward_is_row_permutation_equivariant() {
        let t = hyperplane_tree(2, 4, 2, 61);
        let mut rng = StdRng::seed_from_u64(7);
        let batch = rand_matrix(&mut rng, 4, 4);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Matrix::zeros(4, 4);
        for (i, &p) in perm.iter().enumerate() {
            permuted.row_mut(i).copy_from_slice(batch.row(p));
        }
        let (phi, _) = forward(&t, &batch).unwrap();
        let (phi_p, _) = forward(&t, &permuted).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(phi_p.row(i), phi.row(p));
        }
    }
}
