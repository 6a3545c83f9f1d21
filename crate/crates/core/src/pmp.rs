//! Patch message passing: a directed KNN graph built in feature space,
//! per-edge messages `h(p_i, p_j − p_i)`, and elementwise-max aggregation.
//!
//! One module is `knn_graph → edge_messages → aggregate_max`. Stacked modules
//! rebuild the graph from the current features before each application
//! unless [`GraphMode::Static`] is requested. Neighbor selection is treated as
//! a constant of the tape; gradients flow only through the features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::nn::{join, mix_seed, LayerNorm, Linear, Parameterized};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.2;
pub const DEFAULT_DROPOUT: f32 = 0.1;

/// `n` patch vectors of width `f`, stored `[n×f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub features: Tensor,
}

impl PatchSet {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Dimension(format!(
                "patch set needs [n, F] features, got {:?}",
                features.shape()
            )));
        }
        Ok(PatchSet { features })
    }

    pub fn from_rows(n: usize, f: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::new(vec![n, f], data)?)
    }

    pub fn n(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn f(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let f = self.f();
        &self.features.data()[i * f..(i + 1) * f]
    }
}

/// Row `i` lists the `k` nearest patches to patch `i`, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Neighbor table flattened row-major, `n·k` entries.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.indices.chunks(self.k).map(<[usize]>::to_vec).collect()
    }
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// KNN over rows of a `[n×f]` buffer by squared Euclidean distance. Ties go
/// to the smaller index.
pub fn knn_indices<T: Scalar>(features: &[T], n: usize, f: usize, k: usize) -> Result<NeighborGraph> {
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "knn needs 1 <= k <= n-1, got n={n}, k={k}"
        )));
    }
    debug_assert_eq!(features.len(), n * f);
    let mut indices = Vec::with_capacity(n * k);
    // (distance, index) kept sorted ascending; insertion is stable on index
    // because candidates arrive in increasing index order.
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        best.clear();
        let pi = &features[i * f..(i + 1) * f];
        for j in (0..n).filter(|&j| j != i) {
            let d = sq_dist(pi, &features[j * f..(j + 1) * f]);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let at = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(at, (d, j));
            best.truncate(k);
        }
        indices.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(NeighborGraph { k, indices })
}

pub fn knn_graph(p: &PatchSet, k: usize) -> Result<NeighborGraph> {
    knn_indices(p.features.data(), p.n(), p.f(), k)
}

/// Learnable edge function `Dropout(LeakyReLU(LayerNorm(Linear(·))))`
/// mapping `2F → F`.
#[derive(Debug, Clone)]
pub struct PmpParams {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub dropout_rate: f32,
    pub leaky_slope: f32,
}

impl PmpParams {
    pub fn init<R: Rng>(f: usize, rng: &mut R) -> Self {
        PmpParams {
            linear: Linear::init(2 * f, f, rng),
            norm: LayerNorm::new(f),
            dropout_rate: DEFAULT_DROPOUT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Zero weights and bias, unit gamma, zero beta.
    pub fn zeros(f: usize) -> Self {
        PmpParams {
            linear: Linear::zeros(2 * f, f),
            norm: LayerNorm::new(f),
            dropout_rate: DEFAULT_DROPOUT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.linear.d_out()
    }
}

impl Parameterized for PmpParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.linear.collect(&join(prefix, "linear"), out);
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.linear.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

/// Whether stacked modules rebuild the neighbor graph before each module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    #[default]
    Dynamic,
    Static,
}

fn patch_dims<T: Scalar>(g: &Graph<T>, p: Var) -> Result<(usize, usize)> {
    match g.shape(p) {
        [n, f] => Ok((*n, *f)),
        s => Err(Error::Dimension(format!("patch features must be [n, F], got {s:?}"))),
    }
}

/// Messages `e_ij` for every edge of `graph`, shape `[n, k, F]`.
pub fn edge_messages<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    graph: &NeighborGraph,
    params: &PmpParams,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let (n, f) = patch_dims(g, p)?;
    if params.linear.d_in() != 2 * f || params.feature_dim() != f {
        return Err(Error::Dimension(format!(
            "edge function maps {}→{} but patches have F={f} (needs {}→{f})",
            params.linear.d_in(),
            params.feature_dim(),
            2 * f
        )));
    }
    if graph.n() != n {
        return Err(Error::Dimension(format!(
            "neighbor graph has {} rows for {n} patches",
            graph.n()
        )));
    }
    let k = graph.k();
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let xi = g.gather_rows(p, centers)?;
    let xj = g.gather_rows(p, graph.indices().to_vec())?;
    let diff = g.sub(xj, xi)?;
    let input = g.concat_cols(xi, diff)?;
    let h = params.linear.forward(g, input)?;
    let h = params.norm.forward(g, h)?;
    let h = g.leaky_relu(h, params.leaky_slope)?;
    let h = g.dropout(h, params.dropout_rate, training, seed)?;
    g.reshape(h, vec![n, k, f])
}

/// `p'_i = max_j e_ij`, elementwise; `[n, k, F] → [n×F]`.
pub fn aggregate_max<T: Scalar>(g: &mut Graph<T>, messages: Var) -> Result<Var> {
    g.max_over_groups(messages)
}

/// One message-passing module on the graph built from the current features.
pub fn pmp_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    params: &PmpParams,
    k: usize,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let (n, f) = patch_dims(g, p)?;
    let graph = knn_indices(g.value(p), n, f, k)?;
    let messages = edge_messages(g, p, &graph, params, training, seed)?;
    aggregate_max(g, messages)
}

pub fn pmp_stack<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    modules: &[PmpParams],
    k: usize,
    mode: GraphMode,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let (n, f) = patch_dims(g, p)?;
    if let Some(bad) = modules.iter().find(|m| m.feature_dim() != f) {
        return Err(Error::Dimension(format!(
            "stacked module width {} differs from patch width {f}",
            bad.feature_dim()
        )));
    }
    let mut cur = p;
    let mut graph: Option<NeighborGraph> = None;
    for (m, params) in modules.iter().enumerate() {
        if graph.is_none() || mode == GraphMode::Dynamic {
            graph = Some(knn_indices(g.value(cur), n, f, k)?);
        }
        let gr = graph.as_ref().expect("graph built above");
        let messages = edge_messages(g, cur, gr, params, training, mix_seed(seed, m as u64))?;
        cur = aggregate_max(g, messages)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(f: usize, seed: u64) -> PmpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PmpParams::init(f, &mut rng);
        p.norm.gamma = Tensor::uniform(&[f], 1.0, &mut rng).param();
        p.norm.beta = Tensor::uniform(&[f], 0.5, &mut rng).param();
        p.linear.bias = Tensor::uniform(&[f], 0.5, &mut rng).param();
        p
    }

    fn random_patches(n: usize, f: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn knn_examples() {
        let p = PatchSet::from_rows(3, 1, vec![0.0, 1.0, 10.0]).unwrap();
        assert_eq!(knn_graph(&p, 1).unwrap().rows(), vec![vec![1], vec![0], vec![1]]);

        let p = PatchSet::from_rows(3, 1, vec![0.0; 3]).unwrap();
        assert_eq!(
            knn_graph(&p, 2).unwrap().rows(),
            vec![vec![1, 2], vec![0, 2], vec![0, 1]]
        );

        let p = PatchSet::from_rows(5, 2, random_patches(5, 2, 3)).unwrap();
        let g = knn_graph(&p, 4).unwrap();
        for i in 0..5 {
            let mut row = g.row(i).to_vec();
            row.sort_unstable();
            let others: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(row, others);
        }
    }

    #[test]
    fn knn_rejects_k_at_least_n() {
        let p = PatchSet::from_rows(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let err = knn_graph(&p, 3).unwrap_err().to_string();
        assert!(err.contains("n=3") && err.contains("k=3"), "{err}");
        assert!(knn_graph(&p, 0).is_err());
    }

    #[test]
    fn zero_edge_function_gives_zero_messages() {
        let mut g = Graph::new();
        let p = g.constant(vec![4, 3], random_patches(4, 3, 1)).unwrap();
        let params = PmpParams::zeros(3);
        let graph = knn_indices(g.value(p), 4, 3, 2).unwrap();
        let m = edge_messages(&mut g, p, &graph, &params, false, 0).unwrap();
        assert_eq!(g.shape(m), &[4, 2, 3]);
        assert!(g.value(m).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_similar_neighbor_has_zero_difference_activation() {
        // two identical patches; W selects only the difference half
        let f = 2;
        let mut g = Graph::new();
        let p = g.constant(vec![2, f], vec![0.3, -0.7, 0.3, -0.7]).unwrap();
        let mut w = vec![0.0f32; 2 * f * f];
        for c in 0..f {
            w[(f + c) * f + c] = 1.0;
        }
        let lin = Linear {
            weight: Tensor::new(vec![2 * f, f], w).unwrap().param(),
            bias: Tensor::zeros(&[f]).param(),
        };
        let graph = knn_indices(g.value(p), 2, f, 1).unwrap();
        let cat_rows: Vec<usize> = graph.indices().to_vec();
        let xi = g.gather_rows(p, vec![0, 1]).unwrap();
        let xj = g.gather_rows(p, cat_rows).unwrap();
        let diff = g.sub(xj, xi).unwrap();
        let input = g.concat_cols(xi, diff).unwrap();
        let pre = lin.forward(&mut g, input).unwrap();
        assert!(g.value(pre).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_messages_match_direct_composition() {
        let (n, f, k) = (3, 4, 2);
        let feats = random_patches(n, f, 11);
        let params = random_params(f, 5);
        let mut g = Graph::new();
        let p = g.constant(vec![n, f], feats.clone()).unwrap();
        let graph = knn_indices(&feats, n, f, k).unwrap();
        let m = edge_messages(&mut g, p, &graph, &params, true, 77).unwrap();

        // direct composition: build the 2F inputs by hand, then the four ops
        let mut rows = Vec::new();
        for i in 0..n {
            for &j in graph.row(i) {
                rows.extend_from_slice(&feats[i * f..(i + 1) * f]);
                rows.extend((0..f).map(|c| feats[j * f + c] - feats[i * f + c]));
            }
        }
        let mut h = Graph::new();
        let x = h.constant(vec![n * k, 2 * f], rows).unwrap();
        let w = h.input(&params.linear.weight);
        let b = h.input(&params.linear.bias);
        let y = h.linear(x, w, b).unwrap();
        let ga = h.input(&params.norm.gamma);
        let be = h.input(&params.norm.beta);
        let y = h.layer_norm(y, ga, be, 1e-5).unwrap();
        let y = h.leaky_relu(y, 0.2).unwrap();
        let y = h.dropout(y, 0.1, true, 77).unwrap();
        assert_eq!(g.value(m), h.value(y));
    }

    #[test]
    fn edge_messages_check_width() {
        let mut g = Graph::new();
        let p = g.constant(vec![3, 2], random_patches(3, 2, 1)).unwrap();
        let graph = knn_indices(g.value(p), 3, 2, 1).unwrap();
        let params = PmpParams::zeros(3);
        assert!(matches!(
            edge_messages(&mut g, p, &graph, &params, false, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let mut g = Graph::new();
        let m = g.constant(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = aggregate_max(&mut g, m).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let m = g.constant(vec![1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let out = aggregate_max(&mut g, m).unwrap();
        assert_eq!(g.value(out), &[3.0, 4.0]);

        let m = g.constant(vec![2, 3, 2], vec![0.5; 12]).unwrap();
        let out = aggregate_max(&mut g, m).unwrap();
        assert_eq!(g.shape(out), &[2, 2]);
        assert!(g.value(out).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_params_on_two_patches_give_zero_output() {
        let mut g = Graph::new();
        let p = g.constant(vec![2, 3], random_patches(2, 3, 4)).unwrap();
        let out = pmp_forward(&mut g, p, &PmpParams::zeros(3), 1, false, 0).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_equals_manual_pipeline() {
        let (n, f, k) = (6, 3, 2);
        let feats = random_patches(n, f, 21);
        let params = random_params(f, 8);
        let mut g = Graph::new();
        let p = g.constant(vec![n, f], feats.clone()).unwrap();
        let out = pmp_forward(&mut g, p, &params, k, true, 3).unwrap();

        let mut h = Graph::new();
        let q = h.constant(vec![n, f], feats.clone()).unwrap();
        let graph = knn_graph(&PatchSet::from_rows(n, f, feats).unwrap(), k).unwrap();
        let m = edge_messages(&mut h, q, &graph, &params, true, 3).unwrap();
        let agg = aggregate_max(&mut h, m).unwrap();
        assert_eq!(g.value(out), h.value(agg));
    }

    #[test]
    fn stack_of_one_equals_forward() {
        let (n, f) = (5, 4);
        let feats = random_patches(n, f, 2);
        let params = random_params(f, 2);
        let mut g = Graph::new();
        let p = g.constant(vec![n, f], feats).unwrap();
        let a = pmp_forward(&mut g, p, &params, 2, true, mix_seed(9, 0)).unwrap();
        let b = pmp_stack(&mut g, p, std::slice::from_ref(&params), 2, GraphMode::Dynamic, true, 9)
            .unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn stack_of_two_rebuilds_graph_between_modules() {
        let (n, f, k) = (8, 3, 3);
        let feats = random_patches(n, f, 30);
        let mods = vec![random_params(f, 1), random_params(f, 2)];
        let mut g = Graph::new();
        let p = g.constant(vec![n, f], feats.clone()).unwrap();
        let out = pmp_stack(&mut g, p, &mods, k, GraphMode::Dynamic, false, 4).unwrap();

        let mut h = Graph::new();
        let x0 = h.constant(vec![n, f], feats).unwrap();
        let g0 = knn_indices(h.value(x0), n, f, k).unwrap();
        let m0 = edge_messages(&mut h, x0, &g0, &mods[0], false, 0).unwrap();
        let x1 = aggregate_max(&mut h, m0).unwrap();
        let g1 = knn_indices(h.value(x1), n, f, k).unwrap();
        let m1 = edge_messages(&mut h, x1, &g1, &mods[1], false, 0).unwrap();
        let x2 = aggregate_max(&mut h, m1).unwrap();
        assert_eq!(g.value(out), h.value(x2));
    }

    #[test]
    fn static_mode_reuses_first_graph() {
        let (n, f, k) = (8, 3, 3);
        let feats = random_patches(n, f, 31);
        let mods = vec![random_params(f, 1), random_params(f, 2)];
        let mut g = Graph::new();
        let p = g.constant(vec![n, f], feats.clone()).unwrap();
        let out = pmp_stack(&mut g, p, &mods, k, GraphMode::Static, false, 4).unwrap();

        let mut h = Graph::new();
        let x0 = h.constant(vec![n, f], feats).unwrap();
        let g0 = knn_indices(h.value(x0), n, f, k).unwrap();
        let m0 = edge_messages(&mut h, x0, &g0, &mods[0], false, 0).unwrap();
        let x1 = aggregate_max(&mut h, m0).unwrap();
        let m1 = edge_messages(&mut h, x1, &g0, &mods[1], false, 0).unwrap();
        let x2 = aggregate_max(&mut h, m1).unwrap();
        assert_eq!(g.value(out), h.value(x2));
    }

    #[test]
    fn perturbing_a_non_neighbor_leaves_output_unchanged() {
        let (n, f, k) = (7, 2, 2);
        let feats = random_patches(n, f, 12);
        let params = random_params(f, 3);
        let graph = knn_indices(&feats, n, f, k).unwrap();
        let run = |x: &[f32]| {
            let mut g = Graph::new();
            let p = g.constant(vec![n, f], x.to_vec()).unwrap();
            let m = edge_messages(&mut g, p, &graph, &params, false, 0).unwrap();
            let out = aggregate_max(&mut g, m).unwrap();
            g.value(out).to_vec()
        };
        let base = run(&feats);
        for j in 0..n {
            let mut moved = feats.clone();
            moved[j * f] += 0.25;
            let out = run(&moved);
            for i in 0..n {
                let changed = out[i * f..(i + 1) * f] != base[i * f..(i + 1) * f];
                if changed {
                    assert!(i == j || graph.row(i).contains(&j), "patch {j} leaked into {i}");
                }
            }
        }
    }
}
