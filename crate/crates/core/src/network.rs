//! Learnable pipeline components: 2D point encoder, per-category linear
//! operator, deformation module and the graph matching network.
//!
//! All parameters live in a flat [`ParamStore`]; the model structs hold ids
//! plus layer shapes, so a model can be rebuilt deterministically from its
//! configuration and category list (checkpoint loading relies on this).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor};
use crate::graphgen::{AssignmentGraph, Graph2D, GraphError, UniverseGraph3D};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("unknown category index {got} (model has {count})")]
    UnknownCategory { got: usize, count: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Architecture sizes; everything the paper leaves open is set here.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Per-point encoder widths, input first (input must be 2).
    pub encoder_widths: Vec<usize>,
    /// Per-universe-point MLP widths of the deformation module (input 3).
    pub deform_widths: Vec<usize>,
    /// Hidden width of the offset head (input is deform + global feature,
    /// output is fixed to 3).
    pub offset_hidden: usize,
    /// Edge/node latent width of the graph matching network.
    pub gnn_latent: usize,
    /// Hidden width of the per-round edge/node MLPs.
    pub gnn_hidden: usize,
    /// Message passing rounds.
    pub gnn_rounds: usize,
    /// Hidden width of the scoring head.
    pub score_hidden: usize,
    /// Prior probability of a positive assignment node; the scoring bias
    /// starts at its logit so early sums match the one-to-one structure.
    pub score_prior: f64,
    /// Build universe edges from the static points instead of the deformed
    /// points (attributes always use the deformed coordinates).
    pub freeze_universe_topology: bool,
    /// Condition cap for the pseudo-inverse path.
    pub cond_cap: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![2, 64, 128],
            deform_widths: vec![3, 64, 128],
            offset_hidden: 128,
            gnn_latent: 32,
            gnn_hidden: 64,
            gnn_rounds: 3,
            score_hidden: 32,
            score_prior: 0.1,
            freeze_universe_topology: false,
            cond_cap: crate::geometry::DEFAULT_COND_CAP,
        }
    }
}

impl NetworkConfig {
    pub fn global_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let fail = |msg: String| Err(NetworkError::InvalidConfig(msg));
        if self.encoder_widths.len() < 2 || self.encoder_widths[0] != 2 {
            return fail(format!(
                "encoder widths must start at 2 with at least one layer, got {:?}",
                self.encoder_widths
            ));
        }
        if self.deform_widths.len() < 2 || self.deform_widths[0] != 3 {
            return fail(format!(
                "deform widths must start at 3 with at least one layer, got {:?}",
                self.deform_widths
            ));
        }
        if self
            .encoder_widths
            .iter()
            .chain(&self.deform_widths)
            .any(|&w| w == 0)
        {
            return fail("zero layer width".into());
        }
        if self.offset_hidden == 0
            || self.gnn_latent == 0
            || self.gnn_hidden == 0
            || self.score_hidden == 0
        {
            return fail("zero layer width".into());
        }
        if self.gnn_rounds == 0 {
            return fail("round count must be at least 1".into());
        }
        if !(self.score_prior > 0.0 && self.score_prior < 1.0) {
            return fail(format!(
                "score prior must be in (0, 1), got {}",
                self.score_prior
            ));
        }
        if self.cond_cap <= 1.0 {
            return fail("condition cap must exceed 1".into());
        }
        Ok(())
    }
}

/// One dense layer `W x + b` (bias broadcast over columns).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum InitKind {
    /// He-uniform, for layers followed by relu.
    He,
    /// Xavier-uniform, for linear output layers.
    Xavier,
    /// All-zero weights and bias (identity-preserving heads).
    Zero,
}

impl Linear {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kind: InitKind,
    ) -> Self {
        let w_data: Vec<f64> = match kind {
            InitKind::Zero => vec![0.0; out_dim * in_dim],
            InitKind::He | InitKind::Xavier => {
                let bound = match kind {
                    InitKind::He => (6.0 / in_dim as f64).sqrt(),
                    _ => (6.0 / (in_dim + out_dim) as f64).sqrt(),
                };
                (0..out_dim * in_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect()
            }
        };
        let w = store.add(
            format!("{name}.w"),
            Tensor::from_vec(out_dim, in_dim, w_data).expect("finite init"),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(out_dim, 1));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<Tensor, NetworkError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let wx = tape.matmul(&w, x)?;
        let bias = tape.tile_cols(&b, x.cols())?;
        Ok(tape.add(&wx, &bias)?)
    }
}

/// Dense layers with relu between them; `relu_output` adds one after the
/// final layer as well.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_output: bool,
}

impl Mlp {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
        relu_output: bool,
        zero_last: bool,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let last = i + 2 == widths.len();
                let kind = if zero_last && last {
                    InitKind::Zero
                } else if last && !relu_output {
                    InitKind::Xavier
                } else {
                    InitKind::He
                };
                Linear::init(store, rng, &format!("{name}.{i}"), w[0], w[1], kind)
            })
            .collect();
        Self {
            layers,
            relu_output,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<Tensor, NetworkError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, &h)?;
            if i < last || self.relu_output {
                h = tape.relu(&h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct PointEncoderParams {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct DeformationParams {
    pub point_mlp: Mlp,
    pub offset_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct RoundParams {
    pub edge: Mlp,
    pub node: Mlp,
}

#[derive(Debug, Clone)]
pub struct GraphNetParams {
    pub rounds: Vec<RoundParams>,
    pub score: Mlp,
}

/// One category: its learnable 3D points and its global-feature operator.
#[derive(Debug, Clone)]
pub struct CategoryParams {
    pub name: String,
    pub d: usize,
    /// Universe points as a `3 x d` parameter (points are columns).
    pub universe: ParamId,
    /// Learnable `global_dim x global_dim` operator.
    pub operator: ParamId,
}

/// All learnable state: per-category universe points plus network weights.
#[derive(Debug, Clone)]
pub struct UniverseModel {
    pub config: NetworkConfig,
    pub categories: Vec<CategoryParams>,
    pub encoder: PointEncoderParams,
    pub deform: DeformationParams,
    pub gnn: GraphNetParams,
}

impl UniverseModel {
    /// Registers all parameters in a fixed order (categories, encoder,
    /// operators, deformation, matcher). The order is what makes
    /// checkpoints reloadable against a freshly built model.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: NetworkConfig,
        categories: &[(String, usize)],
    ) -> Result<Self, NetworkError> {
        config.validate()?;
        let g = config.global_dim();

        let mut cat_params = Vec::with_capacity(categories.len());
        for (name, d) in categories {
            if *d < 4 {
                return Err(NetworkError::InvalidConfig(format!(
                    "category {name} has d={d}, need at least 4 universe points"
                )));
            }
            let data: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let universe = store.add(
                format!("universe.{name}"),
                Tensor::from_vec(3, *d, data).expect("finite init"),
            );
            cat_params.push((name.clone(), *d, universe));
        }

        let encoder = PointEncoderParams {
            mlp: Mlp::init(store, rng, "encoder", &config.encoder_widths, true, false),
        };

        let mut operators = Vec::with_capacity(categories.len());
        for (name, _) in categories {
            // Identity plus small noise: starts as a no-op and learns
            // category separation.
            let mut data = vec![0.0; g * g];
            for i in 0..g {
                data[i * g + i] = 1.0;
            }
            for v in &mut data {
                *v += 0.01 * normal_sample(rng);
            }
            operators.push(store.add(
                format!("operator.{name}"),
                Tensor::from_vec(g, g, data).expect("finite init"),
            ));
        }

        let deform_in = config.deform_widths.last().copied().expect("validated") + g;
        let deform = DeformationParams {
            point_mlp: Mlp::init(store, rng, "deform.points", &config.deform_widths, true, false),
            // Zero-initialized output layer: offsets start at exactly zero
            // so the warm start trains against undeformed projections.
            offset_head: Mlp::init(
                store,
                rng,
                "deform.head",
                &[deform_in, config.offset_hidden, 3],
                false,
                true,
            ),
        };

        let (latent, hidden) = (config.gnn_latent, config.gnn_hidden);
        let mut rounds = Vec::with_capacity(config.gnn_rounds);
        for r in 0..config.gnn_rounds {
            let (edge_in, node_in) = if r == 0 {
                (10 + 2 * 5, 5 + latent)
            } else {
                (3 * latent, 2 * latent)
            };
            rounds.push(RoundParams {
                edge: Mlp::init(
                    store,
                    rng,
                    &format!("gnn.round{r}.edge"),
                    &[edge_in, hidden, latent],
                    false,
                    false,
                ),
                node: Mlp::init(
                    store,
                    rng,
                    &format!("gnn.round{r}.node"),
                    &[node_in, hidden, latent],
                    false,
                    false,
                ),
            });
        }
        let gnn = GraphNetParams {
            rounds,
            score: Mlp::init(
                store,
                rng,
                "gnn.score",
                &[latent, config.score_hidden, 1],
                false,
                false,
            ),
        };
        // Start the scores at the assignment prior.
        let prior_logit = (config.score_prior / (1.0 - config.score_prior)).ln();
        let score_bias = gnn.score.layers.last().expect("scoring head").b;
        store.get_mut(score_bias).set_values(&[prior_logit]);

        let categories = cat_params
            .into_iter()
            .zip(operators)
            .map(|((name, d, universe), operator)| CategoryParams {
                name,
                d,
                universe,
                operator,
            })
            .collect();

        Ok(Self {
            config,
            categories,
            encoder,
            deform,
            gnn,
        })
    }

    pub fn category(&self, index: usize) -> Result<&CategoryParams, NetworkError> {
        self.categories.get(index).ok_or(NetworkError::UnknownCategory {
            got: index,
            count: self.categories.len(),
        })
    }

    pub fn category_by_name(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }
}

/// Box-Muller standard normal draw (two uniforms per sample).
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Constant `2 x m` tensor of keypoint columns.
pub fn points2d_tensor(points: &[[f64; 2]]) -> Tensor {
    let m = points.len();
    let mut data = vec![0.0; 2 * m];
    for (i, p) in points.iter().enumerate() {
        data[i] = p[0];
        data[m + i] = p[1];
    }
    Tensor::from_vec(2, m, data).expect("finite points")
}

/// Per-point transform, max pool over points, then the category operator:
/// a permutation- and duplication-invariant global feature.
pub fn encode_points(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    category: usize,
    points: &Tensor,
) -> Result<Tensor, NetworkError> {
    let cat = model.category(category)?;
    let per_point = model.encoder.mlp.forward(tape, store, points)?;
    let pooled = tape.max_pool_cols(&per_point)?;
    let op = tape.param(store, cat.operator);
    Ok(tape.matmul(&op, &pooled)?)
}

/// Per-point offsets from the universe points and the instance's global
/// feature. Returns `(offsets, deformed, universe)`, all `3 x d`.
pub fn deform_universe(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    category: usize,
    global: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NetworkError> {
    let cat = model.category(category)?;
    let universe = tape.param(store, cat.universe);
    let features = model.deform.point_mlp.forward(tape, store, &universe)?;
    let tiled = tape.tile_cols(global, cat.d)?;
    let stacked = tape.concat(&features, &tiled, Axis::Rows)?;
    let offsets = model.deform.offset_head.forward(tape, store, &stacked)?;
    let deformed = tape.add(&universe, &offsets)?;
    Ok((offsets, deformed, universe))
}

/// Matching network output: per-assignment-node probabilities reshaped to
/// the soft matching matrix.
pub struct MatcherOutput {
    /// Soft matching, `m x d`, entries in (0, 1).
    pub x_soft: Tensor,
}

/// Runs the configured number of edge/node update rounds on the assignment
/// graph and scores every assignment node.
///
/// Gradients flow through the 3D attribute slots of nodes and edges into
/// `deformed`; the 2D attributes are constants. Aggregation is the mean
/// over incident edges; isolated nodes aggregate a zero vector.
pub fn graph_match_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    g2: &Graph2D,
    g3: &UniverseGraph3D,
    ag: &AssignmentGraph,
    deformed: &Tensor,
) -> Result<MatcherOutput, NetworkError> {
    let (m, d) = (ag.m(), ag.d());
    let nn = ag.node_count();
    let ne = ag.edges().len();

    // Node attributes: 2D coordinates (constant) over 3D deformed
    // coordinates (differentiable), per assignment node.
    let mut flat2 = vec![0.0; 2 * nn];
    let mut gather3 = vec![0usize; nn];
    for node in 0..nn {
        let (i, k) = ag.node_pair(node);
        flat2[node] = g2.coords()[i][0];
        flat2[nn + node] = g2.coords()[i][1];
        gather3[node] = k;
    }
    let const2 = tape.constant(&Tensor::from_vec(2, nn, flat2).expect("finite coords"));
    let node3 = tape.gather_cols(deformed, &gather3)?;
    let node_attrs = tape.concat(&const2, &node3, Axis::Rows)?;

    // Edge attributes: 2D edge attribute (constant) over the two 3D
    // endpoint coordinates in canonical (lower, higher) order.
    let mut flat2e = vec![0.0; 4 * ne];
    let mut lo3 = vec![0usize; ne];
    let mut hi3 = vec![0usize; ne];
    let mut ends = Vec::with_capacity(ne);
    for (e, ae) in ag.edges().iter().enumerate() {
        let attr2 = g2.edge_attr(ae.edge_2d);
        for (row, v) in attr2.iter().enumerate() {
            flat2e[row * ne + e] = *v;
        }
        let (k_lo, k_hi) = g3.edges()[ae.edge_3d];
        lo3[e] = k_lo;
        hi3[e] = k_hi;
        ends.push((ae.node_a, ae.node_b));
    }
    let const2e = tape.constant(&Tensor::from_vec(4, ne, flat2e).expect("finite coords"));
    let elo = tape.gather_cols(deformed, &lo3)?;
    let ehi = tape.gather_cols(deformed, &hi3)?;
    let e3 = tape.concat(&elo, &ehi, Axis::Rows)?;
    let edge_attrs = tape.concat(&const2e, &e3, Axis::Rows)?;

    let a_idx: Vec<usize> = ag.edges().iter().map(|e| e.node_a).collect();
    let b_idx: Vec<usize> = ag.edges().iter().map(|e| e.node_b).collect();

    let mut node_lat = node_attrs;
    let mut edge_lat = edge_attrs;
    for round in &model.gnn.rounds {
        let ha = tape.gather_cols(&node_lat, &a_idx)?;
        let hb = tape.gather_cols(&node_lat, &b_idx)?;
        let pair = tape.concat(&ha, &hb, Axis::Rows)?;
        let edge_in = tape.concat(&edge_lat, &pair, Axis::Rows)?;
        edge_lat = round.edge.forward(tape, store, &edge_in)?;

        let agg = tape.mean_aggregate(&edge_lat, &ends, nn)?;
        let node_in = tape.concat(&node_lat, &agg, Axis::Rows)?;
        node_lat = round.node.forward(tape, store, &node_in)?;
    }

    let scores = model.gnn.score.forward(tape, store, &node_lat)?;
    let probs = tape.sigmoid(&scores)?;
    // Node (i, k) sits at i*d + k, which is exactly row-major (m, d).
    let x_soft = tape.reshape(&probs, m, d)?;
    Ok(MatcherOutput { x_soft })
}

/// Everything one instance forward pass produces.
pub struct InstanceForward {
    /// `3 x d` universe parameter as recorded on the tape.
    pub universe: Tensor,
    /// Per-point offsets, `None` when the deformation module is disabled.
    pub offsets: Option<Tensor>,
    /// Deformed points `universe + offsets` (`universe` when disabled).
    pub deformed: Tensor,
    /// Soft matching, `m x d`.
    pub x_soft: Tensor,
}

/// Full forward pass for one instance: encode, deform, build graphs, match.
pub fn forward_instance(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    category: usize,
    keypoints: &[[f64; 2]],
    disable_deform: bool,
) -> Result<InstanceForward, NetworkError> {
    let cat = model.category(category)?;
    let points = tape.constant(&points2d_tensor(keypoints));

    let (offsets, deformed, universe) = if disable_deform {
        let universe = tape.param(store, cat.universe);
        (None, universe.clone(), universe)
    } else {
        let global = encode_points(tape, store, model, category, &points)?;
        let (offsets, deformed, universe) =
            deform_universe(tape, store, model, category, &global)?;
        (Some(offsets), deformed, universe)
    };

    let g2 = Graph2D::from_points(keypoints.to_vec())?;
    let topology_source = if model.config.freeze_universe_topology {
        &universe
    } else {
        &deformed
    };
    let coords3: Vec<[f64; 3]> = (0..cat.d)
        .map(|k| {
            [
                deformed.get(0, k),
                deformed.get(1, k),
                deformed.get(2, k),
            ]
        })
        .collect();
    let edges3 = crate::graphgen::edges_3d(
        &(0..cat.d)
            .map(|k| {
                [
                    topology_source.get(0, k),
                    topology_source.get(1, k),
                    topology_source.get(2, k),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    let g3 = UniverseGraph3D::with_topology(coords3, edges3)?;
    let ag = AssignmentGraph::build(&g2, &g3)?;
    let matcher = graph_match_forward(tape, store, model, &g2, &g3, &ag, &deformed)?;

    Ok(InstanceForward {
        universe,
        offsets,
        deformed,
        x_soft: matcher.x_soft,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            encoder_widths: vec![2, 8, 16],
            deform_widths: vec![3, 8, 16],
            offset_hidden: 16,
            gnn_latent: 8,
            gnn_hidden: 16,
            gnn_rounds: 2,
            score_hidden: 8,
        score_prior: 0.1,
            freeze_universe_topology: false,
            cond_cap: 1e8,
        }
    }

    fn build_model() -> (ParamStore, UniverseModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = UniverseModel::init(
            &mut store,
            &mut rng,
            small_config(),
            &[("cat0".into(), 6)],
        )
        .unwrap();
        (store, model)
    }

    #[test]
    fn encoder_is_permutation_and_duplication_invariant() {
        let (store, model) = build_model();
        let base = vec![[0.1, -0.4], [0.8, 0.2], [-0.5, 0.6], [0.0, 0.0]];
        let permuted = vec![[0.0, 0.0], [0.8, 0.2], [0.1, -0.4], [-0.5, 0.6]];
        let duplicated = vec![
            [0.1, -0.4],
            [0.8, 0.2],
            [-0.5, 0.6],
            [0.0, 0.0],
            [0.8, 0.2],
        ];

        let run = |pts: &[[f64; 2]]| {
            let mut tape = Tape::new();
            let t = tape.constant(&points2d_tensor(pts));
            encode_points(&mut tape, &store, &model, 0, &t)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&base), run(&permuted));
        assert_eq!(run(&base), run(&duplicated));
    }

    #[test]
    fn zeroed_encoder_gives_zero_feature() {
        let (mut store, model) = build_model();
        for layer in &model.encoder.mlp.layers {
            let n = store.get(layer.w).tensor().data().len();
            store.get_mut(layer.w).set_values(&vec![0.0; n]);
        }
        let mut tape = Tape::new();
        let pts = tape.constant(&points2d_tensor(&[[0.3, -0.7], [0.9, 0.1]]));
        let out = encode_points(&mut tape, &store, &model, 0, &pts).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_category_is_rejected() {
        let (store, model) = build_model();
        let mut tape = Tape::new();
        let pts = tape.constant(&points2d_tensor(&[[0.0, 0.0]]));
        assert!(matches!(
            encode_points(&mut tape, &store, &model, 3, &pts),
            Err(NetworkError::UnknownCategory { got: 3, count: 1 })
        ));
    }

    #[test]
    fn zeroed_offset_head_leaves_universe_undeformed() {
        let (mut store, model) = build_model();
        for layer in &model.deform.offset_head.layers {
            let nw = store.get(layer.w).tensor().data().len();
            store.get_mut(layer.w).set_values(&vec![0.0; nw]);
            let nb = store.get(layer.b).tensor().data().len();
            store.get_mut(layer.b).set_values(&vec![0.0; nb]);
        }
        let mut tape = Tape::new();
        let pts = tape.constant(&points2d_tensor(&[[0.2, 0.4], [-0.3, 0.1], [0.5, -0.5], [0.0, 0.2]]));
        let global = encode_points(&mut tape, &store, &model, 0, &pts).unwrap();
        let (offsets, deformed, universe) =
            deform_universe(&mut tape, &store, &model, 0, &global).unwrap();
        assert!(offsets.data().iter().all(|&v| v == 0.0));
        assert_eq!(deformed.data(), universe.data());
    }

    #[test]
    fn default_init_starts_with_zero_offsets() {
        // Only the head's output layer is zero-initialized; that is enough
        // for S = 0 while keeping gradients alive in the hidden layer.
        let (store, model) = build_model();
        let mut tape = Tape::new();
        let pts = tape.constant(&points2d_tensor(&[[0.2, 0.4], [-0.3, 0.1], [0.1, 0.9], [0.6, -0.2]]));
        let global = encode_points(&mut tape, &store, &model, 0, &pts).unwrap();
        let (offsets, ..) = deform_universe(&mut tape, &store, &model, 0, &global).unwrap();
        assert!(offsets.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_instances_get_identical_offsets() {
        let (store, model) = build_model();
        let pts = [[0.4, -0.1], [-0.6, 0.3], [0.2, 0.8], [0.0, -0.9]];
        let run = || {
            let mut tape = Tape::new();
            let t = tape.constant(&points2d_tensor(&pts));
            let global = encode_points(&mut tape, &store, &model, 0, &t).unwrap();
            let (offsets, ..) = deform_universe(&mut tape, &store, &model, 0, &global).unwrap();
            offsets.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_produces_probabilities_with_index_map_shape() {
        let (store, model) = build_model();
        let keypoints = vec![[0.4, -0.1], [-0.6, 0.3], [0.2, 0.8], [0.0, -0.9], [0.7, 0.6]];
        let mut tape = Tape::new();
        let fwd = forward_instance(&mut tape, &store, &model, 0, &keypoints, false).unwrap();
        assert_eq!(fwd.x_soft.shape(), (5, 6));
        assert!(fwd
            .x_soft
            .data()
            .iter()
            .all(|&p| p.is_finite() && p > 0.0 && p < 1.0));
    }

    #[test]
    fn identical_isolated_nodes_score_identically() {
        // With no 2D edges the product graph has no edges; assignment nodes
        // whose attributes coincide must score exactly the same.
        let (store, model) = build_model();
        let mut tape = Tape::new();
        let g2 = Graph2D::new(vec![[0.3, -0.2], [0.3, -0.2], [0.9, 0.8]], vec![]).unwrap();
        let universe = tape.param(&store, model.categories[0].universe);
        let coords3: Vec<[f64; 3]> = (0..6)
            .map(|k| [universe.get(0, k), universe.get(1, k), universe.get(2, k)])
            .collect();
        let g3 = UniverseGraph3D::from_points(coords3).unwrap();
        let ag = AssignmentGraph::build(&g2, &g3).unwrap();
        let out =
            graph_match_forward(&mut tape, &store, &model, &g2, &g3, &ag, &universe).unwrap();
        for k in 0..6 {
            let a = out.x_soft.get(0, k);
            let b = out.x_soft.get(1, k);
            assert_eq!(a.to_bits(), b.to_bits(), "universe point {k}");
        }
    }

    #[test]
    fn gradients_flow_through_the_full_forward() {
        let (mut store, model) = build_model();
        let keypoints = vec![[0.4, -0.1], [-0.6, 0.3], [0.2, 0.8], [0.0, -0.9]];
        let err: f64 = crate::autodiff::gradient_check::<NetworkError, _>(
            &mut store,
            1e-5,
            |tape, store| {
                let fwd = forward_instance(tape, store, &model, 0, &keypoints, false)?;
                Ok(tape.frobenius_sq(&fwd.x_soft)?)
            },
        )
        .unwrap();
        assert!(err <= 1e-4, "fd relative error {err}");
    }
}
