use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, ParamStore, Tape, Tensor};
use crate::geometry::reconstruction_residual;
use crate::graphgen::{AssignmentGraph, Graph2D, UniverseGraph3D};
use crate::network::{
    deform_universe, encode_points, graph_match_forward, points2d_tensor, UniverseModel,
};

use super::{LossWeights, PreparedInstance, TrainError};

/// Pipeline toggles for the ablation experiments.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Force offsets to zero: the matcher and the deformed reconstruction
    /// run against the static universe points.
    pub no_deform: bool,
}

/// Per-instance loss components; terms whose weight is zero are `None`
/// (never evaluated).
#[derive(Default)]
pub struct InstanceLosses {
    pub matching: Option<Tensor>,
    pub deformed_recon: Option<Tensor>,
    pub static_recon: Option<Tensor>,
    pub offset: Option<Tensor>,
    pub one_to_one: Option<Tensor>,
    /// Soft matching kept for metrics when the matcher ran.
    pub x_soft: Option<Tensor>,
}

fn homogenize(tape: &mut Tape, points3: &Tensor) -> Result<Tensor, TrainError> {
    let ones = tape.constant(&Tensor::from_vec(1, points3.cols(), vec![1.0; points3.cols()]).expect("ones"));
    Ok(tape.concat(points3, &ones, Axis::Rows)?)
}

fn homogeneous_keypoints(tape: &mut Tape, inst: &PreparedInstance) -> Tensor {
    let m = inst.m();
    let mut data = vec![0.0; 3 * m];
    for (i, p) in inst.keypoints.iter().enumerate() {
        data[i] = p[0];
        data[m + i] = p[1];
        data[2 * m + i] = 1.0;
    }
    tape.constant(&Tensor::from_vec(3, m, data).expect("finite keypoints"))
}

/// Builds the selector `B` with `B vec(X) = (row sums; column sums)` for an
/// `m x d` matrix under column-major vectorization: `vec` position of
/// `X[i, k]` is `k*m + i`.
pub fn build_sum_operator(m: usize, d: usize) -> Tensor {
    let cols = m * d;
    let mut data = vec![0.0; (m + d) * cols];
    for i in 0..m {
        for k in 0..d {
            data[i * cols + (k * m + i)] = 1.0;
        }
    }
    for k in 0..d {
        for i in 0..m {
            data[(m + k) * cols + (k * m + i)] = 1.0;
        }
    }
    Tensor::from_vec(m + d, cols, data).expect("binary operator")
}

/// Evaluates exactly the loss components with non-zero weight for one
/// instance, sharing the forward pass between them.
pub fn instance_losses(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    inst: &PreparedInstance,
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<InstanceLosses, TrainError> {
    let cat = model.category(inst.category)?;
    let cond_cap = model.config.cond_cap;
    let need_matcher = weights.matching > 0.0 || weights.one_to_one > 0.0;
    let need_deformed_points = need_matcher || weights.deformed_recon > 0.0;
    let run_deform = (need_deformed_points || weights.offset > 0.0) && !ablation.no_deform;

    let mut out = InstanceLosses::default();

    let v3 = if weights.static_recon > 0.0 || weights.deformed_recon > 0.0 {
        Some(homogeneous_keypoints(tape, inst))
    } else {
        None
    };

    if weights.static_recon > 0.0 {
        let labels = inst.labels()?.to_vec();
        let universe = tape.param(store, cat.universe);
        let sel = tape.gather_cols(&universe, &labels)?;
        let u4 = homogenize(tape, &sel)?;
        out.static_recon = Some(reconstruction_residual(
            tape,
            &u4,
            v3.as_ref().expect("built above"),
            cond_cap,
        )?);
    }

    let deformed = if run_deform {
        let points = tape.constant(&points2d_tensor(&inst.keypoints));
        let global = encode_points(tape, store, model, inst.category, &points)?;
        let (offsets, deformed, _universe) =
            deform_universe(tape, store, model, inst.category, &global)?;
        if weights.offset > 0.0 {
            out.offset = Some(tape.frobenius_sq(&offsets)?);
        }
        Some(deformed)
    } else if need_deformed_points {
        // Deformation disabled: the static universe stands in.
        Some(tape.param(store, cat.universe))
    } else {
        None
    };

    if weights.deformed_recon > 0.0 {
        let labels = inst.labels()?.to_vec();
        let def = deformed.as_ref().expect("needed for deformed recon");
        let sel = tape.gather_cols(def, &labels)?;
        let u4 = homogenize(tape, &sel)?;
        out.deformed_recon = Some(reconstruction_residual(
            tape,
            &u4,
            v3.as_ref().expect("built above"),
            cond_cap,
        )?);
    }

    if need_matcher {
        let def = deformed.as_ref().expect("needed for matcher");
        let coords3: Vec<[f64; 3]> = (0..cat.d)
            .map(|k| [def.get(0, k), def.get(1, k), def.get(2, k)])
            .collect();
        let topo_coords: Vec<[f64; 3]> = if model.config.freeze_universe_topology {
            let stat = store.get(cat.universe).tensor();
            (0..cat.d)
                .map(|k| [stat.get(0, k), stat.get(1, k), stat.get(2, k)])
                .collect()
        } else {
            coords3.clone()
        };
        let edges3 = crate::graphgen::edges_3d(&topo_coords)?;
        let g3 = UniverseGraph3D::with_topology(coords3, edges3)?;
        let g2 = Graph2D::from_points(inst.keypoints.clone())?;
        let ag = AssignmentGraph::build(&g2, &g3)?;
        let matcher = graph_match_forward(tape, store, model, &g2, &g3, &ag, def)?;
        let x_soft = matcher.x_soft;

        if weights.matching > 0.0 {
            let gt = tape.constant(
                &Tensor::from_vec(inst.m(), inst.d, inst.gt_dense()?).expect("gt matrix"),
            );
            let diff = tape.sub(&x_soft, &gt)?;
            out.matching = Some(tape.frobenius_sq(&diff)?);
        }

        if weights.one_to_one > 0.0 {
            // Differentiable surrogate: the positive-class probabilities
            // replace the hard argmax vector.
            let (m, d) = (inst.m(), inst.d);
            let xt = tape.transpose(&x_soft)?;
            let y = tape.reshape(&xt, m * d, 1)?;
            let gt_vec = tape.constant(
                &Tensor::from_vec(m * d, 1, inst.gt_vec_cm()?).expect("gt vec"),
            );
            let diff = tape.sub(&y, &gt_vec)?;
            let b = tape.constant(&build_sum_operator(m, d));
            let sums = tape.matmul(&b, &diff)?;
            out.one_to_one = Some(tape.frobenius_sq(&sums)?);
        }

        out.x_soft = Some(x_soft);
    }

    Ok(out)
}

/// Weighted sum of one instance's components; zero-weight terms are
/// skipped (and are `None` in the input by construction).
pub fn weighted_total(
    tape: &mut Tape,
    losses: &InstanceLosses,
    weights: &LossWeights,
) -> Result<Tensor, TrainError> {
    let mut total: Option<Tensor> = None;
    let add = |tape: &mut Tape, total: &mut Option<Tensor>, term: &Option<Tensor>, w: f64| -> Result<(), TrainError> {
        if w > 0.0 {
            if let Some(t) = term {
                let scaled = tape.scale(t, w)?;
                *total = Some(match total.take() {
                    Some(acc) => tape.add(&acc, &scaled)?,
                    None => scaled,
                });
            }
        }
        Ok(())
    };
    add(tape, &mut total, &losses.matching, weights.matching)?;
    add(tape, &mut total, &losses.deformed_recon, weights.deformed_recon)?;
    add(tape, &mut total, &losses.static_recon, weights.static_recon)?;
    add(tape, &mut total, &losses.offset, weights.offset)?;
    add(tape, &mut total, &losses.one_to_one, weights.one_to_one)?;
    Ok(match total {
        Some(t) => t,
        None => tape.constant(&Tensor::scalar(0.0)),
    })
}

fn batch_component_mean<F>(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    batch: &[&PreparedInstance],
    weights: LossWeights,
    ablation: &Ablation,
    pick: F,
) -> Result<Tensor, TrainError>
where
    F: Fn(InstanceLosses) -> Option<Tensor>,
{
    assert!(!batch.is_empty(), "loss over an empty batch");
    let mut acc: Option<Tensor> = None;
    for inst in batch {
        let losses = instance_losses(tape, store, model, inst, &weights, ablation)?;
        let term = pick(losses).expect("requested component was evaluated");
        acc = Some(match acc.take() {
            Some(a) => tape.add(&a, &term)?,
            None => term,
        });
    }
    Ok(tape.scale(&acc.expect("non-empty batch"), 1.0 / batch.len() as f64)?)
}

/// Mean static reconstruction loss over a batch.
pub fn loss_rec(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    batch: &[&PreparedInstance],
) -> Result<Tensor, TrainError> {
    let weights = LossWeights {
        static_recon: 1.0,
        matching: 0.0,
        deformed_recon: 0.0,
        offset: 0.0,
        one_to_one: 0.0,
    };
    batch_component_mean(tape, store, model, batch, weights, &Ablation::default(), |l| {
        l.static_recon
    })
}

/// Mean deformed reconstruction loss over a batch.
pub fn loss_def(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    batch: &[&PreparedInstance],
    ablation: &Ablation,
) -> Result<Tensor, TrainError> {
    let weights = LossWeights {
        deformed_recon: 1.0,
        matching: 0.0,
        static_recon: 0.0,
        offset: 0.0,
        one_to_one: 0.0,
    };
    batch_component_mean(tape, store, model, batch, weights, ablation, |l| {
        l.deformed_recon
    })
}

/// Mean squared offset magnitude over a batch.
pub fn loss_off(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    batch: &[&PreparedInstance],
) -> Result<Tensor, TrainError> {
    let weights = LossWeights {
        offset: 1.0,
        matching: 0.0,
        deformed_recon: 0.0,
        static_recon: 0.0,
        one_to_one: 0.0,
    };
    batch_component_mean(tape, store, model, batch, weights, &Ablation::default(), |l| {
        l.offset
    })
}

/// Mean matching loss (squared Frobenius distance to the ground truth)
/// over a batch.
pub fn loss_match(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    batch: &[&PreparedInstance],
    ablation: &Ablation,
) -> Result<Tensor, TrainError> {
    let weights = LossWeights {
        matching: 1.0,
        deformed_recon: 0.0,
        static_recon: 0.0,
        offset: 0.0,
        one_to_one: 0.0,
    };
    batch_component_mean(tape, store, model, batch, weights, ablation, |l| l.matching)
}

/// Mean one-to-one regularizer (soft variant) over a batch.
pub fn loss_reg(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    batch: &[&PreparedInstance],
    ablation: &Ablation,
) -> Result<Tensor, TrainError> {
    let weights = LossWeights {
        one_to_one: 1.0,
        matching: 0.0,
        deformed_recon: 0.0,
        static_recon: 0.0,
        offset: 0.0,
    };
    batch_component_mean(tape, store, model, batch, weights, ablation, |l| l.one_to_one)
}

/// Mean weighted total loss over a batch; zero-weight components are never
/// evaluated, so the warm start does not touch the matching network.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &UniverseModel,
    batch: &[&PreparedInstance],
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<Tensor, TrainError> {
    assert!(!batch.is_empty(), "loss over an empty batch");
    let mut acc: Option<Tensor> = None;
    for inst in batch {
        let losses = instance_losses(tape, store, model, inst, weights, ablation)?;
        let term = weighted_total(tape, &losses, weights)?;
        acc = Some(match acc.take() {
            Some(a) => tape.add(&a, &term)?,
            None => term,
        });
    }
    Ok(tape.scale(&acc.expect("non-empty batch"), 1.0 / batch.len() as f64)?)
}

/// Evaluation-time one-to-one regularizer with the hard label vector:
/// `y_i = 1` iff the positive class wins (ties go to the negative class).
pub fn one_to_one_hard(x_soft: &Tensor, gt_vec_cm: &[f64]) -> f64 {
    let (m, d) = x_soft.shape();
    let mut y = vec![0.0; m * d];
    for i in 0..m {
        for k in 0..d {
            if x_soft.get(i, k) > 0.5 {
                y[k * m + i] = 1.0;
            }
        }
    }
    let b = build_sum_operator(m, d);
    let mut total = 0.0;
    for row in 0..m + d {
        let mut s = 0.0;
        for c in 0..m * d {
            let bv = b.get(row, c);
            if bv != 0.0 {
                s += bv * (y[c] - gt_vec_cm[c]);
            }
        }
        total += s * s;
    }
    total
}
