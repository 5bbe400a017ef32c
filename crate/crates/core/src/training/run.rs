use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::dataio::{save_checkpoint, CheckpointData, NamedTensor, Split};
use crate::geometry::reconstruction_residual;
use crate::matching::{
    compose_pairwise, cycle_consistency_score, extract_matching, matching_accuracy, MatchError,
    PartialPermutation,
};
use crate::network::{forward_instance, UniverseModel};

use super::losses::{instance_losses, weighted_total};
use super::optim::AdamState;
use super::{LossWeights, PreparedInstance, TrainError, TrainSetup};

/// Run-time options that do not affect the learned result.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Batch-element parallelism. Results are identical for any value:
    /// per-element gradients are reduced in batch order.
    pub threads: usize,
    /// Metrics record interval in iterations.
    pub log_every: usize,
    /// Periodic checkpoint interval.
    pub checkpoint_every: Option<usize>,
    /// Directory for periodic and abort checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            log_every: 50,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

/// One metrics log line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_def: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_off: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

/// Complete training state: parameters, optimizer moments, iteration
/// counter and RNG. Checkpoints round-trip all of it bitwise.
pub struct TrainState {
    pub setup: TrainSetup,
    pub model: UniverseModel,
    pub store: ParamStore,
    pub adam: AdamState,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Builds a fresh state: parameters initialized from the seed, counters
    /// at zero.
    pub fn initialize(setup: TrainSetup) -> Result<Self, TrainError> {
        setup.schedule.validate()?;
        setup.weights.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        let mut store = ParamStore::new();
        let model = UniverseModel::init(
            &mut store,
            &mut rng,
            setup.network.clone(),
            &setup.categories,
        )?;
        let adam = AdamState::new(&store, setup.optimizer);
        Ok(Self {
            setup,
            model,
            store,
            adam,
            iteration: 0,
            rng,
        })
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let params = self
            .store
            .iter()
            .map(|p| NamedTensor {
                name: p.name().to_string(),
                rows: p.tensor().rows() as u64,
                cols: p.tensor().cols() as u64,
                values: p.tensor().data().to_vec(),
            })
            .collect();
        CheckpointData {
            setup_json: serde_json::to_string(&self.setup).expect("setup serializes"),
            params,
            adam_step: self.adam.step,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            iteration: self.iteration as u64,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Rebuilds the model from the stored setup and loads all values.
    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self, TrainError> {
        let setup: TrainSetup = serde_json::from_str(&data.setup_json)
            .map_err(|e| TrainError::SetupMismatch(format!("setup blob: {e}")))?;
        let mut state = Self::initialize(setup)?;
        if data.params.len() != state.store.len() {
            return Err(TrainError::SetupMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                data.params.len(),
                state.store.len()
            )));
        }
        for (i, saved) in data.params.iter().enumerate() {
            let p = state.store.by_index(i);
            if p.name() != saved.name
                || p.tensor().rows() as u64 != saved.rows
                || p.tensor().cols() as u64 != saved.cols
            {
                return Err(TrainError::SetupMismatch(format!(
                    "parameter {i}: checkpoint has {} ({}x{}), model has {} ({}x{})",
                    saved.name,
                    saved.rows,
                    saved.cols,
                    p.name(),
                    p.tensor().rows(),
                    p.tensor().cols()
                )));
            }
            state.store.by_index_mut(i).set_values(&saved.values);
        }
        state.adam.m = data.adam_m.clone();
        state.adam.v = data.adam_v.clone();
        state.adam.step = data.adam_step;
        state.iteration = data.iteration as usize;
        state.rng = ChaCha8Rng::from_seed(data.rng_seed);
        state.rng.set_stream(data.rng_stream);
        state.rng.set_word_pos(data.rng_word_pos);
        Ok(state)
    }
}

struct ElementResult {
    total: f64,
    comps: [Option<f64>; 5],
    grads: Vec<Option<Vec<f64>>>,
    accuracy: Option<f64>,
}

fn process_element(
    store: &ParamStore,
    model: &UniverseModel,
    inst: &PreparedInstance,
    weights: &LossWeights,
    ablation: &super::Ablation,
) -> Result<ElementResult, TrainError> {
    let mut tape = Tape::new();
    let losses = instance_losses(&mut tape, store, model, inst, weights, ablation)?;
    let total = weighted_total(&mut tape, &losses, weights)?;
    let grads = tape.backward(&total)?;
    let grads = tape.param_gradients(&grads, store.len());

    let accuracy = match (&losses.x_soft, &inst.labels) {
        (Some(x_soft), Some(_)) => {
            let pred = extract_matching(x_soft)?;
            Some(matching_accuracy(&pred, &inst.gt_permutation()?)?)
        }
        _ => None,
    };
    let value = |t: &Option<Tensor>| t.as_ref().map(|x| x.scalar_value());
    Ok(ElementResult {
        total: total.scalar_value(),
        comps: [
            value(&losses.matching),
            value(&losses.deformed_recon),
            value(&losses.static_recon),
            value(&losses.offset),
            value(&losses.one_to_one),
        ],
        grads,
        accuracy,
    })
}

/// Mean over the present values; `None` when nothing is present.
fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values.flatten() {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Runs the schedule from the state's current iteration to the end:
/// reconstruction-only warm start, then the full weighted loss. Emits one
/// metrics record every `log_every` iterations.
pub fn train(
    state: &mut TrainState,
    dataset: &[PreparedInstance],
    options: &TrainOptions,
) -> Result<Vec<MetricsRecord>, TrainError> {
    let schedule = state.setup.schedule;
    let total_iterations = schedule.total_iterations;
    let mut metrics = Vec::new();
    if state.iteration >= total_iterations {
        return Ok(metrics);
    }

    let train_set: Vec<&PreparedInstance> = dataset
        .iter()
        .filter(|i| i.split == Split::Train)
        .collect();
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }

    let pool = (options.threads > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .expect("thread pool")
    });

    while state.iteration < total_iterations {
        let t = state.iteration;
        let lr = schedule.lr_at(t);
        let warm = t < schedule.warm_start_iterations;
        let weights = if warm {
            LossWeights::warm_start()
        } else {
            state.setup.weights
        };

        let batch: Vec<&PreparedInstance> = (0..schedule.batch_size)
            .map(|_| train_set[state.rng.gen_range(0..train_set.len())])
            .collect();

        let run = |store: &ParamStore, model: &UniverseModel| -> Result<Vec<ElementResult>, TrainError> {
            let ablation = state.setup.ablation;
            match &pool {
                Some(pool) => pool.install(|| {
                    batch
                        .par_iter()
                        .map(|inst| process_element(store, model, inst, &weights, &ablation))
                        .collect()
                }),
                None => batch
                    .iter()
                    .map(|inst| process_element(store, model, inst, &weights, &ablation))
                    .collect(),
            }
        };
        let elements = run(&state.store, &state.model)?;

        // Fixed-order reduction keeps results identical for any thread count.
        let scale = 1.0 / elements.len() as f64;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; state.store.len()];
        let mut loss_total = 0.0;
        for el in &elements {
            loss_total += el.total;
            for (slot, g) in grads.iter_mut().zip(&el.grads) {
                if let Some(g) = g {
                    match slot {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        loss_total *= scale;
        for slot in grads.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= scale;
            }
        }

        if !loss_total.is_finite() {
            save_abort_checkpoint(state, options, t);
            return Err(TrainError::Diverged { iteration: t });
        }

        state.adam.apply(&mut state.store, &grads, lr);
        if state
            .store
            .iter()
            .any(|p| p.tensor().data().iter().any(|v| !v.is_finite()))
        {
            return Err(TrainError::NonFiniteParams { iteration: t });
        }
        state.iteration = t + 1;

        if t % options.log_every == 0 || state.iteration == total_iterations {
            let comp = |k: usize| mean_of(elements.iter().map(|e| e.comps[k]));
            metrics.push(MetricsRecord {
                iteration: t,
                lr,
                loss_total,
                loss_match: comp(0),
                loss_def: comp(1),
                loss_rec: comp(2),
                loss_off: comp(3),
                loss_reg: comp(4),
                train_accuracy: mean_of(elements.iter().map(|e| e.accuracy)),
            });
        }

        if let (Some(every), Some(dir)) = (options.checkpoint_every, &options.checkpoint_dir) {
            if state.iteration % every == 0 && state.iteration < total_iterations {
                let path = dir.join(format!("checkpoint_{:06}.ckpt", state.iteration));
                save_checkpoint(&state.to_checkpoint(), &path)?;
            }
        }
    }
    Ok(metrics)
}

fn save_abort_checkpoint(state: &TrainState, options: &TrainOptions, iteration: usize) {
    if let Some(dir) = &options.checkpoint_dir {
        // Parameters are still the last finite values: divergence is
        // detected before the optimizer step.
        let path = dir.join(format!("abort_{iteration:06}.ckpt"));
        let _ = save_checkpoint(&state.to_checkpoint(), &path);
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: Split,
    /// Categories with more instances than this sample the triples instead
    /// of enumerating them.
    pub exhaustive_below: usize,
    pub sampled_triples: usize,
    pub triple_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            exhaustive_below: 20,
            sampled_triples: 1000,
            triple_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryEval {
    pub name: String,
    pub instances: usize,
    pub mean_accuracy: Option<f64>,
    pub cycle_consistency_score: Option<f64>,
    pub cycle_triples: usize,
    pub static_recon_error: Option<f64>,
    pub deformed_recon_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub instances: usize,
    pub mean_accuracy: Option<f64>,
    pub cycle_consistency_score: Option<f64>,
    pub cycle_triples: usize,
    pub static_recon_error: Option<f64>,
    pub deformed_recon_error: Option<f64>,
    pub per_category: Vec<CategoryEval>,
}

struct InstanceEval {
    category: usize,
    id: String,
    prediction: PartialPermutation,
    accuracy: Option<f64>,
    static_recon: Option<f64>,
    deformed_recon: Option<f64>,
}

fn evaluate_instance(
    state: &TrainState,
    inst: &PreparedInstance,
) -> Result<InstanceEval, TrainError> {
    let mut tape = Tape::new();
    let fwd = forward_instance(
        &mut tape,
        &state.store,
        &state.model,
        inst.category,
        &inst.keypoints,
        state.setup.ablation.no_deform,
    )?;
    let prediction = extract_matching(&fwd.x_soft)?;

    let mut accuracy = None;
    let mut static_recon = None;
    let mut deformed_recon = None;
    if inst.labels.is_some() {
        accuracy = Some(matching_accuracy(&prediction, &inst.gt_permutation()?)?);
        if inst.m() >= 4 {
            let labels = inst.labels()?.to_vec();
            let m = inst.m();
            let mut v = vec![0.0; 3 * m];
            for (i, p) in inst.keypoints.iter().enumerate() {
                v[i] = p[0];
                v[m + i] = p[1];
                v[2 * m + i] = 1.0;
            }
            let v3 = tape.constant(&Tensor::from_vec(3, m, v).expect("finite keypoints"));
            let ones = tape.constant(&Tensor::from_vec(1, m, vec![1.0; m]).expect("ones"));
            let cond_cap = state.model.config.cond_cap;

            let mut residual = |points: &Tensor| -> Result<f64, TrainError> {
                let sel = tape.gather_cols(points, &labels)?;
                let u4 = tape.concat(&sel, &ones, crate::autodiff::Axis::Rows)?;
                Ok(reconstruction_residual(&mut tape, &u4, &v3, cond_cap)?.scalar_value())
            };
            static_recon = Some(residual(&fwd.universe)?);
            deformed_recon = Some(residual(&fwd.deformed)?);
        }
    }

    Ok(InstanceEval {
        category: inst.category,
        id: inst.id.clone(),
        prediction,
        accuracy,
        static_recon,
        deformed_recon,
    })
}

/// Predicted matchings for all instances of the given split, grouped by
/// category in model order.
pub fn predict_matchings(
    state: &TrainState,
    dataset: &[PreparedInstance],
    split: Split,
) -> Result<Vec<(String, crate::matching::MultiMatching)>, TrainError> {
    let mut per_cat: Vec<Vec<(String, PartialPermutation)>> =
        vec![Vec::new(); state.model.categories.len()];
    for inst in dataset.iter().filter(|i| i.split == split) {
        let eval = evaluate_instance(state, inst)?;
        per_cat[eval.category].push((eval.id, eval.prediction));
    }
    state
        .model
        .categories
        .iter()
        .zip(per_cat)
        .map(|(cat, entries)| {
            Ok((
                cat.name.clone(),
                crate::matching::MultiMatching::new(entries)?,
            ))
        })
        .collect()
}

/// Runs inference over a split and reports accuracy, cycle consistency and
/// reconstruction errors per category and overall.
pub fn evaluate(
    state: &TrainState,
    dataset: &[PreparedInstance],
    options: &EvalOptions,
) -> Result<EvalReport, TrainError> {
    let instances: Vec<&PreparedInstance> = dataset
        .iter()
        .filter(|i| i.split == options.split)
        .collect();
    let evals: Vec<InstanceEval> = instances
        .iter()
        .map(|inst| evaluate_instance(state, inst))
        .collect::<Result<_, _>>()?;

    let mut per_category = Vec::new();
    for (c, cat) in state.model.categories.iter().enumerate() {
        let cat_evals: Vec<&InstanceEval> = evals.iter().filter(|e| e.category == c).collect();
        if cat_evals.is_empty() {
            continue;
        }
        let predictions: Vec<&PartialPermutation> =
            cat_evals.iter().map(|e| &e.prediction).collect();
        let (score, triples) = category_cycle_score(&predictions, options)?;
        per_category.push(CategoryEval {
            name: cat.name.clone(),
            instances: cat_evals.len(),
            mean_accuracy: mean_of(cat_evals.iter().map(|e| e.accuracy)),
            cycle_consistency_score: score,
            cycle_triples: triples,
            static_recon_error: mean_of(cat_evals.iter().map(|e| e.static_recon)),
            deformed_recon_error: mean_of(cat_evals.iter().map(|e| e.deformed_recon)),
        });
    }

    // Triple-weighted mean across categories.
    let cycle_triples: usize = per_category.iter().map(|c| c.cycle_triples).sum();
    let cycle_score = (cycle_triples > 0).then(|| {
        per_category
            .iter()
            .filter_map(|c| c.cycle_consistency_score.map(|s| s * c.cycle_triples as f64))
            .sum::<f64>()
            / cycle_triples as f64
    });
    Ok(EvalReport {
        split: match options.split {
            Split::Train => "train".into(),
            Split::Test => "test".into(),
        },
        instances: evals.len(),
        mean_accuracy: mean_of(evals.iter().map(|e| e.accuracy)),
        cycle_consistency_score: cycle_score,
        cycle_triples,
        static_recon_error: mean_of(evals.iter().map(|e| e.static_recon)),
        deformed_recon_error: mean_of(evals.iter().map(|e| e.deformed_recon)),
        per_category,
    })
}

/// Mean cycle consistency score over instance triples of one category:
/// exhaustive when the category is small, seeded sampling otherwise.
fn category_cycle_score(
    predictions: &[&PartialPermutation],
    options: &EvalOptions,
) -> Result<(Option<f64>, usize), TrainError> {
    let n = predictions.len();
    if n < 3 {
        return Ok((None, 0));
    }
    let mut scores = Vec::new();
    let mut eval_triple = |j: usize, k: usize, l: usize| -> Result<(), TrainError> {
        let xjk = compose_pairwise(predictions[j], predictions[k])?;
        let xjl = compose_pairwise(predictions[j], predictions[l])?;
        let xkl = compose_pairwise(predictions[k], predictions[l])?;
        match cycle_consistency_score(&xjk, &xjl, &xkl) {
            Ok(s) => {
                scores.push(s);
                Ok(())
            }
            Err(MatchError::UndefinedScore) => Ok(()),
            Err(e) => Err(e.into()),
        }
    };
    if n <= options.exhaustive_below {
        for j in 0..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    eval_triple(j, k, l)?;
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.triple_seed);
        for _ in 0..options.sampled_triples {
            let j = rng.gen_range(0..n);
            let k = loop {
                let k = rng.gen_range(0..n);
                if k != j {
                    break k;
                }
            };
            let l = loop {
                let l = rng.gen_range(0..n);
                if l != j && l != k {
                    break l;
                }
            };
            eval_triple(j, k, l)?;
        }
    }
    let count = scores.len();
    Ok((
        (count > 0).then(|| scores.iter().sum::<f64>() / count as f64),
        count,
    ))
}

/// Writes metrics as line-delimited JSON.
pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<(), TrainError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| {
        TrainError::Data(crate::dataio::DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}
