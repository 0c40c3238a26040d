//! The federated training driver: world construction from a config, the
//! per-round protocol (local updates, attack crafting, aggregation, model
//! step, detection), and the restart-on-detection experiment loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::aggregation::{aggregate, AggregatorConfig};
use crate::attacks::{
    adaptive_refine, alie_clamp, backdoor_augment, sign_flip, AdaptiveState, AttackConfig,
    AttackKind, TriggerSpec,
};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{generate_synthetic, load_csv, split_noniid, Dataset};
use crate::detector::{DetectionOutcome, DetectorState};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::metrics::{accuracy, detection_metrics, Metrics, RoundRecord};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Benign,
    Malicious,
}

/// A client: identity, local shard, ground-truth role, and attack wiring.
#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub id: usize,
    pub shard: Dataset,
    pub role: Role,
    /// Group index for the distributed backdoor's trigger split.
    pub group: usize,
}

/// Everything a run needs, set up deterministically from (config, seed).
pub struct World {
    pub cfg: ExperimentConfig,
    pub attack: AttackConfig,
    pub aggregator: AggregatorConfig,
    pub clients: Vec<ClientRecord>,
    pub survivors: Vec<usize>,
    pub test_set: Dataset,
    pub model: Model,
    pub w_prev: Option<ParamVector>,
    pub detector: DetectorState,
    adaptive: BTreeMap<usize, AdaptiveState>,
    pub segment: usize,
    pub l_smooth: f64,
}

/// splitmix64 finalizer for seed derivation.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_DATA: u64 = 1;
const SALT_SPLIT: u64 = 2;
const SALT_ROLES: u64 = 3;
const SALT_DETECTOR: u64 = 4;
const SALT_TEST: u64 = 5;
const SALT_MODEL: u64 = 100;

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.run.seed;
        let n = cfg.fl.clients;
        let m = cfg.fl.malicious;

        let (train, test_set) = build_datasets(cfg, seed)?;
        let shards = split_noniid(&train, n, cfg.data.degree, derive_seed(seed, SALT_SPLIT))?;

        // Malicious identities: a seeded draw of m distinct clients.
        let mut ids: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, SALT_ROLES));
        ids.shuffle(&mut rng);
        let malicious: BTreeSet<usize> = ids.into_iter().take(m).collect();

        let mut attack = cfg.attack();
        resolve_trigger(&mut attack, &train)?;

        let mut clients = Vec::with_capacity(n);
        let mut mal_rank = 0usize;
        for (id, shard) in shards.into_iter().enumerate() {
            let role = if malicious.contains(&id) { Role::Malicious } else { Role::Benign };
            let group = if role == Role::Malicious {
                let g = mal_rank % attack.trigger.parts.max(1);
                mal_rank += 1;
                g
            } else {
                0
            };
            clients.push(ClientRecord { id, shard, role, group });
        }

        let model = Model::init(
            cfg.model.kind,
            train.feature_dim,
            train.num_classes,
            cfg.model.hidden,
            derive_seed(seed, SALT_MODEL),
        );
        let l_smooth = model.l_smooth_bound(&train);
        let detector = DetectorState::new(
            cfg.detector.variant,
            cfg.detector.window,
            cfg.detector.start_iteration,
            cfg.detector.k_max,
            cfg.detector.gap_b,
            derive_seed(seed, SALT_DETECTOR),
            model.params.dim(),
        );
        let adaptive = build_adaptive_states(cfg, &attack, &clients, model.params.dim());

        Ok(Self {
            aggregator: cfg.aggregator(),
            attack,
            cfg: cfg.clone(),
            clients,
            survivors: (0..n).collect(),
            test_set,
            model,
            w_prev: None,
            detector,
            adaptive,
            segment: 0,
            l_smooth,
        })
    }

    pub fn truth_malicious(&self) -> BTreeSet<usize> {
        if self.attack.kind == AttackKind::None {
            return BTreeSet::new();
        }
        self.clients
            .iter()
            .filter(|c| c.role == Role::Malicious)
            .map(|c| c.id)
            .collect()
    }

    /// Removes flagged clients, reinitializes the global model from a seed
    /// derived from (master seed, restart count), and rebuilds all detector
    /// and attacker state from scratch.
    pub fn remove_and_restart(&mut self, flagged: &BTreeSet<usize>) {
        self.survivors.retain(|id| !flagged.contains(id));
        self.segment += 1;
        let dim = self.model.params.dim();
        self.model = Model::init(
            self.cfg.model.kind,
            self.model.feature_dim,
            self.model.num_classes,
            self.cfg.model.hidden,
            derive_seed(self.cfg.run.seed, SALT_MODEL + self.segment as u64),
        );
        self.w_prev = None;
        self.detector = DetectorState::new(
            self.cfg.detector.variant,
            self.cfg.detector.window,
            self.cfg.detector.start_iteration,
            self.cfg.detector.k_max,
            self.cfg.detector.gap_b,
            derive_seed(self.cfg.run.seed, SALT_DETECTOR),
            dim,
        );
        let cfg = self.cfg.clone();
        self.adaptive = build_adaptive_states(&cfg, &self.attack, &self.clients, dim);
        self.adaptive.retain(|id, _| self.survivors.contains(id));
    }

    fn client(&self, id: usize) -> &ClientRecord {
        &self.clients[id]
    }
}

fn build_adaptive_states(
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    clients: &[ClientRecord],
    dim: usize,
) -> BTreeMap<usize, AdaptiveState> {
    if attack.kind != AttackKind::Adaptive {
        return BTreeMap::new();
    }
    clients
        .iter()
        .filter(|c| c.role == Role::Malicious)
        .map(|c| (c.id, AdaptiveState::new(cfg.detector.window, dim)))
        .collect()
}

fn build_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let c = cfg.data.classes;
            let train_total = cfg.fl.clients * cfg.data.per_client;
            let keep = 1.0 - cfg.data.test_fraction;
            let per_class = ((train_total as f64 / keep / c as f64).ceil() as usize).max(2);
            let full = generate_synthetic(
                c,
                cfg.data.features,
                per_class,
                derive_seed(seed, SALT_DATA),
            )?;
            // stratified split: the first test_per of each class block is
            // held out (blocks are i.i.d. draws, so this is unbiased)
            let test_per = ((per_class as f64 * cfg.data.test_fraction) as usize).max(1);
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, ex) in full.examples.into_iter().enumerate() {
                if i % per_class < test_per {
                    test.push(ex);
                } else {
                    train.push(ex);
                }
            }
            Ok((
                Dataset::new(train, c, cfg.data.features)?,
                Dataset::new(test, c, cfg.data.features)?,
            ))
        }
        DataSource::Csv => {
            let full = load_csv(std::path::Path::new(&cfg.data.csv_path))?;
            let mut order: Vec<usize> = (0..full.len()).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, SALT_TEST));
            order.shuffle(&mut rng);
            let n_test = ((full.len() as f64 * cfg.data.test_fraction) as usize).min(full.len() - 1);
            let test_ids: BTreeSet<usize> = order.into_iter().take(n_test).collect();
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, ex) in full.examples.iter().enumerate() {
                if test_ids.contains(&i) {
                    test.push(ex.clone());
                } else {
                    train.push(ex.clone());
                }
            }
            Ok((
                Dataset::new(train, full.num_classes, full.feature_dim)?,
                Dataset::new(test, full.num_classes, full.feature_dim)?,
            ))
        }
    }
}

/// Fills in the derived trigger when the config left it empty: the last four
/// feature indices, set to the train set's 99th-percentile absolute feature
/// value.
fn resolve_trigger(attack: &mut AttackConfig, train: &Dataset) -> Result<()> {
    let targeted = matches!(attack.kind, AttackKind::Scaling | AttackKind::Dba | AttackKind::Alie)
        || attack
            .adaptive_base
            .as_deref()
            .is_some_and(|b| matches!(b.kind, AttackKind::Scaling | AttackKind::Dba | AttackKind::Alie));
    if !targeted {
        return Ok(());
    }
    if attack.trigger.feature_indices.is_empty() {
        let f = train.feature_dim;
        let count = f.min(4);
        attack.trigger.feature_indices = (f - count..f).collect();
        let mut magnitudes: Vec<f64> = train
            .examples
            .iter()
            .flat_map(|ex| ex.features.iter().map(|v| v.abs()))
            .collect();
        magnitudes.sort_by(|a, b| a.total_cmp(b));
        let q99 = magnitudes[((magnitudes.len() - 1) as f64 * 0.99) as usize];
        attack.trigger.trigger_values = vec![q99; count];
    }
    attack.trigger.validate(train.feature_dim)?;
    if let Some(base) = attack.adaptive_base.as_deref_mut() {
        base.trigger = attack.trigger.clone();
    }
    Ok(())
}

/// Per-client crafting inputs computed in the parallel phase.
struct ClientCompute {
    id: usize,
    true_update: ParamVector,
    loss: f64,
    weight: f64,
    backdoor_update: Option<ParamVector>,
}

/// `local_steps` rounds of full-batch descent at rate alpha; the reported
/// update is the summed gradient, which for one step is the plain gradient.
fn client_gradient(
    model: &Model,
    w: &ParamVector,
    shard: &Dataset,
    steps: usize,
    alpha: f64,
) -> Result<(ParamVector, f64)> {
    let (mut acc, loss) = model.gradient(w, shard)?;
    if steps > 1 {
        let mut w_local = w.clone();
        for _ in 1..steps {
            w_local.axpy_in_place(-alpha, &acc)?;
            let (g, _) = model.gradient(&w_local, shard)?;
            acc = acc.add(&g)?;
        }
    }
    Ok((acc, loss))
}

/// Runs one FL round at iteration `t` (1-based within the current segment):
/// benign clients send true gradients, malicious clients send crafted
/// updates, the configured rule aggregates, the global model steps, and the
/// detector scores the round.
pub fn run_round(world: &mut World, t: usize) -> Result<(RoundRecord, DetectionOutcome)> {
    let w_t = world.model.params.clone();
    let alpha = world.cfg.fl.alpha;
    let steps = world.cfg.fl.local_steps;
    let attack = world.attack.clone();
    let model = &world.model;

    let base_kind = match attack.kind {
        AttackKind::Adaptive => attack.adaptive_base.as_ref().map(|b| b.kind),
        k => Some(k),
    }
    .unwrap_or(AttackKind::None);
    let base_cfg: &AttackConfig = match attack.kind {
        AttackKind::Adaptive => attack.adaptive_base.as_deref().unwrap_or(&attack),
        _ => &attack,
    };
    let needs_backdoor = matches!(base_kind, AttackKind::Scaling | AttackKind::Dba | AttackKind::Alie);

    // Phase 1: per-client gradients (parallel; order fixed by survivor list).
    let computes: Vec<ClientCompute> = world
        .survivors
        .par_iter()
        .map(|&id| -> Result<ClientCompute> {
            let client = world.client(id);
            let (true_update, loss) = client_gradient(model, &w_t, &client.shard, steps, alpha)?;
            let backdoor_update = if client.role == Role::Malicious && needs_backdoor {
                // ALIE bases its cohort statistics on unscaled backdoored
                // updates; Scaling/DBA apply gamma.
                let gamma = if base_kind == AttackKind::Alie { 1.0 } else { base_cfg.scale_factor };
                let part = if base_kind == AttackKind::Dba { Some(client.group) } else { None };
                let augmented =
                    backdoor_augment(&client.shard, &base_cfg.trigger, part, base_cfg.target_label)?;
                let (g, _) = client_gradient(model, &w_t, &augmented, steps, alpha)?;
                Some(g.scale(gamma))
            } else {
                None
            };
            Ok(ClientCompute { id, true_update, loss, weight: client.shard.len() as f64, backdoor_update })
        })
        .collect::<Result<_>>()?;

    // Phase 2: cohort barrier for ALIE-style clamping.
    let cohort: Vec<ParamVector> = if base_kind == AttackKind::Alie {
        computes.iter().filter_map(|c| c.backdoor_update.clone()).collect()
    } else {
        Vec::new()
    };

    // Phase 3: assemble what each client actually sends.
    let mut sent: BTreeMap<usize, ParamVector> = BTreeMap::new();
    for c in &computes {
        let client = world.client(c.id);
        let update = if client.role == Role::Benign {
            c.true_update.clone()
        } else {
            let base_update = match base_kind {
                AttackKind::None => c.true_update.clone(),
                AttackKind::SignFlip => sign_flip(&c.true_update),
                AttackKind::Scaling | AttackKind::Dba => {
                    c.backdoor_update.clone().expect("backdoor update computed")
                }
                AttackKind::Alie => alie_clamp(
                    &cohort,
                    c.backdoor_update.as_ref().expect("backdoor update computed"),
                    base_cfg.alie_z,
                )?,
                AttackKind::Adaptive => unreachable!("adaptive base is concrete"),
            };
            if attack.kind == AttackKind::Adaptive {
                let state = world.adaptive.get(&c.id).expect("adaptive state");
                let step = match world.w_prev.as_ref() {
                    Some(w_prev) => Some(w_t.sub(w_prev)?),
                    None => None,
                };
                let predicted = step.as_ref().and_then(|s| state.predict(s));
                match predicted {
                    Some(pred) => adaptive_refine(
                        &base_update,
                        &pred,
                        attack.adaptive_lambda,
                        attack.adaptive_steps,
                        attack.adaptive_step_size,
                    )?,
                    None => base_update,
                }
            } else {
                base_update
            }
        };
        sent.insert(c.id, update);
    }

    // Record what adaptive attackers observed and sent for their
    // next-round prediction.
    if attack.kind == AttackKind::Adaptive {
        let step = match world.w_prev.as_ref() {
            Some(w_prev) => Some(w_t.sub(w_prev)?),
            None => None,
        };
        let true_by_id: BTreeMap<usize, &ParamVector> =
            computes.iter().map(|c| (c.id, &c.true_update)).collect();
        for (&id, state) in world.adaptive.iter_mut() {
            if let (Some(update), Some(true_grad)) = (sent.get(&id), true_by_id.get(&id)) {
                state.record(step.as_ref(), true_grad, update);
            }
        }
    }

    // Aggregate, step the global model, and score the round.
    let updates: Vec<ParamVector> = sent.values().cloned().collect();
    let global_update = aggregate(&world.aggregator, &updates)?;
    let mut w_next = w_t.clone();
    w_next.axpy_in_place(-alpha, &global_update)?;

    let flagging_enabled =
        world.cfg.detector.enabled && world.segment < world.cfg.detector.max_restarts;
    let outcome = world.detector.detect(
        &sent,
        &global_update,
        &w_t,
        world.w_prev.as_ref(),
        t,
        flagging_enabled,
    )?;

    // Trace row.
    let total_weight: f64 = computes.iter().map(|c| c.weight).sum();
    let global_loss = if total_weight > 0.0 {
        computes.iter().map(|c| c.loss * c.weight).sum::<f64>() / total_weight
    } else {
        0.0
    };
    let (mut benign_sum, mut benign_n, mut mal_sum, mut mal_n) = (0.0, 0usize, 0.0, 0usize);
    for (id, score) in &outcome.scores {
        match world.client(*id).role {
            Role::Benign => {
                benign_sum += score;
                benign_n += 1;
            }
            Role::Malicious => {
                mal_sum += score;
                mal_n += 1;
            }
        }
    }
    let tacc_snapshot = if world.cfg.run.eval_every > 0 && t % world.cfg.run.eval_every == 0 {
        Some(accuracy(&world.model, &w_t, &world.test_set)?)
    } else {
        None
    };
    let record = RoundRecord {
        iteration: t,
        restart_segment: world.segment,
        mean_score_benign: if benign_n > 0 { benign_sum / benign_n as f64 } else { 0.0 },
        mean_score_malicious: if mal_n > 0 { mal_sum / mal_n as f64 } else { 0.0 },
        selected_k: outcome.selected_k,
        flagged_count: outcome.flagged.len(),
        fallback_used: outcome.fallback_used,
        global_loss,
        tacc_snapshot,
    };

    world.w_prev = Some(w_t);
    world.model.params = w_next;
    Ok((record, outcome))
}

/// Full experiment output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub metrics: Metrics,
    pub flagged: BTreeSet<usize>,
    pub truth_malicious: BTreeSet<usize>,
    /// (restart segment, iteration) of the first detection event.
    pub detection_iteration: Option<(usize, usize)>,
    pub restarts: usize,
    pub trace: Vec<RoundRecord>,
    pub final_params: ParamVector,
}

/// Runs segments of `budget` rounds, restarting on every detection event
/// until the restart allowance is spent; flagged clients accumulate across
/// events. Final metrics classify the original client population.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut world = World::build(cfg)?;
    let truth = world.truth_malicious();
    let n = cfg.fl.clients;
    let mut flagged_union: BTreeSet<usize> = BTreeSet::new();
    let mut detection_iteration = None;
    let mut restarts = 0usize;
    let mut trace = Vec::new();

    'segments: loop {
        for t in 1..=cfg.run.budget {
            let (record, outcome) = run_round(&mut world, t)?;
            trace.push(record);
            if !outcome.flagged.is_empty() {
                flagged_union.extend(outcome.flagged.iter().copied());
                if detection_iteration.is_none() {
                    detection_iteration = Some((world.segment, t));
                }
                world.remove_and_restart(&outcome.flagged);
                restarts += 1;
                if world.survivors.len() < 2 {
                    break 'segments;
                }
                continue 'segments;
            }
        }
        break;
    }

    let (dacc, fpr, fnr) = detection_metrics(&truth, &flagged_union, n);
    let tacc = accuracy(&world.model, &world.model.params, &world.test_set)?;
    let asr = if world.attack.trigger.feature_indices.is_empty() {
        0.0
    } else {
        compute_asr(
            &world.model,
            &world.model.params,
            &world.test_set,
            &world.attack.trigger,
            world.attack.target_label,
        )?
    };
    Ok(ExperimentResult {
        metrics: Metrics { dacc, fpr, fnr, tacc, asr },
        flagged: flagged_union,
        truth_malicious: truth,
        detection_iteration,
        restarts,
        trace,
        final_params: world.model.params.clone(),
    })
}

/// Attack success rate: the fraction of trigger-embedded test inputs
/// classified as the target label, excluding inputs whose true label already
/// is the target.
pub fn compute_asr(
    model: &Model,
    w: &ParamVector,
    test: &Dataset,
    trigger: &TriggerSpec,
    target: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set for ASR"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in &test.examples {
        if ex.label == target {
            continue;
        }
        total += 1;
        let triggered = crate::attacks::embed_trigger(&ex.features, trigger, None)?;
        if model.predict(w, &triggered) == target {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no non-target test examples for ASR"));
    }
    Ok(hits as f64 / total as f64)
}
