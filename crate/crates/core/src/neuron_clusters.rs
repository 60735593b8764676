//! Groups neurons whose concept patches look alike.
//!
//! A patch embedder (the audited classifier's convolutional stages plus a
//! projection and L2 normalisation) is trained on same-neuron and
//! different-neuron patch pairs with a log-likelihood objective on inner
//! products. Neurons are then clustered incrementally: each joins the most
//! similar existing cluster when the mean inner product clears a threshold.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array3;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{
    backward_stages, forward_stages, global_avg_pool, global_avg_pool_backward, Cnn, Linear,
    NeuronRef, ParamGrad, Sgd, Stage,
};
use crate::patches::NeuronConcept;

pub const LOSS_EPSILON: f64 = 1e-7;
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPair {
    pub patch_a: String,
    pub owner_a: NeuronRef,
    pub patch_b: String,
    pub owner_b: NeuronRef,
    pub same_neuron: bool,
}

/// Draws `n_pos` same-neuron and `n_neg` different-neuron pairs, with
/// replacement. Negative pairs never reuse one crop on both sides.
pub fn sample_pairs(
    concepts: &[NeuronConcept],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    let nonempty: Vec<&NeuronConcept> = concepts.iter().filter(|c| !c.patches.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(AuditError::Validation("no concept patches to pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pos + n_neg);

    let multi: Vec<&NeuronConcept> = nonempty.iter().copied().filter(|c| c.patches.len() >= 2).collect();
    if n_pos > 0 && multi.is_empty() {
        return Err(AuditError::Validation(
            "positive pairs need a neuron with at least two patches".into(),
        ));
    }
    for _ in 0..n_pos {
        let c = multi.choose(&mut rng).expect("nonempty");
        let picked: Vec<_> = c.patches.choose_multiple(&mut rng, 2).collect();
        pairs.push(PatchPair {
            patch_a: picked[0].patch_id.clone(),
            owner_a: c.neuron.clone(),
            patch_b: picked[1].patch_id.clone(),
            owner_b: c.neuron.clone(),
            same_neuron: true,
        });
    }

    if n_neg > 0 && nonempty.len() < 2 {
        return Err(AuditError::Validation(
            "negative pairs need at least two neurons with patches".into(),
        ));
    }
    let cap = 1000 * n_neg.max(1);
    let mut tries = 0;
    let mut drawn = 0;
    while drawn < n_neg {
        tries += 1;
        if tries > cap {
            return Err(AuditError::Validation(
                "could not draw distinct-patch negative pairs".into(),
            ));
        }
        let two: Vec<&&NeuronConcept> = nonempty.choose_multiple(&mut rng, 2).collect();
        let a = two[0].patches.choose(&mut rng).expect("nonempty");
        let b = two[1].patches.choose(&mut rng).expect("nonempty");
        if a.patch_id == b.patch_id {
            continue;
        }
        pairs.push(PatchPair {
            patch_a: a.patch_id.clone(),
            owner_a: two[0].neuron.clone(),
            patch_b: b.patch_id.clone(),
            owner_b: two[1].neuron.clone(),
            same_neuron: false,
        });
        drawn += 1;
    }
    Ok(pairs)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64]) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(AuditError::Validation(format!(
            "expected a unit vector, norm is {norm}"
        )));
    }
    Ok(())
}

fn loss_from_dot(d: f64, same_neuron: bool) -> f64 {
    let arg = if same_neuron { d } else { 1.0 - d };
    -arg.clamp(LOSS_EPSILON, 1.0).ln()
}

/// Derivative of [`loss_from_dot`] with respect to the inner product; zero
/// where the clamp is active.
fn loss_slope(d: f64, same_neuron: bool) -> f64 {
    let arg = if same_neuron { d } else { 1.0 - d };
    if arg <= LOSS_EPSILON || arg >= 1.0 {
        return 0.0;
    }
    if same_neuron {
        -1.0 / arg
    } else {
        1.0 / arg
    }
}

/// `-log(v_i . v_j)` for same-neuron pairs, `-log(1 - v_i . v_j)` otherwise,
/// with the log argument clamped to `[1e-7, 1]`.
pub fn pair_loss(v_i: &[f64], v_j: &[f64], same_neuron: bool) -> Result<f64> {
    check_unit(v_i)?;
    check_unit(v_j)?;
    Ok(loss_from_dot(dot(v_i, v_j), same_neuron))
}

pub const EMBEDDER_FORMAT: &str = "audit-patch-embedder/v1";

/// Maps a preprocessed patch to a unit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    pub format: String,
    pub stages: Vec<Stage>,
    pub projection: Linear,
}

struct EmbedTrace {
    trace: crate::model::Trace,
    feats: Vec<f64>,
    z: Vec<f64>,
    norm: f64,
    unit: Vec<f64>,
}

impl Embedder {
    /// Backbone copied from the classifier; projection starts at identity.
    pub fn from_classifier(cnn: &Cnn) -> Self {
        let width = cnn.stages.last().expect("nonempty").conv.out_channels;
        Embedder {
            format: EMBEDDER_FORMAT.to_string(),
            stages: cnn.stages.clone(),
            projection: Linear::identity(width),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.outputs
    }

    fn run(&self, input: &Array3<f64>) -> EmbedTrace {
        let trace = forward_stages(&self.stages, input);
        let feats = global_avg_pool(trace.outputs.last().expect("nonempty"));
        let z = self.projection.forward(&feats);
        let norm = dot(&z, &z).sqrt();
        let unit = if norm > 1e-12 {
            z.iter().map(|v| v / norm).collect()
        } else {
            let mut e = vec![0.0; z.len()];
            e[0] = 1.0;
            e
        };
        EmbedTrace {
            trace,
            feats,
            z,
            norm,
            unit,
        }
    }

    pub fn embed(&self, input: &Array3<f64>) -> Vec<f64> {
        self.run(input).unit
    }

    /// Accumulates parameter gradients given `d loss / d unit`.
    fn backward(&self, t: &EmbedTrace, g_unit: &[f64], grads: &mut EmbedGrads) {
        if t.norm <= 1e-12 {
            return;
        }
        let ug = dot(&t.unit, g_unit);
        let dz: Vec<f64> = g_unit
            .iter()
            .zip(&t.unit)
            .map(|(g, u)| (g - u * ug) / t.norm)
            .collect();
        let _ = &t.z;
        let dfeat = self.projection.backward(&t.feats, &dz, Some(&mut grads.projection));
        let last = t.trace.outputs.last().expect("nonempty");
        let g = global_avg_pool_backward(&dfeat, last.dim());
        let n = self.stages.len();
        backward_stages(&self.stages, &t.trace, n, g, 0, Some(&mut grads.stages));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| AuditError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        let e: Embedder = serde_json::from_str(&text).map_err(|err| AuditError::Parse {
            path: path.to_path_buf(),
            message: err.to_string(),
        })?;
        if e.format != EMBEDDER_FORMAT {
            return Err(AuditError::Validation(format!(
                "unsupported embedder format `{}`",
                e.format
            )));
        }
        Ok(e)
    }
}

#[derive(Debug, Clone)]
struct EmbedGrads {
    stages: Vec<ParamGrad>,
    projection: ParamGrad,
}

impl EmbedGrads {
    fn zeros(e: &Embedder) -> Self {
        EmbedGrads {
            stages: e.stages.iter().map(|s| ParamGrad::for_conv(&s.conv)).collect(),
            projection: ParamGrad::for_linear(&e.projection),
        }
    }

    fn add_assign(&mut self, o: &EmbedGrads) {
        for (a, b) in self.stages.iter_mut().zip(&o.stages) {
            a.add_assign(b);
        }
        self.projection.add_assign(&o.projection);
    }

    fn scale(&mut self, s: f64) {
        self.stages.iter_mut().for_each(|g| g.scale(s));
        self.projection.scale(s);
    }

    fn is_finite(&self) -> bool {
        self.stages.iter().all(ParamGrad::is_finite) && self.projection.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig {
            epochs: 10,
            lr: 0.0001,
            batch_size: 64,
            momentum: 0.0,
            weight_decay: 0.0,
            shuffle: true,
            seed: 0,
        }
    }
}

fn lookup<'a>(inputs: &'a HashMap<String, Array3<f64>>, id: &str) -> Result<&'a Array3<f64>> {
    inputs
        .get(id)
        .ok_or_else(|| AuditError::DanglingReference(format!("patch `{id}` has no pixels")))
}

/// Embeds every patch referenced by `pairs`.
pub fn embed_all(
    embedder: &Embedder,
    ids: &[&str],
    inputs: &HashMap<String, Array3<f64>>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let vectors = ids
        .par_iter()
        .map(|id| Ok((id.to_string(), embedder.embed(lookup(inputs, id)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(vectors.into_iter().collect())
}

/// Mean pair loss of `pairs` under `embedder`.
pub fn mean_pair_loss(
    embedder: &Embedder,
    pairs: &[PatchPair],
    inputs: &HashMap<String, Array3<f64>>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AuditError::Validation("no pairs".into()));
    }
    let mut ids: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.patch_a.as_str(), p.patch_b.as_str()])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let vecs = embed_all(embedder, &ids, inputs)?;
    let total: f64 = pairs
        .iter()
        .map(|p| loss_from_dot(dot(&vecs[&p.patch_a], &vecs[&p.patch_b]), p.same_neuron))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Mean inner product over same-neuron and different-neuron pairs.
pub fn mean_pair_dots(
    embedder: &Embedder,
    pairs: &[PatchPair],
    inputs: &HashMap<String, Array3<f64>>,
) -> Result<(f64, f64)> {
    let mut ids: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.patch_a.as_str(), p.patch_b.as_str()])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let vecs = embed_all(embedder, &ids, inputs)?;
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for p in pairs {
        let d = dot(&vecs[&p.patch_a], &vecs[&p.patch_b]);
        if p.same_neuron {
            pos += d;
            np += 1;
        } else {
            neg += d;
            nn += 1;
        }
    }
    Ok((pos / np.max(1) as f64, neg / nn.max(1) as f64))
}

/// Minimises the mean pair loss with mini-batch SGD. Returns the loss curve:
/// entry 0 is the initial mean loss, entry `e` the mean loss after epoch `e`.
pub fn train_embedder(
    embedder: &mut Embedder,
    pairs: &[PatchPair],
    inputs: &HashMap<String, Array3<f64>>,
    config: &EmbedTrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(AuditError::Validation("no training pairs".into()));
    }
    if config.batch_size == 0 {
        return Err(AuditError::Config("batch_size must be positive".into()));
    }
    let mut curve = vec![mean_pair_loss(embedder, pairs, inputs)?];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut sgd = Sgd::new(config.lr, config.momentum);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(config.batch_size) {
            let model = &*embedder;
            // One forward and one backward pass per distinct patch in the batch.
            let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in batch {
                for id in [pairs[i].patch_a.as_str(), pairs[i].patch_b.as_str()] {
                    let next = slot.len();
                    slot.entry(id).or_insert(next);
                }
            }
            let mut ids: Vec<&str> = vec![""; slot.len()];
            for (id, &k) in &slot {
                ids[k] = id;
            }
            let traces = ids
                .par_iter()
                .map(|id| Ok(model.run(lookup(inputs, id)?)))
                .collect::<Result<Vec<_>>>()?;
            let dim = model.dim();
            let mut g_unit = vec![vec![0.0; dim]; ids.len()];
            for &i in batch {
                let p = &pairs[i];
                let (a, b) = (slot[p.patch_a.as_str()], slot[p.patch_b.as_str()]);
                let slope = loss_slope(dot(&traces[a].unit, &traces[b].unit), p.same_neuron);
                if slope == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    g_unit[a][d] += slope * traces[b].unit[d];
                    g_unit[b][d] += slope * traces[a].unit[d];
                }
            }
            let per_patch: Vec<EmbedGrads> = traces
                .par_iter()
                .zip(&g_unit)
                .map(|(t, g)| {
                    let mut grads = EmbedGrads::zeros(model);
                    if g.iter().any(|v| *v != 0.0) {
                        model.backward(t, g, &mut grads);
                    }
                    grads
                })
                .collect();
            let mut total = EmbedGrads::zeros(embedder);
            for g in &per_patch {
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            if config.weight_decay > 0.0 {
                for (g, s) in total.stages.iter_mut().zip(&embedder.stages) {
                    for (gv, w) in g.weight.iter_mut().zip(&s.conv.weight) {
                        *gv += config.weight_decay * w;
                    }
                }
            }
            if !total.is_finite() {
                return Err(AuditError::Diverged {
                    epoch,
                    detail: "non-finite embedder gradient".into(),
                });
            }
            let mut grads: Vec<&ParamGrad> = total.stages.iter().collect();
            grads.push(&total.projection);
            let mut params: Vec<(&mut Vec<f64>, &mut Vec<f64>)> = embedder
                .stages
                .iter_mut()
                .map(|s| (&mut s.conv.weight, &mut s.conv.bias))
                .collect();
            params.push((&mut embedder.projection.weight, &mut embedder.projection.bias));
            sgd.step(params, &grads);
        }
        let loss = mean_pair_loss(embedder, pairs, inputs)?;
        if !loss.is_finite() {
            return Err(AuditError::Diverged {
                epoch,
                detail: format!("mean pair loss {loss}"),
            });
        }
        log::info!("embedder epoch {epoch}: loss {loss:.5}");
        curve.push(loss);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronCluster {
    pub cluster_id: usize,
    pub member_neurons: Vec<NeuronRef>,
    pub exemplar_patch_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronClusterConfig {
    pub threshold: f64,
    pub exemplars_per_cluster: usize,
    pub seed: u64,
}

impl Default for NeuronClusterConfig {
    fn default() -> Self {
        NeuronClusterConfig {
            threshold: 0.9,
            exemplars_per_cluster: 10,
            seed: 0,
        }
    }
}

/// Neurons ordered by descending score, then layer position, then channel.
pub fn clustering_order(scored: &[(NeuronRef, f64)], layer_order: &[String]) -> Vec<NeuronRef> {
    let rank = |l: &str| layer_order.iter().position(|x| x == l).unwrap_or(usize::MAX);
    let mut v: Vec<&(NeuronRef, f64)> = scored.iter().collect();
    v.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(rank(&a.0.layer).cmp(&rank(&b.0.layer)))
            .then(a.0.channel.cmp(&b.0.channel))
    });
    v.into_iter().map(|(n, _)| n.clone()).collect()
}

fn mean_cross_dot(a: &[&Vec<f64>], b: &[&Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += dot(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Incremental clustering in `order`. A neuron joins the cluster with the
/// highest mean inner product between its patch vectors and the cluster's
/// exemplars when that mean exceeds the threshold (ties to the earlier
/// cluster); otherwise it starts a new cluster. Neurons without patches are
/// left unclustered.
pub fn assign_clusters(
    concepts: &[NeuronConcept],
    vectors: &BTreeMap<String, Vec<f64>>,
    order: &[NeuronRef],
    config: &NeuronClusterConfig,
) -> Result<Vec<NeuronCluster>> {
    let by_neuron: HashMap<&NeuronRef, &NeuronConcept> =
        concepts.iter().map(|c| (&c.neuron, c)).collect();
    let vec_of = |id: &str| {
        vectors
            .get(id)
            .ok_or_else(|| AuditError::DanglingReference(format!("patch `{id}` has no embedding")))
    };
    struct Building {
        cluster: NeuronCluster,
        pool: Vec<String>,
    }
    let mut clusters: Vec<Building> = Vec::new();
    for neuron in order {
        let Some(concept) = by_neuron.get(neuron) else {
            continue;
        };
        if concept.patches.is_empty() {
            continue;
        }
        if clusters.iter().any(|c| c.cluster.member_neurons.contains(neuron)) {
            continue;
        }
        let own: Vec<&Vec<f64>> = concept
            .patches
            .iter()
            .map(|p| vec_of(&p.patch_id))
            .collect::<Result<_>>()?;
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in clusters.iter().enumerate() {
            let ex: Vec<&Vec<f64>> = c
                .cluster
                .exemplar_patch_ids
                .iter()
                .map(|id| vec_of(id))
                .collect::<Result<_>>()?;
            let sim = mean_cross_dot(&own, &ex);
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        let patch_ids: Vec<String> = concept.patches.iter().map(|p| p.patch_id.clone()).collect();
        match best {
            Some((i, sim)) if sim > config.threshold => {
                let c = &mut clusters[i];
                c.cluster.member_neurons.push(neuron.clone());
                for id in patch_ids {
                    if !c.pool.contains(&id) {
                        c.pool.push(id);
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(
                    config.seed
                        ^ ((c.cluster.cluster_id as u64) << 32)
                        ^ c.cluster.member_neurons.len() as u64,
                );
                c.cluster.exemplar_patch_ids = c
                    .pool
                    .choose_multiple(&mut rng, config.exemplars_per_cluster)
                    .cloned()
                    .collect();
            }
            _ => {
                let id = clusters.len();
                let mut pool = Vec::new();
                for p in patch_ids {
                    if !pool.contains(&p) {
                        pool.push(p);
                    }
                }
                clusters.push(Building {
                    cluster: NeuronCluster {
                        cluster_id: id,
                        member_neurons: vec![neuron.clone()],
                        exemplar_patch_ids: pool
                            .iter()
                            .take(config.exemplars_per_cluster)
                            .cloned()
                            .collect(),
                    },
                    pool,
                });
            }
        }
    }
    Ok(clusters.into_iter().map(|b| b.cluster).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClusterMembership {
    Clustered {
        cluster_id: usize,
        co_members: Vec<NeuronRef>,
    },
    NotClustered,
}

pub fn cluster_of(clusters: &[NeuronCluster], neuron: &NeuronRef) -> ClusterMembership {
    clusters
        .iter()
        .find(|c| c.member_neurons.contains(neuron))
        .map_or(ClusterMembership::NotClustered, |c| ClusterMembership::Clustered {
            cluster_id: c.cluster_id,
            co_members: c
                .member_neurons
                .iter()
                .filter(|m| *m != neuron)
                .cloned()
                .collect(),
        })
}
