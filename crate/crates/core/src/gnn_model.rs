//! Heterogeneous attention GNN over augmented factor graphs.
//!
//! Factor nodes and variable nodes have their own layer parameters. Variable
//! nodes receive messages from factors and from neighbouring variables
//! through separate message MLPs, with one attention softmax over both sets.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{AugmentedFactorGraph, DEFAULT_ENCODING_WIDTH, FACTOR_FEATURES};
use crate::neural::{glorot_uniform, BatchNormState, Checkpoint, Mode, NodeId, ParamId, ParamStore, Tape};
use crate::wls_se::StateVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub embedding_size: usize,
    pub num_layers: usize,
    pub encoding_width: usize,
    pub leaky_relu_slope: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            embedding_size: 64,
            num_layers: 4,
            encoding_width: DEFAULT_ENCODING_WIDTH,
            leaky_relu_slope: 0.2,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_size == 0 {
            return Err(Error::Invalid("gnn_model: embedding_size must be at least 1".into()));
        }
        if self.encoding_width == 0 {
            return Err(Error::Invalid("gnn_model: encoding_width must be at least 1".into()));
        }
        if !(self.leaky_relu_slope.is_finite() && self.leaky_relu_slope >= 0.0) {
            return Err(Error::Invalid("gnn_model: leaky_relu_slope must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Two-layer message function `W2·ReLU(W1·[h_s; h_r] + b1) + b2`, with
/// `W1` kept as its sender and receiver halves.
#[derive(Debug, Clone, Copy)]
pub struct MessageMlp {
    pub w1_send: ParamId,
    pub w1_recv: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Score `leaky_relu(a_h·h_j + a_m·m_i)`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub a_h: ParamId,
    pub a_m: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FactorLayer {
    pub msg_vf: MessageMlp,
    pub attn: Attention,
    pub update: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct VariableLayer {
    pub msg_fv: MessageMlp,
    pub msg_vv: MessageMlp,
    pub attn: Attention,
    pub update: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub hidden: Dense,
    pub out: Dense,
}

/// Running means for the factor and variable batchnorm after one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorms {
    pub factor: BatchNormState,
    pub variable: BatchNormState,
}

#[derive(Debug, Clone)]
pub struct GnnModel {
    pub config: GnnConfig,
    pub params: ParamStore,
    pub var_encoder: Dense,
    pub fac_encoder: Dense,
    pub layers: Vec<(FactorLayer, VariableLayer)>,
    pub head: Head,
    pub norms: Vec<LayerNorms>,
}

/// Trainable tensors are owned by the model.
pub type GnnParameters = GnnModel;

/// Several graphs merged into one disconnected graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n_var: usize,
    pub n_fac: usize,
    /// Start of each graph's variable block, plus the total at the end.
    pub var_offsets: Vec<usize>,
    pub var_features: Array2<f64>,
    pub fac_features: Array2<f64>,
    pub fv_fac: Arc<[usize]>,
    pub fv_var: Arc<[usize]>,
    /// Directed variable edges, both orientations of every augmentation edge.
    pub vv_src: Arc<[usize]>,
    pub vv_dst: Arc<[usize]>,
    /// Receiving variable of every incoming edge, f→v edges first.
    pub var_in_group: Arc<[usize]>,
}

impl GraphBatch {
    pub fn new(graphs: &[&AugmentedFactorGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Invalid("gnn_model: empty graph batch".into()))?;
        let width = first.encoding_width;
        let n_var: usize = graphs.iter().map(|g| g.variables.len()).sum();
        let n_fac: usize = graphs.iter().map(|g| g.factors.len()).sum();
        let mut var_features = Array2::zeros((n_var, width));
        let mut fac_features = Array2::zeros((n_fac, FACTOR_FEATURES));
        let (mut fv_fac, mut fv_var, mut vv_src, mut vv_dst) = (vec![], vec![], vec![], vec![]);
        let mut var_offsets = Vec::with_capacity(graphs.len() + 1);
        let (mut vo, mut fo) = (0, 0);
        for g in graphs {
            if g.encoding_width != width {
                return Err(Error::ShapeMismatch {
                    context: "gnn_model::GraphBatch",
                    left: vec![width],
                    right: vec![g.encoding_width],
                });
            }
            var_offsets.push(vo);
            for (i, v) in g.variables.iter().enumerate() {
                var_features.row_mut(vo + i).assign(&ndarray::ArrayView1::from(&v.feature[..]));
            }
            for (i, f) in g.factors.iter().enumerate() {
                fac_features.row_mut(fo + i).assign(&ndarray::ArrayView1::from(&f.feature[..]));
            }
            for &(f, v) in &g.fv_edges {
                fv_fac.push(fo + f);
                fv_var.push(vo + v);
            }
            for &(a, b) in &g.vv_edges {
                vv_src.extend([vo + a, vo + b]);
                vv_dst.extend([vo + b, vo + a]);
            }
            vo += g.variables.len();
            fo += g.factors.len();
        }
        var_offsets.push(vo);
        let var_in_group: Vec<usize> = fv_var.iter().chain(vv_dst.iter()).copied().collect();
        Ok(GraphBatch {
            n_var,
            n_fac,
            var_offsets,
            var_features,
            fac_features,
            fv_fac: fv_fac.into(),
            fv_var: fv_var.into(),
            vv_src: vv_src.into(),
            vv_dst: vv_dst.into(),
            var_in_group: var_in_group.into(),
        })
    }
}

/// Batch means of the factor and variable embeddings seen by each layer's
/// normalization in Train mode.
pub type BatchMeans = Vec<(Array1<f64>, Array1<f64>)>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl GnnModel {
    pub fn new(config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = config.embedding_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut weight = |params: &mut ParamStore, name: String, rows: usize, cols: usize| {
            params.add(name, glorot_uniform(rows, cols, &mut rng))
        };
        let bias = |params: &mut ParamStore, name: String, cols: usize| params.add(name, Array2::zeros((1, cols)));
        macro_rules! dense {
            ($name:expr, $fan_in:expr, $fan_out:expr) => {{
                let name = $name;
                Dense {
                    w: weight(&mut params, format!("{name}.w"), $fan_in, $fan_out),
                    b: bias(&mut params, format!("{name}.b"), $fan_out),
                }
            }};
        }
        macro_rules! mlp {
            ($name:expr) => {{
                let name = $name;
                MessageMlp {
                    w1_send: weight(&mut params, format!("{name}.w1_send"), s, s),
                    w1_recv: weight(&mut params, format!("{name}.w1_recv"), s, s),
                    b1: bias(&mut params, format!("{name}.b1"), s),
                    w2: weight(&mut params, format!("{name}.w2"), s, s),
                    b2: bias(&mut params, format!("{name}.b2"), s),
                }
            }};
        }
        macro_rules! attention {
            ($name:expr) => {{
                let name = $name;
                Attention {
                    a_h: weight(&mut params, format!("{name}.a_h"), s, 1),
                    a_m: weight(&mut params, format!("{name}.a_m"), s, 1),
                }
            }};
        }
        let var_encoder = dense!("var_encoder", config.encoding_width, s);
        let fac_encoder = dense!("fac_encoder", FACTOR_FEATURES, s);
        let mut layers = Vec::with_capacity(config.num_layers);
        for k in 0..config.num_layers {
            let factor = FactorLayer {
                msg_vf: mlp!(format!("layer{k}.factor.msg_vf")),
                attn: attention!(format!("layer{k}.factor.attn")),
                update: dense!(format!("layer{k}.factor.update"), 2 * s, s),
            };
            let variable = VariableLayer {
                msg_fv: mlp!(format!("layer{k}.variable.msg_fv")),
                msg_vv: mlp!(format!("layer{k}.variable.msg_vv")),
                attn: attention!(format!("layer{k}.variable.attn")),
                update: dense!(format!("layer{k}.variable.update"), 2 * s, s),
            };
            layers.push((factor, variable));
        }
        let head = Head {
            hidden: dense!("pred.hidden", s, s),
            out: dense!("pred.out", s, 1),
        };
        let norms = (0..config.num_layers)
            .map(|_| LayerNorms {
                factor: BatchNormState::new(s),
                variable: BatchNormState::new(s),
            })
            .collect();
        Ok(GnnModel {
            config,
            params,
            var_encoder,
            fac_encoder,
            layers,
            head,
            norms,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params.get(id).value
    }

    /// One message `m_{i,j}` from sender embedding `h_sender` to receiver
    /// embedding `h_receiver`.
    pub fn message(&self, mlp: &MessageMlp, h_sender: &[f64], h_receiver: &[f64]) -> Vec<f64> {
        let (w1s, w1r, b1) = (self.value(mlp.w1_send), self.value(mlp.w1_recv), self.value(mlp.b1));
        let (w2, b2) = (self.value(mlp.w2), self.value(mlp.b2));
        let s = self.config.embedding_size;
        let hidden: Vec<f64> = (0..s)
            .map(|c| {
                let mut acc = b1[[0, c]];
                for r in 0..s {
                    acc += h_sender[r] * w1s[[r, c]] + h_receiver[r] * w1r[[r, c]];
                }
                acc.max(0.0)
            })
            .collect();
        (0..s)
            .map(|c| b2[[0, c]] + (0..s).map(|r| hidden[r] * w2[[r, c]]).sum::<f64>())
            .collect()
    }

    /// Attention-weighted sum of the messages arriving at node `j`, with the
    /// attention coefficients. No messages give a zero vector.
    pub fn attention_aggregate(&self, attn: &Attention, messages: &[Vec<f64>], h_j: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.config.embedding_size;
        if messages.is_empty() {
            return (vec![0.0; s], vec![]);
        }
        let a_h = self.value(attn.a_h).as_slice().expect("contiguous").to_vec();
        let a_m = self.value(attn.a_m).as_slice().expect("contiguous").to_vec();
        let base = dot(&a_h, h_j);
        let scores: Vec<f64> = messages
            .iter()
            .map(|m| leaky(base + dot(&a_m, m), self.config.leaky_relu_slope))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|e| (e - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let alpha: Vec<f64> = exp.iter().map(|e| e / total).collect();
        let mut out = vec![0.0; s];
        for (m, a) in messages.iter().zip(&alpha) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += a * v;
            }
        }
        (out, alpha)
    }

    fn param(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.param(&self.params, id)
    }

    fn affine(&self, tape: &mut Tape, x: NodeId, d: &Dense) -> Result<NodeId> {
        let w = self.param(tape, d.w);
        let b = self.param(tape, d.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Per-edge hidden activations `ReLU(W1s·h_s + W1r·h_r + b1)` and the
    /// attention terms `a_m·m_i` they induce.
    #[allow(clippy::too_many_arguments)]
    fn edge_hidden(
        &self,
        tape: &mut Tape,
        mlp: &MessageMlp,
        attn: &Attention,
        h_send: NodeId,
        h_recv: NodeId,
        send: &Arc<[usize]>,
        recv: &Arc<[usize]>,
    ) -> Result<(NodeId, NodeId)> {
        let w1s = self.param(tape, mlp.w1_send);
        let w1r = self.param(tape, mlp.w1_recv);
        let b1 = self.param(tape, mlp.b1);
        let ps = tape.matmul(h_send, w1s)?;
        let pr = tape.matmul(h_recv, w1r)?;
        let hidden = tape.edge_relu(ps, pr, b1, send.clone(), recv.clone())?;
        // a_m·(W2 r + b2) = (W2 a_m)·r + b2·a_m
        let w2 = self.param(tape, mlp.w2);
        let b2 = self.param(tape, mlp.b2);
        let a_m = self.param(tape, attn.a_m);
        let w2a = tape.matmul(w2, a_m)?;
        let b2a = tape.matmul(b2, a_m)?;
        let score = tape.matmul(hidden, w2a)?;
        let score = tape.add_row(score, b2a)?;
        Ok((hidden, score))
    }

    /// `Σ α_i (W2 r_i + b2)` per receiver, computed as `(Σ α r)·W2 + (Σ α)·b2`.
    fn aggregate(
        &self,
        tape: &mut Tape,
        mlp: &MessageMlp,
        hidden: NodeId,
        alpha: NodeId,
        recv: &Arc<[usize]>,
        n_recv: usize,
    ) -> Result<NodeId> {
        let sum_r = tape.weighted_scatter(hidden, alpha, recv.clone(), n_recv)?;
        let sum_a = tape.scatter_add_rows(alpha, recv.clone(), n_recv)?;
        let w2 = self.param(tape, mlp.w2);
        let b2 = self.param(tape, mlp.b2);
        let a = tape.matmul(sum_r, w2)?;
        let b = tape.matmul(sum_a, b2)?;
        tape.add(a, b)
    }

    fn update(&self, tape: &mut Tape, h: NodeId, agg: NodeId, d: &Dense) -> Result<NodeId> {
        let cat = tape.concat_cols(&[h, agg])?;
        let y = self.affine(tape, cat, d)?;
        Ok(tape.relu(y))
    }

    fn normalize(
        &self,
        tape: &mut Tape,
        x: NodeId,
        bn: &BatchNormState,
        mode: Mode,
    ) -> Result<(NodeId, Option<Array1<f64>>)> {
        match mode {
            Mode::Train => {
                let (y, mean) = tape.center_rows(x)?;
                Ok((y, Some(mean)))
            }
            Mode::Eval => Ok((bn.apply_eval(tape, x)?, None)),
        }
    }

    /// Encoders, K synchronous layers and the prediction head. Returns the
    /// `n_var × 1` prediction node and, in Train mode, the batch means used
    /// by each normalization.
    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch, mode: Mode) -> Result<(NodeId, BatchMeans)> {
        if batch.var_features.ncols() != self.config.encoding_width {
            return Err(Error::EncodingWidth {
                width: self.config.encoding_width,
                count: batch.var_features.ncols(),
            });
        }
        let slope = self.config.leaky_relu_slope;
        let xv = tape.input(batch.var_features.clone());
        let xf = tape.input(batch.fac_features.clone());
        let hv = self.affine(tape, xv, &self.var_encoder)?;
        let mut hv = tape.relu(hv);
        let hf = self.affine(tape, xf, &self.fac_encoder)?;
        let mut hf = tape.relu(hf);
        let mut means = Vec::new();
        let has_vv = !batch.vv_src.is_empty();

        for ((fl, vl), bn) in self.layers.iter().zip(&self.norms) {
            // factor nodes: messages from variables
            let (hid, sc) = self.edge_hidden(tape, &fl.msg_vf, &fl.attn, hv, hf, &batch.fv_var, &batch.fv_fac)?;
            let a_h = self.param(tape, fl.attn.a_h);
            let node_sc = tape.matmul(hf, a_h)?;
            let node_sc = tape.gather_rows(node_sc, batch.fv_fac.clone())?;
            let sc = tape.add(sc, node_sc)?;
            let sc = tape.leaky_relu(sc, slope);
            let alpha = tape.segment_softmax(sc, batch.fv_fac.clone())?;
            let agg_f = self.aggregate(tape, &fl.msg_vf, hid, alpha, &batch.fv_fac, batch.n_fac)?;
            let new_f = self.update(tape, hf, agg_f, &fl.update)?;

            // variable nodes: messages from factors and from variables
            let (hid_f, sc_f) = self.edge_hidden(tape, &vl.msg_fv, &vl.attn, hf, hv, &batch.fv_fac, &batch.fv_var)?;
            let sc_all = if has_vv {
                let (hid_v, sc_v) =
                    self.edge_hidden(tape, &vl.msg_vv, &vl.attn, hv, hv, &batch.vv_src, &batch.vv_dst)?;
                (tape.concat_rows(&[sc_f, sc_v])?, Some(hid_v))
            } else {
                (sc_f, None)
            };
            let (sc, hid_v) = sc_all;
            let a_h = self.param(tape, vl.attn.a_h);
            let node_sc = tape.matmul(hv, a_h)?;
            let node_sc = tape.gather_rows(node_sc, batch.var_in_group.clone())?;
            let sc = tape.add(sc, node_sc)?;
            let sc = tape.leaky_relu(sc, slope);
            let alpha = tape.segment_softmax(sc, batch.var_in_group.clone())?;
            let n_fv = batch.fv_var.len();
            let alpha_f = tape.slice_rows(alpha, 0, n_fv)?;
            let mut agg_v = self.aggregate(tape, &vl.msg_fv, hid_f, alpha_f, &batch.fv_var, batch.n_var)?;
            if let Some(hid_v) = hid_v {
                let alpha_v = tape.slice_rows(alpha, n_fv, batch.vv_dst.len())?;
                let part = self.aggregate(tape, &vl.msg_vv, hid_v, alpha_v, &batch.vv_dst, batch.n_var)?;
                agg_v = tape.add(agg_v, part)?;
            }
            let new_v = self.update(tape, hv, agg_v, &vl.update)?;

            let (nf, mf) = self.normalize(tape, new_f, &bn.factor, mode)?;
            let (nv, mv) = self.normalize(tape, new_v, &bn.variable, mode)?;
            if let (Some(mf), Some(mv)) = (mf, mv) {
                means.push((mf, mv));
            }
            hf = nf;
            hv = nv;
        }

        let y = self.affine(tape, hv, &self.head.hidden)?;
        let y = tape.relu(y);
        let y = self.affine(tape, y, &self.head.out)?;
        Ok((y, means))
    }

    /// Fold Train-mode batch means into the running means.
    pub fn update_running_means(&mut self, means: &BatchMeans) {
        for (bn, (mf, mv)) in self.norms.iter_mut().zip(means) {
            for (state, mean) in [(&mut bn.factor, mf), (&mut bn.variable, mv)] {
                state.running_mean *= 1.0 - state.momentum;
                state.running_mean.scaled_add(state.momentum, mean);
            }
        }
    }

    /// Eval-mode predictions for a batch, one state vector per graph.
    pub fn predict_batch(&self, graphs: &[&AugmentedFactorGraph]) -> Result<Vec<StateVector>> {
        let batch = GraphBatch::new(graphs)?;
        let mut tape = Tape::new();
        let (y, _) = self.forward(&mut tape, &batch, Mode::Eval)?;
        let out = tape.value(y);
        Ok(batch
            .var_offsets
            .windows(2)
            .map(|w| StateVector((w[0]..w[1]).map(|i| out[[i, 0]]).collect()))
            .collect())
    }

    pub fn predict(&self, g: &AugmentedFactorGraph) -> Result<StateVector> {
        Ok(self.predict_batch(&[g])?.remove(0))
    }

    /// Predictions for many graphs, in minibatches spread over threads.
    pub fn predict_many(&self, graphs: &[AugmentedFactorGraph], batch_size: usize) -> Result<Vec<StateVector>> {
        let chunks: Vec<Vec<StateVector>> = graphs
            .par_chunks(batch_size.max(1))
            .map(|chunk| self.predict_batch(&chunk.iter().collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn to_checkpoint(&self, system_digest: Option<String>) -> Result<Checkpoint> {
        let mut batchnorm = Vec::new();
        for (k, bn) in self.norms.iter().enumerate() {
            batchnorm.push((format!("layer{k}.factor.bn"), bn.factor.clone()));
            batchnorm.push((format!("layer{k}.variable.bn"), bn.variable.clone()));
        }
        Ok(Checkpoint {
            config: serde_json::to_value(self.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
            system_digest,
            params: self.params.clone(),
            batchnorm,
        })
    }

    /// Rebuild a model from a checkpoint, checking every name and shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: GnnConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut model = GnnModel::new(config, 0)?;
        if model.params.len() != ck.params.len() || model.norms.len() * 2 != ck.batchnorm.len() {
            return Err(Error::Checkpoint("tensor count does not match the configuration".into()));
        }
        for (mine, theirs) in model.params.params.iter_mut().zip(&ck.params.params) {
            if mine.name != theirs.name || mine.shape() != theirs.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.shape(),
                    mine.name,
                    mine.shape()
                )));
            }
            *mine = theirs.clone();
        }
        for (k, bn) in model.norms.iter_mut().enumerate() {
            for (state, (name, saved)) in [&mut bn.factor, &mut bn.variable].into_iter().zip(&ck.batchnorm[2 * k..2 * k + 2]) {
                if saved.running_mean.len() != state.running_mean.len() {
                    return Err(Error::Checkpoint(format!("batchnorm {name} has the wrong width")));
                }
                *state = saved.clone();
            }
        }
        Ok(model)
    }
}

/// Mean over all entries of the squared difference.
pub fn loss(pred: &StateVector, label: &StateVector) -> Result<f64> {
    pred.mse(label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{binary_encoding, build_graph, Component, FactorNode, VariableNode};
    use crate::grid_model::{PmuPlacement, PowerSystem};
    use crate::measurements::{add_noise, true_phasors, MeasurementSet};
    use crate::neural::gradcheck::max_relative_error;
    use crate::powerflow::{solve_power_flow, Injections};
    use crate::wls_se::build_model;
    use rand::Rng;

    fn small_config() -> GnnConfig {
        GnnConfig {
            embedding_size: 6,
            num_layers: 2,
            ..GnnConfig::default()
        }
    }

    pub(crate) fn system_graph(name: &str, seed: u64) -> AugmentedFactorGraph {
        let sys = PowerSystem::bundled(name).unwrap().unwrap();
        let op = solve_power_flow(&sys, &Injections::nominal(&sys), 1e-10, 20).unwrap();
        let placement = PmuPlacement::maximal(&sys);
        let phasors = add_noise(&true_phasors(&sys, &op, &placement), 1e-2, 0.5, seed);
        let meas = MeasurementSet::from_polar(&phasors);
        let model = build_model(&sys, &placement, &meas).unwrap();
        build_graph(&model, &meas, sys.buses.len(), DEFAULT_ENCODING_WIDTH).unwrap()
    }

    /// Chain of `n` variables, each joined to the next by a two-variable
    /// factor, plus one single-variable factor per variable.
    fn chain_graph(n: usize) -> AugmentedFactorGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let variables = (0..n)
            .map(|index| VariableNode {
                index,
                feature: binary_encoding(index, DEFAULT_ENCODING_WIDTH).unwrap(),
            })
            .collect();
        let mut factors = Vec::new();
        let mut fv_edges = Vec::new();
        let mut vv_edges = Vec::new();
        let mut factor = |vars: &[usize], factors: &mut Vec<FactorNode>, rng: &mut ChaCha8Rng| {
            let index = factors.len();
            let mut feature = [0.0; FACTOR_FEATURES];
            feature[0] = rng.random_range(-1.0..1.0);
            feature[1] = rng.random_range(0.1..1.0);
            feature[3 + vars.len()] = 1.0;
            factors.push(FactorNode {
                index,
                feature,
                phasor: index,
                component: Component::Re,
            });
            for &v in vars {
                fv_edges.push((index, v));
            }
        };
        for v in 0..n {
            factor(&[v], &mut factors, &mut rng);
            if v + 1 < n {
                factor(&[v, v + 1], &mut factors, &mut rng);
                vv_edges.push((v, v + 1));
            }
        }
        AugmentedFactorGraph {
            n_buses: n / 2,
            m: factors.len(),
            encoding_width: DEFAULT_ENCODING_WIDTH,
            variables,
            factors,
            fv_edges,
            vv_edges,
        }
    }

    /// Give the running means non-trivial values so Eval mode is exercised.
    fn perturb_norms(model: &mut GnnModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bn in &mut model.norms {
            for state in [&mut bn.factor, &mut bn.variable] {
                state.running_mean.mapv_inplace(|_| rng.random_range(-0.2..0.2));
            }
        }
    }

    /// Eval-mode forward pass written with the per-edge `message` and
    /// `attention_aggregate` functions.
    fn reference_predict(model: &GnnModel, g: &AugmentedFactorGraph) -> Vec<f64> {
        let s = model.config.embedding_size;
        let dense = |d: &Dense, x: &[f64], relu: bool| -> Vec<f64> {
            let (w, b) = (model.value(d.w), model.value(d.b));
            (0..w.ncols())
                .map(|c| {
                    let v = b[[0, c]] + x.iter().enumerate().map(|(r, xi)| xi * w[[r, c]]).sum::<f64>();
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let mut hv: Vec<Vec<f64>> = g.variables.iter().map(|v| dense(&model.var_encoder, &v.feature, true)).collect();
        let mut hf: Vec<Vec<f64>> = g.factors.iter().map(|f| dense(&model.fac_encoder, &f.feature, true)).collect();
        for ((fl, vl), bn) in model.layers.iter().zip(&model.norms) {
            let new_f: Vec<Vec<f64>> = (0..hf.len())
                .map(|f| {
                    let msgs: Vec<Vec<f64>> = g
                        .fv_edges
                        .iter()
                        .filter(|e| e.0 == f)
                        .map(|e| model.message(&fl.msg_vf, &hv[e.1], &hf[f]))
                        .collect();
                    let (agg, _) = model.attention_aggregate(&fl.attn, &msgs, &hf[f]);
                    let cat: Vec<f64> = hf[f].iter().chain(&agg).copied().collect();
                    let out = dense(&fl.update, &cat, true);
                    out.iter().zip(bn.factor.running_mean.iter()).map(|(a, m)| a - m).collect()
                })
                .collect();
            let new_v: Vec<Vec<f64>> = (0..hv.len())
                .map(|v| {
                    let mut msgs: Vec<Vec<f64>> = g
                        .fv_edges
                        .iter()
                        .filter(|e| e.1 == v)
                        .map(|e| model.message(&vl.msg_fv, &hf[e.0], &hv[v]))
                        .collect();
                    for &(a, b) in &g.vv_edges {
                        if a == v {
                            msgs.push(model.message(&vl.msg_vv, &hv[b], &hv[v]));
                        } else if b == v {
                            msgs.push(model.message(&vl.msg_vv, &hv[a], &hv[v]));
                        }
                    }
                    let (agg, _) = model.attention_aggregate(&vl.attn, &msgs, &hv[v]);
                    let cat: Vec<f64> = hv[v].iter().chain(&agg).copied().collect();
                    let out = dense(&vl.update, &cat, true);
                    out.iter().zip(bn.variable.running_mean.iter()).map(|(a, m)| a - m).collect()
                })
                .collect();
            hf = new_f;
            hv = new_v;
        }
        assert!(hv.iter().all(|h| h.len() == s));
        hv.iter()
            .map(|h| dense(&model.head.out, &dense(&model.head.hidden, h, true), false)[0])
            .collect()
    }

    #[test]
    fn batched_forward_matches_per_edge_reference() {
        let mut model = GnnModel::new(small_config(), 5).unwrap();
        perturb_norms(&mut model, 6);
        for g in [chain_graph(7), system_graph("two_bus", 1), system_graph("ieee14", 2)] {
            let fast = model.predict(&g).unwrap();
            let slow = reference_predict(&model, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn encoder_shapes_and_zero_features() {
        let model = GnnModel::new(GnnConfig::default(), 1).unwrap();
        let g = system_graph("ieee30", 3);
        let batch = GraphBatch::new(&[&g]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(batch.var_features.clone());
        let hv = model.affine(&mut tape, xv, &model.var_encoder).unwrap();
        let xf = tape.input(batch.fac_features.clone());
        let hf = model.affine(&mut tape, xf, &model.fac_encoder).unwrap();
        assert_eq!(tape.value(hv).dim(), (60, 64));
        assert_eq!(tape.value(hf).dim(), (224, 64));

        let zero = tape.input(Array2::zeros((2, DEFAULT_ENCODING_WIDTH)));
        let h0 = model.affine(&mut tape, zero, &model.var_encoder).unwrap();
        let h0 = tape.relu(h0);
        let bias = model.value(model.var_encoder.b).mapv(|b| b.max(0.0));
        assert_eq!(tape.value(h0).row(0), bias.row(0));
        assert_eq!(tape.value(h0).row(0), tape.value(h0).row(1));
    }

    #[test]
    fn message_properties() {
        let model = GnnModel::new(small_config(), 7).unwrap();
        let mlp = model.layers[0].1.msg_vv;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut vec6 = || (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, b, r) = (vec6(), vec6(), vec6());
        assert_eq!(model.message(&mlp, &a, &r), model.message(&mlp, &a, &r));
        assert_ne!(model.message(&mlp, &a, &r), model.message(&mlp, &b, &r));
        assert_eq!(model.message(&mlp, &a, &r).len(), 6);
    }

    #[test]
    fn message_gradient_matches_finite_differences() {
        let mut model = GnnModel::new(small_config(), 9).unwrap();
        let mlp = model.layers[0].0.msg_vf;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let hs = Array2::from_shape_simple_fn((3, 6), || rng.random_range(-1.0..1.0));
        let hr = Array2::from_shape_simple_fn((2, 6), || rng.random_range(-1.0..1.0));
        let target = Arc::new(Array2::from_shape_simple_fn((3, 6), || rng.random_range(-1.0..1.0)));
        let send: Arc<[usize]> = Arc::from(vec![0, 1, 2]);
        let recv: Arc<[usize]> = Arc::from(vec![0, 1, 1]);
        let mut store = std::mem::take(&mut model.params);
        let (err, _) = max_relative_error(&mut store, 200, 11, |s| {
            let mut t = Tape::new();
            let p = |t: &mut Tape, id| t.param(s, id);
            let (xs, xr) = (t.input(hs.clone()), t.input(hr.clone()));
            let (w1s, w1r, b1, w2, b2) = (p(&mut t, mlp.w1_send), p(&mut t, mlp.w1_recv), p(&mut t, mlp.b1), p(&mut t, mlp.w2), p(&mut t, mlp.b2));
            let a = t.matmul(xs, w1s).unwrap();
            let b = t.matmul(xr, w1r).unwrap();
            let a = t.gather_rows(a, send.clone()).unwrap();
            let b = t.gather_rows(b, recv.clone()).unwrap();
            let h = t.add(a, b).unwrap();
            let h = t.add_row(h, b1).unwrap();
            let h = t.relu(h);
            let m = t.matmul(h, w2).unwrap();
            let m = t.add_row(m, b2).unwrap();
            let l = t.mse(m, target.clone()).unwrap();
            (t, l)
        });
        assert!(err < 1e-4, "{err}");
        model.params = store;
    }

    #[test]
    fn attention_aggregate_cases() {
        let model = GnnModel::new(small_config(), 12).unwrap();
        let attn = model.layers[1].1.attn;
        let h = vec![0.3, -0.1, 0.5, 0.0, 1.0, -2.0];
        let m = vec![1.0, 2.0, -3.0, 0.5, 0.25, 4.0];
        let (one, alpha) = model.attention_aggregate(&attn, std::slice::from_ref(&m), &h);
        assert_eq!(one, m);
        assert_eq!(alpha, vec![1.0]);
        let (two, alpha) = model.attention_aggregate(&attn, &[m.clone(), m.clone()], &h);
        assert_eq!(alpha, vec![0.5, 0.5]);
        for (a, b) in two.iter().zip(&m) {
            assert!((a - b).abs() < 1e-15);
        }
        let (none, _) = model.attention_aggregate(&attn, &[], &h);
        assert_eq!(none, vec![0.0; 6]);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 1..20 {
            let msgs: Vec<Vec<f64>> = (0..k).map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let (_, alpha) = model.attention_aggregate(&attn, &msgs, &h);
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_variable_stays_finite() {
        let model = GnnModel::new(small_config(), 14).unwrap();
        let mut g = chain_graph(3);
        g.fv_edges.retain(|e| e.1 != 2);
        g.vv_edges.retain(|e| e.1 != 2);
        g.factors.truncate(g.factors.len());
        let pred = model.predict(&g).unwrap();
        assert!(pred.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permutation_equivariance() {
        let mut model = GnnModel::new(small_config(), 15).unwrap();
        perturb_norms(&mut model, 16);
        let g = system_graph("ieee14", 4);
        let nv = g.variables.len();
        let nf = g.factors.len();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut pv: Vec<usize> = (0..nv).collect();
        let mut pf: Vec<usize> = (0..nf).collect();
        for i in (1..nv).rev() {
            pv.swap(i, rng.random_range(0..=i));
        }
        for i in (1..nf).rev() {
            pf.swap(i, rng.random_range(0..=i));
        }
        // node i moves to position p[i], carrying its features
        let mut h = g.clone();
        for (i, v) in g.variables.iter().enumerate() {
            h.variables[pv[i]] = VariableNode {
                index: pv[i],
                feature: v.feature.clone(),
            };
        }
        for (i, f) in g.factors.iter().enumerate() {
            h.factors[pf[i]] = FactorNode {
                index: pf[i],
                ..f.clone()
            };
        }
        h.fv_edges = g.fv_edges.iter().rev().map(|&(f, v)| (pf[f], pv[v])).collect();
        h.vv_edges = g.vv_edges.iter().map(|&(a, b)| (pv[a].min(pv[b]), pv[a].max(pv[b]))).collect();
        let a = model.predict(&g).unwrap();
        let b = model.predict(&h).unwrap();
        for i in 0..nv {
            assert!((a[i] - b[pv[i]]).abs() < 1e-12, "{} vs {}", a[i], b[pv[i]]);
        }
    }

    #[test]
    fn locality_on_a_chain() {
        let cfg = small_config();
        let mut model = GnnModel::new(cfg, 18).unwrap();
        perturb_norms(&mut model, 19);
        let g = chain_graph(12);
        let base = model.predict(&g).unwrap();
        // change every factor attached only to variables at distance ≥ K + 2 from variable 0
        let far = cfg.num_layers + 2;
        let mut h = g.clone();
        for &(f, v) in &g.fv_edges {
            if g.fv_edges.iter().filter(|e| e.0 == f).all(|e| e.1 >= far) {
                h.factors[f].feature[0] += 5.0;
            }
            let _ = v;
        }
        for v in far..12 {
            h.variables[v].feature = binary_encoding(4000 + v, DEFAULT_ENCODING_WIDTH).unwrap();
        }
        let moved = model.predict(&h).unwrap();
        assert_eq!(base[0], moved[0]);
        assert_ne!(base[11], moved[11]);
    }

    #[test]
    fn zero_layers_reduce_to_encoder_and_head() {
        let cfg = GnnConfig {
            num_layers: 0,
            ..small_config()
        };
        let model = GnnModel::new(cfg, 20).unwrap();
        let g = system_graph("ieee14", 5);
        let mut h = g.clone();
        for f in &mut h.factors {
            f.feature[0] += 1.0;
        }
        h.vv_edges.clear();
        let a = model.predict(&g).unwrap();
        assert_eq!(a, model.predict(&h).unwrap());
        let alone = model.predict(&system_graph("ieee14", 99)).unwrap();
        assert_eq!(a, alone);
    }

    #[test]
    fn eval_predictions_are_deterministic() {
        let model = GnnModel::new(GnnConfig::default(), 21).unwrap();
        let g = system_graph("ieee30", 6);
        let a = model.predict(&g).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a, model.predict(&g.clone()).unwrap());
        let pair = model.predict_batch(&[&g, &g]).unwrap();
        assert_eq!(pair[0], pair[1]);
    }

    #[test]
    fn parameter_counts() {
        let toy = GnnConfig {
            embedding_size: 1,
            num_layers: 1,
            encoding_width: 1,
            leaky_relu_slope: 0.2,
        };
        // encoders 2 + 8; factor layer: mlp 5, attention 2, update 3;
        // variable layer: two mlps 10, attention 2, update 3; head 4
        assert_eq!(GnnModel::new(toy, 0).unwrap().count_parameters(), 2 + 8 + 10 + 15 + 4);

        let base = GnnModel::new(GnnConfig::default(), 0).unwrap().count_parameters();
        let doubled = GnnModel::new(
            GnnConfig {
                embedding_size: 128,
                ..GnnConfig::default()
            },
            0,
        )
        .unwrap()
        .count_parameters();
        let ratio = doubled as f64 / base as f64;
        assert!((3.8..4.05).contains(&ratio), "{ratio}");
    }

    #[test]
    fn parameter_count_ignores_system_size() {
        let model = GnnModel::new(GnnConfig::default(), 0).unwrap();
        let counts: Vec<usize> = ["two_bus", "ieee14", "ieee30", "ieee118", "ieee300"]
            .iter()
            .map(|name| {
                let g = system_graph(name, 1);
                assert!(model.predict(&g).is_ok());
                model.count_parameters()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn full_model_gradient_on_two_bus() {
        let mut model = GnnModel::new(small_config(), 22).unwrap();
        let graphs = [system_graph("two_bus", 7), system_graph("two_bus", 8)];
        let batch = GraphBatch::new(&[&graphs[0], &graphs[1]]).unwrap();
        let target = Arc::new(Array2::from_shape_fn((batch.n_var, 1), |(i, _)| 0.5 - 0.2 * i as f64));
        // move off the zero-bias initialization, where the one-hot and
        // all-zero encodings put ReLU inputs exactly on the kink
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for p in &mut model.params.params {
            p.value.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
        }
        let mut store = std::mem::take(&mut model.params);
        let shell = model.clone();
        let (err, n) = max_relative_error(&mut store, 400, 23, |s| {
            let mut m = shell.clone();
            m.params = s.clone();
            let mut t = Tape::new();
            let (y, _) = m.forward(&mut t, &batch, Mode::Train).unwrap();
            let l = t.mse(y, target.clone()).unwrap();
            (t, l)
        });
        assert!(n >= 100);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn loss_examples() {
        let a = StateVector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
        let shifted = StateVector(a.iter().map(|v| v + 0.5).collect());
        assert!((loss(&shifted, &a).unwrap() - 0.25).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let direct = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 10.0;
        assert!((loss(&StateVector(x), &StateVector(y)).unwrap() - direct).abs() < 1e-15);
        assert!(loss(&a, &StateVector(vec![0.0])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let mut model = GnnModel::new(small_config(), 25).unwrap();
        perturb_norms(&mut model, 26);
        let ck = model.to_checkpoint(Some("digest".into())).unwrap();
        let back = GnnModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        let g = system_graph("ieee14", 9);
        assert_eq!(model.predict(&g).unwrap(), back.predict(&g).unwrap());
        assert_eq!(back.norms, model.norms);
    }
}
