//! The graph-convolution Q-network.
//!
//! Per-node feature rows pass through a two-layer encoder, one graph
//! convolution mixes encodings along the observation graph, a mask filter
//! zeroes every non-controlled row, and a four-layer head maps each
//! surviving row to one Q-value per lane action. All layers act row-wise,
//! so the same parameters serve any node count.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{Activation, DenseCache, DenseLayer, GraphConvCache, GraphConvLayer, Matrix};
use crate::num::Scalar;
use crate::sim::{Action, VehicleId};

pub const HIDDEN_DIM: usize = 32;
pub const HEAD_DIM: usize = 16;
pub const ACTION_DIM: usize = Action::COUNT;

#[derive(Clone, Debug)]
pub struct GcqModel<T> {
    pub enc1: DenseLayer<T>,
    pub enc2: DenseLayer<T>,
    pub gcn: GraphConvLayer<T>,
    pub q1: DenseLayer<T>,
    pub q2: DenseLayer<T>,
    pub q3: DenseLayer<T>,
    pub out: DenseLayer<T>,
}

/// Everything one forward pass retains for the backward pass.
pub struct GcqCache<T> {
    pub(crate) anorm: Matrix<T>,
    pub(crate) mask: Vec<bool>,
    pub(crate) enc1: DenseCache<T>,
    pub(crate) enc2: DenseCache<T>,
    pub(crate) gcn: GraphConvCache<T>,
    pub(crate) q1: DenseCache<T>,
    pub(crate) q2: DenseCache<T>,
    pub(crate) q3: DenseCache<T>,
    pub(crate) out: DenseCache<T>,
}

/// Gradients shaped exactly like [`GcqModel`]'s parameters.
#[derive(Clone, Debug)]
pub struct GcqGrads<T> {
    pub enc1_w: Matrix<T>,
    pub enc1_b: Matrix<T>,
    pub enc2_w: Matrix<T>,
    pub enc2_b: Matrix<T>,
    pub gcn_w: Matrix<T>,
    pub gcn_b: Matrix<T>,
    pub q1_w: Matrix<T>,
    pub q1_b: Matrix<T>,
    pub q2_w: Matrix<T>,
    pub q2_b: Matrix<T>,
    pub q3_w: Matrix<T>,
    pub q3_b: Matrix<T>,
    pub out_w: Matrix<T>,
    pub out_b: Matrix<T>,
}

fn zero_rows<T: Scalar>(m: &Matrix<T>, keep: &[bool]) -> Matrix<T> {
    let mut out = m.clone();
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            for v in out.row_mut(i) {
                *v = T::zero();
            }
        }
    }
    out
}

fn he_dense<T: Scalar>(
    rng: &mut impl Rng,
    in_dim: usize,
    out_dim: usize,
    act: Activation,
) -> DenseLayer<T> {
    let var = 2.0 / in_dim as f64;
    let normal = Normal::new(0.0, var.sqrt()).expect("positive std");
    let data: Vec<T> = (0..in_dim * out_dim)
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    DenseLayer::new(
        Matrix::from_vec(in_dim, out_dim, data),
        Matrix::zeros(1, out_dim),
        act,
    )
}

impl<T: Scalar> GcqModel<T> {
    pub fn init(feature_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            enc1: he_dense(rng, feature_dim, HIDDEN_DIM, Activation::Relu),
            enc2: he_dense(rng, HIDDEN_DIM, HIDDEN_DIM, Activation::Relu),
            gcn: GraphConvLayer::new(
                he_dense::<T>(rng, HIDDEN_DIM, HIDDEN_DIM, Activation::Relu).w,
                Matrix::zeros(1, HIDDEN_DIM),
            ),
            q1: he_dense(rng, HIDDEN_DIM, HIDDEN_DIM, Activation::Relu),
            q2: he_dense(rng, HIDDEN_DIM, HIDDEN_DIM, Activation::Relu),
            q3: he_dense(rng, HIDDEN_DIM, HEAD_DIM, Activation::Relu),
            // The output layer starts at zero: a fresh network is
            // indifferent between actions, so greedy selection falls back
            // to the Keep-first tie break everywhere until training has
            // actually separated the Q-values.
            out: DenseLayer::new(
                Matrix::zeros(HEAD_DIM, ACTION_DIM),
                Matrix::zeros(1, ACTION_DIM),
                Activation::Linear,
            ),
        }
    }

    /// Shape scaffold with all parameters zero; checkpoint loading fills it.
    pub fn zeros(feature_dim: usize) -> Self {
        let dense = |i, o, act| {
            DenseLayer::new(Matrix::zeros(i, o), Matrix::zeros(1, o), act)
        };
        Self {
            enc1: dense(feature_dim, HIDDEN_DIM, Activation::Relu),
            enc2: dense(HIDDEN_DIM, HIDDEN_DIM, Activation::Relu),
            gcn: GraphConvLayer::new(
                Matrix::zeros(HIDDEN_DIM, HIDDEN_DIM),
                Matrix::zeros(1, HIDDEN_DIM),
            ),
            q1: dense(HIDDEN_DIM, HIDDEN_DIM, Activation::Relu),
            q2: dense(HIDDEN_DIM, HIDDEN_DIM, Activation::Relu),
            q3: dense(HIDDEN_DIM, HEAD_DIM, Activation::Relu),
            out: dense(HEAD_DIM, ACTION_DIM, Activation::Linear),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.enc1.in_dim()
    }

    /// Q-values for every slot row plus the cache for a backward pass.
    /// `anorm`, `feat`, and `mask` must agree on the row count; any count
    /// works, padded or trimmed.
    pub fn forward_cached(
        &self,
        anorm: &Matrix<T>,
        feat: &Matrix<T>,
        mask: &[bool],
    ) -> crate::Result<(Matrix<T>, GcqCache<T>)> {
        assert_eq!(anorm.rows(), feat.rows(), "anorm/feature row mismatch");
        assert_eq!(mask.len(), feat.rows(), "mask/feature row mismatch");
        let (h1, c_enc1) = self.enc1.forward_cached(feat);
        let (h2, c_enc2) = self.enc2.forward_cached(&h1);
        let (z, c_gcn) = self.gcn.forward_cached(anorm, &h2);
        let z_cav = zero_rows(&z, mask);
        let (y1, c_q1) = self.q1.forward_cached(&z_cav);
        let (y2, c_q2) = self.q2.forward_cached(&y1);
        let (y3, c_q3) = self.q3.forward_cached(&y2);
        let (q, c_out) = self.out.forward_cached(&y3);
        q.check_finite("q")?;
        Ok((
            q,
            GcqCache {
                anorm: anorm.clone(),
                mask: mask.to_vec(),
                enc1: c_enc1,
                enc2: c_enc2,
                gcn: c_gcn,
                q1: c_q1,
                q2: c_q2,
                q3: c_q3,
                out: c_out,
            },
        ))
    }

    pub fn forward(
        &self,
        anorm: &Matrix<T>,
        feat: &Matrix<T>,
        mask: &[bool],
    ) -> crate::Result<Matrix<T>> {
        Ok(self.forward_cached(anorm, feat, mask)?.0)
    }

    /// Backpropagates a gradient on the Q output down to every parameter.
    /// The mask filter kills gradient into non-controlled rows on the way
    /// back, mirroring the forward zeroing.
    pub fn backward(&self, cache: &GcqCache<T>, grad_q: &Matrix<T>) -> GcqGrads<T> {
        let (out_w, out_b, g_y3) = self.out.backward(&cache.out, grad_q);
        let (q3_w, q3_b, g_y2) = self.q3.backward(&cache.q3, &g_y3);
        let (q2_w, q2_b, g_y1) = self.q2.backward(&cache.q2, &g_y2);
        let (q1_w, q1_b, g_zcav) = self.q1.backward(&cache.q1, &g_y1);
        let g_z = zero_rows(&g_zcav, &cache.mask);
        let (gcn_w, gcn_b, g_h2) = self.gcn.backward(&cache.anorm, &cache.gcn, &g_z);
        let (enc2_w, enc2_b, g_h1) = self.enc2.backward(&cache.enc2, &g_h2);
        let (enc1_w, enc1_b, _) = self.enc1.backward(&cache.enc1, &g_h1);
        GcqGrads {
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            gcn_w,
            gcn_b,
            q1_w,
            q1_b,
            q2_w,
            q2_b,
            q3_w,
            q3_b,
            out_w,
            out_b,
        }
    }

    /// Parameter tensors in the fixed canonical order shared with
    /// [`GcqGrads::as_pairs`], the optimizer state, and checkpoints.
    pub fn params(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![
            ("enc1.w", &self.enc1.w),
            ("enc1.b", &self.enc1.b),
            ("enc2.w", &self.enc2.w),
            ("enc2.b", &self.enc2.b),
            ("gcn.w", &self.gcn.w),
            ("gcn.b", &self.gcn.b),
            ("q1.w", &self.q1.w),
            ("q1.b", &self.q1.b),
            ("q2.w", &self.q2.w),
            ("q2.b", &self.q2.b),
            ("q3.w", &self.q3.w),
            ("q3.b", &self.q3.b),
            ("out.w", &self.out.w),
            ("out.b", &self.out.b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![
            ("enc1.w", &mut self.enc1.w),
            ("enc1.b", &mut self.enc1.b),
            ("enc2.w", &mut self.enc2.w),
            ("enc2.b", &mut self.enc2.b),
            ("gcn.w", &mut self.gcn.w),
            ("gcn.b", &mut self.gcn.b),
            ("q1.w", &mut self.q1.w),
            ("q1.b", &mut self.q1.b),
            ("q2.w", &mut self.q2.w),
            ("q2.b", &mut self.q2.b),
            ("q3.w", &mut self.q3.w),
            ("q3.b", &mut self.q3.b),
            ("out.w", &mut self.out.w),
            ("out.b", &mut self.out.b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .map(|(_, m)| m.rows() * m.cols())
            .sum()
    }

    /// Human-readable architecture summary, one line per layer.
    pub fn describe(&self) -> String {
        let mut s = String::from("layer  kind       shape        params\n");
        let line = |name: &str, kind: &str, i: usize, o: usize| {
            format!("{name:<6} {kind:<10} {i:>3} -> {o:<3}   {:>6}\n", i * o + o)
        };
        s += &line("enc1", "dense", self.enc1.in_dim(), self.enc1.out_dim());
        s += &line("enc2", "dense", self.enc2.in_dim(), self.enc2.out_dim());
        s += &line("gcn", "graphconv", self.gcn.in_dim(), self.gcn.out_dim());
        s += &line("q1", "dense", self.q1.in_dim(), self.q1.out_dim());
        s += &line("q2", "dense", self.q2.in_dim(), self.q2.out_dim());
        s += &line("q3", "dense", self.q3.in_dim(), self.q3.out_dim());
        s += &line("out", "dense", self.out.in_dim(), self.out.out_dim());
        s += &format!("total trainable parameters: {}\n", self.param_count());
        s
    }
}

impl<T: Scalar> GcqGrads<T> {
    pub fn zeros_like(model: &GcqModel<T>) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            enc1_w: z(&model.enc1.w),
            enc1_b: z(&model.enc1.b),
            enc2_w: z(&model.enc2.w),
            enc2_b: z(&model.enc2.b),
            gcn_w: z(&model.gcn.w),
            gcn_b: z(&model.gcn.b),
            q1_w: z(&model.q1.w),
            q1_b: z(&model.q1.b),
            q2_w: z(&model.q2.w),
            q2_b: z(&model.q2.b),
            q3_w: z(&model.q3.w),
            q3_b: z(&model.q3.b),
            out_w: z(&model.out.w),
            out_b: z(&model.out.b),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self
            .as_pairs_mut()
            .into_iter()
            .zip(other.as_pairs().into_iter())
        {
            a.add_assign(b);
        }
    }

    /// Same order and names as [`GcqModel::params`].
    pub fn as_pairs(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![
            ("enc1.w", &self.enc1_w),
            ("enc1.b", &self.enc1_b),
            ("enc2.w", &self.enc2_w),
            ("enc2.b", &self.enc2_b),
            ("gcn.w", &self.gcn_w),
            ("gcn.b", &self.gcn_b),
            ("q1.w", &self.q1_w),
            ("q1.b", &self.q1_b),
            ("q2.w", &self.q2_w),
            ("q2.b", &self.q2_b),
            ("q3.w", &self.q3_w),
            ("q3.b", &self.q3_b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
        ]
    }

    fn as_pairs_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![
            ("enc1.w", &mut self.enc1_w),
            ("enc1.b", &mut self.enc1_b),
            ("enc2.w", &mut self.enc2_w),
            ("enc2.b", &mut self.enc2_b),
            ("gcn.w", &mut self.gcn_w),
            ("gcn.b", &mut self.gcn_b),
            ("q1.w", &mut self.q1_w),
            ("q1.b", &mut self.q1_b),
            ("q2.w", &mut self.q2_w),
            ("q2.b", &mut self.q2_b),
            ("q3.w", &mut self.q3_w),
            ("q3.b", &mut self.q3_b),
            ("out.w", &mut self.out_w),
            ("out.b", &mut self.out_b),
        ]
    }
}

/// Greedy action per controlled slot with epsilon exploration. Slots are
/// visited in ascending order; each controlled slot consumes one uniform
/// draw, plus one more when it explores, and `epsilon = 0` touches the
/// generator not at all. Ties prefer Keep, then Left, then Right.
pub fn select_actions<T: Scalar>(
    q: &Matrix<T>,
    mask: &[bool],
    ids: &[VehicleId],
    epsilon: f64,
    rng: &mut impl Rng,
) -> BTreeMap<VehicleId, Action> {
    debug_assert!(ids.len() <= mask.len());
    let mut out = BTreeMap::new();
    for (slot, &id) in ids.iter().enumerate() {
        if !mask[slot] {
            continue;
        }
        let explore = epsilon > 0.0 && rng.gen::<f64>() < epsilon;
        let action = if explore {
            Action::from_index(rng.gen_range(0..Action::COUNT)).expect("index in range")
        } else {
            greedy_action(q.row(slot))
        };
        out.insert(id, action);
    }
    out
}

/// Index of the largest Q entry, ties resolved Keep, Left, Right.
pub fn greedy_action<T: Scalar>(q_row: &[T]) -> Action {
    let mut best = Action::Keep;
    let mut best_v = q_row[Action::Keep.index()];
    for a in [Action::Left, Action::Right] {
        let v = q_row[a.index()];
        if v > best_v {
            best = a;
            best_v = v;
        }
    }
    best
}
