//! Graph-structured observations over the mixed traffic stream.
//!
//! The observed node set is every controlled vehicle plus each human-driven
//! vehicle within sensing range of at least one of them. Nodes occupy slots
//! in ascending vehicle-id order and are zero-padded up to a fixed count so
//! the network always sees one tensor shape. Three rules wire the graph:
//!
//! * a CAV connects to every HDV it senses,
//! * CAVs all connect to each other (they share a radio channel),
//! * two HDVs connect when some single CAV senses both.
//!
//! The adjacency is stored symmetrically normalized with self-loops, the
//! form consumed directly by the graph convolution.

use serde::{Deserialize, Serialize};

use crate::sim::{Intention, Kind, Sim, Vehicle, VehicleId};
use crate::{Error, Mat};

/// Entries per node row: normalized speed, normalized position, a 3-slot
/// lane one-hot, and a 3-slot destination one-hot that is all zero for HDVs.
pub const FEATURE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsParams {
    /// Slot count; observations with more visible vehicles are rejected.
    pub n_max: usize,
    /// Sensing radius in metres, inclusive, measured along the road in
    /// either direction regardless of lane.
    pub sensing_range: f64,
    /// Speed denominator shared by every vehicle class.
    pub speed_norm: f64,
    /// Position denominator, normally the corridor length.
    pub pos_norm: f64,
    /// Drop every edge, leaving each node to convolve only with itself.
    pub no_fusion: bool,
}

impl Default for ObsParams {
    fn default() -> Self {
        Self {
            n_max: 40,
            sensing_range: 30.0,
            speed_norm: 14.0,
            pos_norm: 500.0,
            no_fusion: false,
        }
    }
}

/// One network input. `ids` names the occupied slots in order; rows of
/// `feat` beyond `ids.len()` are zero and isolated in `anorm`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub ids: Vec<VehicleId>,
    /// One flag per slot, true where the slot holds a CAV.
    pub mask: Vec<bool>,
    /// `n_max` by [`FEATURE_DIM`].
    pub feat: Mat,
    /// Symmetrically normalized adjacency with self-loops, `n_max` square.
    pub anorm: Mat,
}

impl Observation {
    pub fn n_real(&self) -> usize {
        self.ids.len()
    }

    pub fn n_max(&self) -> usize {
        self.mask.len()
    }

    /// Slot index of a vehicle id, relying on `ids` being sorted.
    pub fn slot_of(&self, id: VehicleId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

pub fn vehicle_features(v: &Vehicle, p: &ObsParams) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[0] = v.speed / p.speed_norm;
    f[1] = v.pos / p.pos_norm;
    if v.lane < 3 {
        f[2 + v.lane] = 1.0;
    }
    match v.kind {
        Kind::Cav(Intention::Ramp1) => f[5] = 1.0,
        Kind::Cav(Intention::Ramp2) => f[6] = 1.0,
        Kind::Cav(Intention::Through) => f[7] = 1.0,
        Kind::Hdv => {}
    }
    f
}

/// Vehicles that enter the observation, ascending by id: all CAVs, and the
/// HDVs at least one CAV senses.
pub fn visible_vehicles(sim: &Sim, p: &ObsParams) -> Vec<Vehicle> {
    let all: Vec<&Vehicle> = sim.vehicles().values().collect();
    all.iter()
        .filter(|v| match v.kind {
            Kind::Cav(_) => true,
            Kind::Hdv => all
                .iter()
                .any(|c| c.kind.is_cav() && (c.pos - v.pos).abs() <= p.sensing_range),
        })
        .map(|v| **v)
        .collect()
}

/// Undirected edges between slot indices, each pair listed once as
/// `(low, high)`. Empty under the no-fusion ablation.
pub fn adjacency_edges(vis: &[Vehicle], p: &ObsParams) -> Vec<(u16, u16)> {
    if p.no_fusion {
        return Vec::new();
    }
    let senses =
        |c: &Vehicle, h: &Vehicle| c.kind.is_cav() && (c.pos - h.pos).abs() <= p.sensing_range;
    let mut edges = Vec::new();
    for i in 0..vis.len() {
        for j in (i + 1)..vis.len() {
            let (a, b) = (&vis[i], &vis[j]);
            let connected = match (a.kind.is_cav(), b.kind.is_cav()) {
                (true, true) => true,
                (true, false) => senses(a, b),
                (false, true) => senses(b, a),
                (false, false) => vis.iter().any(|c| senses(c, a) && senses(c, b)),
            };
            if connected {
                edges.push((i as u16, j as u16));
            }
        }
    }
    edges
}

/// Adds self-loops and rescales each entry by the square root of both
/// endpoint degrees. Rows without edges come out as bare unit diagonals, so
/// padded slots never leak into real ones.
pub fn normalize_adjacency(adj: &Mat) -> Mat {
    let n = adj.rows();
    debug_assert_eq!(adj.cols(), n);
    let mut abar = adj.clone();
    for i in 0..n {
        abar.set(i, i, abar.get(i, i) + 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| abar.row(i).iter().sum()).collect();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = abar.get(i, j);
            if a != 0.0 {
                out.set(i, j, a / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    out
}

/// Packs a visible set and its edge list into the padded tensors.
pub fn assemble(vis: &[Vehicle], edges: &[(u16, u16)], p: &ObsParams) -> crate::Result<Observation> {
    let n_real = vis.len();
    if n_real > p.n_max {
        return Err(Error::Capacity {
            n_real,
            n_max: p.n_max,
        });
    }
    let mut ids = Vec::with_capacity(n_real);
    let mut mask = vec![false; p.n_max];
    let mut feat = Mat::zeros(p.n_max, FEATURE_DIM);
    for (i, v) in vis.iter().enumerate() {
        ids.push(v.id);
        mask[i] = v.kind.is_cav();
        for (j, x) in vehicle_features(v, p).iter().enumerate() {
            feat.set(i, j, *x);
        }
    }
    let mut adj = Mat::zeros(p.n_max, p.n_max);
    for &(i, j) in edges {
        adj.set(i as usize, j as usize, 1.0);
        adj.set(j as usize, i as usize, 1.0);
    }
    Ok(Observation {
        ids,
        mask,
        feat,
        anorm: normalize_adjacency(&adj),
    })
}

pub fn build_observation(sim: &Sim, p: &ObsParams) -> crate::Result<Observation> {
    let vis = visible_vehicles(sim, p);
    let edges = adjacency_edges(&vis, p);
    assemble(&vis, &edges, p)
}
