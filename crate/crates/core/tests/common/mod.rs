#![allow(dead_code)]

use std::path::PathBuf;

use gridphase::jacobian::classical_blocks;
use gridphase::linalg::subvector;
use gridphase::netmodel::{load_case, Network};
use gridphase::powerflow::{injections, solve_operating_point, StateVector};
use nalgebra::{DMatrix, DVector};

pub const SHIPPED: [&str; 5] = ["case14", "case24_ieee_rts", "case30", "case118", "case_RTS_GMLC"];

pub fn case_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(format!("{name}.m"))
}

pub fn load(name: &str) -> Network {
    load_case(case_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn solved(name: &str) -> (Network, StateVector) {
    let net = load(name);
    let state = solve_operating_point(&net).unwrap_or_else(|e| panic!("{name}: {e}"));
    (net, state)
}

/// Magnitudes, injections and magnitude blocks on the PQ set.
pub struct PqInputs {
    pub ids: Vec<usize>,
    pub v: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub dp_dv: DMatrix<f64>,
    pub dq_dv: DMatrix<f64>,
    pub dp_dtheta: DMatrix<f64>,
    pub dq_dtheta: DMatrix<f64>,
}

pub fn pq_inputs(net: &Network, state: &StateVector) -> PqInputs {
    let pq = net.pq_indices();
    let blocks = classical_blocks(net, state, &pq).unwrap();
    let (p, q) = injections(&net.admittance, state);
    PqInputs {
        ids: net.bus_ids(&pq),
        v: subvector(&state.v, &pq),
        p: subvector(&p, &pq),
        q: subvector(&q, &pq),
        dp_dv: blocks.dp_dv,
        dq_dv: blocks.dq_dv,
        dp_dtheta: blocks.dp_dtheta,
        dq_dtheta: blocks.dq_dtheta,
    }
}
