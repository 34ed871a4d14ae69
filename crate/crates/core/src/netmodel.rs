//! Network model: buses, branches, and the bus admittance matrix.
//!
//! Cases are read from MATPOWER version-2 `.m` files. Quantities are
//! converted to per-unit on the system MVA base when the file is parsed,
//! generators are summed per bus, out-of-service branches are kept in the
//! branch list but contribute nothing to the admittance matrix.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::ser::{SerializeSeq, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};

// MATPOWER column indices (zero based).
const BUS_I: usize = 0;
const BUS_TYPE: usize = 1;
const PD: usize = 2;
const QD: usize = 3;
const GS: usize = 4;
const BS: usize = 5;
const VM: usize = 7;
const VA: usize = 8;
const BASE_KV: usize = 9;
const BUS_COLS: usize = 13;

const GEN_BUS: usize = 0;
const PG: usize = 1;
const QG: usize = 2;
const VG: usize = 5;
const GEN_STATUS: usize = 7;
const GEN_COLS: usize = 10;

const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_R: usize = 2;
const BR_X: usize = 3;
const BR_B: usize = 4;
const TAP: usize = 8;
const SHIFT: usize = 9;
const BR_STATUS: usize = 10;
const BRANCH_COLS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

/// A bus with per-unit quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    pub p_gen: f64,
    pub q_gen: f64,
    /// Shunt conductance at 1 p.u. voltage.
    pub shunt_g: f64,
    /// Shunt susceptance at 1 p.u. voltage.
    pub shunt_b: f64,
    /// Voltage magnitude held by generators at PV and slack buses.
    pub v_setpoint: f64,
    /// Voltage magnitude stored in the case file.
    pub v_init: f64,
    /// Voltage angle stored in the case file, radians.
    pub theta_init: f64,
    pub base_kv: f64,
}

impl Bus {
    pub fn p_scheduled(&self) -> f64 {
        self.p_gen - self.p_demand
    }

    pub fn q_scheduled(&self) -> f64 {
        self.q_gen - self.q_demand
    }
}

/// A pi-model branch. `tap == 1.0` for lines, `shift` in radians.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub tap: f64,
    pub shift: f64,
    pub in_service: bool,
}

/// Dense complex bus admittance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    y: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn from_matrix(y: DMatrix<Complex64>) -> Result<Self> {
        if !y.is_square() {
            return Err(Error::InvalidArgument(format!(
                "admittance matrix must be square, got {}x{}",
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(Self { y })
    }

    pub fn dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.y
    }

    pub fn get(&self, i: usize, k: usize) -> Complex64 {
        self.y[(i, k)]
    }

    /// Conductance matrix `Re(Y)`.
    pub fn g(&self) -> DMatrix<f64> {
        self.y.map(|c| c.re)
    }

    /// Susceptance matrix `Im(Y)`.
    pub fn b(&self) -> DMatrix<f64> {
        self.y.map(|c| c.im)
    }
}

impl Serialize for AdmittanceMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.dim();
        let mut rows = serializer.serialize_seq(Some(n))?;
        for i in 0..n {
            let row: Vec<[f64; 2]> = (0..n).map(|k| [self.y[(i, k)].re, self.y[(i, k)].im]).collect();
            rows.serialize_element(&row)?;
        }
        rows.end()
    }
}

/// Validated network with its admittance matrix.
#[derive(Debug, Clone, Serialize)]
pub struct Network {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub admittance: AdmittanceMatrix,
    #[serde(skip)]
    index: HashMap<usize, usize>,
}

impl Network {
    /// Validate buses and branches and build the admittance matrix.
    pub fn new(name: impl Into<String>, base_mva: f64, buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(Error::Validation(format!("baseMVA must be positive, got {base_mva}")));
        }
        let index = index_buses(&buses)?;
        validate_buses(&buses)?;
        let admittance = build_admittance(&buses, &branches)?;
        check_connected(&buses, &branches, &index)?;
        Ok(Self {
            name: name.into(),
            base_mva,
            buses,
            branches,
            admittance,
            index,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Internal position of the bus with the given id.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    pub fn pv_indices(&self) -> Vec<usize> {
        self.indices_of_kind(BusKind::PV)
    }

    /// PQ bus positions in ascending bus-id order.
    pub fn pq_indices(&self) -> Vec<usize> {
        self.indices_of_kind(BusKind::PQ)
    }

    /// PV and PQ bus positions in ascending bus-id order.
    pub fn non_slack_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_buses()).filter(|&i| self.buses[i].kind != BusKind::Slack).collect();
        idx.sort_by_key(|&i| self.buses[i].id);
        idx
    }

    fn indices_of_kind(&self, kind: BusKind) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_buses()).filter(|&i| self.buses[i].kind == kind).collect();
        idx.sort_by_key(|&i| self.buses[i].id);
        idx
    }

    pub fn bus_ids(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.buses[i].id).collect()
    }

    /// Scheduled net injections `(p, q)` at every bus.
    pub fn scheduled_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.buses.iter().map(Bus::p_scheduled).collect();
        let q = self.buses.iter().map(Bus::q_scheduled).collect();
        (p, q)
    }

    /// Replace the demand at one bus. Does not touch the admittance matrix.
    pub fn set_demand(&mut self, index: usize, p_demand: f64, q_demand: f64) -> Result<()> {
        if !(p_demand.is_finite() && q_demand.is_finite()) {
            return Err(Error::InvalidArgument("demand must be finite".into()));
        }
        let bus = self
            .buses
            .get_mut(index)
            .ok_or_else(|| Error::InvalidArgument(format!("bus index {index} out of range")))?;
        bus.p_demand = p_demand;
        bus.q_demand = q_demand;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn index_buses(buses: &[Bus]) -> Result<HashMap<usize, usize>> {
    let mut index = HashMap::with_capacity(buses.len());
    for (pos, bus) in buses.iter().enumerate() {
        if index.insert(bus.id, pos).is_some() {
            return Err(Error::Validation(format!("duplicate bus id {}", bus.id)));
        }
    }
    Ok(index)
}

fn validate_buses(buses: &[Bus]) -> Result<()> {
    if buses.is_empty() {
        return Err(Error::Validation("network has no buses".into()));
    }
    let slacks = buses.iter().filter(|b| b.kind == BusKind::Slack).count();
    if slacks != 1 {
        return Err(Error::Validation(format!("expected exactly one slack bus, found {slacks}")));
    }
    for bus in buses {
        let values = [
            bus.p_demand,
            bus.q_demand,
            bus.p_gen,
            bus.q_gen,
            bus.shunt_g,
            bus.shunt_b,
            bus.v_init,
            bus.theta_init,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("bus {} has non-finite data", bus.id)));
        }
        if bus.kind != BusKind::PQ && !(bus.v_setpoint.is_finite() && bus.v_setpoint > 0.0) {
            return Err(Error::Validation(format!(
                "bus {} has invalid voltage setpoint {}",
                bus.id, bus.v_setpoint
            )));
        }
    }
    Ok(())
}

fn check_connected(buses: &[Bus], branches: &[Branch], index: &HashMap<usize, usize>) -> Result<()> {
    let n = buses.len();
    let mut adj = vec![Vec::new(); n];
    for br in branches.iter().filter(|b| b.in_service) {
        let (f, t) = (index[&br.from], index[&br.to]);
        adj[f].push(t);
        adj[t].push(f);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &k in &adj[i] {
            if !seen[k] {
                seen[k] = true;
                queue.push_back(k);
            }
        }
    }
    if let Some(pos) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!(
            "network is not connected: bus {} is islanded",
            buses[pos].id
        )));
    }
    Ok(())
}

/// Assemble `Y` from pi-model branch stamps and bus shunts.
///
/// Bus order follows `buses`. Out-of-service branches are skipped.
pub fn build_admittance(buses: &[Bus], branches: &[Branch]) -> Result<AdmittanceMatrix> {
    let index = index_buses(buses)?;
    let n = buses.len();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for (i, bus) in buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(bus.shunt_g, bus.shunt_b);
    }
    for br in branches {
        let lookup = |id: usize| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("branch {}-{} references unknown bus {id}", br.from, br.to)))
        };
        let f = lookup(br.from)?;
        let t = lookup(br.to)?;
        if !br.in_service {
            continue;
        }
        if f == t {
            return Err(Error::Validation(format!("branch {}-{} is a self loop", br.from, br.to)));
        }
        if br.r == 0.0 && br.x == 0.0 {
            return Err(Error::Validation(format!(
                "in-service branch {}-{} has zero impedance",
                br.from, br.to
            )));
        }
        if ![br.r, br.x, br.b, br.tap, br.shift].iter().all(|v| v.is_finite()) || br.tap <= 0.0 {
            return Err(Error::Validation(format!("branch {}-{} has invalid data", br.from, br.to)));
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let tc = Complex64::from_polar(br.tap, br.shift);
        let ytt = ys + Complex64::new(0.0, br.b / 2.0);
        let yff = ytt / (br.tap * br.tap);
        let yft = -ys / tc.conj();
        let ytf = -ys / tc;
        y[(f, f)] += yff;
        y[(t, t)] += ytt;
        y[(f, t)] += yft;
        y[(t, f)] += ytf;
    }
    Ok(AdmittanceMatrix { y })
}

/// Read a MATPOWER case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    parse_case(&text, &name)
}

struct RawMatrix {
    rows: Vec<Vec<f64>>,
    start_line: usize,
}

/// Parse the text of a MATPOWER version-2 case.
pub fn parse_case(text: &str, name: &str) -> Result<Network> {
    let (base_mva, matrices) = scan_matrices(text)?;
    let base_mva = base_mva.ok_or(Error::Parse {
        line: 0,
        message: "missing mpc.baseMVA".into(),
    })?;
    let take = |key: &str, min_cols: usize| -> Result<&RawMatrix> {
        let m = matrices.get(key).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing mpc.{key}"),
        })?;
        if let Some(first) = m.rows.first() {
            if first.len() < min_cols {
                return Err(Error::Parse {
                    line: m.start_line,
                    message: format!("mpc.{key} needs at least {min_cols} columns, found {}", first.len()),
                });
            }
        }
        Ok(m)
    };
    let bus_m = take("bus", BUS_COLS)?;
    let gen_m = take("gen", GEN_COLS)?;
    let branch_m = take("branch", BRANCH_COLS)?;

    let mut buses = Vec::with_capacity(bus_m.rows.len());
    for (r, row) in bus_m.rows.iter().enumerate() {
        let line = bus_m.start_line + r;
        let kind = match row[BUS_TYPE] as i64 {
            1 => BusKind::PQ,
            2 => BusKind::PV,
            3 => BusKind::Slack,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unsupported bus type {other}"),
                })
            }
        };
        buses.push(Bus {
            id: as_id(row[BUS_I], line)?,
            kind,
            p_demand: row[PD] / base_mva,
            q_demand: row[QD] / base_mva,
            p_gen: 0.0,
            q_gen: 0.0,
            shunt_g: row[GS] / base_mva,
            shunt_b: row[BS] / base_mva,
            v_setpoint: row[VM],
            v_init: row[VM],
            theta_init: row[VA].to_radians(),
            base_kv: row[BASE_KV],
        });
    }
    let index = index_buses(&buses)?;

    let mut has_gen = vec![false; buses.len()];
    for (r, row) in gen_m.rows.iter().enumerate() {
        let line = gen_m.start_line + r;
        let id = as_id(row[GEN_BUS], line)?;
        let pos = *index.get(&id).ok_or_else(|| Error::Parse {
            line,
            message: format!("generator at unknown bus {id}"),
        })?;
        if row[GEN_STATUS] <= 0.0 {
            continue;
        }
        let bus = &mut buses[pos];
        bus.p_gen += row[PG] / base_mva;
        bus.q_gen += row[QG] / base_mva;
        if !has_gen[pos] {
            bus.v_setpoint = row[VG];
            has_gen[pos] = true;
        }
    }
    for (pos, bus) in buses.iter_mut().enumerate() {
        if bus.kind == BusKind::PV && !has_gen[pos] {
            log::warn!("bus {} is PV without an online generator, treating as PQ", bus.id);
            bus.kind = BusKind::PQ;
        }
    }

    let mut branches = Vec::with_capacity(branch_m.rows.len());
    for (r, row) in branch_m.rows.iter().enumerate() {
        let line = branch_m.start_line + r;
        let tap = if row[TAP] == 0.0 { 1.0 } else { row[TAP] };
        branches.push(Branch {
            from: as_id(row[F_BUS], line)?,
            to: as_id(row[T_BUS], line)?,
            r: row[BR_R],
            x: row[BR_X],
            b: row[BR_B],
            tap,
            shift: row[SHIFT].to_radians(),
            in_service: row[BR_STATUS] > 0.0,
        });
    }
    Network::new(name, base_mva, buses, branches)
}

fn as_id(value: f64, line: usize) -> Result<usize> {
    if value.fract() != 0.0 || value < 1.0 || !value.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("invalid bus id {value}"),
        });
    }
    Ok(value as usize)
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

enum Block {
    None,
    Matrix { key: String },
    Cell,
}

fn scan_matrices(text: &str) -> Result<(Option<f64>, BTreeMap<String, RawMatrix>)> {
    let mut base_mva = None;
    let mut matrices: BTreeMap<String, RawMatrix> = BTreeMap::new();
    let mut block = Block::None;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        match &block {
            Block::Cell => {
                if line.contains('}') {
                    block = Block::None;
                }
                continue;
            }
            Block::Matrix { key } => {
                let key = key.clone();
                let (body, closed) = match line.find(']') {
                    Some(pos) => (&line[..pos], true),
                    None => (line, false),
                };
                push_rows(matrices.get_mut(&key).expect("open matrix"), body, line_no, &key)?;
                if closed {
                    block = Block::None;
                }
                continue;
            }
            Block::None => {}
        }

        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some((key, value)) = rest.split_once('=') else {
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim();
        if let Some(body) = value.strip_prefix('[') {
            matrices.insert(
                key.clone(),
                RawMatrix {
                    rows: Vec::new(),
                    start_line: line_no,
                },
            );
            let (body, closed) = match body.find(']') {
                Some(pos) => (&body[..pos], true),
                None => (body, false),
            };
            push_rows(matrices.get_mut(&key).expect("just inserted"), body, line_no, &key)?;
            if !closed {
                block = Block::Matrix { key };
            }
        } else if value.starts_with('{') {
            if !value.contains('}') {
                block = Block::Cell;
            }
        } else if key == "baseMVA" {
            let v = value.trim_end_matches(';').trim();
            base_mva = Some(v.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid baseMVA '{v}'"),
            })?);
        }
    }
    if let Block::Matrix { key } = block {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: format!("unterminated matrix mpc.{key}"),
        });
    }
    Ok((base_mva, matrices))
}

fn push_rows(matrix: &mut RawMatrix, body: &str, line_no: usize, key: &str) -> Result<()> {
    if matrix.rows.is_empty() {
        matrix.start_line = line_no;
    }
    for segment in body.split(';') {
        let tokens: Vec<&str> = segment
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(tokens.len());
        for tok in tokens {
            row.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid number '{tok}' in mpc.{key}"),
            })?);
        }
        if let Some(first) = matrix.rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!(
                        "row in mpc.{key} has {} columns, expected {}",
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        matrix.rows.push(row);
    }
    Ok(())
}
