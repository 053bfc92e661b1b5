//! Cross-client storage planning: which labels each client keeps, how much
//! room each label gets, and the class weights that undo the resulting skew.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datagen::FederatedDataset;
use crate::error::{Error, Result};
use crate::selection::StorageBuffer;

/// `V[c][y]`: expected samples of label `y` arriving per round at client `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityMatrix {
    rows: Vec<Vec<f64>>,
}

impl VelocityMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || width == 0 {
            return Err(Error::config("velocity matrix must be non-empty"));
        }
        for (c, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    actual: row.len(),
                });
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Invalid(format!(
                    "velocity {v} at client {c} is not a nonnegative number"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// `v_c · P_c(y)` with `P_c` the client's training label distribution.
    pub fn from_dataset(dataset: &FederatedDataset, velocities: &[usize]) -> Result<Self> {
        if velocities.len() != dataset.client_count() {
            return Err(Error::DimensionMismatch {
                expected: dataset.client_count(),
                actual: velocities.len(),
            });
        }
        let counts = dataset.label_counts();
        let rows = counts
            .iter()
            .zip(velocities)
            .map(|(h, &v)| {
                let n: usize = h.iter().sum();
                h.iter()
                    .map(|&k| {
                        if n == 0 {
                            0.0
                        } else {
                            v as f64 * k as f64 / n as f64
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn client_count(&self) -> usize {
        self.rows.len()
    }

    pub fn label_count(&self) -> usize {
        self.rows[0].len()
    }

    pub fn get(&self, c: usize, y: usize) -> f64 {
        self.rows[c][y]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().flatten().sum()
    }

    pub fn column_sum(&self, y: usize) -> f64 {
        self.rows.iter().map(|r| r[y]).sum()
    }

    pub fn owners(&self, y: usize) -> Vec<usize> {
        (0..self.client_count())
            .filter(|&c| self.rows[c][y] > 0.0)
            .collect()
    }
}

/// Storage plan: `D[c][y]` slots of label `y` at client `c` plus class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationPlan {
    pub quotas: Vec<Vec<usize>>,
    pub gamma: Vec<f64>,
    pub n_label: Vec<usize>,
    pub n_client: Vec<usize>,
}

impl CoordinationPlan {
    pub fn client_count(&self) -> usize {
        self.quotas.len()
    }

    pub fn label_count(&self) -> usize {
        self.gamma.len()
    }

    /// Cells with a positive quota.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::new();
        for (c, row) in self.quotas.iter().enumerate() {
            for (y, &d) in row.iter().enumerate() {
                if d > 0 {
                    s.push((c, y));
                }
            }
        }
        s
    }

    pub fn client_quotas(&self, c: usize) -> &[usize] {
        &self.quotas[c]
    }

    /// Value of the planning objective `Σ D·V`.
    pub fn objective(&self, v: &VelocityMatrix) -> f64 {
        objective(&self.quotas, v)
    }

    pub fn buffer(&self, c: usize) -> StorageBuffer {
        StorageBuffer::per_label(&self.quotas[c])
    }
}

pub fn objective(d: &[Vec<usize>], v: &VelocityMatrix) -> f64 {
    d.iter()
        .zip(v.rows())
        .map(|(dr, vr)| dr.iter().zip(vr).map(|(&a, &b)| a as f64 * b).sum::<f64>())
        .sum()
}

/// Default per-client label cap: `max(1, ceil(Σ n_label / |C|) + 1)`.
pub fn default_n_client(n_label: &[usize], client_count: usize) -> usize {
    let total: usize = n_label.iter().sum();
    (total.div_ceil(client_count.max(1)) + 1).max(1)
}

fn check_shapes(
    v: &VelocityMatrix,
    capacities: &[usize],
    n_label: &[usize],
    n_client: &[usize],
) -> Result<()> {
    if capacities.len() != v.client_count() || n_client.len() != v.client_count() {
        return Err(Error::DimensionMismatch {
            expected: v.client_count(),
            actual: if capacities.len() != v.client_count() {
                capacities.len()
            } else {
                n_client.len()
            },
        });
    }
    if n_label.len() != v.label_count() {
        return Err(Error::DimensionMismatch {
            expected: v.label_count(),
            actual: n_label.len(),
        });
    }
    let dead: Vec<usize> = (0..v.label_count())
        .filter(|&y| v.column_sum(y) <= 0.0)
        .collect();
    if !dead.is_empty() {
        return Err(Error::Infeasible(format!(
            "labels with zero total velocity: {dead:?}"
        )));
    }
    Ok(())
}

/// Number of clients each label must reach: `n_label` capped by its owner count.
fn required(v: &VelocityMatrix, n_label: &[usize]) -> Vec<usize> {
    (0..v.label_count())
        .map(|y| n_label[y].min(v.owners(y).len()))
        .collect()
}

/// Split each client's capacity evenly over its assigned labels; remainder slots
/// go to the assigned labels with the largest velocity (lower index on ties).
fn even_split(assigned: &[Vec<bool>], v: &VelocityMatrix, capacities: &[usize]) -> Vec<Vec<usize>> {
    assigned
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let mut labels: Vec<usize> = (0..row.len()).filter(|&y| row[y]).collect();
            let mut d = vec![0; row.len()];
            if labels.is_empty() {
                return d;
            }
            let k = labels.len();
            for &y in &labels {
                d[y] = capacities[c] / k;
            }
            labels.sort_by(|&a, &b| v.get(c, b).total_cmp(&v.get(c, a)).then(a.cmp(&b)));
            for &y in labels.iter().take(capacities[c] % k) {
                d[y] += 1;
            }
            d
        })
        .collect()
}

/// Greedy label-to-client assignment.
///
/// Labels are visited by ascending owner count (lower index first on ties) and
/// handed to their highest-velocity owners that still have room under
/// `n_client`. A client left with no label afterwards keeps its fastest label.
pub fn greedy_assign(
    v: &VelocityMatrix,
    capacities: &[usize],
    n_label: &[usize],
    n_client: &[usize],
) -> Result<CoordinationPlan> {
    check_shapes(v, capacities, n_label, n_client)?;
    let (nc, ny) = (v.client_count(), v.label_count());
    let need = required(v, n_label);
    if n_client.iter().sum::<usize>() < need.iter().sum::<usize>() {
        return Err(Error::Infeasible(format!(
            "client label caps sum to {} but labels need {} assignments",
            n_client.iter().sum::<usize>(),
            need.iter().sum::<usize>()
        )));
    }
    for y in 0..ny {
        if need[y] < n_label[y] {
            warn!(
                "label {y} has {} owners, fewer than the requested {}",
                need[y], n_label[y]
            );
        }
    }

    let mut order: Vec<usize> = (0..ny).collect();
    order.sort_by_key(|&y| (v.owners(y).len(), y));

    let mut assigned = vec![vec![false; ny]; nc];
    let mut held = vec![0usize; nc];
    let mut unsatisfied = Vec::new();
    for y in order {
        let mut candidates: Vec<usize> = v
            .owners(y)
            .into_iter()
            .filter(|&c| held[c] < n_client[c])
            .collect();
        candidates.sort_by(|&a, &b| v.get(b, y).total_cmp(&v.get(a, y)).then(a.cmp(&b)));
        if candidates.len() < need[y] {
            unsatisfied.push(y);
        }
        for &c in candidates.iter().take(need[y]) {
            assigned[c][y] = true;
            held[c] += 1;
        }
    }
    if !unsatisfied.is_empty() {
        return Err(Error::Infeasible(format!(
            "no room left for labels {unsatisfied:?}"
        )));
    }

    for c in 0..nc {
        if held[c] > 0 {
            continue;
        }
        if n_client[c] == 0 {
            return Err(Error::Infeasible(format!("client {c} may hold no label")));
        }
        let best = (0..ny)
            .filter(|&y| v.get(c, y) > 0.0)
            .max_by(|&a, &b| v.get(c, a).total_cmp(&v.get(c, b)).then(b.cmp(&a)));
        match best {
            Some(y) => {
                assigned[c][y] = true;
                held[c] = 1;
            }
            None => return Err(Error::Infeasible(format!("client {c} owns no label"))),
        }
    }

    let quotas = even_split(&assigned, v, capacities);
    let gamma = class_weights(&quotas, v)?;
    Ok(CoordinationPlan {
        quotas,
        gamma,
        n_label: n_label.to_vec(),
        n_client: n_client.to_vec(),
    })
}

/// `γ_y = (V_y / ‖V‖₁) / (D_y / ‖D‖₁)`. Labels with no velocity get weight 0.
pub fn class_weights(d: &[Vec<usize>], v: &VelocityMatrix) -> Result<Vec<f64>> {
    let ny = v.label_count();
    let d_total: usize = d.iter().flatten().sum();
    let v_total = v.total();
    let mut gamma = vec![0.0; ny];
    let mut missing = Vec::new();
    for (y, g) in gamma.iter_mut().enumerate() {
        let dy: usize = d.iter().map(|r| r[y]).sum();
        let vy = v.column_sum(y);
        if vy <= 0.0 {
            continue;
        }
        if dy == 0 {
            missing.push(y);
            continue;
        }
        *g = (vy / v_total) / (dy as f64 / d_total as f64);
    }
    if !missing.is_empty() {
        return Err(Error::Infeasible(format!(
            "labels {missing:?} have velocity but no storage"
        )));
    }
    Ok(gamma)
}

/// `ζ_c`: sum of class weights over the buffer's stored samples.
pub fn client_weight(buffer: &StorageBuffer, gamma: &[f64]) -> f64 {
    buffer
        .samples()
        .iter()
        .map(|s| gamma.get(s.label).copied().unwrap_or(0.0))
        .sum()
}

pub const ORACLE_MAX_CELLS: usize = 16;

/// Exhaustive search over label assignments for small instances, under the same
/// constraints the greedy plan satisfies and the same even split.
pub fn exact_assign_oracle(
    v: &VelocityMatrix,
    capacities: &[usize],
    n_label: &[usize],
    n_client: &[usize],
) -> Result<CoordinationPlan> {
    check_shapes(v, capacities, n_label, n_client)?;
    let (nc, ny) = (v.client_count(), v.label_count());
    if nc * ny > ORACLE_MAX_CELLS {
        return Err(Error::config(format!(
            "{nc}x{ny} instance is too large for exhaustive search (max {ORACLE_MAX_CELLS} cells); use greedy_assign"
        )));
    }
    let need = required(v, n_label);
    let cells: Vec<(usize, usize)> = (0..nc)
        .flat_map(|c| (0..ny).map(move |y| (c, y)))
        .filter(|&(c, y)| v.get(c, y) > 0.0)
        .collect();
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for mask in 0u32..(1u32 << cells.len()) {
        let mut assigned = vec![vec![false; ny]; nc];
        for (i, &(c, y)) in cells.iter().enumerate() {
            if mask >> i & 1 == 1 {
                assigned[c][y] = true;
            }
        }
        let row_ok = assigned.iter().enumerate().all(|(c, r)| {
            let k = r.iter().filter(|&&a| a).count();
            k >= 1 && k <= n_client[c]
        });
        let col_ok = (0..ny).all(|y| assigned.iter().filter(|r| r[y]).count() >= need[y]);
        if !(row_ok && col_ok) {
            continue;
        }
        let d = even_split(&assigned, v, capacities);
        let obj = objective(&d, v);
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, d));
        }
    }
    let (_, quotas) =
        best.ok_or_else(|| Error::Infeasible("no assignment satisfies the constraints".into()))?;
    let gamma = class_weights(&quotas, v)?;
    Ok(CoordinationPlan {
        quotas,
        gamma,
        n_label: n_label.to_vec(),
        n_client: n_client.to_vec(),
    })
}
