//! Process, sensor, network and attack models.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_rows, min_eigenvalue, psd_factor, spectral_radius, symmetrized, validate_pd, validate_psd};

/// Minimum eigenvalue enforced on randomly generated covariances.
pub const RANDOM_MIN_EIGENVALUE: f64 = 1e-3;

/// Undirected communication graph over sensors `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds the graph from 0-based undirected edges. Rejects self loops,
    /// out-of-range endpoints and disconnected graphs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Topology("network must have at least one node".into()));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Topology(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a == b {
                return Err(Error::Topology(format!("self loop at node {a}")));
            }
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let topo = Self { neighbors };
        if !topo.is_connected() {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(topo)
    }

    /// From a symmetric 0/1 adjacency matrix with zero diagonal.
    pub fn from_adjacency(adj: &[Vec<u8>]) -> Result<Self> {
        let n = adj.len();
        let mut edges = Vec::new();
        for (i, row) in adj.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Topology("adjacency matrix is not square".into()));
            }
            if row[i] != 0 {
                return Err(Error::Topology(format!("nonzero diagonal at {i}")));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != adj[j][i] {
                    return Err(Error::Topology("adjacency matrix is not symmetric".into()));
                }
                if v != 0 && i < j {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        Self::from_edges(n, &edges).expect("complete graph is valid")
    }

    pub fn line(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges).expect("line graph is valid")
    }

    /// The five-sensor network used in the experiments (0-based edges
    /// 0–1, 0–2, 1–2, 1–3, 2–4, 3–4).
    pub fn five_node() -> Self {
        Self::from_edges(5, &[(0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4)]).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// `N'_i` ordered as `[i, neighbors...]`.
    pub fn closed_neighborhood(&self, i: usize) -> Vec<usize> {
        std::iter::once(i).chain(self.neighbors[i].iter().copied()).collect()
    }

    pub fn in_closed(&self, i: usize, j: usize) -> bool {
        i == j || self.adjacent(i, j)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &self.neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    c: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl SensorModel {
    pub fn new(c: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != c.nrows() || !r.is_square() {
            return Err(Error::Dimension(format!(
                "sensor: C is {}x{}, R is {}x{}",
                c.nrows(),
                c.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        validate_pd("R", &r)?;
        Ok(Self { c, r: symmetrized(r) })
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    p0: DMatrix<f64>,
    sensors: Vec<SensorModel>,
    topology: Topology,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        p0: DMatrix<f64>,
        sensors: Vec<SensorModel>,
        topology: Topology,
    ) -> Result<Self> {
        let p = a.nrows();
        if !a.is_square() || q.shape() != (p, p) || p0.shape() != (p, p) {
            return Err(Error::Dimension("A, Q and P0 must all be p×p".into()));
        }
        validate_psd("Q", &q)?;
        validate_psd("P0", &p0)?;
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("A".into()));
        }
        if sensors.len() != topology.len() {
            return Err(Error::Dimension(format!(
                "{} sensors for a {}-node topology",
                sensors.len(),
                topology.len()
            )));
        }
        let q_dim = sensors.first().map_or(0, |s| s.obs_dim());
        for (i, s) in sensors.iter().enumerate() {
            if s.state_dim() != p || s.obs_dim() != q_dim {
                return Err(Error::Dimension(format!("sensor {i} has C of shape {:?}", s.c.shape())));
            }
        }
        let model = Self {
            a,
            q: symmetrized(q),
            p0: symmetrized(p0),
            sensors,
            topology,
        };
        for warning in model.assumption_warnings() {
            log::warn!("{warning}");
        }
        Ok(model)
    }

    /// Draws a model whose matrix entries are uniform on [0, 1]. Covariances
    /// are symmetrised and shifted by the smallest multiple of the identity
    /// that makes their minimum eigenvalue at least 1e-3. `A` is redrawn until
    /// its spectral radius is below `max_spectral_radius`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        p: usize,
        q: usize,
        topology: Topology,
        max_spectral_radius: f64,
    ) -> Result<Self> {
        let mut a = uniform_matrix(rng, p, p);
        let mut tries = 0;
        while spectral_radius(&a) >= max_spectral_radius {
            tries += 1;
            if tries > 100_000 {
                return Err(Error::InvalidParameter(format!(
                    "could not draw A with spectral radius below {max_spectral_radius}"
                )));
            }
            a = uniform_matrix(rng, p, p);
        }
        let q_mat = random_covariance(rng, p);
        let sensors = (0..topology.len())
            .map(|_| {
                let c = uniform_matrix(rng, q, p);
                let r = random_covariance(rng, q);
                SensorModel::new(c, r)
            })
            .collect::<Result<Vec<_>>>()?;
        let p0 = random_covariance(rng, p);
        Self::new(a, q_mat, p0, sensors, topology)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p0
    }

    pub fn sensors(&self) -> &[SensorModel] {
        &self.sensors
    }

    pub fn sensor(&self, i: usize) -> &SensorModel {
        &self.sensors[i]
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.sensors.first().map_or(0, |s| s.obs_dim())
    }

    pub fn num_nodes(&self) -> usize {
        self.sensors.len()
    }

    /// Same model on a different graph (used to compare topologies).
    pub fn with_topology(&self, topology: Topology) -> Result<Self> {
        Self::new(self.a.clone(), self.q.clone(), self.p0.clone(), self.sensors.clone(), topology)
    }

    /// PBH rank tests for stabilisability of `(A, Q^½)` and observability of
    /// each `(A, C_i)` at tolerance 1e-8. Failures are returned as messages.
    pub fn assumption_warnings(&self) -> Vec<String> {
        let p = self.state_dim();
        let eigs = self.a.complex_eigenvalues();
        let q_half = psd_factor(&self.q);
        let mut out = Vec::new();
        for lambda in eigs.iter() {
            let shifted = complex(&self.a) - DMatrix::<Complex<f64>>::identity(p, p) * *lambda;
            if lambda.norm() >= 1.0 {
                let stacked = hstack(&shifted, &complex(&q_half));
                if complex_rank(&stacked) < p {
                    out.push(format!("(A, Q^1/2) fails the PBH stabilisability test at eigenvalue {lambda}"));
                }
            }
            for (i, s) in self.sensors.iter().enumerate() {
                let stacked = vstack(&shifted, &complex(&s.c));
                if complex_rank(&stacked) < p {
                    out.push(format!("(A, C_{}) fails the PBH observability test at eigenvalue {lambda}", i + 1));
                }
            }
        }
        out
    }
}

fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // row-major draw order
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.random::<f64>();
        }
    }
    m
}

fn random_covariance<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let raw = uniform_matrix(rng, n, n);
    make_positive_definite(symmetrized(raw), RANDOM_MIN_EIGENVALUE)
}

/// Shifts a symmetric matrix by `c·I` with the smallest `c ≥ 0` that brings
/// its minimum eigenvalue up to `floor`.
pub fn make_positive_definite(m: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let shift = (floor - min_eigenvalue(&m)).max(0.0);
    let n = m.nrows();
    symmetrized(m + DMatrix::identity(n, n) * shift)
}

fn complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|v| Complex::new(v, 0.0))
}

fn hstack(a: &DMatrix<Complex<f64>>, b: &DMatrix<Complex<f64>>) -> DMatrix<Complex<f64>> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

fn vstack(a: &DMatrix<Complex<f64>>, b: &DMatrix<Complex<f64>>) -> DMatrix<Complex<f64>> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    svd.singular_values.iter().filter(|&&s| s > 1e-8 * smax.max(1.0)).count()
}

/// When the attacker starts injecting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Onset {
    Never,
    At(usize),
}

impl Onset {
    pub fn time(self) -> Option<usize> {
        match self {
            Onset::Never => None,
            Onset::At(t) => Some(t),
        }
    }

    pub fn is_active(self, t: usize) -> bool {
        matches!(self, Onset::At(tau) if t >= tau)
    }
}

/// Additive zero-mean Gaussian injection with covariance `Σ` on a single
/// sensor from `onset` onward.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackModel {
    target: usize,
    onset: Onset,
    sigma: DMatrix<f64>,
}

impl AttackModel {
    pub fn new(target: usize, onset: Onset, sigma: DMatrix<f64>) -> Result<Self> {
        validate_psd("Sigma", &sigma)?;
        if let Onset::At(0) = onset {
            return Err(Error::InvalidParameter("attack onset must be at least 1".into()));
        }
        Ok(Self {
            target,
            onset,
            sigma: symmetrized(sigma),
        })
    }

    pub fn none(obs_dim: usize) -> Self {
        Self {
            target: 0,
            onset: Onset::Never,
            sigma: DMatrix::zeros(obs_dim, obs_dim),
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn onset(&self) -> Onset {
        self.onset
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn with_onset(&self, onset: Onset) -> Self {
        Self { onset, ..self.clone() }
    }

    /// True when sensor `i` is being attacked at time `t`.
    pub fn active(&self, i: usize, t: usize) -> bool {
        i == self.target && self.onset.is_active(t)
    }

    pub fn validate_for(&self, model: &SystemModel) -> Result<()> {
        if self.target >= model.num_nodes() {
            return Err(Error::InvalidParameter(format!(
                "attacked sensor {} out of range for {} nodes",
                self.target + 1,
                model.num_nodes()
            )));
        }
        let q = model.obs_dim();
        if self.sigma.shape() != (q, q) {
            return Err(Error::Dimension(format!("Sigma must be {q}x{q}")));
        }
        Ok(())
    }
}

/// Matrix given as nested row-major rows, the form used in config files.
pub fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn five_node_degrees() {
        let t = Topology::five_node();
        let degrees: Vec<_> = (0..5).map(|i| t.degree(i)).collect();
        assert_eq!(degrees, vec![2, 3, 3, 2, 2]);
        assert!(t.adjacent(0, 1));
        assert_eq!(t.closed_neighborhood(1), vec![1, 0, 2, 3]);
    }

    #[test]
    fn disconnected_graph_rejected() {
        assert!(Topology::from_edges(4, &[(0, 1), (2, 3)]).is_err());
        assert!(Topology::from_edges(2, &[(0, 0)]).is_err());
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let adj = vec![vec![0, 1], vec![0, 0]];
        assert!(Topology::from_adjacency(&adj).is_err());
        let ok = vec![vec![0, 1], vec![1, 0]];
        assert_eq!(Topology::from_adjacency(&ok).unwrap(), Topology::line(2));
    }

    #[test]
    fn random_model_is_valid_and_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SystemModel::random(&mut rng, 2, 2, Topology::five_node(), 1.0).unwrap();
        assert!(spectral_radius(m.a()) < 1.0);
        assert!(min_eigenvalue(m.q()) >= RANDOM_MIN_EIGENVALUE - 1e-12);
        for s in m.sensors() {
            assert!(min_eigenvalue(s.r()) >= RANDOM_MIN_EIGENVALUE - 1e-12);
        }
    }

    #[test]
    fn shift_is_minimal() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let pd = make_positive_definite(m, 1e-3);
        assert!((min_eigenvalue(&pd) - 1e-3).abs() < 1e-12);
        let already = DMatrix::<f64>::identity(2, 2);
        assert_eq!(make_positive_definite(already.clone(), 1e-3), already);
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let c = DMatrix::identity(1, 1);
        assert!(SensorModel::new(c.clone(), DMatrix::from_element(1, 1, -1.0)).is_err());
        assert!(AttackModel::new(0, Onset::At(1), DMatrix::from_element(1, 1, -1.0)).is_err());
        assert!(AttackModel::new(0, Onset::At(0), DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn pbh_flags_unobservable_pair() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.7]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let s = SensorModel::new(c, DMatrix::identity(1, 1)).unwrap();
        let m = SystemModel::new(a, DMatrix::identity(2, 2), DMatrix::identity(2, 2), vec![s], Topology::complete(1))
            .unwrap();
        let w = m.assumption_warnings();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("observability"));
    }
}
