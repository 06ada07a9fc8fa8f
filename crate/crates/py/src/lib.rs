//! Python bindings. Results with nested structure come back as plain
//! dictionaries and lists.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use cachesub_core::coalition::{eta_distribution, optimal_set, shapley_oracle, zeta_distribution, CoGameInstance};
use cachesub_core::demand::{CpDemand, DemandModel};
use cachesub_core::net::{AnoId, Capacity, Node, NodeId, TreeNetwork};
use cachesub_core::opt::{orchestrate, AlgoParams};
use cachesub_core::protocol::{audit_privacy, run_protocol, Fault};
use cachesub_core::scenario::Scenario as CoreScenario;
use cachesub_core::tradeoff::{savings_curve as core_savings_curve, TierParams};
use cachesub_core::ufl::{brute_force_ufl as core_brute_force, solve_ufl as core_solve_ufl, UflInstance};
use cachesub_core::{CpId, Error};

create_exception!(cachesub, CachesubError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::InvalidNetwork(_) | Error::InvalidPlacement(_) | Error::Scenario(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => CachesubError::new_err(e.to_string()),
    }
}

/// Serializes through JSON into Python objects.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| CachesubError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn capacity(c: Option<f64>) -> Capacity {
    c.map_or(Capacity::Unbounded, Capacity::Finite)
}

/// A tree network. Node 0 is the central office.
#[pyclass(frozen, skip_from_py_object, module = "cachesub")]
#[derive(Clone)]
struct Network {
    inner: TreeNetwork,
}

#[pymethods]
impl Network {
    /// `parents[0]` and `anos[0]` must be None; `None` capacities are unbounded.
    #[new]
    #[pyo3(signature = (parents, anos, storage_price, uplink_price, storage_cap=None, uplink_cap=None))]
    fn new(
        parents: Vec<Option<usize>>,
        anos: Vec<Option<usize>>,
        storage_price: Vec<f64>,
        uplink_price: Vec<f64>,
        storage_cap: Option<Vec<Option<f64>>>,
        uplink_cap: Option<Vec<Option<f64>>>,
    ) -> PyResult<Self> {
        let n = parents.len();
        if [anos.len(), storage_price.len(), uplink_price.len()].iter().any(|&l| l != n) {
            return Err(PyValueError::new_err("all per-node lists need the same length"));
        }
        let storage_cap = storage_cap.unwrap_or_else(|| vec![None; n]);
        let uplink_cap = uplink_cap.unwrap_or_else(|| vec![None; n]);
        if storage_cap.len() != n || uplink_cap.len() != n {
            return Err(PyValueError::new_err("all per-node lists need the same length"));
        }
        let nodes = (0..n)
            .map(|i| Node {
                parent: parents[i].map(NodeId),
                storage_price: storage_price[i],
                uplink_price: uplink_price[i],
                storage_cap: capacity(storage_cap[i]),
                uplink_cap: capacity(uplink_cap[i]),
                ano: anos[i].map(AnoId),
            })
            .collect();
        Ok(Network { inner: TreeNetwork::new(nodes).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn leaves(&self) -> Vec<usize> {
        self.inner.leaves().iter().map(|n| n.0).collect()
    }

    fn parent(&self, n: usize) -> PyResult<Option<usize>> {
        if n >= self.inner.len() {
            return Err(PyValueError::new_err(format!("no node {n}")));
        }
        Ok(self.inner.parent(NodeId(n)).map(|p| p.0))
    }

    #[getter]
    fn ano_count(&self) -> usize {
        self.inner.ano_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(nodes={}, leaves={}, anos={})",
            self.inner.len(),
            self.inner.leaves().len(),
            self.inner.ano_count()
        )
    }
}

/// Per-provider demand on a network.
#[pyclass(frozen, skip_from_py_object, module = "cachesub")]
#[derive(Clone)]
struct Demand {
    inner: DemandModel,
}

#[pymethods]
impl Demand {
    /// One provider per entry of `providers`: a list of `(leaf, file, rate)` rows
    /// over a catalog of `files[k]` contents.
    #[staticmethod]
    fn explicit(
        network: &Network,
        file_size_gb: f64,
        files: Vec<usize>,
        providers: Vec<Vec<(usize, usize, f64)>>,
    ) -> PyResult<Self> {
        if files.len() != providers.len() {
            return Err(PyValueError::new_err("one catalog size per provider"));
        }
        let cps = files
            .iter()
            .zip(&providers)
            .map(|(&f, rows)| {
                let rows: Vec<_> = rows.iter().map(|&(l, f, r)| (NodeId(l), f, r)).collect();
                CpDemand::explicit(&network.inner, f, &rows)
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        Ok(Demand { inner: DemandModel::new(file_size_gb, cps).map_err(err)? })
    }

    /// Zipf demand; `per_ano_mbps[k][a]` is split evenly over ANO `a`'s leaves.
    #[staticmethod]
    #[pyo3(signature = (network, file_size_gb, files, alpha, per_ano_mbps, seed=0, permute_per_ano=false))]
    fn zipf(
        network: &Network,
        file_size_gb: f64,
        files: usize,
        alpha: f64,
        per_ano_mbps: Vec<Vec<f64>>,
        seed: u64,
        permute_per_ano: bool,
    ) -> PyResult<Self> {
        let cps = per_ano_mbps
            .iter()
            .enumerate()
            .map(|(k, totals)| {
                let t = totals.iter().enumerate().map(|(a, &x)| (AnoId(a), x)).collect();
                CpDemand::synthesize_zipf(&network.inner, files, &t, alpha, permute_per_ano, seed + k as u64)
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        Ok(Demand { inner: DemandModel::new(file_size_gb, cps).map_err(err)? })
    }

    #[getter]
    fn providers(&self) -> usize {
        self.inner.cps.len()
    }
}

/// A parsed scenario file.
#[pyclass(frozen, module = "cachesub")]
struct Scenario {
    inner: CoreScenario,
}

#[pymethods]
impl Scenario {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        CoreScenario::parse(text)
            .map(|inner| Scenario { inner })
            .map_err(|ds| PyValueError::new_err(ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| pyo3::exceptions::PyOSError::new_err(format!("{path}: {e}")))?;
        Scenario::new(&text)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn with_seed(&self, seed: u64) -> Self {
        Scenario { inner: self.inner.clone().with_seed(seed) }
    }

    fn network(&self) -> PyResult<Network> {
        Ok(Network { inner: self.inner.network().map_err(err)? })
    }

    fn demand(&self, network: &Network) -> PyResult<Demand> {
        Ok(Demand { inner: self.inner.demand(&network.inner).map_err(err)? })
    }

    /// Optimizes the base network with the scenario's algorithm settings.
    fn optimize(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let net = self.inner.network().map_err(err)?;
        let demand = self.inner.demand(&net).map_err(err)?;
        let params = self.inner.algo();
        let r = py.detach(|| orchestrate(&net, &demand, &params)).map_err(err)?;
        to_py(py, &r)
    }

    /// Savings curve rows of the `[tradeoff]` section.
    fn tradeoff(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let (p, gammas) = self.inner.tradeoff().map_err(err)?;
        to_py(py, &core_savings_curve(&p, &gammas).map_err(err)?)
    }
}

fn algo(gamma: f64, tau_max: usize, eps: Option<f64>, project: bool) -> AlgoParams {
    AlgoParams { gamma, tau_max, eps, project, ..AlgoParams::default() }
}

/// Price-based decomposition under capacity limits.
#[pyfunction]
#[pyo3(signature = (network, demand, gamma=1.0, tau_max=500, eps=None, project=true))]
fn optimize(
    py: Python<'_>,
    network: &Network,
    demand: &Demand,
    gamma: f64,
    tau_max: usize,
    eps: Option<f64>,
    project: bool,
) -> PyResult<Py<PyAny>> {
    let params = algo(gamma, tau_max, eps, project);
    let r = py.detach(|| orchestrate(&network.inner, &demand.inner, &params)).map_err(err)?;
    to_py(py, &r)
}

/// The same optimization run as message-passing agents. Returns the result,
/// the transcript entries and the privacy audit outcome.
#[pyfunction]
#[pyo3(signature = (network, demand, gamma=1.0, tau_max=500, drop_cp=None))]
fn simulate_protocol(
    py: Python<'_>,
    network: &Network,
    demand: &Demand,
    gamma: f64,
    tau_max: usize,
    drop_cp: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let params = algo(gamma, tau_max, None, true);
    let faults: Vec<Fault> = drop_cp.map(|k| Fault::DropCp { cp: CpId(k), from_tau: 1 }).into_iter().collect();
    let run = py.detach(|| run_protocol(&network.inner, &demand.inner, &params, &faults)).map_err(err)?;
    let leaks = audit_privacy(&run.transcript).err().unwrap_or_default();
    let out = serde_json::json!({
        "result": run.result,
        "transcript": run.transcript.entries,
        "leaks": leaks,
    });
    to_py(py, &out)
}

fn ufl_instance<'a>(
    network: &'a Network,
    open_cost: Vec<f64>,
    link_cost: Vec<f64>,
    demand: Vec<f64>,
) -> UflInstance<'a> {
    UflInstance { net: &network.inner, open_cost, link_cost, demand }
}

/// Optimal single-content placement; returns open nodes, servers and cost.
#[pyfunction]
fn solve_ufl(
    py: Python<'_>,
    network: &Network,
    open_cost: Vec<f64>,
    link_cost: Vec<f64>,
    demand: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    let sol = core_solve_ufl(&ufl_instance(network, open_cost, link_cost, demand)).map_err(err)?;
    to_py(py, &sol)
}

/// Exhaustive search over all open sets (small trees only).
#[pyfunction]
fn brute_force_ufl(
    py: Python<'_>,
    network: &Network,
    open_cost: Vec<f64>,
    link_cost: Vec<f64>,
    demand: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    let sol = core_brute_force(&ufl_instance(network, open_cost, link_cost, demand)).map_err(err)?;
    to_py(py, &sol)
}

/// Savings of the tier configurations at each cost factor.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn savings_curve(
    py: Python<'_>,
    e1: usize,
    e2: usize,
    catalog_gb: f64,
    alpha: f64,
    storage_price: [f64; 3],
    bandwidth_price: [f64; 3],
    gammas: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    let p = TierParams { e1, e2, total_demand: 1.0, catalog_gb, alpha, storage_price, bandwidth_price };
    to_py(py, &core_savings_curve(&p, &gammas).map_err(err)?)
}

/// Central-office sharing game: `demand[a][f]` per ANO and file, per-content
/// prices and subsidy shares. Returns the optimal set and both distributions.
#[pyfunction]
fn share_savings(
    py: Python<'_>,
    demand: Vec<Vec<f64>>,
    storage_price: f64,
    bandwidth_price: f64,
    shares: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    let g = CoGameInstance::new(demand, storage_price, bandwidth_price, shares).map_err(err)?;
    let set = optimal_set(&g).map_err(err)?;
    let out = serde_json::json!({
        "cached": set,
        "eta": eta_distribution(&g, &set).map_err(err)?,
        "zeta": zeta_distribution(&g, &set).map_err(err)?,
    });
    to_py(py, &out)
}

/// Exact Shapley values; index 0 is the provider.
#[pyfunction]
fn shapley(demand: Vec<Vec<f64>>, storage_price: f64, bandwidth_price: f64) -> PyResult<Vec<f64>> {
    let shares = vec![0.0; demand.len()];
    let g = CoGameInstance::new(demand, storage_price, bandwidth_price, shares).map_err(err)?;
    Ok(shapley_oracle(&g).map_err(err)?.into_iter().map(|(_, v)| v).collect())
}

#[pymodule]
fn cachesub(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CachesubError", m.py().get_type::<CachesubError>())?;
    m.add_class::<Network>()?;
    m.add_class::<Demand>()?;
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ufl, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_ufl, m)?)?;
    m.add_function(wrap_pyfunction!(savings_curve, m)?)?;
    m.add_function(wrap_pyfunction!(share_savings, m)?)?;
    m.add_function(wrap_pyfunction!(shapley, m)?)?;
    Ok(())
}
