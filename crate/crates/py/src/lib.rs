//! Python bindings: box geometry, an in-process staging cluster with client
//! sessions, and the device benchmark.

use std::path::PathBuf;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyTimeoutError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use stagespace::bench::devbench::{run_devbench as run_cell, DevbenchConfig, DevbenchTarget};
use stagespace::bench::pattern;
use stagespace::bench::report::{AccessPattern, RwMix};
use stagespace::client::StagingSession;
use stagespace::directory::DistGrid;
use stagespace::geometry::{self, RegionBuffer};
use stagespace::protocol::{LocalCluster, ServerStat};
use stagespace::tier::TierConfig;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(name = "NDBox", module = "stagespace_py", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct PyBox(geometry::NDBox);

#[pymethods]
impl PyBox {
    /// Half-open box `[lower, upper)`.
    #[new]
    fn new(lower: Vec<u64>, upper: Vec<u64>) -> PyResult<Self> {
        geometry::NDBox::new(&lower, &upper).map(PyBox).map_err(value_err)
    }

    #[staticmethod]
    fn from_extents(extents: Vec<u64>) -> PyResult<Self> {
        geometry::NDBox::from_extents(&extents).map(PyBox).map_err(value_err)
    }

    #[getter]
    fn lower(&self) -> Vec<u64> {
        self.0.lower().to_vec()
    }

    #[getter]
    fn upper(&self) -> Vec<u64> {
        self.0.upper().to_vec()
    }

    #[getter]
    fn ndims(&self) -> usize {
        self.0.ndims()
    }

    fn volume(&self) -> u64 {
        self.0.volume()
    }

    fn intersect(&self, other: &PyBox) -> PyResult<Option<PyBox>> {
        Ok(self.0.intersect(&other.0).map_err(value_err)?.map(PyBox))
    }

    fn intersects(&self, other: &PyBox) -> bool {
        self.0.intersects(&other.0)
    }

    fn contains(&self, other: &PyBox) -> bool {
        self.0.contains_box(&other.0)
    }

    fn subtract(&self, other: &PyBox) -> PyResult<Vec<PyBox>> {
        Ok(self.0.subtract(&other.0).map_err(value_err)?.into_iter().map(PyBox).collect())
    }

    fn __repr__(&self) -> String {
        format!("NDBox({:?}, {:?})", self.0.lower(), self.0.upper())
    }
}

#[pyfunction]
fn decompose_grid(global: &PyBox, parts: Vec<u64>) -> PyResult<Vec<PyBox>> {
    Ok(geometry::decompose_grid(&global.0, &parts)
        .map_err(value_err)?
        .into_iter()
        .map(PyBox)
        .collect())
}

#[pyfunction]
fn covers(target: &PyBox, pieces: Vec<PyBox>) -> PyResult<bool> {
    let pieces: Vec<_> = pieces.into_iter().map(|p| p.0).collect();
    geometry::covers(&target.0, &pieces).map_err(value_err)
}

/// Pattern bytes of `region` for (`var`, `version`) inside `global`.
#[pyfunction]
#[pyo3(signature = (var, version, global_box, region, element_size = 8))]
fn seeded_pattern<'py>(
    py: Python<'py>,
    var: &str,
    version: u32,
    global_box: &PyBox,
    region: &PyBox,
    element_size: usize,
) -> Bound<'py, PyBytes> {
    let buf = pattern::fill_pattern(var, version, &global_box.0, &region.0, element_size);
    PyBytes::new(py, buf.bytes())
}

fn stat_dict<'py>(py: Python<'py>, s: &ServerStat) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("server_id", s.server_id)?;
    d.set_item("descriptor_count", s.descriptor_count)?;
    d.set_item("pending_gets", s.pending_gets)?;
    d.set_item("notify_sent", s.notify_sent)?;
    d.set_item("notify_retries", s.notify_retries)?;
    d.set_item("notify_failures", s.notify_failures)?;
    d.set_item("used_bytes", s.tier.used_bytes)?;
    d.set_item("capacity_bytes", s.tier.capacity_bytes)?;
    d.set_item("chunk_count", s.tier.chunk_count)?;
    d.set_item("read_bytes", s.tier.cumulative_read_bytes)?;
    d.set_item("write_bytes", s.tier.cumulative_write_bytes)?;
    Ok(d)
}

/// Staging servers running on loopback inside this process.
#[pyclass(name = "Cluster", module = "stagespace_py", unsendable)]
struct PyCluster {
    inner: Option<LocalCluster>,
}

impl PyCluster {
    fn get(&self) -> PyResult<&LocalCluster> {
        self.inner.as_ref().ok_or_else(|| runtime_err("cluster is shut down"))
    }
}

#[pymethods]
impl PyCluster {
    #[new]
    #[pyo3(signature = (extents, block, servers, tier = "heap", capacity = 1 << 30))]
    fn new(extents: Vec<u64>, block: Vec<u64>, servers: u32, tier: &str, capacity: u64) -> PyResult<Self> {
        let global = geometry::NDBox::from_extents(&extents).map_err(value_err)?;
        let grid = DistGrid::new(global, block, servers).map_err(value_err)?;
        let base = TierConfig::parse(tier, capacity).map_err(value_err)?;
        let cluster = LocalCluster::start(grid, |cfg| {
            let mut t = base.clone();
            // Each server needs its own backing file.
            if let Some(p) = &t.backing_path {
                let mut name = p.as_os_str().to_owned();
                name.push(format!(".{}", cfg.server_id));
                t.backing_path = Some(PathBuf::from(name));
            }
            cfg.tier = t;
        })
        .map_err(runtime_err)?;
        Ok(Self { inner: Some(cluster) })
    }

    #[getter]
    fn addresses(&self) -> PyResult<Vec<String>> {
        Ok(self.get()?.addresses().to_vec())
    }

    #[getter]
    fn global_box(&self) -> PyResult<PyBox> {
        Ok(PyBox(*self.get()?.grid().global()))
    }

    #[pyo3(signature = (element_size = 8))]
    fn session(&self, element_size: u32) -> PyResult<PySession> {
        Ok(PySession(self.get()?.session().with_element_size(element_size)))
    }

    fn stat<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.get()?.servers().iter().map(|s| stat_dict(py, &s.stat())).collect()
    }

    /// Waits for pending peer notifications; true when all were handled.
    #[pyo3(signature = (timeout_s = 5.0))]
    fn quiesce(&self, timeout_s: f64) -> PyResult<bool> {
        Ok(self.get()?.quiesce(Duration::from_secs_f64(timeout_s)))
    }

    fn shutdown(&mut self) {
        if let Some(c) = self.inner.take() {
            c.shutdown();
        }
    }

    fn __enter__(slf: PyRef<'_, Self>) -> PyRef<'_, Self> {
        slf
    }

    fn __exit__(&mut self, _ty: Bound<'_, PyAny>, _value: Bound<'_, PyAny>, _tb: Bound<'_, PyAny>) {
        self.shutdown();
    }
}

/// Client connection set for one cluster.
#[pyclass(name = "Session", module = "stagespace_py", unsendable)]
struct PySession(StagingSession);

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (addresses, extents, block, element_size = 8))]
    fn new(addresses: Vec<String>, extents: Vec<u64>, block: Vec<u64>, element_size: u32) -> PyResult<Self> {
        let global = geometry::NDBox::from_extents(&extents).map_err(value_err)?;
        let grid = DistGrid::new(global, block, addresses.len() as u32).map_err(value_err)?;
        let s = StagingSession::new(addresses, grid).map_err(value_err)?;
        Ok(Self(s.with_element_size(element_size)))
    }

    /// Stores `data` (row-major, `element_size` bytes per element) as
    /// `region` of (`var`, `version`). Returns the pieces as
    /// `(server, box)` pairs.
    fn put(&mut self, var: &str, version: u32, region: &PyBox, data: &[u8]) -> PyResult<Vec<(u32, PyBox)>> {
        let buf = RegionBuffer::new(region.0, self.0.element_size() as usize, data.to_vec()).map_err(value_err)?;
        let pieces = self.0.put(var, version, &buf).map_err(runtime_err)?;
        Ok(pieces.into_iter().map(|(s, b)| (s, PyBox(b))).collect())
    }

    /// Reads `region` of (`var`, `version`), waiting up to `timeout_ms` for
    /// it to be fully staged.
    #[pyo3(signature = (var, version, region, timeout_ms = 0))]
    fn get<'py>(
        &mut self,
        py: Python<'py>,
        var: &str,
        version: u32,
        region: &PyBox,
        timeout_ms: u32,
    ) -> PyResult<Bound<'py, PyBytes>> {
        match self.0.get(var, version, &region.0, timeout_ms) {
            Ok(buf) => Ok(PyBytes::new(py, buf.bytes())),
            Err(e) if e.is_timeout() => Err(PyTimeoutError::new_err(e.to_string())),
            Err(e) => Err(runtime_err(e)),
        }
    }

    fn stat<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.0
            .stat()
            .into_iter()
            .map(|r| stat_dict(py, &r.map_err(runtime_err)?))
            .collect()
    }
}

/// Runs one device benchmark cell and returns its report row.
#[pyfunction]
#[pyo3(signature = (
    target, pattern = "seq", rw = "read", bs = 4096, jobs = 1, qd = 1,
    runtime_s = 1.0, total_bytes = 0, size = 16 << 20, seed = 0, direct = false
))]
#[allow(clippy::too_many_arguments)]
fn run_devbench<'py>(
    py: Python<'py>,
    target: &str,
    pattern: &str,
    rw: &str,
    bs: u64,
    jobs: u32,
    qd: u32,
    runtime_s: f64,
    total_bytes: u64,
    size: u64,
    seed: u64,
    direct: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut c = DevbenchConfig::new(target.parse::<DevbenchTarget>().map_err(value_err)?);
    c.pattern = match pattern {
        "seq" => AccessPattern::Seq,
        "rand" => AccessPattern::Rand,
        other => return Err(value_err(format!("unknown pattern {other:?}"))),
    };
    c.rw = match rw {
        "read" => RwMix::Read,
        "write" => RwMix::Write,
        "mix50" => RwMix::Mix50,
        other => return Err(value_err(format!("unknown rw mix {other:?}"))),
    };
    c.bs = bs;
    c.jobs = jobs;
    c.qd = qd;
    c.runtime = Duration::try_from_secs_f64(runtime_s).map_err(value_err)?;
    c.total_bytes = total_bytes;
    c.size = size;
    c.seed = seed;
    c.direct = direct;
    let row = py.detach(|| run_cell(&c)).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("pattern", pattern)?;
    d.set_item("rw", rw)?;
    d.set_item("bs", row.bs)?;
    d.set_item("jobs", row.jobs)?;
    d.set_item("qd", row.qd)?;
    d.set_item("direct", row.direct)?;
    d.set_item("mib_per_s", row.mib_per_s)?;
    d.set_item("iops", row.iops)?;
    d.set_item("mean_lat_us", row.mean_lat_us)?;
    d.set_item("p99_lat_us", row.p99_lat_us)?;
    d.set_item("ops", row.ops)?;
    d.set_item("bytes_moved", row.bytes_moved)?;
    d.set_item("elapsed_s", row.elapsed_s)?;
    Ok(d)
}

#[pymodule]
fn stagespace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyCluster>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(decompose_grid, m)?)?;
    m.add_function(wrap_pyfunction!(covers, m)?)?;
    m.add_function(wrap_pyfunction!(seeded_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(run_devbench, m)?)?;
    Ok(())
}
