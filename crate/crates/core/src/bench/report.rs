//! CSV reports.

use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const DEVBENCH_HEADER: &str = "pattern,rw,bs,jobs,qd,direct,mib_per_s,iops,mean_lat_us,p99_lat_us";
pub const SCALING_HEADER: &str = "mode,role,clients,servers,timestep,bytes,response_time_s,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AccessPattern {
    Seq,
    Rand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RwMix {
    Read,
    Write,
    Mix50,
}

impl RwMix {
    /// Percentage of operations that are reads.
    pub fn read_percent(self) -> u32 {
        match self {
            RwMix::Read => 100,
            RwMix::Write => 0,
            RwMix::Mix50 => 50,
        }
    }
}

/// One devbench cell. `ops`, `bytes_moved` and `elapsed_s` are kept for
/// accounting checks but are not part of the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevbenchRow {
    pub pattern: AccessPattern,
    pub rw: RwMix,
    pub bs: u64,
    pub jobs: u32,
    pub qd: u32,
    #[serde(with = "flag")]
    pub direct: bool,
    pub mib_per_s: f64,
    pub iops: f64,
    pub mean_lat_us: f64,
    pub p99_lat_us: f64,
    #[serde(skip)]
    pub ops: u64,
    #[serde(skip)]
    pub bytes_moved: u64,
    #[serde(skip)]
    pub elapsed_s: f64,
}

mod flag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(D::Error::custom(format!("expected 0 or 1, got {v}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    Strong,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Writer,
    Reader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    #[serde(rename = "PASSED")]
    Passed,
    #[serde(rename = "FAILED")]
    Failed,
}

/// A timestep number, or `mean` for the per-role summary row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Timestep {
    Step(u32),
    Mean,
}

impl fmt::Display for Timestep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestep::Step(t) => write!(f, "{t}"),
            Timestep::Mean => f.write_str("mean"),
        }
    }
}

impl FromStr for Timestep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Timestep::Mean),
            s => s.parse().map(Timestep::Step).map_err(|_| format!("bad timestep `{s}`")),
        }
    }
}

impl From<Timestep> for String {
    fn from(t: Timestep) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Timestep {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub mode: ScalingMode,
    pub role: Role,
    pub clients: u32,
    pub servers: u32,
    pub timestep: Timestep,
    pub bytes: u64,
    pub response_time_s: f64,
    pub status: Status,
}

fn write_rows<T: Serialize>(w: impl io::Write, header: &str, rows: &[T]) -> csv::Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header.split(','))?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(r: impl io::Read, header: &str) -> csv::Result<Vec<T>> {
    let mut rd = csv::Reader::from_reader(r);
    let found: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if found.join(",") != header {
        return Err(csv::Error::from(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unexpected CSV header `{}`", found.join(",")),
        )));
    }
    rd.deserialize().collect()
}

pub fn write_devbench(w: impl io::Write, rows: &[DevbenchRow]) -> csv::Result<()> {
    write_rows(w, DEVBENCH_HEADER, rows)
}

pub fn read_devbench(r: impl io::Read) -> csv::Result<Vec<DevbenchRow>> {
    read_rows(r, DEVBENCH_HEADER)
}

pub fn write_scaling(w: impl io::Write, rows: &[ScalingRow]) -> csv::Result<()> {
    write_rows(w, SCALING_HEADER, rows)
}

pub fn read_scaling(r: impl io::Read) -> csv::Result<Vec<ScalingRow>> {
    read_rows(r, SCALING_HEADER)
}

/// Overwrites `path` with the devbench CSV.
pub fn emit_devbench(path: impl AsRef<Path>, rows: &[DevbenchRow]) -> csv::Result<()> {
    write_devbench(std::fs::File::create(path)?, rows)
}

/// Overwrites `path` with the scaling CSV.
pub fn emit_scaling(path: impl AsRef<Path>, rows: &[ScalingRow]) -> csv::Result<()> {
    write_scaling(std::fs::File::create(path)?, rows)
}
