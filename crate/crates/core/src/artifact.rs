//! Single-file model container.
//!
//! Layout: the 8-byte magic `SMPCAART`, a little-endian `u64` manifest
//! length, the JSON manifest, then every array as little-endian `f64` in the
//! order listed by the manifest.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{FilterBank, FilterSet};
use crate::fit::{FitConfig, Method};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::scores::{ScoreArray, ScoreLayout};
use crate::smoothing::{MeanFunctions, NoiseVariances};
use crate::spectral::ScoreSpectralDensity;
use crate::tasks::{FitMetadata, FittedModel};

pub const MAGIC: &[u8; 8] = b"SMPCAART";
pub const FORMAT: &str = "spectral-mpca/1.0";
const FORMAT_NAME: &str = "spectral-mpca";
const FORMAT_MAJOR: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FilterScope {
    Shared,
    PerSubject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    method: Method,
    config: FitConfig,
    meta: FitMetadata,
    p: usize,
    j: usize,
    k: usize,
    lags: Vec<usize>,
    filter_scope: FilterScope,
    arrays: Vec<ArrayEntry>,
}

fn check_format(format: &str) -> Result<()> {
    let version = format
        .strip_prefix(FORMAT_NAME)
        .and_then(|r| r.strip_prefix('/'))
        .ok_or_else(|| Error::Artifact(format!("unrecognised format {format:?}")))?;
    let major: u32 = version
        .split('.')
        .next()
        .and_then(|m| m.parse().ok())
        .ok_or_else(|| Error::Artifact(format!("malformed format version {version:?}")))?;
    if major != FORMAT_MAJOR {
        return Err(Error::Artifact(format!(
            "artifact format {format} is incompatible with this build ({FORMAT})"
        )));
    }
    Ok(())
}

struct Arrays(Vec<(&'static str, Vec<f64>)>);

impl Arrays {
    fn push(&mut self, name: &'static str, values: Vec<f64>) {
        self.0.push((name, values));
    }
}

/// Serializes a fitted model.
pub fn write_model<W: Write>(model: &FittedModel, mut writer: W) -> Result<()> {
    let (p, k) = (model.p(), model.meta.k);
    let mut arrays = Arrays(Vec::new());
    arrays.push("time_grid", model.tgrid().points().to_vec());
    arrays.push("frequency_grid", model.eta.fgrid().points().to_vec());
    arrays.push("means", (0..p).flat_map(|i| model.means.subject(i).iter().copied()).collect());
    let (scope, banks): (_, Vec<&FilterBank>) = match &model.filters {
        FilterSet::Shared(b) => (FilterScope::Shared, vec![b]),
        FilterSet::PerSubject(v) => (FilterScope::PerSubject, v.iter().collect()),
    };
    arrays.push(
        "filters",
        banks.iter().flat_map(|b| b.components().iter().flatten().flatten().copied()).collect(),
    );
    arrays.push("noise_variances", model.noise.values.clone());
    arrays.push(
        "score_spectral_density",
        (0..p).flat_map(|i| (0..k).flat_map(move |kk| model.eta.values(i, kk).iter().copied())).collect(),
    );
    arrays.push("scores", model.scores.values().to_vec());

    let manifest = Manifest {
        format: FORMAT.to_string(),
        method: model.method,
        config: model.config,
        meta: model.meta.clone(),
        p,
        j: model.j(),
        k,
        lags: model.filters.lags().to_vec(),
        filter_scope: scope,
        arrays: arrays.0.iter().map(|(n, v)| ArrayEntry { name: n.to_string(), len: v.len() }).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    writer.write_all(MAGIC)?;
    writer.write_all(&(json.len() as u64).to_le_bytes())?;
    writer.write_all(&json)?;
    let mut buf = Vec::with_capacity(arrays.0.iter().map(|(_, v)| v.len() * 8).sum());
    for (_, values) in &arrays.0 {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    writer.write_all(&buf)?;
    writer.flush()?;
    Ok(())
}

fn read_f64s<R: Read>(reader: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::Artifact(format!("truncated payload: {e}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn chunk(values: &[f64], size: usize) -> Vec<Vec<f64>> {
    values.chunks(size).map(<[f64]>::to_vec).collect()
}

/// Reads a model written by [`write_model`].
pub fn read_model<R: Read>(mut reader: R) -> Result<FittedModel> {
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Artifact("file too short to be a model artifact".into()))?;
    if &magic != MAGIC {
        return Err(Error::Artifact("not a model artifact (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(|_| Error::Artifact("truncated header".into()))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::Artifact(format!("implausible manifest length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    reader.read_exact(&mut json).map_err(|_| Error::Artifact("truncated manifest".into()))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| Error::Artifact(format!("manifest is not JSON: {e}")))?;
    check_format(raw.get("format").and_then(|f| f.as_str()).unwrap_or(""))?;
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::Artifact(format!("bad manifest: {e}")))?;

    let mut arrays = std::collections::HashMap::new();
    for entry in &m.arrays {
        arrays.insert(entry.name.clone(), read_f64s(&mut reader, entry.len)?);
    }
    let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::Artifact(format!("missing array {name}")));

    let tgrid = TimeGrid::new(take("time_grid")?)?;
    let fgrid = FrequencyGrid::from_points(take("frequency_grid")?)?;
    let (mt, mw) = (tgrid.len(), fgrid.len());
    let (p, k) = (m.p, m.k);
    if m.lags.len() != k || p == 0 || k == 0 {
        return Err(Error::Artifact("inconsistent component counts".into()));
    }
    let expect = |name: &str, v: &[f64], n: usize| {
        if v.len() == n {
            Ok(())
        } else {
            Err(Error::Artifact(format!("array {name} has {} values, expected {n}", v.len())))
        }
    };

    let means = take("means")?;
    expect("means", &means, p * mt)?;
    let means = MeanFunctions::new(tgrid.clone(), chunk(&means, mt))?;

    let per_bank: usize = m.lags.iter().map(|&l| (2 * l + 1) * mt).sum();
    let nbanks = match m.filter_scope {
        FilterScope::Shared => 1,
        FilterScope::PerSubject => p,
    };
    let filters = take("filters")?;
    expect("filters", &filters, nbanks * per_bank)?;
    let mut banks = Vec::with_capacity(nbanks);
    for b in filters.chunks(per_bank) {
        let mut comps = Vec::with_capacity(k);
        let mut off = 0;
        for &l in &m.lags {
            let n = (2 * l + 1) * mt;
            comps.push(chunk(&b[off..off + n], mt));
            off += n;
        }
        banks.push(FilterBank::new(tgrid.clone(), comps)?);
    }
    let filters = match m.filter_scope {
        FilterScope::Shared => FilterSet::Shared(banks.pop().unwrap()),
        FilterScope::PerSubject => FilterSet::PerSubject(banks),
    };

    let noise = take("noise_variances")?;
    expect("noise_variances", &noise, p)?;

    let eta = take("score_spectral_density")?;
    expect("score_spectral_density", &eta, p * k * mw)?;
    let eta = ScoreSpectralDensity::from_raw(fgrid, chunk(&eta, k * mw).iter().map(|v| chunk(v, mw)).collect())?;

    let layout = ScoreLayout::new(p, m.j, m.lags.clone());
    let scores = take("scores")?;
    expect("scores", &scores, layout.dim())?;
    let scores = ScoreArray::new(layout, scores)?;

    Ok(FittedModel {
        method: m.method,
        config: m.config,
        means,
        filters,
        noise: NoiseVariances { values: noise },
        eta,
        scores,
        meta: m.meta,
    })
}

pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_model(model, std::io::BufWriter::new(file))
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Artifact(format!("cannot open model {}: {e}", path.display())))?;
    read_model(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::fit;
    use crate::simgen::{gen_panel, SimConfig};

    fn small_model(method: Method) -> FittedModel {
        let panel = gen_panel(&SimConfig { p: 3, j: 20, seed: 3, ..SimConfig::default() }).unwrap();
        let mut cfg = FitConfig::default();
        cfg.grid.m_t = 21;
        cfg.grid.m_omega = 32;
        fit(&panel.observations, &cfg, method).unwrap()
    }

    fn roundtrip(model: &FittedModel) -> FittedModel {
        let mut buf = Vec::new();
        write_model(model, &mut buf).unwrap();
        read_model(buf.as_slice()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for method in [Method::SpectralMpca, Method::IndividualSpectral] {
            let model = small_model(method);
            let back = roundtrip(&model);
            assert_eq!(back, model);
            let bits = |m: &FittedModel| m.scores.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&model));
            let (mut a, mut b) = (Vec::new(), Vec::new());
            write_model(&model, &mut a).unwrap();
            write_model(&back, &mut b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn major_version_mismatch_is_refused() {
        assert!(check_format("spectral-mpca/1.7").is_ok());
        assert!(matches!(check_format("spectral-mpca/2.0"), Err(Error::Artifact(_))));
        assert!(matches!(check_format("other/1.0"), Err(Error::Artifact(_))));

        let model = small_model(Method::SpectralMpca);
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(buf[16..16 + len].to_vec()).unwrap();
        let patched = json.replace(FORMAT, "spectral-mpca/2.0");
        assert_eq!(patched.len(), json.len());
        buf.splice(16..16 + len, patched.into_bytes());
        assert!(matches!(read_model(buf.as_slice()), Err(Error::Artifact(_))));
    }

    #[test]
    fn garbage_and_truncation_are_artifact_errors() {
        assert!(matches!(read_model(&b"not a model"[..]), Err(Error::Artifact(_))));
        let model = small_model(Method::SpectralMpca);
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(read_model(buf.as_slice()), Err(Error::Artifact(_))));
    }
}
