//! The ragged observation panel and its long-format CSV encoding.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete observations of one curve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Curve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Dimension(format!(
                "curve has {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Panel `{(t_ijz, Y_ijz)}` for subjects `i ∈ [p]` and curves `j ∈ [J]`.
///
/// Indices are zero-based in memory and one-based in the CSV encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    p: usize,
    j: usize,
    curves: Vec<Curve>,
    noise_variances: Option<Vec<f64>>,
}

impl ObservationSet {
    /// `curves` in subject-major order: `curves[i * J + j]`.
    pub fn new(p: usize, j: usize, curves: Vec<Curve>) -> Result<Self> {
        if p == 0 || j == 0 {
            return Err(Error::InsufficientData("panel needs p >= 1 and J >= 1".into()));
        }
        if curves.len() != p * j {
            return Err(Error::Dimension(format!(
                "expected {} curves for p = {p}, J = {j}, got {}",
                p * j,
                curves.len()
            )));
        }
        if let Some(c) = curves.iter().find(|c| c.times.len() != c.values.len()) {
            return Err(Error::Dimension(format!(
                "curve with {} times and {} values",
                c.times.len(),
                c.values.len()
            )));
        }
        Ok(Self { p, j, curves, noise_variances: None })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn curve(&self, i: usize, j: usize) -> &Curve {
        &self.curves[i * self.j + j]
    }

    pub fn subject_curves(&self, i: usize) -> &[Curve] {
        &self.curves[i * self.j..(i + 1) * self.j]
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn count(&self, i: usize, j: usize) -> usize {
        self.curve(i, j).len()
    }

    pub fn total_count(&self) -> usize {
        self.curves.iter().map(Curve::len).sum()
    }

    /// `N̄ = Σ N_ij / (pJ)`.
    pub fn mean_count(&self) -> f64 {
        self.total_count() as f64 / (self.p * self.j) as f64
    }

    pub fn noise_variances(&self) -> Option<&[f64]> {
        self.noise_variances.as_deref()
    }

    pub fn set_noise_variances(&mut self, sigma2: Vec<f64>) -> Result<()> {
        if sigma2.len() != self.p {
            return Err(Error::Dimension(format!(
                "{} noise variances for {} subjects",
                sigma2.len(),
                self.p
            )));
        }
        if sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invariant("noise variances must be positive".into()));
        }
        self.noise_variances = Some(sigma2);
        Ok(())
    }

    /// Keeps only the first `j` curves of every subject.
    pub fn truncate_curves(&self, j: usize) -> Result<Self> {
        if j == 0 || j > self.j {
            return Err(Error::Argument(format!("cannot truncate {} curves to {j}", self.j)));
        }
        let curves = (0..self.p)
            .flat_map(|i| self.subject_curves(i)[..j].iter().cloned())
            .collect();
        Self::new(self.p, j, curves)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let mut rows: Vec<CsvRow> = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec?);
        }
        if rows.is_empty() {
            return Err(Error::InsufficientData("observation file contains no rows".into()));
        }
        let p = rows.iter().map(|r| r.subject).max().unwrap_or(0);
        let j = rows.iter().map(|r| r.curve).max().unwrap_or(0);
        if rows.iter().any(|r| r.subject == 0 || r.curve == 0) {
            return Err(Error::Validation("subject and curve indices are 1-based".into()));
        }
        let mut curves = vec![Curve::default(); p * j];
        for r in rows {
            let c = &mut curves[(r.subject - 1) * j + (r.curve - 1)];
            c.times.push(r.time);
            c.values.push(r.value);
        }
        Self::new(p, j, curves)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        for i in 0..self.p {
            for jj in 0..self.j {
                let c = self.curve(i, jj);
                for (&t, &y) in c.times.iter().zip(&c.values) {
                    wtr.serialize(CsvRow { subject: i + 1, curve: jj + 1, time: t, value: y })?;
                }
            }
        }
        if self.total_count() == 0 {
            wtr.write_record(["subject", "curve", "time", "value"])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    subject: usize,
    curve: usize,
    time: f64,
    value: f64,
}

/// A problem found by [`validate_observations`].
#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    TimeOutOfRange { subject: usize, curve: usize, time: f64 },
    NonFiniteValue { subject: usize, curve: usize },
    EmptyCurve { subject: usize, curve: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    /// Average observation count per curve for each subject.
    pub subject_mean_counts: Vec<f64>,
    /// Average observation count over all curves.
    pub mean_count: f64,
}

impl ValidationReport {
    /// Issues that make the panel unusable, i.e. everything but empty curves.
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| !matches!(i, Issue::EmptyCurve { .. }))
    }
}

/// Diagnostics only; never fails. Subject and curve indices in the report
/// are zero-based.
pub fn validate_observations(obs: &ObservationSet) -> ValidationReport {
    let mut issues = Vec::new();
    for i in 0..obs.p() {
        for j in 0..obs.j() {
            let c = obs.curve(i, j);
            if c.is_empty() {
                issues.push(Issue::EmptyCurve { subject: i, curve: j });
            }
            for &t in &c.times {
                if !(0.0..=1.0).contains(&t) {
                    issues.push(Issue::TimeOutOfRange { subject: i, curve: j, time: t });
                }
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                issues.push(Issue::NonFiniteValue { subject: i, curve: j });
            }
        }
    }
    let subject_mean_counts = (0..obs.p())
        .map(|i| obs.subject_curves(i).iter().map(Curve::len).sum::<usize>() as f64 / obs.j() as f64)
        .collect();
    ValidationReport { issues, subject_mean_counts, mean_count: obs.mean_count() }
}
